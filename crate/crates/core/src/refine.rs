//! Render-and-compare pose refinement.
//!
//! A coarse pose is scored by rendering the scene from it, encoding the view
//! and taking the cosine similarity with a text embedding. Poses that score
//! below `tau1` are rejected outright; the rest are improved by Adam ascent on
//! a finite-difference gradient over the six tangent coordinates and kept if
//! the best similarity reached clears `tau2`.
//!
//! Translation tangent coordinates are measured in units of the scene scale,
//! so one learning rate serves both rotation (radians) and translation.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine_similarity, ViewEncoder};
use crate::error::{Error, Result};
use crate::geometry::{retract, Pose, TangentDelta};
use crate::par;
use crate::splat::{Camera, GaussianScene};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Minimum similarity of the coarse pose for refinement to start.
    pub tau1: f64,
    /// Minimum similarity of the refined pose for it to be kept.
    pub tau2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Finite-difference step for rotation coordinates, degrees.
    pub delta_rot_deg: f64,
    /// Finite-difference step for translation, as a fraction of scene scale.
    pub delta_trans: f64,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_x_deg: f64,
    /// Fraction of the sampled poses that go through refinement.
    pub subset_fraction: f64,
    /// Keep rejected poses (at their coarse value) instead of dropping them.
    pub keep_rejected: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            tau1: 0.17,
            tau2: 0.2,
            iterations: 100,
            learning_rate: 5e-3,
            delta_rot_deg: 0.5,
            delta_trans: 0.005,
            width: 224,
            height: 224,
            fov_x_deg: 60.0,
            subset_fraction: 0.1,
            keep_rejected: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.tau1,
            self.tau2,
            self.learning_rate,
            self.delta_rot_deg,
            self.delta_trans,
            self.fov_x_deg,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("refinement parameters must be finite"));
        }
        if self.tau1 > self.tau2 {
            return Err(Error::config("tau1 must not exceed tau2"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if !(self.delta_rot_deg > 0.0 && self.delta_trans > 0.0) {
            return Err(Error::config("finite-difference steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.subset_fraction) {
            return Err(Error::config("subset_fraction must lie in [0, 1]"));
        }
        if !(self.fov_x_deg > 0.0 && self.fov_x_deg < 180.0) {
            return Err(Error::config("fov_x_deg must lie in (0, 180)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("render size must be positive"));
        }
        Ok(())
    }

    pub fn camera(&self, pose: Pose) -> Result<Camera> {
        Camera::new(pose, self.fov_x_deg.to_radians(), self.width, self.height)
    }
}

/// What refinement needs to score a pose.
pub struct RefineContext<'a> {
    pub scene: &'a GaussianScene,
    pub encoder: &'a dyn ViewEncoder,
    /// Length unit for translation steps (typically the scene diagonal).
    pub scene_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    /// Best pose found (the input pose when gated out).
    pub pose: Pose,
    pub accepted: bool,
    pub initial_similarity: f64,
    pub final_similarity: f64,
    /// Ascent iterations performed; zero when the coarse pose failed `tau1`.
    pub iterations: usize,
    /// Similarity after each iteration, starting with the coarse pose.
    pub trace: Vec<f64>,
}

/// Cosine similarity between the view from `pose` and `text`.
pub fn similarity_at(
    pose: &Pose,
    text: &[f64],
    ctx: &RefineContext,
    cfg: &RefineConfig,
) -> Result<f64> {
    let view = ctx.encoder.encode_view(ctx.scene, &cfg.camera(*pose)?)?;
    if view.len() != text.len() {
        return Err(Error::config(format!(
            "view embedding has dimension {}, text embedding {}",
            view.len(),
            text.len()
        )));
    }
    Ok(cosine_similarity(&view, text))
}

fn tangent(d: &[f64; 6], scale: f64) -> TangentDelta {
    TangentDelta {
        omega: [d[0], d[1], d[2]],
        v: [d[3] * scale, d[4] * scale, d[5] * scale],
    }
}

/// Refines one pose. Deterministic: no randomness is involved.
pub fn refine_pose(
    coarse: &Pose,
    text: &[f64],
    ctx: &RefineContext,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if !(ctx.scene_scale > 0.0 && ctx.scene_scale.is_finite()) {
        return Err(Error::config("scene scale must be positive"));
    }
    let at = |iteration: usize| {
        move |e: Error| Error::Refinement {
            iteration,
            source: Box::new(e),
        }
    };
    let score = |pose: &Pose, iteration: usize| -> Result<f64> {
        let s = similarity_at(pose, text, ctx, cfg).map_err(at(iteration))?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(at(iteration)(Error::NonFiniteLoss { step: iteration }))
        }
    };

    let initial = score(coarse, 0)?;
    let mut trace = vec![initial];
    if initial < cfg.tau1 {
        return Ok(RefineOutcome {
            pose: *coarse,
            accepted: false,
            initial_similarity: initial,
            final_similarity: initial,
            iterations: 0,
            trace,
        });
    }

    let steps = {
        let r = cfg.delta_rot_deg.to_radians();
        [r, r, r, cfg.delta_trans, cfg.delta_trans, cfg.delta_trans]
    };
    let (mut m, mut v) = ([0.0f64; 6], [0.0f64; 6]);
    let mut current = *coarse;
    let (mut best, mut best_pose) = (initial, *coarse);
    for it in 1..=cfg.iterations {
        let probes = par::try_map_indexed(12, |j| {
            let (k, sign) = (j / 2, if j % 2 == 0 { 1.0 } else { -1.0 });
            let mut d = [0.0; 6];
            d[k] = sign * steps[k];
            score(&retract(&current, &tangent(&d, ctx.scene_scale)), it)
        })?;
        let mut update = [0.0; 6];
        let (c1, c2) = (
            1.0 - ADAM_BETA1.powi(it as i32),
            1.0 - ADAM_BETA2.powi(it as i32),
        );
        for k in 0..6 {
            let g = (probes[2 * k] - probes[2 * k + 1]) / (2.0 * steps[k]);
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
            update[k] = cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
        current = retract(&current, &tangent(&update, ctx.scene_scale));
        let s = score(&current, it)?;
        trace.push(s);
        if s > best {
            best = s;
            best_pose = current;
        }
    }
    Ok(RefineOutcome {
        pose: best_pose,
        accepted: best >= cfg.tau2,
        initial_similarity: initial,
        final_similarity: best,
        iterations: cfg.iterations,
        trace,
    })
}

/// One line of the refinement log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub sample_id: usize,
    pub accepted: bool,
    pub sim_init: f64,
    pub sim_final: f64,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedSet {
    /// Surviving poses in input order: untouched samples, accepted refined
    /// samples, and (with `keep_rejected`) rejected ones at their coarse pose.
    pub poses: Vec<Pose>,
    /// Input index of each surviving pose.
    pub source: Vec<usize>,
    pub outcomes: Vec<OutcomeRecord>,
}

impl RefinedSet {
    pub fn acceptance_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.accepted).count() as f64 / self.outcomes.len() as f64
    }
}

/// Indices of the samples that get refined: a seeded random subset of size
/// `round(fraction * n)`, sorted.
pub fn refinement_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Refines a seeded subset of `samples` and assembles the surviving set.
pub fn refine_distribution(
    samples: &[Pose],
    text: &[f64],
    ctx: &RefineContext,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<RefinedSet> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("no samples to refine"));
    }
    let subset = refinement_subset(samples.len(), cfg.subset_fraction, seed);
    let results = par::try_map_indexed(subset.len(), |j| {
        refine_pose(&samples[subset[j]], text, ctx, cfg)
    })?;
    let mut refined = vec![None; samples.len()];
    let mut outcomes = Vec::with_capacity(subset.len());
    for (&i, r) in subset.iter().zip(results) {
        outcomes.push(OutcomeRecord {
            sample_id: i,
            accepted: r.accepted,
            sim_init: r.initial_similarity,
            sim_final: r.final_similarity,
            iters: r.iterations,
        });
        refined[i] = Some(r);
    }
    let mut poses = Vec::new();
    let mut source = Vec::new();
    for (i, p) in samples.iter().enumerate() {
        let keep = match &refined[i] {
            None => Some(*p),
            Some(r) if r.accepted => Some(r.pose),
            Some(_) if cfg.keep_rejected => Some(*p),
            Some(_) => None,
        };
        if let Some(pose) = keep {
            poses.push(pose);
            source.push(i);
        }
    }
    Ok(RefinedSet {
        poses,
        source,
        outcomes,
    })
}

pub fn write_outcomes(path: &Path, outcomes: &[OutcomeRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for o in outcomes {
        let line = serde_json::to_string(o).map_err(|e| Error::data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_outcomes(path: &Path) -> Result<Vec<OutcomeRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
