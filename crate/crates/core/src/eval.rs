//! Relative distribution accuracy (RDA) and baselines.
//!
//! A sample is a hit when it lies within `k` units of the ground truth, with
//! translation measured in `translation_unit * scene_scale` and rotation in
//! `rotation_unit` degrees. RDA divides the hit rate of a predicted set by the
//! hit rate of uniformly random poses drawn inside the scene bounds.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mixup_select, LossRecord, SceneNormalization, TrainRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    rotation_error_deg, translation_error, uniform_rotation, Pose, PoseVector, Quaternion, Vec3,
};
use crate::numericnet::{
    snap_to_f32, AdamState, Checkpoint, CheckpointHeader, CheckpointKind, CosineWarmup, Regressor,
    RegressorShape, TrainConfig,
};
use crate::par;
use crate::splat::{write_png, write_ppm, RenderedImage};

const EXT_NORMALIZATION: &str = "normalization";
const EXT_BETA_SWAP: &str = "beta_swap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RDAConfig {
    pub k_values: Vec<f64>,
    /// Translation unit as a fraction of the scene scale.
    pub translation_unit: f64,
    /// Rotation unit in degrees.
    pub rotation_unit: f64,
    pub random_trials: usize,
    pub require_rotation: bool,
    /// Random poses drawn per query and trial; defaults to the number of
    /// predicted samples for that query.
    pub random_samples: Option<usize>,
}

impl Default for RDAConfig {
    fn default() -> Self {
        RDAConfig {
            k_values: vec![5.0, 10.0, 15.0],
            translation_unit: 0.10,
            rotation_unit: 1.0,
            random_trials: 20,
            require_rotation: true,
            random_samples: None,
        }
    }
}

impl RDAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::config("k values must be positive"));
        }
        if !(self.translation_unit > 0.0 && self.rotation_unit > 0.0) {
            return Err(Error::config("units must be positive"));
        }
        if self.random_trials == 0 {
            return Err(Error::config("random_trials must be at least 1"));
        }
        if self.random_samples == Some(0) {
            return Err(Error::config("random_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Diagonal of the bounding box of the training camera positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScale(pub f64);

impl SceneScale {
    pub fn from_positions(positions: &[Vec3]) -> Result<Self> {
        let b = Bounds::from_positions(positions)?;
        let d = (0..3)
            .map(|k| (b.max[k] - b.min[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        if d > 0.0 {
            Ok(SceneScale(d))
        } else {
            Err(Error::data(
                "scene scale needs at least two distinct positions",
            ))
        }
    }
}

/// Axis-aligned box. Flat axes are allowed; random translations are then
/// constant along them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn from_positions(positions: &[Vec3]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::data("no positions to bound"));
        }
        let mut b = Bounds {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        };
        for p in positions {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.min.iter().chain(&self.max).all(|v| v.is_finite());
        if !finite || (0..3).any(|k| self.min[k] > self.max[k]) {
            return Err(Error::config("bounds must be finite with min <= max"));
        }
        if (0..3).all(|k| self.min[k] == self.max[k]) {
            return Err(Error::config("bounds collapse to a point"));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        std::array::from_fn(|k| {
            let u: f64 = rng.random();
            self.min[k] + u * (self.max[k] - self.min[k])
        })
    }
}

/// Pose with translation uniform in `bounds` and rotation uniform on SO(3).
pub fn random_pose<R: Rng + ?Sized>(rng: &mut R, bounds: &Bounds) -> Pose {
    let rotation = uniform_rotation(rng);
    Pose {
        rotation,
        translation: bounds.sample(rng),
    }
}

fn within(t_err: f64, r_err: f64, k: f64, cfg: &RDAConfig, scale: SceneScale) -> bool {
    t_err <= k * cfg.translation_unit * scale.0
        && (!cfg.require_rotation || r_err <= k * cfg.rotation_unit)
}

pub fn hit_test(sample: &Pose, gt: &Pose, k: f64, cfg: &RDAConfig, scale: SceneScale) -> bool {
    within(
        translation_error(sample, gt),
        rotation_error_deg(sample, gt),
        k,
        cfg,
        scale,
    )
}

/// Fraction of `samples` that hit `gt`; an empty set scores zero.
pub fn accuracy(samples: &[Pose], gt: &Pose, k: f64, cfg: &RDAConfig, scale: SceneScale) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .filter(|s| hit_test(s, gt, k, cfg, scale))
        .count() as f64
        / samples.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomAccuracy {
    pub mean: f64,
    /// Sample standard deviation over trials (zero for a single trial).
    pub std: f64,
}

fn mean_std(v: &[f64]) -> RandomAccuracy {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    RandomAccuracy { mean, std }
}

/// Per trial, the group-mean random accuracy at each k. Trial `i` draws from
/// stream `i` of `seed`; the same draws are scored at every k.
fn random_trials(
    gts: &[(Pose, usize)],
    cfg: &RDAConfig,
    scale: SceneScale,
    bounds: &Bounds,
    seed: u64,
) -> Vec<Vec<f64>> {
    par::map_indexed(cfg.random_trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut acc = vec![0.0; cfg.k_values.len()];
        for (gt, m) in gts {
            let mut hits = vec![0usize; cfg.k_values.len()];
            for _ in 0..*m {
                let p = random_pose(&mut rng, bounds);
                let (t, r) = (translation_error(&p, gt), rotation_error_deg(&p, gt));
                for (h, k) in hits.iter_mut().zip(&cfg.k_values) {
                    *h += within(t, r, *k, cfg, scale) as usize;
                }
            }
            for (a, h) in acc.iter_mut().zip(&hits) {
                *a += *h as f64 / *m as f64 / gts.len() as f64;
            }
        }
        acc
    })
}

/// Hit rate of `m` uniformly random poses, as mean and spread over
/// `cfg.random_trials` independent trials.
pub fn acc_rand(
    gt: &Pose,
    m: usize,
    k: f64,
    cfg: &RDAConfig,
    scale: SceneScale,
    bounds: &Bounds,
    seed: u64,
) -> Result<RandomAccuracy> {
    let cfg = RDAConfig {
        k_values: vec![k],
        ..cfg.clone()
    };
    cfg.validate()?;
    bounds.validate()?;
    if m == 0 {
        return Err(Error::config("random pool size must be at least 1"));
    }
    let trials = random_trials(&[(*gt, m)], &cfg, scale, bounds, seed);
    Ok(mean_std(&trials.iter().map(|t| t[0]).collect::<Vec<_>>()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdaEntry {
    pub k: f64,
    pub acc_pred: f64,
    pub acc_rand: RandomAccuracy,
    /// `None` when the random baseline scored zero.
    pub rda: Option<f64>,
}

fn ratio(acc_pred: f64, acc_rand: f64) -> Option<f64> {
    (acc_rand > 0.0).then(|| acc_pred / acc_rand)
}

pub fn rda(
    samples: &[Pose],
    gt: &Pose,
    k: f64,
    cfg: &RDAConfig,
    scale: SceneScale,
    bounds: &Bounds,
    seed: u64,
) -> Result<RdaEntry> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let m = cfg.random_samples.unwrap_or(samples.len());
    let acc_rand = acc_rand(gt, m, k, cfg, scale, bounds, seed)?;
    let acc_pred = accuracy(samples, gt, k, cfg, scale);
    Ok(RdaEntry {
        k,
        acc_pred,
        acc_rand,
        rda: ratio(acc_pred, acc_rand.mean),
    })
}

/// A ground-truth pose and the poses predicted for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub gt: Pose,
    pub samples: Vec<Pose>,
}

/// One line of the report: a group of queries at one k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub granularity: String,
    pub k: f64,
    /// Predicted samples per query (mean, rounded).
    #[serde(rename = "M")]
    pub m: usize,
    pub acc_pred: f64,
    pub acc_rand_mean: f64,
    pub acc_rand_std: f64,
    pub rda: Option<f64>,
}

/// Report rows for one group, one per k. Accuracies are averaged over
/// queries and the group RDA is the ratio of the two means.
pub fn evaluate_group(
    label: &str,
    queries: &[Query],
    cfg: &RDAConfig,
    scale: SceneScale,
    bounds: &Bounds,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    bounds.validate()?;
    if queries.is_empty() {
        return Err(Error::config(format!("group {label} has no queries")));
    }
    let pools: Vec<(Pose, usize)> = queries
        .iter()
        .map(|q| (q.gt, cfg.random_samples.unwrap_or(q.samples.len().max(1))))
        .collect();
    let trials = random_trials(&pools, cfg, scale, bounds, seed);
    let total: usize = queries.iter().map(|q| q.samples.len()).sum();
    let m = (total as f64 / queries.len() as f64).round() as usize;
    Ok(cfg
        .k_values
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let acc_pred = queries
                .iter()
                .map(|q| accuracy(&q.samples, &q.gt, k, cfg, scale))
                .sum::<f64>()
                / queries.len() as f64;
            let r = mean_std(&trials.iter().map(|t| t[j]).collect::<Vec<_>>());
            ReportRow {
                granularity: label.to_string(),
                k,
                m,
                acc_pred,
                acc_rand_mean: r.mean,
                acc_rand_std: r.std,
                rda: ratio(acc_pred, r.mean),
            }
        })
        .collect())
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PoseRow {
    id: String,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

/// Writes `id,qw,qx,qy,qz,tx,ty,tz` rows. Floats are written in shortest
/// round-trip form, so reading back is exact.
pub fn write_pose_table(path: &Path, rows: &[(String, Pose)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (id, p) in rows {
        let [qw, qx, qy, qz] = p.rotation.to_array();
        let [tx, ty, tz] = p.translation;
        w.serialize(PoseRow {
            id: id.clone(),
            qw,
            qx,
            qy,
            qz,
            tx,
            ty,
            tz,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pose table. Rotations are taken as stored if already unit and
/// canonical, otherwise normalized.
pub fn read_pose_table(path: &Path) -> Result<Vec<(String, Pose)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<PoseRow>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let q = [row.qw, row.qx, row.qy, row.qz];
        let t = [row.tx, row.ty, row.tz];
        if q.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: "non-finite value".into(),
            });
        }
        let stored = Quaternion::from_array(q);
        let pose = match Pose::new(q, t) {
            Ok(p) if p.rotation == stored => Pose {
                rotation: stored,
                translation: t,
            },
            Ok(p) => p,
            Err(_) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: "zero quaternion".into(),
                })
            }
        };
        out.push((row.id, pose));
    }
    Ok(out)
}

/// Top-down density image of `positions` over the x/y extent of `bounds`
/// (north up), with `markers` drawn as red crosses. Format follows the
/// extension: `.ppm` or PNG.
pub fn write_heatmap(
    path: &Path,
    positions: &[Vec3],
    markers: &[Vec3],
    bounds: &Bounds,
    size: usize,
) -> Result<()> {
    if size == 0 {
        return Err(Error::config("heatmap size must be positive"));
    }
    let span = |k: usize| (bounds.max[k] - bounds.min[k]).max(1e-9);
    let cell = |p: &Vec3| -> Option<(usize, usize)> {
        let u = (p[0] - bounds.min[0]) / span(0);
        let v = (bounds.max[1] - p[1]) / span(1);
        ((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)).then(|| {
            let x = ((u * size as f64) as usize).min(size - 1);
            let y = ((v * size as f64) as usize).min(size - 1);
            (x, y)
        })
    };
    let mut counts = vec![0u32; size * size];
    for p in positions {
        if let Some((x, y)) = cell(p) {
            counts[y * size + x] += 1;
        }
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut pixels: Vec<[f64; 3]> = counts
        .iter()
        .map(|&c| {
            let v = (1.0 + c as f64).ln() / (1.0 + peak).ln();
            [v.sqrt(), v, v * v * 0.6]
        })
        .collect();
    for m in markers {
        if let Some((x, y)) = cell(m) {
            let r = (size / 64).max(1) as isize;
            for d in -r..=r {
                for (dx, dy) in [(d, 0), (0, d)] {
                    let (px, py) = (x as isize + dx, y as isize + dy);
                    if (0..size as isize).contains(&px) && (0..size as isize).contains(&py) {
                        pixels[py as usize * size + px as usize] = [1.0, 0.1, 0.1];
                    }
                }
            }
        }
    }
    let img = RenderedImage {
        width: size,
        height: size,
        alpha: vec![1.0; pixels.len()],
        pixels,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => write_ppm(path, &img),
        _ => write_png(path, &img),
    }
}

/// Direct embedding-to-pose regressor sampled with dropout left on.
#[derive(Clone, Debug, PartialEq)]
pub struct MCDropoutModel {
    pub regressor: Regressor,
    pub normalization: SceneNormalization,
    pub dropout: f64,
    pub train_config: TrainConfig,
    pub beta_swap: f64,
}

/// Trains the regressor with the same loss, optimizer, schedule and mixup
/// conditioning as the diffusion model.
pub fn mcdropout_train(
    dataset: &[TrainRecord],
    cfg: &TrainConfig,
    beta_swap: f64,
) -> Result<(MCDropoutModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&beta_swap) {
        return Err(Error::config("beta_swap must lie in [0, 1]"));
    }
    let first = dataset
        .first()
        .ok_or_else(|| Error::data("training set is empty"))?;
    let dim = first.image.dim();
    if dataset
        .iter()
        .any(|r| r.image.dim() != dim || r.texts.iter().any(|t| t.dim() != dim))
    {
        return Err(Error::data("embedding dimensions differ across records"));
    }
    let translations: Vec<Vec3> = dataset.iter().map(|r| r.pose.translation).collect();
    let normalization = SceneNormalization::from_translations(&translations)?;
    let mut reg = Regressor::init(
        RegressorShape {
            cond_dim: dim,
            hidden_dim: cfg.hidden_dim,
            layers: cfg.layers,
        },
        cfg.seed,
    )?;
    let mut adam = AdamState::new(reg.len());
    let schedule = CosineWarmup::from_config(cfg);
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let mut conds = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut seeds = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let rec = &dataset[rng.random_range(0..dataset.len())];
            conds.push(mixup_select(rec, beta_swap, &mut rng).vector.as_slice());
            targets.push(normalization.encode(&rec.pose).0);
            seeds.push(rng.next_u64());
        }
        let (loss, grads) = reg
            .loss_and_gradient(&conds, &targets, &seeds, cfg.loss_kind, cfg.dropout)
            .map_err(|e| match e {
                Error::NonFiniteActivation { .. } => Error::NonFiniteLoss { step: step + 1 },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        let lr = schedule.lr(step + 1);
        adam.update(&mut reg.values, &grads.values, step + 1, lr);
        snap_to_f32(&mut reg.values);
        history.push(LossRecord {
            step: step + 1,
            lr,
            loss,
        });
    }
    Ok((
        MCDropoutModel {
            regressor: reg,
            normalization,
            dropout: cfg.dropout,
            train_config: cfg.clone(),
            beta_swap,
        },
        history,
    ))
}

/// `m` stochastic forward passes; pass `i` seeds its mask from stream `i`.
pub fn mcdropout_sample(
    model: &MCDropoutModel,
    cond: &[f64],
    m: usize,
    seed: u64,
) -> Result<Vec<Pose>> {
    par::try_map_indexed(m, |i| {
        let drop = (model.dropout > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (model.dropout, rng.next_u64())
        });
        let out = model.regressor.forward(cond, drop)?;
        model.normalization.decode(&PoseVector(out))
    })
}

impl MCDropoutModel {
    pub fn sample(&self, cond: &[f64], m: usize, seed: u64) -> Result<Vec<Pose>> {
        mcdropout_sample(self, cond, m, seed)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            header: CheckpointHeader {
                kind: CheckpointKind::Regressor,
                train_config: self.train_config.clone(),
                net: serde_json::to_value(self.regressor.shape)
                    .map_err(|e| Error::data(e.to_string()))?,
                step: self.train_config.total_steps,
                param_count: self.regressor.len(),
                optimizer_state: false,
                extensions: Default::default(),
            },
            params: self.regressor.values.clone(),
            optimizer: None,
        };
        ck.set_extension(EXT_NORMALIZATION, &self.normalization)?;
        ck.set_extension(EXT_BETA_SWAP, &self.beta_swap)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CheckpointKind::Regressor {
            return Err(Error::data("checkpoint does not hold a dropout regressor"));
        }
        let shape: RegressorShape = serde_json::from_value(ck.header.net.clone())
            .map_err(|e| Error::data(format!("checkpoint shape: {e}")))?;
        Ok(MCDropoutModel {
            regressor: Regressor::from_values(shape, ck.params.clone())?,
            normalization: ck.extension(EXT_NORMALIZATION)?,
            dropout: ck.header.train_config.dropout,
            train_config: ck.header.train_config.clone(),
            beta_swap: ck.extension(EXT_BETA_SWAP)?,
        })
    }
}
