//! DDPM over 7-dimensional pose vectors: linear beta schedule, closed-form
//! forward noising, mixup-conditioned training and ancestral sampling.
//!
//! Translations are mapped into `[-1, 1]` by a [`SceneNormalization`]
//! before diffusion. Quaternion components are diffused as raw reals; the
//! sampler renormalizes the clean-pose estimate at every step.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, Pose, PoseVector, Vec3};
use crate::numericnet::{
    adam_step, denoiser_backward, AdamState, BatchItem, Checkpoint, CheckpointHeader,
    CheckpointKind, CosineWarmup, Denoiser, DenoiserParams, NetShape, PredictionTarget,
    TimestepSampling, TrainConfig,
};
use crate::par;

const EXT_NORMALIZATION: &str = "normalization";
const EXT_SCHEDULE: &str = "schedule";
const EXT_BETA_SWAP: &str = "beta_swap";

/// Parameters of the linear beta schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step tables. `betas[t - 1]` is `beta_t` for `t` in `1..=steps`;
/// `alpha_bars[t]` is the cumulative product with `alpha_bars[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// Betas spaced linearly from `beta_start` to `beta_end`, both inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "betas must satisfy 0 < beta_start <= beta_end < 1",
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * a);
    }
    Ok(DiffusionSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    x0: &PoseVector,
    t: usize,
    eps: &[f64; 7],
    sched: &DiffusionSchedule,
) -> PoseVector {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    PoseVector(std::array::from_fn(|i| a * x0.0[i] + b * eps[i]))
}

/// Affine map of world translations into the diffusion frame,
/// `t' = (t - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub center: Vec3,
    pub scale: f64,
}

impl SceneNormalization {
    /// Bounding-box centre and largest half-extent of `translations`, so
    /// every normalized component lies in `[-1, 1]`.
    pub fn from_translations(translations: &[Vec3]) -> Result<Self> {
        if translations.is_empty() {
            return Err(Error::data("cannot normalize an empty pose set"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in translations {
            for k in 0..3 {
                if !t[k].is_finite() {
                    return Err(Error::data("non-finite translation"));
                }
                lo[k] = lo[k].min(t[k]);
                hi[k] = hi[k].max(t[k]);
            }
        }
        let center = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        Ok(SceneNormalization {
            center,
            scale: if half > 0.0 { half } else { 1.0 },
        })
    }

    pub fn encode(&self, p: &Pose) -> PoseVector {
        let q = p.rotation.to_array();
        let t = p.translation;
        PoseVector([
            q[0],
            q[1],
            q[2],
            q[3],
            (t[0] - self.center[0]) / self.scale,
            (t[1] - self.center[1]) / self.scale,
            (t[2] - self.center[2]) / self.scale,
        ])
    }

    pub fn decode(&self, x: &PoseVector) -> Result<Pose> {
        let t = x.translation_part();
        Pose::new(
            x.rotation_part(),
            std::array::from_fn(|k| self.center[k] + self.scale * t[k]),
        )
    }
}

/// One training pose with its image embedding and any caption embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub pose: Pose,
    pub image: ConditionEmbedding,
    pub texts: Vec<ConditionEmbedding>,
}

/// A uniformly chosen text embedding with probability `beta_swap`, the
/// image embedding otherwise. Records without text always give the image.
pub fn mixup_select<'a, R: Rng + ?Sized>(
    record: &'a TrainRecord,
    beta_swap: f64,
    rng: &mut R,
) -> &'a ConditionEmbedding {
    let u: f64 = rng.random();
    if record.texts.is_empty() || u >= beta_swap {
        &record.image
    } else {
        &record.texts[rng.random_range(0..record.texts.len())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_history(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A trained denoiser with everything the sampler needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub params: DenoiserParams,
    pub normalization: SceneNormalization,
    pub schedule: ScheduleConfig,
    pub prediction_target: PredictionTarget,
}

impl DiffusionModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CheckpointKind::Denoiser {
            return Err(Error::data("checkpoint does not hold a diffusion denoiser"));
        }
        let shape: NetShape = serde_json::from_value(ck.header.net.clone())
            .map_err(|e| Error::data(format!("checkpoint shape: {e}")))?;
        Ok(DiffusionModel {
            params: DenoiserParams::from_values(shape, ck.params.clone())?,
            normalization: ck.extension(EXT_NORMALIZATION)?,
            schedule: ck.extension(EXT_SCHEDULE)?,
            prediction_target: ck.header.train_config.prediction_target,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.params.shape.cond_dim
    }

    /// `m` poses for one condition; chain `i` draws from its own stream of
    /// `seed`, so results do not depend on thread count.
    pub fn sample(&self, cond: &[f64], m: usize, seed: u64) -> Result<Vec<Pose>> {
        let sched = self.schedule.build()?;
        sample(
            &self.params,
            cond,
            m,
            &sched,
            &self.normalization,
            self.prediction_target,
            seed,
        )
    }
}

fn gaussian7<R: Rng + ?Sized>(rng: &mut R) -> [f64; 7] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

/// Clean-pose estimate from a network output, with the quaternion part
/// renormalized onto the canonical hemisphere.
fn clean_estimate(
    out: &PoseVector,
    x_t: &PoseVector,
    t: usize,
    sched: &DiffusionSchedule,
    target: PredictionTarget,
) -> PoseVector {
    let mut x0 = match target {
        PredictionTarget::X0 => *out,
        PredictionTarget::Noise => {
            let ab = sched.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            PoseVector(std::array::from_fn(|i| (x_t.0[i] - b * out.0[i]) / a))
        }
    };
    if let Ok(q) = quat_normalize(x0.rotation_part()) {
        x0.0[..4].copy_from_slice(&q.to_array());
    }
    x0
}

/// Ancestral sampling: `P_T ~ N(0, I)`, then
/// `P_{t-1} ~ N(sqrt(abar_{t-1}) F(P_t, t, c), (1 - abar_{t-1}) I)`.
/// The last step is deterministic because `abar_0 = 1`.
pub fn sample<D: Denoiser>(
    den: &D,
    cond: &[f64],
    m: usize,
    sched: &DiffusionSchedule,
    norm: &SceneNormalization,
    target: PredictionTarget,
    seed: u64,
) -> Result<Vec<Pose>> {
    if m == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    par::try_map_indexed(m, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x = PoseVector(gaussian7(&mut rng));
        for t in (1..=sched.steps).rev() {
            let out = den.predict(&x, t, cond)?;
            let x0 = clean_estimate(&out, &x, t, sched, target);
            let ab = sched.alpha_bar(t - 1);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            let z = gaussian7(&mut rng);
            x = PoseVector(std::array::from_fn(|k| a * x0.0[k] + s * z[k]));
        }
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: 0 });
        }
        norm.decode(&x)
    })
}

/// Training state; supports resuming from a checkpoint with the same data.
pub struct Trainer<'a> {
    dataset: &'a [TrainRecord],
    pub cfg: TrainConfig,
    pub beta_swap: f64,
    pub schedule_config: ScheduleConfig,
    schedule: DiffusionSchedule,
    pub normalization: SceneNormalization,
    pub params: DenoiserParams,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a [TrainRecord],
        cfg: &TrainConfig,
        beta_swap: f64,
        schedule_config: ScheduleConfig,
    ) -> Result<Self> {
        let cond_dim = check_dataset(dataset, cfg, beta_swap, &schedule_config)?;
        let translations: Vec<Vec3> = dataset.iter().map(|r| r.pose.translation).collect();
        let normalization = SceneNormalization::from_translations(&translations)?;
        let params = DenoiserParams::init(NetShape::from_config(cfg, cond_dim), cfg.seed)?;
        let adam = AdamState::new(params.len());
        Ok(Trainer {
            dataset,
            cfg: cfg.clone(),
            beta_swap,
            schedule_config,
            schedule: schedule_config.build()?,
            normalization,
            params,
            adam,
            step: 0,
        })
    }

    /// Continues from `ck`. The run's seed, shape and schedule come from the
    /// checkpoint; `total_steps` may be raised.
    pub fn resume(
        dataset: &'a [TrainRecord],
        ck: &Checkpoint,
        total_steps: Option<usize>,
    ) -> Result<Self> {
        let model = DiffusionModel::from_checkpoint(ck)?;
        let mut cfg = ck.header.train_config.clone();
        if let Some(n) = total_steps {
            cfg.total_steps = n;
        }
        let beta_swap: f64 = ck.extension(EXT_BETA_SWAP)?;
        let cond_dim = check_dataset(dataset, &cfg, beta_swap, &model.schedule)?;
        if cond_dim != model.cond_dim() {
            return Err(Error::config(
                "dataset embedding dimension differs from the checkpoint",
            ));
        }
        if ck.header.step > cfg.total_steps {
            return Err(Error::config("checkpoint is already past total_steps"));
        }
        let adam = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::data("checkpoint has no optimizer state to resume from"))?;
        Ok(Trainer {
            dataset,
            cfg,
            beta_swap,
            schedule_config: model.schedule,
            schedule: model.schedule.build()?,
            normalization: model.normalization,
            params: model.params,
            adam,
            step: ck.header.step,
        })
    }

    /// One optimizer step. The step's randomness depends only on the seed
    /// and the step index, so resumed runs match uninterrupted ones.
    pub fn step_once(&mut self) -> Result<LossRecord> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.step as u64);
        let steps = self.schedule.steps;
        let ts: Vec<usize> = match cfg.timestep_sampling {
            TimestepSampling::Uniform => (0..cfg.batch_size)
                .map(|_| rng.random_range(1..=steps))
                .collect(),
            TimestepSampling::Distinct { count } => {
                let picks = index::sample(&mut rng, steps, count).into_vec();
                (0..cfg.batch_size).map(|i| picks[i % count] + 1).collect()
            }
        };
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for &t in &ts {
            let rec = &self.dataset[rng.random_range(0..self.dataset.len())];
            let x0 = self.normalization.encode(&rec.pose);
            let eps = gaussian7(&mut rng);
            let cond = mixup_select(rec, self.beta_swap, &mut rng);
            items.push(BatchItem {
                x: forward_noise(&x0, t, &eps, &self.schedule),
                t,
                cond: &cond.vector,
                dropout_seed: rng.next_u64(),
            });
            targets.push(match cfg.prediction_target {
                PredictionTarget::X0 => x0.0,
                PredictionTarget::Noise => eps,
            });
        }
        let (loss, grads) =
            denoiser_backward(&self.params, &items, &targets, cfg.loss_kind, cfg.dropout).map_err(
                |e| match e {
                    Error::NonFiniteActivation { .. } => Error::NonFiniteLoss {
                        step: self.step + 1,
                    },
                    other => other,
                },
            )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
            });
        }
        self.step += 1;
        let lr = CosineWarmup::from_config(cfg).lr(self.step);
        adam_step(&mut self.params, &grads, &mut self.adam, self.step, cfg);
        if !self.params.all_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        Ok(LossRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    /// Runs until `total_steps`, returning the loss of each step taken.
    pub fn run(&mut self) -> Result<Vec<LossRecord>> {
        let mut history = Vec::with_capacity(self.cfg.total_steps.saturating_sub(self.step));
        while self.step < self.cfg.total_steps {
            history.push(self.step_once()?);
        }
        Ok(history)
    }

    pub fn model(&self) -> DiffusionModel {
        DiffusionModel {
            params: self.params.clone(),
            normalization: self.normalization,
            schedule: self.schedule_config,
            prediction_target: self.cfg.prediction_target,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            header: CheckpointHeader {
                kind: CheckpointKind::Denoiser,
                train_config: self.cfg.clone(),
                net: serde_json::to_value(self.params.shape)
                    .map_err(|e| Error::data(e.to_string()))?,
                step: self.step,
                param_count: self.params.len(),
                optimizer_state: true,
                extensions: Default::default(),
            },
            params: self.params.values.clone(),
            optimizer: Some(self.adam.clone()),
        };
        ck.set_extension(EXT_NORMALIZATION, &self.normalization)?;
        ck.set_extension(EXT_SCHEDULE, &self.schedule_config)?;
        ck.set_extension(EXT_BETA_SWAP, &self.beta_swap)?;
        Ok(ck)
    }
}

fn check_dataset(
    dataset: &[TrainRecord],
    cfg: &TrainConfig,
    beta_swap: f64,
    sched: &ScheduleConfig,
) -> Result<usize> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&beta_swap) {
        return Err(Error::config("beta_swap must lie in [0, 1]"));
    }
    if let TimestepSampling::Distinct { count } = cfg.timestep_sampling {
        if count > sched.steps {
            return Err(Error::config(
                "distinct timestep count exceeds the schedule length",
            ));
        }
    }
    let first = dataset
        .first()
        .ok_or_else(|| Error::data("training set is empty"))?;
    let dim = first.image.dim();
    for (i, r) in dataset.iter().enumerate() {
        if r.image.dim() != dim || r.texts.iter().any(|t| t.dim() != dim) {
            return Err(Error::data(format!(
                "record {i}: embedding dimension differs from {dim}"
            )));
        }
    }
    Ok(dim)
}

/// Trains from scratch for `cfg.total_steps` steps.
pub fn train(
    dataset: &[TrainRecord],
    cfg: &TrainConfig,
    beta_swap: f64,
    schedule: ScheduleConfig,
) -> Result<(DiffusionModel, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(dataset, cfg, beta_swap, schedule)?;
    let history = trainer.run()?;
    Ok((trainer.model(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Granularity;
    use crate::geometry::{rotation_error_deg, translation_error};
    use crate::numericnet::{Architecture, LossKind};

    fn unit_cond(v: &[f64], g: Granularity) -> ConditionEmbedding {
        ConditionEmbedding::new(v.to_vec(), g).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(100, 1e-4, 0.1).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(100), 0.1);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 0.3);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(100, 1e-4, 0.1).unwrap();
        let x0 = PoseVector([0.5, -0.5, 0.5, 0.5, 0.3, -0.9, 0.1]);
        let out = forward_noise(&x0, 40, &[0.0; 7], &s);
        for i in 0..7 {
            assert_eq!(out.0[i], s.alpha_bar(40).sqrt() * x0.0[i]);
        }
        let eps = [0.1, -1.0, 0.3, 2.0, -0.7, 0.0, 1.1];
        let end = forward_noise(&x0, 100, &eps, &s);
        let norm_x0 = x0.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..7 {
            assert!(
                (end.0[i] - eps[i]).abs()
                    <= s.alpha_bar(100).sqrt() * norm_x0 + 1e-2 * eps[i].abs()
            );
        }
    }

    #[test]
    fn normalization_bounds_and_round_trip() {
        let ts = [[-10.0, 4.0, 1.5], [30.0, -6.0, 2.5], [5.0, 0.0, 2.0]];
        let n = SceneNormalization::from_translations(&ts).unwrap();
        for t in ts {
            let p = Pose::new([1.0, 0.0, 0.0, 0.0], t).unwrap();
            let v = n.encode(&p);
            assert!(v.translation_part().iter().all(|c| c.abs() <= 1.0 + 1e-12));
            let back = n.decode(&v).unwrap();
            assert!(translation_error(&p, &back) < 1e-12);
        }
        let single = SceneNormalization::from_translations(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(single.scale, 1.0);
    }

    #[test]
    fn mixup_frequencies() {
        let rec = TrainRecord {
            pose: Pose::IDENTITY,
            image: unit_cond(&[1.0, 0.0], Granularity::Image),
            texts: vec![
                unit_cond(&[0.0, 1.0], Granularity::Nouns),
                unit_cond(&[0.6, 0.8], Granularity::Long),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frac = |beta: f64, rng: &mut ChaCha8Rng| {
            let n = 10_000;
            (0..n)
                .filter(|_| {
                    mixup_select(&rec, beta, rng).modality == crate::encoder::Modality::Text
                })
                .count() as f64
                / n as f64
        };
        assert_eq!(frac(0.0, &mut rng), 0.0);
        assert_eq!(frac(1.0, &mut rng), 1.0);
        let f = frac(0.7, &mut rng);
        // 3 sigma binomial bound is ~0.014
        assert!((f - 0.7).abs() < 0.02, "{f}");
        let bare = TrainRecord {
            texts: vec![],
            ..rec.clone()
        };
        assert_eq!(
            mixup_select(&bare, 1.0, &mut rng).granularity,
            Granularity::Image
        );
    }

    /// Returns the same pose vector whatever the input.
    struct Constant(PoseVector);

    impl Denoiser for Constant {
        fn predict(&self, _: &PoseVector, _: usize, _: &[f64]) -> Result<PoseVector> {
            Ok(self.0)
        }
    }

    #[test]
    fn constant_denoiser_yields_its_output() {
        let s = make_schedule(100, 1e-4, 0.1).unwrap();
        let norm = SceneNormalization {
            center: [1.0, 2.0, 3.0],
            scale: 10.0,
        };
        let c = PoseVector([0.6, 0.0, 0.8, 0.0, 0.1, -0.2, 0.3]);
        let poses = sample(&Constant(c), &[1.0], 25, &s, &norm, PredictionTarget::X0, 4).unwrap();
        let want = norm.decode(&c).unwrap();
        for p in &poses {
            assert_eq!(p.rotation, want.rotation);
            for k in 0..3 {
                assert!((p.translation[k] - want.translation[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_canonical() {
        let shape = NetShape {
            architecture: Architecture::Mlp,
            layers: 2,
            hidden_dim: 16,
            d_psi: 4,
            heads: 1,
            time_dim: 8,
            cond_dim: 3,
        };
        let p = DenoiserParams::init(shape, 2).unwrap();
        let s = make_schedule(20, 1e-4, 0.1).unwrap();
        let norm = SceneNormalization {
            center: [0.0; 3],
            scale: 5.0,
        };
        let cond = [0.0, 0.6, 0.8];
        let a = sample(&p, &cond, 12, &s, &norm, PredictionTarget::X0, 9).unwrap();
        let b = sample(&p, &cond, 12, &s, &norm, PredictionTarget::X0, 9).unwrap();
        assert_eq!(a, b);
        par::set_mode(par::Mode::Sequential);
        let c = sample(&p, &cond, 12, &s, &norm, PredictionTarget::X0, 9).unwrap();
        par::set_mode(par::Mode::Parallel);
        assert_eq!(a, c);
        for q in &a {
            assert!((q.rotation.norm() - 1.0).abs() < 1e-12);
            assert!(q.rotation.w >= 0.0);
        }
        let noise = sample(&p, &cond, 4, &s, &norm, PredictionTarget::Noise, 9).unwrap();
        assert_eq!(noise.len(), 4);
    }

    fn memorize_cfg() -> TrainConfig {
        TrainConfig {
            architecture: Architecture::Mlp,
            layers: 3,
            hidden_dim: 64,
            d_psi: 16,
            time_dim: 16,
            batch_size: 32,
            learning_rate: 2e-3,
            warmup_steps: 100,
            total_steps: 2000,
            loss_kind: LossKind::L1,
            seed: 5,
            ..Default::default()
        }
    }

    fn single_record() -> Vec<TrainRecord> {
        vec![TrainRecord {
            pose: Pose::new([0.9, 0.1, -0.3, 0.2], [4.0, -2.0, 1.5]).unwrap(),
            image: unit_cond(&[0.2, 0.4, 0.1, 0.8], Granularity::Image),
            texts: vec![],
        }]
    }

    #[test]
    fn memorizes_a_single_record() {
        let data = single_record();
        let (model, history) =
            train(&data, &memorize_cfg(), 0.0, ScheduleConfig::default()).unwrap();
        let tail: f64 = history[history.len() - 50..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 50.0;
        assert!(tail < 0.05, "final loss {tail}");
        let samples = model.sample(&data[0].image.vector, 100, 1).unwrap();
        let gt = data[0].pose;
        let near = samples
            .iter()
            .filter(|p| {
                translation_error(p, &gt) <= 0.05 * model.normalization.scale
                    && rotation_error_deg(p, &gt) <= 5.0
            })
            .count();
        assert!(near >= 95, "{near}/100 samples near the memorized pose");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = single_record();
        let cfg = TrainConfig {
            total_steps: 40,
            warmup_steps: 10,
            ..memorize_cfg()
        };
        let (a, ha) = train(&data, &cfg, 0.0, ScheduleConfig::default()).unwrap();
        let (b, hb) = train(&data, &cfg, 0.0, ScheduleConfig::default()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);

        let half = TrainConfig {
            total_steps: 40,
            ..cfg.clone()
        };
        let mut t = Trainer::new(&data, &half, 0.0, ScheduleConfig::default()).unwrap();
        for _ in 0..15 {
            t.step_once().unwrap();
        }
        let bytes = t.checkpoint().unwrap().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut r = Trainer::resume(&data, &ck, None).unwrap();
        assert_eq!(r.step, 15);
        let rest = r.run().unwrap();
        assert_eq!(rest.first().unwrap().step, 16);
        assert_eq!(rest, ha[15..].to_vec());
        assert_eq!(r.model(), a);
    }

    #[test]
    fn distinct_timesteps_and_noise_target_train() {
        let data = single_record();
        let cfg = TrainConfig {
            total_steps: 5,
            warmup_steps: 1,
            timestep_sampling: TimestepSampling::Distinct { count: 90 },
            prediction_target: PredictionTarget::Noise,
            batch_size: 8,
            ..memorize_cfg()
        };
        let (_, h) = train(&data, &cfg, 0.0, ScheduleConfig::default()).unwrap();
        assert_eq!(h.len(), 5);
        let bad = TrainConfig {
            timestep_sampling: TimestepSampling::Distinct { count: 101 },
            ..cfg
        };
        assert!(train(&data, &bad, 0.0, ScheduleConfig::default()).is_err());
        assert!(train(&[], &memorize_cfg(), 0.0, ScheduleConfig::default()).is_err());
    }

    #[test]
    fn loss_history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let h = vec![
            LossRecord {
                step: 1,
                lr: 1e-4 / 3.0,
                loss: 0.123456789,
            },
            LossRecord {
                step: 2,
                lr: 0.0,
                loss: 1e-300,
            },
        ];
        write_loss_history(&p, &h).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("step,lr,loss\n"));
        assert_eq!(read_loss_history(&p).unwrap(), h);
    }
}
