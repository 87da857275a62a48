//! Subcommand definitions and handlers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use posedist::diffusion::{write_loss_history, DiffusionModel, Trainer};
use posedist::encoder::{encode_text, load_embeddings, Granularity};
use posedist::eval::{
    evaluate_group, mcdropout_train, read_pose_table, write_heatmap, write_pose_table,
    write_report, Bounds, MCDropoutModel, Query, SceneScale,
};
use posedist::geometry::{Pose, Vec3};
use posedist::numericnet::{Checkpoint, CheckpointKind};
use posedist::refine::{refine_distribution, write_outcomes, OutcomeRecord, RefineContext};
use posedist::splat::{load_ply, render, write_png, write_ppm, Camera};
use posedist::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::benchmark::{self, BenchmarkSpec};
use crate::config::{output_dir, write_effective, ModelKind, RunConfig};
use crate::dataset::{ingest, IngestOptions, Ingested};

pub const SAMPLES: &str = "samples.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS: &str = "loss.csv";
pub const OUTCOMES: &str = "outcomes.jsonl";
pub const REPORT: &str = "report.csv";
const HEATMAP_SIZE: usize = 256;

#[derive(Debug, Parser)]
#[command(
    name = "posedist",
    version,
    about = "Text- and image-conditioned camera pose distributions"
)]
pub struct Cli {
    /// Run configuration (TOML). An `effective.toml` from an earlier run is accepted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.total_steps=3000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset manifest, filter captions and split train/val.
    Ingest(IngestArgs),
    /// Generate the synthetic landmark benchmark.
    MakeBenchmark(BenchmarkArgs),
    /// Train a pose model on an ingested dataset.
    Train(TrainArgs),
    /// Draw pose samples for one or more conditions.
    Sample(SampleArgs),
    /// Refine sampled poses by render-and-compare.
    Refine(RefineArgs),
    /// Score sample files against ground truth.
    Eval(EvalArgs),
    /// Render a splat scene from one pose.
    Render(RenderArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::MakeBenchmark(_) => "make-benchmark",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Refine(_) => "refine",
            Command::Eval(_) => "eval",
            Command::Render(_) => "render",
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Caption/image cosine threshold; defaults to the manifest's.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Benchmark spec (TOML); defaults to the four-landmark toy scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the number of cameras.
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ingested dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Continue a diffusion checkpoint up to `train.total_steps`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Ingested dataset; needed for split, caption and text conditions.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Condition on every record of a split (`train` or `val`).
    #[arg(long, conflicts_with_all = ["text", "caption", "embedding"])]
    pub split: Option<String>,
    /// Free text, encoded with the dataset's synthetic encoder.
    #[arg(long, conflicts_with_all = ["caption", "embedding"])]
    pub text: Option<String>,
    /// Record id whose caption embedding is the condition.
    #[arg(long, conflicts_with = "embedding")]
    pub caption: Option<String>,
    /// Embedding file holding the condition.
    #[arg(long, requires = "row")]
    pub embedding: Option<PathBuf>,
    #[arg(long)]
    pub row: Option<usize>,
    /// Which embedding of a record to use: nouns, short, mid, long or image.
    #[arg(long, default_value = "image")]
    pub granularity: String,
    /// Samples per condition; defaults to `samples_per_query`.
    #[arg(short = 'm', long = "num-samples")]
    pub m: Option<usize>,
    /// Also write a top-down density image (`.png` or `.ppm`).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Ingested dataset with a scene and synthetic encoder.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pose table; rows sharing an id are refined as one distribution.
    #[arg(long)]
    pub samples: PathBuf,
    /// Target text for every row; otherwise each id's own embedding.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value = "image")]
    pub granularity: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ingested dataset; its training poses set the bounds and scale.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `LABEL=PATH` sample table; repeatable. The label defaults to the file stem.
    #[arg(long, required = true)]
    pub samples: Vec<String>,
    /// Ground-truth pose table; defaults to the dataset's poses.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Write one heatmap per label.
    #[arg(long)]
    pub heatmaps: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// `qw,qx,qy,qz,tx,ty,tz` (camera-to-world).
    #[arg(long, conflicts_with = "poses", allow_hyphen_values = true)]
    pub pose: Option<String>,
    /// Pose table to pick `--id` from.
    #[arg(long, requires = "id")]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,
    /// Output image (`.png` or `.ppm`).
    #[arg(long)]
    pub out: PathBuf,
}

/// Seed for the `stream`-th independent job of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Runs a parsed command line; `argv` is recorded in `effective.toml`.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let name = cli.command.name();
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, &cfg, name, argv),
        Command::MakeBenchmark(a) => cmd_make_benchmark(a, &cfg, name, argv),
        Command::Train(a) => cmd_train(a, &cfg, name, argv),
        Command::Sample(a) => cmd_sample(a, &cfg, name, argv),
        Command::Refine(a) => cmd_refine(a, &cfg, name, argv),
        Command::Eval(a) => cmd_eval(a, &cfg, name, argv),
        Command::Render(a) => cmd_render(a, &cfg, name, argv),
    }
}

#[derive(Serialize)]
struct WithExtra<'a, T: Serialize> {
    #[serde(flatten)]
    run: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    benchmark: Option<&'a T>,
}

fn effective(dir: &Path, name: &str, argv: &[String], cfg: &RunConfig) -> Result<()> {
    write_effective(dir, name, argv, cfg)
}

pub fn cmd_ingest(a: &IngestArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let out = output_dir(a.out.as_deref(), name);
    let opts = IngestOptions {
        caption_threshold: a.threshold,
        split_seed: a.split_seed,
        validation_fraction: a.val_fraction,
    };
    let ing = ingest(&a.manifest, &opts, &out)?;
    effective(&out, name, argv, cfg)?;
    let kept: usize = ing.kept.iter().map(Vec::len).sum();
    eprintln!(
        "ingested {} records ({} train, {} val), kept {kept} captions -> {}",
        ing.data.len(),
        ing.train.len(),
        ing.val.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_make_benchmark(
    a: &BenchmarkArgs,
    cfg: &RunConfig,
    name: &str,
    argv: &[String],
) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => BenchmarkSpec::load(p)?,
        None => BenchmarkSpec::toy(),
    };
    if let Some(n) = a.cameras {
        spec.cameras = n;
    }
    spec.validate()?;
    let out = output_dir(a.out.as_deref(), name);
    create_dir(&out)?;
    let bench = benchmark::generate(&spec, cfg.seed)?;
    benchmark::write(&bench, &spec, cfg.seed, &out)?;
    write_effective(
        &out,
        name,
        argv,
        &WithExtra {
            run: cfg,
            benchmark: Some(&spec),
        },
    )?;
    eprintln!("wrote {} cameras -> {}", bench.ids.len(), out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let ing = Ingested::open(&a.dataset)?;
    let records = ing.train_records()?;
    let out = output_dir(a.out.as_deref(), name);
    create_dir(&out)?;
    let (ck, history) = match cfg.model {
        ModelKind::Diffusion => {
            let mut trainer = match &a.resume {
                Some(p) => {
                    Trainer::resume(&records, &Checkpoint::load(p)?, Some(cfg.train.total_steps))?
                }
                None => Trainer::new(&records, &cfg.train_config(), cfg.beta_swap, cfg.schedule)?,
            };
            let history = trainer.run()?;
            (trainer.checkpoint()?, history)
        }
        ModelKind::Mcdropout => {
            if a.resume.is_some() {
                return Err(Error::config(
                    "--resume is only supported for diffusion models",
                ));
            }
            let (model, history) = mcdropout_train(&records, &cfg.train_config(), cfg.beta_swap)?;
            (model.to_checkpoint()?, history)
        }
    };
    ck.save(&out.join(CHECKPOINT))?;
    write_loss_history(&out.join(LOSS), &history)?;
    effective(&out, name, argv, cfg)?;
    if let Some(last) = history.last() {
        eprintln!(
            "step {} loss {:.6} -> {}",
            last.step,
            last.loss,
            out.display()
        );
    }
    Ok(())
}

/// A trained model of either kind.
pub enum PoseModel {
    Diffusion(DiffusionModel),
    McDropout(MCDropoutModel),
}

impl PoseModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(match ck.header.kind {
            CheckpointKind::Denoiser => PoseModel::Diffusion(DiffusionModel::from_checkpoint(&ck)?),
            CheckpointKind::Regressor => {
                PoseModel::McDropout(MCDropoutModel::from_checkpoint(&ck)?)
            }
        })
    }

    pub fn sample(&self, cond: &[f64], m: usize, seed: u64) -> Result<Vec<Pose>> {
        match self {
            PoseModel::Diffusion(d) => d.sample(cond, m, seed),
            PoseModel::McDropout(r) => r.sample(cond, m, seed),
        }
    }
}

fn need_dataset<'a>(d: &'a Option<Ingested>, what: &str) -> Result<&'a Ingested> {
    d.as_ref()
        .ok_or_else(|| Error::config(format!("{what} needs --dataset")))
}

fn train_positions(ing: &Ingested) -> Vec<Vec3> {
    ing.train
        .iter()
        .map(|&i| ing.data.poses[i].translation)
        .collect()
}

pub fn cmd_sample(a: &SampleArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let model = PoseModel::load(&a.checkpoint)?;
    let data = a.dataset.as_deref().map(Ingested::open).transpose()?;
    let g = Granularity::parse(&a.granularity)?;
    let m = a.m.unwrap_or(cfg.samples_per_query);
    if m == 0 {
        return Err(Error::config("-m must be at least 1"));
    }
    // (id, condition, ground-truth position if known)
    let mut queries: Vec<(String, Vec<f64>, Option<Vec3>)> = Vec::new();
    if let Some(split) = &a.split {
        let ing = need_dataset(&data, "--split")?;
        for &i in ing.split(split)? {
            let pose = ing.data.poses[i];
            queries.push((
                ing.data.ids[i].clone(),
                ing.data.condition(i, g)?.to_vec(),
                Some(pose.translation),
            ));
        }
    } else if let Some(text) = &a.text {
        let ing = need_dataset(&data, "--text")?;
        let vocab = ing.data.manifest.encoder.as_ref().ok_or_else(|| {
            Error::config("dataset has no synthetic encoder; supply an embedding row instead")
        })?;
        let g = if g == Granularity::Image {
            Granularity::Short
        } else {
            g
        };
        queries.push((
            "text".into(),
            encode_text(text, &vocab.vocabulary()?, g)?.vector,
            None,
        ));
    } else if let Some(id) = &a.caption {
        let ing = need_dataset(&data, "--caption")?;
        let i = ing
            .data
            .position(id)
            .ok_or_else(|| Error::data(format!("unknown caption id '{id}'")))?;
        queries.push((
            id.clone(),
            ing.data.condition(i, g)?.to_vec(),
            Some(ing.data.poses[i].translation),
        ));
    } else if let (Some(p), Some(r)) = (&a.embedding, a.row) {
        let t = load_embeddings(p)?;
        let v = t
            .vectors
            .get(r)
            .ok_or_else(|| Error::config(format!("row {r} out of range ({} rows)", t.len())))?;
        let id = t
            .ids
            .as_ref()
            .map_or_else(|| format!("row{r}"), |ids| ids[r].clone());
        queries.push((id, v.clone(), None));
    } else {
        return Err(Error::config(
            "give one of --split, --text, --caption or --embedding",
        ));
    }

    let mut rows = Vec::with_capacity(queries.len() * m);
    for (q, (id, cond, _)) in queries.iter().enumerate() {
        let poses = model.sample(cond, m, stream_seed(cfg.seed, q as u64))?;
        rows.extend(poses.into_iter().map(|p| (id.clone(), p)));
    }
    let out = output_dir(a.out.as_deref(), name);
    create_dir(&out)?;
    write_pose_table(&out.join(SAMPLES), &rows)?;
    if let Some(h) = &a.heatmap {
        let positions: Vec<Vec3> = rows.iter().map(|(_, p)| p.translation).collect();
        let markers: Vec<Vec3> = queries.iter().filter_map(|q| q.2).collect();
        let bounds = match &data {
            Some(ing) => Bounds::from_positions(
                &ing.data
                    .poses
                    .iter()
                    .map(|p| p.translation)
                    .collect::<Vec<_>>(),
            )?,
            None => Bounds::from_positions(&positions)?,
        };
        write_heatmap(&out.join(h), &positions, &markers, &bounds, HEATMAP_SIZE)?;
    }
    effective(&out, name, argv, cfg)?;
    eprintln!(
        "wrote {} samples for {} conditions -> {}",
        rows.len(),
        queries.len(),
        out.display()
    );
    Ok(())
}

/// Rows grouped by id in order of first appearance, with input row indices.
fn group_rows(rows: &[(String, Pose)]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut at: HashMap<&str, usize> = HashMap::new();
    for (i, (id, _)) in rows.iter().enumerate() {
        let slot = *at.entry(id.as_str()).or_insert_with(|| {
            order.push((id.clone(), Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(i);
    }
    order
}

pub fn cmd_refine(a: &RefineArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let ing = Ingested::open(&a.dataset)?;
    let scene = ing
        .data
        .scene
        .as_ref()
        .ok_or_else(|| Error::config("dataset has no scene to render"))?;
    let encoder = ing.data.encoder()?;
    let scale = SceneScale::from_positions(&train_positions(&ing))?;
    let ctx = RefineContext {
        scene,
        encoder: &encoder,
        scene_scale: scale.0,
    };
    let g = Granularity::parse(&a.granularity)?;
    let fixed = match &a.text {
        Some(t) => {
            let g = if g == Granularity::Image {
                Granularity::Short
            } else {
                g
            };
            Some(encode_text(t, &encoder.vocab, g)?.vector)
        }
        None => None,
    };
    let rows = read_pose_table(&a.samples)?;
    let mut out_rows = Vec::new();
    let mut log: Vec<OutcomeRecord> = Vec::new();
    for (gi, (id, idx)) in group_rows(&rows).into_iter().enumerate() {
        let text = match &fixed {
            Some(v) => v.clone(),
            None => {
                let i = ing.data.position(&id).ok_or_else(|| {
                    Error::data(format!("sample id '{id}' is not in the dataset"))
                })?;
                ing.data.condition(i, g)?.to_vec()
            }
        };
        let poses: Vec<Pose> = idx.iter().map(|&i| rows[i].1).collect();
        let set = refine_distribution(
            &poses,
            &text,
            &ctx,
            &cfg.refine,
            stream_seed(cfg.seed, gi as u64),
        )?;
        out_rows.extend(set.poses.into_iter().map(|p| (id.clone(), p)));
        log.extend(set.outcomes.into_iter().map(|o| OutcomeRecord {
            sample_id: idx[o.sample_id],
            ..o
        }));
    }
    let out = output_dir(a.out.as_deref(), name);
    create_dir(&out)?;
    write_pose_table(&out.join(SAMPLES), &out_rows)?;
    write_outcomes(&out.join(OUTCOMES), &log)?;
    effective(&out, name, argv, cfg)?;
    let accepted = log.iter().filter(|o| o.accepted).count();
    eprintln!(
        "refined {} of {} samples, accepted {accepted}, kept {} -> {}",
        log.len(),
        rows.len(),
        out_rows.len(),
        out.display()
    );
    Ok(())
}

/// Splits `LABEL=PATH`; a bare path is labelled by its stem.
fn labelled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((l, p)) if !l.is_empty() => (l.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let l = p
                .file_stem()
                .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (l, p)
        }
    }
}

/// Queries for one sample table, matched to ground truth by id.
pub fn queries_for(rows: &[(String, Pose)], gt: &[(String, Pose)]) -> Result<Vec<Query>> {
    let index: HashMap<&str, &Pose> = gt.iter().map(|(i, p)| (i.as_str(), p)).collect();
    let groups = group_rows(rows);
    let missing: Vec<&str> = groups
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !index.contains_key(id))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).copied().collect();
        return Err(Error::data(format!(
            "{} sample ids have no ground truth: {}",
            missing.len(),
            shown.join(", ")
        )));
    }
    Ok(groups
        .into_iter()
        .map(|(id, idx)| Query {
            gt: *index[id.as_str()],
            samples: idx.iter().map(|&i| rows[i].1).collect(),
        })
        .collect())
}

pub fn cmd_eval(a: &EvalArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let ing = Ingested::open(&a.dataset)?;
    let reference = train_positions(&ing);
    let bounds = Bounds::from_positions(&reference)?;
    let scale = SceneScale::from_positions(&reference)?;
    let gt = match &a.gt {
        Some(p) => read_pose_table(p)?,
        None => ing
            .data
            .ids
            .iter()
            .cloned()
            .zip(ing.data.poses.iter().copied())
            .collect(),
    };
    let out = output_dir(a.out.as_deref(), name);
    create_dir(&out)?;
    let mut report = Vec::new();
    for spec in &a.samples {
        let (label, path) = labelled(spec);
        let rows = read_pose_table(&path)?;
        let queries = queries_for(&rows, &gt)?;
        report.extend(evaluate_group(
            &label, &queries, &cfg.rda, scale, &bounds, cfg.seed,
        )?);
        if a.heatmaps {
            let positions: Vec<Vec3> = rows.iter().map(|(_, p)| p.translation).collect();
            let markers: Vec<Vec3> = queries.iter().map(|q| q.gt.translation).collect();
            write_heatmap(
                &out.join(format!("heatmap_{label}.png")),
                &positions,
                &markers,
                &bounds,
                HEATMAP_SIZE,
            )?;
        }
    }
    write_report(&out.join(REPORT), &report)?;
    effective(&out, name, argv, cfg)?;
    for r in &report {
        let rda = r
            .rda
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "{:>8} k={:<4} acc_pred={:.4} acc_rand={:.6} rda={rda}",
            r.granularity, r.k, r.acc_pred, r.acc_rand_mean
        );
    }
    Ok(())
}

pub fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::config(format!("pose '{s}': {e}")))?;
    if v.len() != 7 {
        return Err(Error::config(format!(
            "pose '{s}' needs 7 comma-separated numbers"
        )));
    }
    Pose::new([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]])
}

pub fn cmd_render(a: &RenderArgs, cfg: &RunConfig, name: &str, argv: &[String]) -> Result<()> {
    let pose = match (&a.pose, &a.poses, &a.id) {
        (Some(s), _, _) => parse_pose(s)?,
        (None, Some(p), Some(id)) => read_pose_table(p)?
            .into_iter()
            .find(|(i, _)| i == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::data(format!("pose id '{id}' not found in {}", p.display())))?,
        _ => return Err(Error::config("give --pose or --poses with --id")),
    };
    if !(a.fov > 0.0 && a.fov < 180.0) {
        return Err(Error::config("--fov must lie in (0, 180)"));
    }
    let scene = load_ply(&a.scene)?;
    let img = render(
        &scene,
        &Camera::new(pose, a.fov.to_radians(), a.width, a.height)?,
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(&a.out, &img)?,
        _ => write_png(&a.out, &img)?,
    }
    let dir = a
        .out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    effective(dir, name, argv, cfg)
}
