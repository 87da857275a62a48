//! Dataset manifests, cross-file alignment, caption filtering and the
//! train/validation split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use posedist::diffusion::TrainRecord;
use posedist::encoder::{
    cosine_similarity, filter_captions, load_embeddings, read_captions, write_captions,
    write_embeddings, CaptionSet, ConditionEmbedding, CoverageEncoder, EmbeddingTable, Granularity,
    Modality, SyntheticVocabulary,
};
use posedist::eval::{read_pose_table, write_pose_table};
use posedist::geometry::Pose;
use posedist::splat::{load_ply, save_ply, GaussianScene};
use posedist::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::files;

pub const TRAIN_IDS: &str = "train.txt";
pub const VAL_IDS: &str = "val.txt";
pub const FILTER: &str = "filter.csv";
const MAX_LISTED: usize = 10;

/// Parameters of the synthetic coverage encoder that produced a dataset's
/// embeddings, so renders and free text can be encoded the same way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Vocabulary, including the background bin.
    pub classes: Vec<String>,
    pub dim: usize,
    pub seed: u64,
    pub background_weight: f64,
    pub fovea: Option<f64>,
}

impl EncoderSpec {
    pub fn for_scene(scene: &GaussianScene, dim: usize, seed: u64) -> Self {
        let mut classes = scene.class_names.clone();
        classes.push(posedist::encoder::BACKGROUND_CLASS.to_string());
        EncoderSpec {
            classes,
            dim,
            seed,
            background_weight: CoverageEncoder::DEFAULT_BACKGROUND_WEIGHT,
            fovea: Some(CoverageEncoder::DEFAULT_FOVEA),
        }
    }

    pub fn vocabulary(&self) -> Result<SyntheticVocabulary> {
        SyntheticVocabulary::new(self.classes.clone(), self.dim, self.seed)
    }

    pub fn build(&self) -> Result<CoverageEncoder> {
        let mut enc = CoverageEncoder::new(self.vocabulary()?);
        enc.background_weight = self.background_weight;
        enc.fovea = self.fovea;
        Ok(enc)
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub poses: PathBuf,
    pub image_embeddings: PathBuf,
    pub captions: PathBuf,
    /// Granularity name (`nouns`, `short`, `mid`, `long`) to embedding file.
    #[serde(default)]
    pub text_embeddings: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    /// Captions whose embedding has cosine similarity below this with the
    /// record's image embedding are left out of training.
    #[serde(default = "default_threshold")]
    pub caption_threshold: f64,
}

fn default_fraction() -> f64 {
    0.1
}

fn default_threshold() -> f64 {
    0.2
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        if !self.caption_threshold.is_finite() {
            return Err(Error::config("caption_threshold must be finite"));
        }
        for g in self.text_embeddings.keys() {
            let parsed = Granularity::parse(g)?;
            if parsed == Granularity::Image {
                return Err(Error::config("image embeddings are not a text granularity"));
            }
        }
        Ok(())
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// All files of a dataset, aligned to the pose table's record order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub ids: Vec<String>,
    pub poses: Vec<Pose>,
    pub image: Vec<Vec<f64>>,
    pub captions: Vec<CaptionSet>,
    pub texts: BTreeMap<Granularity, Vec<Vec<f64>>>,
    pub scene: Option<GaussianScene>,
}

fn reorder<T: Clone>(
    what: &str,
    ids: &[String],
    have: &[String],
    items: Vec<T>,
    problems: &mut Vec<String>,
) -> Option<Vec<T>> {
    let index: HashMap<&str, usize> = have
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut bad = Vec::new();
    if index.len() != have.len() {
        bad.push(format!("{what}: duplicate ids"));
    }
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    bad.extend(
        ids.iter()
            .filter(|i| !index.contains_key(i.as_str()))
            .map(|i| format!("{i} missing from {what}")),
    );
    bad.extend(
        have.iter()
            .filter(|i| !wanted.contains(i.as_str()))
            .map(|i| format!("{i} only in {what}")),
    );
    if !bad.is_empty() {
        problems.extend(bad);
        return None;
    }
    Some(
        ids.iter()
            .map(|i| items[index[i.as_str()]].clone())
            .collect(),
    )
}

fn table_ids(what: &str, t: &EmbeddingTable) -> Result<Vec<String>> {
    t.ids
        .clone()
        .ok_or_else(|| Error::data(format!("{what} has no .ids sidecar")))
}

impl Dataset {
    /// Loads and aligns every file named by the manifest at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let at = |p: &Path| base.join(p);

        let pose_rows = read_pose_table(&at(&manifest.poses))?;
        if pose_rows.is_empty() {
            return Err(Error::data("pose table is empty"));
        }
        let (ids, poses): (Vec<String>, Vec<Pose>) = pose_rows.into_iter().unzip();
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err(Error::data("pose table has duplicate ids"));
        }
        let mut problems = Vec::new();

        let image_table = load_embeddings(&at(&manifest.image_embeddings))?;
        if image_table.modality != Modality::Image {
            return Err(Error::data(
                "image embedding file is not marked as image modality",
            ));
        }
        let dim = image_table.dim;
        let image = reorder(
            "image embeddings",
            &ids,
            &table_ids("image embeddings", &image_table)?,
            image_table.vectors,
            &mut problems,
        );

        let caps = read_captions(&at(&manifest.captions))?;
        let cap_ids: Vec<String> = caps.iter().map(|c| c.id.clone()).collect();
        let captions = reorder("captions", &ids, &cap_ids, caps, &mut problems);

        let mut texts = BTreeMap::new();
        for (g, p) in &manifest.text_embeddings {
            let g = Granularity::parse(g)?;
            let t = load_embeddings(&at(p))?;
            if t.dim != dim {
                return Err(Error::data(format!(
                    "{} embeddings have dimension {}, image embeddings {dim}",
                    g.as_str(),
                    t.dim
                )));
            }
            let what = format!("{} embeddings", g.as_str());
            if let Some(v) = reorder(
                &what,
                &ids,
                &table_ids(&what, &t)?,
                t.vectors,
                &mut problems,
            ) {
                texts.insert(g, v);
            }
        }
        if !problems.is_empty() {
            let n = problems.len();
            problems.truncate(MAX_LISTED);
            return Err(Error::data(format!(
                "record ids do not align ({n} problems): {}",
                problems.join("; ")
            )));
        }
        let scene = match &manifest.scene {
            Some(p) => Some(load_ply(&at(p))?),
            None => None,
        };
        Ok(Dataset {
            manifest,
            ids,
            poses,
            image: image.expect("checked"),
            captions: captions.expect("checked"),
            texts,
            scene,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.image.first().map_or(0, Vec::len)
    }

    /// Condition vector for record `i` at granularity `g`.
    pub fn condition(&self, i: usize, g: Granularity) -> Result<&[f64]> {
        match g {
            Granularity::Image => Ok(&self.image[i]),
            _ => {
                self.texts.get(&g).map(|t| t[i].as_slice()).ok_or_else(|| {
                    Error::config(format!("dataset has no {} embeddings", g.as_str()))
                })
            }
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn encoder(&self) -> Result<CoverageEncoder> {
        self.manifest
            .encoder
            .as_ref()
            .ok_or_else(|| Error::config("dataset manifest has no synthetic encoder section"))?
            .build()
    }
}

/// Deterministic split: `round(fraction * n)` validation records (at least
/// one, at most `n - 1`), each list in record order.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val =
        ((fraction * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1).min(n));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// One row of the caption filter log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub id: String,
    pub granularity: String,
    pub similarity: f64,
    pub kept: bool,
}

/// A dataset after ingestion: aligned files plus split and filter results.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub data: Dataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Text granularities kept for training, per record.
    pub kept: Vec<Vec<Granularity>>,
}

impl Ingested {
    /// Opens a directory written by [`ingest`].
    pub fn open(dir: &Path) -> Result<Self> {
        let data = Dataset::load(&dir.join(files::MANIFEST))?;
        let read_ids = |name: &str| -> Result<Vec<usize>> {
            let p = dir.join(name);
            let text = std::fs::read_to_string(&p).map_err(|e| io(&p, e))?;
            text.lines()
                .filter(|l| !l.is_empty())
                .map(|l| {
                    data.position(l)
                        .ok_or_else(|| Error::data(format!("{}: unknown id {l}", p.display())))
                })
                .collect()
        };
        let train = read_ids(TRAIN_IDS)?;
        let val = read_ids(VAL_IDS)?;
        let p = dir.join(FILTER);
        let mut kept = vec![Vec::new(); data.len()];
        let mut r =
            csv::Reader::from_path(&p).map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
        for row in r.deserialize::<FilterRow>() {
            let row = row.map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            let i = data
                .position(&row.id)
                .ok_or_else(|| Error::data(format!("{}: unknown id {}", p.display(), row.id)))?;
            if row.kept {
                kept[i].push(Granularity::parse(&row.granularity)?);
            }
        }
        Ok(Ingested {
            data,
            train,
            val,
            kept,
        })
    }

    /// Training records: image embedding plus the kept caption embeddings.
    pub fn train_records(&self) -> Result<Vec<TrainRecord>> {
        self.train
            .iter()
            .map(|&i| {
                let texts = self.kept[i]
                    .iter()
                    .map(|g| ConditionEmbedding::new(self.data.condition(i, *g)?.to_vec(), *g))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrainRecord {
                    pose: self.data.poses[i],
                    image: ConditionEmbedding::new(self.data.image[i].clone(), Granularity::Image)?,
                    texts,
                })
            })
            .collect()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            _ => Err(Error::config(format!(
                "unknown split '{name}' (train or val)"
            ))),
        }
    }
}

/// Options that override the manifest during ingestion.
#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub caption_threshold: Option<f64>,
    pub split_seed: Option<u64>,
    pub validation_fraction: Option<f64>,
}

/// Validates and aligns the dataset at `manifest`, filters captions, splits,
/// and writes a self-contained dataset directory to `out`.
pub fn ingest(manifest: &Path, opts: &IngestOptions, out: &Path) -> Result<Ingested> {
    let mut data = Dataset::load(manifest)?;
    if let Some(t) = opts.caption_threshold {
        data.manifest.caption_threshold = t;
    }
    if let Some(s) = opts.split_seed {
        data.manifest.split_seed = s;
    }
    if let Some(f) = opts.validation_fraction {
        data.manifest.validation_fraction = f;
    }
    data.manifest.validate()?;

    let mut kept = vec![Vec::new(); data.len()];
    let mut log = Vec::new();
    for (g, vectors) in &data.texts {
        let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = vectors.iter().zip(&data.image).collect();
        let pass: HashSet<usize> = filter_captions(&pairs, data.manifest.caption_threshold)
            .into_iter()
            .collect();
        for (i, (t, im)) in pairs.iter().enumerate() {
            let ok = pass.contains(&i);
            if ok {
                kept[i].push(*g);
            }
            log.push(FilterRow {
                id: data.ids[i].clone(),
                granularity: g.as_str().to_string(),
                similarity: cosine_similarity(t, im),
                kept: ok,
            });
        }
    }
    let (train, val) = split_indices(
        data.len(),
        data.manifest.validation_fraction,
        data.manifest.split_seed,
    );

    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let rows: Vec<(String, Pose)> = data
        .ids
        .iter()
        .cloned()
        .zip(data.poses.iter().copied())
        .collect();
    write_pose_table(&out.join(files::POSES), &rows)?;
    let table = |modality, vectors: &[Vec<f64>]| EmbeddingTable {
        modality,
        dim: data.dim(),
        vectors: vectors.to_vec(),
        ids: Some(data.ids.clone()),
    };
    write_embeddings(
        &out.join(files::IMAGE),
        &table(Modality::Image, &data.image),
    )?;
    write_captions(&out.join(files::CAPTIONS), &data.captions)?;
    let mut text_embeddings = BTreeMap::new();
    for (g, v) in &data.texts {
        let name = files::text(*g);
        write_embeddings(&out.join(&name), &table(Modality::Text, v))?;
        text_embeddings.insert(g.as_str().to_string(), PathBuf::from(name));
    }
    let scene = match &data.scene {
        Some(s) => {
            save_ply(&out.join(files::SCENE), s)?;
            Some(PathBuf::from(files::SCENE))
        }
        None => None,
    };
    let manifest = DatasetManifest {
        poses: files::POSES.into(),
        image_embeddings: files::IMAGE.into(),
        captions: files::CAPTIONS.into(),
        text_embeddings,
        scene,
        ..data.manifest.clone()
    };
    manifest.save(&out.join(files::MANIFEST))?;
    let write_ids = |name: &str, idx: &[usize]| -> Result<()> {
        let mut text: String = idx.iter().map(|&i| format!("{}\n", data.ids[i])).collect();
        if text.is_empty() {
            text.push('\n');
        }
        std::fs::write(out.join(name), text).map_err(|e| io(&out.join(name), e))
    };
    write_ids(TRAIN_IDS, &train)?;
    write_ids(VAL_IDS, &val)?;
    let p = out.join(FILTER);
    let mut w =
        csv::Writer::from_path(&p).map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
    for row in &log {
        w.serialize(row)
            .map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
    }
    w.flush().map_err(|e| io(&p, e))?;
    // reload so paths and embeddings match what later commands will see
    Ingested::open(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate, write, BenchmarkSpec};

    fn bench(dir: &Path, cameras: usize) -> PathBuf {
        let spec = BenchmarkSpec {
            cameras,
            ..BenchmarkSpec::toy()
        };
        let b = generate(&spec, 4).unwrap();
        write(&b, &spec, 4, dir).unwrap();
        dir.join(files::MANIFEST)
    }

    #[test]
    fn ten_records_split_nine_one() {
        let dir = tempfile::tempdir().unwrap();
        let m = bench(&dir.path().join("b"), 10);
        let opts = IngestOptions {
            caption_threshold: Some(-1.0),
            ..IngestOptions::default()
        };
        let ing = ingest(&m, &opts, &dir.path().join("i")).unwrap();
        assert_eq!((ing.train.len(), ing.val.len()), (9, 1));
        assert!(ing.kept.iter().all(|k| k.len() == 4));
        assert_eq!(ing.train_records().unwrap().len(), 9);
    }

    #[test]
    fn split_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let m = bench(&dir.path().join("b"), 20);
        for out in ["x", "y"] {
            ingest(&m, &IngestOptions::default(), &dir.path().join(out)).unwrap();
        }
        for f in [TRAIN_IDS, VAL_IDS, FILTER, files::MANIFEST, files::IMAGE] {
            let a = std::fs::read(dir.path().join("x").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("y").join(f)).unwrap();
            assert!(a == b, "{f}");
        }
    }

    #[test]
    fn missing_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b");
        let m = bench(&b, 10);
        let ids = posedist::encoder::ids_path(&b.join(files::IMAGE));
        let text = std::fs::read_to_string(&ids)
            .unwrap()
            .replace("cam0003", "cam9999");
        std::fs::write(&ids, text).unwrap();
        let err = ingest(&m, &IngestOptions::default(), &dir.path().join("i")).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("cam0003 missing from image embeddings"),
            "{msg}"
        );
        assert!(msg.contains("cam9999"), "{msg}");
    }

    #[test]
    fn threshold_above_one_drops_all_captions() {
        let dir = tempfile::tempdir().unwrap();
        let m = bench(&dir.path().join("b"), 10);
        let opts = IngestOptions {
            caption_threshold: Some(1.5),
            ..IngestOptions::default()
        };
        let ing = ingest(&m, &opts, &dir.path().join("i")).unwrap();
        assert!(ing.kept.iter().all(Vec::is_empty));
        assert!(ing
            .train_records()
            .unwrap()
            .iter()
            .all(|r| r.texts.is_empty()));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_indices(10, 0.1, 0).1.len(), 1);
        assert_eq!(split_indices(200, 0.1, 0).1.len(), 20);
        assert_eq!(split_indices(3, 0.01, 0).1.len(), 1);
        let (t, v) = split_indices(50, 0.3, 9);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    proptest::proptest! {
        #[test]
        fn splits_partition_and_repeat(n in 2usize..300, frac in 0.0f64..1.0, seed in proptest::prelude::any::<u64>()) {
            let (t, v) = split_indices(n, frac, seed);
            proptest::prop_assert!(!t.is_empty() && !v.is_empty());
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            proptest::prop_assert_eq!(split_indices(n, frac, seed), (t, v));
        }
    }
}
