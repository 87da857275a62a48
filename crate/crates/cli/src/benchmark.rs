//! Synthetic landmark benchmark: a tagged splat scene, cameras aimed at
//! landmark instances, image embeddings from renders and template captions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use posedist::encoder::{
    captions_from_counts, encode_text, synthetic_encode, write_captions, write_embeddings,
    CaptionSet, EmbeddingTable, Granularity, Modality,
};
use posedist::eval::write_pose_table;
use posedist::geometry::{Pose, Vec3};
use posedist::splat::{
    make_synthetic_scene, save_ply, visible_landmark_histogram, Camera, ClassSpec, GaussianScene,
    SceneSpec,
};
use posedist::{par, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, EncoderSpec};

const MAX_CAMERA_ATTEMPTS_PER_CAMERA: usize = 200;
/// Coverage share to caption quantity.
const SALIENCE_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampling {
    pub min_distance: f64,
    pub max_distance: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Heading jitter away from the aimed instance, degrees.
    pub yaw_jitter_deg: f64,
    pub fov_x_deg: f64,
    /// Render size used for the image embedding.
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSampling {
    fn default() -> Self {
        CameraSampling {
            min_distance: 6.0,
            max_distance: 20.0,
            min_height: 1.5,
            max_height: 2.5,
            yaw_jitter_deg: 25.0,
            fov_x_deg: 60.0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub cameras: usize,
    #[serde(default)]
    pub camera: CameraSampling,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_threshold")]
    pub caption_threshold: f64,
}

fn default_dim() -> usize {
    64
}

fn default_fraction() -> f64 {
    0.1
}

fn default_threshold() -> f64 {
    0.2
}

impl BenchmarkSpec {
    /// Four landmark classes with two instances each, 200 cameras.
    pub fn toy() -> Self {
        let class = |name: &str| ClassSpec {
            name: name.into(),
            instances: 2,
            gaussians: 24,
            color: None,
        };
        BenchmarkSpec {
            scene: SceneSpec {
                classes: vec![
                    class("tower"),
                    class("statue"),
                    class("fountain"),
                    class("kiosk"),
                ],
                region_min: [-20.0, -20.0],
                region_max: [20.0, 20.0],
                min_separation: 12.0,
                cluster_radius: 1.2,
                cluster_height: 4.0,
            },
            cameras: 200,
            camera: CameraSampling::default(),
            embedding_dim: 64,
            validation_fraction: 0.1,
            caption_threshold: 0.2,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.cameras == 0 {
            return Err(Error::config("benchmark needs at least one camera"));
        }
        let c = &self.camera;
        if !(0.0 < c.min_distance && c.min_distance <= c.max_distance) {
            return Err(Error::config(
                "camera distances must satisfy 0 < min <= max",
            ));
        }
        if !(c.min_height <= c.max_height) || !(c.yaw_jitter_deg >= 0.0) {
            return Err(Error::config("bad camera height or jitter range"));
        }
        if c.width == 0 || c.height == 0 || !(c.fov_x_deg > 0.0 && c.fov_x_deg < 180.0) {
            return Err(Error::config("bad camera intrinsics"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Generated benchmark in memory.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub scene: GaussianScene,
    pub ids: Vec<String>,
    pub poses: Vec<Pose>,
    /// Per-camera visible Gaussian counts by class.
    pub visible: Vec<Vec<u32>>,
    /// Class each camera was aimed at.
    pub aimed_class: Vec<usize>,
    pub captions: Vec<CaptionSet>,
    pub image: EmbeddingTable,
    pub texts: Vec<(Granularity, EmbeddingTable)>,
    pub encoder: EncoderSpec,
}

/// Centre of every instance, with its class, in generation order.
fn instance_centres(spec: &SceneSpec, scene: &GaussianScene) -> Vec<(usize, Vec3)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (c, class) in spec.classes.iter().enumerate() {
        for _ in 0..class.instances {
            let n = class.gaussians as f64;
            let mut m = [0.0; 3];
            for p in &scene.centroids[start..start + class.gaussians] {
                for k in 0..3 {
                    m[k] += p[k] / n;
                }
            }
            out.push((c, m));
            start += class.gaussians;
        }
    }
    out
}

pub fn generate(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let scene = make_synthetic_scene(&spec.scene, seed)?;
    let centres = instance_centres(&spec.scene, &scene);
    let cs = &spec.camera;
    let template = Camera::new(
        Pose::IDENTITY,
        cs.fov_x_deg.to_radians(),
        cs.width,
        cs.height,
    )?;
    let keep_out = spec.scene.cluster_radius + 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut poses = Vec::with_capacity(spec.cameras);
    let mut visible = Vec::with_capacity(spec.cameras);
    let mut aimed_class = Vec::with_capacity(spec.cameras);
    let mut attempts = 0;
    while poses.len() < spec.cameras {
        attempts += 1;
        if attempts > MAX_CAMERA_ATTEMPTS_PER_CAMERA * spec.cameras {
            return Err(Error::config(
                "could not place cameras that see any landmark",
            ));
        }
        let (class, centre) = centres[rng.random_range(0..centres.len())];
        let d = rng.random_range(cs.min_distance..=cs.max_distance);
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let h = rng.random_range(cs.min_height..=cs.max_height);
        let jitter = rng
            .random_range(-cs.yaw_jitter_deg..=cs.yaw_jitter_deg)
            .to_radians();
        let eye = [centre[0] + d * az.cos(), centre[1] + d * az.sin(), h];
        if centres
            .iter()
            .any(|(_, c)| (eye[0] - c[0]).hypot(eye[1] - c[1]) < keep_out)
        {
            continue;
        }
        // heading from the eye back towards the instance
        let heading = (centre[1] - eye[1]).atan2(centre[0] - eye[0]) + jitter;
        let pose = Pose::from_yaw(eye, heading);
        let hist = visible_landmark_histogram(&scene, &template.with_pose(pose))?;
        if hist.iter().all(|c| *c == 0) {
            continue;
        }
        poses.push(pose);
        visible.push(hist);
        aimed_class.push(class);
    }

    let ids: Vec<String> = (0..spec.cameras).map(|i| format!("cam{i:04}")).collect();
    let encoder = EncoderSpec::for_scene(&scene, spec.embedding_dim, seed);
    let coverage = encoder.build()?;
    let histograms = par::try_map_indexed(poses.len(), |i| {
        coverage.histogram(&scene, &template.with_pose(poses[i]))
    })?;
    let image_vectors = histograms
        .iter()
        .map(|h| synthetic_encode(h, &coverage.vocab))
        .collect::<Result<Vec<_>>>()?;
    // visible classes are named; quantities follow each one's share of the view
    let captions = ids
        .iter()
        .zip(&visible)
        .zip(&histograms)
        .map(|((id, vis), hist)| {
            let salience: Vec<u32> = vis
                .iter()
                .zip(hist)
                .map(|(&v, &share)| {
                    if v == 0 {
                        0
                    } else {
                        ((SALIENCE_SCALE * share).round() as u32).max(1)
                    }
                })
                .collect();
            captions_from_counts(id, &scene.class_names, &salience)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut texts = Vec::new();
    for g in Granularity::TEXT {
        let vectors = captions
            .iter()
            .map(|c| Ok(encode_text(&c.text(g)?, &coverage.vocab, g)?.vector))
            .collect::<Result<Vec<_>>>()?;
        texts.push((
            g,
            EmbeddingTable {
                modality: Modality::Text,
                dim: spec.embedding_dim,
                vectors,
                ids: Some(ids.clone()),
            },
        ));
    }
    Ok(Benchmark {
        scene,
        image: EmbeddingTable {
            modality: Modality::Image,
            dim: spec.embedding_dim,
            vectors: image_vectors,
            ids: Some(ids.clone()),
        },
        ids,
        poses,
        visible,
        aimed_class,
        captions,
        texts,
        encoder,
    })
}

/// File names used inside a dataset directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.toml";
    pub const SCENE: &str = "scene.ply";
    pub const POSES: &str = "poses.csv";
    pub const IMAGE: &str = "image.emb";
    pub const CAPTIONS: &str = "captions.jsonl";

    pub fn text(g: posedist::encoder::Granularity) -> String {
        format!("text_{}.emb", g.as_str())
    }
}

/// Writes the benchmark as a dataset directory with a manifest.
pub fn write(
    bench: &Benchmark,
    spec: &BenchmarkSpec,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    save_ply(&dir.join(files::SCENE), &bench.scene)?;
    let rows: Vec<(String, Pose)> = bench
        .ids
        .iter()
        .cloned()
        .zip(bench.poses.iter().copied())
        .collect();
    write_pose_table(&dir.join(files::POSES), &rows)?;
    write_embeddings(&dir.join(files::IMAGE), &bench.image)?;
    write_captions(&dir.join(files::CAPTIONS), &bench.captions)?;
    let mut text_embeddings = BTreeMap::new();
    for (g, table) in &bench.texts {
        let name = files::text(*g);
        write_embeddings(&dir.join(&name), table)?;
        text_embeddings.insert(g.as_str().to_string(), PathBuf::from(name));
    }
    let manifest = DatasetManifest {
        poses: files::POSES.into(),
        image_embeddings: files::IMAGE.into(),
        captions: files::CAPTIONS.into(),
        text_embeddings,
        scene: Some(files::SCENE.into()),
        encoder: Some(bench.encoder.clone()),
        split_seed: seed,
        validation_fraction: spec.validation_fraction,
        caption_threshold: spec.caption_threshold,
    };
    manifest.save(&dir.join(files::MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use posedist::geometry::{dot3, norm3, sub3};

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            cameras: 24,
            ..BenchmarkSpec::toy()
        }
    }

    #[test]
    fn counts_align() {
        let b = generate(&small(), 1).unwrap();
        assert_eq!(b.poses.len(), 24);
        assert_eq!(b.captions.len(), 24);
        assert_eq!(b.image.vectors.len(), 24);
        assert!(b.texts.iter().all(|(_, t)| t.vectors.len() == 24));
        assert_eq!(b.scene.len(), 4 * 2 * 24);
    }

    #[test]
    fn aimed_class_appears_in_nouns_when_centred() {
        let spec = BenchmarkSpec {
            camera: CameraSampling {
                yaw_jitter_deg: 0.0,
                ..CameraSampling::default()
            },
            ..small()
        };
        let b = generate(&spec, 2).unwrap();
        for i in 0..b.poses.len() {
            let name = &b.scene.class_names[b.aimed_class[i]];
            assert!(
                b.captions[i].nouns.contains(name),
                "{i}: {:?} lacks {name}",
                b.captions[i].nouns
            );
        }
    }

    #[test]
    fn cameras_are_level_and_outside_clusters() {
        let spec = small();
        let b = generate(&spec, 3).unwrap();
        let centres = instance_centres(&spec.scene, &b.scene);
        for p in &b.poses {
            assert!(p.forward()[2].abs() < 1e-12);
            assert!((1.5..=2.5).contains(&p.translation[2]));
            for (_, c) in &centres {
                let d = sub3(p.translation, *c);
                assert!(d[0].hypot(d[1]) >= spec.scene.cluster_radius + 1.0);
            }
        }
        // some camera looks roughly at something
        assert!(b.poses.iter().any(|p| centres.iter().any(|(_, c)| {
            let d = sub3(*c, p.translation);
            dot3(d, p.forward()) / norm3(d) > 0.9
        })));
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        for sub in ["a", "b"] {
            let b = generate(&spec, 5).unwrap();
            write(&b, &spec, 5, &dir.path().join(sub)).unwrap();
        }
        for f in std::fs::read_dir(dir.path().join("a")).unwrap() {
            let name = f.unwrap().file_name();
            let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
            assert!(a == b, "{name:?} differs");
        }
    }

    #[test]
    fn zero_cameras_rejected() {
        let spec = BenchmarkSpec {
            cameras: 0,
            ..BenchmarkSpec::toy()
        };
        assert!(generate(&spec, 0).unwrap_err().is_config());
    }

    #[test]
    fn toy_spec_parses_from_toml() {
        let text = toml::to_string(&BenchmarkSpec::toy()).unwrap();
        let back: BenchmarkSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, BenchmarkSpec::toy());
    }
}
