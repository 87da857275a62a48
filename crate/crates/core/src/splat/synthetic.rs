//! Landmark scenes: one compact cluster of Gaussians per instance, tagged
//! with its class and tinted with a class colour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GaussianScene, SH_C0};
use crate::error::{Error, Result};
use crate::geometry::uniform_rotation;

const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub instances: usize,
    /// Gaussians per instance.
    pub gaussians: usize,
    /// RGB in `[0, 1]`; evenly spaced hues when omitted.
    #[serde(default)]
    pub color: Option<[f64; 3]>,
}

/// Layout of a synthetic landmark scene. Instances sit on the ground plane
/// (`z = 0`) inside `region_min..region_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub region_min: [f64; 2],
    pub region_max: [f64; 2],
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    #[serde(default = "default_radius")]
    pub cluster_radius: f64,
    #[serde(default = "default_height")]
    pub cluster_height: f64,
}

fn default_separation() -> f64 {
    8.0
}

fn default_radius() -> f64 {
    1.2
}

fn default_height() -> f64 {
    4.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.iter().all(|c| c.instances == 0) {
            return Err(Error::config("scene spec lists no landmark instances"));
        }
        if self
            .classes
            .iter()
            .any(|c| c.gaussians == 0 && c.instances > 0)
        {
            return Err(Error::config(
                "every instantiated class needs at least one Gaussian",
            ));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::config("class names must be unique and non-empty"));
        }
        if (0..2).any(|k| !(self.region_min[k] < self.region_max[k])) {
            return Err(Error::config("region_min must be below region_max"));
        }
        if !(self.min_separation >= 0.0 && self.cluster_radius > 0.0 && self.cluster_height > 0.0) {
            return Err(Error::config("cluster sizes must be positive"));
        }
        Ok(())
    }

    /// Instance centres `(class, x, y)` in generation order.
    fn place(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, [f64; 2])>> {
        let mut placed: Vec<(usize, [f64; 2])> = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            for _ in 0..class.instances {
                let spot = (0..PLACEMENT_ATTEMPTS)
                    .map(|_| {
                        [
                            rng.random_range(self.region_min[0]..self.region_max[0]),
                            rng.random_range(self.region_min[1]..self.region_max[1]),
                        ]
                    })
                    .find(|p| {
                        placed
                            .iter()
                            .all(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]) >= self.min_separation)
                    })
                    .ok_or_else(|| {
                        Error::config("region too small for the requested separation")
                    })?;
                placed.push((c, spot));
            }
        }
        Ok(placed)
    }
}

fn hue_color(i: usize, n: usize) -> [f64; 3] {
    let h = 6.0 * i as f64 / n as f64;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn make_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<GaussianScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = spec.place(&mut rng)?;
    let mut scene = GaussianScene {
        landmark_class: Some(Vec::new()),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        ..Default::default()
    };
    let n_classes = spec.classes.len();
    for (c, [cx, cy]) in centres {
        let class = &spec.classes[c];
        let base = class.color.unwrap_or_else(|| hue_color(c, n_classes));
        for _ in 0..class.gaussians {
            let r = spec.cluster_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(0.0..spec.cluster_height);
            scene
                .centroids
                .push([cx + r * phi.cos(), cy + r * phi.sin(), z]);
            let s = rng.random_range(0.35..0.7);
            scene
                .scales
                .push(std::array::from_fn(|_| s * rng.random_range(0.7..1.3)));
            scene.rotations.push(uniform_rotation(&mut rng));
            scene.opacities.push(rng.random_range(0.7..0.95));
            let rgb: [f64; 3] =
                std::array::from_fn(|k| (base[k] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            scene.sh_dc.push(rgb.map(|v| (v - 0.5) / SH_C0));
            scene.landmark_class.as_mut().unwrap().push(c as u32);
        }
    }
    Ok(scene)
}
