//! Forward rasterizer: EWA projection, one global depth sort, per-pixel
//! front-to-back blending. Rows are independent and rendered in parallel.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{covariance3d, Camera, GaussianScene, SH_C0};
use crate::error::{Error, Result};
use crate::geometry::{mat3_mul, mat3_transpose, norm3, scale3, sub3, Mat3};
use crate::par;

/// Added to the projected covariance diagonal so sub-pixel Gaussians still
/// cover a pixel.
const LOW_PASS: f64 = 0.3;
/// Screen-space extent in standard deviations.
const CUTOFF_SIGMA: f64 = 3.0;
/// The affine projection is evaluated with `x/z`, `y/z` clamped to this
/// multiple of the half-field tangent.
const FRUSTUM_SLACK: f64 = 1.3;
const HISTOGRAM_MIN_WEIGHT: f64 = 0.01;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Highest SH degree evaluated (clamped to what the scene carries).
    pub sh_degree: usize,
    /// Gaussians closer than this (camera z) are culled.
    pub near: f64,
    /// Blending stops once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            sh_degree: 0,
            near: 0.01,
            min_transmittance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0, 1]`.
    pub pixels: Vec<[f64; 3]>,
    /// Accumulated opacity `1 - prod(1 - h)` per pixel.
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

/// Share of the image covered by each landmark class (summed blend weights
/// over pixels) and by the background, under a pixel weighting that sums to
/// one.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub per_class: Vec<f64>,
    pub background: f64,
}

/// A Gaussian after projection.
#[derive(Clone, Debug)]
struct Splat {
    u: f64,
    v: f64,
    depth: f64,
    /// Inverse 2D covariance `(a, b, c)` for `a dx^2 + 2 b dx dy + c dy^2`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    x_range: (usize, usize),
    y_range: (usize, usize),
    class: u32,
}

impl Splat {
    fn alpha_at(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.u;
        let dy = y as f64 + 0.5 - self.v;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        self.opacity * power.min(0.0).exp()
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        (self.x_range.0..self.x_range.1).contains(&x)
            && (self.y_range.0..self.y_range.1).contains(&y)
    }

    /// Total order used for the depth sort. Ties are broken on content so
    /// the result does not depend on the storage order.
    fn order(&self, o: &Splat) -> Ordering {
        self.depth
            .total_cmp(&o.depth)
            .then(self.u.total_cmp(&o.u))
            .then(self.v.total_cmp(&o.v))
            .then(self.opacity.total_cmp(&o.opacity))
            .then(self.conic[0].total_cmp(&o.conic[0]))
            .then(self.conic[1].total_cmp(&o.conic[1]))
            .then(self.conic[2].total_cmp(&o.conic[2]))
            .then(self.color[0].total_cmp(&o.color[0]))
            .then(self.color[1].total_cmp(&o.color[1]))
            .then(self.color[2].total_cmp(&o.color[2]))
            .then(self.class.cmp(&o.class))
    }
}

fn eval_color(scene: &GaussianScene, i: usize, dir: [f64; 3], degree: usize) -> [f64; 3] {
    let mut c = scene.sh_dc[i].map(|v| SH_C0 * v);
    if degree > 0 {
        let rest = &scene.sh_rest[i];
        let [x, y, z] = dir;
        let mut basis = vec![-SH_C1 * y, SH_C1 * z, -SH_C1 * x];
        if degree > 1 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            basis.extend([
                SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy),
            ]);
            if degree > 2 {
                basis.extend([
                    SH_C3[0] * y * (3.0 * xx - yy),
                    SH_C3[1] * x * y * z,
                    SH_C3[2] * y * (4.0 * zz - xx - yy),
                    SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                    SH_C3[4] * x * (4.0 * zz - xx - yy),
                    SH_C3[5] * z * (xx - yy),
                    SH_C3[6] * x * (xx - 3.0 * yy),
                ]);
            }
        }
        for (b, coeff) in basis.iter().zip(rest) {
            for ch in 0..3 {
                c[ch] += b * coeff[ch];
            }
        }
    }
    c.map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn project_scene(scene: &GaussianScene, cam: &Camera, settings: &RenderSettings) -> Vec<Splat> {
    let w2c = cam.pose.world_to_camera_rotation();
    let (fx, fy) = cam.focal();
    let (cx, cy) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
    let lim_x = FRUSTUM_SLACK * (0.5 * cam.fov_x).tan();
    let lim_y = FRUSTUM_SLACK * (0.5 * cam.fov_y).tan();
    let degree = settings.sh_degree.min(scene.sh_degree());
    let classes = scene.landmark_class.as_deref();
    let mut out: Vec<Splat> = (0..scene.len())
        .filter_map(|i| {
            let p = cam.pose.world_to_camera(scene.centroids[i]);
            let z = p[2];
            if z < settings.near || scene.opacities[i] <= 0.0 {
                return None;
            }
            let tx = (p[0] / z).clamp(-lim_x, lim_x) * z;
            let ty = (p[1] / z).clamp(-lim_y, lim_y) * z;
            let j: [[f64; 3]; 2] = [
                [fx / z, 0.0, -fx * tx / (z * z)],
                [0.0, fy / z, -fy * ty / (z * z)],
            ];
            let sigma = covariance3d(scene.scales[i], scene.rotations[i]);
            let sigma_cam: Mat3 = mat3_mul(&mat3_mul(&w2c, &sigma), &mat3_transpose(&w2c));
            let mut cov = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            s += j[r][k] * sigma_cam[k][l] * j[c][l];
                        }
                    }
                    cov[r][c] = s;
                }
            }
            cov[0][0] += LOW_PASS;
            cov[1][1] += LOW_PASS;
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let conic = [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det];
            let u = fx * p[0] / z + cx;
            let v = fy * p[1] / z + cy;
            let rx = CUTOFF_SIGMA * cov[0][0].sqrt();
            let ry = CUTOFF_SIGMA * cov[1][1].sqrt();
            let x_range = pixel_span(u, rx, cam.width)?;
            let y_range = pixel_span(v, ry, cam.height)?;
            let view = sub3(scene.centroids[i], cam.pose.translation);
            let n = norm3(view);
            let dir = if n > 0.0 {
                scale3(view, 1.0 / n)
            } else {
                [0.0, 0.0, 1.0]
            };
            Some(Splat {
                u,
                v,
                depth: z,
                conic,
                opacity: scene.opacities[i],
                color: eval_color(scene, i, dir, degree),
                x_range,
                y_range,
                class: classes.map_or(0, |c| c[i]),
            })
        })
        .collect();
    out.sort_by(|a, b| a.order(b));
    out
}

/// Pixel indices `i` with `|i + 0.5 - centre| <= radius`, clipped to the
/// image, as a half-open range.
fn pixel_span(centre: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (centre - radius - 0.5).ceil().max(0.0);
    let hi = (centre + radius - 0.5).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

struct Row {
    pixels: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    class_weight: Vec<f64>,
    background: f64,
    total: f64,
}

/// Per-pixel weight for coverage: a centred Gaussian with standard
/// deviation `fovea` times the shorter half-side, or uniform.
fn pixel_weight(cam: &Camera, fovea: Option<f64>, x: usize, y: usize) -> f64 {
    match fovea {
        None => 1.0,
        Some(f) => {
            let r = f * 0.5 * cam.width.min(cam.height) as f64;
            let dx = x as f64 + 0.5 - 0.5 * cam.width as f64;
            let dy = y as f64 + 0.5 - 0.5 * cam.height as f64;
            (-0.5 * (dx * dx + dy * dy) / (r * r)).exp()
        }
    }
}

struct Raster {
    image: RenderedImage,
    class_weight: Vec<f64>,
    background: f64,
    total: f64,
}

fn rasterize(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
    class_count: usize,
    fovea: Option<f64>,
) -> Result<Raster> {
    cam.validate()?;
    scene.validate()?;
    let splats = project_scene(scene, cam, settings);
    let rows = par::map_indexed(cam.height, |y| {
        let active: Vec<&Splat> = splats
            .iter()
            .filter(|s| (s.y_range.0..s.y_range.1).contains(&y))
            .collect();
        let mut row = Row {
            pixels: Vec::with_capacity(cam.width),
            alpha: Vec::with_capacity(cam.width),
            class_weight: vec![0.0; class_count],
            background: 0.0,
            total: 0.0,
        };
        for x in 0..cam.width {
            let pw = if class_count > 0 {
                pixel_weight(cam, fovea, x, y)
            } else {
                0.0
            };
            let mut color = [0.0; 3];
            let mut trans = 1.0;
            for s in &active {
                if !(s.x_range.0..s.x_range.1).contains(&x) {
                    continue;
                }
                let a = s.alpha_at(x, y);
                let w = a * trans;
                for ch in 0..3 {
                    color[ch] += s.color[ch] * w;
                }
                if class_count > 0 {
                    row.class_weight[s.class as usize] += pw * w;
                }
                trans *= 1.0 - a;
                if trans < settings.min_transmittance {
                    break;
                }
            }
            for ch in 0..3 {
                color[ch] += trans * settings.background[ch];
            }
            row.pixels.push(color);
            row.alpha.push(1.0 - trans);
            row.background += pw * trans;
            row.total += pw;
        }
        row
    });
    let mut img = RenderedImage {
        width: cam.width,
        height: cam.height,
        pixels: Vec::with_capacity(cam.width * cam.height),
        alpha: Vec::with_capacity(cam.width * cam.height),
    };
    let mut class_weight = vec![0.0; class_count];
    let (mut background, mut total) = (0.0, 0.0);
    for r in rows {
        img.pixels.extend(r.pixels);
        img.alpha.extend(r.alpha);
        class_weight
            .iter_mut()
            .zip(&r.class_weight)
            .for_each(|(a, b)| *a += b);
        background += r.background;
        total += r.total;
    }
    Ok(Raster {
        image: img,
        class_weight,
        background,
        total,
    })
}

/// Renders with default settings (black background, degree-0 colour).
pub fn render(scene: &GaussianScene, cam: &Camera) -> Result<RenderedImage> {
    render_with(scene, cam, &RenderSettings::default())
}

pub fn render_with(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    Ok(rasterize(scene, cam, settings, 0, None)?.image)
}

fn require_tags(scene: &GaussianScene) -> Result<usize> {
    match &scene.landmark_class {
        Some(_) => Ok(scene.class_count()),
        None => Err(Error::data("scene has no landmark_class tags")),
    }
}

/// Renders and reports per-class image coverage. With `fovea`, pixels are
/// weighted by a centred Gaussian (see [`Coverage`]).
pub fn class_coverage(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
    fovea: Option<f64>,
) -> Result<(RenderedImage, Coverage)> {
    let classes = require_tags(scene)?;
    if let Some(f) = fovea {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::config("fovea width must be positive"));
        }
    }
    let r = rasterize(scene, cam, settings, classes.max(1), fovea)?;
    let per_class = r
        .class_weight
        .into_iter()
        .take(classes)
        .map(|w| w / r.total)
        .collect();
    Ok((
        r.image,
        Coverage {
            per_class,
            background: r.background / r.total,
        },
    ))
}

/// Per-class count of Gaussians whose projected centre lands in the image
/// and whose blend weight at that pixel exceeds 0.01.
pub fn visible_landmark_histogram(scene: &GaussianScene, cam: &Camera) -> Result<Vec<u32>> {
    let classes = require_tags(scene)?;
    cam.validate()?;
    scene.validate()?;
    let settings = RenderSettings::default();
    let splats = project_scene(scene, cam, &settings);
    // group splats by the pixel holding their centre
    let mut by_pixel: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, s) in splats.iter().enumerate() {
        if s.u >= 0.0 && s.v >= 0.0 && s.u < cam.width as f64 && s.v < cam.height as f64 {
            by_pixel
                .entry((s.v as usize, s.u as usize))
                .or_default()
                .push(k);
        }
    }
    let mut hist = vec![0u32; classes];
    for ((y, x), members) in by_pixel {
        let mut trans = 1.0;
        let mut weight = vec![0.0; splats.len()];
        for (k, s) in splats.iter().enumerate() {
            if !s.covers(x, y) {
                continue;
            }
            let a = s.alpha_at(x, y);
            weight[k] = a * trans;
            trans *= 1.0 - a;
            if trans < settings.min_transmittance {
                break;
            }
        }
        for k in members {
            if weight[k] > HISTOGRAM_MIN_WEIGHT {
                hist[splats[k].class as usize] += 1;
            }
        }
    }
    Ok(hist)
}

pub fn write_ppm(path: &Path, img: &RenderedImage) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height).map_err(|e| Error::io(path, e))?;
    f.write_all(&img.to_rgb8()).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, img: &RenderedImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .ok_or_else(|| Error::data("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
