//! Geometric coordinate transforms applied during pre-training:
//! uniform SO(3) rotation, isotropic scale, per-axis translation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub rotation: bool,
    pub scale_translate: bool,
    pub scale_range: (f64, f64),
    pub translate_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            scale_translate: false,
            scale_range: (0.8, 1.2),
            translate_range: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(CoreError::Config(format!(
                "scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

pub type Rotation = [[f64; 3]; 3];

/// Uniform rotation over SO(3) via a normalized random quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    // four standard normals via Box-Muller
    let mut normals = [0.0f64; 4];
    for pair in 0..2 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        normals[2 * pair] = r * (std::f64::consts::TAU * u2).cos();
        normals[2 * pair + 1] = r * (std::f64::consts::TAU * u2).sin();
    }
    let norm = normals.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = [
        normals[0] / norm,
        normals[1] / norm,
        normals[2] / norm,
        normals[3] / norm,
    ];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(p: &Point, r: &Rotation) -> Point {
    let mut out = [0.0; 3];
    for (i, row) in r.iter().enumerate() {
        out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
    }
    out
}

/// Apply the enabled transforms in order rotation -> scale ->
/// translation, all drawn from the given stream.
pub fn apply_augment(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    cfg.validate()?;
    let mut points = cloud.points.clone();
    if cfg.rotation {
        let r = random_rotation(rng);
        for p in points.iter_mut() {
            *p = rotate(p, &r);
        }
    }
    if cfg.scale_translate {
        let (lo, hi) = cfg.scale_range;
        let s = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let t = [
            rng.gen_range(-cfg.translate_range..=cfg.translate_range),
            rng.gen_range(-cfg.translate_range..=cfg.translate_range),
            rng.gen_range(-cfg.translate_range..=cfg.translate_range),
        ];
        for p in points.iter_mut() {
            for a in 0..3 {
                p[a] = p[a] * s + t[a];
            }
        }
    }
    PointCloud::with_label(points, cloud.label)
}
