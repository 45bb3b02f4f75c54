//! Surface-uniform samplers for four primitive shapes, the desk-scale
//! stand-in for a real pre-training corpus.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{CoreError, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::rng_from;

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.3;
pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HEIGHT: f64 = 1.0;
pub const CUBE_HALF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus];

    pub fn label(self) -> usize {
        match self {
            Shape::Sphere => 0,
            Shape::Cube => 1,
            Shape::Cylinder => 2,
            Shape::Torus => 3,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One surface-uniform sample of the raw (un-normalized) primitive.
pub fn sample_surface(shape: Shape, rng: &mut ChaCha8Rng) -> Point {
    match shape {
        Shape::Sphere => {
            let mut p = [gaussian(rng), gaussian(rng), gaussian(rng)];
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
            for v in p.iter_mut() {
                *v /= n;
            }
            p
        }
        Shape::Cube => {
            let face = rng.gen_range(0..6usize);
            let u = rng.gen_range(-CUBE_HALF..CUBE_HALF);
            let v = rng.gen_range(-CUBE_HALF..CUBE_HALF);
            let s = if face % 2 == 0 { CUBE_HALF } else { -CUBE_HALF };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        Shape::Cylinder => {
            let lateral = std::f64::consts::TAU * CYLINDER_RADIUS * CYLINDER_HEIGHT;
            let caps = 2.0 * std::f64::consts::PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
            if rng.gen::<f64>() < lateral / (lateral + caps) {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = rng.gen_range(-CYLINDER_HEIGHT / 2.0..CYLINDER_HEIGHT / 2.0);
                [CYLINDER_RADIUS * theta.cos(), CYLINDER_RADIUS * theta.sin(), z]
            } else {
                // uniform in the disc via sqrt radius
                let r = CYLINDER_RADIUS * rng.gen::<f64>().sqrt();
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = if rng.gen::<bool>() {
                    CYLINDER_HEIGHT / 2.0
                } else {
                    -CYLINDER_HEIGHT / 2.0
                };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        Shape::Torus => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            // rejection-sample the minor angle so that area is uniform
            let ratio = TORUS_MINOR / TORUS_MAJOR;
            let phi = loop {
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                let accept = (1.0 + ratio * phi.cos()) / (1.0 + ratio);
                if rng.gen::<f64>() < accept {
                    break phi;
                }
            };
            let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
            [
                ring * theta.cos(),
                ring * theta.sin(),
                TORUS_MINOR * phi.sin(),
            ]
        }
    }
}

/// Sample a labeled cloud of the named primitive, normalized into the
/// unit sphere.
pub fn make_synthetic(shape: Shape, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(CoreError::InvalidArgument(format!(
            "synthetic clouds need at least 8 points, got {n_points}"
        )));
    }
    let mut rng = rng_from(seed, "synthetic");
    let mut points: Vec<Point> = (0..n_points).map(|_| sample_surface(shape, &mut rng)).collect();
    let max_norm = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            *v /= max_norm;
        }
    }
    PointCloud::with_label(points, Some(shape.label()))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points_per_cloud: usize,
    /// gaussian jitter applied after normalization
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            test_per_class: 50,
            points_per_cloud: 512,
            noise_sigma: 0.0,
        }
    }
}

/// Deterministic 4-class dataset. Train and test splits draw from
/// disjoint seed ranges.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let build = |count: usize, split: &str| -> Result<Vec<PointCloud>> {
        let mut out = Vec::with_capacity(count * Shape::ALL.len());
        for shape in Shape::ALL {
            for i in 0..count {
                let item_seed =
                    crate::rng::derive_seed(seed, &format!("{split}-{}-{i}", shape.label()));
                let mut cloud = make_synthetic(shape, cfg.points_per_cloud, item_seed)?;
                if cfg.noise_sigma > 0.0 {
                    let mut rng = rng_from(item_seed, "jitter");
                    for p in cloud.points.iter_mut() {
                        for v in p.iter_mut() {
                            *v += cfg.noise_sigma * gaussian(&mut rng);
                        }
                    }
                }
                out.push(cloud);
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        name: "synthetic-4class".into(),
        train: build(cfg.train_per_class, "train")?,
        test: build(cfg.test_per_class, "test")?,
        num_classes: Shape::ALL.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn sphere_samples_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_surface(Shape::Sphere, &mut rng);
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cube_samples_on_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = sample_surface(Shape::Cube, &mut rng);
            let on_face = p
                .iter()
                .filter(|v| (v.abs() - CUBE_HALF).abs() < 1e-6)
                .count();
            assert!(on_face >= 1);
            assert!(p.iter().all(|v| v.abs() <= CUBE_HALF + 1e-9));
        }
    }

    #[test]
    fn torus_implicit_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = sample_surface(Shape::Torus, &mut rng);
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - TORUS_MAJOR;
            let d = (ring * ring + p[2] * p[2]).sqrt();
            assert!((d - TORUS_MINOR).abs() < 1e-6);
        }
    }

    #[test]
    fn clouds_deterministic_and_normalized() {
        let a = make_synthetic(Shape::Cylinder, 64, 5).unwrap();
        let b = make_synthetic(Shape::Cylinder, 64, 5).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.label, Some(Shape::Cylinder.label()));
        for p in &a.points {
            assert!((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(make_synthetic(Shape::Sphere, 4, 0).is_err());
    }

    #[test]
    fn dataset_sizes_and_labels() {
        let cfg = SyntheticConfig {
            train_per_class: 3,
            test_per_class: 2,
            points_per_cloud: 16,
            noise_sigma: 0.01,
        };
        let d = make_synthetic_dataset(&cfg, 7).unwrap();
        assert_eq!(d.train.len(), 12);
        assert_eq!(d.test.len(), 8);
        assert_eq!(d.num_classes, 4);
        for c in d.train.iter().chain(&d.test) {
            assert!(c.label.unwrap() < 4);
        }
        // train/test are disjoint draws
        assert_ne!(d.train[0].points, d.test[0].points);
    }
}
