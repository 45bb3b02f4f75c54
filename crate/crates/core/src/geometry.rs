//! Patchification: farthest point sampling of patch centers and KNN
//! grouping of center-normalized local neighborhoods.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::rng_from;

pub type Point = [f64; 3];

/// Unordered 3D point set, the raw input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_label(points, None)
    }

    pub fn with_label(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::EmptyInput("point cloud has no points".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(CoreError::InvalidInput(format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Centers plus center-normalized fixed-size neighborhoods.
///
/// `patches[g][s] + centers[g]` reproduces the original point at
/// `source_indices[g][s]` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub patches: Vec<Vec<Point>>,
    pub source_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Start index for FPS: point farthest from the centroid, ties by
/// lowest index. `random_start` draws uniformly from the seed instead.
fn fps_start(points: &[Point], seed: u64, random_start: bool) -> usize {
    if random_start {
        let mut rng = rng_from(seed, "fps-start");
        return rng.gen_range(0..points.len());
    }
    let n = points.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in centroid.iter_mut() {
        *a /= n;
    }
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Greedy farthest point sampling. Each selected index maximizes the
/// minimum squared distance to the already-selected set; ties break to
/// the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, g: usize, seed: u64) -> Result<Vec<usize>> {
    farthest_point_sample_mode(cloud, g, seed, false)
}

pub fn farthest_point_sample_mode(
    cloud: &PointCloud,
    g: usize,
    seed: u64,
    random_start: bool,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if g == 0 || g > n {
        return Err(CoreError::InvalidArgument(format!(
            "fps requires 1 <= G <= N, got G={g} N={n}"
        )));
    }
    let start = fps_start(&cloud.points, seed, random_start);
    let mut selected = Vec::with_capacity(g);
    selected.push(start);
    // min squared distance from each point to the selected set
    let mut min_d: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| dist2(p, &cloud.points[start]))
        .collect();
    while selected.len() < g {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(&cloud.points[i], &cloud.points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// KNN grouping around each center. The center is its own nearest
/// neighbor; ties break to the lowest index. When N < S the sorted
/// neighbor list is repeated cyclically to fill S slots.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], s: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if s == 0 {
        return Err(CoreError::InvalidArgument("patch size S must be >= 1".into()));
    }
    for &ci in center_indices {
        if ci >= n {
            return Err(CoreError::InvalidArgument(format!(
                "center index {ci} out of range for N={n}"
            )));
        }
    }
    let mut centers = Vec::with_capacity(center_indices.len());
    let mut patches = Vec::with_capacity(center_indices.len());
    let mut source_indices = Vec::with_capacity(center_indices.len());
    for &ci in center_indices {
        let c = cloud.points[ci];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            dist2(&cloud.points[a], &c)
                .partial_cmp(&dist2(&cloud.points[b], &c))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut idx = Vec::with_capacity(s);
        for k in 0..s {
            idx.push(order[k % n]);
        }
        let patch: Vec<Point> = idx
            .iter()
            .map(|&i| {
                let p = cloud.points[i];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect();
        centers.push(c);
        patches.push(patch);
        source_indices.push(idx);
    }
    Ok(PatchSet {
        centers,
        patches,
        source_indices,
    })
}

/// FPS then KNN grouping.
pub fn make_patches(cloud: &PointCloud, g: usize, s: usize, seed: u64) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, g, seed)?;
    knn_group(cloud, &centers, s)
}
