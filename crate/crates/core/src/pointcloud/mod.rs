//! Point-cloud data model, preprocessing and augmentation.

mod augment;
mod dataset;
mod io;
mod mixup;

pub use augment::{augment, AugmentationSpec};
pub use dataset::{AdaptationGuard, Dataset, SealedLabels};
pub use io::{read_manifest, read_xyz, write_manifest, write_xyz, ManifestRow};
pub use mixup::{pcm_mixup, PCM_EXACT_MAX};

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

pub type Point = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Source => "source",
            Self::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            _ => Err(Error::Parse {
                context: "domain".into(),
                message: format!("expected source or target, got {s:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl PointCloud {
    /// Fails on an empty point list or non-finite coordinates.
    pub fn new(points: Vec<Point>, label: Option<usize>, domain: Domain) -> Result<Self> {
        if points.is_empty() {
            return contract("point cloud must contain at least one point");
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return contract("point coordinates must be finite");
        }
        Ok(Self { points, label, domain })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        c.map(|x| x / self.points.len() as f64)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm64).fold(0.0, f64::max)
    }

    pub fn with_points(&self, points: Vec<Point>) -> Result<Self> {
        Self::new(points, self.label, self.domain)
    }

    /// Row-major `n × 3` copy.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    /// Exactly `n` points: truncates, or repeats the sequence cyclically.
    pub fn cyclic_resize(&self, n: usize) -> Vec<Point> {
        (0..n).map(|i| self.points[i % self.points.len()]).collect()
    }
}

pub(crate) fn norm64(p: &Point) -> f64 {
    p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Centres on the centroid and scales so the farthest point has norm 1.
///
/// A cloud whose points all coincide maps to the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return contract("cannot normalise an empty cloud");
    }
    let c = cloud.centroid();
    let centred: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
        .collect();
    let r = centred
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    // shrink by one f32 ulp so rounding never pushes a norm past 1
    let s = if r > 0.0 { (1.0 - f32::EPSILON as f64) / r } else { 0.0 };
    let points = centred
        .iter()
        .map(|p| [(p[0] * s) as f32, (p[1] * s) as f32, (p[2] * s) as f32])
        .collect();
    cloud.with_points(points)
}

/// Greedy max-min subset starting from `start`, in selection order.
///
/// Ties on the max-min distance go to the lowest point index.
pub fn farthest_point_sample(cloud: &PointCloud, n_out: usize, start: usize) -> Result<PointCloud> {
    let idx = farthest_point_indices(cloud.points(), n_out, start)?;
    cloud.with_points(idx.iter().map(|&i| cloud.points[i]).collect())
}

pub fn farthest_point_indices(points: &[Point], n_out: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n_out == 0 || n_out > n {
        return contract(format!("farthest point sampling needs 1 <= n_out <= {n}, got {n_out}"));
    }
    if start >= n {
        return contract(format!("start index {start} out of range for {n} points"));
    }
    let mut chosen = Vec::with_capacity(n_out);
    let mut taken = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..n_out {
        chosen.push(cur);
        taken[cur] = true;
        let mut next = None::<(usize, f64)>;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            best[i] = best[i].min(dist2(&points[i], &points[cur]));
            if next.is_none_or(|(_, d)| best[i] > d) {
                next = Some((i, best[i]));
            }
        }
        match next {
            Some((i, _)) => cur = i,
            None => break,
        }
    }
    Ok(chosen)
}
