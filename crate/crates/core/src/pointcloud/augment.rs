//! The random transformation family used to build contrastive views.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{Point, PointCloud};
use crate::error::{contract, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    /// Isotropic scale drawn uniformly from `[lo, hi]`.
    pub scale_range: (f64, f64),
    /// Rotation about Z drawn uniformly from `[0, max]`.
    pub rotate_z_max: f64,
    /// Extra rotation about a uniformly random axis, angle in `[0, max]`.
    pub tilt_max: f64,
    /// Per-axis translation in `[-t, t]`.
    pub translation: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Dropped fraction drawn uniformly from `[0, max)`.
    pub dropout_max_ratio: f64,
    /// Probability that each component is active in a given draw.
    pub component_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            scale_range: (0.8, 1.2),
            rotate_z_max: std::f64::consts::TAU,
            tilt_max: 15f64.to_radians(),
            translation: 0.1,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            dropout_max_ratio: 0.2,
            component_prob: 1.0,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotate_z_max: 0.0,
            tilt_max: 0.0,
            translation: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            dropout_max_ratio: 0.0,
            component_prob: 1.0,
        }
    }

    /// Jitter plus rotation about Z only, for the supervised branch.
    pub fn classifier() -> Self {
        Self {
            rotate_z_max: std::f64::consts::TAU,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return contract(format!("scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(0.0..1.0).contains(&self.dropout_max_ratio) {
            return contract(format!("dropout ratio must be in [0, 1), got {}", self.dropout_max_ratio));
        }
        if self.jitter_sigma < 0.0 || self.jitter_clip < 0.0 || self.translation < 0.0 {
            return contract("jitter and translation magnitudes must be nonnegative");
        }
        if self.rotate_z_max < 0.0 || self.tilt_max < 0.0 {
            return contract("rotation limits must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.component_prob) {
            return contract("component probability must be in [0, 1]");
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_axis(axis: [f64; 3], theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn map_points(points: &mut [Point], f: impl Fn([f64; 3]) -> [f64; 3]) {
    for p in points {
        let q = f([p[0] as f64, p[1] as f64, p[2] as f64]);
        *p = [q[0] as f32, q[1] as f32, q[2] as f32];
    }
}

/// Applies scale, rotation, translation, clamped jitter and dropout in that order.
///
/// Every random quantity is drawn whether or not its component ends up
/// active, so the stream layout is independent of the spec. Inactive or
/// zero-width components leave coordinates untouched bit for bit.
pub fn augment(cloud: &PointCloud, spec: &AugmentationSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut r = rng::stream(seed, &[]);
    let on = |r: &mut rng::Rng| r.random::<f64>() < spec.component_prob;
    let mut pts = cloud.points().to_vec();

    let (lo, hi) = spec.scale_range;
    let use_scale = on(&mut r);
    let s = lo + (hi - lo) * r.random::<f64>();
    if use_scale && s != 1.0 {
        map_points(&mut pts, |p| p.map(|c| c * s));
    }

    let use_rot = on(&mut r);
    let theta = spec.rotate_z_max * r.random::<f64>();
    let axis: [f64; 3] = UnitSphere.sample(&mut r);
    let tilt = spec.tilt_max * r.random::<f64>();
    if use_rot && (theta != 0.0 || tilt != 0.0) {
        let m = matmul3(&rot_axis(axis, tilt), &rot_z(theta));
        map_points(&mut pts, |p| {
            [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
        });
    }

    let use_shift = on(&mut r);
    let shift: [f64; 3] = [0; 3].map(|_| spec.translation * (2.0 * r.random::<f64>() - 1.0));
    if use_shift && spec.translation > 0.0 {
        map_points(&mut pts, |p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
    }

    let use_jitter = on(&mut r);
    let mut jr = rng::stream(seed, &[1]);
    if use_jitter && spec.jitter_sigma > 0.0 && spec.jitter_clip > 0.0 {
        let normal = Normal::new(0.0, spec.jitter_sigma).expect("sigma is positive");
        let clip = spec.jitter_clip;
        for p in &mut pts {
            for c in p.iter_mut() {
                let e: f64 = normal.sample(&mut jr);
                *c = (*c as f64 + e.clamp(-clip, clip)) as f32;
            }
        }
    }

    let use_drop = on(&mut r);
    let ratio = spec.dropout_max_ratio * r.random::<f64>();
    let n = pts.len();
    let drop = ((ratio * n as f64).floor() as usize).min(n - 1);
    if use_drop && drop > 0 {
        let mut dropped = vec![false; n];
        for i in index::sample(&mut r, n, drop) {
            dropped[i] = true;
        }
        pts = pts.into_iter().zip(dropped).filter(|(_, d)| !d).map(|(p, _)| p).collect();
    }
    cloud.with_points(pts)
}

#[cfg(test)]
mod tests {
    use super::super::Domain;
    use super::*;

    fn sample_cloud(n: usize) -> PointCloud {
        let mut r = rng::stream(3, &[]);
        let pts = (0..n)
            .map(|_| [0; 3].map(|_| r.random_range(-1.0f32..1.0)))
            .collect();
        PointCloud::new(pts, Some(1), Domain::Source).unwrap()
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let mut c = sample_cloud(50);
        c = c.with_points(c.points().iter().map(|p| [-0.0, p[1], p[2]]).collect()).unwrap();
        let out = augment(&c, &AugmentationSpec::identity(), 9).unwrap();
        let bits = |c: &PointCloud| c.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&c));
    }

    #[test]
    fn rotation_is_an_isometry() {
        let c = sample_cloud(30);
        let spec = AugmentationSpec {
            rotate_z_max: 6.0,
            tilt_max: 1.0,
            ..AugmentationSpec::identity()
        };
        let out = augment(&c, &spec, 4).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let a = super::super::dist2(&c.points()[i], &c.points()[j]).sqrt();
                let b = super::super::dist2(&out.points()[i], &out.points()[j]).sqrt();
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let c = sample_cloud(3);
        let bad = AugmentationSpec {
            scale_range: (0.0, 1.0),
            ..AugmentationSpec::identity()
        };
        assert!(augment(&c, &bad, 0).is_err());
        let bad = AugmentationSpec {
            dropout_max_ratio: 1.0,
            ..AugmentationSpec::identity()
        };
        assert!(augment(&c, &bad, 0).is_err());
    }
}
