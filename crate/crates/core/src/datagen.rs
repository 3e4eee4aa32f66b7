//! Procedural two-domain shape benchmark.
//!
//! Five parametric surface classes (sphere, box, cylinder, cone, torus) are
//! sampled uniformly by area with per-sample shape jitter and a random yaw.
//! The target domain passes every clean sample through a shift pipeline:
//! Gaussian noise, removal of an angular sector about the vertical axis,
//! resampling to the target density, renormalisation.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{contract, Error, Result};
use crate::par;
use crate::pointcloud::{
    normalize_unit_sphere, read_manifest, read_xyz, write_manifest, write_xyz, Dataset, Domain, ManifestRow,
    PointCloud, SealedLabels,
};
use crate::rng;

pub const CLASS_NAMES: [&str; 5] = ["sphere", "box", "cylinder", "cone", "torus"];

/// Shape parameters of one raw sample, before yaw and normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub noise_sigma: f64,
    /// Fraction of the full turn removed as one angular sector about Z.
    pub crop_fraction: f64,
    /// Points per cloud.
    pub density: usize,
    /// Acceptance weight `exp(bias · z)` applied during surface sampling.
    pub sampling_bias: f64,
}

impl DomainSpec {
    pub fn clean(density: usize) -> Self {
        Self {
            noise_sigma: 0.0,
            crop_fraction: 0.0,
            density,
            sampling_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.crop_fraction) {
            return contract(format!("crop fraction must be in [0, 0.5], got {}", self.crop_fraction));
        }
        if self.density < 32 {
            return contract(format!("density must be at least 32, got {}", self.density));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() || !self.sampling_bias.is_finite() {
            return contract("noise sigma must be nonnegative and bias finite");
        }
        Ok(())
    }

    fn is_shifted(&self) -> bool {
        self.noise_sigma > 0.0 || self.crop_fraction > 0.0
    }
}

fn sample_params(class_id: usize, r: &mut rng::Rng) -> ShapeParams {
    match class_id {
        0 => ShapeParams::Sphere {
            radius: r.random_range(0.5..1.0),
        },
        1 => ShapeParams::Box {
            half: [r.random_range(0.3..1.0), r.random_range(0.3..1.0), r.random_range(0.3..1.0)],
        },
        2 => ShapeParams::Cylinder {
            radius: r.random_range(0.3..0.6),
            height: r.random_range(0.8..1.6),
        },
        3 => ShapeParams::Cone {
            radius: r.random_range(0.4..0.7),
            height: r.random_range(0.8..1.5),
        },
        _ => ShapeParams::Torus {
            major: r.random_range(0.6..0.8),
            minor: r.random_range(0.15..0.3),
        },
    }
}

fn surface_point(p: &ShapeParams, r: &mut rng::Rng) -> [f64; 3] {
    match *p {
        ShapeParams::Sphere { radius } => {
            let u: [f64; 3] = UnitSphere.sample(r);
            u.map(|x| x * radius)
        }
        ShapeParams::Box { half: [a, b, c] } => {
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            let mut t = r.random::<f64>() * total;
            let mut face = 5;
            for (i, &w) in areas.iter().enumerate() {
                if t < w {
                    face = i;
                    break;
                }
                t -= w;
            }
            let (s, q) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [sign * a, s * b, q * c],
                1 => [s * a, sign * b, q * c],
                _ => [s * a, q * b, sign * c],
            }
        }
        ShapeParams::Cylinder { radius, height } => {
            let side = TAU * radius * height;
            let cap = PI * radius * radius;
            let t = r.random::<f64>() * (side + 2.0 * cap);
            let phi = r.random_range(0.0..TAU);
            if t < side {
                [radius * phi.cos(), radius * phi.sin(), r.random_range(-0.5..0.5) * height]
            } else {
                let rho = radius * r.random::<f64>().sqrt();
                let z = if t < side + cap { 0.5 * height } else { -0.5 * height };
                [rho * phi.cos(), rho * phi.sin(), z]
            }
        }
        ShapeParams::Cone { radius, height } => {
            let slant = (radius * radius + height * height).sqrt();
            let side = PI * radius * slant;
            let base = PI * radius * radius;
            let phi = r.random_range(0.0..TAU);
            // apex at z = height / 2, base at -height / 2
            if r.random::<f64>() * (side + base) < side {
                let f = r.random::<f64>().sqrt();
                [f * radius * phi.cos(), f * radius * phi.sin(), 0.5 * height - f * height]
            } else {
                let rho = radius * r.random::<f64>().sqrt();
                [rho * phi.cos(), rho * phi.sin(), -0.5 * height]
            }
        }
        ShapeParams::Torus { major, minor } => loop {
            let (theta, phi) = (r.random_range(0.0..TAU), r.random_range(0.0..TAU));
            let w = major + minor * phi.cos();
            if r.random::<f64>() * (major + minor) <= w {
                break [w * theta.cos(), w * theta.sin(), minor * phi.sin()];
            }
        },
    }
}

/// Raw area-uniform sample of class `class_id`, centred at the origin and unrotated.
pub fn sample_shape_raw(class_id: usize, n: usize, bias: f64, seed: u64) -> Result<(Vec<[f64; 3]>, ShapeParams)> {
    if class_id >= CLASS_NAMES.len() {
        return contract(format!("unknown class {class_id}; classes are 0..{}", CLASS_NAMES.len()));
    }
    if n == 0 {
        return contract("shape needs at least one point");
    }
    let mut r = rng::stream(seed, &[rng::tag::DATA]);
    let params = sample_params(class_id, &mut r);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = surface_point(&params, &mut r);
        // accept with probability exp(bias * (z - 1)), at most 1 on the unit-scale shapes
        if bias == 0.0 || r.random::<f64>() < (bias * (p[2] - 1.0)).exp().min(1.0) {
            pts.push(p);
        }
    }
    Ok((pts, params))
}

fn yaw(points: &mut [[f64; 3]], angle: f64) {
    let (s, c) = angle.sin_cos();
    for p in points {
        *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    }
}

fn to_cloud(points: &[[f64; 3]], label: usize, domain: Domain) -> Result<PointCloud> {
    PointCloud::new(points.iter().map(|p| p.map(|x| x as f32)).collect(), Some(label), domain)
}

/// Clean sample of `class_id` with `n` points, randomly yawed and normalised.
pub fn generate_shape(class_id: usize, n: usize, seed: u64) -> Result<PointCloud> {
    generate_with_bias(class_id, n, 0.0, seed, Domain::Source)
}

fn generate_with_bias(class_id: usize, n: usize, bias: f64, seed: u64, domain: Domain) -> Result<PointCloud> {
    let (mut pts, _) = sample_shape_raw(class_id, n, bias, seed)?;
    let mut r = rng::stream(seed, &[rng::tag::DATA, 1]);
    yaw(&mut pts, r.random_range(0.0..TAU));
    normalize_unit_sphere(&to_cloud(&pts, class_id, domain)?)
}

/// Where the shift pipeline cut: the removed sector is
/// `[start, start + width)` (radians, about a vertical axis through `centre`),
/// with `centre` expressed in the final normalised coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRecord {
    pub start: f64,
    pub width: f64,
    pub centre: [f64; 2],
}

/// Noise, sector crop, density resampling and renormalisation.
pub fn apply_shift(cloud: &PointCloud, spec: &DomainSpec, seed: u64) -> Result<(PointCloud, CropRecord)> {
    spec.validate()?;
    let mut r = rng::stream(seed, &[rng::tag::SHIFT]);
    let mut pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| p.map(|x| x as f64)).collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
        for p in &mut pts {
            for c in p.iter_mut() {
                *c += normal.sample(&mut r);
            }
        }
    }
    let n = pts.len() as f64;
    let centre = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    let width = spec.crop_fraction * TAU;
    let start = r.random_range(0.0..TAU);
    if width > 0.0 {
        let kept: Vec<[f64; 3]> = pts
            .iter()
            .filter(|p| !in_sector(p[0] - centre[0], p[1] - centre[1], start, width))
            .copied()
            .collect();
        if !kept.is_empty() {
            pts = kept;
        }
    }
    let m = pts.len();
    let resampled: Vec<[f64; 3]> = if m >= spec.density {
        let mut idx = index::sample(&mut r, m, spec.density).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pts[i]).collect()
    } else {
        (0..spec.density)
            .map(|i| if i < m { pts[i] } else { pts[r.random_range(0..m)] })
            .collect()
    };
    let raw = to_cloud(&resampled, cloud.label.unwrap_or(0), cloud.domain)?;
    let c = raw.centroid();
    let radius = resampled
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let mut out = normalize_unit_sphere(&raw)?;
    out.label = cloud.label;
    let s = if radius > 0.0 { 1.0 / radius } else { 0.0 };
    let record = CropRecord {
        start,
        width,
        centre: [(centre[0] - c[0]) * s, (centre[1] - c[1]) * s],
    };
    Ok((out, record))
}

/// Whether direction `(x, y)` lies in the half-open sector `[start, start + width)`.
pub fn in_sector(x: f64, y: f64, start: f64, width: f64) -> bool {
    if width <= 0.0 {
        return false;
    }
    let a = (y.atan2(x) - start).rem_euclid(TAU);
    a < width
}

/// One labelled split per domain with `per_class` clouds of every class.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
}

fn make_split(
    spec: &DomainSpec,
    domain: Domain,
    classes: usize,
    per_class: usize,
    seed: u64,
    split_tag: u64,
) -> Result<(Vec<PointCloud>, Vec<String>, Vec<usize>)> {
    let dom_tag = match domain {
        Domain::Source => rng::tag::SOURCE,
        Domain::Target => rng::tag::TARGET,
    };
    let mut jobs: Vec<(usize, usize)> = (0..classes).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    if domain == Domain::Target {
        // unlabelled files carry neither a class name nor a class-sorted position
        jobs.shuffle(&mut rng::stream(seed, &[dom_tag, split_tag, rng::tag::SHUFFLE]));
    }
    let clouds = par::map_slice(&jobs, |&(c, i)| -> Result<PointCloud> {
        let s = rng::derive(seed, &[dom_tag, split_tag, c as u64, i as u64]);
        let clean = generate_with_bias(c, spec.density, spec.sampling_bias, s, domain)?;
        if spec.is_shifted() {
            Ok(apply_shift(&clean, spec, s)?.0)
        } else {
            Ok(clean)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ids = match domain {
        Domain::Source => jobs.iter().map(|(c, i)| format!("{}_{i:04}", CLASS_NAMES[*c])).collect(),
        Domain::Target => (0..jobs.len()).map(|n| format!("sample_{n:05}")).collect(),
    };
    let labels = jobs.iter().map(|(c, _)| *c).collect();
    Ok((clouds, ids, labels))
}

/// Class-balanced source (labelled) and target (labels sealed) datasets.
pub fn generate_domain_pair(
    spec_s: &DomainSpec,
    spec_t: &DomainSpec,
    classes: usize,
    per_class: usize,
    seed: u64,
    split_tag: u64,
) -> Result<DomainPair> {
    spec_s.validate()?;
    spec_t.validate()?;
    if classes == 0 || classes > CLASS_NAMES.len() {
        return contract(format!("class count must be in 1..={}, got {classes}", CLASS_NAMES.len()));
    }
    if per_class == 0 {
        return contract("per-class count must be positive");
    }
    let (sc, sid, _) = make_split(spec_s, Domain::Source, classes, per_class, seed, split_tag)?;
    let (tc, tid, tl) = make_split(spec_t, Domain::Target, classes, per_class, seed, split_tag)?;
    Ok(DomainPair {
        source: Dataset::labelled(Domain::Source, classes, sc, sid)?,
        target: Dataset::unlabelled(Domain::Target, classes, tc, tid, Some(SealedLabels::new(tl)))?,
    })
}

/// Train and test splits of both domains.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: DomainPair,
    pub test: DomainPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    Ok(Benchmark {
        train: generate_domain_pair(&spec.source, &spec.target, spec.classes, spec.train_per_class, spec.seed, 0)?,
        test: generate_domain_pair(&spec.source, &spec.target, spec.classes, spec.test_per_class, spec.seed, 1)?,
    })
}

pub const MANIFEST: &str = "manifest.csv";
/// Ground truth for target clouds; read only for evaluation.
pub const TARGET_LABELS: &str = "target_labels.csv";

/// Writes XYZ files, `manifest.csv` (target labels as −1) and `target_labels.csv`.
pub fn write_benchmark(dir: &Path, bench: &Benchmark) -> Result<()> {
    let mut rows = Vec::new();
    let mut truth = String::from("path,label\n");
    for (split, pair) in [("train", &bench.train), ("test", &bench.test)] {
        for ds in [&pair.source, &pair.target] {
            let sub = PathBuf::from(ds.domain.to_string()).join(split);
            fs::create_dir_all(dir.join(&sub))?;
            let sealed = ds.sealed().map(|s| s.reveal().to_vec());
            for (i, (cloud, id)) in ds.clouds.iter().zip(&ds.ids).enumerate() {
                let rel = sub.join(format!("{id}.xyz"));
                write_xyz(&dir.join(&rel), cloud)?;
                let rel = rel.to_string_lossy().replace('\\', "/");
                if let Some(s) = &sealed {
                    truth.push_str(&format!("{rel},{}\n", s[i]));
                }
                rows.push(ManifestRow {
                    path: rel,
                    label: cloud.label,
                    domain: ds.domain,
                    split: split.to_string(),
                });
            }
        }
    }
    write_manifest(&dir.join(MANIFEST), &rows)?;
    fs::write(dir.join(TARGET_LABELS), truth)?;
    Ok(())
}

fn read_truth(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        let label = rec[1].parse().map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: format!("label {:?}: {e}", &rec[1]),
        })?;
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

/// Loads a benchmark written by [`write_benchmark`].
///
/// `target_truth` controls whether `target_labels.csv` is opened at all.
pub fn load_benchmark(dir: &Path, classes: usize, target_truth: bool) -> Result<Benchmark> {
    let rows = read_manifest(&dir.join(MANIFEST))?;
    let truth = if target_truth {
        Some(read_truth(&dir.join(TARGET_LABELS))?)
    } else {
        None
    };
    let load = |domain: Domain, split: &str| -> Result<Dataset> {
        let sel: Vec<&ManifestRow> = rows.iter().filter(|r| r.domain == domain && r.split == split).collect();
        if sel.is_empty() {
            return contract(format!("manifest has no {domain} {split} rows"));
        }
        let clouds = par::map_slice(&sel, |r| read_xyz(&dir.join(&r.path), r.label, domain))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let ids = sel
            .iter()
            .map(|r| Path::new(&r.path).file_stem().map_or(r.path.clone(), |s| s.to_string_lossy().into_owned()))
            .collect();
        match domain {
            Domain::Source => Dataset::labelled(domain, classes, clouds, ids),
            Domain::Target => {
                let sealed = match &truth {
                    Some(t) => Some(SealedLabels::new(
                        sel.iter()
                            .map(|r| {
                                t.iter().find(|(p, _)| *p == r.path).map(|(_, l)| *l).ok_or_else(|| Error::Parse {
                                    context: TARGET_LABELS.into(),
                                    message: format!("no label for {}", r.path),
                                })
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )),
                    None => None,
                };
                Dataset::unlabelled(domain, classes, clouds, ids, sealed)
            }
        }
    };
    Ok(Benchmark {
        train: DomainPair {
            source: load(Domain::Source, "train")?,
            target: load(Domain::Target, "train")?,
        },
        test: DomainPair {
            source: load(Domain::Source, "test")?,
            target: load(Domain::Target, "test")?,
        },
    })
}
