//! Accuracy, confusion, class-wise MMD and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract, dim, Result};
use crate::models::{argmax, Model};
use crate::par;
use crate::pointcloud::{Dataset, PointCloud};
use crate::tensor::Tensor;

/// Global features and class probabilities, 64 clouds per forward pass.
pub fn features_and_probs(model: &Model, clouds: &[PointCloud]) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let mut feats = Vec::with_capacity(clouds.len());
    let mut probs = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(64) {
        let batch: Vec<&PointCloud> = chunk.iter().collect();
        let (f, p) = model.predict(&batch)?;
        feats.extend(rows(&f));
        probs.extend(rows(&p));
    }
    Ok((feats, probs))
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    /// Scores predictions against labels over `classes` classes.
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return contract("cannot evaluate an empty dataset");
        }
        if labels.len() != predictions.len() {
            return dim(format!("{} labels for {} predictions", labels.len(), predictions.len()));
        }
        if labels.iter().chain(predictions).any(|&l| l >= classes) {
            return contract(format!("labels and predictions must lie in 0..{classes}"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            overall_accuracy: trace as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
            predictions: predictions.to_vec(),
        })
    }
}

/// Deterministic top-1 evaluation on a labelled (or sealed-label) dataset.
///
/// # Panics
/// When the dataset's labels are sealed and an adaptation guard is active.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return contract("cannot evaluate an empty dataset");
    }
    let labels = data.evaluation_labels()?;
    let (_, probs) = features_and_probs(model, &data.clouds)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    EvalReport::from_predictions(&labels, &preds, data.classes)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over distinct pairs of `x ∪ y`; 1 when degenerate.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn mean_kernel(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> f64 {
    let total: f64 = par::map_slice(x, |a| y.iter().map(|b| (-gamma * sq_dist(a, b)).exp()).sum::<f64>())
        .into_iter()
        .sum();
    total / (x.len() * y.len()) as f64
}

/// Biased MMD with kernel `exp(-|a-b|² / (2σ²))`, clamped at zero before the square root.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return contract("mmd needs two nonempty sets");
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return contract(format!("bandwidth must be positive, got {sigma}"));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let v = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    Ok(v.max(0.0).sqrt())
}

/// `K×K` MMD between source class `r` (rows) and target class `c` (columns).
///
/// Each entry uses the median bandwidth of its own pooled pair; entries
/// with an empty class are `None`.
pub fn classwise_mmd(
    src: &[Vec<f64>],
    src_labels: &[usize],
    tgt: &[Vec<f64>],
    tgt_labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    if src.len() != src_labels.len() || tgt.len() != tgt_labels.len() {
        return dim("feature and label counts differ");
    }
    let split = |f: &[Vec<f64>], l: &[usize]| -> Vec<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); classes];
        for (x, &c) in f.iter().zip(l) {
            if c < classes {
                out[c].push(x.clone());
            }
        }
        out
    };
    let (s, t) = (split(src, src_labels), split(tgt, tgt_labels));
    let mut m = vec![vec![None; classes]; classes];
    for r in 0..classes {
        for c in 0..classes {
            if !s[r].is_empty() && !t[c].is_empty() {
                m[r][c] = Some(mmd(&s[r], &t[c], median_bandwidth(&s[r], &t[c]))?);
            }
        }
    }
    Ok(m)
}

/// Mean of the present diagonal entries.
pub fn mean_diagonal(m: &[Vec<Option<f64>>]) -> Option<f64> {
    let d: Vec<f64> = (0..m.len()).filter_map(|i| m[i][i]).collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// `scope,class,accuracy,count` rows: one `overall` line, then one per class.
pub fn write_accuracy_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let mut s = String::from("scope,class,accuracy,count\n");
    let total: usize = r.confusion.iter().flatten().sum();
    let _ = writeln!(s, "overall,-1,{},{total}", r.overall_accuracy);
    for (c, a) in r.per_class_accuracy.iter().enumerate() {
        let n: usize = r.confusion[c].iter().sum();
        let a = a.map_or("NA".to_string(), |a| a.to_string());
        let _ = writeln!(s, "class,{c},{a},{n}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// `true_label,pred_0,...,pred_{K-1}` count rows.
pub fn write_confusion_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let k = r.confusion.len();
    let mut s = String::from("true_label");
    for c in 0..k {
        let _ = write!(s, ",pred_{c}");
    }
    s.push('\n');
    for (t, row) in r.confusion.iter().enumerate() {
        let _ = write!(s, "{t}");
        for n in row {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// `source_class,target_class,mmd` rows; absent entries read `NA`.
pub fn write_mmd_csv(path: &Path, m: &[Vec<Option<f64>>]) -> Result<()> {
    let mut s = String::from("source_class,target_class,mmd\n");
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let v = v.map_or("NA".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{r},{c},{v}");
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes `id,domain,true_label,pred_label,f0..f{d-1}` rows in dataset order.
///
/// `true_label` is −1 where no label is available.
pub fn export_embeddings(model: &Model, sets: &[&Dataset], path: &Path) -> Result<()> {
    let mut s = String::new();
    let mut header_done = false;
    for data in sets {
        let labels: Vec<Option<usize>> = match data.evaluation_labels() {
            Ok(l) => l.into_iter().map(Some).collect(),
            Err(_) => vec![None; data.len()],
        };
        let (feats, probs) = features_and_probs(model, &data.clouds)?;
        if !header_done {
            s.push_str("id,domain,true_label,pred_label");
            for i in 0..feats.first().map_or(0, Vec::len) {
                let _ = write!(s, ",f{i}");
            }
            s.push('\n');
            header_done = true;
        }
        for (i, (f, p)) in feats.iter().zip(&probs).enumerate() {
            let t = labels[i].map_or(-1, |l| l as i64);
            let _ = write!(s, "{},{},{t},{}", data.ids[i], data.domain, argmax(p));
            for x in f {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    fs::write(path, s)?;
    Ok(())
}
