//! Contrastive, classification and total objectives.
//!
//! Both contrastive losses share one form. For anchors `a_i` and positives
//! `p_i` the per-anchor term is
//! `−log( e(a_i, p_i) / (Σ_j e(a_i, a_j) + Σ_j e(a_i, p_j)) )` with
//! `e(x, y) = exp(cos(x, y) / τ)`, averaged over anchors. The sums include
//! `j = i` unless `exclude_self` is set, in which case the `e(a_i, a_i)`
//! term is dropped.

use crate::error::{contract, dim, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `exp(cos(a, b) / τ)`.
pub fn sim_exp<F: Real>(a: &[F], b: &[F], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return contract(format!("temperature must be positive, got {tau}"));
    }
    if a.len() != b.len() {
        return dim(format!("similarity of lengths {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    let na = a.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return contract("similarity of a zero vector");
    }
    Ok((dot / (na * nb) / tau).exp())
}

fn check_pair<F: Real>(tape: &Tape<F>, a: Var, b: Var, tau: f64) -> Result<usize> {
    if tau <= 0.0 {
        return contract(format!("temperature must be positive, got {tau}"));
    }
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return dim(format!("contrastive inputs {sa:?} and {sb:?}"));
    }
    Ok(sa[0])
}

fn identity<F: Real>(tape: &mut Tape<F>, k: usize, on: f64, off: f64) -> Result<Var> {
    let data = (0..k * k)
        .map(|i| F::of(if i / k == i % k { on } else { off }))
        .collect();
    tape.constant(&[k, k], data)
}

/// Shared association loss over rows of `anchor` and `positive`.
pub fn association_loss<F: Real>(
    tape: &mut Tape<F>,
    anchor: Var,
    positive: Var,
    tau: f64,
    exclude_self: bool,
) -> Result<Var> {
    let k = check_pair(tape, anchor, positive, tau)?;
    let a = tape.normalize(anchor);
    let p = tape.normalize(positive);
    let at = tape.transpose(a)?;
    let pt = tape.transpose(p)?;
    let s_aa = tape.matmul(a, at)?;
    let s_aa = tape.scale(s_aa, 1.0 / tau);
    let s_ap = tape.matmul(a, pt)?;
    let s_ap = tape.scale(s_ap, 1.0 / tau);
    let mut e_aa = tape.exp(s_aa);
    if exclude_self {
        let off = identity(tape, k, 0.0, 1.0)?;
        e_aa = tape.mul(e_aa, off)?;
    }
    let e_ap = tape.exp(s_ap);
    let den_a = tape.sum_axis(e_aa, 1)?;
    let den_p = tape.sum_axis(e_ap, 1)?;
    let den = tape.add(den_a, den_p)?;
    let log_den = tape.log(den);
    let eye = identity(tape, k, 1.0, 0.0)?;
    let pos = tape.mul(s_ap, eye)?;
    let log_num = tape.sum_axis(pos, 1)?;
    let per_anchor = tape.sub(log_den, log_num)?;
    Ok(tape.mean(per_anchor))
}

/// Association between the two geometric views, anchored on the first.
pub fn loss_3d<F: Real>(tape: &mut Tape<F>, z_t1: Var, z_t2: Var, tau: f64, exclude_self: bool) -> Result<Var> {
    association_loss(tape, z_t1, z_t2, tau, exclude_self)
}

/// Association between the renormalised mean of the two point views and the image embedding.
pub fn loss_mm<F: Real>(
    tape: &mut Tape<F>,
    z_t1: Var,
    z_t2: Var,
    z_img: Var,
    tau: f64,
    exclude_self: bool,
) -> Result<Var> {
    check_pair(tape, z_t1, z_t2, tau)?;
    let s = tape.add(z_t1, z_t2)?;
    let s = tape.scale(s, 0.5);
    let avg = tape.normalize(s);
    association_loss(tape, avg, z_img, tau, exclude_self)
}

/// Mean soft-label cross-entropy `−Σ_c y_c log(p_c + ε)`.
pub fn loss_cls<F: Real>(tape: &mut Tape<F>, probs: Var, soft_labels: Var) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 2 || s != tape.shape(soft_labels) {
        return dim(format!("classification inputs {s:?} and {:?}", tape.shape(soft_labels)));
    }
    let lp = tape.log(probs);
    let t = tape.mul(soft_labels, lp)?;
    let t = tape.sum(t);
    Ok(tape.scale(t, -1.0 / s[0] as f64))
}

/// Unweighted sum; a non-finite component is reported as divergence.
pub fn loss_total<F: Real>(tape: &mut Tape<F>, parts: [Var; 4]) -> Result<Var> {
    const NAMES: [&str; 4] = ["loss_3d", "loss_mm", "loss_ot", "loss_cls"];
    for (v, name) in parts.iter().zip(NAMES) {
        if tape.value(*v).len() != 1 {
            return dim(format!("{name} must be a scalar"));
        }
        if !tape.scalar(*v).is_finite() {
            return Err(Error::Divergence {
                step: 0,
                what: format!("{name} is {:?}", tape.scalar(*v)),
                last_good: None,
            });
        }
    }
    let a = tape.add(parts[0], parts[1])?;
    let b = tape.add(parts[2], parts[3])?;
    tape.add(a, b)
}

/// Projected embeddings of one batch for the contrastive objectives.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<F: Real = f32> {
    pub z_t1: Tensor<F>,
    pub z_t2: Tensor<F>,
    pub z_img: Tensor<F>,
    pub tau: f64,
}

impl<F: Real> ContrastiveBatch<F> {
    /// Rows must be unit length within 1e-5.
    pub fn new(z_t1: Tensor<F>, z_t2: Tensor<F>, z_img: Tensor<F>, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return contract(format!("temperature must be positive, got {tau}"));
        }
        if z_t1.rank() != 2 || z_t1.shape() != z_t2.shape() || z_t1.shape() != z_img.shape() {
            return dim(format!(
                "batch shapes {:?}, {:?}, {:?}",
                z_t1.shape(),
                z_t2.shape(),
                z_img.shape()
            ));
        }
        for t in [&z_t1, &z_t2, &z_img] {
            for i in 0..t.rows() {
                let n = t.row(i).iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return contract(format!("row {i} has norm {n}, expected 1"));
                }
            }
        }
        Ok(Self { z_t1, z_t2, z_img, tau })
    }

    pub fn len(&self) -> usize {
        self.z_t1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss_3d(&self, exclude_self: bool) -> Result<f64> {
        let mut t = Tape::new();
        let (a, b) = (t.leaf(&self.z_t1), t.leaf(&self.z_t2));
        let l = loss_3d(&mut t, a, b, self.tau, exclude_self)?;
        Ok(t.scalar(l).f64())
    }

    pub fn loss_mm(&self, exclude_self: bool) -> Result<f64> {
        let mut t = Tape::new();
        let (a, b, c) = (t.leaf(&self.z_t1), t.leaf(&self.z_t2), t.leaf(&self.z_img));
        let l = loss_mm(&mut t, a, b, c, self.tau, exclude_self)?;
        Ok(t.scalar(l).f64())
    }
}
