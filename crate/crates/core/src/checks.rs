//! Finite-difference verification of the training objectives.
//!
//! Runs in `f64` on small random batches (`k = 4` rows, `d = 8` features)
//! and reports the worst relative error per objective.

use rand::Rng as _;

use crate::error::Result;
use crate::losses::{loss_3d, loss_cls, loss_mm, loss_total};
use crate::ot::{cost_matrix, loss_ot, solve_exact, uniform_marginal, CouplingMatrix};
use crate::rng;
use crate::tensor::{check_gradients, Tape, Tensor, Var};

pub const ROWS: usize = 4;
pub const DIM: usize = 8;
pub const CLASSES: usize = 5;
const H: f64 = 1e-5;
const TAU: f64 = 0.1;
/// Cost weights large enough that the alignment term is well above round-off.
const ALPHA: f64 = 0.5;
const BETA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn random(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

struct Batch {
    others: Vec<Tensor<f64>>,
    proj: Vec<Tensor<f64>>,
    labels: Tensor<f64>,
    soft: Tensor<f64>,
}

impl Batch {
    fn new(r: &mut rng::Rng) -> Self {
        let others = (0..4).map(|_| random(r, ROWS, DIM)).collect();
        let proj = (0..8).map(|_| random(r, DIM, DIM)).collect();
        let mut labels = vec![0.0; ROWS * CLASSES];
        let mut soft = vec![0.0; ROWS * CLASSES];
        for i in 0..ROWS {
            labels[i * CLASSES + r.random_range(0..CLASSES)] = 1.0;
            let (a, b, lam) = (r.random_range(0..CLASSES), r.random_range(0..CLASSES), r.random::<f64>());
            soft[i * CLASSES + a] += 1.0 - lam;
            soft[i * CLASSES + b] += lam;
        }
        Self {
            others,
            proj,
            labels: Tensor::new(&[ROWS, CLASSES], labels).unwrap(),
            soft: Tensor::new(&[ROWS, CLASSES], soft).unwrap(),
        }
    }

    fn classifier(&self, t: &mut Tape<f64>, z: Var) -> Result<Var> {
        let w = t.constant(&[DIM, CLASSES], self.proj[7].data()[..DIM * CLASSES].to_vec())?;
        let logits = t.matmul(z, w)?;
        Ok(t.softmax(logits))
    }

    /// All four objectives as functions of one raw feature matrix `x`.
    fn parts(&self, t: &mut Tape<f64>, x: Var, psi: &CouplingMatrix, relu: bool) -> Result<[Var; 4]> {
        let mut heads = Vec::new();
        for w in &self.proj[..5] {
            let w = t.leaf(w);
            let mut h = t.matmul(x, w)?;
            if relu {
                h = t.relu(h);
            }
            heads.push(h);
        }
        let (z1, z2, zi) = (t.normalize(heads[0]), t.normalize(heads[1]), t.normalize(heads[2]));
        let l3d = loss_3d(t, z1, z2, TAU, false)?;
        let lmm = loss_mm(t, z1, z2, zi, TAU, false)?;
        let (zs, zt) = (heads[3], heads[4]);
        let gt = self.classifier(t, zt)?;
        let ys = t.leaf(&self.labels);
        let lot = loss_ot(t, psi, zs, ys, zt, gt, ALPHA, BETA)?;
        let ps = self.classifier(t, zs)?;
        let soft = t.leaf(&self.soft);
        let lcls = loss_cls(t, ps, soft)?;
        Ok([l3d, lmm, lot, lcls])
    }

    /// Coupling from the detached values at `x`.
    fn coupling(&self, x: &Tensor<f64>, relu: bool) -> Result<CouplingMatrix> {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let mut heads = Vec::new();
        for w in &self.proj[3..5] {
            let w = t.leaf(w);
            let mut h = t.matmul(v, w)?;
            if relu {
                h = t.relu(h);
            }
            heads.push(h);
        }
        let gt = self.classifier(&mut t, heads[1])?;
        let cost = cost_matrix(&t.tensor(heads[0]), &self.labels, &t.tensor(heads[1]), &t.tensor(gt), ALPHA, BETA)?;
        solve_exact(&cost, &uniform_marginal(ROWS), &uniform_marginal(ROWS))
    }
}

/// Worst relative errors over `trials` random batches for each objective.
pub fn loss_gradient_checks(seed: u64, trials: usize) -> Result<Vec<GradCheck>> {
    let names = ["loss_3d", "loss_mm", "loss_ot", "loss_cls", "loss_total", "loss_total_relu"];
    let mut worst = [0.0f64; 6];
    for trial in 0..trials {
        let mut r = rng::stream(seed, &[rng::tag::TEST, trial as u64]);
        let batch = Batch::new(&mut r);
        let x = random(&mut r, ROWS, DIM);
        let (z2, zi) = (&batch.others[0], &batch.others[1]);

        worst[0] = worst[0].max(check_gradients(
            |t, v| {
                let a = t.normalize(v);
                let b = t.leaf(z2);
                let b = t.normalize(b);
                let l = loss_3d(t, a, b, TAU, false)?;
                let m = loss_3d(t, b, a, TAU, false)?;
                t.add(l, m)
            },
            &x,
            H,
        )?);
        worst[1] = worst[1].max(check_gradients(
            |t, v| {
                let a = t.normalize(v);
                let (b, c) = (t.leaf(z2), t.leaf(zi));
                let (b, c) = (t.normalize(b), t.normalize(c));
                let l1 = loss_mm(t, a, b, c, TAU, false)?;
                let l2 = loss_mm(t, b, c, a, TAU, false)?;
                t.add(l1, l2)
            },
            &x,
            H,
        )?);
        let psi = batch.coupling(&x, false)?;
        worst[2] = worst[2].max(check_gradients(
            |t, v| {
                let parts = batch.parts(t, v, &psi, false)?;
                Ok(parts[2])
            },
            &x,
            H,
        )?);
        worst[3] = worst[3].max(check_gradients(
            |t, v| {
                let p = batch.classifier(t, v)?;
                let y = t.leaf(&batch.soft);
                loss_cls(t, p, y)
            },
            &x,
            H,
        )?);
        worst[4] = worst[4].max(check_gradients(
            |t, v| {
                let parts = batch.parts(t, v, &psi, false)?;
                loss_total(t, parts)
            },
            &x,
            H,
        )?);
        let psi = batch.coupling(&x, true)?;
        worst[5] = worst[5].max(check_gradients(
            |t, v| {
                let parts = batch.parts(t, v, &psi, true)?;
                loss_total(t, parts)
            },
            &x,
            H,
        )?);
    }
    Ok(names
        .iter()
        .zip(worst)
        .enumerate()
        .map(|(i, (n, e))| GradCheck {
            name: n.to_string(),
            max_error: e,
            tolerance: if i == 5 { 1e-3 } else { 1e-4 },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_objectives_pass() {
        for c in loss_gradient_checks(1, 5).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
