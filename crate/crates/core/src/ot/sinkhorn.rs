use super::{check_marginals, CostMatrix, CouplingMatrix, OtConfig};
use crate::error::{contract, Result};

/// Result of an entropic solve.
#[derive(Clone, Debug)]
pub struct SinkhornOutcome {
    pub coupling: CouplingMatrix,
    pub iterations: usize,
    /// False when `max_iters` was hit before the marginal error fell below `tol`.
    pub converged: bool,
    /// Marginal L1 error of the scaled plan before the final feasibility rounding.
    pub raw_marginal_error: f64,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic transport `ψ = diag(u) exp(-C/ε) diag(v)`, iterated in the log domain.
///
/// Alternating scaling stops once the row-marginal L1 error is below
/// `cfg.sinkhorn_tol` (columns are exact after each column update) or after
/// `cfg.sinkhorn_max_iters`. The returned plan is then rounded onto the
/// feasible set so both marginals hold to machine precision.
pub fn solve_sinkhorn(cost: &CostMatrix, a: &[f64], b: &[f64], cfg: &OtConfig) -> Result<SinkhornOutcome> {
    check_marginals(cost, a, b)?;
    if cfg.sinkhorn_epsilon <= 0.0 || !cfg.sinkhorn_epsilon.is_finite() {
        return contract(format!("sinkhorn epsilon must be positive, got {}", cfg.sinkhorn_epsilon));
    }
    let eps = cfg.sinkhorn_epsilon;
    let (m, n) = (cost.rows(), cost.cols());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    let plan_entry = |f: &[f64], g: &[f64], i: usize, j: usize| {
        if f[i] == f64::NEG_INFINITY || g[j] == f64::NEG_INFINITY {
            0.0
        } else {
            ((f[i] + g[j] - cost.at(i, j)) / eps).exp()
        }
    };
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < cfg.sinkhorn_max_iters {
        iterations += 1;
        for i in 0..m {
            f[i] = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_a[i] - eps * logsumexp((0..n).map(|j| (g[j] - cost.at(i, j)) / eps))
            };
        }
        for j in 0..n {
            g[j] = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_b[j] - eps * logsumexp((0..m).map(|i| (f[i] - cost.at(i, j)) / eps))
            };
        }
        err = (0..m)
            .map(|i| ((0..n).map(|j| plan_entry(&f, &g, i, j)).sum::<f64>() - a[i]).abs())
            .sum();
        if err < cfg.sinkhorn_tol {
            break;
        }
    }
    let mut plan = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            plan.push(plan_entry(&f, &g, i, j));
        }
    }
    round_to_feasible(&mut plan, m, n, a, b);
    Ok(SinkhornOutcome {
        coupling: CouplingMatrix::new(m, n, plan, a.to_vec(), b.to_vec())?,
        iterations,
        converged: err < cfg.sinkhorn_tol,
        raw_marginal_error: err,
    })
}

/// Projects a nearly feasible plan onto `U(a, b)`: shrink rows, shrink columns,
/// then restore the missing mass with a rank-one correction.
fn round_to_feasible(plan: &mut [f64], m: usize, n: usize, a: &[f64], b: &[f64]) {
    for i in 0..m {
        let r: f64 = plan[i * n..(i + 1) * n].iter().sum();
        if r > a[i] {
            let s = a[i] / r;
            plan[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
        }
    }
    for j in 0..n {
        let c: f64 = (0..m).map(|i| plan[i * n + j]).sum();
        if c > b[j] {
            let s = b[j] / c;
            (0..m).for_each(|i| plan[i * n + j] *= s);
        }
    }
    let err_r: Vec<f64> = (0..m)
        .map(|i| (a[i] - plan[i * n..(i + 1) * n].iter().sum::<f64>()).max(0.0))
        .collect();
    let err_c: Vec<f64> = (0..n)
        .map(|j| (b[j] - (0..m).map(|i| plan[i * n + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] += err_r[i] * err_c[j] / total;
            }
        }
    }
}
