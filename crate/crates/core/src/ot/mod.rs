//! Discrete optimal transport.
//!
//! Provides the joint feature/label ground cost used for domain alignment,
//! an exact transportation solver, a log-domain Sinkhorn solver, the
//! alignment loss built on a fixed coupling, and the p-Wasserstein
//! distance between point sets.

mod exact;
mod loss;
mod sinkhorn;
mod wasserstein;

pub use exact::solve_exact;
pub use loss::{loss_ot, loss_ot_value};
pub use sinkhorn::{solve_sinkhorn, SinkhornOutcome};
pub use wasserstein::wasserstein_p;

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, dim, Error, Result};
use crate::tensor::{Real, Tensor};

/// Marginal tolerance accepted on solver inputs.
const MASS_TOL: f64 = 1e-6;

/// Dense nonnegative `rows × cols` cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl CostMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return dim(format!("{rows}x{cols} cost with {} entries", data.len()));
        }
        if data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return contract("cost entries must be finite and nonnegative");
        }
        Ok(Self {
            rows,
            cols,
            data,
            alpha: 1.0,
            beta: 0.0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Entrywise power, for `<C^p, ψ>`.
    pub fn powf(&self, p: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c = c.powf(p));
        out
    }
}

/// Transport plan together with the marginals it was solved for.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    rows: usize,
    cols: usize,
    plan: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl CouplingMatrix {
    pub fn new(rows: usize, cols: usize, plan: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if plan.len() != rows * cols || a.len() != rows || b.len() != cols {
            return dim(format!(
                "{rows}x{cols} plan with {} entries and marginals {}/{}",
                plan.len(),
                a.len(),
                b.len()
            ));
        }
        if plan.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return contract("coupling entries must be nonnegative");
        }
        Ok(Self {
            rows,
            cols,
            plan,
            a,
            b,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn plan(&self) -> &[f64] {
        &self.plan
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j)).sum())
            .collect()
    }

    /// L1 distance of the row and column sums from the prescribed marginals.
    pub fn marginal_error(&self) -> f64 {
        let r: f64 = self
            .row_sums()
            .iter()
            .zip(&self.a)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let c: f64 = self
            .col_sums()
            .iter()
            .zip(&self.b)
            .map(|(x, y)| (x - y).abs())
            .sum();
        r + c
    }

    /// Frobenius product `<C, ψ>`.
    pub fn objective(&self, cost: &CostMatrix) -> f64 {
        self.plan.iter().zip(&cost.data).map(|(p, c)| p * c).sum()
    }

    /// Plan as an `f32`/`f64` tensor for use as a tape constant.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            &[self.rows, self.cols],
            self.plan.iter().map(|&x| F::of(x)).collect(),
        )
        .expect("plan shape")
    }

    /// Reorders source rows: new row `i` is old row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut plan = Vec::with_capacity(self.plan.len());
        for &p in perm {
            plan.extend_from_slice(&self.plan[p * self.cols..(p + 1) * self.cols]);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            plan,
            a: perm.iter().map(|&p| self.a[p]).collect(),
            b: self.b.clone(),
        }
    }
}

pub fn uniform_marginal(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

pub(crate) fn check_marginals(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != cost.rows() || b.len() != cost.cols() {
        return dim(format!(
            "marginals {}/{} for a {}x{} cost",
            a.len(),
            b.len(),
            cost.rows(),
            cost.cols()
        ));
    }
    if a.iter().chain(b).any(|x| *x < 0.0 || !x.is_finite()) {
        return contract("marginals must be nonnegative");
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - 1.0).abs() > MASS_TOL || (sb - 1.0).abs() > MASS_TOL {
        return contract(format!("marginals must each sum to 1 (got {sa}, {sb})"));
    }
    Ok(())
}

/// Which coupling solver to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Exact,
    Sinkhorn,
    /// Exact up to [`OtConfig::auto_exact_max`] rows, Sinkhorn above.
    Auto,
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "sinkhorn" => Ok(Self::Sinkhorn),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::Config(format!(
                "solver must be exact, sinkhorn or auto, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Sinkhorn => "sinkhorn",
            Self::Auto => "auto",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtConfig {
    pub solver: Solver,
    /// Wasserstein order.
    pub p: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub auto_exact_max: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Auto,
            p: 2.0,
            sinkhorn_epsilon: 0.05,
            sinkhorn_max_iters: 10_000,
            sinkhorn_tol: 1e-9,
            auto_exact_max: 32,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1.0 {
            return contract(format!("Wasserstein order must be >= 1, got {}", self.p));
        }
        if self.sinkhorn_epsilon <= 0.0 {
            return contract("sinkhorn epsilon must be positive");
        }
        Ok(())
    }
}

/// Solves with the solver selected by `cfg`.
pub fn solve(cost: &CostMatrix, a: &[f64], b: &[f64], cfg: &OtConfig) -> Result<CouplingMatrix> {
    let exact = match cfg.solver {
        Solver::Exact => true,
        Solver::Sinkhorn => false,
        Solver::Auto => cost.rows().max(cost.cols()) <= cfg.auto_exact_max,
    };
    if exact {
        solve_exact(cost, a, b)
    } else {
        let out = solve_sinkhorn(cost, a, b, cfg)?;
        if !out.converged {
            log::warn!(
                "sinkhorn stopped after {} iterations without reaching tol {}",
                out.iterations,
                cfg.sinkhorn_tol
            );
        }
        Ok(out.coupling)
    }
}

/// Joint ground cost between a source and a target batch.
///
/// Entry `(i, j)` is `alpha * |z_s[i] - z_t[j]|^2 + beta * |y_s[i] - g_t[j]|^2`
/// with `y_s` one-hot labels and `g_t` classifier probabilities.
pub fn cost_matrix<F: Real>(
    z_s: &Tensor<F>,
    y_s: &Tensor<F>,
    z_t: &Tensor<F>,
    g_t: &Tensor<F>,
    alpha: f64,
    beta: f64,
) -> Result<CostMatrix> {
    if alpha < 0.0 || beta < 0.0 {
        return contract(format!("alpha and beta must be nonnegative (got {alpha}, {beta})"));
    }
    if z_s.rank() != 2 || z_t.rank() != 2 || z_s.cols() != z_t.cols() {
        return dim(format!("feature shapes {:?} vs {:?}", z_s.shape(), z_t.shape()));
    }
    if y_s.shape() != [z_s.rows(), g_t.cols()] || g_t.rows() != z_t.rows() {
        return dim(format!(
            "label shapes {:?} / {:?} for {} source and {} target rows",
            y_s.shape(),
            g_t.shape(),
            z_s.rows(),
            z_t.rows()
        ));
    }
    let (ks, kt) = (z_s.rows(), z_t.rows());
    let sq = |a: &[F], b: &[F]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum()
    };
    let mut data = Vec::with_capacity(ks * kt);
    for i in 0..ks {
        for j in 0..kt {
            data.push(alpha * sq(z_s.row(i), z_t.row(j)) + beta * sq(y_s.row(i), g_t.row(j)));
        }
    }
    let mut c = CostMatrix::from_vec(ks, kt, data)?;
    c.alpha = alpha;
    c.beta = beta;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matched_rows_give_zero_diagonal() {
        let z = t(&[vec![0.1, 0.2], vec![-0.3, 0.5]]);
        let y = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = cost_matrix(&z, &y, &z, &y, 0.3, 0.7).unwrap();
        assert_eq!(c.at(0, 0), 0.0);
        assert_eq!(c.at(1, 1), 0.0);
        assert!(c.at(0, 1) > 0.0);
    }

    #[test]
    fn pure_feature_term() {
        let zs = t(&[vec![0.0, 0.0]]);
        let zt = t(&[vec![1.0, 0.0]]);
        let y = t(&[vec![1.0, 0.0]]);
        let c = cost_matrix(&zs, &y, &zt, &y, 1.0, 0.0).unwrap();
        assert_eq!(c.at(0, 0), 1.0);
    }

    #[test]
    fn pure_label_term_against_uniform_prediction() {
        let z = t(&[vec![0.0]]);
        let y = t(&[vec![1.0, 0.0]]);
        let g = t(&[vec![0.5, 0.5]]);
        let c = cost_matrix(&z, &y, &z, &g, 0.0, 1.0).unwrap();
        assert!((c.at(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_rejected() {
        let z = t(&[vec![0.0]]);
        let y = t(&[vec![1.0]]);
        assert!(matches!(cost_matrix(&z, &y, &z, &y, -1.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn solver_names_round_trip() {
        for s in [Solver::Exact, Solver::Sinkhorn, Solver::Auto] {
            assert_eq!(s.to_string().parse::<Solver>().unwrap(), s);
        }
        assert!("hungarian".parse::<Solver>().is_err());
    }
}
