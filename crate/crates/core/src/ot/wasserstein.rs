use super::{solve, uniform_marginal, CostMatrix, OtConfig};
use crate::error::{contract, dim, Result};

/// `W_p` between two point sets in `R^d` with the given (or uniform) masses.
///
/// The ground metric is Euclidean distance; the coupling minimises
/// `<C^p, ψ>` and the distance is that minimum raised to `1/p`.
pub fn wasserstein_p(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    p: f64,
    masses: Option<(&[f64], &[f64])>,
    cfg: &OtConfig,
) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return contract("wasserstein_p needs nonempty point sets");
    }
    if p < 1.0 {
        return contract(format!("Wasserstein order must be >= 1, got {p}"));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return dim("points must share one dimension");
    }
    let mut data = Vec::with_capacity(x.len() * y.len());
    for xi in x {
        for yj in y {
            let dist = xi
                .iter()
                .zip(yj)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            data.push(dist.powf(p));
        }
    }
    let cost_p = CostMatrix::from_vec(x.len(), y.len(), data)?;
    let (ua, ub) = (uniform_marginal(x.len()), uniform_marginal(y.len()));
    let (a, b) = masses.unwrap_or((&ua, &ub));
    let plan = solve(&cost_p, a, b, cfg)?;
    Ok(plan.objective(&cost_p).max(0.0).powf(1.0 / p))
}
