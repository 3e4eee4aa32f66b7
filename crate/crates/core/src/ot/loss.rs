use super::CouplingMatrix;
use crate::error::{contract, dim, Result};
use crate::tensor::{Real, Tape, Tensor, Var, EPS};

fn check_shapes(psi: &CouplingMatrix, zs: &[usize], ys: &[usize], zt: &[usize], gt: &[usize]) -> Result<()> {
    let ok = zs.len() == 2
        && zt.len() == 2
        && ys.len() == 2
        && gt.len() == 2
        && zs[1] == zt[1]
        && ys[1] == gt[1]
        && zs[0] == ys[0]
        && zt[0] == gt[0]
        && psi.rows() == zs[0]
        && psi.cols() == zt[0];
    if ok {
        Ok(())
    } else {
        dim(format!(
            "alignment loss shapes: plan {}x{}, z_s {zs:?}, y_s {ys:?}, z_t {zt:?}, g_t {gt:?}",
            psi.rows(),
            psi.cols()
        ))
    }
}

/// Alignment loss under a fixed plan:
/// `Σ_ij ψ_ij (α |z_s[i] - z_t[j]|² - β Σ_c y_s[i,c] log(g_t[j,c] + ε))`.
///
/// `psi` enters as a constant; gradients reach `z_s`, `z_t` and `g_t`.
#[allow(clippy::too_many_arguments)]
pub fn loss_ot<F: Real>(
    tape: &mut Tape<F>,
    psi: &CouplingMatrix,
    z_s: Var,
    y_s: Var,
    z_t: Var,
    g_t: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if alpha < 0.0 || beta < 0.0 {
        return contract(format!("alpha and beta must be nonnegative (got {alpha}, {beta})"));
    }
    check_shapes(psi, tape.shape(z_s), tape.shape(y_s), tape.shape(z_t), tape.shape(g_t))?;
    let (ks, kt) = (psi.rows(), psi.cols());
    let plan = tape.constant(&[ks, kt], psi.plan().iter().map(|&x| F::of(x)).collect())?;
    let rows = tape.constant(&[ks], psi.row_sums().into_iter().map(F::of).collect())?;
    let cols = tape.constant(&[kt], psi.col_sums().into_iter().map(F::of).collect())?;

    // |a - b|² expanded as |a|² + |b|² - 2 a·b
    let sq_s = tape.mul(z_s, z_s)?;
    let sq_s = tape.sum_axis(sq_s, 1)?;
    let sq_s = tape.mul(sq_s, rows)?;
    let sq_s = tape.sum(sq_s);
    let sq_t = tape.mul(z_t, z_t)?;
    let sq_t = tape.sum_axis(sq_t, 1)?;
    let sq_t = tape.mul(sq_t, cols)?;
    let sq_t = tape.sum(sq_t);
    let zt_t = tape.transpose(z_t)?;
    let cross = tape.matmul(z_s, zt_t)?;
    let cross = tape.mul(cross, plan)?;
    let cross = tape.sum(cross);
    let cross = tape.scale(cross, -2.0);
    let feat = tape.add(sq_s, sq_t)?;
    let feat = tape.add(feat, cross)?;
    let feat = tape.scale(feat, alpha);

    let log_g = tape.log(g_t);
    let log_g_t = tape.transpose(log_g)?;
    let ce = tape.matmul(y_s, log_g_t)?;
    let ce = tape.mul(ce, plan)?;
    let ce = tape.sum(ce);
    let ce = tape.scale(ce, -beta);
    tape.add(feat, ce)
}

/// Direct double-loop evaluation of the alignment loss, accumulated in `f64`.
pub fn loss_ot_value<F: Real>(
    psi: &CouplingMatrix,
    z_s: &Tensor<F>,
    y_s: &Tensor<F>,
    z_t: &Tensor<F>,
    g_t: &Tensor<F>,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return contract(format!("alpha and beta must be nonnegative (got {alpha}, {beta})"));
    }
    check_shapes(psi, z_s.shape(), y_s.shape(), z_t.shape(), g_t.shape())?;
    let mut total = 0.0;
    for i in 0..psi.rows() {
        for j in 0..psi.cols() {
            let d2: f64 = z_s
                .row(i)
                .iter()
                .zip(z_t.row(j))
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum();
            let ce: f64 = y_s
                .row(i)
                .iter()
                .zip(g_t.row(j))
                .map(|(y, g)| -y.f64() * (g.f64().max(0.0) + EPS).ln())
                .sum();
            total += psi.at(i, j) * (alpha * d2 + beta * ce);
        }
    }
    Ok(total)
}
