//! Exact transport.
//!
//! Uniform square marginals reduce to an assignment problem, solved by
//! shortest augmenting paths. General marginals go through the
//! transportation simplex: the basis is a spanning tree over row and column
//! nodes with `m + n - 1` cells, entering cells follow Dantzig's rule, and a
//! run of degenerate pivots switches to Bland's rule until the objective moves.

use super::{check_marginals, CostMatrix, CouplingMatrix};
use crate::error::{contract, Result};

const DEGENERATE_RUN: usize = 32;

struct Basis {
    m: usize,
    n: usize,
    /// (row, col, flow)
    cells: Vec<(usize, usize, f64)>,
}

impl Basis {
    fn northwest(a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra[i].min(rb[j]);
            cells.push((i, j, x));
            ra[i] -= x;
            rb[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), m + n - 1);
        Self { m, n, cells }
    }

    /// Adjacency lists over nodes `0..m` (rows) and `m..m+n` (columns), by cell index.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j, _)) in self.cells.iter().enumerate() {
            adj[i].push(k);
            adj[self.m + j].push(k);
        }
        adj
    }

    fn potentials(&self, cost: &CostMatrix, adj: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &k in &adj[node] {
                let (i, j, _) = self.cells[k];
                let c = cost.at(i, j);
                if node < m {
                    if v[j].is_nan() {
                        v[j] = c - u[i];
                        stack.push(m + j);
                    }
                } else if u[i].is_nan() {
                    u[i] = c - v[j];
                    stack.push(i);
                }
            }
        }
        (u, v)
    }

    /// Cell indices on the tree path from row `i` to column `j`, ordered from `i`.
    fn path(&self, adj: &[Vec<usize>], i: usize, j: usize) -> Vec<usize> {
        let total = self.m + self.n;
        let mut via: Vec<Option<usize>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut stack = vec![i];
        let goal = self.m + j;
        while let Some(node) = stack.pop() {
            if node == goal {
                break;
            }
            for &k in &adj[node] {
                let (r, c, _) = self.cells[k];
                let other = if node < self.m { self.m + c } else { r };
                if !seen[other] {
                    seen[other] = true;
                    via[other] = Some(k);
                    stack.push(other);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = goal;
        while node != i {
            let k = via[node].expect("basis is a spanning tree");
            out.push(k);
            let (r, c, _) = self.cells[k];
            node = if node < self.m { self.m + c } else { r };
        }
        out.reverse();
        out
    }
}

/// Minimises `<C, ψ>` over couplings with marginals `a`, `b`.
///
/// For uniform square marginals the returned plan is a permutation scaled by
/// `1/k`; among optimal permutations the lexicographically smallest one is
/// returned.
pub fn solve_exact(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<CouplingMatrix> {
    check_marginals(cost, a, b)?;
    let (m, n) = (cost.rows(), cost.cols());
    let scale = cost.data().iter().fold(1.0f64, |s, &c| s.max(c.abs()));
    let uniform_square = m == n && a.iter().chain(b).all(|&x| (x - 1.0 / n as f64).abs() <= 1e-12);
    if uniform_square {
        let (sigma, u, v) = hungarian(cost);
        let mut plan = vec![0.0; n * n];
        for (i, &j) in sigma.iter().enumerate() {
            plan[i * n + j] = 1.0;
        }
        let perm = lexicographic_permutation(cost, &plan, &u, &v, n, 1e-9 * scale);
        plan.iter_mut().for_each(|x| *x = 0.0);
        for (i, &j) in perm.iter().enumerate() {
            plan[i * n + j] = 1.0 / n as f64;
        }
        return CouplingMatrix::new(m, n, plan, a.to_vec(), b.to_vec());
    }
    let tol = 1e-12 * scale;
    let mut basis = Basis::northwest(a, b);
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut degenerate = 0usize;
    let mut pivots = 0usize;
    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(cost, &adj);
        let bland = degenerate >= DEGENERATE_RUN;
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for i in 0..m {
            for j in 0..n {
                let rc = cost.at(i, j) - u[i] - v[j];
                if rc < -tol {
                    if bland {
                        entering = Some((i, j, rc));
                        break 'scan;
                    }
                    if entering.is_none_or(|(_, _, best)| rc < best) {
                        entering = Some((i, j, rc));
                    }
                }
            }
        }
        let Some((ei, ej, _)) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return contract(format!("transport simplex exceeded {max_pivots} pivots"));
        }
        let path = basis.path(&adj, ei, ej);
        let len = path.len();
        // cells alternate -, +, -, ... walking back from the column end
        let minus: Vec<usize> = path
            .iter()
            .enumerate()
            .filter(|(t, _)| (len - 1 - t).is_multiple_of(2))
            .map(|(_, &k)| k)
            .collect();
        let theta = minus
            .iter()
            .map(|&k| basis.cells[k].2)
            .fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&k| basis.cells[k].2 <= theta)
            .min_by_key(|&&k| (basis.cells[k].0, basis.cells[k].1))
            .expect("cycle has a blocking cell");
        for (t, &k) in path.iter().enumerate() {
            let f = &mut basis.cells[k].2;
            if (len - 1 - t).is_multiple_of(2) {
                *f = (*f - theta).max(0.0);
            } else {
                *f += theta;
            }
        }
        if theta > 0.0 {
            degenerate = 0;
        } else {
            degenerate += 1;
        }
        basis.cells[leaving] = (ei, ej, theta);
    }

    let mut plan = vec![0.0; m * n];
    for &(i, j, f) in &basis.cells {
        plan[i * n + j] += f;
    }
    CouplingMatrix::new(m, n, plan, a.to_vec(), b.to_vec())
}

/// Minimum-cost perfect matching by shortest augmenting paths.
///
/// Returns the row-to-column assignment and dual potentials with
/// `c[i][j] - u[i] - v[j] >= 0`, tight on the assignment.
fn hungarian(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.rows();
    // 1-based internals with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[owner[j] - 1] = j - 1;
    }
    (sigma, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest permutation whose cells are all tight for the
/// optimal dual `(u, v)`; every optimal permutation satisfies this.
fn lexicographic_permutation(
    cost: &CostMatrix,
    plan: &[f64],
    u: &[f64],
    v: &[f64],
    k: usize,
    tol: f64,
) -> Vec<usize> {
    let tight = |i: usize, j: usize| (cost.at(i, j) - u[i] - v[j]).abs() <= tol;
    let mut sigma: Vec<usize> = (0..k)
        .map(|i| {
            (0..k)
                .max_by(|&x, &y| plan[i * k + x].total_cmp(&plan[i * k + y]).then(y.cmp(&x)))
                .unwrap()
        })
        .collect();
    let mut inv = vec![0; k];
    for (i, &j) in sigma.iter().enumerate() {
        inv[j] = i;
    }

    fn reroute(
        r: usize,
        freed: usize,
        first_free: usize,
        k: usize,
        tight: &dyn Fn(usize, usize) -> bool,
        sigma: &mut [usize],
        inv: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for c in 0..k {
            if seen[c] || !tight(r, c) {
                continue;
            }
            seen[c] = true;
            if c == freed {
                sigma[r] = c;
                inv[c] = r;
                return true;
            }
            let next = inv[c];
            if next < first_free {
                continue;
            }
            if reroute(next, freed, first_free, k, tight, sigma, inv, seen) {
                sigma[r] = c;
                inv[c] = r;
                return true;
            }
        }
        false
    }

    for i in 0..k {
        for j in 0..k {
            if sigma[i] == j {
                break;
            }
            if !tight(i, j) || inv[j] < i {
                continue;
            }
            let displaced = inv[j];
            let freed = sigma[i];
            let (saved_s, saved_i) = (sigma.clone(), inv.clone());
            sigma[i] = j;
            inv[j] = i;
            let mut seen = vec![false; k];
            seen[j] = true;
            if reroute(displaced, freed, i + 1, k, &tight, &mut sigma, &mut inv, &mut seen) {
                break;
            }
            sigma = saved_s;
            inv = saved_i;
        }
    }
    sigma
}
