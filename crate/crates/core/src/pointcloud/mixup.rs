use super::{dist2, farthest_point_indices, Point, PointCloud};
use crate::error::{contract, Result};
use crate::ot::{solve_exact, uniform_marginal, CostMatrix};
use crate::rng;
use rand::Rng as _;

/// Largest cloud paired by exact minimum-cost assignment.
pub const PCM_EXACT_MAX: usize = 64;

/// Index `σ(i)` of the point of `b` paired with point `i` of `a`.
fn assignment(a: &[Point], b: &[Point]) -> Result<Vec<usize>> {
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for p in a {
        for q in b {
            cost.push(dist2(p, q));
        }
    }
    let plan = solve_exact(&CostMatrix::from_vec(n, n, cost)?, &uniform_marginal(n), &uniform_marginal(n))?;
    Ok((0..n)
        .map(|i| (0..n).find(|&j| plan.at(i, j) > 0.0).expect("permutation plan"))
        .collect())
}

/// Point mixup: interpolates `a` towards `b` along a point assignment.
///
/// Clouds of up to [`PCM_EXACT_MAX`] points are paired by the minimum
/// squared-distance assignment. Larger clouds are first reduced to
/// [`PCM_EXACT_MAX`] points each by farthest point sampling (seeded start)
/// and paired in selection order. Returns the mixed cloud (with `a`'s
/// label and domain) and the soft label
/// `(1 - λ) onehot(a) + λ onehot(b)` over `classes` classes.
pub fn pcm_mixup(
    a: &PointCloud,
    b: &PointCloud,
    lambda: f64,
    classes: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<f32>)> {
    let (Some(la), Some(lb)) = (a.label, b.label) else {
        return contract("mixup needs labelled clouds");
    };
    if la >= classes || lb >= classes {
        return contract(format!("labels {la}/{lb} out of range for {classes} classes"));
    }
    if a.len() != b.len() {
        return contract(format!("mixup needs equal cardinality, got {} and {}", a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return contract(format!("mixup weight must be in [0, 1], got {lambda}"));
    }
    let (pa, pb, sigma): (Vec<Point>, Vec<Point>, Vec<usize>) = if a.len() <= PCM_EXACT_MAX {
        (a.points().to_vec(), b.points().to_vec(), assignment(a.points(), b.points())?)
    } else {
        let mut r = rng::stream(seed, &[]);
        let ia = farthest_point_indices(a.points(), PCM_EXACT_MAX, r.random_range(0..a.len()))?;
        let ib = farthest_point_indices(b.points(), PCM_EXACT_MAX, r.random_range(0..b.len()))?;
        (
            ia.iter().map(|&i| a.points()[i]).collect(),
            ib.iter().map(|&i| b.points()[i]).collect(),
            (0..PCM_EXACT_MAX).collect(),
        )
    };
    let points = pa
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = &pb[sigma[i]];
            [0, 1, 2].map(|k| ((1.0 - lambda) * p[k] as f64 + lambda * q[k] as f64) as f32)
        })
        .collect();
    let mut soft = vec![0.0f32; classes];
    soft[la] += (1.0 - lambda) as f32;
    soft[lb] += lambda as f32;
    Ok((a.with_points(points)?, soft))
}

#[cfg(test)]
mod tests {
    use super::super::Domain;
    use super::*;

    fn cloud(seed: u64, n: usize, label: usize) -> PointCloud {
        let mut r = rng::stream(seed, &[]);
        let pts = (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0f32..1.0))).collect();
        PointCloud::new(pts, Some(label), Domain::Source).unwrap()
    }

    #[test]
    fn endpoints() {
        let (a, b) = (cloud(1, 20, 0), cloud(2, 20, 3));
        let (m0, y0) = pcm_mixup(&a, &b, 0.0, 5, 0).unwrap();
        assert_eq!(m0.points(), a.points());
        assert_eq!(y0, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let (m1, y1) = pcm_mixup(&a, &b, 1.0, 5, 0).unwrap();
        let mut got = m1.flat().chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let mut want = b.flat().chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, want);
        assert_eq!(y1, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn identical_inputs_are_fixed() {
        let a = cloud(4, 16, 2);
        for lambda in [0.1, 0.5, 0.77] {
            let (m, y) = pcm_mixup(&a, &a, lambda, 3, 0).unwrap();
            assert_eq!(m.points(), a.points());
            assert_eq!(y, vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn large_clouds_reduce_to_cap() {
        let (a, b) = (cloud(5, 100, 0), cloud(6, 100, 1));
        let (m, y) = pcm_mixup(&a, &b, 0.25, 2, 3).unwrap();
        assert_eq!(m.len(), PCM_EXACT_MAX);
        assert_eq!(y, vec![0.75, 0.25]);
    }

    #[test]
    fn unlabelled_rejected() {
        let mut a = cloud(1, 4, 0);
        a.label = None;
        assert!(pcm_mixup(&a, &a, 0.5, 2, 0).is_err());
    }
}
