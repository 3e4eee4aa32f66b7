//! Contrastive and classification losses against direct double-loop evaluation.

use cot_core::losses::{loss_3d, loss_cls, loss_mm, loss_total, sim_exp, ContrastiveBatch};
use cot_core::rng;
use cot_core::tensor::{check_gradients, Tape, Tensor};
use rand::Rng;

fn unit_rows(r: &mut rng::Rng, k: usize, d: usize) -> Tensor<f64> {
    let mut rows = Vec::new();
    for _ in 0..k {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(v.iter().map(|x| x / n).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

fn naive_association(a: &Tensor<f64>, p: &Tensor<f64>, tau: f64) -> f64 {
    let k = a.rows();
    let mut total = 0.0;
    for i in 0..k {
        let num = sim_exp(a.row(i), p.row(i), tau).unwrap();
        let mut den = 0.0;
        for j in 0..k {
            den += sim_exp(a.row(i), a.row(j), tau).unwrap();
        }
        for j in 0..k {
            den += sim_exp(a.row(i), p.row(j), tau).unwrap();
        }
        total += -(num / den).ln();
    }
    total / k as f64
}

fn average(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .map(|i| {
            let m: Vec<f64> = a.row(i).iter().zip(b.row(i)).map(|(x, y)| 0.5 * (x + y)).collect();
            let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            m.iter().map(|x| x / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn contrastive_losses_match_double_loop() {
    let mut r = rng::stream(1, &[]);
    for _ in 0..50 {
        let (z1, z2, zi) = (unit_rows(&mut r, 4, 8), unit_rows(&mut r, 4, 8), unit_rows(&mut r, 4, 8));
        let b = ContrastiveBatch::new(z1.clone(), z2.clone(), zi.clone(), 0.1).unwrap();
        assert!((b.loss_3d(false).unwrap() - naive_association(&z1, &z2, 0.1)).abs() <= 1e-6);
        assert!((b.loss_mm(false).unwrap() - naive_association(&average(&z1, &z2), &zi, 0.1)).abs() <= 1e-6);
    }
}

#[test]
fn collapsed_batches_give_log_two_k() {
    for k in [1, 2, 4, 8] {
        let z = Tensor::from_rows(&vec![vec![0.6f64, 0.0, 0.8]; k]).unwrap();
        let b = ContrastiveBatch::new(z.clone(), z.clone(), z.clone(), 0.1).unwrap();
        let want = (2.0 * k as f64).ln();
        assert!((b.loss_3d(false).unwrap() - want).abs() <= 1e-6);
        assert!((b.loss_mm(false).unwrap() - want).abs() <= 1e-6);
        let b32 = ContrastiveBatch::new(z.cast::<f32>(), z.cast::<f32>(), z.cast::<f32>(), 0.1).unwrap();
        assert!((b32.loss_3d(false).unwrap() - want).abs() <= 1e-6);
        assert!((b32.loss_mm(false).unwrap() - want).abs() <= 1e-6);
    }
}

#[test]
fn excluding_self_drops_one_term() {
    let z = Tensor::from_rows(&vec![vec![1.0f64, 0.0]; 3]).unwrap();
    let b = ContrastiveBatch::new(z.clone(), z.clone(), z, 0.1).unwrap();
    assert!((b.loss_3d(true).unwrap() - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn contrastive_losses_are_row_permutation_invariant() {
    let mut r = rng::stream(2, &[]);
    let (z1, z2, zi) = (unit_rows(&mut r, 6, 5), unit_rows(&mut r, 6, 5), unit_rows(&mut r, 6, 5));
    let perm = [4, 2, 0, 5, 1, 3];
    let p = |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let a = ContrastiveBatch::new(z1.clone(), z2.clone(), zi.clone(), 0.1).unwrap();
    let b = ContrastiveBatch::new(p(&z1), p(&z2), p(&zi), 0.1).unwrap();
    assert!((a.loss_3d(false).unwrap() - b.loss_3d(false).unwrap()).abs() < 1e-12);
    assert!((a.loss_mm(false).unwrap() - b.loss_mm(false).unwrap()).abs() < 1e-12);
}

#[test]
fn unnormalised_batch_rejected() {
    let z = Tensor::from_rows(&[vec![2.0f64, 0.0]]).unwrap();
    assert!(ContrastiveBatch::new(z.clone(), z.clone(), z, 0.1).is_err());
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut r = rng::stream(3, &[]);
    for _ in 0..10 {
        let x = unit_rows(&mut r, 4, 8);
        let (c2, ci) = (unit_rows(&mut r, 4, 8), unit_rows(&mut r, 4, 8));
        let e3 = check_gradients(
            |t, v| {
                let c = t.leaf(&c2);
                loss_3d(t, v, c, 0.1, false)
            },
            &x,
            1e-3,
        )
        .unwrap();
        let e3b = check_gradients(
            |t, v| {
                let c = t.leaf(&c2);
                loss_3d(t, c, v, 0.1, false)
            },
            &x,
            1e-3,
        )
        .unwrap();
        let emm = check_gradients(
            |t, v| {
                let (c, i) = (t.leaf(&c2), t.leaf(&ci));
                loss_mm(t, v, c, i, 0.1, true)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(e3 <= 1e-4 && e3b <= 1e-4 && emm <= 1e-4, "{e3} {e3b} {emm}");
    }
}

#[test]
fn cls_gradient_and_total_additivity() {
    let mut r = rng::stream(4, &[]);
    let x = Tensor::new(&[4, 5], (0..20).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let soft = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4, 0.0]; 4]).unwrap();
    let e = check_gradients(
        |t, v| {
            let p = t.softmax(v);
            let y = t.leaf(&soft);
            loss_cls(t, p, y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(e <= 1e-4);

    // gradient of the total equals the sum of per-part gradients
    let x = x.with_grad();
    let parts = |t: &mut Tape<f64>, v| {
        let p = t.softmax(v);
        let y = t.leaf(&soft);
        let a = loss_cls(t, p, y).unwrap();
        let n = t.normalize(v);
        let b = loss_3d(t, n, n, 0.5, false).unwrap();
        let c = t.mul(v, v).unwrap();
        let c = t.mean(c);
        let d = t.sum(v);
        [a, b, c, d]
    };
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let ps = parts(&mut t, v);
    let total = loss_total(&mut t, ps).unwrap();
    let g_total = t.backward(total).unwrap().wrt(v);
    let mut g_sum = vec![0.0; 20];
    for i in 0..4 {
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let ps = parts(&mut t, v);
        let g = t.backward(ps[i]).unwrap().wrt(v);
        g_sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    for (a, b) in g_total.iter().zip(&g_sum) {
        assert!((a - b).abs() < 1e-12);
    }
}
