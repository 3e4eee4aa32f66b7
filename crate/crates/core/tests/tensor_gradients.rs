//! Finite-difference sweep over every differentiable tape operation.

use cot_core::rng;
use cot_core::tensor::{check_gradients, OpKind, Tape, Tensor, Var};
use cot_core::Result;
use rand::Rng;

const TRIALS: u64 = 100;
const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so relu stays differentiable under ±H.
fn away_from_zero(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Weighted sum so that every output coordinate contributes distinctly.
fn contract(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n: usize = t.shape(y).iter().product();
    let mut r = rng::stream(seed, &[99]);
    let w = t.constant(t.shape(y).to_vec().as_slice(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn sweep(name: &str, mut make: impl FnMut(&mut rng::Rng) -> Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var, u64) -> Result<Var>) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut r = rng::stream(trial, &[name.len() as u64, 1]);
        let x = make(&mut r);
        let err = check_gradients(|t, v| {
            let y = f(t, v, trial)?;
            contract(t, y, trial)
        }, &x, H)
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn unary_elementwise_ops() {
    sweep("relu", |r| away_from_zero(&[3, 4], r), |t, x, _| Ok(t.relu(x)));
    sweep("exp", |r| random(&[3, 4], -1.0, 1.0, r), |t, x, _| Ok(t.exp(x)));
    sweep("log", |r| random(&[3, 4], 0.5, 2.0, r), |t, x, _| Ok(t.log(x)));
    sweep("scale", |r| random(&[5], -1.0, 1.0, r), |t, x, _| Ok(t.scale(x, -2.5)));
    sweep("reshape", |r| random(&[2, 6], -1.0, 1.0, r), |t, x, _| t.reshape(x, &[3, 4]));
    sweep("transpose", |r| random(&[2, 5], -1.0, 1.0, r), |t, x, _| t.transpose(x));
}

#[test]
fn binary_ops_both_sides() {
    for (name, kind) in [("add", OpKind::Add), ("sub", OpKind::Sub), ("mul", OpKind::Mul)] {
        sweep(name, |r| random(&[3, 4], -1.0, 1.0, r), |t, x, s| {
            let mut r = rng::stream(s, &[7]);
            let c = t.constant(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())?;
            let left = t.forward_op(kind.clone(), &[x, c])?;
            let right = t.forward_op(kind.clone(), &[c, x])?;
            t.add(left, right)
        });
    }
    sweep("add_bias", |r| random(&[4], -1.0, 1.0, r), |t, b, _| {
        let a = t.constant(&[3, 4], vec![0.5; 12])?;
        t.add(a, b)
    });
    sweep("matmul_left", |r| random(&[3, 4], -1.0, 1.0, r), |t, x, s| {
        let mut r = rng::stream(s, &[8]);
        let c = t.constant(&[4, 2], (0..8).map(|_| r.random_range(-1.0..1.0)).collect())?;
        t.matmul(x, c)
    });
    sweep("matmul_right", |r| random(&[4, 2], -1.0, 1.0, r), |t, x, s| {
        let mut r = rng::stream(s, &[9]);
        let c = t.constant(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())?;
        t.matmul(c, x)
    });
    sweep("matmul_self", |r| random(&[3, 3], -1.0, 1.0, r), |t, x, _| t.matmul(x, x));
}

#[test]
fn reductions() {
    sweep("sum", |r| random(&[2, 3], -1.0, 1.0, r), |t, x, _| Ok(t.sum(x)));
    sweep("mean", |r| random(&[2, 3], -1.0, 1.0, r), |t, x, _| Ok(t.mean(x)));
    for axis in 0..3 {
        sweep("sum_axis", |r| random(&[2, 3, 4], -1.0, 1.0, r), |t, x, _| t.sum_axis(x, axis));
    }
    for axis in 0..3 {
        // distinct values spaced well beyond 2H
        sweep(
            "max_axis",
            |r| {
                let mut v: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
                for i in (1..v.len()).rev() {
                    v.swap(i, r.random_range(0..=i));
                }
                Tensor::new(&[2, 3, 4], v).unwrap()
            },
            |t, x, _| t.max_axis(x, axis),
        );
    }
    sweep("concat", |r| random(&[2, 3], -1.0, 1.0, r), |t, x, _| {
        let c = t.constant(&[2, 2], vec![0.1, 0.2, 0.3, 0.4])?;
        let a = t.concat(&[x, c, x], 1)?;
        let b = t.concat(&[x, x], 0)?;
        let (sa, sb) = (t.sum_axis(a, 1)?, t.sum_axis(b, 1)?);
        let sb = t.reshape(sb, &[2, 2])?;
        let sb = t.sum_axis(sb, 0)?;
        t.mul(sa, sb)
    });
}

#[test]
fn row_geometry_ops() {
    sweep("l2_norm", |r| random(&[3, 5], -1.0, 1.0, r), |t, x, _| Ok(t.l2_norm(x)));
    sweep("normalize", |r| random(&[3, 5], -1.0, 1.0, r), |t, x, _| Ok(t.normalize(x)));
    sweep("cosine", |r| random(&[3, 5], -1.0, 1.0, r), |t, x, s| {
        let mut r = rng::stream(s, &[10]);
        let c = t.constant(&[3, 5], (0..15).map(|_| r.random_range(-1.0..1.0)).collect())?;
        let a = t.cosine_similarity(x, c)?;
        let b = t.cosine_similarity(c, x)?;
        let xx = t.cosine_similarity(x, x)?;
        let ab = t.add(a, b)?;
        t.add(ab, xx)
    });
    sweep("softmax", |r| random(&[3, 5], -2.0, 2.0, r), |t, x, _| Ok(t.softmax(x)));
    sweep("batch_norm", |r| random(&[6, 3], -1.0, 1.0, r), |t, x, _| t.batch_norm(x));
    sweep("dropout", |r| random(&[2, 4], -1.0, 1.0, r), |t, x, _| {
        let m = t.constant(&[2, 4], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0])?;
        t.dropout_mask_apply(x, m)
    });
}

#[test]
fn conv2d_input_weight_bias() {
    let w0 = |r: &mut rng::Rng| random(&[3, 2, 3, 3], -0.5, 0.5, r);
    sweep("conv_x", |r| random(&[2, 2, 5, 5], -1.0, 1.0, r), |t, x, s| {
        let mut r = rng::stream(s, &[11]);
        let w = t.leaf(&w0(&mut r));
        let b = t.constant(&[3], vec![0.1, -0.2, 0.3])?;
        t.conv2d(x, w, b, 2, 1)
    });
    sweep("conv_w", w0, |t, w, s| {
        let mut r = rng::stream(s, &[12]);
        let x = t.leaf(&random(&[2, 2, 5, 5], -1.0, 1.0, &mut r));
        let b = t.constant(&[3], vec![0.1, -0.2, 0.3])?;
        t.conv2d(x, w, b, 1, 0)
    });
    sweep("conv_b", |r| random(&[3], -1.0, 1.0, r), |t, b, s| {
        let mut r = rng::stream(s, &[13]);
        let x = t.leaf(&random(&[1, 2, 4, 4], -1.0, 1.0, &mut r));
        let w = t.leaf(&random(&[3, 2, 3, 3], -0.5, 0.5, &mut r));
        t.conv2d(x, w, b, 2, 1)
    });
}

#[test]
fn fan_out_accumulates_additively() {
    let x = Tensor::<f64>::new(&[3], vec![0.4, -0.7, 1.3]).unwrap().with_grad();
    let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let l = build(&mut t, v);
        t.backward(l).unwrap().wrt(v)
    };
    let exp_only = grad_of(&|t, v| {
        let e = t.exp(v);
        t.sum(e)
    });
    let sq_only = grad_of(&|t, v| {
        let s = t.mul(v, v).unwrap();
        t.sum(s)
    });
    let both = grad_of(&|t, v| {
        let e = t.exp(v);
        let e = t.sum(e);
        let s = t.mul(v, v).unwrap();
        let s = t.sum(s);
        t.add(e, s).unwrap()
    });
    for i in 0..3 {
        assert!((both[i] - exp_only[i] - sq_only[i]).abs() < 1e-12);
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let run = || {
        let mut r = rng::stream(5, &[]);
        let x = random(&[8, 6], -1.0, 1.0, &mut r).cast::<f32>().with_grad();
        let w = random(&[6, 4], -1.0, 1.0, &mut r).cast::<f32>().with_grad();
        let mut t = Tape::<f32>::new();
        let (xv, wv) = (t.leaf(&x), t.leaf(&w));
        let h = t.matmul(xv, wv).unwrap();
        let h = t.relu(h);
        let h = t.softmax(h);
        let l = t.mean(h);
        let g = t.backward(l).unwrap();
        (g.wrt(xv), g.wrt(wv))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn cosine_gradient_matches_finite_difference_in_f32_scale() {
    // cos(x, c) with constant c, relative error 1e-4 at h = 1e-3
    let x = Tensor::<f64>::new(&[1, 4], vec![0.3, -0.8, 1.1, 0.2]).unwrap();
    let err = check_gradients(
        |t, v| {
            let c = t.constant(&[1, 4], vec![1.0, 0.5, -0.25, 2.0])?;
            let s = t.cosine_similarity(v, c)?;
            Ok(t.sum(s))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}
