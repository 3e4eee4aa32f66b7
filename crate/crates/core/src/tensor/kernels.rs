//! Inner loops shared by forward and backward passes.
//!
//! Each output row is produced by exactly one task with a fixed summation
//! order, so results do not depend on the number of worker threads.

use super::Real;
use crate::par;

/// `a[m,k] · b[k,n]` with 64-bit accumulation.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    par::for_each_row(&mut out, n, m * k * n, |i, row| {
        let mut acc = vec![0.0f64; n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.f64();
            }
        }
        for (o, s) in row.iter_mut().zip(acc) {
            *o = F::of(s);
        }
    });
    out
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Dot product in `f64` over eight interleaved partial sums.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].f64() * y[l].f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.f64() * y.f64();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `a[m,k] · b[n,k]ᵀ` as row dot products.
pub fn matmul_bt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    par::for_each_row(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = F::of(dot(arow, &b[j * k..(j + 1) * k]));
        }
    });
    out
}

/// Output spatial size of a convolution.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_image(&self) -> usize {
        self.o * self.oh * self.ow
    }
}

/// Images unfolded together by the convolution kernels.
const CONV_CHUNK: usize = 16;

/// Unfolds images `lo..hi` of `x` into `f64` columns `[c*kh*kw, (hi-lo)*oh*ow]`.
fn im2col<F: Real>(x: &[F], g: &ConvGeom, lo: usize, hi: usize) -> Vec<f64> {
    let p = g.out_pixels();
    let width = (hi - lo) * p;
    let mut cols = vec![0.0f64; g.patch() * width];
    for (bi, i) in (lo..hi).enumerate() {
        let img = &x[i * g.in_image()..(i + 1) * g.in_image()];
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let base = r * width + bi * p;
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let src = &img[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                cols[base + oy * g.ow + ox] = src[xx as usize].f64();
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds chunk column gradients back onto image gradients (adjoint of `im2col`).
fn col2im<F: Real>(cols: &[f64], g: &ConvGeom, count: usize, out: &mut [F]) {
    let p = g.out_pixels();
    let width = count * p;
    for bi in 0..count {
        let mut acc = vec![0.0f64; g.in_image()];
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let base = r * width + bi * p;
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let row = (c * g.h + y as usize) * g.w;
                        for ox in 0..g.ow {
                            let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                acc[row + xx as usize] += cols[base + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in out[bi * g.in_image()..(bi + 1) * g.in_image()].iter_mut().zip(acc) {
            *o = F::of(a);
        }
    }
}

fn to_f64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Forward convolution of `x[n,c,h,w]` with `w[o,c,kh,kw]` plus bias `b[o]`.
pub(crate) fn conv2d_forward<F: Real>(x: &[F], w: &[F], b: &[F], g: &ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.n * g.out_image()];
    let (patch, p) = (g.patch(), g.out_pixels());
    let w64 = to_f64(w);
    let chunk_len = CONV_CHUNK * g.out_image();
    par::for_each_row(&mut out, chunk_len, g.n * g.out_image() * patch, |ci, y| {
        let lo = ci * CONV_CHUNK;
        let hi = (lo + CONV_CHUNK).min(g.n);
        let width = (hi - lo) * p;
        let cols = im2col(x, g, lo, hi);
        let mut acc = vec![0.0f64; width];
        for o in 0..g.o {
            acc.iter_mut().for_each(|a| *a = b[o].f64());
            for (r, &wv) in w64[o * patch..(o + 1) * patch].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (s, &cv) in acc.iter_mut().zip(&cols[r * width..(r + 1) * width]) {
                    *s += wv * cv;
                }
            }
            for bi in 0..hi - lo {
                let dst = &mut y[bi * g.out_image() + o * p..bi * g.out_image() + (o + 1) * p];
                for (d, &s) in dst.iter_mut().zip(&acc[bi * p..(bi + 1) * p]) {
                    *d = F::of(s);
                }
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<F: Real>(
    x: &[F],
    w: &[F],
    gout: &[F],
    g: &ConvGeom,
    want_x: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let (patch, p) = (g.patch(), g.out_pixels());
    let w64 = to_f64(w);
    let chunks = g.n.div_ceil(CONV_CHUNK);
    // per-chunk partials, reduced below in chunk order
    let partials = par::map_indices(chunks, |ci| {
        let lo = ci * CONV_CHUNK;
        let hi = (lo + CONV_CHUNK).min(g.n);
        let width = (hi - lo) * p;
        let cols = im2col(x, g, lo, hi);
        // gradient rows regrouped as [o, chunk pixels]
        let mut go = vec![0.0f64; g.o * width];
        for bi in 0..hi - lo {
            for o in 0..g.o {
                let src = &gout[(lo + bi) * g.out_image() + o * p..(lo + bi) * g.out_image() + (o + 1) * p];
                for (d, s) in go[o * width + bi * p..o * width + (bi + 1) * p].iter_mut().zip(src) {
                    *d = s.f64();
                }
            }
        }
        let mut gw = vec![0.0f64; g.o * patch];
        let mut gb = vec![0.0f64; g.o];
        for o in 0..g.o {
            let grow = &go[o * width..(o + 1) * width];
            gb[o] = grow.iter().sum();
            for r in 0..patch {
                gw[o * patch + r] = dot(grow, &cols[r * width..(r + 1) * width]);
            }
        }
        let gx = want_x.then(|| {
            let mut gcol = vec![0.0f64; patch * width];
            for o in 0..g.o {
                let grow = &go[o * width..(o + 1) * width];
                for r in 0..patch {
                    let wv = w64[o * patch + r];
                    if wv == 0.0 {
                        continue;
                    }
                    for (s, &gv) in gcol[r * width..(r + 1) * width].iter_mut().zip(grow) {
                        *s += wv * gv;
                    }
                }
            }
            let mut gx = vec![F::zero(); (hi - lo) * g.in_image()];
            col2im(&gcol, g, hi - lo, &mut gx);
            gx
        });
        (gx, gw, gb)
    });
    let mut gw = vec![0.0f64; g.o * patch];
    let mut gb = vec![0.0f64; g.o];
    let mut gx = want_x.then(|| Vec::with_capacity(g.n * g.in_image()));
    for (px, pw, pb) in partials {
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
        if let (Some(all), Some(px)) = (gx.as_mut(), px) {
            all.extend(px);
        }
    }
    (
        gx,
        gw.into_iter().map(F::of).collect(),
        gb.into_iter().map(F::of).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_bt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
        assert_eq!(transpose(&a, 2, 2), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of weight 2 with bias 1 is an affine map of the image
        let g = ConvGeom {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            o: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            oh: 2,
            ow: 2,
        };
        let y = conv2d_forward(&[1.0f64, 2.0, 3.0, 4.0], &[2.0], &[1.0], &g);
        assert_eq!(y, vec![3.0, 5.0, 7.0, 9.0]);
    }
}
