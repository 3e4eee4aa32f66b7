use super::kernels::{self, ConvGeom};
use super::{sum64, Real, Tensor, EPS};
use crate::error::{contract, dim, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    /// Elementwise add; the second operand may be a bias row broadcast over the last axis.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    /// `ln(max(x, 0) + EPS)`.
    Log,
    Sum,
    SumAxis(usize),
    Mean,
    /// Max along an axis; ties go to the lowest index.
    MaxOverAxis(usize),
    Concat(usize),
    Transpose,
    /// Norm of each row (last axis), `sqrt(sum x^2 + EPS)`.
    L2Norm,
    /// Rows divided by their [`OpKind::L2Norm`].
    Normalize,
    /// Row-wise cosine similarity of two equally shaped tensors.
    CosineSimilarity,
    /// Softmax over the last axis.
    Softmax,
    /// Per-column standardisation with batch statistics only (no running stats, no affine).
    BatchNorm,
    /// `x * mask` where the mask is a constant (already rescaled) keep-mask.
    DropoutMaskApply,
    Reshape(Vec<usize>),
    /// Inputs `[x[n,c,h,w], w[o,c,kh,kw], b[o]]`.
    Conv2d { stride: usize, pad: usize },
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mean(Var),
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    L2Norm(Var),
    Normalize { x: Var, norms: Vec<F> },
    Cosine { a: Var, b: Var, na: Vec<F>, nb: Vec<F> },
    Softmax(Var),
    BatchNorm { x: Var, inv_std: Vec<F> },
    Dropout { x: Var, mask: Var },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
}

#[derive(Clone, Debug)]
struct Node<F: Real> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Append order is a topological order; [`Tape::backward`] walks it in
/// reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<F: Real = f32> {
    grads: Vec<Option<Vec<F>>>,
    lens: Vec<usize>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`, or zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Vec<F> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![F::zero(); self.lens[v.0]])
    }

    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn row_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable value.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("tape values are well formed")
    }

    /// First element of a value; for scalar losses.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point dispatching on `kind`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match &kind {
            OpKind::Matmul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::CosineSimilarity
            | OpKind::DropoutMaskApply => 2,
            OpKind::Conv2d { .. } => 3,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            ));
        }
        let x = inputs[0];
        match kind {
            OpKind::Matmul => self.matmul(x, inputs[1]),
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Sub => self.sub(x, inputs[1]),
            OpKind::Mul => self.mul(x, inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(x, c)),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::Exp => Ok(self.exp(x)),
            OpKind::Log => Ok(self.log(x)),
            OpKind::Sum => Ok(self.sum(x)),
            OpKind::SumAxis(a) => self.sum_axis(x, a),
            OpKind::Mean => Ok(self.mean(x)),
            OpKind::MaxOverAxis(a) => self.max_axis(x, a),
            OpKind::Concat(a) => self.concat(inputs, a),
            OpKind::Transpose => self.transpose(x),
            OpKind::L2Norm => Ok(self.l2_norm(x)),
            OpKind::Normalize => Ok(self.normalize(x)),
            OpKind::CosineSimilarity => self.cosine_similarity(x, inputs[1]),
            OpKind::Softmax => Ok(self.softmax(x)),
            OpKind::BatchNorm => self.batch_norm(x),
            OpKind::DropoutMaskApply => self.dropout_mask_apply(x, inputs[1]),
            OpKind::Reshape(s) => self.reshape(x, &s),
            OpKind::Conv2d { stride, pad } => self.conv2d(x, inputs[1], inputs[2], stride, pad),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return dim(format!("transpose needs rank 2, got {s:?}"));
        }
        let out = kernels::transpose(self.value(a), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1], s[0]], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x + y)
                .collect();
            return Ok(self.push(sa, out, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let c = sb[0];
            let bias = self.value(b);
            let out = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[i % c])
                .collect();
            return Ok(self.push(sa, out, Op::AddBias(a, b), rg));
        }
        dim(format!("add {sa:?} + {sb:?}"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return dim(format!("sub {sa:?} - {:?}", self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return dim(format!("mul {sa:?} * {:?}", self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let eps = F::of(EPS);
        let out = self
            .value(a)
            .iter()
            .map(|&x| (x.max(F::zero()) + eps).ln())
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = F::of(sum64(self.value(a)));
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = F::of(sum64(v) / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim(format!("sum over axis {axis} of {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| v[(o * len + l) * inner + i].f64()).sum();
                out.push(F::of(s));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(drop_axis(&shape, axis), out, Op::SumAxis { x: a, axis }, rg))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim(format!("max over axis {axis} of {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = v[o * len * inner + i];
                for l in 1..len {
                    let x = v[(o * len + l) * inner + i];
                    // strict comparison keeps the lowest index on ties
                    if x > bv {
                        bv = x;
                        best = l;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            drop_axis(&shape, axis),
            out,
            Op::MaxAxis { x: a, axis, argmax },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return contract("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim(format!("concat along axis {axis} of {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return dim(format!("concat {first:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn row_norms(&self, a: Var) -> Vec<F> {
        let c = *self.shape(a).last().unwrap();
        self.value(a)
            .chunks(c)
            .map(|r| F::of((r.iter().map(|x| x.f64() * x.f64()).sum::<f64>() + EPS).sqrt()))
            .collect()
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let norms = self.row_norms(a);
        let rg = self.rg(&[a]);
        self.push(row_shape(self.shape(a)), norms, Op::L2Norm(a), rg)
    }

    pub fn normalize(&mut self, a: Var) -> Var {
        let norms = self.row_norms(a);
        let c = *self.shape(a).last().unwrap();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x / norms[i / c])
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Normalize { x: a, norms }, rg)
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return dim(format!("cosine {shape:?} vs {:?}", self.shape(b)));
        }
        let (na, nb) = (self.row_norms(a), self.row_norms(b));
        let c = *shape.last().unwrap();
        let out = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .enumerate()
            .map(|(i, (x, y))| {
                let d: f64 = x.iter().zip(y).map(|(p, q)| p.f64() * q.f64()).sum();
                F::of(d / (na[i].f64() * nb[i].f64()))
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(row_shape(&shape), out, Op::Cosine { a, b, na, nb }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap();
        let mut out = Vec::with_capacity(self.value(a).len());
        for r in self.value(a).chunks(c) {
            let m = r.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let e: Vec<f64> = r.iter().map(|&x| (x - m).f64().exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|&x| F::of(x / s)));
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    pub fn batch_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return dim(format!("batch norm needs rank 2, got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let v = self.value(a);
        let mut out = vec![F::zero(); n * c];
        let mut inv_std = Vec::with_capacity(c);
        for j in 0..c {
            let mean = (0..n).map(|i| v[i * c + j].f64()).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (v[i * c + j].f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            for i in 0..n {
                out[i * c + j] = F::of((v[i * c + j].f64() - mean) * is);
            }
            inv_std.push(F::of(is));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::BatchNorm { x: a, inv_std }, rg))
    }

    pub fn dropout_mask_apply(&mut self, x: Var, mask: Var) -> Result<Var> {
        if self.requires_grad(mask) {
            return contract("dropout mask must be a constant");
        }
        let shape = self.shape(x).to_vec();
        if shape != self.shape(mask) {
            return dim(format!("dropout mask {:?} vs {shape:?}", self.shape(mask)));
        }
        let out = self
            .value(x)
            .iter()
            .zip(self.value(mask))
            .map(|(&a, &m)| a * m)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.is_empty() || shape.contains(&0) {
            return dim(format!("reshape {:?} to {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return dim(format!("conv2d x{sx:?} w{sw:?} b{sb:?}"));
        }
        if stride == 0 || sw[2] > sx[2] + 2 * pad || sw[3] > sx[3] + 2 * pad {
            return dim(format!("conv2d kernel {sw:?} does not fit input {sx:?}"));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: kernels::conv2d_output_size(sx[2], sw[2], stride, pad),
            ow: kernels::conv2d_output_size(sx[3], sw[3], stride, pad),
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            vec![geom.n, geom.o, geom.oh, geom.ow],
            out,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable node reachable from `loss` receives the sum of
    /// the pullbacks of all its consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, lens });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.pullback(idx, &g, &mut grads);
        }
        Ok(Gradients { grads, lens })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn pullback(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let ga = kernels::matmul_bt(g, self.value(*b), m, n, k);
                    self.acc(grads, *a, |s| add_into(s, &ga));
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(self.value(*a), m, k);
                    let gb = kernels::matmul(&at, g, k, m, n);
                    self.acc(grads, *b, |s| add_into(s, &gb));
                }
            }
            Op::Transpose(a) => {
                let s = &node.shape;
                let gt = kernels::transpose(g, s[0], s[1]);
                self.acc(grads, *a, |d| add_into(d, &gt));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| add_into(s, g));
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                let c = self.shape(*b)[0];
                let mut gb = vec![0.0f64; c];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % c] += x.f64();
                }
                self.acc(grads, *b, |s| {
                    s.iter_mut().zip(gb).for_each(|(d, x)| *d = *d + F::of(x))
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        if va[i] > F::zero() {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let eps = F::of(EPS);
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        if va[i] > F::zero() {
                            s[i] = s[i] + g[i] / (va[i] + eps);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |s| s.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Mean(a) => {
                let gm = g[0] / F::of(self.value(*a).len() as f64);
                self.acc(grads, *a, |s| s.iter_mut().for_each(|d| *d = *d + gm));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |s| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let d = &mut s[(o * len + l) * inner + i];
                                *d = *d + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (_, len, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |s| {
                    for (r, &l) in argmax.iter().enumerate() {
                        let (o, i) = (r / inner, r % inner);
                        let d = &mut s[(o * len + l) * inner + i];
                        *d = *d + g[r];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::L2Norm(a) => {
                let va = self.value(*a);
                let c = *self.shape(*a).last().unwrap();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i / c] * va[i] / y[i / c];
                    }
                });
            }
            Op::Normalize { x, norms } => {
                let c = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |s| {
                    for (r, ((sr, gr), yr)) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .enumerate()
                    {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                        let n = norms[r].f64();
                        for j in 0..c {
                            sr[j] = sr[j] + F::of((gr[j].f64() - yr[j].f64() * gy) / n);
                        }
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let c = *self.shape(*a).last().unwrap();
                let (va, vb) = (self.value(*a), self.value(*b));
                let pull = |own: &[F], other: &[F], n_own: &[F], n_other: &[F], s: &mut [F]| {
                    for r in 0..n_own.len() {
                        let (no, nt) = (n_own[r].f64(), n_other[r].f64());
                        let cos = y[r].f64();
                        let gr = g[r].f64();
                        for j in 0..c {
                            let i = r * c + j;
                            let d = other[i].f64() / (no * nt) - cos * own[i].f64() / (no * no);
                            s[i] = s[i] + F::of(gr * d);
                        }
                    }
                };
                self.acc(grads, *a, |s| pull(va, vb, na, nb, s));
                self.acc(grads, *b, |s| pull(vb, va, nb, na, s));
            }
            Op::Softmax(a) => {
                let c = *node.shape.last().unwrap();
                self.acc(grads, *a, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                        for j in 0..c {
                            sr[j] = sr[j] + F::of(yr[j].f64() * (gr[j].f64() - gy));
                        }
                    }
                });
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                self.acc(grads, *x, |s| {
                    for j in 0..c {
                        let sg: f64 = (0..n).map(|i| g[i * c + j].f64()).sum();
                        let sgy: f64 = (0..n).map(|i| g[i * c + j].f64() * y[i * c + j].f64()).sum();
                        let is = inv_std[j].f64();
                        for i in 0..n {
                            let k = i * c + j;
                            let d = is / n as f64
                                * (n as f64 * g[k].f64() - sg - y[k].f64() * sgy);
                            s[k] = s[k] + F::of(d);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let m = self.value(*mask);
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * m[i];
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |s| add_into(s, g));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want_x = self.requires_grad(*x);
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, want_x);
                if let Some(gx) = gx {
                    self.acc(grads, *x, |s| add_into(s, &gx));
                }
                self.acc(grads, *w, |s| add_into(s, &gw));
                self.acc(grads, *b, |s| add_into(s, &gb));
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
