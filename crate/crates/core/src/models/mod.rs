//! Point encoder, multi-view image encoder, projection heads and classifier.
//!
//! Parameters live in a [`ParamStore`] as `f32` tensors. A forward pass
//! first [`Model::bind`]s the store onto a tape (trainable or frozen), then
//! composes layer calls on the resulting handles. All forwards are generic
//! over the tape precision.

pub mod checkpoint;

use rand::Rng as _;

use crate::error::{contract, dim, Error, Result};
use crate::pointcloud::PointCloud;
use crate::renderer::ImageStack;
use crate::rng;
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub emb_dim: usize,
    pub proj_dim: usize,
    pub point_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub clf_hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            emb_dim: 64,
            proj_dim: 32,
            point_hidden: vec![64, 128],
            conv_channels: vec![8, 16, 32],
            clf_hidden: vec![64, 32],
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.classes, self.emb_dim, self.proj_dim];
        if widths.contains(&0)
            || self.point_hidden.contains(&0)
            || self.conv_channels.contains(&0)
            || self.clf_hidden.contains(&0)
        {
            return contract("layer widths must be positive");
        }
        if self.conv_channels.is_empty() {
            return contract("image encoder needs at least one convolution");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return contract(format!("dropout rate must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Ordered named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.tensors.push(t.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn named(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| Tensor::new(t.shape(), t.data().to_vec()).unwrap()))
            .collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be present with its shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some((_, t)) = named.iter().find(|(n, _)| n == name) else {
                return Err(Error::Parse {
                    context: "checkpoint".into(),
                    message: format!("missing parameter {name}"),
                });
            };
            if t.shape() != self.tensors[i].shape() {
                return dim(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i].data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

/// Parameter handles on one tape.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    point_mlp: Vec<Linear>,
    convs: Vec<Conv>,
    image_fc: Linear,
    head3d: [Linear; 2],
    head2d: [Linear; 2],
    clf: Vec<Linear>,
}

fn kaiming(r: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-bound..bound) as f32).collect()).unwrap()
}

impl Model {
    /// Fresh model with seeded uniform fan-in initialisation and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let linear = |store: &mut ParamStore, r: &mut rng::Rng, name: &str, i: usize, o: usize| Linear {
            w: store.push(format!("{name}.w"), kaiming(r, &[i, o], i)),
            b: store.push(format!("{name}.b"), Tensor::zeros(&[o])),
        };
        let mut point_mlp = Vec::new();
        let mut prev = 3;
        for (i, &h) in cfg.point_hidden.iter().chain([&cfg.emb_dim]).enumerate() {
            point_mlp.push(linear(&mut store, &mut r, &format!("enc3d.fc{i}"), prev, h));
            prev = h;
        }
        let mut convs = Vec::new();
        let mut ch = 1;
        for (i, &o) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv {
                w: store.push(format!("enc2d.conv{i}.w"), kaiming(&mut r, &[o, ch, 3, 3], ch * 9)),
                b: store.push(format!("enc2d.conv{i}.b"), Tensor::zeros(&[o])),
            });
            ch = o;
        }
        let image_fc = linear(&mut store, &mut r, "enc2d.fc", ch, cfg.emb_dim);
        let e = cfg.emb_dim;
        let head3d = [
            linear(&mut store, &mut r, "head3d.fc0", e, e),
            linear(&mut store, &mut r, "head3d.fc1", e, cfg.proj_dim),
        ];
        let head2d = [
            linear(&mut store, &mut r, "head2d.fc0", e, e),
            linear(&mut store, &mut r, "head2d.fc1", e, cfg.proj_dim),
        ];
        let mut clf = Vec::new();
        let mut prev = e;
        for (i, &h) in cfg.clf_hidden.iter().chain([&cfg.classes]).enumerate() {
            clf.push(linear(&mut store, &mut r, &format!("clf.fc{i}"), prev, h));
            prev = h;
        }
        Ok(Self {
            cfg,
            params: store,
            point_mlp,
            convs,
            image_fc,
            head3d,
            head2d,
            clf,
        })
    }

    /// Records every parameter on `tape`; frozen bindings carry no gradient.
    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound(
            self.params
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.cast::<F>();
                    c.set_requires_grad(trainable);
                    tape.leaf(&c)
                })
                .collect(),
        )
    }

    /// Adds the gradients of the bound parameters into their grad slots.
    pub fn absorb_gradients<F: Real>(&mut self, bound: &Bound, grads: &Gradients<F>) -> Result<()> {
        for (t, &v) in self.params.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                let g: Vec<f32> = g.iter().map(|x| x.f64() as f32).collect();
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn linear<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.0[l.w])?;
        tape.add(h, p.0[l.b])
    }

    fn head<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, head: &[Linear; 2], x: Var) -> Result<Var> {
        let h = self.linear(tape, p, head[0], x)?;
        let h = tape.relu(h);
        let h = self.linear(tape, p, head[1], h)?;
        Ok(tape.normalize(h))
    }

    /// Point batch as a `[B·n, 3]` constant, each cloud cyclically padded to the batch maximum.
    pub fn point_batch<F: Real>(tape: &mut Tape<F>, clouds: &[&PointCloud]) -> Result<(Var, usize)> {
        if clouds.is_empty() {
            return contract("empty point batch");
        }
        let n = clouds.iter().map(|c| c.len()).max().unwrap();
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            data.extend(c.cyclic_resize(n).iter().flatten().map(|&x| F::of(x as f64)));
        }
        Ok((tape.constant(&[clouds.len() * n, 3], data)?, n))
    }

    /// Global `[B, emb]` and projected `[B, proj]` features of a cloud batch.
    pub fn encode3d<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, clouds: &[&PointCloud]) -> Result<(Var, Var)> {
        let (mut h, n) = Self::point_batch(tape, clouds)?;
        let last = self.point_mlp.len() - 1;
        for (i, &l) in self.point_mlp.iter().enumerate() {
            h = self.linear(tape, p, l, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let h = tape.reshape(h, &[clouds.len(), n, self.cfg.emb_dim])?;
        let global = tape.max_axis(h, 1)?;
        let proj = self.head(tape, p, &self.head3d, global)?;
        Ok((global, proj))
    }

    /// Global and projected features of multi-view stacks; views are max-pooled.
    pub fn encode2d<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, stacks: &[&ImageStack]) -> Result<(Var, Var)> {
        let Some(first) = stacks.first() else {
            return contract("empty image batch");
        };
        let m = first.views();
        let size = first.params.image_size;
        if m == 0 || stacks.iter().any(|s| s.views() != m || s.params.image_size != size) {
            return dim("image stacks in a batch must share view count and size");
        }
        let data = stacks
            .iter()
            .flat_map(|s| s.images.iter().flat_map(|im| im.data.iter().map(|&x| F::of(x as f64))))
            .collect();
        let mut h = tape.constant(&[stacks.len() * m, 1, size, size], data)?;
        for c in &self.convs {
            h = tape.conv2d(h, p.0[c.w], p.0[c.b], 2, 1)?;
            h = tape.relu(h);
        }
        let s = tape.shape(h).to_vec();
        let h = tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let h = tape.sum_axis(h, 2)?;
        let h = tape.scale(h, 1.0 / (s[2] * s[3]) as f64);
        let h = self.linear(tape, p, self.image_fc, h)?;
        let h = tape.reshape(h, &[stacks.len(), m, self.cfg.emb_dim])?;
        let global = tape.max_axis(h, 1)?;
        let proj = self.head(tape, p, &self.head2d, global)?;
        Ok((global, proj))
    }

    /// Softmax class probabilities `[B, K]` from global features.
    ///
    /// With `dropout_seed`, hidden activations are masked (inverted dropout).
    pub fn classify<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, feature: Var, dropout_seed: Option<u64>) -> Result<Var> {
        let mut h = feature;
        let last = self.clf.len() - 1;
        let mut r = dropout_seed.map(|s| rng::stream(s, &[rng::tag::DROPOUT]));
        for (i, &l) in self.clf.iter().enumerate() {
            h = self.linear(tape, p, l, h)?;
            if i < last {
                h = tape.relu(h);
                if let Some(r) = r.as_mut().filter(|_| self.cfg.dropout > 0.0) {
                    let keep = 1.0 - self.cfg.dropout;
                    let n = tape.value(h).len();
                    let mask = (0..n)
                        .map(|_| if r.random::<f64>() < keep { F::of(1.0 / keep) } else { F::zero() })
                        .collect();
                    let mask = tape.constant(&tape.shape(h).to_vec(), mask)?;
                    h = tape.dropout_mask_apply(h, mask)?;
                }
            }
        }
        Ok(tape.softmax(h))
    }

    /// Deterministic inference: global features `[B, emb]` and probabilities `[B, K]`.
    pub fn predict(&self, clouds: &[&PointCloud]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let (g, _) = self.encode3d(&mut tape, &p, clouds)?;
        let probs = self.classify(&mut tape, &p, g, None)?;
        Ok((tape.tensor(g), tape.tensor(probs)))
    }

    /// Parameters as named tensors for checkpointing.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.named()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
