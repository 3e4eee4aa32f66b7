//! Joint contrastive, multi-modal, transport and classification training.
//!
//! Each step draws a source and a target batch independently, couples them
//! with a transport plan computed from detached features, and takes one
//! Adam step on the sum of the enabled losses. Target labels are never
//! touched: training runs under an [`AdaptationGuard`].

mod optim;
mod spst;

pub use optim::{cosine_lr, Adam};
pub use spst::{spst_finetune, SpstRound, SpstSummary};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::Config;
use crate::error::{contract, Error, Result};
use crate::losses::{loss_3d, loss_cls, loss_mm, loss_total};
use crate::models::{argmax, checkpoint, Model};
use crate::ot::{cost_matrix, loss_ot, solve, uniform_marginal};
use crate::par;
use crate::pointcloud::{augment, pcm_mixup, AdaptationGuard, AugmentationSpec, Dataset, PointCloud};
use crate::renderer::{render_multiview, ImageStack};
use crate::rng::{self, tag};
use crate::tensor::{Tape, Tensor, Var};

pub const METRICS_HEADER: &str = "step,epoch,loss_3d,loss_mm,loss_ot,loss_cls,loss_total,lr";

/// Model, optimizer and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_val: f64,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::new(cfg.model(), cfg.seed)?;
        let adam = Adam::new(&model.params, cfg.weight_decay);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            step: 0,
            best_val: f64::NEG_INFINITY,
        })
    }

    fn named(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.model.named_parameters();
        out.extend(self.adam.named(&self.model.params));
        for (k, v) in [
            ("state.epoch", self.epoch as f32),
            ("state.step", self.step as f32),
            ("state.adam_t", self.adam.t as f32),
            ("state.best_val", self.best_val as f32),
        ] {
            out.push((k.to_string(), Tensor::scalar(v)));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named())
    }

    /// Restores a checkpoint written by [`TrainState::save`]; parameter-only files reset the optimizer.
    pub fn load(cfg: &Config, path: &Path) -> Result<Self> {
        let named = checkpoint::load(path)?;
        let mut st = Self::new(cfg)?;
        st.model.params.load_named(&named)?;
        let scalar = |k: &str| named.iter().find(|(n, _)| n == k).map(|(_, t)| t.data()[0]);
        if let Some(t) = scalar("state.adam_t") {
            st.adam.load_named(&st.model.params, &named, t as u64)?;
            st.epoch = scalar("state.epoch").unwrap_or(0.0) as usize;
            st.step = scalar("state.step").unwrap_or(0.0) as u64;
            st.best_val = scalar("state.best_val").map_or(f64::NEG_INFINITY, f64::from);
        }
        Ok(st)
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_3d: f64,
    pub loss_mm: f64,
    pub loss_ot: f64,
    pub loss_cls: f64,
    pub total: f64,
}

/// Training clouds with their multi-view renderings.
pub struct Domain<'a> {
    pub data: &'a Dataset,
    pub images: Vec<ImageStack>,
}

impl<'a> Domain<'a> {
    /// Renders every cloud once; renderings are reused across epochs.
    pub fn render(data: &'a Dataset, cfg: &Config) -> Result<Self> {
        let (rig, params) = (cfg.rig()?, cfg.render());
        let images = if cfg.use_mm {
            par::map_slice(&data.clouds, |c| render_multiview(c, &rig, &params))
                .into_iter()
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { data, images })
    }
}

fn augmented(clouds: &[&PointCloud], spec: &AugmentationSpec, seed: u64, purpose: u64) -> Result<Vec<PointCloud>> {
    let idx: Vec<usize> = (0..clouds.len()).collect();
    par::map_slice(&idx, |&i| augment(clouds[i], spec, rng::derive(seed, &[purpose, i as u64])))
        .into_iter()
        .collect()
}

fn one_hot(tape: &mut Tape<f32>, labels: &[usize], classes: usize) -> Result<Var> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    tape.constant(&[labels.len(), classes], data)
}

fn refs(v: &[PointCloud]) -> Vec<&PointCloud> {
    v.iter().collect()
}

/// Classification inputs for a labelled batch: point mixup pairs or augmented clouds.
pub(crate) fn cls_batch(
    clouds: &[&PointCloud],
    classes: usize,
    mixup: bool,
    seed: u64,
) -> Result<(Vec<PointCloud>, Vec<f32>)> {
    let aug = augmented(clouds, &AugmentationSpec::classifier(), seed, tag::AUG_CLS)?;
    if !mixup {
        let mut soft = vec![0.0f32; clouds.len() * classes];
        for (i, c) in aug.iter().enumerate() {
            let l = c.label.ok_or_else(|| Error::Contract("classification needs labels".into()))?;
            soft[i * classes + l] = 1.0;
        }
        return Ok((aug, soft));
    }
    let mut r = rng::stream(seed, &[tag::MIXUP]);
    let mut partner: Vec<usize> = (0..clouds.len()).collect();
    partner.shuffle(&mut r);
    let lambdas: Vec<f64> = (0..clouds.len()).map(|_| r.random::<f64>()).collect();
    let idx: Vec<usize> = (0..clouds.len()).collect();
    let pairs = par::map_slice(&idx, |&i| {
        let (a, b) = (&aug[i], &aug[partner[i]]);
        let n = a.len().min(b.len());
        let (a, b) = (a.with_points(a.cyclic_resize(n))?, b.with_points(b.cyclic_resize(n))?);
        pcm_mixup(&a, &b, lambdas[i], classes, rng::derive(seed, &[tag::MIXUP, i as u64]))
    });
    let mut mixed = Vec::with_capacity(clouds.len());
    let mut soft = Vec::with_capacity(clouds.len() * classes);
    for p in pairs {
        let (c, s) = p?;
        mixed.push(c);
        soft.extend(s);
    }
    Ok((mixed, soft))
}

fn zero(tape: &mut Tape<f32>) -> Result<Var> {
    tape.constant(&[1], vec![0.0])
}

/// One optimizer step on the given source and target batch indices.
pub fn train_step(
    state: &mut TrainState,
    cfg: &Config,
    source: &Domain,
    target: &Domain,
    src_idx: &[usize],
    tgt_idx: &[usize],
    lr: f64,
) -> Result<StepLosses> {
    if src_idx.is_empty() || tgt_idx.is_empty() {
        return contract("empty training batch");
    }
    let seed = rng::derive(cfg.seed, &[tag::SHUFFLE, state.step]);
    let model = &state.model;
    let mut tape = Tape::<f32>::new();
    let p = model.bind(&mut tape, true);
    let spec = AugmentationSpec::default();

    let (mut l3d, mut lmm) = (zero(&mut tape)?, zero(&mut tape)?);
    if cfg.use_3d || cfg.use_mm {
        for (d, dom, idx) in [(0u64, source, src_idx), (1, target, tgt_idx)] {
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &dom.data.clouds[i]).collect();
            let s = rng::derive(seed, &[d]);
            let a1 = augmented(&clouds, &spec, s, tag::AUG1)?;
            let a2 = augmented(&clouds, &spec, s, tag::AUG2)?;
            let (_, z1) = model.encode3d(&mut tape, &p, &refs(&a1))?;
            let (_, z2) = model.encode3d(&mut tape, &p, &refs(&a2))?;
            if cfg.use_3d {
                let l = loss_3d(&mut tape, z1, z2, cfg.tau, cfg.exclude_self_sim)?;
                l3d = tape.add(l3d, l)?;
            }
            if cfg.use_mm {
                let stacks: Vec<&ImageStack> = idx.iter().map(|&i| &dom.images[i]).collect();
                let (_, zi) = model.encode2d(&mut tape, &p, &stacks)?;
                let l = loss_mm(&mut tape, z1, z2, zi, cfg.tau, cfg.exclude_self_sim)?;
                lmm = tape.add(lmm, l)?;
            }
        }
    }

    let mut lot = zero(&mut tape)?;
    if cfg.use_ot {
        let src: Vec<&PointCloud> = src_idx.iter().map(|&i| &source.data.clouds[i]).collect();
        let tgt: Vec<&PointCloud> = tgt_idx.iter().map(|&i| &target.data.clouds[i]).collect();
        let labels: Vec<usize> = src
            .iter()
            .map(|c| c.label.ok_or_else(|| Error::Contract("source clouds need labels".into())))
            .collect::<Result<_>>()?;
        let (zs, _) = model.encode3d(&mut tape, &p, &src)?;
        let (zt, _) = model.encode3d(&mut tape, &p, &tgt)?;
        let gt = model.classify(&mut tape, &p, zt, None)?;
        let ys = one_hot(&mut tape, &labels, cfg.classes)?;
        // the coupling sees detached values only
        let cost = cost_matrix(
            &tape.tensor(zs),
            &tape.tensor(ys),
            &tape.tensor(zt),
            &tape.tensor(gt),
            cfg.alpha,
            cfg.beta,
        )?;
        let psi = solve(&cost, &uniform_marginal(src.len()), &uniform_marginal(tgt.len()), &cfg.ot())?;
        lot = loss_ot(&mut tape, &psi, zs, ys, zt, gt, cfg.alpha, cfg.beta)?;
    }

    let mut lcls = zero(&mut tape)?;
    if cfg.use_cls {
        let src: Vec<&PointCloud> = src_idx.iter().map(|&i| &source.data.clouds[i]).collect();
        let (inputs, soft) = cls_batch(&src, cfg.classes, cfg.mixup, seed)?;
        let (g, _) = model.encode3d(&mut tape, &p, &refs(&inputs))?;
        let probs = model.classify(&mut tape, &p, g, Some(rng::derive(seed, &[tag::DROPOUT])))?;
        let soft = tape.constant(&[inputs.len(), cfg.classes], soft)?;
        lcls = loss_cls(&mut tape, probs, soft)?;
    }

    let total = loss_total(&mut tape, [l3d, lmm, lot, lcls]).map_err(|e| match e {
        Error::Divergence { what, .. } => Error::Divergence {
            step: state.step as usize,
            what,
            last_good: None,
        },
        other => other,
    })?;
    let grads = tape.backward(total)?;
    state.model.params.zero_grads();
    state.model.absorb_gradients(&p, &grads)?;
    state.adam.step(&mut state.model.params, lr)?;
    state.step += 1;
    Ok(StepLosses {
        loss_3d: f64::from(tape.scalar(l3d)),
        loss_mm: f64::from(tape.scalar(lmm)),
        loss_ot: f64::from(tape.scalar(lot)),
        loss_cls: f64::from(tape.scalar(lcls)),
        total: f64::from(tape.scalar(total)),
    })
}

/// Top-1 accuracy of `model` on a labelled dataset.
pub fn source_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if !data.is_labelled() || data.is_empty() {
        return contract("validation needs a nonempty labelled dataset");
    }
    let preds = predict_labels(model, &data.clouds)?;
    let hits = preds.iter().zip(&data.clouds).filter(|(p, c)| c.label == Some(**p)).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Class probabilities in chunks of 64 clouds.
pub fn predict_probs(model: &Model, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(64) {
        let (_, probs) = model.predict(&refs(chunk))?;
        out.extend((0..probs.rows()).map(|i| probs.row(i).to_vec()));
    }
    Ok(out)
}

pub fn predict_labels(model: &Model, clouds: &[PointCloud]) -> Result<Vec<usize>> {
    Ok(predict_probs(model, clouds)?.iter().map(|p| argmax(p)).collect())
}

/// Appends metric rows in the fixed CSV layout.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, step: u64, epoch: usize, l: &StepLosses, lr: f64) -> Result<()> {
        writeln!(
            self.out,
            "{step},{epoch},{},{},{},{},{},{lr}",
            l.loss_3d, l.loss_mm, l.loss_ot, l.loss_cls, l.total
        )?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Files and scores produced by [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_val: f64,
    pub steps: u64,
}

pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

/// Batch size actually used for a pair of datasets.
pub fn effective_batch(cfg: &Config, source: &Dataset, target: &Dataset) -> usize {
    cfg.batch_size.min(source.len()).min(target.len()).max(1)
}

fn epoch_order(n: usize, seed: u64, epoch: usize, which: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64, which]));
    order
}

/// Trains from scratch for `cfg.epochs` epochs.
///
/// Writes `metrics.csv`, `best.ckpt` (highest source validation accuracy,
/// or the latest epoch without a validation set) and `final.ckpt` into `out`.
pub fn fit(cfg: &Config, source: &Dataset, target: &Dataset, source_val: Option<&Dataset>, out: &Path) -> Result<FitSummary> {
    cfg.validate()?;
    if !source.is_labelled() || source.is_empty() || target.is_empty() {
        return contract("training needs a labelled source set and a nonempty target set");
    }
    if source.classes != cfg.classes {
        return contract(format!("dataset has {} classes, config {}", source.classes, cfg.classes));
    }
    let _guard = AdaptationGuard::enter();
    std::fs::create_dir_all(out)?;
    let (best_path, final_path, metrics_path) = (out.join(BEST_CKPT), out.join(FINAL_CKPT), out.join(METRICS_CSV));
    let src = Domain::render(source, cfg)?;
    let tgt = Domain::render(target, cfg)?;
    let k = effective_batch(cfg, source, target);
    let steps_per_epoch = (source.len() / k).max(1);
    let mut state = TrainState::new(cfg)?;
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut have_best = false;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let s_order = epoch_order(source.len(), cfg.seed, epoch, 0);
        let t_order = epoch_order(target.len(), cfg.seed, epoch, 1);
        for b in 0..steps_per_epoch {
            let si = &s_order[b * k..(b + 1) * k];
            let ti: Vec<usize> = (0..k).map(|j| t_order[(b * k + j) % target.len()]).collect();
            let losses = train_step(&mut state, cfg, &src, &tgt, si, &ti, lr).map_err(|e| match e {
                Error::Divergence { step, what, .. } => Error::Divergence {
                    step,
                    what,
                    last_good: have_best.then(|| best_path.clone()),
                },
                other => other,
            })?;
            metrics.row(state.step - 1, epoch, &losses, lr)?;
        }
        state.epoch = epoch + 1;
        let val = match source_val {
            Some(v) => source_accuracy(&state.model, v)?,
            None => epoch as f64,
        };
        log::info!("epoch {epoch}: source validation {val:.4}");
        if val > state.best_val {
            state.best_val = val;
            state.save(&best_path)?;
            have_best = true;
        }
    }
    metrics.finish()?;
    state.save(&final_path)?;
    Ok(FitSummary {
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        metrics: metrics_path,
        best_val: state.best_val,
        steps: state.step,
    })
}
