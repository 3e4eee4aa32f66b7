//! Self-paced self-training on confident target predictions.

use std::path::Path;

use rand::seq::SliceRandom;

use super::{cls_batch, cosine_lr, predict_probs, refs, Adam, MetricsWriter, StepLosses, TrainState};
use crate::config::Config;
use crate::error::{contract, Result};
use crate::losses::loss_cls;
use crate::models::argmax;
use crate::pointcloud::{AdaptationGuard, Dataset, PointCloud};
use crate::rng::{self, tag};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct SpstRound {
    pub round: usize,
    /// Target samples above the confidence threshold.
    pub selected: usize,
    /// Whether the round was skipped for lack of confident samples.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpstSummary {
    pub threshold: f64,
    pub rounds: Vec<SpstRound>,
    pub steps: u64,
}

/// Fine-tunes encoder and classifier on source labels plus confident target pseudo-labels.
///
/// Pseudo-labels are recomputed at the start of each round; samples below
/// the threshold are left out. Metrics rows go to `metrics` if given.
pub fn spst_finetune(
    state: &mut TrainState,
    cfg: &Config,
    source: &Dataset,
    target: &Dataset,
    metrics: Option<&Path>,
) -> Result<SpstSummary> {
    cfg.validate()?;
    if !source.is_labelled() || target.is_empty() {
        return contract("self-training needs labelled source and nonempty target data");
    }
    let _guard = AdaptationGuard::enter();
    let mut writer = metrics.map(MetricsWriter::create).transpose()?;
    let mut adam = Adam::new(&state.model.params, cfg.weight_decay);
    let mut rounds = Vec::new();
    let mut steps = 0u64;
    for round in 0..cfg.spst_rounds {
        let probs = predict_probs(&state.model, &target.clouds)?;
        let mut pool: Vec<PointCloud> = source.clouds.clone();
        let mut selected = 0;
        for (c, p) in target.clouds.iter().zip(&probs) {
            let j = argmax(p);
            if p[j] as f64 >= cfg.spst_threshold {
                let mut c = c.clone();
                c.label = Some(j);
                pool.push(c);
                selected += 1;
            }
        }
        let skipped = selected == 0;
        log::info!("self-training round {round}: {selected} confident target samples");
        rounds.push(SpstRound { round, selected, skipped });
        if skipped {
            continue;
        }
        let k = cfg.batch_size.min(pool.len());
        for epoch in 0..cfg.spst_epochs {
            let lr = cosine_lr(cfg.spst_lr, epoch, cfg.spst_epochs);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[tag::SPST, round as u64, epoch as u64]));
            for b in 0..(pool.len() / k).max(1) {
                let batch: Vec<&PointCloud> = order[b * k..(b + 1) * k].iter().map(|&i| &pool[i]).collect();
                let seed = rng::derive(cfg.seed, &[tag::SPST, round as u64, epoch as u64, b as u64]);
                let (inputs, soft) = cls_batch(&batch, cfg.classes, false, seed)?;
                let mut tape = Tape::<f32>::new();
                let p = state.model.bind(&mut tape, true);
                let (g, _) = state.model.encode3d(&mut tape, &p, &refs(&inputs))?;
                let pr = state.model.classify(&mut tape, &p, g, Some(rng::derive(seed, &[tag::DROPOUT])))?;
                let soft = tape.constant(&[inputs.len(), cfg.classes], soft)?;
                let loss = loss_cls(&mut tape, pr, soft)?;
                let value = f64::from(tape.scalar(loss));
                if !value.is_finite() {
                    return Err(crate::Error::Divergence {
                        step: steps as usize,
                        what: format!("self-training loss is {value}"),
                        last_good: None,
                    });
                }
                let grads = tape.backward(loss)?;
                state.model.params.zero_grads();
                state.model.absorb_gradients(&p, &grads)?;
                adam.step(&mut state.model.params, lr)?;
                if let Some(w) = writer.as_mut() {
                    let l = StepLosses {
                        loss_cls: value,
                        total: value,
                        ..StepLosses::default()
                    };
                    w.row(steps, round * cfg.spst_epochs + epoch, &l, lr)?;
                }
                steps += 1;
            }
        }
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(SpstSummary {
        threshold: cfg.spst_threshold,
        rounds,
        steps,
    })
}
