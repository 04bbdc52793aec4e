//! Momentum SGD and the minibatch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{BBox, Target, DEFAULT_VARIANCES};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::loss::{multibox_loss, ImageTargets, LossBreakdown, DEFAULT_MATCH_THRESHOLD, DEFAULT_NEG_POS_RATIO};
use crate::network::{Detector, TapOutput};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss above which training is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loc: f64,
    pub conf: f64,
    pub total: f64,
}

fn default_ratio() -> f64 {
    DEFAULT_NEG_POS_RATIO
}
fn default_threshold() -> f64 {
    DEFAULT_MATCH_THRESHOLD
}
fn default_decay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub neg_pos_ratio: f64,
    #[serde(default = "default_threshold")]
    pub match_threshold: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub lr_steps: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    /// Optimizer steps over which the rate ramps linearly up from zero.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global L2 bound on the gradient of all trainable parameters.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Mirror each sample left-right with probability one half per visit.
    #[serde(default)]
    pub horizontal_flip: bool,
}

impl TrainSchedule {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainSchedule {
            epochs,
            batch_size,
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            neg_pos_ratio: DEFAULT_NEG_POS_RATIO,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            lr_steps: Vec::new(),
            lr_decay: default_decay(),
            warmup_steps: 0,
            clip_grad_norm: None,
            horizontal_flip: false,
        }
    }

    /// The schedule used for the ablations: a tenfold rate drop after two
    /// thirds of the epochs, 200 warmup steps, gradient norm clipped at 5
    /// and random horizontal flips.
    pub fn standard(epochs: usize, seed: u64) -> Self {
        TrainSchedule {
            lr_steps: vec![epochs * 2 / 3],
            lr_decay: 0.1,
            warmup_steps: 200,
            clip_grad_norm: Some(5.0),
            horizontal_flip: true,
            ..Self::new(epochs, 16, 0.02, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        // a zero rate is allowed so that frozen runs can be traced
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be ≥ 0"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("clip_grad_norm {c} must be positive")));
            }
        }
        if !(self.neg_pos_ratio >= 0.0) {
            return Err(Error::invalid("neg_pos_ratio must be ≥ 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: TrainSchedule = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "training config",
            detail: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }

    /// Rate for the optimizer step with global index `step` (from 0).
    pub fn learning_rate_at_step(&self, epoch: usize, step: usize) -> f64 {
        let lr = self.learning_rate_at(epoch);
        if step < self.warmup_steps {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            for g in p.grad.data_mut() {
                *g = *g * k;
            }
        }
    }
    norm
}

/// Velocity buffers and incident counts of the optimizer.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T> {
    velocity: Vec<Vec<T>>,
    pub rejected_steps: usize,
}

/// One momentum-SGD update with decoupled weight decay:
/// `v ← μv + g`, `p ← p − lr·v − lr·λ·p`. Buffers are never touched.
/// Returns `false`, leaving parameters and velocity untouched, if any
/// gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> bool {
    let finite = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .all(|(_, p)| p.grad.all_finite());
    if !finite {
        state.rejected_steps += 1;
        return false;
    }
    if state.velocity.len() != store.len() {
        state.velocity = store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (p, v) in store.iter_mut().zip(&mut state.velocity) {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = p.grad.data();
        let mut values = p.value.data().to_vec();
        for ((w, vi), &gi) in values.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi;
            *w = *w - lr * *vi - lr * wd * *w;
        }
        p.value.data_mut().copy_from_slice(&values);
    }
    true
}

/// One training image: a `(1, 3, S, S)` tensor and its labelled boxes.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub gts: Vec<Target<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<EpochLoss>,
    pub steps: usize,
    pub rejected_steps: usize,
    /// Batches without a single matched default; their loss is zero.
    pub empty_batches: usize,
}

impl<T: Scalar> Sample<T> {
    /// Left-right mirror image with its boxes reflected to match.
    pub fn flipped(&self) -> Sample<T> {
        let w = self.image.w();
        let img = &self.image;
        let width = T::of(w as f64);
        Sample {
            image: Tensor::from_fn(img.shape(), |n, c, y, x| img.at(n, c, y, w - 1 - x)),
            gts: self
                .gts
                .iter()
                .map(|t| Target {
                    bbox: BBox {
                        x_min: width - t.bbox.x_max,
                        x_max: width - t.bbox.x_min,
                        ..t.bbox
                    },
                    label: t.label,
                })
                .collect(),
        }
    }
}

/// Forward, loss and backward for one batch; parameter gradients are left
/// in the store.
pub fn compute_gradients<T: Scalar>(
    det: &mut Detector<T>,
    images: &Tensor<T>,
    targets: &[ImageTargets],
    neg_pos_ratio: f64,
) -> Result<LossBreakdown> {
    let num_classes = det.config().num_classes;
    let (breakdown, updates) = {
        let mut cx = Ctx::new(&det.store, true);
        let x = cx.graph.input(images.clone());
        let taps = det.net.forward_nodes(&mut cx, x)?;
        let outputs: Vec<TapOutput<T>> = taps
            .iter()
            .map(|t| TapOutput {
                class_logits: cx.graph.value(t.class_logits).clone(),
                box_deltas: cx.graph.value(t.box_deltas).clone(),
            })
            .collect();
        let loss = multibox_loss(&outputs, targets, num_classes, neg_pos_ratio)?;
        let seeds = taps
            .iter()
            .zip(loss.grads)
            .flat_map(|(t, g)| [(t.class_logits, g.class_logits), (t.box_deltas, g.box_deltas)])
            .collect();
        let grads = cx.graph.backward_from(seeds)?;
        // gradients go into the store only after the tape releases it
        (loss.breakdown, (grads, std::mem::take(&mut cx.bn_updates)))
    };
    let (grads, bn) = updates;
    det.store.zero_grads();
    grads.accumulate_into(&mut det.store);
    det.apply_bn_updates(&bn);
    Ok(breakdown)
}

/// Precomputes matching targets for every sample at the configured size.
pub fn build_targets<T: Scalar>(
    det: &Detector<T>,
    data: &[Sample<T>],
    threshold: f64,
) -> Result<Vec<ImageTargets>> {
    let s = det.config().input_size;
    let defaults = det.config().default_boxes::<T>(s, s)?;
    data.iter()
        .map(|d| ImageTargets::build(&defaults, &d.gts, threshold, DEFAULT_VARIANCES))
        .collect()
}

pub fn train<T: Scalar>(
    det: &mut Detector<T>,
    data: &[Sample<T>],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    train_with(det, data, schedule, |_| {})
}

/// Trains in place. Shuffling is seeded from `schedule.seed`; the epoch loss
/// is the mean over batches.
pub fn train_with<T: Scalar>(
    det: &mut Detector<T>,
    data: &[Sample<T>],
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainReport> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let s = det.config().input_size;
    if let Some(bad) = data.iter().find(|d| d.image.shape() != [1, 3, s, s]) {
        return Err(Error::shape(
            "train",
            format!("sample shape {:?}, expected [1, 3, {s}, {s}]", bad.image.shape()),
        ));
    }
    let targets = build_targets(det, data, schedule.match_threshold)?;
    let mirrored: Vec<Sample<T>> = if schedule.horizontal_flip {
        data.iter().map(Sample::flipped).collect()
    } else {
        Vec::new()
    };
    let mirrored_targets = build_targets(det, &mirrored, schedule.match_threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = SgdState::default();
    let mut report = TrainReport::default();

    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let (mut loc, mut conf, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            let flip: Vec<bool> = chunk.iter().map(|_| schedule.horizontal_flip && rng.gen_bool(0.5)).collect();
            let images: Vec<&Tensor<T>> = chunk
                .iter()
                .zip(&flip)
                .map(|(&i, &f)| if f { &mirrored[i].image } else { &data[i].image })
                .collect();
            let batch = Tensor::stack(&images)?;
            let tg: Vec<ImageTargets> = chunk
                .iter()
                .zip(&flip)
                .map(|(&i, &f)| if f { mirrored_targets[i].clone() } else { targets[i].clone() })
                .collect();
            let b = compute_gradients(det, &batch, &tg, schedule.neg_pos_ratio)?;
            if !b.total.is_finite() || b.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    loss: b.total,
                    trace: report.trace,
                });
            }
            if b.num_matched == 0 {
                report.empty_batches += 1;
            }
            if let Some(c) = schedule.clip_grad_norm {
                clip_gradients(&mut det.store, c);
            }
            let lr = schedule.learning_rate_at_step(epoch, report.steps);
            if sgd_step(&mut det.store, &mut state, lr, schedule.momentum, schedule.weight_decay) {
                report.steps += 1;
            }
            loc += b.loc;
            conf += b.conf;
            batches += 1;
        }
        let n = batches as f64;
        let e = EpochLoss {
            epoch,
            loc: loc / n,
            conf: conf / n,
            total: (loc + conf) / n,
        };
        on_epoch(&e);
        report.trace.push(e);
    }
    report.rejected_steps = state.rejected_steps;
    Ok(report)
}

pub fn write_loss_trace<W: Write>(w: &mut W, trace: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(w, "epoch,loc,conf,total")?;
    for e in trace {
        writeln!(w, "{},{},{},{}", e.epoch, e.loc, e.conf, e.total)?;
    }
    Ok(())
}
