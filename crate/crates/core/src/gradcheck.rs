//! Central finite-difference check of the training gradients.
//!
//! Every trainable scalar is perturbed by ±eps and the resulting loss
//! difference compared with the backpropagated gradient, using
//! `|analytic − numeric| / (|numeric| + 1e-8)`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::loss::{multibox_loss, ImageTargets, DEFAULT_MATCH_THRESHOLD, DEFAULT_NEG_POS_RATIO};
use crate::network::{ArchConfig, ArchVariant, Detector, TapOutput};
use crate::params::ParamKind;
use crate::synth::{generate_dataset, SceneSpec};
use crate::tensor::Tensor;
use crate::train::{build_targets, compute_gradients};

/// Exhaustive perturbation gets too slow beyond this many parameters.
pub const MAX_PARAMS: usize = 10_000;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element within the parameter.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub num_params: usize,
    pub eps: f64,
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst: ParamCheck,
    pub params: Vec<ParamCheck>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Training-mode loss without touching the running statistics.
pub fn loss_value(det: &Detector<f64>, images: &Tensor<f64>, targets: &[ImageTargets], neg_pos_ratio: f64) -> Result<f64> {
    let mut cx = Ctx::new(&det.store, true);
    let x = cx.graph.input(images.clone());
    let taps = det.net.forward_nodes(&mut cx, x)?;
    let outputs: Vec<TapOutput<f64>> = taps
        .iter()
        .map(|t| TapOutput {
            class_logits: cx.graph.value(t.class_logits).clone(),
            box_deltas: cx.graph.value(t.box_deltas).clone(),
        })
        .collect();
    Ok(multibox_loss(&outputs, targets, det.config().num_classes, neg_pos_ratio)?.breakdown.total)
}

/// Compares analytic and numeric gradients for every trainable scalar.
/// `corrupt` scales the analytic gradient of the first parameter, to show
/// the check can fail.
pub fn finite_diff_check(
    det: &Detector<f64>,
    images: &Tensor<f64>,
    targets: &[ImageTargets],
    eps: f64,
    corrupt: bool,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let num_params = det.num_params();
    if num_params > MAX_PARAMS {
        return Err(Error::invalid(format!(
            "{num_params} trainable parameters exceeds the gradcheck limit of {MAX_PARAMS}"
        )));
    }
    let ratio = DEFAULT_NEG_POS_RATIO;
    let mut analytic = det.clone();
    let breakdown = compute_gradients(&mut analytic, images, targets, ratio)?;
    if breakdown.num_matched == 0 {
        return Err(Error::invalid("no ground truth matched a default box; the loss is constant"));
    }

    let mut probe = det.clone();
    let ids: Vec<_> = det
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut params = Vec::with_capacity(ids.len());
    for (k, id) in ids.into_iter().enumerate() {
        let p = analytic.store.get(id);
        let mut check = ParamCheck {
            name: p.name.clone(),
            numel: p.value.numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..check.numel {
            let mut a = p.grad.data()[i];
            if corrupt && k == 0 {
                a = a * 1.5 + 1e-3;
            }
            let orig = probe.store.get(id).value.data()[i];
            probe.store.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = loss_value(&probe, images, targets, ratio)?;
            probe.store.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = loss_value(&probe, images, targets, ratio)?;
            probe.store.get_mut(id).value.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * eps);
            let e = relative_error(a, n);
            if !(e <= check.max_rel_error) {
                check.max_rel_error = e;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = n;
            }
        }
        params.push(check);
    }
    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .cloned()
        .ok_or_else(|| Error::invalid("network has no trainable parameters"))?;
    Ok(GradcheckReport {
        num_params,
        eps,
        loss: breakdown.total,
        max_rel_error: worst.max_rel_error,
        worst,
        params,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Smallest full-architecture configuration used for gradient checks.
pub fn toy_config() -> ArchConfig {
    ArchConfig::new(ArchVariant::CfenetFull, 64, 3).with_widths([4, 8, 8])
}

/// Toy images and matching targets for `config`.
pub fn toy_batch(config: &ArchConfig, batch: usize, seed: u64) -> Result<(Tensor<f64>, Vec<ImageTargets>, Detector<f64>)> {
    let mut spec = SceneSpec::toy(seed);
    spec.image_size = config.input_size as u32;
    spec.categories.truncate(config.num_classes);
    for c in &mut spec.categories {
        c.weight = 1.0;
    }
    let data = generate_dataset(&spec, batch)?.samples::<f64>();
    let mut det = Detector::<f64>::new(config, seed)?;
    // residual branches start with zero batch-norm scale, which would leave
    // their weights with exactly zero gradient; move to a generic point
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667);
    for p in det.store.iter_mut() {
        if p.name.ends_with(".gamma") {
            for g in p.value.data_mut() {
                *g = rng.gen_range(0.5..1.5);
            }
        } else if p.name.ends_with(".beta") {
            for b in p.value.data_mut() {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let targets = build_targets(&det, &data, DEFAULT_MATCH_THRESHOLD)?;
    let images = Tensor::stack(&data.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    Ok((images, targets, det))
}

pub fn check_config(config: &ArchConfig, batch: usize, seed: u64, eps: f64, corrupt: bool) -> Result<GradcheckReport> {
    config.validate()?;
    let (images, targets, det) = toy_batch(config, batch, seed)?;
    finite_diff_check(&det, &images, &targets, eps, corrupt)
}
