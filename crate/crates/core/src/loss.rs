//! Multibox objective: smooth-L1 box regression plus softmax cross-entropy
//! with hard negative mining, and its gradient with respect to the raw head
//! outputs.

use crate::anchors::{encode_box, match_anchors, DefaultBoxSet, MatchAssignment, Target};
use crate::error::{Error, Result};
use crate::network::TapOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub num_matched: usize,
}

/// Per-default training targets of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    /// `0` is background.
    pub labels: Vec<usize>,
    /// Encoded box targets; zero for unmatched defaults.
    pub deltas: Vec<[f64; 4]>,
}

impl ImageTargets {
    pub fn from_assignment<T: Scalar>(
        defaults: &DefaultBoxSet<T>,
        assignment: &MatchAssignment,
        gts: &[Target<T>],
        variances: [f64; 4],
    ) -> Result<Self> {
        let mut deltas = vec![[0.0; 4]; defaults.len()];
        for (d, m) in assignment.matched_gt.iter().enumerate() {
            if let Some(g) = *m {
                let gt = gts[g].bbox.cast::<f64>();
                let db = defaults.boxes[d].cast::<f64>();
                deltas[d] = encode_box(&gt, &db, variances)?;
            }
        }
        Ok(ImageTargets {
            labels: assignment.labels.clone(),
            deltas,
        })
    }

    pub fn build<T: Scalar>(
        defaults: &DefaultBoxSet<T>,
        gts: &[Target<T>],
        threshold: f64,
        variances: [f64; 4],
    ) -> Result<Self> {
        let m = match_anchors(defaults, gts, threshold)?;
        Self::from_assignment(defaults, &m, gts, variances)
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Head outputs of one image laid out per default box, in default-box order
/// (tap, row, column, anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPredictions {
    pub num_classes: usize,
    /// `D × (num_classes + 1)` logits.
    pub logits: Vec<f64>,
    /// `D × 4` deltas.
    pub deltas: Vec<f64>,
}

impl FlatPredictions {
    pub fn len(&self) -> usize {
        self.deltas.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn logits_of(&self, d: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.logits[d * k..(d + 1) * k]
    }

    pub fn deltas_of(&self, d: usize) -> [f64; 4] {
        let s = &self.deltas[d * 4..d * 4 + 4];
        [s[0], s[1], s[2], s[3]]
    }
}

fn anchors_in<T: Scalar>(t: &TapOutput<T>, num_classes: usize) -> Result<usize> {
    let k = num_classes + 1;
    let c = t.class_logits.c();
    if c % k != 0 || t.box_deltas.c() != 4 * (c / k) {
        return Err(Error::shape(
            "head outputs",
            format!("class channels {c}, box channels {} for {num_classes} classes", t.box_deltas.c()),
        ));
    }
    Ok(c / k)
}

/// Gathers image `n` of batched head outputs into per-default rows.
pub fn flatten_predictions<T: Scalar>(
    outputs: &[TapOutput<T>],
    n: usize,
    num_classes: usize,
) -> Result<FlatPredictions> {
    let k = num_classes + 1;
    let mut logits = Vec::new();
    let mut deltas = Vec::new();
    for t in outputs {
        let a = anchors_in(t, num_classes)?;
        let (h, w) = (t.class_logits.h(), t.class_logits.w());
        for i in 0..h {
            for j in 0..w {
                for ai in 0..a {
                    for c in 0..k {
                        logits.push(t.class_logits.at(n, ai * k + c, i, j).as_f64());
                    }
                    for c in 0..4 {
                        deltas.push(t.box_deltas.at(n, ai * 4 + c, i, j).as_f64());
                    }
                }
            }
        }
    }
    Ok(FlatPredictions {
        num_classes,
        logits,
        deltas,
    })
}

/// Inverse of [`flatten_predictions`]: writes per-default rows of image `n`
/// into tensors shaped like `outputs`.
fn scatter_into<T: Scalar>(
    grads: &mut [TapOutput<T>],
    n: usize,
    num_classes: usize,
    d_logits: &[f64],
    d_deltas: &[f64],
) {
    let k = num_classes + 1;
    let mut d = 0;
    for t in grads {
        let a = t.class_logits.c() / k;
        let (h, w) = (t.class_logits.h(), t.class_logits.w());
        for i in 0..h {
            for j in 0..w {
                for ai in 0..a {
                    for c in 0..k {
                        t.class_logits.set(n, ai * k + c, i, j, T::of(d_logits[d * k + c]));
                    }
                    for c in 0..4 {
                        t.box_deltas.set(n, ai * 4 + c, i, j, T::of(d_deltas[d * 4 + c]));
                    }
                    d += 1;
                }
            }
        }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Chooses up to `ratio · |positives|` non-positive entries with the highest
/// loss, ties going to the lower index.
pub fn hard_negative_mining(conf_loss: &[f64], positives: &[bool], ratio: f64) -> Result<Vec<bool>> {
    if !(ratio >= 0.0) {
        return Err(Error::invalid(format!("negative/positive ratio {ratio} must be ≥ 0")));
    }
    if conf_loss.len() != positives.len() {
        return Err(Error::shape("hard_negative_mining", "loss and mask lengths differ"));
    }
    let num_pos = positives.iter().filter(|&&p| p).count();
    let mut negatives: Vec<usize> = (0..conf_loss.len()).filter(|&i| !positives[i]).collect();
    let quota = ((ratio * num_pos as f64).floor() as usize).min(negatives.len());
    negatives.sort_by(|&a, &b| conf_loss[b].total_cmp(&conf_loss[a]).then(a.cmp(&b)));
    let mut mask = vec![false; conf_loss.len()];
    for &i in &negatives[..quota] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` with respect to each head output.
    pub grads: Vec<TapOutput<T>>,
}

/// Batch multibox loss. Both terms are summed over the batch and divided by
/// the total number of matched defaults; with no matches the loss is zero.
pub fn multibox_loss<T: Scalar>(
    outputs: &[TapOutput<T>],
    targets: &[ImageTargets],
    num_classes: usize,
    neg_pos_ratio: f64,
) -> Result<LossOutput<T>> {
    if !(neg_pos_ratio >= 0.0) {
        return Err(Error::invalid(format!("negative/positive ratio {neg_pos_ratio} must be ≥ 0")));
    }
    let batch = outputs.first().map_or(0, |t| t.class_logits.n());
    if batch != targets.len() {
        return Err(Error::shape(
            "multibox_loss",
            format!("{batch} images of predictions but {} target sets", targets.len()),
        ));
    }
    let mut grads: Vec<TapOutput<T>> = outputs
        .iter()
        .map(|t| TapOutput {
            class_logits: Tensor::zeros(t.class_logits.shape()),
            box_deltas: Tensor::zeros(t.box_deltas.shape()),
        })
        .collect();
    let num_matched: usize = targets.iter().map(|t| t.num_positive()).sum();
    if num_matched == 0 {
        return Ok(LossOutput {
            breakdown: LossBreakdown::default(),
            grads,
        });
    }
    let norm = num_matched as f64;
    let k = num_classes + 1;
    let (mut loc, mut conf) = (0.0, 0.0);
    for (n, tg) in targets.iter().enumerate() {
        let p = flatten_predictions(outputs, n, num_classes)?;
        let nd = p.len();
        if tg.labels.len() != nd {
            return Err(Error::shape(
                "multibox_loss",
                format!("{nd} predicted defaults but {} targets", tg.labels.len()),
            ));
        }
        let mut d_logits = vec![0.0; nd * k];
        let mut d_deltas = vec![0.0; nd * 4];

        let positives: Vec<bool> = tg.labels.iter().map(|&l| l > 0).collect();
        let mut lse = vec![0.0; nd];
        let mut background_loss = vec![0.0; nd];
        for d in 0..nd {
            let z = p.logits_of(d);
            lse[d] = log_sum_exp(z);
            background_loss[d] = lse[d] - z[0];
        }
        let negatives = hard_negative_mining(&background_loss, &positives, neg_pos_ratio)?;

        for d in 0..nd {
            if !(positives[d] || negatives[d]) {
                continue;
            }
            let z = p.logits_of(d);
            let label = tg.labels[d];
            conf += lse[d] - z[label];
            for c in 0..k {
                let soft = (z[c] - lse[d]).exp();
                let onehot = if c == label { 1.0 } else { 0.0 };
                d_logits[d * k + c] = (soft - onehot) / norm;
            }
            if positives[d] {
                let pred = p.deltas_of(d);
                for c in 0..4 {
                    let r = pred[c] - tg.deltas[d][c];
                    loc += smooth_l1(r);
                    d_deltas[d * 4 + c] = smooth_l1_grad(r) / norm;
                }
            }
        }
        scatter_into(&mut grads, n, num_classes, &d_logits, &d_deltas);
    }
    let (loc, conf) = (loc / norm, conf / norm);
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: loc + conf,
            loc,
            conf,
            num_matched,
        },
        grads,
    })
}
