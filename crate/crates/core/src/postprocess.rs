//! Score filtering, class-wise hard NMS, and single- and multi-scale
//! inference.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, iou, BBox, DEFAULT_VARIANCES};
use crate::error::{Error, Result};
use crate::loss::flatten_predictions;
use crate::network::Detector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox<f64>,
    /// Class index, `1..=num_classes`.
    pub category: usize,
    pub score: f64,
}

fn default_scales() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
}

impl Default for InferenceParams {
    fn default() -> Self {
        InferenceParams {
            score_threshold: 0.01,
            nms_iou: 0.45,
            max_detections: 100,
            scales: default_scales(),
        }
    }
}

impl InferenceParams {
    pub const MULTI_SCALE: [f64; 3] = [0.75, 1.0, 1.5];

    pub fn with_scales(mut self, scales: &[f64]) -> Self {
        self.scales = scales.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::invalid(format!("nms_iou {} outside (0, 1)", self.nms_iou)));
        }
        if self.scales.is_empty() {
            return Err(Error::invalid("at least one inference scale is required"));
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("inference scale {s} must be positive")));
        }
        Ok(())
    }
}

/// Greedy hard NMS. Returns kept indices from highest to lowest score;
/// equal scores are visited in index order. A box is suppressed when its IoU
/// with an already kept box exceeds `iou_thresh`.
pub fn nms_hard(boxes: &[BBox<f64>], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Per-category NMS followed by a global top-`max_detections` cut. Output is
/// sorted by descending score, ties keeping input order.
pub fn classwise_nms(dets: &[Detection], iou_thresh: f64, max_detections: usize) -> Vec<Detection> {
    let mut cats: Vec<usize> = dets.iter().map(|d| d.category).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut kept = Vec::new();
    for c in cats {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == c).collect();
        let boxes: Vec<BBox<f64>> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        kept.extend(nms_hard(&boxes, &scores, iou_thresh).into_iter().map(|k| idx[k]));
    }
    kept.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    kept.truncate(max_detections);
    kept.into_iter().map(|i| dets[i]).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Runs the network on a batch whose spatial size is a multiple of 32 and
/// returns, per image, candidates above threshold after class-wise NMS.
/// Boxes are clipped to `valid` (height, width) before NMS.
fn detect_raw<T: Scalar>(
    det: &Detector<T>,
    batch: &Tensor<T>,
    valid: (usize, usize),
    params: &InferenceParams,
) -> Result<Vec<Vec<Detection>>> {
    let cfg = det.config();
    let (h, w) = (batch.h(), batch.w());
    let defaults = cfg.default_boxes::<f64>(h, w)?;
    let outputs = det.forward_any(batch)?;
    let k = cfg.num_classes;
    let mut result = Vec::with_capacity(batch.n());
    for n in 0..batch.n() {
        let p = flatten_predictions(&outputs, n, k)?;
        let mut cands = Vec::new();
        for d in 0..p.len() {
            let probs = softmax(p.logits_of(d));
            let mut decoded = None;
            for (c, &score) in probs.iter().enumerate().skip(1) {
                if score > params.score_threshold {
                    let b = *decoded.get_or_insert_with(|| {
                        decode_box(p.deltas_of(d), &defaults.boxes[d], DEFAULT_VARIANCES)
                            .clip(valid.1 as f64, valid.0 as f64)
                    });
                    cands.push(Detection {
                        bbox: b,
                        category: c,
                        score,
                    });
                }
            }
        }
        result.push(classwise_nms(&cands, params.nms_iou, params.max_detections));
    }
    Ok(result)
}

/// Detections for each image of an `(N, 3, S, S)` batch at the network's
/// own input size.
pub fn detect_batch<T: Scalar>(
    det: &Detector<T>,
    batch: &Tensor<T>,
    params: &InferenceParams,
) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    let s = det.config().input_size;
    if batch.h() != s || batch.w() != s {
        return Err(Error::shape(
            "detect",
            format!("image {}×{} but network expects {s}×{s}", batch.h(), batch.w()),
        ));
    }
    detect_raw(det, batch, (s, s), params)
}

pub fn detect_single_scale<T: Scalar>(
    det: &Detector<T>,
    image: &Tensor<T>,
    params: &InferenceParams,
) -> Result<Vec<Detection>> {
    if image.n() != 1 {
        return Err(Error::shape("detect", "expected a single image"));
    }
    Ok(detect_batch(det, image, params)?.pop().unwrap())
}

/// Nearest-neighbour resize to `(h, w)` followed by zero padding on the
/// bottom and right up to `(ph, pw)`.
pub fn resize_nearest_padded<T: Scalar>(img: &Tensor<T>, h: usize, w: usize, ph: usize, pw: usize) -> Tensor<T> {
    let [n, c, ih, iw] = img.shape();
    Tensor::from_fn([n, c, ph, pw], |ni, ci, y, x| {
        if y < h && x < w {
            img.at(ni, ci, y * ih / h, x * iw / w)
        } else {
            T::zero()
        }
    })
}

fn scaled_len(len: usize, s: f64) -> Result<usize> {
    let v = len as f64 * s;
    if (v - v.round()).abs() > 1e-9 || v.round() < 1.0 {
        return Err(Error::invalid(format!("scale {s} does not map size {len} to a whole pixel count")));
    }
    Ok(v.round() as usize)
}

/// Runs every scale in `params.scales`, maps boxes back by the inverse scale,
/// pools the results in scale order and applies one final class-wise NMS.
pub fn detect_multi_scale_batch<T: Scalar>(
    det: &Detector<T>,
    batch: &Tensor<T>,
    params: &InferenceParams,
) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    let s = det.config().input_size;
    if batch.h() != s || batch.w() != s {
        return Err(Error::shape(
            "detect",
            format!("image {}×{} but network expects {s}×{s}", batch.h(), batch.w()),
        ));
    }
    let mut pooled: Vec<Vec<Detection>> = vec![Vec::new(); batch.n()];
    for &scale in &params.scales {
        let (h, w) = (scaled_len(s, scale)?, scaled_len(s, scale)?);
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        let resized = resize_nearest_padded(batch, h, w, ph, pw);
        let per_image = detect_raw(det, &resized, (h, w), params)?;
        for (acc, dets) in pooled.iter_mut().zip(per_image) {
            let inv = 1.0 / scale;
            acc.extend(dets.into_iter().map(|d| Detection {
                bbox: d.bbox.scale(inv).clip(s as f64, s as f64),
                ..d
            }));
        }
    }
    Ok(pooled
        .iter()
        .map(|d| classwise_nms(d, params.nms_iou, params.max_detections))
        .collect())
}

pub fn detect_multi_scale<T: Scalar>(
    det: &Detector<T>,
    image: &Tensor<T>,
    params: &InferenceParams,
) -> Result<Vec<Detection>> {
    if image.n() != 1 {
        return Err(Error::shape("detect", "expected a single image"));
    }
    Ok(detect_multi_scale_batch(det, image, params)?.pop().unwrap())
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: u64, category_id: u32, d: &Detection) -> Self {
        DetectionRecord {
            image_id,
            category_id,
            bbox: d.bbox.xywh(),
            score: d.score,
        }
    }

    pub fn to_box(&self) -> BBox<f64> {
        let [x, y, w, h] = self.bbox;
        BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        }
    }
}

pub fn write_detections<W: Write>(w: &mut W, records: &[DetectionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format {
            what: "detections file",
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "detections file",
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
