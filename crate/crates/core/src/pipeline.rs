//! Dataset-level inference and evaluation.

use crate::error::{Error, Result};
use crate::eval::{coco_metrics, EvalConfig, EvalReport};
use crate::network::Detector;
use crate::postprocess::{detect_multi_scale_batch, DetectionRecord, InferenceParams};
use crate::scalar::Scalar;
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// Images per forward pass during inference.
pub const INFERENCE_BATCH: usize = 16;

/// Runs the detector over every image of `data`. A single scale of 1.0 is
/// the plain single-scale path.
pub fn detect_dataset<T: Scalar>(det: &Detector<T>, data: &Dataset, params: &InferenceParams) -> Result<Vec<DetectionRecord>> {
    params.validate()?;
    let cats = &data.annotations.categories;
    if cats.len() != det.config().num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} categories but the network predicts {}",
            cats.len(),
            det.config().num_classes
        )));
    }
    let mut out = Vec::new();
    let entries = &data.annotations.images;
    for (chunk_entries, chunk_images) in entries.chunks(INFERENCE_BATCH).zip(data.images.chunks(INFERENCE_BATCH)) {
        let cast: Vec<Tensor<T>> = chunk_images.iter().map(|t| t.cast()).collect();
        let batch = Tensor::stack(&cast.iter().collect::<Vec<_>>())?;
        let per_image = if params.scales == [1.0] {
            crate::postprocess::detect_batch(det, &batch, params)?
        } else {
            detect_multi_scale_batch(det, &batch, params)?
        };
        for (entry, dets) in chunk_entries.iter().zip(per_image) {
            out.extend(dets.iter().map(|d| DetectionRecord::new(entry.id, cats[d.category - 1].id, d)));
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    det: &Detector<T>,
    data: &Dataset,
    params: &InferenceParams,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    let dets = detect_dataset(det, data, params)?;
    Ok((coco_metrics(&dets, &data.annotations, config)?, dets))
}
