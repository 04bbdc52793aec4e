use cfekit::anchors::BBox;
use cfekit::network::{ArchConfig, ArchVariant, Detector};
use cfekit::postprocess::{classwise_nms, detect_batch, detect_multi_scale_batch, nms_hard, Detection, InferenceParams};
use cfekit::tensor::Tensor;

const CLASSES: usize = 3;

fn detector(variant: ArchVariant) -> Detector<f64> {
    let cfg = ArchConfig::new(variant, 64, CLASSES).with_widths([4, 8, 8]);
    Detector::new(&cfg, 5).unwrap()
}

fn image(seed: usize) -> Tensor<f64> {
    Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| ((c * 31 + y * 7 + x * 13 + seed) % 17) as f64 / 17.0)
}

/// Heads ignore the features: box deltas are zero and class logits are
/// `bias(c)` for every default box.
fn rig_heads(det: &mut Detector<f64>, bias: impl Fn(usize) -> f64) {
    for p in det.store.iter_mut() {
        if !p.name.starts_with("head_") {
            continue;
        }
        if p.name.ends_with(".weight") || p.name.contains(".box.") {
            p.value.data_mut().fill(0.0);
        } else if p.name.ends_with(".cls.bias") {
            for (ch, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = bias(ch % (CLASSES + 1));
            }
        }
    }
}

fn defaults(det: &Detector<f64>) -> Vec<BBox<f64>> {
    det.config().default_boxes::<f64>(64, 64).unwrap().boxes.iter().map(|b| b.clip(64.0, 64.0)).collect()
}

#[test]
fn rigged_heads_return_nms_of_default_boxes() {
    let mut det = detector(ArchVariant::CfenetFull);
    rig_heads(&mut det, |c| if c == 2 { 3.0 } else { 0.0 });
    let score = 3f64.exp() / (3f64.exp() + CLASSES as f64);
    let params = InferenceParams { score_threshold: 0.5, ..InferenceParams::default() };
    let got = detect_batch(&det, &image(0), &params).unwrap().pop().unwrap();

    let candidates: Vec<Detection> = defaults(&det).into_iter().map(|bbox| Detection { bbox, category: 2, score }).collect();
    let want = classwise_nms(&candidates, params.nms_iou, params.max_detections);
    assert!(!want.is_empty());
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.category, 2);
        assert!((g.score - w.score).abs() < 1e-12);
        for (a, b) in [(g.bbox.x_min, w.bbox.x_min), (g.bbox.y_min, w.bbox.y_min), (g.bbox.x_max, w.bbox.x_max), (g.bbox.y_max, w.bbox.y_max)] {
            assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", g.bbox, w.bbox);
        }
    }
}

#[test]
fn uniform_logits_give_every_class_the_same_boxes() {
    let mut det = detector(ArchVariant::SsdBaseline);
    rig_heads(&mut det, |_| 0.0);
    let uniform = 1.0 / (CLASSES + 1) as f64;
    let params = InferenceParams { score_threshold: uniform - 1e-6, max_detections: usize::MAX, ..InferenceParams::default() };
    let got = detect_batch(&det, &image(1), &params).unwrap().pop().unwrap();

    let boxes = defaults(&det);
    let scores = vec![uniform; boxes.len()];
    let per_class = nms_hard(&boxes, &scores, params.nms_iou).len();
    assert_eq!(got.len(), CLASSES * per_class);
    for c in 1..=CLASSES {
        assert_eq!(got.iter().filter(|d| d.category == c).count(), per_class);
    }
    assert!(got.iter().all(|d| (d.score - uniform).abs() < 1e-12));

    // strictly above the uniform probability, nothing survives
    let strict = InferenceParams { score_threshold: uniform + 1e-9, ..params };
    assert!(detect_batch(&det, &image(1), &strict).unwrap()[0].is_empty());
}

#[test]
fn threshold_of_one_yields_nothing() {
    let mut det = detector(ArchVariant::CfeTop);
    rig_heads(&mut det, |c| if c == 1 { 50.0 } else { -50.0 });
    let params = InferenceParams { score_threshold: 1.0, ..InferenceParams::default() };
    let batch = Tensor::stack(&[&image(2), &image(3)]).unwrap();
    let out = detect_batch(&det, &batch, &params).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|d| d.is_empty()));
    let ms = detect_multi_scale_batch(&det, &batch, &params.clone().with_scales(&InferenceParams::MULTI_SCALE)).unwrap();
    assert!(ms.iter().all(|d| d.is_empty()));
}

#[test]
fn unit_scale_list_matches_single_scale() {
    for v in [ArchVariant::SsdBaseline, ArchVariant::CfenetFull] {
        let det = detector(v);
        let batch = Tensor::stack(&[&image(4), &image(5)]).unwrap();
        let params = InferenceParams::default();
        let single = detect_batch(&det, &batch, &params).unwrap();
        assert_eq!(detect_multi_scale_batch(&det, &batch, &params).unwrap(), single, "{v}");
        // a repeated scale only adds exact duplicates, which NMS removes
        let twice = params.clone().with_scales(&[1.0, 1.0]);
        assert_eq!(detect_multi_scale_batch(&det, &batch, &twice).unwrap(), single, "{v}");
    }
}

#[test]
fn multi_scale_boxes_stay_inside_the_image() {
    let det = detector(ArchVariant::CfenetFull);
    let params = InferenceParams::default().with_scales(&InferenceParams::MULTI_SCALE);
    let out = detect_multi_scale_batch(&det, &image(6), &params).unwrap().pop().unwrap();
    assert!(out.len() <= params.max_detections);
    for d in &out {
        let b = d.bbox;
        assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 64.0 && b.y_max <= 64.0, "{b:?}");
        assert!(d.score > params.score_threshold && d.score <= 1.0);
        assert!((1..=CLASSES).contains(&d.category));
    }
    assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn scales_that_do_not_map_to_whole_pixels_are_rejected() {
    let det = detector(ArchVariant::SsdBaseline);
    let params = InferenceParams::default().with_scales(&[0.7]);
    assert!(detect_multi_scale_batch(&det, &image(7), &params).is_err());
    let params = InferenceParams::default().with_scales(&[]);
    assert!(detect_batch(&det, &image(7), &params).is_err());
}
