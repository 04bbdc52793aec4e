//! Default boxes, IoU geometry, ground-truth matching and box deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f32> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        if !(x_max >= x_min && y_max >= y_min) {
            return Err(Error::invalid(format!(
                "box ({x_min}, {y_min}, {x_max}, {y_max}) has negative extent"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// From `[x, y, w, h]`.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let two = T::of(2.0);
        BBox {
            x_min: cx - w / two,
            y_min: cy - h / two,
            x_max: cx + w / two,
            y_max: cy + h / two,
        }
    }

    pub fn xywh(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::of(2.0);
        ((self.x_min + self.x_max) / two, (self.y_min + self.y_max) / two)
    }

    pub fn clip(&self, width: T, height: T) -> Self {
        let c = |v: T, hi: T| v.max(T::zero()).min(hi);
        BBox {
            x_min: c(self.x_min, width),
            y_min: c(self.y_min, height),
            x_max: c(self.x_max, width),
            y_max: c(self.y_max, height),
        }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        BBox {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x_min: U::of(self.x_min.as_f64()),
            y_min: U::of(self.y_min.as_f64()),
            x_max: U::of(self.x_max.as_f64()),
            y_max: U::of(self.y_max.as_f64()),
        }
    }
}

/// Jaccard overlap; zero when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(T::zero());
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// One feature map's anchor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapSpec {
    pub h: usize,
    pub w: usize,
    /// Pixel distance between neighbouring cells.
    pub stride: f64,
    /// Side length, in pixels, of the aspect-ratio-1 box.
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefaultBoxSet<T = f32> {
    pub boxes: Vec<BBox<T>>,
    pub tap_index: Vec<usize>,
    /// `(scale, aspect_ratio)` each box was generated from.
    pub provenance: Vec<(f64, f64)>,
    /// Index of each tap's first box, plus a final entry equal to the count.
    pub tap_offsets: Vec<usize>,
}

impl<T: Scalar> DefaultBoxSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tiles `A` boxes per cell of each tap. Cell `(i, j)` is centred at
/// `((j + ½)·stride, (i + ½)·stride)`; the box for aspect ratio `ar` has
/// width `scale·√ar` and height `scale/√ar`. Boxes are clipped to the image.
/// Ordering is tap-major, then row, column, aspect ratio.
pub fn generate_default_boxes<T: Scalar>(
    tap_specs: &[TapSpec],
    image_size: (usize, usize),
) -> Result<DefaultBoxSet<T>> {
    if tap_specs.is_empty() {
        return Err(Error::invalid("default boxes need at least one tap"));
    }
    for pair in tap_specs.windows(2) {
        if pair[1].scale <= pair[0].scale {
            return Err(Error::invalid("anchor scales must increase with tap depth"));
        }
    }
    let (img_h, img_w) = (T::of(image_size.0 as f64), T::of(image_size.1 as f64));
    let mut set = DefaultBoxSet {
        boxes: Vec::new(),
        tap_index: Vec::new(),
        provenance: Vec::new(),
        tap_offsets: Vec::new(),
    };
    for (t, spec) in tap_specs.iter().enumerate() {
        if spec.aspect_ratios.is_empty() || spec.aspect_ratios.iter().any(|&a| a <= 0.0) {
            return Err(Error::invalid("aspect ratios must be non-empty and positive"));
        }
        set.tap_offsets.push(set.boxes.len());
        for i in 0..spec.h {
            for j in 0..spec.w {
                let cx = (j as f64 + 0.5) * spec.stride;
                let cy = (i as f64 + 0.5) * spec.stride;
                for &ar in &spec.aspect_ratios {
                    let w = spec.scale * ar.sqrt();
                    let h = spec.scale / ar.sqrt();
                    let b = BBox::from_center(T::of(cx), T::of(cy), T::of(w), T::of(h));
                    set.boxes.push(b.clip(img_w, img_h));
                    set.tap_index.push(t);
                    set.provenance.push((spec.scale, ar));
                }
            }
        }
    }
    set.tap_offsets.push(set.boxes.len());
    Ok(set)
}

/// A ground-truth box with its class index (`1..=num_classes`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target<T = f32> {
    pub bbox: BBox<T>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    /// Class per default box, `0` meaning background.
    pub labels: Vec<usize>,
    pub matched_gt: Vec<Option<usize>>,
    /// Default box claimed by each ground truth in the bipartite step.
    pub best_default: Vec<usize>,
}

impl MatchAssignment {
    pub fn num_positive(&self) -> usize {
        self.matched_gt.iter().filter(|m| m.is_some()).count()
    }
}

/// Two-step SSD matching.
///
/// 1. Bipartite: ground truths greedily claim distinct default boxes in
///    order of decreasing IoU (ties: lower default index, then lower gt
///    index), so every ground truth owns at least one default.
/// 2. Threshold: each unclaimed default whose best IoU exceeds `threshold`
///    is assigned to that ground truth (ties: lower gt index).
pub fn match_anchors<T: Scalar>(
    defaults: &DefaultBoxSet<T>,
    gts: &[Target<T>],
    threshold: f64,
) -> Result<MatchAssignment> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("match threshold {threshold} outside (0, 1)")));
    }
    if defaults.is_empty() {
        return Err(Error::invalid("cannot match against an empty default box set"));
    }
    let nd = defaults.len();
    let ng = gts.len();
    let mut labels = vec![0; nd];
    let mut matched_gt = vec![None; nd];
    let mut best_default = vec![0; ng];
    if ng == 0 {
        return Ok(MatchAssignment {
            labels,
            matched_gt,
            best_default,
        });
    }
    // overlaps[d * ng + g]
    let overlaps: Vec<T> = defaults
        .boxes
        .iter()
        .flat_map(|d| gts.iter().map(move |g| iou(d, &g.bbox)))
        .collect();

    let mut gt_done = vec![false; ng];
    for _ in 0..ng.min(nd) {
        let mut best: Option<(T, usize, usize)> = None;
        for d in 0..nd {
            if matched_gt[d].is_some() {
                continue;
            }
            for g in 0..ng {
                if gt_done[g] {
                    continue;
                }
                let v = overlaps[d * ng + g];
                // strict comparison keeps the lowest (d, g) among equals
                if best.map_or(true, |(bv, _, _)| v > bv) {
                    best = Some((v, d, g));
                }
            }
        }
        let Some((_, d, g)) = best else { break };
        gt_done[g] = true;
        best_default[g] = d;
        matched_gt[d] = Some(g);
        labels[d] = gts[g].label;
    }

    let thr = T::of(threshold);
    for d in 0..nd {
        if matched_gt[d].is_some() {
            continue;
        }
        let row = &overlaps[d * ng..(d + 1) * ng];
        let mut g_best = 0;
        for g in 1..ng {
            if row[g] > row[g_best] {
                g_best = g;
            }
        }
        if row[g_best] > thr {
            matched_gt[d] = Some(g_best);
            labels[d] = gts[g_best].label;
        }
    }
    Ok(MatchAssignment {
        labels,
        matched_gt,
        best_default,
    })
}

/// Centre-offset / log-scale regression target of `gt` relative to `default`.
pub fn encode_box<T: Scalar>(gt: &BBox<T>, default: &BBox<T>, variances: [f64; 4]) -> Result<[T; 4]> {
    let (wd, hd) = (default.width(), default.height());
    if wd <= T::zero() || hd <= T::zero() {
        return Err(Error::invalid("default box must have positive extent"));
    }
    let (wg, hg) = (gt.width(), gt.height());
    if wg <= T::zero() || hg <= T::zero() {
        return Err(Error::invalid("ground-truth box must have positive extent"));
    }
    let (cxg, cyg) = gt.center();
    let (cxd, cyd) = default.center();
    let v = variances.map(T::of);
    Ok([
        (cxg - cxd) / (wd * v[0]),
        (cyg - cyd) / (hd * v[1]),
        (wg / wd).ln() / v[2],
        (hg / hd).ln() / v[3],
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box<T: Scalar>(deltas: [T; 4], default: &BBox<T>, variances: [f64; 4]) -> BBox<T> {
    let (wd, hd) = (default.width(), default.height());
    let (cxd, cyd) = default.center();
    let v = variances.map(T::of);
    let cx = cxd + deltas[0] * v[0] * wd;
    let cy = cyd + deltas[1] * v[1] * hd;
    let w = wd * (deltas[2] * v[2]).exp();
    let h = hd * (deltas[3] * v[3]).exp();
    BBox::from_center(cx, cy, w, h)
}
