//! COCO-style detection metrics plus the single-threshold IoU 0.7 variant.
//!
//! Matching follows the COCO evaluator: per image and category, detections
//! in descending score order claim the highest-IoU unclaimed ground truth
//! with IoU ≥ threshold, preferring ground truths inside the current area
//! band. Detections matched to an out-of-band ground truth, and unmatched
//! detections whose own area is out of band, are ignored. AP integrates the
//! precision envelope at 101 recall points.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::error::{Error, Result};
use crate::postprocess::DetectionRecord;
use crate::synth::AnnotationFile;

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const BDD_IOU: f64 = 0.7;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// `0.00, 0.01, …, 1.00`.
pub fn recall_thresholds() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Headline is AP averaged over IoU 0.50:0.95.
    Coco,
    /// Headline is AP at IoU 0.7.
    Bdd70,
}

impl FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco" => Ok(IouMode::Coco),
            "bdd70" => Ok(IouMode::Bdd70),
            _ => Err(Error::invalid(format!("unknown IoU mode {s:?} (expected coco or bdd70)"))),
        }
    }
}

impl fmt::Display for IouMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouMode::Coco => "coco",
            IouMode::Bdd70 => "bdd70",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Side lengths separating the small/medium and medium/large bands.
    pub area_thresholds: (f64, f64),
    /// Detections kept per image and category, best first.
    pub max_detections: usize,
    /// Score categories without ground truth as AP 0 instead of leaving
    /// them out of the means.
    pub include_empty_categories: bool,
    pub iou_mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            area_thresholds: (32.0, 96.0),
            max_detections: 100,
            include_empty_categories: false,
            iou_mode: IouMode::Coco,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category: u32,
    pub bbox: BBox<f64>,
    /// `w · h` in px².
    pub area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaBand {
    All,
    Small,
    Medium,
    Large,
}

impl AreaBand {
    /// Small is `area < t_s²`, medium `t_s² ≤ area ≤ t_m²`, large `area > t_m²`,
    /// so the three bands partition the ground truths.
    pub fn contains(self, area: f64, (ts, tm): (f64, f64)) -> bool {
        match self {
            AreaBand::All => true,
            AreaBand::Small => area < ts * ts,
            AreaBand::Medium => area >= ts * ts && area <= tm * tm,
            AreaBand::Large => area > tm * tm,
        }
    }
}

/// Greedy matching of score-sorted detections against ground truths of one
/// image and category. Returns, per detection, the matched gt index.
/// `gt_ignored` ground truths are only used when no regular one qualifies.
fn greedy_match(ious: &[Vec<f64>], gt_ignored: &[bool], thr: f64) -> Vec<Option<usize>> {
    let ng = gt_ignored.len();
    let mut taken = vec![false; ng];
    let mut out = Vec::with_capacity(ious.len());
    for row in ious {
        let mut best: Option<usize> = None;
        for pass_ignored in [false, true] {
            for g in 0..ng {
                if taken[g] || gt_ignored[g] != pass_ignored || row[g] < thr {
                    continue;
                }
                if best.map_or(true, |b| row[g] > row[b]) {
                    best = Some(g);
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some(g) = best {
            taken[g] = true;
        }
        out.push(best);
    }
    out
}

/// True-positive flags for detections of one image and category. Detections
/// are visited by descending score (stable); the returned flags follow the
/// input order.
pub fn match_detections(dets: &[(BBox<f64>, f64)], gts: &[BBox<f64>], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&d| gts.iter().map(|g| iou(&dets[d].0, g)).collect())
        .collect();
    let m = greedy_match(&ious, &vec![false; gts.len()], iou_thresh);
    let mut flags = vec![false; dets.len()];
    for (k, &d) in order.iter().enumerate() {
        flags[d] = m[k].is_some();
    }
    flags
}

/// 101-point interpolated AP of detections already sorted by descending
/// score. `None` when there is nothing to recall.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in tp_flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let sum: f64 = recall_thresholds()
        .iter()
        .map(|&r| {
            let i = recall.partition_point(|&v| v < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: u32,
    pub name: String,
    pub num_gt: usize,
    /// AP at IoU 0.7; `None` for a category left out of the means.
    pub ap: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
    pub ap_5095: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_mode: IouMode,
    /// `ap_5095` under `coco`, `ap_iou70` under `bdd70`.
    pub headline: f64,
    pub ap_5095: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ap_iou70: f64,
    /// mAP at each of the ten IoU thresholds.
    pub ap_per_iou: Vec<f64>,
    /// Band APs over IoU 0.50:0.95; `None` when the band has no ground truth.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    /// Mean IoU-0.7 AP over the categories flagged small.
    pub s_map: Option<f64>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

impl EvalReport {
    /// Every AP multiplied by 100.
    pub fn to_percent(&self) -> EvalReport {
        let p = |v: f64| v * 100.0;
        let po = |v: Option<f64>| v.map(p);
        EvalReport {
            headline: p(self.headline),
            ap_5095: p(self.ap_5095),
            ap_50: p(self.ap_50),
            ap_75: p(self.ap_75),
            ap_iou70: p(self.ap_iou70),
            ap_per_iou: self.ap_per_iou.iter().map(|&v| p(v)).collect(),
            ap_small: po(self.ap_small),
            ap_medium: po(self.ap_medium),
            ap_large: po(self.ap_large),
            per_category: self
                .per_category
                .iter()
                .map(|c| CategoryAp {
                    ap: po(c.ap),
                    ap_50: po(c.ap_50),
                    ap_75: po(c.ap_75),
                    ap_5095: po(c.ap_5095),
                    ..c.clone()
                })
                .collect(),
            s_map: po(self.s_map),
            ..self.clone()
        }
    }

    pub fn category(&self, id: u32) -> Option<&CategoryAp> {
        self.per_category.iter().find(|c| c.category_id == id)
    }

    /// Per-category table: one row per category plus a final mean row.
    pub fn write_category_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(w, "category_id,name,num_gt,ap_iou70,ap_50,ap_75,ap_5095")?;
        for c in &self.per_category {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.category_id,
                c.name,
                c.num_gt,
                f(c.ap),
                f(c.ap_50),
                f(c.ap_75),
                f(c.ap_5095)
            )?;
        }
        writeln!(
            w,
            ",mean,{},{},{},{},{}",
            self.num_gt, self.ap_iou70, self.ap_50, self.ap_75, self.ap_5095
        )
    }
}

/// Ground truths of an annotation file.
pub fn ground_truths(file: &AnnotationFile) -> Vec<GroundTruthBox> {
    file.annotations
        .iter()
        .map(|a| GroundTruthBox {
            image_id: a.image_id,
            category: a.category_id,
            bbox: a.to_box(),
            area: a.area(),
        })
        .collect()
}

struct Cell {
    gt_area: Vec<f64>,
    det_area: Vec<f64>,
    det_score: Vec<f64>,
    /// `ious[d][g]`, detections in descending score order.
    ious: Vec<Vec<f64>>,
}

/// Evaluates `dets` against the annotations in `gts`.
pub fn coco_metrics(dets: &[DetectionRecord], gts: &AnnotationFile, cfg: &EvalConfig) -> Result<EvalReport> {
    let image_ids: HashSet<u64> = gts.images.iter().map(|i| i.id).collect();
    let cat_ids: HashSet<u32> = gts.categories.iter().map(|c| c.id).collect();
    for (i, d) in dets.iter().enumerate() {
        if !image_ids.contains(&d.image_id) {
            return Err(Error::invalid(format!("detection {i} references unknown image {}", d.image_id)));
        }
        if !cat_ids.contains(&d.category_id) {
            return Err(Error::invalid(format!(
                "detection {i} references unknown category {}",
                d.category_id
            )));
        }
        if d.bbox[2] < 0.0 || d.bbox[3] < 0.0 || !d.score.is_finite() {
            return Err(Error::invalid(format!("detection {i} has a malformed box or score")));
        }
    }
    let gt_list = ground_truths(gts);
    let mut images: Vec<u64> = image_ids.into_iter().collect();
    images.sort_unstable();

    let mut gt_by: HashMap<(u32, u64), Vec<&GroundTruthBox>> = HashMap::new();
    for g in &gt_list {
        gt_by.entry((g.category, g.image_id)).or_default().push(g);
    }
    let mut det_by: HashMap<(u32, u64), Vec<&DetectionRecord>> = HashMap::new();
    for d in dets {
        det_by.entry((d.category_id, d.image_id)).or_default().push(d);
    }

    // cells[k][i] for category k and image i
    let cells: Vec<Vec<Cell>> = gts
        .categories
        .iter()
        .map(|c| {
            images
                .iter()
                .map(|&im| {
                    let g = gt_by.get(&(c.id, im)).map(Vec::as_slice).unwrap_or(&[]);
                    let mut d: Vec<&DetectionRecord> = det_by.get(&(c.id, im)).cloned().unwrap_or_default();
                    d.sort_by(|a, b| b.score.total_cmp(&a.score));
                    d.truncate(cfg.max_detections);
                    Cell {
                        gt_area: g.iter().map(|x| x.area).collect(),
                        det_area: d.iter().map(|x| x.bbox[2] * x.bbox[3]).collect(),
                        det_score: d.iter().map(|x| x.score).collect(),
                        ious: d
                            .iter()
                            .map(|x| g.iter().map(|y| iou(&x.to_box(), &y.bbox)).collect())
                            .collect(),
                    }
                })
                .collect()
        })
        .collect();

    let at = |k: usize, band: AreaBand, thr: f64| -> Option<f64> {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut npig = 0;
        for cell in &cells[k] {
            let ignored: Vec<bool> = cell
                .gt_area
                .iter()
                .map(|&a| !band.contains(a, cfg.area_thresholds))
                .collect();
            npig += ignored.iter().filter(|&&x| !x).count();
            let m = greedy_match(&cell.ious, &ignored, thr);
            for (d, mg) in m.iter().enumerate() {
                let skip = match mg {
                    Some(g) => ignored[*g],
                    None => !band.contains(cell.det_area[d], cfg.area_thresholds),
                };
                if !skip {
                    scored.push((cell.det_score[d], mg.is_some()));
                }
            }
        }
        // stable: equal scores keep image order, then in-image order
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
        average_precision(&flags, npig)
    };

    let thresholds = iou_thresholds();
    let num_gt_of = |k: usize| cells[k].iter().map(|c| c.gt_area.len()).sum::<usize>();
    let mean = |v: &[f64]| -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };

    let mut per_category = Vec::new();
    let mut per_iou_values: Vec<Vec<f64>> = vec![Vec::new(); NUM_IOU_THRESHOLDS];
    let mut iou70_values = Vec::new();
    let mut band_values: [Vec<f64>; 3] = Default::default();
    for (k, c) in gts.categories.iter().enumerate() {
        let num_gt = num_gt_of(k);
        let (aps, ap70): (Vec<Option<f64>>, Option<f64>) = if num_gt == 0 {
            let v = cfg.include_empty_categories.then_some(0.0);
            (vec![v; NUM_IOU_THRESHOLDS], v)
        } else {
            (
                thresholds.iter().map(|&t| at(k, AreaBand::All, t)).collect(),
                at(k, AreaBand::All, BDD_IOU),
            )
        };
        if let Some(v) = ap70 {
            iou70_values.push(v);
            for (t, a) in aps.iter().enumerate() {
                per_iou_values[t].push(a.unwrap());
            }
        }
        for (bi, band) in [AreaBand::Small, AreaBand::Medium, AreaBand::Large].into_iter().enumerate() {
            let per_t: Vec<f64> = thresholds.iter().filter_map(|&t| at(k, band, t)).collect();
            if let Some(m) = mean(&per_t) {
                band_values[bi].push(m);
            }
        }
        let valid: Vec<f64> = aps.iter().flatten().copied().collect();
        per_category.push(CategoryAp {
            category_id: c.id,
            name: c.name.clone(),
            num_gt,
            ap: ap70,
            ap_50: aps[0],
            ap_75: aps[5],
            ap_5095: mean(&valid),
        });
    }

    if iou70_values.is_empty() {
        return Err(Error::invalid("no ground-truth boxes to evaluate against"));
    }
    let ap_per_iou: Vec<f64> = per_iou_values.iter().map(|v| mean(v).unwrap()).collect();
    let ap_5095 = mean(&ap_per_iou).unwrap();
    let ap_iou70 = mean(&iou70_values).unwrap();
    let mut report = EvalReport {
        iou_mode: cfg.iou_mode,
        headline: match cfg.iou_mode {
            IouMode::Coco => ap_5095,
            IouMode::Bdd70 => ap_iou70,
        },
        ap_5095,
        ap_50: ap_per_iou[0],
        ap_75: ap_per_iou[5],
        ap_iou70,
        ap_per_iou,
        ap_small: mean(&band_values[0]),
        ap_medium: mean(&band_values[1]),
        ap_large: mean(&band_values[2]),
        per_category,
        s_map: None,
        num_images: images.len(),
        num_gt: gt_list.len(),
        num_detections: dets.len(),
    };
    let small: Vec<u32> = gts.categories.iter().filter(|c| c.small).map(|c| c.id).collect();
    if !small.is_empty() {
        report.s_map = small_object_map(&report, &small)?;
    }
    Ok(report)
}

/// Mean IoU-0.7 AP over `small_categories`; categories without a score are
/// skipped, and `None` means none of them had one.
pub fn small_object_map(report: &EvalReport, small_categories: &[u32]) -> Result<Option<f64>> {
    if small_categories.is_empty() {
        return Err(Error::invalid("small-object mAP needs at least one category"));
    }
    let mut values = Vec::new();
    for &id in small_categories {
        let c = report
            .category(id)
            .ok_or_else(|| Error::invalid(format!("category {id} is not in the report")))?;
        values.extend(c.ap);
    }
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

/// Per-band ground-truth counts, for reporting.
pub fn band_counts(file: &AnnotationFile, thresholds: (f64, f64)) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for (name, band) in [("small", AreaBand::Small), ("medium", AreaBand::Medium), ("large", AreaBand::Large)] {
        out.insert(name, file.annotations.iter().filter(|a| band.contains(a.area(), thresholds)).count());
    }
    out
}
