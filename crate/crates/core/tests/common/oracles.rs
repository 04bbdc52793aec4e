//! Independent brute-force references shared by the integration tests and
//! the acceptance harness. Each `*_cases` function returns how many random
//! instances were compared, or a description of the first disagreement.

use cfekit::anchors::{generate_default_boxes, match_anchors, BBox, TapSpec, Target};
use cfekit::eval::{coco_metrics, EvalConfig};
use cfekit::postprocess::{classwise_nms, nms_hard, Detection, DetectionRecord};
use cfekit::synth::{Annotation, AnnotationFile, Category, ImageEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<usize, String>;

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

fn in_band(area: f64, band: usize) -> bool {
    match band {
        0 => true,
        1 => area < 1024.0,
        2 => (1024.0..=9216.0).contains(&area),
        _ => area > 9216.0,
    }
}

/// AP of one category by exhaustive definition: precision at recall r is the
/// best precision over every prefix reaching recall ≥ r.
fn oracle_ap(file: &AnnotationFile, dets: &[DetectionRecord], cat: u32, thr: f64, band: usize) -> Option<f64> {
    let mut ids: Vec<u64> = file.images.iter().map(|i| i.id).collect();
    ids.sort();
    let mut pool: Vec<(f64, bool)> = Vec::new();
    let mut npig = 0usize;
    for id in ids {
        let gts: Vec<[f64; 4]> = file
            .annotations
            .iter()
            .filter(|a| a.image_id == id && a.category_id == cat)
            .map(|a| a.bbox)
            .collect();
        let ign: Vec<bool> = gts.iter().map(|g| !in_band(g[2] * g[3], band)).collect();
        npig += ign.iter().filter(|x| !**x).count();
        let mut ds: Vec<&DetectionRecord> =
            dets.iter().filter(|d| d.image_id == id && d.category_id == cat).collect();
        ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        ds.truncate(100);
        let mut used = vec![false; gts.len()];
        for d in ds {
            let mut pick: Option<usize> = None;
            for want_ignored in [false, true] {
                let mut best = -1.0;
                for (g, gt) in gts.iter().enumerate() {
                    let v = box_iou(d.bbox, *gt);
                    if !used[g] && ign[g] == want_ignored && v >= thr && v > best {
                        best = v;
                        pick = Some(g);
                    }
                }
                if pick.is_some() {
                    break;
                }
            }
            if let Some(g) = pick {
                used[g] = true;
            }
            let ignored = match pick {
                Some(g) => ign[g],
                None => !in_band(d.bbox[2] * d.bbox[3], band),
            };
            if !ignored {
                pool.push((d.score, pick.is_some()));
            }
        }
    }
    if npig == 0 {
        return None;
    }
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut pts = Vec::new();
    let mut tp = 0.0;
    for (n, (_, hit)) in pool.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        pts.push((tp / npig as f64, tp / (n + 1) as f64));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        total += pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    Some(total / 101.0)
}


pub fn random_case(seed: u64) -> (AnnotationFile, Vec<DetectionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_img = rng.gen_range(1..5u64);
    let n_cat = rng.gen_range(1..4u32);
    let mut file = AnnotationFile {
        images: (0..n_img)
            .map(|i| ImageEntry { id: 10 + i * 3, width: 200, height: 200, file_name: String::new() })
            .rev()
            .collect(),
        annotations: Vec::new(),
        categories: (1..=n_cat).map(|c| Category { id: c, name: format!("c{c}"), small: c == 1 }).collect(),
    };
    let mut dets = Vec::new();
    let mut next = 1;
    for img in 0..n_img {
        let image_id = 10 + img * 3;
        for _ in 0..rng.gen_range(0..7) {
            let w = rng.gen_range(4.0..150.0);
            let h = rng.gen_range(4.0..150.0);
            let bbox = [rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), w, h];
            let category_id = rng.gen_range(1..=n_cat);
            file.annotations.push(Annotation { id: next, image_id, category_id, bbox });
            next += 1;
            for _ in 0..rng.gen_range(0..3) {
                let j = |r: &mut ChaCha8Rng, s: f64| s * r.gen_range(-0.25..0.25);
                let b = [bbox[0] + j(&mut rng, w), bbox[1] + j(&mut rng, h), w + j(&mut rng, w), h + j(&mut rng, h)];
                let score = rng.gen_range(0..12) as f64 / 12.0;
                dets.push(DetectionRecord { image_id, category_id, bbox: b, score });
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let b = [rng.gen_range(0.0..150.0), rng.gen_range(0.0..150.0), rng.gen_range(3.0..120.0), rng.gen_range(3.0..120.0)];
            dets.push(DetectionRecord {
                image_id,
                category_id: rng.gen_range(1..=n_cat),
                bbox: b,
                score: rng.gen_range(0..12) as f64 / 12.0,
            });
        }
    }
    (file, dets)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn close(a: Option<f64>, b: Option<f64>, what: &str, seed: u64) -> Result<(), String> {
    match (a, b) {
        (None, None) => Ok(()),
        (Some(x), Some(y)) if (x - y).abs() < 1e-9 => Ok(()),
        _ => Err(format!("seed {seed} {what}: {a:?} vs {b:?}")),
    }
}

/// `coco_metrics` against the exhaustive AP definition.
pub fn eval_cases(seeds: std::ops::Range<u64>) -> Outcome {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut compared = 0;
    for seed in seeds {
        let (file, dets) = random_case(seed);
        let report = match coco_metrics(&dets, &file, &EvalConfig::default()) {
            Ok(r) => r,
            Err(e) => {
                if file.annotations.is_empty() {
                    continue;
                }
                return Err(format!("seed {seed}: {e}"));
            }
        };
        compared += 1;
        let cats: Vec<u32> = file.categories.iter().map(|c| c.id).collect();
        let mut per_t = vec![Vec::new(); 10];
        let mut at70 = Vec::new();
        let mut bands = vec![Vec::new(); 3];
        for &c in &cats {
            let aps: Vec<Option<f64>> = thresholds.iter().map(|&t| oracle_ap(&file, &dets, c, t, 0)).collect();
            let a70 = oracle_ap(&file, &dets, c, 0.7, 0);
            let entry = report.category(c).ok_or_else(|| format!("seed {seed}: category {c} missing"))?;
            close(entry.ap, a70, "category ap70", seed)?;
            close(entry.ap_50, aps[0], "category ap50", seed)?;
            if let Some(v) = a70 {
                at70.push(v);
                for t in 0..10 {
                    per_t[t].push(aps[t].unwrap());
                }
            }
            for band in 1..4 {
                let v: Vec<f64> = thresholds.iter().filter_map(|&t| oracle_ap(&file, &dets, c, t, band)).collect();
                if let Some(m) = mean(&v) {
                    bands[band - 1].push(m);
                }
            }
        }
        let per_iou: Vec<f64> = per_t.iter().map(|v| mean(v).unwrap()).collect();
        for t in 0..10 {
            close(Some(report.ap_per_iou[t]), Some(per_iou[t]), "ap_per_iou", seed)?;
        }
        close(Some(report.ap_5095), mean(&per_iou), "ap_5095", seed)?;
        close(Some(report.ap_iou70), mean(&at70), "ap_iou70", seed)?;
        close(report.ap_small, mean(&bands[0]), "ap_small", seed)?;
        close(report.ap_medium, mean(&bands[1]), "ap_medium", seed)?;
        close(report.ap_large, mean(&bands[2]), "ap_large", seed)?;
        let small = report.category(1).and_then(|c| c.ap);
        close(report.s_map, small, "s_map", seed)?;
    }
    Ok(compared)
}

/// Same arithmetic as the library so boundary cases round identically.
fn xyxy_iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox<f64>| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Textbook NMS: take the best remaining box, delete everything that
/// overlaps it by more than the threshold, repeat.
fn nms_oracle(boxes: &[BBox<f64>], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut pos = 0;
        for (p, &i) in remaining.iter().enumerate() {
            let j = remaining[pos];
            if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                pos = p;
            }
        }
        let top = remaining.remove(pos);
        keep.push(top);
        remaining.retain(|&i| xyxy_iou(&boxes[top], &boxes[i]) <= thr);
    }
    keep
}

fn grid_box(rng: &mut ChaCha8Rng) -> BBox<f64> {
    // integer corners make exact IoU ties and threshold hits common
    let x = rng.gen_range(0..40) as f64;
    let y = rng.gen_range(0..40) as f64;
    let w = rng.gen_range(1..20) as f64;
    let h = rng.gen_range(1..20) as f64;
    BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h }
}

/// `nms_hard` and `classwise_nms` against the textbook procedure.
pub fn nms_cases(seeds: std::ops::Range<u64>) -> Outcome {
    let mut compared = 0;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..40);
        let boxes: Vec<BBox<f64>> = (0..n).map(|_| grid_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let thr = [0.3, 0.45, 0.5, 0.7][rng.gen_range(0..4)];
        let got = nms_hard(&boxes, &scores, thr);
        let want = nms_oracle(&boxes, &scores, thr);
        if got != want {
            return Err(format!("seed {seed}: nms_hard kept {got:?}, oracle {want:?}"));
        }

        let cats: Vec<usize> = (0..n).map(|_| rng.gen_range(1..4)).collect();
        let dets: Vec<Detection> = (0..n).map(|i| Detection { bbox: boxes[i], category: cats[i], score: scores[i] }).collect();
        let max = rng.gen_range(1..30);
        let mut want: Vec<usize> = Vec::new();
        for c in 1..4 {
            let idx: Vec<usize> = (0..n).filter(|&i| cats[i] == c).collect();
            let b: Vec<BBox<f64>> = idx.iter().map(|&i| boxes[i]).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            want.extend(nms_oracle(&b, &s, thr).into_iter().map(|k| idx[k]));
        }
        want.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        want.truncate(max);
        let want: Vec<Detection> = want.into_iter().map(|i| dets[i]).collect();
        let got = classwise_nms(&dets, thr, max);
        if got != want {
            return Err(format!("seed {seed}: classwise_nms differs from oracle"));
        }
        compared += 1;
    }
    Ok(compared)
}

/// Exhaustive matching reference: materialize every (default, gt) pair,
/// sort by (−IoU, default, gt) and take pairs greedily, then give every
/// unmatched default its best gt when that clears the threshold.
fn match_oracle(defaults: &[BBox<f64>], gts: &[Target<f64>], thr: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (d, db) in defaults.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            pairs.push((xyxy_iou(db, &gt.bbox), d, g));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; defaults.len()];
    let mut gt_used = vec![false; gts.len()];
    for &(_, d, g) in &pairs {
        if out[d].is_none() && !gt_used[g] {
            out[d] = Some(g);
            gt_used[g] = true;
        }
    }
    for d in 0..defaults.len() {
        if out[d].is_some() {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            let v = xyxy_iou(&defaults[d], &gt.bbox);
            if v > best.0 {
                best = (v, g);
            }
        }
        if best.0 > thr {
            out[d] = Some(best.1);
        }
    }
    out
}

/// `match_anchors` against the exhaustive reference on the toy anchor layout.
pub fn matching_cases(seeds: std::ops::Range<u64>) -> Outcome {
    let specs: Vec<TapSpec> = [(8, 8.0, 6.4), (4, 16.0, 19.2), (2, 32.0, 38.4)]
        .iter()
        .map(|&(n, s, sc)| TapSpec { h: n, w: n, stride: s, scale: sc, aspect_ratios: vec![0.5, 1.0, 2.0] })
        .collect();
    let set = generate_default_boxes::<f64>(&specs, (64, 64)).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..6);
        let gts: Vec<Target<f64>> = (0..n)
            .map(|i| {
                let w = rng.gen_range(3.0..40.0);
                let h = rng.gen_range(3.0..40.0);
                let x = rng.gen_range(0.0..64.0 - w);
                let y = rng.gen_range(0.0..64.0 - h);
                Target { bbox: BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h }, label: 1 + i % 3 }
            })
            .collect();
        let thr = [0.4, 0.5, 0.6][rng.gen_range(0..3)];
        let m = match_anchors(&set, &gts, thr).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = match_oracle(&set.boxes, &gts, thr);
        if m.matched_gt != want {
            return Err(format!("seed {seed}: assignment differs from oracle"));
        }
        for (d, g) in want.iter().enumerate() {
            let label = g.map_or(0, |g| gts[g].label);
            if m.labels[d] != label {
                return Err(format!("seed {seed}: label of default {d} is {} not {label}", m.labels[d]));
            }
        }
        compared += 1;
    }
    Ok(compared)
}
