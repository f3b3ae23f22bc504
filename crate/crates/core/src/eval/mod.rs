//! Detection metrics: IoU, greedy matching, 101-point interpolated average
//! precision, and AP50/mAP aggregation over the 0.50:0.05:0.95 IoU ladder.

use crate::error::{Error, Result};
use crate::label::geometry::Aabb;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    pub bbox: Aabb,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: String,
    pub bbox: Aabb,
    #[serde(default)]
    pub ignore: bool,
}

pub fn iou(a: &Aabb, b: &Aabb) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched an ignore-flagged ground truth: excluded from the PR curve.
    Ignored,
}

/// Greedy single-image single-category matching. Detections must already be
/// sorted by descending score (ties by input order). Each detection takes
/// the unmatched real gt with the highest IoU >= threshold; failing that, an
/// ignore-flagged gt (reusable) absorbs it; otherwise it is a false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            flags.push(MatchFlag::TruePositive);
            continue;
        }
        let absorbed = gts
            .iter()
            .any(|gt| gt.ignore && iou(&det.bbox, &gt.bbox) >= iou_thr);
        flags.push(if absorbed { MatchFlag::Ignored } else { MatchFlag::FalsePositive });
    }
    flags
}

/// 101-point interpolated AP from score-ordered TP/FP flags. Returns None
/// when AP is undefined (no ground truth and no detections).
pub fn average_precision(flags: &[MatchFlag], n_gt: usize) -> Option<f64> {
    let counted: Vec<bool> = flags
        .iter()
        .filter_map(|f| match f {
            MatchFlag::TruePositive => Some(true),
            MatchFlag::FalsePositive => Some(false),
            MatchFlag::Ignored => None,
        })
        .collect();
    if n_gt == 0 {
        return if counted.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(counted.len());
    let mut recalls = Vec::with_capacity(counted.len());
    for (i, is_tp) in counted.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at recall >= r
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, rec)| **rec >= r - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

pub const COCO_IOU_LADDER: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

pub const DEFAULT_SCORE_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub map: f64,
    /// Mean per-category AP at each ladder threshold, same order as the ladder.
    pub ap_per_iou: Vec<f64>,
    pub categories: Vec<String>,
    pub score_floor: f64,
    pub n_detections_used: usize,
    pub n_ground_truths: usize,
}

/// AP at one IoU threshold for one category across all images: flags are
/// computed per image, then pooled and ranked by score globally.
fn category_ap(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    iou_thr: f64,
) -> Option<f64> {
    let image_ids: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(gts.iter().map(|g| g.image_id.as_str()))
        .collect();
    let mut scored: Vec<(f64, usize, MatchFlag)> = Vec::new();
    let mut order = 0usize;
    for img in image_ids {
        let mut img_dets: Vec<Detection> = dets
            .iter()
            .filter(|d| d.image_id == img)
            .map(|d| (*d).clone())
            .collect();
        img_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let img_gts: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| g.image_id == img)
            .map(|g| (*g).clone())
            .collect();
        for (det, flag) in img_dets.iter().zip(match_detections(&img_dets, &img_gts, iou_thr)) {
            scored.push((det.score, order, flag));
            order += 1;
        }
    }
    // global rank: descending score, stable by per-image greedy order
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let flags: Vec<MatchFlag> = scored.iter().map(|s| s.2).collect();
    let n_gt = gts.iter().filter(|g| !g.ignore).count();
    average_precision(&flags, n_gt)
}

/// AP50 and COCO mAP over the union of detection and ground-truth categories.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], score_floor: f64) -> Result<EvalReport> {
    if gts.iter().all(|g| g.ignore) || gts.is_empty() {
        return Err(Error::EvalDomain("no countable ground truth".into()));
    }
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.score >= score_floor).collect();
    let categories: BTreeSet<String> = dets
        .iter()
        .map(|d| d.category.clone())
        .chain(gts.iter().map(|g| g.category.clone()))
        .collect();
    let mut ap_per_iou = Vec::with_capacity(COCO_IOU_LADDER.len());
    let mut ap50 = 0.0;
    for (ti, thr) in COCO_IOU_LADDER.iter().enumerate() {
        let mut aps = Vec::new();
        for cat in &categories {
            let cat_dets: Vec<&Detection> =
                dets.iter().filter(|d| d.category == *cat).copied().collect();
            let cat_gts: Vec<&GroundTruth> =
                gts.iter().filter(|g| g.category == *cat).collect();
            if let Some(ap) = category_ap(&cat_dets, &cat_gts, *thr) {
                aps.push(ap);
            }
        }
        let mean = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        if ti == 0 {
            ap50 = mean;
        }
        ap_per_iou.push(mean);
    }
    let map = ap_per_iou.iter().sum::<f64>() / ap_per_iou.len() as f64;
    Ok(EvalReport {
        ap50,
        map,
        ap_per_iou,
        categories: categories.into_iter().collect(),
        score_floor,
        n_detections_used: dets.len(),
        n_ground_truths: gts.len(),
    })
}

// ---------------------------------------------------------------------------
// JSONL ingestion: {image_id, category, bbox:[x1,y1,x2,y2], score?}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    image_id: String,
    category: String,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    ignore: Option<bool>,
}

fn bbox_of(row: &JsonlRow, line: usize) -> Result<Aabb> {
    let b = Aabb {
        x_min: row.bbox[0],
        y_min: row.bbox[1],
        x_max: row.bbox[2],
        y_max: row.bbox[3],
    };
    if !b.is_valid() {
        return Err(Error::Format(format!("line {line}: invalid bbox {:?}", row.bbox)));
    }
    Ok(b)
}

fn read_rows(path: &Path) -> Result<Vec<(usize, JsonlRow)>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_rows(path)?
        .into_iter()
        .map(|(line, row)| {
            let score = row.score.ok_or_else(|| {
                Error::Format(format!("line {line}: detection missing score"))
            })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Format(format!("line {line}: score {score} out of range")));
            }
            Ok(Detection {
                bbox: bbox_of(&row, line)?,
                image_id: row.image_id,
                category: row.category,
                score,
            })
        })
        .collect()
}

pub fn read_ground_truths(path: &Path) -> Result<Vec<GroundTruth>> {
    read_rows(path)?
        .into_iter()
        .map(|(line, row)| {
            Ok(GroundTruth {
                bbox: bbox_of(&row, line)?,
                image_id: row.image_id,
                category: row.category,
                ignore: row.ignore.unwrap_or(false),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x1: f64, y1: f64, x2: f64, y2: f64) -> Aabb {
        Aabb { x_min: x1, y_min: y1, x_max: x2, y_max: y2 }
    }

    fn det(img: &str, cat: &str, b: Aabb, score: f64) -> Detection {
        Detection { image_id: img.into(), category: cat.into(), bbox: b, score }
    }

    fn gt(img: &str, cat: &str, b: Aabb) -> GroundTruth {
        GroundTruth { image_id: img.into(), category: cat.into(), bbox: b, ignore: false }
    }

    #[test]
    fn iou_basics() {
        let a = boxed(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &boxed(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = boxed(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_hit_is_true_positive() {
        let b = boxed(0.0, 0.0, 2.0, 2.0);
        let flags = match_detections(&[det("i", "c", b, 0.9)], &[gt("i", "c", b)], 0.5);
        assert_eq!(flags, vec![MatchFlag::TruePositive]);
    }

    #[test]
    fn duplicate_detection_consumes_gt_once() {
        let b = boxed(0.0, 0.0, 2.0, 2.0);
        let dets = vec![det("i", "c", b, 0.9), det("i", "c", b, 0.8)];
        let flags = match_detections(&dets, &[gt("i", "c", b)], 0.5);
        assert_eq!(flags, vec![MatchFlag::TruePositive, MatchFlag::FalsePositive]);
    }

    #[test]
    fn ignored_gt_absorbs_without_counting() {
        let b = boxed(0.0, 0.0, 2.0, 2.0);
        let mut g = gt("i", "c", b);
        g.ignore = true;
        let flags = match_detections(&[det("i", "c", b, 0.9)], &[g], 0.5);
        assert_eq!(flags, vec![MatchFlag::Ignored]);
        assert_eq!(average_precision(&flags, 0), None);
    }

    #[test]
    fn single_tp_gives_unit_ap() {
        assert_eq!(average_precision(&[MatchFlag::TruePositive], 1), Some(1.0));
        assert_eq!(average_precision(&[MatchFlag::FalsePositive], 1), Some(0.0));
    }

    #[test]
    fn hand_worked_interpolated_curve() {
        // flags TP,FP,TP with n_gt = 2:
        // rank1: p=1, r=0.5; rank2: p=0.5, r=0.5; rank3: p=2/3, r=1.
        // envelope: recall <= 0.5 -> 1.0 (51 points), recall > 0.5 -> 2/3 (50 points)
        let flags = [MatchFlag::TruePositive, MatchFlag::FalsePositive, MatchFlag::TruePositive];
        let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let got = average_precision(&flags, 2).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn no_gt_with_detections_gives_zero_ap() {
        assert_eq!(average_precision(&[MatchFlag::FalsePositive], 0), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![
            gt("a", "car", boxed(0.0, 0.0, 2.0, 2.0)),
            gt("a", "person", boxed(5.0, 5.0, 6.0, 7.0)),
            gt("b", "car", boxed(1.0, 1.0, 4.0, 3.0)),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.image_id, &g.category, g.bbox, 1.0))
            .collect();
        let r = evaluate(&dets, &gts, DEFAULT_SCORE_FLOOR).unwrap();
        assert!((r.ap50 - 1.0).abs() < 1e-12);
        assert!((r.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![gt("a", "car", boxed(0.0, 0.0, 2.0, 2.0))];
        let r = evaluate(&[], &gts, DEFAULT_SCORE_FLOOR).unwrap();
        assert_eq!(r.ap50, 0.0);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn empty_gt_is_a_domain_error() {
        assert!(matches!(
            evaluate(&[], &[], DEFAULT_SCORE_FLOOR),
            Err(Error::EvalDomain(_))
        ));
    }

    #[test]
    fn score_floor_drops_low_confidence_detections() {
        let b = boxed(0.0, 0.0, 2.0, 2.0);
        let gts = vec![gt("a", "car", b)];
        let dets = vec![det("a", "car", b, 0.0005)];
        let r = evaluate(&dets, &gts, DEFAULT_SCORE_FLOOR).unwrap();
        assert_eq!(r.n_detections_used, 0);
        assert_eq!(r.ap50, 0.0);
    }

    #[test]
    fn monotone_score_transform_preserves_metrics() {
        let gts = vec![
            gt("a", "car", boxed(0.0, 0.0, 2.0, 2.0)),
            gt("a", "car", boxed(10.0, 0.0, 12.0, 2.0)),
        ];
        let dets = vec![
            det("a", "car", boxed(0.1, 0.0, 2.0, 2.0), 0.9),
            det("a", "car", boxed(20.0, 20.0, 22.0, 22.0), 0.7),
            det("a", "car", boxed(10.0, 0.2, 12.0, 2.0), 0.5),
        ];
        let r1 = evaluate(&dets, &gts, 0.0).unwrap();
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.score = d.score.powi(3); // strictly increasing on [0,1]
                d
            })
            .collect();
        let r2 = evaluate(&squashed, &gts, 0.0).unwrap();
        assert!((r1.ap50 - r2.ap50).abs() < 1e-15);
        assert!((r1.map - r2.map).abs() < 1e-15);
    }

    #[test]
    fn ap_is_non_increasing_in_iou_threshold() {
        let gts = vec![
            gt("a", "car", boxed(0.0, 0.0, 4.0, 4.0)),
            gt("a", "car", boxed(10.0, 10.0, 14.0, 14.0)),
        ];
        let dets = vec![
            det("a", "car", boxed(0.5, 0.5, 4.5, 4.5), 0.9),
            det("a", "car", boxed(10.0, 10.0, 13.0, 14.0), 0.8),
        ];
        let r = evaluate(&dets, &gts, 0.0).unwrap();
        for w in r.ap_per_iou.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
