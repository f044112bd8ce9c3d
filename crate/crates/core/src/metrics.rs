//! nuScenes-style detection metrics (center-distance mAP, TP errors, NDS)
//! and segmentation IoU.
//!
//! Conventions follow the public nuScenes devkit: predictions are matched
//! greedily in descending score order to the nearest unmatched GT of the
//! same class and frame; precision and confidence are interpolated at 101
//! recall points; AP integrates precision above recall 0.1 after
//! subtracting a 0.1 precision floor; TP errors are cumulative means read
//! off at the same recall points, averaged from recall 0.1 up to the
//! highest achieved recall.

use serde::{Deserialize, Serialize};

use crate::bevmodel::PredBox;
use crate::error::{Error, Result};
use crate::losses::{filter_gt_boxes, FovFilterSpec};
use crate::scalar::wrap_angle;
use crate::synthscene::{GtBox, SegMasks};

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    #[serde(rename = "mATE")]
    pub ate: f64,
    #[serde(rename = "mASE")]
    pub ase: f64,
    #[serde(rename = "mAOE")]
    pub aoe: f64,
    #[serde(rename = "mAVE")]
    pub ave: f64,
    #[serde(rename = "mAAE")]
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// NDS = (5 mAP + sum over the five TP errors of (1 - min(1, err))) / 10.
pub fn compute_nds(map: f64, tp: &TpErrors) -> f64 {
    let tp_score: f64 = tp.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_score) / 10.0
}

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalFrame {
    pub preds: Vec<PredBox>,
    pub gts: Vec<GtBox>,
}

/// `np.interp` semantics: clamps to the end values (or `right` past the
/// last knot); for repeated knots the last one at or below `x` wins.
pub fn interp(x: f64, xp: &[f64], fp: &[f64], right: Option<f64>) -> f64 {
    let n = xp.len();
    if x > xp[n - 1] {
        return right.unwrap_or(fp[n - 1]);
    }
    if x < xp[0] {
        return fp[0];
    }
    let j = xp.partition_point(|v| *v <= x) - 1;
    if j == n - 1 || xp[j] == x {
        return fp[j];
    }
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    slope * (x - xp[j]) + fp[j]
}

fn recall_grid() -> Vec<f64> {
    (0..RECALL_POINTS).map(|i| i as f64 / (RECALL_POINTS - 1) as f64).collect()
}

/// Per-recall-point curves for one class at one distance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurves {
    pub precision: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Interpolated cumulative-mean TP errors, in `TpErrors` field order.
    pub errors: [Vec<f64>; 5],
}

impl MetricCurves {
    fn no_predictions() -> Self {
        Self {
            precision: vec![0.0; RECALL_POINTS],
            confidence: vec![0.0; RECALL_POINTS],
            errors: std::array::from_fn(|_| vec![1.0; RECALL_POINTS]),
        }
    }

    /// Index of the highest recall point with nonzero confidence.
    pub fn max_recall_index(&self) -> usize {
        self.confidence.iter().rposition(|c| *c != 0.0).unwrap_or(0)
    }
}

fn scale_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|k| a[k].min(b[k])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    inter / union
}

/// The five per-pair TP errors.
pub fn pair_errors(p: &PredBox, g: &GtBox) -> [f64; 5] {
    [
        (p.center[0] - g.center[0]).hypot(p.center[1] - g.center[1]),
        1.0 - scale_iou(&p.size, &g.size),
        wrap_angle(p.yaw - g.yaw).abs(),
        (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]),
        if p.attribute_id == g.attribute_id { 0.0 } else { 1.0 },
    ]
}

/// Greedy matching and curve construction. `None` when the class has no GT.
pub fn accumulate(frames: &[EvalFrame], class_id: usize, dist_th: f64) -> Option<MetricCurves> {
    let npos: usize = frames
        .iter()
        .map(|f| f.gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut preds: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.class_id == class_id)
                .map(move |(pi, _)| (fi, pi))
        })
        .collect();
    // Stable sort: equal scores keep frame/prediction order.
    preds.sort_by(|a, b| frames[b.0].preds[b.1].score.total_cmp(&frames[a.0].preds[a.1].score));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let (mut tp, mut fp) = (Vec::new(), Vec::new());
    let mut conf = Vec::new();
    let (mut tp_conf, mut tp_err): (Vec<f64>, [Vec<f64>; 5]) = (Vec::new(), Default::default());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for &(fi, pi) in &preds {
        let p = &frames[fi].preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in frames[fi].gts.iter().enumerate() {
            if g.class_id != class_id || taken[fi][gi] {
                continue;
            }
            let d = (p.center[0] - g.center[0]).hypot(p.center[1] - g.center[1]);
            if best.is_none_or(|b| d < b.1) {
                best = Some((gi, d));
            }
        }
        match best {
            Some((gi, d)) if d <= dist_th => {
                taken[fi][gi] = true;
                ctp += 1.0;
                let e = pair_errors(p, &frames[fi].gts[gi]);
                for k in 0..5 {
                    tp_err[k].push(e[k]);
                }
                tp_conf.push(p.score);
            }
            _ => cfp += 1.0,
        }
        tp.push(ctp);
        fp.push(cfp);
        conf.push(p.score);
    }
    if tp_conf.is_empty() {
        return Some(MetricCurves::no_predictions());
    }
    let rec: Vec<f64> = tp.iter().map(|t| t / npos as f64).collect();
    let prec: Vec<f64> = tp.iter().zip(&fp).map(|(t, f)| t / (t + f)).collect();
    let grid = recall_grid();
    let precision: Vec<f64> = grid.iter().map(|r| interp(*r, &rec, &prec, Some(0.0))).collect();
    let confidence: Vec<f64> = grid.iter().map(|r| interp(*r, &rec, &conf, Some(0.0))).collect();
    // Cumulative means indexed by TP confidence, then read off at the
    // interpolated confidence of every recall point.
    let rev_tp_conf: Vec<f64> = tp_conf.iter().rev().copied().collect();
    let errors = std::array::from_fn(|k| {
        let mut acc = 0.0;
        let cm: Vec<f64> = tp_err[k]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                acc += v;
                acc / (i + 1) as f64
            })
            .collect();
        let rev_cm: Vec<f64> = cm.iter().rev().copied().collect();
        confidence
            .iter()
            .map(|c| interp(*c, &rev_tp_conf, &rev_cm, None))
            .collect()
    });
    Some(MetricCurves {
        precision,
        confidence,
        errors,
    })
}

/// Normalized area under the precision curve above the recall and
/// precision floors.
pub fn calc_ap(curves: &MetricCurves) -> f64 {
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let tail = &curves.precision[first..];
    let s: f64 = tail.iter().map(|p| (p - MIN_PRECISION).max(0.0)).sum();
    // Clamp away summation rounding (a perfect curve otherwise lands at 1 + 4e-16).
    (s / tail.len() as f64 / (1.0 - MIN_PRECISION)).clamp(0.0, 1.0)
}

/// Mean of one TP error curve between recall 0.1 and the maximum recall;
/// 1.0 when that range is empty.
pub fn calc_tp(curves: &MetricCurves, metric: usize) -> f64 {
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let last = curves.max_recall_index();
    if last < first {
        return 1.0;
    }
    let v = &curves.errors[metric][first..=last];
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Per class AP averaged over thresholds; `None` when the class has no GT.
    pub per_class_ap: Vec<Option<f64>>,
}

/// Mean AP over thresholds and over classes that have ground truth.
pub fn compute_map(frames: &[EvalFrame], thresholds: &[f64], num_classes: usize) -> MapResult {
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let aps: Option<Vec<f64>> = thresholds
                .iter()
                .map(|th| accumulate(frames, c, *th).map(|m| calc_ap(&m)))
                .collect();
            aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    MapResult { map, per_class_ap }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpResult {
    pub errors: TpErrors,
    pub per_class: Vec<Option<TpErrors>>,
    /// True when no class had a single true positive (all errors set to 1).
    pub zero_true_positives: bool,
}

/// Class-mean TP errors at the TP matching threshold.
pub fn compute_tp_errors(frames: &[EvalFrame], match_threshold: f64, num_classes: usize) -> TpResult {
    let mut any_tp = false;
    let per_class: Vec<Option<TpErrors>> = (0..num_classes)
        .map(|c| {
            accumulate(frames, c, match_threshold).map(|m| {
                any_tp |= m.max_recall_index() > 0 || m.confidence[0] != 0.0;
                let e: [f64; 5] = std::array::from_fn(|k| calc_tp(&m, k));
                TpErrors {
                    ate: e[0],
                    ase: e[1],
                    aoe: e[2],
                    ave: e[3],
                    aae: e[4],
                }
            })
        })
        .collect();
    let valid: Vec<&TpErrors> = per_class.iter().flatten().collect();
    let errors = if valid.is_empty() || !any_tp {
        TpErrors::WORST
    } else {
        let mean = |f: fn(&TpErrors) -> f64| valid.iter().map(|t| f(t)).sum::<f64>() / valid.len() as f64;
        TpErrors {
            ate: mean(|t| t.ate),
            ase: mean(|t| t.ase),
            aoe: mean(|t| t.aoe),
            ave: mean(|t| t.ave),
            aae: mean(|t| t.aae),
        }
    };
    TpResult {
        errors,
        per_class,
        zero_true_positives: !any_tp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub per_class_iou: Vec<f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
}

/// IoU per class accumulated over all frames; a class absent from both
/// prediction and GT scores 1.
pub fn compute_miou(pairs: &[(&SegMasks, &SegMasks)]) -> Result<IouResult> {
    let Some(first) = pairs.first() else {
        return Err(Error::Validation("no segmentation frames to evaluate".into()));
    };
    let classes = first.1.classes;
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (pred, gt) in pairs {
        if (pred.classes, pred.rows, pred.cols) != (gt.classes, gt.rows, gt.cols) || gt.classes != classes {
            return Err(Error::Validation("segmentation shapes differ".into()));
        }
        let n = gt.rows * gt.cols;
        for k in 0..classes {
            for i in k * n..(k + 1) * n {
                let (p, g) = (pred.data[i] != 0, gt.data[i] != 0);
                inter[k] += (p && g) as usize;
                union[k] += (p || g) as usize;
            }
        }
    }
    let per_class_iou: Vec<f64> = (0..classes)
        .map(|k| if union[k] == 0 { 1.0 } else { inter[k] as f64 / union[k] as f64 })
        .collect();
    let miou = per_class_iou.iter().sum::<f64>() / classes as f64;
    Ok(IouResult { per_class_iou, miou })
}

/// Evaluation summary with a stable key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub tp_errors: TpErrors,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_tp: Vec<Option<TpErrors>>,
    pub zero_true_positives: bool,
    pub per_class_iou: Vec<f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub fov_filter: Option<FovFilterSpec>,
    pub num_frames: usize,
    /// `compute_nds(mAP, tp_errors)` recomputed when the report was built.
    pub nds_check: f64,
}

impl EvalReport {
    pub fn is_consistent(&self) -> bool {
        (compute_nds(self.map, &self.tp_errors) - self.nds).abs() < 1e-12
    }
}

/// Full evaluation. GT boxes are restricted to the FOV when `fov` is set;
/// predictions are scored as produced. Segmentation GT is never filtered.
pub fn evaluate(
    frames: &[EvalFrame],
    seg: &[(&SegMasks, &SegMasks)],
    num_classes: usize,
    fov: Option<&FovFilterSpec>,
) -> Result<EvalReport> {
    let filtered: Vec<EvalFrame> = frames
        .iter()
        .map(|f| EvalFrame {
            preds: f.preds.clone(),
            gts: match fov {
                Some(s) => filter_gt_boxes(&f.gts, s),
                None => f.gts.clone(),
            },
        })
        .collect();
    let m = compute_map(&filtered, &DIST_THRESHOLDS, num_classes);
    let tp = compute_tp_errors(&filtered, TP_THRESHOLD, num_classes);
    let iou = compute_miou(seg)?;
    let nds = compute_nds(m.map, &tp.errors);
    Ok(EvalReport {
        nds,
        map: m.map,
        tp_errors: tp.errors,
        per_class_ap: m.per_class_ap,
        per_class_tp: tp.per_class,
        zero_true_positives: tp.zero_true_positives,
        per_class_iou: iou.per_class_iou,
        miou: iou.miou,
        fov_filter: fov.copied(),
        num_frames: frames.len(),
        nds_check: nds,
    })
}
