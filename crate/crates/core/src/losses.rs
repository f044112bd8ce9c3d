//! Angular GT filter, set matching and the training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::bevmodel::{BevGridSpec, BevState, DetOutput, REGRESS_DIM};
use crate::camgeom::box_azimuth;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, Real};
use crate::synthscene::{GtBox, SegMasks};

/// Slack on the closed FOV boundary, degrees; absorbs atan2 rounding at
/// exactly +/-45 degrees.
const FOV_SLACK_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovFilterSpec {
    pub aperture_deg: f64,
    pub tolerance_deg: f64,
    pub total_fov_deg: f64,
}

impl Default for FovFilterSpec {
    fn default() -> Self {
        Self {
            aperture_deg: 64.5,
            tolerance_deg: 12.75,
            total_fov_deg: 90.0,
        }
    }
}

impl FovFilterSpec {
    /// Keeps the default aperture and derives the tolerance from a total FOV.
    pub fn with_total(total_fov_deg: f64) -> Result<Self> {
        let aperture = Self::default().aperture_deg;
        let spec = Self {
            aperture_deg: aperture,
            tolerance_deg: (total_fov_deg - aperture) / 2.0,
            total_fov_deg,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.aperture_deg + 2.0 * self.tolerance_deg - self.total_fov_deg).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "FOV {} != aperture {} + 2 x tolerance {}",
                self.total_fov_deg, self.aperture_deg, self.tolerance_deg
            )));
        }
        if !(self.total_fov_deg > 0.0 && self.total_fov_deg <= 360.0) || self.aperture_deg <= 0.0 {
            return Err(Error::Config(format!("FOV {} outside (0, 360]", self.total_fov_deg)));
        }
        Ok(())
    }

    /// Closed test |azimuth| <= total/2.
    pub fn keeps(&self, center: [f64; 2]) -> bool {
        box_azimuth(center).abs() <= self.total_fov_deg / 2.0 + FOV_SLACK_DEG
    }
}

/// Boxes whose centre azimuth lies inside the front FOV, order preserved.
pub fn filter_gt_boxes(boxes: &[GtBox], spec: &FovFilterSpec) -> Vec<GtBox> {
    boxes
        .iter()
        .filter(|b| spec.keeps([b.center[0], b.center[1]]))
        .cloned()
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols)
/// or every column to a distinct row (rows > cols). Returns (row, col)
/// pairs sorted by row and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let m = cost[0].len();
    if m == 0 {
        return (Vec::new(), 0.0);
    }
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let (pairs, total) = hungarian(&t);
        let mut back: Vec<(usize, usize)> = pairs.into_iter().map(|(c, r)| (r, c)).collect();
        back.sort_unstable();
        return (back, total);
    }
    // Shortest augmenting path with potentials; 1-based columns, column 0
    // is the virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    (pairs, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCost {
    pub class: f64,
    pub center: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self { class: 2.0, center: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (query, gt) pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal one-to-one query/GT assignment under
/// `class * (1 - p_class) + center * L1(bev centre)`.
pub fn hungarian_match<T: Real>(
    det: &DetOutput<T>,
    gts: &[GtBox],
    grid: &BevGridSpec,
    weights: &MatchCost,
) -> Result<MatchResult> {
    if !(weights.class >= 0.0 && weights.center >= 0.0) {
        return Err(Error::Validation("match cost weights must be non-negative".into()));
    }
    let nq = det.num_queries();
    if let Some(b) = gts.iter().find(|b| b.class_id >= det.num_classes()) {
        return Err(Error::Validation(format!("GT class {} outside the head", b.class_id)));
    }
    let centers: Vec<[f64; 2]> = (0..nq).map(|q| det.center_xy(q, grid)).collect();
    let cost: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| {
            (0..nq)
                .map(|q| {
                    let p = crate::autograd::sigmoid(det.logits.at(q, g.class_id).f64());
                    let l1 = (centers[q][0] - g.center[0]).abs() + (centers[q][1] - g.center[1]).abs();
                    weights.class * (1.0 - p) + weights.center * l1
                })
                .collect()
        })
        .collect();
    let (gq, total_cost) = hungarian(&cost);
    let mut pairs: Vec<(usize, usize)> = gq.into_iter().map(|(g, q)| (q, g)).collect();
    pairs.sort_unstable();
    let mut matched = vec![false; nq];
    for (q, _) in &pairs {
        matched[*q] = true;
    }
    Ok(MatchResult {
        unmatched_queries: (0..nq).filter(|q| !matched[*q]).collect(),
        pairs,
        total_cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub center: f64,
    pub height: f64,
    pub size: f64,
    pub yaw: f64,
    pub velocity: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub segmentation: f64,
    pub detection: f64,
    /// Weight of the BEV feature reconstruction term.
    pub reconstruction: f64,
    pub matching: MatchCost,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            center: 0.25,
            height: 0.25,
            size: 0.25,
            yaw: 0.25,
            velocity: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            segmentation: 1.0,
            detection: 1.0,
            reconstruction: 1.0,
            matching: MatchCost::default(),
        }
    }
}

/// Detection loss node plus its weighted components (already divided by
/// the GT count).
#[derive(Debug, Clone, Copy)]
pub struct DetLoss {
    pub total: Var,
    pub class: f64,
    pub center: f64,
    pub height: f64,
    pub size: f64,
    pub yaw: f64,
    pub velocity: f64,
}

/// Regression target of GT box `gt` for query `q`, laid out like the head.
pub fn regression_target(gt: &GtBox, q: usize, grid: &BevGridSpec) -> [f64; REGRESS_DIM] {
    let base = grid.cell_center(q / grid.cols, q % grid.cols);
    [
        gt.center[0] - base[0],
        gt.center[1] - base[1],
        gt.center[2],
        gt.size[0].ln(),
        gt.size[1].ln(),
        gt.size[2].ln(),
        gt.yaw.sin(),
        gt.yaw.cos(),
        gt.velocity[0],
        gt.velocity[1],
    ]
}

/// Focal classification over all queries (unmatched ones are background)
/// plus weighted L1 on the matched regression targets, normalized by
/// `max(1, #gts)`.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    det: Var,
    num_classes: usize,
    grid: &BevGridSpec,
    gts: &[GtBox],
    matching: &MatchResult,
    w: &LossWeights,
) -> Result<DetLoss> {
    let (nq, cols) = g.shape(det);
    if cols != num_classes + REGRESS_DIM {
        return Err(Error::Validation(format!(
            "detection output has {cols} columns, expected {}",
            num_classes + REGRESS_DIM
        )));
    }
    let norm = gts.len().max(1) as f64;
    let mut target = Tensor::zeros(nq, num_classes);
    for &(q, gi) in &matching.pairs {
        target.row_mut(q)[gts[gi].class_id] = T::one();
    }
    let logits = g.slice_cols(det, 0, num_classes);
    let focal = g.focal(logits, target, lit(w.focal_alpha), lit(w.focal_gamma));
    let cls = g.scale(focal, lit(w.class / norm));
    let mut out = DetLoss {
        total: cls,
        class: g.value(cls).item().f64(),
        center: 0.0,
        height: 0.0,
        size: 0.0,
        yaw: 0.0,
        velocity: 0.0,
    };
    if matching.pairs.is_empty() {
        return Ok(out);
    }
    let queries: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
    let rows = g.select_rows(det, &queries);
    let reg = g.slice_cols(rows, num_classes, REGRESS_DIM);
    let targets: Vec<[f64; REGRESS_DIM]> = matching
        .pairs
        .iter()
        .map(|&(q, gi)| regression_target(&gts[gi], q, grid))
        .collect();
    let parts = [
        (0, 2, w.center),
        (2, 1, w.height),
        (3, 3, w.size),
        (6, 2, w.yaw),
        (8, 2, w.velocity),
    ];
    let mut total = cls;
    let mut vals = [0.0; 5];
    for (k, &(start, len, weight)) in parts.iter().enumerate() {
        let x = g.slice_cols(reg, start, len);
        let t = Tensor::from_vec(
            targets.len(),
            len,
            targets.iter().flat_map(|r| r[start..start + len].iter().map(|v| lit(*v))).collect(),
        );
        let l1 = g.l1_const(x, t);
        let term = g.scale(l1, lit(weight / norm));
        vals[k] = g.value(term).item().f64();
        total = g.add(total, term);
    }
    out.total = total;
    [out.center, out.height, out.size, out.yaw, out.velocity] = vals;
    Ok(out)
}

/// Row-per-cell {0, 1} targets from `[class][row][col]` masks.
pub fn seg_targets<T: Real>(gt: &SegMasks) -> Tensor<T> {
    let n = gt.rows * gt.cols;
    let mut t = Tensor::zeros(n, gt.classes);
    for k in 0..gt.classes {
        for i in 0..n {
            if gt.get(k, i / gt.cols, i % gt.cols) {
                t.row_mut(i)[k] = T::one();
            }
        }
    }
    t
}

/// Mean per-class binary cross-entropy over the grid.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, seg: Var, gt: &SegMasks) -> Result<Var> {
    let shape = g.shape(seg);
    if shape != (gt.rows * gt.cols, gt.classes) {
        return Err(Error::Validation(format!(
            "segmentation output {shape:?} does not match {}x{}x{} masks",
            gt.rows, gt.cols, gt.classes
        )));
    }
    Ok(g.bce_logits(seg, seg_targets(gt)))
}

fn check_states<T: Real>(shape: (usize, usize), full: &BevState<T>) -> Result<()> {
    if shape != full.embeddings.shape() {
        return Err(Error::Validation(format!(
            "BEV shapes differ: {shape:?} vs {:?}",
            full.embeddings.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference between the masked-pass BEV node and the
/// unmasked-pass state, which is treated as a constant.
pub fn feature_reconstruction_loss<T: Real>(g: &mut Graph<T>, bev_masked: Var, bev_full: &BevState<T>) -> Result<Var> {
    check_states(g.shape(bev_masked), bev_full)?;
    Ok(g.mse_const(bev_masked, bev_full.embeddings.clone()))
}

/// Value of the reconstruction loss between two states.
pub fn bev_feature_distance<T: Real>(a: &BevState<T>, b: &BevState<T>) -> Result<f64> {
    check_states(a.embeddings.shape(), b)?;
    let n = a.embeddings.len().max(1);
    let s: f64 = a
        .embeddings
        .data()
        .iter()
        .zip(b.embeddings.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(s / from_usize::<f64>(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_optimum() {
        let (pairs, total) = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total, 2.0);
        let (pairs, _) = hungarian(&[vec![5.0], vec![1.0], vec![3.0]]);
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn fov_boundary_is_closed() {
        let f = FovFilterSpec::default();
        assert!(f.keeps([10.0, 0.0]));
        assert!(f.keeps([10.0, 10.0]));
        assert!(f.keeps([7.0, -7.0]));
        assert!(!f.keeps([10.0, 10.01]));
        assert!(!f.keeps([-5.0, 0.0]));
        assert!(FovFilterSpec::with_total(90.0).unwrap() == f);
    }
}
