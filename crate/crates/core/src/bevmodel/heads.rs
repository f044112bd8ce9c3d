//! Head outputs and box decoding.

use serde::{Deserialize, Serialize};

use super::BevGridSpec;
use crate::autograd::{sigmoid, Tensor};
use crate::scalar::Real;
use crate::synthscene::{Attribute, GtBox};

/// Regression columns per query: centre offset (dx, dy) from the cell
/// centre, z, log size (l, w, h), (sin, cos) yaw, velocity (vx, vy).
pub const REGRESS_DIM: usize = 10;

/// Raw detection head output, one row per BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DetOutput<T> {
    /// `N x num_classes`
    pub logits: Tensor<T>,
    /// `N x REGRESS_DIM`
    pub regress: Tensor<T>,
}

/// A decoded, scored box in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub attribute_id: usize,
    pub score: f64,
}

impl PredBox {
    /// A prediction that exactly reproduces a ground-truth box.
    pub fn from_gt(gt: &GtBox, score: f64) -> Self {
        Self {
            center: gt.center,
            size: gt.size,
            yaw: gt.yaw,
            velocity: gt.velocity,
            class_id: gt.class_id,
            attribute_id: gt.attribute_id,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSpec {
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Same-class detections closer than this (m) to a higher-scored one are dropped.
    pub nms_radius: f64,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            max_detections: 100,
            nms_radius: 1.0,
        }
    }
}

impl<T: Real> DetOutput<T> {
    pub fn num_queries(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    /// Class probabilities of query `q`.
    pub fn probs(&self, q: usize) -> Vec<f64> {
        self.logits.row(q).iter().map(|z| sigmoid(z.f64())).collect()
    }

    /// Ego-frame BEV centre predicted by query `q`.
    pub fn center_xy(&self, q: usize, grid: &BevGridSpec) -> [f64; 2] {
        let base = grid.cell_center(q / grid.cols, q % grid.cols);
        let r = self.regress.row(q);
        [base[0] + r[0].f64(), base[1] + r[1].f64()]
    }

    /// Full box for query `q` labelled with class `class_id`.
    pub fn box_for(&self, q: usize, class_id: usize, grid: &BevGridSpec) -> PredBox {
        let r: Vec<f64> = self.regress.row(q).iter().map(|v| v.f64()).collect();
        let [x, y] = self.center_xy(q, grid);
        let velocity = [r[8], r[9]];
        let speed = velocity[0].hypot(velocity[1]);
        PredBox {
            center: [x, y, r[2]],
            size: [r[3].exp(), r[4].exp(), r[5].exp()],
            yaw: r[6].atan2(r[7]),
            velocity,
            class_id,
            attribute_id: Attribute::from_speed(speed).id(),
            score: sigmoid(self.logits.at(q, class_id).f64()),
        }
    }

    /// Thresholds, keeps the top-K by score, then suppresses same-class
    /// neighbours within `nms_radius`. Output is sorted by descending score.
    pub fn decode(&self, grid: &BevGridSpec, spec: &DecodeSpec) -> Vec<PredBox> {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for q in 0..self.num_queries() {
            for k in 0..self.num_classes() {
                let s = sigmoid(self.logits.at(q, k).f64());
                if s >= spec.score_threshold {
                    cand.push((s, q, k));
                }
            }
        }
        // Ties broken by index so the order is fully deterministic.
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut out: Vec<PredBox> = Vec::new();
        for (_, q, k) in cand {
            if out.len() >= spec.max_detections {
                break;
            }
            let b = self.box_for(q, k, grid);
            let clash = out.iter().any(|o| {
                o.class_id == k
                    && (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]) < spec.nms_radius
            });
            if !clash {
                out.push(b);
            }
        }
        out
    }
}

/// Segmentation logits, one row per BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T> {
    pub rows: usize,
    pub cols: usize,
    /// `rows*cols x num_seg_classes`
    pub logits: Tensor<T>,
}

impl<T: Real> SegOutput<T> {
    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    /// Binary masks at logit 0 (probability 0.5), indexed `[class][row][col]`.
    pub fn threshold(&self) -> crate::synthscene::SegMasks {
        let mut m = crate::synthscene::SegMasks::new(self.num_classes(), self.rows, self.cols);
        for i in 0..self.rows * self.cols {
            for k in 0..self.num_classes() {
                if self.logits.at(i, k) > T::zero() {
                    m.set(k, i / self.cols, i % self.cols, true);
                }
            }
        }
        m
    }
}
