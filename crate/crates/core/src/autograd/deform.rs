//! Deformable multi-source sampling, the kernel behind both attention
//! blocks of the BEV encoder.
//!
//! For query `q`, every source `s` (a camera feature map or a BEV map) that
//! has at least one valid reference point contributes
//!
//! ```text
//! sum_{h, z valid, p} w[q, s, h, z, p] * bilinear(V_s^h, ref[s, q, z] + off[q, s, h, z, p])
//! ```
//!
//! to head `h` of the output, and contributions are averaged over the
//! contributing sources. Queries with no valid reference in any source
//! produce a zero row. Coordinates are in feature cells: cell `(i, j)` has
//! its centre at `(x = j, y = i)`, and reads outside the map are zero.

use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformPlan<T> {
    pub num_queries: usize,
    pub num_sources: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub heads: usize,
    pub dim: usize,
    pub refs: usize,
    pub points: usize,
    /// Offsets are predicted separately for each source when true, shared otherwise.
    pub offsets_per_source: bool,
    pub weights_per_source: bool,
    ref_xy: Vec<[T; 2]>,
    valid: Vec<bool>,
    hits: Vec<Vec<usize>>,
}

/// Shape parameters of a [`DeformPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformLayout {
    pub num_queries: usize,
    pub num_sources: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub heads: usize,
    pub dim: usize,
    pub refs: usize,
    pub points: usize,
    pub offsets_per_source: bool,
    pub weights_per_source: bool,
}

impl<T: Real> DeformPlan<T> {
    /// `reference(s, q, z)` returns the reference location of query `q`'s
    /// `z`-th point in source `s`, or `None` when it does not land there.
    pub fn new(layout: DeformLayout, reference: impl Fn(usize, usize, usize) -> Option<[T; 2]>) -> Result<Self> {
        let DeformLayout {
            num_queries,
            num_sources,
            src_h,
            src_w,
            heads,
            dim,
            refs,
            points,
            offsets_per_source,
            weights_per_source,
        } = layout;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        if refs == 0 || points == 0 || num_sources == 0 {
            return Err(Error::Config("deformable plan needs sources, refs and points".into()));
        }
        let mut ref_xy = vec![[T::zero(); 2]; num_sources * num_queries * refs];
        let mut valid = vec![false; ref_xy.len()];
        let mut hits = vec![Vec::new(); num_queries];
        for s in 0..num_sources {
            for (q, hit) in hits.iter_mut().enumerate() {
                let mut any = false;
                for z in 0..refs {
                    if let Some(xy) = reference(s, q, z) {
                        let i = (s * num_queries + q) * refs + z;
                        ref_xy[i] = xy;
                        valid[i] = true;
                        any = true;
                    }
                }
                if any {
                    hit.push(s);
                }
            }
        }
        Ok(Self {
            num_queries,
            num_sources,
            src_h,
            src_w,
            heads,
            dim,
            refs,
            points,
            offsets_per_source,
            weights_per_source,
            ref_xy,
            valid,
            hits,
        })
    }

    pub fn offset_cols(&self) -> usize {
        let s = if self.offsets_per_source { self.num_sources } else { 1 };
        s * self.heads * self.refs * self.points * 2
    }

    pub fn weight_cols(&self) -> usize {
        let s = if self.weights_per_source { self.num_sources } else { 1 };
        s * self.heads * self.refs * self.points
    }

    /// Group width for the weight softmax: all (ref, point) pairs of one head.
    pub fn weight_group(&self) -> usize {
        self.refs * self.points
    }

    /// Sources with at least one valid reference for query `q`.
    pub fn hits(&self, q: usize) -> &[usize] {
        &self.hits[q]
    }

    pub fn reference(&self, s: usize, q: usize, z: usize) -> Option<[T; 2]> {
        let i = (s * self.num_queries + q) * self.refs + z;
        self.valid[i].then_some(self.ref_xy[i])
    }

    #[inline]
    fn off_index(&self, q: usize, s: usize, h: usize, z: usize, p: usize) -> usize {
        let s = if self.offsets_per_source { s } else { 0 };
        q * self.offset_cols() + (((s * self.heads + h) * self.refs + z) * self.points + p) * 2
    }

    #[inline]
    fn weight_index(&self, q: usize, s: usize, h: usize, z: usize, p: usize) -> usize {
        let s = if self.weights_per_source { s } else { 0 };
        q * self.weight_cols() + ((s * self.heads + h) * self.refs + z) * self.points + p
    }
}

struct Corners<T> {
    idx: [Option<usize>; 4],
    w: [T; 4],
    fx: T,
    fy: T,
}

/// Bilinear corners around (x, y); out-of-range corners are `None`.
#[inline]
fn corners<T: Real>(h: usize, w: usize, x: T, y: T) -> Corners<T> {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let one = T::one();
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let at = |yy: i64, xx: i64| -> Option<usize> {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
    };
    Corners {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        fx,
        fy,
    }
}

/// Bilinearly samples channels `[c0, c0 + out.len())` of a `(h*w) x stride`
/// map at (x, y), accumulating `scale * sample` into `out`.
pub fn bilinear_accumulate<T: Real>(
    map: &[T],
    h: usize,
    w: usize,
    stride: usize,
    c0: usize,
    x: T,
    y: T,
    scale: T,
    out: &mut [T],
) {
    let c = corners(h, w, x, y);
    for k in 0..4 {
        if let Some(i) = c.idx[k] {
            let cw = scale * c.w[k];
            let row = &map[i * stride + c0..i * stride + c0 + out.len()];
            for (o, v) in out.iter_mut().zip(row) {
                *o += cw * *v;
            }
        }
    }
}

/// Convenience wrapper returning the sampled vector.
pub fn bilinear_sample<T: Real>(map: &[T], h: usize, w: usize, channels: usize, x: T, y: T) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    bilinear_accumulate(map, h, w, channels, 0, x, y, T::one(), &mut out);
    out
}

pub(crate) fn deform_forward<T: Real>(
    plan: &DeformPlan<T>,
    value: &Tensor<T>,
    offsets: &Tensor<T>,
    weights: &Tensor<T>,
) -> Tensor<T> {
    check_shapes(plan, value, offsets, weights);
    let n = plan.num_queries;
    let d = plan.dim;
    let hd = d / plan.heads;
    let plane = plan.src_h * plan.src_w;
    let mut out = Tensor::zeros(n, d);
    let off = offsets.data();
    let wts = weights.data();
    for q in 0..n {
        let hits = &plan.hits[q];
        if hits.is_empty() {
            continue;
        }
        let inv = T::one() / from_usize(hits.len());
        let row = out.row_mut(q);
        for &s in hits {
            let map = &value.data()[s * plane * d..(s + 1) * plane * d];
            for z in 0..plan.refs {
                let Some(r) = plan.reference(s, q, z) else { continue };
                for h in 0..plan.heads {
                    for p in 0..plan.points {
                        let oi = plan.off_index(q, s, h, z, p);
                        let w = wts[plan.weight_index(q, s, h, z, p)];
                        bilinear_accumulate(
                            map,
                            plan.src_h,
                            plan.src_w,
                            d,
                            h * hd,
                            r[0] + off[oi],
                            r[1] + off[oi + 1],
                            inv * w,
                            &mut row[h * hd..(h + 1) * hd],
                        );
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn deform_backward<T: Real>(
    plan: &DeformPlan<T>,
    value: &Tensor<T>,
    offsets: &Tensor<T>,
    weights: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = plan.num_queries;
    let d = plan.dim;
    let hd = d / plan.heads;
    let plane = plan.src_h * plan.src_w;
    let mut gv = Tensor::zeros(value.rows(), value.cols());
    let mut go = Tensor::zeros(offsets.rows(), offsets.cols());
    let mut gw = Tensor::zeros(weights.rows(), weights.cols());
    let off = offsets.data();
    let wts = weights.data();
    let vdat = value.data();
    for q in 0..n {
        let hits = &plan.hits[q];
        if hits.is_empty() {
            continue;
        }
        let inv = T::one() / from_usize(hits.len());
        let g = gy.row(q);
        for &s in hits {
            let base = s * plane;
            for z in 0..plan.refs {
                let Some(r) = plan.reference(s, q, z) else { continue };
                for h in 0..plan.heads {
                    let gh = &g[h * hd..(h + 1) * hd];
                    for p in 0..plan.points {
                        let oi = plan.off_index(q, s, h, z, p);
                        let wi = plan.weight_index(q, s, h, z, p);
                        let w = wts[wi];
                        let c = corners(plan.src_h, plan.src_w, r[0] + off[oi], r[1] + off[oi + 1]);
                        // <g_h, V_corner> for each corner (zero outside the map).
                        let mut dots = [T::zero(); 4];
                        for k in 0..4 {
                            if let Some(i) = c.idx[k] {
                                let start = (base + i) * d + h * hd;
                                let vrow = &vdat[start..start + hd];
                                dots[k] = gh.iter().zip(vrow).map(|(a, b)| *a * *b).sum();
                                let cw = inv * w * c.w[k];
                                let grow = &mut gv.data_mut()[start..start + hd];
                                for (o, a) in grow.iter_mut().zip(gh) {
                                    *o += cw * *a;
                                }
                            }
                        }
                        let sample_dot = (0..4).map(|k| c.w[k] * dots[k]).sum::<T>();
                        gw.data_mut()[wi] += inv * sample_dot;
                        let one = T::one();
                        let dx = (one - c.fy) * (dots[1] - dots[0]) + c.fy * (dots[3] - dots[2]);
                        let dy = (one - c.fx) * (dots[2] - dots[0]) + c.fx * (dots[3] - dots[1]);
                        go.data_mut()[oi] += inv * w * dx;
                        go.data_mut()[oi + 1] += inv * w * dy;
                    }
                }
            }
        }
    }
    (gv, go, gw)
}

fn check_shapes<T: Real>(plan: &DeformPlan<T>, value: &Tensor<T>, offsets: &Tensor<T>, weights: &Tensor<T>) {
    assert_eq!(
        value.shape(),
        (plan.num_sources * plan.src_h * plan.src_w, plan.dim),
        "deform value shape"
    );
    assert_eq!(offsets.shape(), (plan.num_queries, plan.offset_cols()), "deform offsets shape");
    assert_eq!(weights.shape(), (plan.num_queries, plan.weight_cols()), "deform weights shape");
}
