//! Decoding, score filtering, non-maximum suppression and the mapping back
//! to original-image pixels.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDES;
use crate::error::{config_err, Result};
use crate::head::HeadOutputs;
use crate::ops::sigmoid_scalar;

/// Axis-aligned box `(x1, y1, x2, y2)`.
pub type BoxXyxy = [f32; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
}

/// How a network-input image was derived from the original.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxMeta {
    pub scale: f64,
    /// `(left, top)` padding in network pixels.
    pub pad: (f64, f64),
    /// `(h, w)` of the original image.
    pub original_size: (usize, usize),
}

impl LetterboxMeta {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            scale: 1.0,
            pad: (0.0, 0.0),
            original_size: (h, w),
        }
    }
}

/// One decoded grid cell in network-input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cxcywh: [f32; 4],
    pub obj: f32,
    pub cls: Vec<f32>,
}

impl Candidate {
    pub fn xyxy(&self) -> BoxXyxy {
        let [cx, cy, w, h] = self.cxcywh;
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }

    /// Best class (lowest index on ties) and its score `obj * cls`.
    pub fn best(&self) -> (usize, f32) {
        let mut best = 0;
        for (i, &s) in self.cls.iter().enumerate() {
            if s > self.cls[best] {
                best = i;
            }
        }
        (best, self.obj * self.cls.get(best).copied().unwrap_or(0.0))
    }
}

/// Decodes every image of a batch: level by level, row-major within a level.
pub fn decode_outputs(outs: &HeadOutputs, strides: [usize; 3]) -> Result<Vec<Vec<Candidate>>> {
    if outs.levels.len() != strides.len() {
        return config_err(format!("expected {} levels, got {}", strides.len(), outs.levels.len()));
    }
    let batch = outs.levels.first().map_or(0, |l| l.reg.shape().n);
    let mut all = vec![Vec::new(); batch];
    for (lvl, &s) in outs.levels.iter().zip(&strides) {
        let (rs, os, cs) = (lvl.reg.shape(), lvl.obj.shape(), lvl.cls.shape());
        if rs.c != 4 || os.c != 1 || [os.n, cs.n] != [rs.n; 2] || [os.h, cs.h] != [rs.h; 2] || [os.w, cs.w] != [rs.w; 2] {
            return config_err(format!("inconsistent head outputs: reg {rs}, obj {os}, cls {cs}"));
        }
        let s = s as f32;
        for (n, out) in all.iter_mut().enumerate() {
            for gy in 0..rs.h {
                for gx in 0..rs.w {
                    let r = |c| lvl.reg.at(n, c, gy, gx);
                    out.push(Candidate {
                        cxcywh: [(r(0) + gx as f32) * s, (r(1) + gy as f32) * s, r(2).exp() * s, r(3).exp() * s],
                        obj: sigmoid_scalar(lvl.obj.at(n, 0, gy, gx)),
                        cls: (0..cs.c).map(|c| sigmoid_scalar(lvl.cls.at(n, c, gy, gx))).collect(),
                    });
                }
            }
        }
    }
    Ok(all)
}

/// Decodes a single-image output with the standard strides.
pub fn decode_single(outs: &HeadOutputs) -> Result<Vec<Candidate>> {
    let mut all = decode_outputs(outs, STRIDES)?;
    if all.len() != 1 {
        return config_err(format!("expected a batch of one, got {}", all.len()));
    }
    Ok(all.pop().unwrap_or_default())
}

/// Keeps candidates whose `obj * max(cls)` exceeds `thresh`.
pub fn filter_candidates(cands: &[Candidate], thresh: f32) -> Vec<Detection> {
    cands
        .iter()
        .filter_map(|c| {
            let (class_id, score) = c.best();
            (score > thresh).then(|| Detection {
                class_id,
                score,
                bbox: c.xyxy(),
            })
        })
        .collect()
}

fn iou64(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn widen(b: BoxXyxy) -> [f64; 4] {
    b.map(f64::from)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: BoxXyxy, b: BoxXyxy) -> f32 {
    iou64(widen(a), widen(b)) as f32
}

/// Score descending, then input index ascending.
fn rank(dets: &[Detection], a: usize, b: usize) -> Ordering {
    dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b))
}

/// Greedy suppression over `order` (already ranked); returns kept indices.
fn greedy(boxes: &[[f64; 4]], order: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou64(boxes[k], boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

fn collect(dets: &[Detection], mut kept: Vec<usize>) -> Vec<Detection> {
    kept.sort_by(|&a, &b| rank(dets, a, b));
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Class-aware greedy NMS. Output is ordered by score descending, ties by
/// input index.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(dets, a, b));
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let boxes: Vec<[f64; 4]> = dets.iter().map(|d| widen(d.bbox)).collect();
    let kept: Vec<usize> = classes
        .par_iter()
        .flat_map_iter(|&c| {
            let sub: Vec<usize> = order.iter().copied().filter(|&i| dets[i].class_id == c).collect();
            greedy(&boxes, &sub, f64::from(iou_thresh))
        })
        .collect();
    collect(dets, kept)
}

/// Single class-agnostic pass over boxes shifted apart per class by more than
/// any box extent; the result equals [`nms`].
pub fn batched_nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    if dets.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = dets.iter().flat_map(|d| d.bbox).fold((f64::MAX, f64::MIN), |(lo, hi), v| {
        (lo.min(f64::from(v)), hi.max(f64::from(v)))
    });
    // Power of two so the shift only moves the exponent of typical coordinates.
    let span = (hi - lo + 1.0).max(1.0).log2().ceil().exp2();
    let boxes: Vec<[f64; 4]> = dets
        .iter()
        .map(|d| {
            let off = d.class_id as f64 * span - lo;
            widen(d.bbox).map(|v| v + off)
        })
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(dets, a, b));
    collect(dets, greedy(&boxes, &order, f64::from(iou_thresh)))
}

/// Maps network-input boxes back to the original image and clamps them to
/// its bounds.
pub fn scale_coords(dets: &[Detection], meta: &LetterboxMeta) -> Vec<Detection> {
    let (h, w) = (meta.original_size.0 as f64, meta.original_size.1 as f64);
    let map = |v: f32, pad: f64, hi: f64| (((f64::from(v) - pad) / meta.scale).clamp(0.0, hi)) as f32;
    dets.iter()
        .map(|d| {
            let [x1, y1, x2, y2] = d.bbox;
            Detection {
                bbox: [
                    map(x1, meta.pad.0, w),
                    map(y1, meta.pad.1, h),
                    map(x2, meta.pad.0, w),
                    map(y2, meta.pad.1, h),
                ],
                ..d.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::LevelOutput;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;

    fn det(class_id: usize, score: f32, bbox: BoxXyxy) -> Detection {
        Detection { class_id, score, bbox }
    }

    fn level(h: usize, w: usize, classes: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> LevelOutput<Tensor> {
        let s = Shape::new(1, 1, h, w).unwrap();
        LevelOutput {
            cls: Tensor::from_fn(s.with_c(classes), |_, c, y, x| f(10 + c, 0, y, x)),
            reg: Tensor::from_fn(s.with_c(4), |_, c, y, x| f(c, 0, y, x)),
            obj: Tensor::from_fn(s, |_, _, y, x| f(4, 0, y, x)),
        }
    }

    fn zeros(sizes: [usize; 3], classes: usize) -> HeadOutputs {
        HeadOutputs {
            levels: sizes.iter().map(|&n| level(n, n, classes, |_, _, _, _| 0.0)).collect(),
        }
    }

    #[test]
    fn zero_outputs_decode_to_cells() {
        let c = decode_single(&zeros([4, 2, 1], 2)).unwrap();
        assert_eq!(c.len(), 16 + 4 + 1);
        assert_eq!(c[0].xyxy(), [-4.0, -4.0, 4.0, 4.0]);
        assert_eq!(c[0].obj, 0.5);
        // level 1 (stride 16), grid x=1,y=1 -> (16, 16)
        assert_eq!(c[16 + 3].cxcywh, [16.0, 16.0, 16.0, 16.0]);
    }

    #[test]
    fn grid_arithmetic() {
        let outs = zeros([1, 4, 1], 1);
        let c = decode_single(&outs).unwrap();
        // stride 16, gx = 2, gy = 3 -> index 1 + 3*4 + 2
        assert_eq!(c[1 + 14].cxcywh, [32.0, 48.0, 16.0, 16.0]);
    }

    #[test]
    fn decode_matches_cell_loop() {
        let f = |c: usize, _: usize, y: usize, x: usize| ((c * 7 + y * 3 + x) as f32 * 0.37).sin();
        let outs = HeadOutputs {
            levels: vec![level(2, 2, 1, f), level(1, 1, 1, f), level(1, 1, 1, f)],
        };
        let c = decode_single(&outs).unwrap();
        let mut k = 0;
        for (lvl, s) in [(2usize, 8.0f32), (1, 16.0), (1, 32.0)] {
            for gy in 0..lvl {
                for gx in 0..lvl {
                    let cx = (f(0, 0, gy, gx) + gx as f32) * s;
                    let cy = (f(1, 0, gy, gx) + gy as f32) * s;
                    let w = f(2, 0, gy, gx).exp() * s;
                    let h = f(3, 0, gy, gx).exp() * s;
                    assert_eq!(c[k].cxcywh, [cx, cy, w, h]);
                    assert_eq!(c[k].obj, 1.0 / (1.0 + (-f(4, 0, gy, gx)).exp()));
                    assert_eq!(c[k].cls, vec![1.0 / (1.0 + (-f(10, 0, gy, gx)).exp())]);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn zero_cells_have_distinct_centers() {
        let c = decode_single(&zeros([4, 2, 1], 1)).unwrap();
        for lvl in [0..16, 16..20] {
            let mut centers: Vec<_> = c[lvl].iter().map(|c| (c.cxcywh[0] as i64, c.cxcywh[1] as i64)).collect();
            let n = centers.len();
            centers.sort_unstable();
            centers.dedup();
            assert_eq!(centers.len(), n);
        }
    }

    #[test]
    fn filter_uses_product_score() {
        let c = Candidate {
            cxcywh: [10.0, 10.0, 4.0, 4.0],
            obj: 0.5,
            cls: vec![0.2, 0.7, 0.7],
        };
        assert_eq!(c.best(), (1, 0.35));
        assert_eq!(filter_candidates(std::slice::from_ref(&c), 0.3).len(), 1);
        assert!(filter_candidates(&[c], 0.35).is_empty());
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [3.0, 3.0, 4.0, 4.0]), 0.0);
        assert!((iou(a, [1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-7);
        assert_eq!(iou([1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn nms_basics() {
        let one = vec![det(0, 0.3, [0.0, 0.0, 1.0, 1.0])];
        assert_eq!(nms(&one, 0.5), one);
        let b = [0.0, 0.0, 10.0, 10.0];
        let two = vec![det(0, 0.8, b), det(0, 0.9, b)];
        assert_eq!(nms(&two, 0.5), vec![det(0, 0.9, b)]);
        assert!(batched_nms(&[], 0.5).is_empty());
        let classes = vec![det(0, 0.8, b), det(1, 0.9, b)];
        assert_eq!(batched_nms(&classes, 0.5).len(), 2);
        assert_eq!(nms(&classes, 0.5).len(), 2);
    }

    #[test]
    fn ties_keep_input_order() {
        let dets = vec![
            det(1, 0.5, [0.0, 0.0, 1.0, 1.0]),
            det(0, 0.5, [5.0, 5.0, 6.0, 6.0]),
            det(1, 0.5, [0.0, 0.0, 1.0, 1.0]),
        ];
        let out = nms(&dets, 0.5);
        assert_eq!(out, vec![dets[0].clone(), dets[1].clone()]);
        assert_eq!(batched_nms(&dets, 0.5), out);
    }

    #[test]
    fn scale_coords_cases() {
        let d = vec![det(0, 0.5, [100.0, 180.0, 200.0, 280.0])];
        assert_eq!(scale_coords(&d, &LetterboxMeta::identity(640, 640)), d);
        let meta = LetterboxMeta {
            scale: 0.5,
            pad: (0.0, 80.0),
            original_size: (1000, 1000),
        };
        assert_eq!(scale_coords(&d, &meta)[0].bbox, [200.0, 200.0, 400.0, 400.0]);
        let out = scale_coords(&[det(0, 0.5, [-10.0, -10.0, 5000.0, 5000.0])], &meta);
        assert_eq!(out[0].bbox, [0.0, 0.0, 1000.0, 1000.0]);
    }

    /// Reference: repeatedly take the best remaining box and drop every
    /// same-class box overlapping it.
    pub(crate) fn brute_force_nms(dets: &[Detection], t: f32) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; dets.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            for i in 0..dets.len() {
                if dets[i].class_id == dets[b].class_id && iou(dets[i].bbox, dets[b].bbox) > t {
                    alive[i] = false;
                }
            }
            alive[b] = false;
        }
        kept
    }

    fn arb_dets(max: usize, classes: usize) -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0..classes, 0.0f32..1.0, 0.0f32..100.0, 0.0f32..100.0, 1.0f32..40.0, 1.0f32..40.0),
            0..max,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(c, s, x, y, w, h)| det(c, s, [x, y, x + w, y + h]))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(dets in arb_dets(120, 5), t in 0.1f32..0.9) {
            let got = nms(&dets, t);
            let mut want: Vec<Detection> = brute_force_nms(&dets, t).into_iter().map(|i| dets[i].clone()).collect();
            want.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut g = got.clone();
            g.sort_by(|a, b| b.score.total_cmp(&a.score));
            prop_assert_eq!(g.len(), want.len());
            for w in &want {
                prop_assert!(got.contains(w));
            }
            prop_assert!(got.windows(2).all(|p| p[0].score >= p[1].score));
            prop_assert_eq!(batched_nms(&dets, t), got);
        }

        #[test]
        fn scale_coords_round_trip(scale in 0.1f64..3.0, pl in 0.0f64..50.0, pt in 0.0f64..50.0,
                                   x1 in 0.0f32..500.0, y1 in 0.0f32..500.0, w in 0.0f32..100.0, h in 0.0f32..100.0) {
            let meta = LetterboxMeta { scale, pad: (pl, pt), original_size: (601, 601) };
            let orig = [x1, y1, x1 + w, y1 + h];
            let fwd = |v: f32, p: f64| (f64::from(v) * scale + p) as f32;
            let net = det(0, 0.5, [fwd(orig[0], pl), fwd(orig[1], pt), fwd(orig[2], pl), fwd(orig[3], pt)]);
            let back = scale_coords(&[net], &meta);
            for (a, b) in back[0].bbox.iter().zip(orig) {
                prop_assert!((a - b).abs() < 1e-4 * b.max(1.0));
            }
        }

        #[test]
        fn scale_coords_keeps_order(dets in arb_dets(20, 2), scale in 0.1f64..3.0, pad in -50.0f64..50.0) {
            let meta = LetterboxMeta { scale, pad: (pad, -pad), original_size: (40, 70) };
            for d in scale_coords(&dets, &meta) {
                prop_assert!(d.bbox[0] <= d.bbox[2] && d.bbox[1] <= d.bbox[3]);
                prop_assert!(d.bbox[2] <= 70.0 && d.bbox[3] <= 40.0 && d.bbox[0] >= 0.0);
            }
        }
    }
}
