//! Grid-anchor codec shared by the detection and intention heads.
//!
//! Tensors are row-major `(i, j, k, channel)` with `i` the grid row, `j`
//! the grid column and `k` the anchor. A detection slot holds
//! `[objectness, class_0 .. class_{N_C-1}, tx, ty, tw, th]`:
//!
//! ```text
//! tx = cx / stride - j        ty = cy / stride - i
//! tw = ln(w / anchor_w)       th = ln(h / anchor_h)
//! ```
//!
//! Predictions pass objectness and the center offsets through a logistic.

use serde::{Deserialize, Serialize};

use crate::bbox::{centered_iou, BBox};
use crate::error::{Error, Result};
use crate::nn::activation::sigmoid;
use crate::tensor::{Scalar, Tensor};

/// Index of the "cross" intent class; "not cross" is 0.
pub const INTENT_CROSS: usize = 1;
pub const INTENT_NOT_CROSS: usize = 0;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Largest decoded center offset; keeps a saturated logistic inside its cell.
const MAX_OFFSET: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Rows.
    pub h: usize,
    /// Columns.
    pub w: usize,
    pub stride: usize,
    /// Anchor `(width, height)` in pixels.
    pub anchors: Vec<(f64, f64)>,
    pub n_classes: usize,
    pub n_intents: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl GridSpec {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// `1 + N_C + 4`.
    pub fn det_channels(&self) -> usize {
        1 + self.n_classes + 4
    }

    pub fn image_height(&self) -> usize {
        self.h * self.stride
    }

    pub fn image_width(&self) -> usize {
        self.w * self.stride
    }

    pub fn n_slots(&self) -> usize {
        self.h * self.w * self.n_anchors()
    }

    pub fn slot(&self, cell: CellIndex) -> usize {
        (cell.i * self.w + cell.j) * self.n_anchors() + cell.k
    }

    pub fn cell_of_slot(&self, slot: usize) -> CellIndex {
        let a = self.n_anchors();
        CellIndex {
            i: slot / (self.w * a),
            j: (slot / a) % self.w,
            k: slot % a,
        }
    }

    pub fn validate(&self, image_height: usize, image_width: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("grid.stride", "must be positive"));
        }
        if self.h * self.stride != image_height {
            return Err(Error::config(
                "grid.h",
                format!("{} rows x stride {} != image height {}", self.h, self.stride, image_height),
            ));
        }
        if self.w * self.stride != image_width {
            return Err(Error::config(
                "grid.w",
                format!("{} cols x stride {} != image width {}", self.w, self.stride, image_width),
            ));
        }
        if self.anchors.is_empty() {
            return Err(Error::config("grid.anchors", "need at least one anchor"));
        }
        if self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::config("grid.anchors", "anchor sizes must be positive"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("grid.n_classes", "need at least one class"));
        }
        if self.n_intents != 2 {
            return Err(Error::config("grid.n_intents", "intent head is binary (N_I = 2)"));
        }
        Ok(())
    }
}

/// A ground-truth object for target construction. `intent` is set exactly
/// for pedestrians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub class: usize,
    pub intent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
    pub cell: CellIndex,
}

/// Cell `(i, j)` by floor of the center, anchor `k` by best centered IoU
/// (lowest index wins ties).
pub fn assign_cell_anchor(bbox: &BBox, spec: &GridSpec) -> Result<CellIndex> {
    let s = spec.stride as f64;
    let (ih, iw) = (spec.image_height() as f64, spec.image_width() as f64);
    if !(bbox.cx >= 0.0 && bbox.cx < iw && bbox.cy >= 0.0 && bbox.cy < ih) {
        return Err(Error::Assignment(format!(
            "center ({:.3}, {:.3}) outside {}x{} image",
            bbox.cx, bbox.cy, iw, ih
        )));
    }
    let i = ((bbox.cy / s).floor() as usize).min(spec.h - 1);
    let j = ((bbox.cx / s).floor() as usize).min(spec.w - 1);
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (k, &(aw, ah)) in spec.anchors.iter().enumerate() {
        let iou = centered_iou(bbox.w, bbox.h, aw, ah);
        if iou > best_iou {
            best_iou = iou;
            best = k;
        }
    }
    Ok(CellIndex { i, j, k: best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    /// `[H, W, A, 1 + N_C + 4]`.
    pub detection: Tensor<f64>,
    /// `[H, W, A, N_I]`, one-hot where the mask is set.
    pub intent: Tensor<f64>,
    /// `[H, W, A]`.
    pub mask: Tensor<f64>,
    /// Boxes lost to a larger box at the same `(i, j, k)`.
    pub dropped: usize,
    /// Boxes whose center falls outside the image.
    pub unassignable: usize,
}

impl EncodedTargets {
    pub fn mask_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Builds detection, intent and mask targets. Collisions keep the larger box.
pub fn encode_targets(objects: &[GtObject], spec: &GridSpec) -> EncodedTargets {
    let (a, c) = (spec.n_anchors(), spec.det_channels());
    let mut det = Tensor::zeros(&[spec.h, spec.w, a, c]);
    let mut intent = Tensor::zeros(&[spec.h, spec.w, a, spec.n_intents]);
    let mut mask = Tensor::zeros(&[spec.h, spec.w, a]);
    let mut taken = vec![false; spec.n_slots()];
    let mut dropped = 0;
    let mut unassignable = 0;

    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&x, &y| {
        objects[y]
            .bbox
            .area()
            .partial_cmp(&objects[x].bbox.area())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let s = spec.stride as f64;
    for idx in order {
        let obj = &objects[idx];
        let Ok(cell) = assign_cell_anchor(&obj.bbox, spec) else {
            unassignable += 1;
            continue;
        };
        let slot = spec.slot(cell);
        if taken[slot] {
            dropped += 1;
            continue;
        }
        taken[slot] = true;
        let (aw, ah) = spec.anchors[cell.k];
        let row = &mut det.data_mut()[slot * c..(slot + 1) * c];
        row[0] = 1.0;
        row[1 + obj.class] = 1.0;
        let off = 1 + spec.n_classes;
        row[off] = obj.bbox.cx / s - cell.j as f64;
        row[off + 1] = obj.bbox.cy / s - cell.i as f64;
        row[off + 2] = (obj.bbox.w / aw).ln();
        row[off + 3] = (obj.bbox.h / ah).ln();
        if let Some(it) = obj.intent {
            mask.data_mut()[slot] = 1.0;
            intent.data_mut()[slot * spec.n_intents + it] = 1.0;
        }
    }
    EncodedTargets {
        detection: det,
        intent,
        mask,
        dropped,
        unassignable,
    }
}

/// Converts a detection target into raw logits that decode back to it:
/// objectness and one-hot classes map to `±magnitude`, center offsets
/// through the inverse logistic, log-sizes unchanged.
pub fn target_to_logits(target: &Tensor<f64>, spec: &GridSpec, magnitude: f64) -> Tensor<f64> {
    let c = spec.det_channels();
    let mut raw = target.clone();
    for row in raw.data_mut().chunks_mut(c) {
        let present = row[0] > 0.5;
        row[0] = if present { magnitude } else { -magnitude };
        for v in &mut row[1..1 + spec.n_classes] {
            *v = if *v > 0.5 { magnitude } else { -magnitude };
        }
        if present {
            let off = 1 + spec.n_classes;
            for v in &mut row[off..off + 2] {
                let p = v.clamp(1e-12, 1.0 - 1e-12);
                *v = (p / (1.0 - p)).ln();
            }
        }
    }
    raw
}

/// Decodes a raw `[H, W, A, 1 + N_C + 4]` tensor into thresholded,
/// per-class NMS-filtered detections sorted by descending score.
///
/// Score is objectness probability times the winning class probability.
pub fn decode_predictions<T: Scalar>(
    raw: &Tensor<T>,
    spec: &GridSpec,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let c = spec.det_channels();
    if raw.shape() != [spec.h, spec.w, spec.n_anchors(), c] {
        return Err(Error::Shape(format!(
            "decode expects [{}, {}, {}, {}], got {:?}",
            spec.h,
            spec.w,
            spec.n_anchors(),
            c,
            raw.shape()
        )));
    }
    if !raw.all_finite() {
        return Err(Error::Numeric("non-finite value in raw detection tensor".into()));
    }
    let s = spec.stride as f64;
    let mut candidates = Vec::new();
    for (slot, row) in raw.data().chunks(c).enumerate() {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let obj = sigmoid(row[0]);
        if obj < conf_threshold {
            continue;
        }
        let logits = &row[1..1 + spec.n_classes];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let (class, best) = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &l)| if l > acc.1 { (k, l) } else { acc });
        let score = obj * (best - max).exp() / denom;
        if score < conf_threshold {
            continue;
        }
        let cell = spec.cell_of_slot(slot);
        let (aw, ah) = spec.anchors[cell.k];
        let off = 1 + spec.n_classes;
        let tx = sigmoid(row[off]).min(MAX_OFFSET);
        let ty = sigmoid(row[off + 1]).min(MAX_OFFSET);
        let bbox = BBox::new(
            (cell.j as f64 + tx) * s,
            (cell.i as f64 + ty) * s,
            aw * row[off + 2].exp(),
            ah * row[off + 3].exp(),
        );
        candidates.push(Detection {
            bbox,
            class,
            score,
            cell,
        });
    }
    Ok(nms(candidates, nms_iou))
}

/// Greedy per-class non-maximum suppression. A candidate is dropped when
/// its IoU with an already kept box of the same class exceeds `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cell.cmp(&b.cell))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou)
        {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec {
            h: 6,
            w: 10,
            stride: 32,
            anchors: vec![(16.0, 40.0), (24.0, 56.0), (48.0, 48.0)],
            n_classes: 4,
            n_intents: 2,
        }
    }

    /// Brute force: evaluate every anchor's centered IoU from corner coordinates.
    fn brute_anchor(w: f64, h: f64, anchors: &[(f64, f64)]) -> usize {
        let mut best = (0, -1.0);
        for (k, &(aw, ah)) in anchors.iter().enumerate() {
            let a = BBox::new(0.0, 0.0, w, h);
            let b = BBox::new(0.0, 0.0, aw, ah);
            let iou = a.iou(&b);
            if iou > best.1 {
                best = (k, iou);
            }
        }
        best.0
    }

    #[test]
    fn cell_by_floor() {
        let c = assign_cell_anchor(&BBox::new(96.0, 48.0, 20.0, 48.0), &spec()).unwrap();
        assert_eq!((c.i, c.j), (1, 3));
        let c = assign_cell_anchor(&BBox::new(64.0, 10.0, 20.0, 48.0), &spec()).unwrap();
        assert_eq!(c.j, 2);
    }

    #[test]
    fn anchor_by_centered_iou() {
        let s = spec();
        let want = brute_anchor(20.0, 48.0, &s.anchors);
        assert_eq!(want, 1);
        let c = assign_cell_anchor(&BBox::new(100.0, 100.0, 20.0, 48.0), &s).unwrap();
        assert_eq!(c.k, want);
    }

    #[test]
    fn anchor_ties_take_lowest_index() {
        let mut s = spec();
        s.anchors = vec![(10.0, 10.0), (10.0, 10.0)];
        assert_eq!(assign_cell_anchor(&BBox::new(5.0, 5.0, 10.0, 10.0), &s).unwrap().k, 0);
    }

    #[test]
    fn center_outside_image_fails() {
        assert!(matches!(
            assign_cell_anchor(&BBox::new(320.0, 10.0, 5.0, 5.0), &spec()),
            Err(Error::Assignment(_))
        ));
        assert!(assign_cell_anchor(&BBox::new(-0.1, 10.0, 5.0, 5.0), &spec()).is_err());
    }

    #[test]
    fn empty_annotations_encode_to_zeros() {
        let t = encode_targets(&[], &spec());
        assert!(t.detection.data().iter().all(|&v| v == 0.0));
        assert!(t.intent.data().iter().all(|&v| v == 0.0));
        assert!(t.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_crossing_pedestrian_sets_one_mask_cell() {
        let s = spec();
        let obj = GtObject {
            bbox: BBox::new(100.0, 70.0, 14.0, 36.0),
            class: 0,
            intent: Some(INTENT_CROSS),
        };
        let t = encode_targets(&[obj], &s);
        assert_eq!(t.mask_count(), 1);
        let cell = assign_cell_anchor(&obj.bbox, &s).unwrap();
        let slot = s.slot(cell);
        assert_eq!(t.mask.data()[slot], 1.0);
        assert_eq!(t.intent.data()[slot * 2 + INTENT_CROSS], 1.0);
        assert_eq!(t.intent.data()[slot * 2 + INTENT_NOT_CROSS], 0.0);
    }

    #[test]
    fn collision_keeps_larger_box() {
        let s = spec();
        let small = GtObject {
            bbox: BBox::new(100.0, 70.0, 14.0, 36.0),
            class: 0,
            intent: Some(INTENT_CROSS),
        };
        let large = GtObject {
            bbox: BBox::new(110.0, 80.0, 16.0, 40.0),
            class: 2,
            intent: None,
        };
        let t = encode_targets(&[small, large], &s);
        assert_eq!(t.dropped, 1);
        // the vehicle won the slot, so no intent mask
        assert_eq!(t.mask_count(), 0);
        let slot = s.slot(assign_cell_anchor(&large.bbox, &s).unwrap());
        assert_eq!(t.detection.data()[slot * 9 + 3], 1.0);
    }

    #[test]
    fn round_trip_through_logits() {
        let s = spec();
        let objs = [
            GtObject {
                bbox: BBox::new(100.3, 70.9, 14.2, 36.5),
                class: 0,
                intent: Some(INTENT_NOT_CROSS),
            },
            GtObject {
                bbox: BBox::new(250.0, 150.0, 60.0, 30.0),
                class: 2,
                intent: None,
            },
        ];
        let t = encode_targets(&objs, &s);
        let raw = target_to_logits(&t.detection, &s, 30.0);
        let dets = decode_predictions(&raw, &s, 0.5, 0.45).unwrap();
        assert_eq!(dets.len(), 2);
        for o in &objs {
            let d = dets.iter().find(|d| d.class == o.class).unwrap();
            for (a, b) in [(d.bbox.cx, o.bbox.cx), (d.bbox.cy, o.bbox.cy), (d.bbox.w, o.bbox.w), (d.bbox.h, o.bbox.h)] {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            assert_eq!(d.cell, assign_cell_anchor(&o.bbox, &s).unwrap());
        }
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        let s = spec();
        let raw = Tensor::<f32>::full(&[6, 10, 3, 9], -20.0);
        assert!(decode_predictions(&raw, &s, 0.5, 0.45).unwrap().is_empty());
    }

    #[test]
    fn non_finite_raw_is_numeric_error() {
        let s = spec();
        let mut raw = Tensor::<f32>::zeros(&[6, 10, 3, 9]);
        raw.data_mut()[17] = f32::INFINITY;
        assert!(matches!(decode_predictions(&raw, &s, 0.5, 0.45), Err(Error::Numeric(_))));
    }

    #[test]
    fn nms_keeps_the_stronger_of_two_overlapping_boxes() {
        // two 10x10 boxes offset so that IoU = 0.8: overlap 90/110 needs shift 1.111..
        let shift = 10.0 - 2.0 * 0.8 * 100.0 / (1.8 * 10.0);
        let a = BBox::new(50.0, 50.0, 10.0, 10.0);
        let b = BBox::new(50.0 + shift, 50.0, 10.0, 10.0);
        assert!((a.iou(&b) - 0.8).abs() < 1e-12);
        let cell = CellIndex { i: 1, j: 1, k: 0 };
        let d = |bbox, score| Detection { bbox, class: 0, score, cell };
        let kept = nms(vec![d(b, 0.7), d(a, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        // a different class is never suppressed
        let other = Detection { class: 1, ..d(b, 0.7) };
        assert_eq!(nms(vec![d(a, 0.9), other], 0.5).len(), 2);
    }

    #[test]
    fn paper_preset_shape_law() {
        let s = GridSpec {
            h: 11,
            w: 20,
            stride: 32,
            anchors: vec![(1.0, 1.0); 5],
            n_classes: 4,
            n_intents: 2,
        };
        let t = encode_targets(&[], &s);
        assert_eq!(t.detection.numel(), 9900);
        assert_eq!(t.intent.numel(), 2200);
        s.validate(352, 640).unwrap();
    }
}
