//! Intention accuracy/F1 with a height filter, and interpolated mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::IntentAssignment;
use crate::error::{Error, Result};
use crate::grid::{Detection, GtObject, INTENT_CROSS};
use crate::scenario::{ObjectClass, PEDESTRIAN};

pub const MATCH_IOU: f64 = 0.5;

/// Counts on the cross class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Scored ground-truth pedestrians with no matching detection
    /// (already included in `fp`/`fn`).
    pub unmatched: usize,
}

impl Confusion {
    pub fn scored(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
        self.unmatched += o.unmatched;
    }

    pub fn metrics(&self) -> Result<IntentMetrics> {
        let n = self.scored();
        if n == 0 {
            return Err(Error::UndefinedMetrics("no scored pedestrians".into()));
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(IntentMetrics {
            accuracy: ratio(self.tp + self.tn, n),
            f1,
            precision,
            recall,
            confusion: *self,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

/// Scores one frame. Assignments are matched greedily by detection score to
/// ground-truth pedestrians at IoU >= 0.5. Only ground truth taller than
/// `height_filter_px` is scored; a scored pedestrian nobody matched counts
/// as a wrong prediction. Returns the tally and the number of assignments
/// that matched no ground truth.
pub fn tally_intent(assignments: &[IntentAssignment], truth: &[GtObject], height_filter_px: f64) -> (Confusion, usize) {
    let peds: Vec<&GtObject> = truth
        .iter()
        .filter(|g| g.class == PEDESTRIAN && g.intent.is_some())
        .collect();
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by(|&a, &b| assignments[b].detection.score.total_cmp(&assignments[a].detection.score));
    let mut taken = vec![false; peds.len()];
    let mut pred: Vec<Option<bool>> = vec![None; peds.len()];
    let mut stray = 0;
    for &ai in &order {
        let a = &assignments[ai];
        let best = peds
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, p)| (g, p.bbox.iou(&a.detection.bbox)))
            .filter(|(_, iou)| *iou >= MATCH_IOU)
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        match best {
            Some((g, _)) => {
                taken[g] = true;
                pred[g] = Some(a.intent_prob >= 0.5);
            }
            None => stray += 1,
        }
    }
    let mut c = Confusion::default();
    for (g, p) in peds.iter().enumerate() {
        if p.bbox.h <= height_filter_px {
            continue;
        }
        let truth_cross = p.intent == Some(INTENT_CROSS);
        // an unmatched pedestrian gets the opposite of its label
        let said_cross = pred[g].unwrap_or(!truth_cross);
        if pred[g].is_none() {
            c.unmatched += 1;
        }
        match (said_cross, truth_cross) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    (c, stray)
}

/// Accuracy, F1 and counts over a set of frames.
pub fn intent_metrics(frames: &[(Vec<IntentAssignment>, Vec<GtObject>)], height_filter_px: f64) -> Result<IntentMetrics> {
    let mut c = Confusion::default();
    for (a, t) in frames {
        c.merge(&tally_intent(a, t, height_filter_px).0);
    }
    c.metrics()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// AP for every class present in the ground truth.
    pub per_class: BTreeMap<String, f64>,
}

/// 101-point interpolated AP from score-ordered hit flags.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut pr = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope from the right
    for i in (0..pr.len().saturating_sub(1)).rev() {
        pr[i].1 = pr[i].1.max(pr[i + 1].1);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while idx < pr.len() && pr[idx].0 < r {
            idx += 1;
        }
        if idx < pr.len() {
            sum += pr[idx].1;
        }
    }
    sum / 101.0
}

/// Mean AP over classes present in the ground truth. `frames` pairs each
/// image's detections with its ground truth; detections are ranked by score
/// across all images (ties keep input order).
pub fn detection_map(frames: &[(Vec<Detection>, Vec<GtObject>)], n_classes: usize, iou: f64) -> MapResult {
    let mut per_class = BTreeMap::new();
    for class in 0..n_classes {
        let n_gt: usize = frames.iter().map(|(_, g)| g.iter().filter(|o| o.class == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> = frames
            .iter()
            .enumerate()
            .flat_map(|(f, (d, _))| d.iter().filter(|x| x.class == class).map(move |x| (f, x)))
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut taken: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(dets.len());
        for (f, d) in dets {
            let best = frames[f]
                .1
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == class)
                .map(|(gi, g)| (gi, g.bbox.iou(&d.bbox)))
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
            let hit = match best {
                Some((gi, v)) if v >= iou && !taken[f][gi] => {
                    taken[f][gi] = true;
                    true
                }
                _ => false,
            };
            hits.push(hit);
        }
        let name = ObjectClass::from_index(class).map_or_else(|| format!("class{class}"), |c| c.name().to_string());
        per_class.insert(name, interpolated_ap(&hits, n_gt));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapResult { map, per_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::grid::CellIndex;
    use proptest::prelude::*;

    fn gt(cx: f64, h: f64, intent: usize) -> GtObject {
        GtObject {
            bbox: BBox::new(cx, 50.0, h * 0.4, h),
            class: PEDESTRIAN,
            intent: Some(intent),
        }
    }

    fn asg(cx: f64, h: f64, score: f64, p: f64) -> IntentAssignment {
        let cell = CellIndex { i: 0, j: 0, k: 0 };
        IntentAssignment {
            detection: Detection {
                bbox: BBox::new(cx, 50.0, h * 0.4, h),
                class: PEDESTRIAN,
                score,
                cell,
            },
            intent_prob: p,
            cell,
        }
    }

    fn det(cx: f64, class: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, 50.0, 10.0, 20.0),
            class,
            score,
            cell: CellIndex { i: 0, j: 0, k: 0 },
        }
    }

    #[test]
    fn f1_two_thirds() {
        let c = Confusion {
            tp: 2,
            fp: 1,
            fn_: 1,
            ..Default::default()
        };
        let m = c.metrics().unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let zero = Confusion {
            tn: 3,
            ..Default::default()
        };
        assert_eq!(zero.metrics().unwrap().f1, 0.0);
    }

    #[test]
    fn height_filter_is_strict() {
        let truth = vec![gt(20.0, 120.0, INTENT_CROSS), gt(80.0, 121.0, INTENT_CROSS)];
        let a = vec![asg(20.0, 120.0, 0.9, 0.9), asg(80.0, 121.0, 0.9, 0.9)];
        let (c, _) = tally_intent(&a, &truth, 120.0);
        assert_eq!(c.scored(), 1);
        assert_eq!(tally_intent(&a, &truth, 0.0).0.scored(), 2);
    }

    #[test]
    fn all_correct() {
        let truth: Vec<GtObject> = (0..10).map(|i| gt(i as f64 * 40.0, 30.0, i % 2)).collect();
        let a: Vec<IntentAssignment> = (0..10)
            .map(|i| asg(i as f64 * 40.0, 30.0, 0.8, if i % 2 == 1 { 0.7 } else { 0.2 }))
            .collect();
        let m = intent_metrics(&[(a, truth)], 0.0).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn unmatched_truth_is_an_error() {
        let truth = vec![gt(20.0, 30.0, INTENT_CROSS), gt(100.0, 30.0, 0)];
        let (c, stray) = tally_intent(&[asg(200.0, 30.0, 0.9, 0.9)], &truth, 0.0);
        assert_eq!((c.fn_, c.fp, c.unmatched, stray), (1, 1, 2, 1));
        assert_eq!(c.metrics().unwrap().accuracy, 0.0);
    }

    #[test]
    fn empty_set_is_undefined() {
        assert!(matches!(intent_metrics(&[], 0.0), Err(Error::UndefinedMetrics(_))));
        let truth = vec![gt(20.0, 30.0, 0)];
        assert!(matches!(intent_metrics(&[(vec![], truth)], 40.0), Err(Error::UndefinedMetrics(_))));
    }

    #[test]
    fn greedy_match_prefers_higher_score() {
        let truth = vec![gt(20.0, 30.0, INTENT_CROSS)];
        let a = vec![asg(21.0, 30.0, 0.6, 0.1), asg(22.0, 30.0, 0.9, 0.9)];
        let (c, stray) = tally_intent(&a, &truth, 0.0);
        assert_eq!((c.tp, stray), (1, 1));
    }

    #[test]
    fn map_perfect_and_empty() {
        let truth = vec![GtObject {
            bbox: BBox::new(20.0, 50.0, 10.0, 20.0),
            class: 0,
            intent: Some(0),
        }];
        let r = detection_map(&[(vec![det(20.0, 0, 0.9)], truth.clone())], 4, 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(detection_map(&[(vec![], truth)], 4, 0.5).map, 0.0);
    }

    #[test]
    fn map_staircase() {
        let g = |cx| GtObject {
            bbox: BBox::new(cx, 50.0, 10.0, 20.0),
            class: 2,
            intent: None,
        };
        let frames = vec![(vec![det(20.0, 2, 0.9), det(200.0, 2, 0.8), det(100.0, 2, 0.7)], vec![g(20.0), g(100.0)])];
        // ranks: TP (r .5, p 1), FP (r .5, p .5), TP (r 1, p 2/3)
        // envelope: 1 for r <= .5, 2/3 above; 51 and 50 sample points
        let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let r = detection_map(&frames, 4, 0.5);
        assert!((r.map - want).abs() < 1e-9);
        assert!((r.per_class["vehicle"] - want).abs() < 1e-9);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let truth = vec![GtObject {
            bbox: BBox::new(20.0, 50.0, 10.0, 20.0),
            class: 0,
            intent: None,
        }];
        let r = detection_map(&[(vec![det(20.0, 0, 0.9), det(20.0, 0, 0.8)], truth)], 4, 0.5);
        assert_eq!(r.map, 1.0);
    }

    fn frame_strategy() -> impl Strategy<Value = (Vec<Detection>, Vec<GtObject>)> {
        (
            prop::collection::vec((0.0f64..300.0, 0usize..2, 0.01f64..1.0), 0..12),
            prop::collection::vec((0.0f64..300.0, 0usize..2), 1..8),
        )
            .prop_map(|(d, g)| {
                (
                    d.into_iter().map(|(x, c, s)| det(x, c, s)).collect(),
                    g.into_iter()
                        .map(|(x, c)| GtObject {
                            bbox: BBox::new(x, 50.0, 10.0, 20.0),
                            class: c,
                            intent: None,
                        })
                        .collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn ap_bounded_and_low_fp_harmless(frame in frame_strategy(), fx in 400.0f64..500.0) {
            let before = detection_map(std::slice::from_ref(&frame), 2, 0.5);
            for v in before.per_class.values() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let (mut d, g) = frame.clone();
            let min = d.iter().map(|x| x.score).fold(1.0, f64::min);
            d.push(det(fx, 0, min * 0.5));
            let after = detection_map(&[(d, g)], 2, 0.5);
            prop_assert!(after.map <= before.map + 1e-12);
            prop_assert_eq!(detection_map(std::slice::from_ref(&frame), 2, 0.5), before);
        }

        #[test]
        fn filter_monotone(hs in prop::collection::vec(10.0f64..60.0, 1..10), lo in 0.0f64..60.0, extra in 0.0f64..30.0) {
            let truth: Vec<GtObject> = hs.iter().enumerate().map(|(i, &h)| gt(i as f64 * 80.0, h, i % 2)).collect();
            let a: Vec<IntentAssignment> = hs.iter().enumerate().map(|(i, &h)| asg(i as f64 * 80.0, h, 0.9, 0.7)).collect();
            let n_lo = tally_intent(&a, &truth, lo).0.scored();
            let n_hi = tally_intent(&a, &truth, lo + extra).0.scored();
            prop_assert!(n_hi <= n_lo);
            let m1 = intent_metrics(&[(a.clone(), truth.clone())], 0.0).unwrap();
            let m2 = intent_metrics(&[(a, truth)], 0.0).unwrap();
            prop_assert_eq!(m1, m2);
            prop_assert!((0.0..=1.0).contains(&m1.accuracy) && (0.0..=1.0).contains(&m1.f1));
        }
    }
}
