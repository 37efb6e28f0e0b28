//! Test-split evaluation of a parameter snapshot.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{detection_map, tally_intent, Confusion, IntentMetrics, MATCH_IOU};
use crate::association::{associate, IntentAssignment};
use crate::error::Result;
use crate::grid::{assign_cell_anchor, decode_predictions, Detection, GtObject, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::models::detector::Mode;
use crate::models::{auxiliary_forward, to_grid_layout, ModelConfig};
use crate::nn::ParamStore;
use crate::scenario::{Dataset, SequenceEntry, PEDESTRIAN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Detection threshold for the intention pipeline.
    pub conf: f64,
    /// Lower threshold used to trace the precision-recall curve.
    pub map_conf: f64,
    pub nms_iou: f64,
    pub height_filter_px: f64,
    /// Whether the intention head is scored at all.
    pub with_intent: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            conf: DEFAULT_CONF_THRESHOLD,
            map_conf: 0.01,
            nms_iou: DEFAULT_NMS_IOU,
            height_filter_px: 0.0,
            with_intent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    /// Intention scored on detected pedestrians; absent when the run has
    /// no trained intention head.
    pub intent: Option<IntentMetrics>,
    /// Intention scored at the ground-truth pedestrians' own cells, with
    /// no dependence on the detector.
    pub intent_at_truth: Option<IntentMetrics>,
    pub detection_map: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub height_filter_px: f64,
    /// Pedestrian assignments that matched no ground truth, i.e. intention
    /// read from cells never supervised for that scene.
    pub low_confidence_assignments: usize,
    pub n_sequences: usize,
}

struct PerSequence {
    dets: Vec<Detection>,
    truth: Vec<GtObject>,
    assignments: Vec<IntentAssignment>,
    at_truth: Vec<IntentAssignment>,
}

/// Detections (at `map_conf`) and, when enabled, intention assignments for
/// one sequence.
fn run_sequence(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    frames: &[Tensor<f32>],
    opts: &EvalOptions,
) -> Result<(Vec<Detection>, Option<Tensor<f32>>)> {
    let det = &model.detector;
    let t = frames.len();
    let refs: Vec<&Tensor<f32>> = if opts.with_intent {
        frames.iter().collect()
    } else {
        vec![&frames[t - 1]]
    };
    let x = Tensor::stack(&refs)?;
    det.check_input(&x)?;
    let lower = det.forward_blocks(params, &x, 0, det.tap_layer, Mode::Eval, false)?;
    let n = refs.len();
    let taps: Vec<Tensor<f32>> = (0..n).map(|i| lower.y.gather_outer(&[i])).collect();
    let upper = det.forward_blocks(params, &taps[n - 1], det.tap_layer, det.n_blocks(), Mode::Eval, false)?;
    let (head, _) = det.forward_head(params, &upper.y, false)?;
    let raw = to_grid_layout(&head, det.grid.n_anchors(), det.grid.det_channels());
    let dets = decode_predictions(&raw[0], &det.grid, opts.map_conf, opts.nms_iou)?;
    let intent = if opts.with_intent {
        let (logits, _) = auxiliary_forward(&taps, params, &model.auxiliary, false)?;
        Some(to_grid_layout(&logits, det.grid.n_anchors(), det.grid.n_intents).remove(0))
    } else {
        None
    };
    Ok((dets, intent))
}

/// Metrics for `params` over `entries`. Sequences are processed in
/// parallel and reduced in entry order, so results do not depend on the
/// worker count.
pub fn evaluate(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    dataset: &Dataset,
    entries: &[SequenceEntry],
    opts: &EvalOptions,
) -> Result<MetricsBundle> {
    let grid = &model.detector.grid;
    let per: Vec<PerSequence> = entries
        .par_iter()
        .map(|e| {
            let seq = dataset.load(e)?;
            let truth = seq.final_objects();
            let (dets, intent) = run_sequence(params, model, &seq.frames, opts)?;
            let (assignments, at_truth) = match &intent {
                Some(z) => {
                    let confident: Vec<Detection> = dets.iter().filter(|d| d.score >= opts.conf).copied().collect();
                    let oracle: Vec<Detection> = truth
                        .iter()
                        .filter(|g| g.class == PEDESTRIAN)
                        .filter_map(|g| {
                            let cell = assign_cell_anchor(&g.bbox, grid).ok()?;
                            Some(Detection {
                                bbox: g.bbox,
                                class: PEDESTRIAN,
                                score: 1.0,
                                cell,
                            })
                        })
                        .collect();
                    (associate(&confident, z), associate(&oracle, z))
                }
                None => (Vec::new(), Vec::new()),
            };
            Ok(PerSequence {
                dets,
                truth,
                assignments,
                at_truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut intent = None;
    let mut at_truth = None;
    let mut stray = 0;
    if opts.with_intent {
        let mut c = Confusion::default();
        let mut o = Confusion::default();
        for p in &per {
            let (ci, s) = tally_intent(&p.assignments, &p.truth, opts.height_filter_px);
            c.merge(&ci);
            stray += s;
            o.merge(&tally_intent(&p.at_truth, &p.truth, opts.height_filter_px).0);
        }
        intent = Some(c.metrics()?);
        at_truth = Some(o.metrics()?);
    }
    let frames: Vec<(Vec<Detection>, Vec<GtObject>)> = per.into_iter().map(|p| (p.dets, p.truth)).collect();
    let map = detection_map(&frames, grid.n_classes, MATCH_IOU);
    Ok(MetricsBundle {
        intent,
        intent_at_truth: at_truth,
        detection_map: map.map,
        per_class_ap: map.per_class,
        height_filter_px: opts.height_filter_px,
        low_confidence_assignments: stray,
        n_sequences: entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::DatasetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Dataset, ModelConfig, ParamStore<f32>) {
        let mut cfg = DatasetConfig::desk();
        cfg.n_train = 2;
        cfg.n_test = 12;
        let ds = Dataset::plan(&cfg).unwrap();
        let model = ModelConfig::desk();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (ds, model, store)
    }

    #[test]
    fn repeatable_and_bounded() {
        let (ds, model, store) = small();
        let a = evaluate(&store, &model, &ds, &ds.test, &EvalOptions::default()).unwrap();
        let b = evaluate(&store, &model, &ds, &ds.test, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.detection_map));
        let m = a.intent_at_truth.unwrap();
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert_eq!(a.n_sequences, 12);
    }

    #[test]
    fn detector_only_has_no_intent() {
        let (ds, model, store) = small();
        let opts = EvalOptions {
            with_intent: false,
            ..Default::default()
        };
        let a = evaluate(&store, &model, &ds, &ds.test, &opts).unwrap();
        assert!(a.intent.is_none() && a.intent_at_truth.is_none());
    }
}
