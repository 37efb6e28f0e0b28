//! Joining detections with the intention grid, and the two end-to-end
//! inference pipelines.

mod demo;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use demo::{render_demo, write_demo_png};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grid::{decode_predictions, CellIndex, Detection, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU, INTENT_CROSS};
use crate::models::detector::Mode;
use crate::models::{auxiliary_forward, sequential_forward, to_grid_layout, ModelConfig};
use crate::nn::activation::sigmoid;
use crate::nn::ParamStore;
use crate::scenario::{AgentState, ObjectClass, PEDESTRIAN};
use crate::tensor::{Scalar, Tensor};
use crate::training::batch::track_crops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentAssignment {
    pub detection: Detection,
    /// Probability of crossing.
    pub intent_prob: f64,
    pub cell: CellIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub conf: f64,
    pub nms_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            conf: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// Wall time per stage in nanoseconds; stages a pipeline does not have
/// stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detector_ns: u64,
    pub decode_ns: u64,
    pub auxiliary_ns: u64,
    pub associate_ns: u64,
    pub crop_ns: u64,
    pub classifier_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub detections: Vec<Detection>,
    pub assignments: Vec<IntentAssignment>,
    pub timings: StageTimings,
    /// Runs of the intention network (once per sequence for the
    /// single-shot pipeline, once per pedestrian for the sequential one).
    pub intent_invocations: usize,
}

/// Softmax probability of crossing at one `[.., N_I]` slot.
fn cross_prob<T: Scalar>(slot: &[T]) -> f64 {
    let z: Vec<f64> = slot.iter().map(|v| v.to_f64().unwrap()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    e[INTENT_CROSS] / e.iter().sum::<f64>()
}

/// One lookup per pedestrian detection at its own `(i, j, k)` slot of the
/// `[H, W, A, N_I]` logits. Other classes are skipped; order is kept.
///
/// Panics if a detection carries a cell outside the grid.
pub fn associate<T: Scalar>(detections: &[Detection], intent_logits: &Tensor<T>) -> Vec<IntentAssignment> {
    let s = intent_logits.shape();
    assert_eq!(s.len(), 4, "intent logits must be [H, W, A, N_I]");
    let (h, w, a, ni) = (s[0], s[1], s[2], s[3]);
    detections
        .iter()
        .filter(|d| d.class == PEDESTRIAN)
        .map(|d| {
            let c = d.cell;
            assert!(c.i < h && c.j < w && c.k < a, "cell {c:?} outside {h}x{w}x{a} grid");
            let off = ((c.i * w + c.j) * a + c.k) * ni;
            IntentAssignment {
                detection: *d,
                intent_prob: cross_prob(&intent_logits.data()[off..off + ni]),
                cell: c,
            }
        })
        .collect()
}

fn ns(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

fn check_frames(frames: &[Tensor<f32>], model: &ModelConfig) -> Result<Tensor<f32>> {
    if frames.len() != model.auxiliary.seq_len {
        return Err(Error::config(
            "seq_len",
            format!("expected {} frames, got {}", model.auxiliary.seq_len, frames.len()),
        ));
    }
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    let x = Tensor::stack(&refs)?;
    model.detector.check_input(&x)?;
    Ok(x)
}

/// Detector lower layers on every frame, upper layers and decode on the
/// final frame, intention head once over the taps, then the lookup.
pub fn pipeline_single_shot(
    frames: &[Tensor<f32>],
    params: &ParamStore<f32>,
    model: &ModelConfig,
    thr: Thresholds,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    let x = check_frames(frames, model)?;
    let det = &model.detector;
    let t = frames.len();

    let t0 = Instant::now();
    let lower = det.forward_blocks(params, &x, 0, det.tap_layer, Mode::Eval, false)?;
    let taps: Vec<Tensor<f32>> = (0..t).map(|i| lower.y.gather_outer(&[i])).collect();
    let upper = det.forward_blocks(params, &taps[t - 1], det.tap_layer, det.n_blocks(), Mode::Eval, false)?;
    let (head, _) = det.forward_head(params, &upper.y, false)?;
    let raw = to_grid_layout(&head, det.grid.n_anchors(), det.grid.det_channels());
    let detector_ns = ns(t0);

    let t1 = Instant::now();
    let detections = decode_predictions(&raw[0], &det.grid, thr.conf, thr.nms_iou)?;
    let decode_ns = ns(t1);

    let t2 = Instant::now();
    let (logits, _) = auxiliary_forward(&taps, params, &model.auxiliary, false)?;
    let grid_logits = to_grid_layout(&logits, det.grid.n_anchors(), det.grid.n_intents);
    let auxiliary_ns = ns(t2);

    let t3 = Instant::now();
    let assignments = associate(&detections, &grid_logits[0]);
    let associate_ns = ns(t3);

    Ok(PipelineOutput {
        detections,
        assignments,
        timings: StageTimings {
            detector_ns,
            decode_ns,
            auxiliary_ns,
            associate_ns,
            total_ns: ns(start),
            ..Default::default()
        },
        intent_invocations: 1,
    })
}

/// Past boxes for a detected pedestrian from the ground-truth track whose
/// final box overlaps it most; a detection with no overlapping track is
/// treated as static. The final box is always the detection itself.
fn track_for(det: &Detection, annotations: &[Vec<AgentState>]) -> Vec<Option<BBox>> {
    let last = annotations.last().map(Vec::as_slice).unwrap_or(&[]);
    let best = last
        .iter()
        .filter(|a| a.class == ObjectClass::Pedestrian)
        .map(|a| (a.bbox().iou(&det.bbox), a.track_id))
        .filter(|(iou, _)| *iou > 0.0)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
    let n = annotations.len();
    let mut boxes: Vec<Option<BBox>> = match best {
        Some((_, id)) => annotations
            .iter()
            .map(|f| f.iter().find(|a| a.track_id == id).map(AgentState::bbox))
            .collect(),
        None => vec![None; n],
    };
    if let Some(b) = boxes.last_mut() {
        *b = Some(det.bbox);
    }
    boxes
}

/// Detector and decode on the final frame, then one crop-sequence
/// classifier run per pedestrian detection. `on_invoke` is called before
/// each classifier run.
pub fn pipeline_sequential(
    frames: &[Tensor<f32>],
    annotations: &[Vec<AgentState>],
    params: &ParamStore<f32>,
    model: &ModelConfig,
    thr: Thresholds,
    mut on_invoke: Option<&mut dyn FnMut()>,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    if frames.len() != model.sequential.seq_len || annotations.len() != frames.len() {
        return Err(Error::config(
            "seq_len",
            format!(
                "expected {} frames with annotations, got {} frames and {} annotation lists",
                model.sequential.seq_len,
                frames.len(),
                annotations.len()
            ),
        ));
    }
    let det = &model.detector;
    let x = Tensor::stack(&[&frames[frames.len() - 1]])?;
    det.check_input(&x)?;

    let t0 = Instant::now();
    let out = det.forward_blocks(params, &x, 0, det.n_blocks(), Mode::Eval, false)?;
    let (head, _) = det.forward_head(params, &out.y, false)?;
    let raw = to_grid_layout(&head, det.grid.n_anchors(), det.grid.det_channels());
    let detector_ns = ns(t0);

    let t1 = Instant::now();
    let detections = decode_predictions(&raw[0], &det.grid, thr.conf, thr.nms_iou)?;
    let decode_ns = ns(t1);

    let seq = crate::scenario::SceneSequence {
        frames: frames.to_vec(),
        annotations: annotations.to_vec(),
        seed: 0,
        light_red: None,
    };
    let mut crop_ns = 0;
    let mut classifier_ns = 0;
    let mut assignments = Vec::new();
    for d in detections.iter().filter(|d| d.class == PEDESTRIAN) {
        let tc = Instant::now();
        let crops = track_crops(&seq, &track_for(d, annotations), &model.sequential)
            .ok_or_else(|| Error::Input("empty track".into()))?;
        let crop_seq: Vec<Tensor<f32>> = crops.iter().map(|c| Tensor::stack(&[c])).collect::<Result<_>>()?;
        crop_ns += ns(tc);
        if let Some(hook) = on_invoke.as_deref_mut() {
            hook();
        }
        let tk = Instant::now();
        let (z, _) = sequential_forward(&crop_seq, params, &model.sequential, false)?;
        classifier_ns += ns(tk);
        assignments.push(IntentAssignment {
            detection: *d,
            intent_prob: sigmoid(z.data()[0] as f64),
            cell: d.cell,
        });
    }
    let invocations = assignments.len();
    Ok(PipelineOutput {
        detections,
        assignments,
        timings: StageTimings {
            detector_ns,
            decode_ns,
            crop_ns,
            classifier_ns,
            total_ns: ns(start),
            ..Default::default()
        },
        intent_invocations: invocations,
    })
}
