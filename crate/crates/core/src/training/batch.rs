//! Batch assembly and the per-batch loss/gradient computations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grid::{encode_targets, GridSpec};
use crate::models::detector::{BnUpdate, Mode};
use crate::models::{
    auxiliary_backward, auxiliary_forward, crop_resize, detection_loss, from_grid_layout, intent_loss,
    sequential_backward, sequential_forward, to_grid_layout, DetLossTerms, ModelConfig, SequentialConfig,
};
use crate::nn::activation::{sigmoid, softplus};
use crate::nn::{Grads, ParamStore};
use crate::scenario::{Dataset, ObjectClass, SceneSequence, SequenceEntry};
use crate::tensor::Tensor;

/// Which frames of a sequence carry the detection loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionFrames {
    Final,
    #[default]
    All,
}

/// Frames and targets for a group of sequences.
pub struct Batch {
    /// `frames[step]` is `[B, C, H, W]`.
    pub frames: Vec<Tensor<f32>>,
    /// `det_targets[step][b]`.
    pub det_targets: Vec<Vec<Tensor<f64>>>,
    /// Final-frame intention targets and masks, one per sequence.
    pub intent_targets: Vec<Tensor<f64>>,
    pub masks: Vec<Tensor<f64>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.masks.len()
    }

    pub fn from_sequences(seqs: &[SceneSequence], spec: &GridSpec) -> Result<Self> {
        let t = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != t) {
            return Err(Error::Input("sequences in a batch differ in length".into()));
        }
        let frames = (0..t)
            .map(|step| {
                let parts: Vec<&Tensor<f32>> = seqs.iter().map(|s| &s.frames[step]).collect();
                Tensor::stack(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        let det_targets = (0..t)
            .map(|step| {
                seqs.iter()
                    .map(|s| {
                        let objs: Vec<_> = s.annotations[step].iter().map(|a| a.to_gt()).collect();
                        encode_targets(&objs, spec).detection
                    })
                    .collect()
            })
            .collect();
        let mut intent_targets = Vec::new();
        let mut masks = Vec::new();
        for s in seqs {
            let enc = encode_targets(&s.final_objects(), spec);
            intent_targets.push(enc.intent);
            masks.push(enc.mask);
        }
        Ok(Batch {
            frames,
            det_targets,
            intent_targets,
            masks,
        })
    }

    pub fn load(dataset: &Dataset, entries: &[&SequenceEntry], spec: &GridSpec) -> Result<Self> {
        let seqs = entries
            .par_iter()
            .map(|e| dataset.load(e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_sequences(&seqs, spec)
    }

    /// All `B * t` frames, step-major.
    pub fn all_frames(&self) -> Result<Tensor<f32>> {
        let parts: Vec<&Tensor<f32>> = self.frames.iter().collect();
        Tensor::concat_outer(&parts)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub detection: Option<DetLossTerms>,
    pub intent: Option<f64>,
    pub masked_cells: usize,
}

pub struct StepOut {
    pub losses: StepLosses,
    pub grads: Grads<f32>,
    pub bn_updates: Vec<BnUpdate<f32>>,
}

fn split_steps(x: &Tensor<f32>, steps: usize) -> Vec<Tensor<f32>> {
    let b = x.dim(0) / steps;
    (0..steps)
        .map(|s| x.gather_outer(&(s * b..(s + 1) * b).collect::<Vec<_>>()))
        .collect()
}

/// Training-mode detector over all `B * t` frames with the detection loss
/// on `det_frames` and/or the intention loss from the tap sequence.
/// The returned total is `lambda_det * L_det + lambda_int * L_int`, with
/// `L_det` averaged over the supervised frames.
pub fn joint_step(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    batch: &Batch,
    lambda_det: f64,
    lambda_int: f64,
    with_intent: bool,
    det_frames: DetectionFrames,
) -> Result<StepOut> {
    let det = &model.detector;
    let t = batch.frames.len();
    let b = batch.size();
    let l = det.tap_layer;
    let all = batch.all_frames()?;
    det.check_input(&all)?;
    let lower = det.forward_blocks(params, &all, 0, l, Mode::Train, true)?;
    let taps = split_steps(&lower.y, t);
    let (upper_in, first_step) = match det_frames {
        DetectionFrames::Final => (&taps[t - 1], t - 1),
        DetectionFrames::All => (&lower.y, 0),
    };

    let upper = det.forward_blocks(params, upper_in, l, det.n_blocks(), Mode::Train, true)?;
    let (head, head_cache) = det.forward_head(params, &upper.y, true)?;
    let raw = to_grid_layout(&head, det.grid.n_anchors(), det.grid.det_channels());
    let trefs: Vec<&Tensor<f64>> = batch.det_targets[first_step..].iter().flatten().collect();
    let dl = detection_loss(&raw, &trefs, &det.grid, model.det_loss)?;

    let mut grads = Grads::new();
    let mut dhead = from_grid_layout(&dl.grads);
    dhead.scale(lambda_det as f32);
    let dup = det.backward_head(params, &head_cache.expect("kept"), &dhead, &mut grads);
    let dupper = det
        .backward_blocks(params, &upper.caches, l, dup, &mut grads, true)
        .expect("dx");

    let mut dtaps: Vec<Tensor<f32>> = match det_frames {
        DetectionFrames::Final => {
            let mut d: Vec<Tensor<f32>> = taps.iter().map(|x| Tensor::zeros(x.shape())).collect();
            d[t - 1] = dupper;
            d
        }
        DetectionFrames::All => split_steps(&dupper, t),
    };

    let mut losses = StepLosses {
        total: lambda_det * dl.loss,
        detection: Some(dl.terms),
        ..Default::default()
    };
    if with_intent {
        let (logits, cache) = auxiliary_forward(&taps, params, &model.auxiliary, true)?;
        let z = to_grid_layout(&logits, det.grid.n_anchors(), det.grid.n_intents);
        let ys: Vec<&Tensor<f64>> = batch.intent_targets.iter().collect();
        let ms: Vec<&Tensor<f64>> = batch.masks.iter().collect();
        let il = intent_loss(&z, &ys, &ms)?;
        let mut dz = from_grid_layout(&il.grads);
        dz.scale(lambda_int as f32);
        let dx = auxiliary_backward(params, &model.auxiliary, &cache.expect("kept"), &dz, &mut grads, true)
            .expect("dx");
        for (acc, d) in dtaps.iter_mut().zip(&dx) {
            acc.add_assign(d);
        }
        losses.total += lambda_int * il.loss;
        losses.intent = Some(il.loss);
        losses.masked_cells = il.terms.masked_cells;
    }
    let refs: Vec<&Tensor<f32>> = dtaps.iter().collect();
    let dtap_all = Tensor::concat_outer(&refs)?;
    det.backward_blocks(params, &lower.caches, 0, dtap_all, &mut grads, false);

    let mut bn_updates = lower.bn_updates;
    bn_updates.extend(upper.bn_updates);
    debug_assert_eq!(b * t, all.dim(0));
    Ok(StepOut {
        losses,
        grads,
        bn_updates,
    })
}

/// Intention loss on precomputed tap sequences (`taps[step]` is
/// `[B, C, h, w]`); the detector is not involved.
pub fn auxiliary_step(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    taps: &[Tensor<f32>],
    batch_targets: (&[&Tensor<f64>], &[&Tensor<f64>]),
) -> Result<StepOut> {
    let grid = &model.detector.grid;
    let (logits, cache) = auxiliary_forward(taps, params, &model.auxiliary, true)?;
    let z = to_grid_layout(&logits, grid.n_anchors(), grid.n_intents);
    let il = intent_loss(&z, batch_targets.0, batch_targets.1)?;
    let mut grads = Grads::new();
    auxiliary_backward(
        params,
        &model.auxiliary,
        &cache.expect("kept"),
        &from_grid_layout(&il.grads),
        &mut grads,
        false,
    );
    Ok(StepOut {
        losses: StepLosses {
            total: il.loss,
            intent: Some(il.loss),
            masked_cells: il.terms.masked_cells,
            ..Default::default()
        },
        grads,
        bn_updates: Vec::new(),
    })
}

/// Crop windows for one track, reusing the nearest visible box for frames
/// where the track is out of view.
pub fn track_crops(seq: &SceneSequence, boxes: &[Option<BBox>], cfg: &SequentialConfig) -> Option<Vec<Tensor<f32>>> {
    let first = boxes.iter().flatten().next()?;
    let mut last = *first;
    let (ch, cw) = cfg.crop_size;
    Some(
        seq.frames
            .iter()
            .zip(boxes)
            .map(|(f, b)| {
                if let Some(b) = b {
                    last = *b;
                }
                crop_resize(f, &last, cfg.context, ch, cw)
            })
            .collect(),
    )
}

/// Crop sequences and labels (1 = cross) for every pedestrian visible in
/// the final frame.
pub fn sequential_samples(seq: &SceneSequence, cfg: &SequentialConfig) -> Vec<(Vec<Tensor<f32>>, f64)> {
    seq.final_annotations()
        .iter()
        .filter(|a| a.class == ObjectClass::Pedestrian)
        .filter_map(|a| {
            let crops = track_crops(seq, &seq.track_boxes(a.track_id), cfg)?;
            let y = if a.intent.class_index() == Some(crate::grid::INTENT_CROSS) { 1.0 } else { 0.0 };
            Some((crops, y))
        })
        .collect()
}

/// Mean logistic loss of the baseline over a set of tracks.
pub fn sequential_step(
    params: &ParamStore<f32>,
    cfg: &SequentialConfig,
    samples: &[(Vec<Tensor<f32>>, f64)],
) -> Result<StepOut> {
    if samples.is_empty() {
        return Ok(StepOut {
            losses: StepLosses::default(),
            grads: Grads::new(),
            bn_updates: Vec::new(),
        });
    }
    let t = samples[0].0.len();
    let crop_seq = (0..t)
        .map(|step| {
            let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.0[step]).collect();
            Tensor::stack(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    let (z, cache) = sequential_forward(&crop_seq, params, cfg, true)?;
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(samples.len());
    for (&zi, s) in z.data().iter().zip(samples) {
        let zi = zi as f64;
        loss += (softplus(zi) - s.1 * zi) / n;
        dz.push(((sigmoid(zi) - s.1) / n) as f32);
    }
    let mut grads = Grads::new();
    sequential_backward(params, cfg, &cache.expect("kept"), &Tensor::from_vec(&[samples.len()], dz)?, &mut grads);
    Ok(StepOut {
        losses: StepLosses {
            total: loss,
            intent: Some(loss),
            masked_cells: samples.len(),
            ..Default::default()
        },
        grads,
        bn_updates: Vec::new(),
    })
}
