//! Training regimes: detector only, intention head on a frozen detector,
//! joint multitask, and the crop baseline.

pub mod batch;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batch::{joint_step, Batch, DetectionFrames, StepLosses, StepOut};

use crate::error::{Error, Result};
use crate::models::detector::{apply_bn_updates, Mode};
use crate::models::loss::DetLossTerms;
use crate::eval::{evaluate, EvalOptions, MetricsBundle};
use crate::models::{load_checkpoint, save_checkpoint, ModelConfig, Sidecar, AUX_PREFIX, DETECTOR_PREFIX, SEQ_PREFIX};
use crate::nn::{Optimizer, OptimizerKind, ParamStore};
use crate::scenario::{Dataset, SceneSequence, SequenceEntry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    DetectorOnly,
    AuxiliaryFrozen,
    Multitask,
    /// Crop-sequence baseline classifier.
    Sequential,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::DetectorOnly => "detector_only",
            Regime::AuxiliaryFrozen => "auxiliary_frozen",
            Regime::Multitask => "multitask",
            Regime::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "detector_only" => Ok(Regime::DetectorOnly),
            "auxiliary_frozen" => Ok(Regime::AuxiliaryFrozen),
            "multitask" => Ok(Regime::Multitask),
            "sequential" => Ok(Regime::Sequential),
            other => Err(Error::config("regime", format!("unknown regime {other:?}"))),
        }
    }

    /// Tensor-name prefixes of the networks this regime optimizes.
    fn trains(self) -> &'static [&'static str] {
        match self {
            Regime::DetectorOnly => &[DETECTOR_PREFIX],
            Regime::AuxiliaryFrozen => &[AUX_PREFIX],
            Regime::Multitask => &[DETECTOR_PREFIX, AUX_PREFIX],
            Regime::Sequential => &[SEQ_PREFIX],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    /// Sequences per optimization step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda_det: f64,
    pub lambda_int: f64,
    pub seed: u64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Halve the learning rate after this many epochs without improvement.
    pub plateau_patience: Option<usize>,
    /// Mirror each training sequence left-right with probability 1/2.
    #[serde(default = "default_flip")]
    pub flip_augment: bool,
    /// Frames of each sequence that carry the detection loss.
    #[serde(default)]
    pub detection_frames: DetectionFrames,
}

fn default_flip() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Multitask,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda_det: 1.0,
            lambda_int: 1.0,
            seed: 0,
            grad_clip: Some(5.0),
            plateau_patience: None,
            flip_augment: true,
            detection_frames: DetectionFrames::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.lambda_det >= 0.0 && self.lambda_int >= 0.0) {
            return Err(Error::config("lambda", "loss weights must be non-negative"));
        }
        if self.regime == Regime::Multitask && !(self.lambda_det > 0.0 && self.lambda_int > 0.0) {
            return Err(Error::config("lambda", "multitask needs both loss weights positive"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub regime: Regime,
    pub epoch: usize,
    /// Mean over batches of the weighted total.
    pub loss: f64,
    pub detection: Option<DetLossTerms>,
    pub intent: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub params: ParamStore<f32>,
    pub wall_ms: u64,
}

impl TrainRun {
    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "train": self.config,
            "epochs": self.epochs,
            "wall_ms": self.wall_ms,
        });
        save_checkpoint(path, &self.params, &self.model, meta)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// JSON-lines sink, one record per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Where the last good parameters go if training diverges.
    pub divergence_checkpoint: Option<PathBuf>,
    /// Parameters to start from; required for `auxiliary_frozen`, whose
    /// detector tensors are taken from here and frozen.
    pub init: Option<ParamStore<f32>>,
    /// Stop after this many batches per epoch (smoke tests).
    pub max_batches: Option<usize>,
}

/// Initial parameters for a run: a fresh store seeded by `seed`, with the
/// tensors of `init` copied over where present.
fn initial_params(model: &ModelConfig, cfg: &TrainConfig, init: Option<ParamStore<f32>>) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1417);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng)?;
    if let Some(src) = init {
        let keep: &[&str] = match cfg.regime {
            Regime::AuxiliaryFrozen => &[DETECTOR_PREFIX],
            Regime::Sequential => &[DETECTOR_PREFIX],
            _ => &[DETECTOR_PREFIX, AUX_PREFIX, SEQ_PREFIX],
        };
        for (name, p) in src.iter() {
            if keep.iter().any(|k| name.starts_with(&format!("{k}."))) {
                if !store.contains(name) || store.get(name).shape() != p.value.shape() {
                    return Err(Error::config(
                        "detector_checkpoint",
                        format!("tensor {name} does not fit the model configuration"),
                    ));
                }
                *store.get_mut(name) = p.value.clone();
            }
        }
    } else if cfg.regime == Regime::AuxiliaryFrozen {
        return Err(Error::config(
            "detector_checkpoint",
            "auxiliary_frozen needs a trained detector checkpoint",
        ));
    }
    for prefix in [DETECTOR_PREFIX, AUX_PREFIX, SEQ_PREFIX] {
        store.set_trainable(&format!("{prefix}."), cfg.regime.trains().contains(&prefix));
    }
    Ok(store)
}

/// Eval-mode taps `[C, h, w]` for every frame of one sequence.
pub fn sequence_taps(params: &ParamStore<f32>, model: &ModelConfig, frames: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    let x = Tensor::stack(&refs)?;
    let det = &model.detector;
    det.check_input(&x)?;
    let out = det.forward_blocks(params, &x, 0, det.tap_layer, Mode::Eval, false)?;
    Ok((0..frames.len()).map(|i| out.y.gather_outer(&[i]).reshape(&out.y.shape()[1..]).unwrap()).collect())
}

/// Taps and intention targets of one orientation of every sequence.
#[derive(Default)]
struct Cached {
    taps: Vec<Vec<Tensor<f32>>>,
    intent: Vec<Tensor<f64>>,
    masks: Vec<Tensor<f64>>,
}

/// Plain and, when `flips` is set, mirrored tap caches.
fn cache_taps(
    dataset: &Dataset,
    entries: &[SequenceEntry],
    params: &ParamStore<f32>,
    model: &ModelConfig,
    flips: bool,
) -> Result<[Cached; 2]> {
    let one = |seq: &SceneSequence| -> Result<(Vec<Tensor<f32>>, Tensor<f64>, Tensor<f64>)> {
        let taps = sequence_taps(params, model, &seq.frames)?;
        let enc = crate::grid::encode_targets(&seq.final_objects(), &model.detector.grid);
        Ok((taps, enc.intent, enc.mask))
    };
    let per = entries
        .par_iter()
        .map(|e| {
            let seq = dataset.load(e)?;
            let flipped = if flips { Some(one(&seq.flipped())?) } else { None };
            Ok((one(&seq)?, flipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c: [Cached; 2] = Default::default();
    for (plain, flipped) in per {
        for (slot, item) in [(0, Some(plain)), (1, flipped)] {
            if let Some((t, y, m)) = item {
                c[slot].taps.push(t);
                c[slot].intent.push(y);
                c[slot].masks.push(m);
            }
        }
    }
    Ok(c)
}

fn load_oriented(dataset: &Dataset, entry: &SequenceEntry, flip: bool) -> Result<SceneSequence> {
    let seq = dataset.load(entry)?;
    Ok(if flip { seq.flipped() } else { seq })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs one regime over the training split of `dataset`.
pub fn train(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainRun> {
    cfg.validate()?;
    model.validate()?;
    if dataset.world.image_height != model.detector.image_height
        || dataset.world.image_width != model.detector.image_width
        || dataset.world.seq_len != model.auxiliary.seq_len
    {
        return Err(Error::config("model", "model shapes do not match the dataset"));
    }
    if dataset.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let start = Instant::now();
    let mut params = initial_params(model, cfg, opts.init.take())?;
    let mut opt = Optimizer::<f32>::new(cfg.optimizer, cfg.learning_rate);
    let cached = if cfg.regime == Regime::AuxiliaryFrozen {
        Some(cache_taps(dataset, &dataset.train, &params, model, cfg.flip_augment)?)
    } else {
        None
    };
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let good = params.clone();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(7919).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..dataset.train.len())
            .map(|_| cfg.flip_augment && rng.random_bool(0.5))
            .collect();
        let mut totals = Vec::new();
        let mut det_terms: Vec<DetLossTerms> = Vec::new();
        let mut intents = Vec::new();
        let mut norms = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if opts.max_batches.is_some_and(|m| bi >= m) {
                break;
            }
            let out = match cfg.regime {
                Regime::DetectorOnly | Regime::Multitask => {
                    let seqs = chunk
                        .par_iter()
                        .map(|&i| load_oriented(dataset, &dataset.train[i], flips[i]))
                        .collect::<Result<Vec<_>>>()?;
                    let b = Batch::from_sequences(&seqs, &model.detector.grid)?;
                    let with_intent = cfg.regime == Regime::Multitask;
                    joint_step(&params, model, &b, cfg.lambda_det, cfg.lambda_int, with_intent, cfg.detection_frames)?
                }
                Regime::AuxiliaryFrozen => {
                    let c = cached.as_ref().expect("cached");
                    let src = |i: usize| &c[flips[i] as usize];
                    let t = model.auxiliary.seq_len;
                    let taps = (0..t)
                        .map(|s| {
                            let parts: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &src(i).taps[i][s]).collect();
                            Tensor::stack(&parts)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let ys: Vec<&Tensor<f64>> = chunk.iter().map(|&i| &src(i).intent[i]).collect();
                    let ms: Vec<&Tensor<f64>> = chunk.iter().map(|&i| &src(i).masks[i]).collect();
                    batch::auxiliary_step(&params, model, &taps, (&ys, &ms))?
                }
                Regime::Sequential => {
                    let samples: Vec<_> = chunk
                        .par_iter()
                        .map(|&i| {
                            let seq = load_oriented(dataset, &dataset.train[i], flips[i])?;
                            Ok(batch::sequential_samples(&seq, &model.sequential))
                        })
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .flatten()
                        .collect();
                    batch::sequential_step(&params, &model.sequential, &samples)?
                }
            };
            if !out.losses.total.is_finite() || !out.grads.all_finite() {
                if let Some(path) = &opts.divergence_checkpoint {
                    save_checkpoint(path, &good, model, serde_json::json!({"diverged_epoch": epoch}))?;
                }
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss or gradient in batch {bi}"),
                });
            }
            norms.push(opt.step(&mut params, &out.grads, cfg.grad_clip));
            apply_bn_updates(&mut params, &out.bn_updates);
            totals.push(out.losses.total);
            if let Some(d) = out.losses.detection {
                det_terms.push(d);
            }
            if let Some(i) = out.losses.intent {
                intents.push(i);
            }
        }
        let loss = mean(&totals);
        let detection = (!det_terms.is_empty()).then(|| DetLossTerms {
            objectness: mean(&det_terms.iter().map(|d| d.objectness).collect::<Vec<_>>()),
            class: mean(&det_terms.iter().map(|d| d.class).collect::<Vec<_>>()),
            box_: mean(&det_terms.iter().map(|d| d.box_).collect::<Vec<_>>()),
        });
        let rec = EpochRecord {
            regime: cfg.regime,
            epoch,
            loss,
            detection,
            intent: (!intents.is_empty()).then(|| mean(&intents)),
            lr: opt.lr(),
            grad_norm: mean(&norms),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some(w) = opts.log.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log::info!("{} epoch {} loss {:.5}", cfg.regime.name(), epoch, loss);
        records.push(rec);
        if let Some(patience) = cfg.plateau_patience {
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    opt.set_lr(opt.lr() * 0.5);
                    stale = 0;
                }
            }
        }
    }
    Ok(TrainRun {
        config: cfg.clone(),
        model: model.clone(),
        epochs: records,
        params,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Regime recorded in a checkpoint written by [`TrainRun::save`].
pub fn checkpoint_regime(sidecar: &Sidecar) -> Option<Regime> {
    serde_json::from_value(sidecar.metadata.get("train")?.get("regime")?.clone()).ok()
}

/// Metrics of a saved run on the test split. Runs that never trained an
/// intention head report intention metrics as absent.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset, opts: &EvalOptions) -> Result<MetricsBundle> {
    let (params, sidecar) = load_checkpoint::<f32>(path)?;
    let regime = checkpoint_regime(&sidecar);
    let opts = EvalOptions {
        with_intent: opts.with_intent && !matches!(regime, Some(Regime::DetectorOnly) | Some(Regime::Sequential)),
        ..*opts
    };
    evaluate(&params, &sidecar.model, dataset, &dataset.test, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::DatasetConfig;

    fn tiny_dataset(n: usize) -> Dataset {
        let mut cfg = DatasetConfig::desk();
        cfg.n_train = n;
        cfg.n_test = 2;
        Dataset::plan(&cfg).unwrap()
    }

    fn quick(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = quick(Regime::Multitask);
        c.lambda_int = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        c.regime = Regime::DetectorOnly;
        c.validate().unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn auxiliary_frozen_needs_detector() {
        let ds = tiny_dataset(2);
        let err = train(&ds, &ModelConfig::desk(), &quick(Regime::AuxiliaryFrozen), TrainOptions::default());
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn zero_intent_weight_matches_detector_only_gradients() {
        let ds = tiny_dataset(2);
        let model = ModelConfig::desk();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let entries: Vec<&SequenceEntry> = ds.train.iter().collect();
        let b = Batch::load(&ds, &entries, &model.detector.grid).unwrap();
        for frames in [DetectionFrames::All, DetectionFrames::Final] {
            let det = joint_step(&store, &model, &b, 1.0, 0.0, false, frames).unwrap();
            let multi = joint_step(&store, &model, &b, 1.0, 0.0, true, frames).unwrap();
            for (name, _) in store.iter().filter(|(n, p)| n.starts_with("detector.") && !p.buffer) {
                assert_eq!(det.grads.get(name), multi.grads.get(name), "{name}");
            }
            assert_eq!(det.losses.total, multi.losses.total);
        }
    }

    #[test]
    fn final_frame_mode_ignores_earlier_targets() {
        let ds = tiny_dataset(2);
        let model = ModelConfig::desk();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let entries: Vec<&SequenceEntry> = ds.train.iter().collect();
        let mut b = Batch::load(&ds, &entries, &model.detector.grid).unwrap();
        let before = [DetectionFrames::Final, DetectionFrames::All]
            .map(|f| joint_step(&store, &model, &b, 1.0, 0.0, false, f).unwrap().losses.total);
        for t in &mut b.det_targets[0] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let after = [DetectionFrames::Final, DetectionFrames::All]
            .map(|f| joint_step(&store, &model, &b, 1.0, 0.0, false, f).unwrap().losses.total);
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn joint_loss_is_weighted_sum() {
        let ds = tiny_dataset(2);
        let model = ModelConfig::desk();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let entries: Vec<&SequenceEntry> = ds.train.iter().collect();
        let b = Batch::load(&ds, &entries, &model.detector.grid).unwrap();
        let out = joint_step(&store, &model, &b, 0.7, 1.3, true, DetectionFrames::All).unwrap();
        let det = out.losses.detection.unwrap().total();
        let int = out.losses.intent.unwrap();
        assert_eq!(out.losses.total, 0.7 * det + 1.3 * int);
    }

    #[test]
    fn same_seed_same_first_epoch() {
        let ds = tiny_dataset(4);
        let model = ModelConfig::desk();
        let cfg = quick(Regime::Multitask);
        let a = train(&ds, &model, &cfg, TrainOptions::default()).unwrap();
        let b = train(&ds, &model, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(a.epochs[0].loss.to_bits(), b.epochs[0].loss.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn evaluate_checkpoint_plumbing() {
        let ds = tiny_dataset(2);
        let model = ModelConfig::desk();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            max_batches: Some(1),
            ..Default::default()
        };
        let run = train(&ds, &model, &quick(Regime::DetectorOnly), opts).unwrap();
        let p = dir.path().join("det.ck");
        run.save(&p).unwrap();
        let a = evaluate_checkpoint(&p, &ds, &EvalOptions::default()).unwrap();
        let b = evaluate_checkpoint(&p, &ds, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.intent.is_none());
        let missing = evaluate_checkpoint(&dir.path().join("nope.ck"), &ds, &EvalOptions::default());
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    #[test]
    fn untrained_intent_head_is_at_chance() {
        // 50 balanced test sequences hold about 106 pedestrians; a binomial
        // at p = 0.5 stays inside [0.4, 0.6] with probability above 0.96
        let ds = Dataset::plan(&DatasetConfig::desk()).unwrap();
        let model = ModelConfig::desk();
        let run = train(
            &tiny_dataset(2),
            &model,
            &quick(Regime::DetectorOnly),
            TrainOptions {
                max_batches: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let m = evaluate(&run.params, &model, &ds, &ds.test, &EvalOptions::default()).unwrap();
        let acc = m.intent_at_truth.unwrap().accuracy;
        assert!((0.4..=0.6).contains(&acc), "{acc}");
    }
}
