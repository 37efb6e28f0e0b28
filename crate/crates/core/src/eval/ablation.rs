//! Tap-layer sweep with a fixed, frozen detector.

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalOptions};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::nn::ParamStore;
use crate::scenario::Dataset;
use crate::training::{train, Regime, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tap_layer: usize,
    pub tap_shape: (usize, usize, usize),
    pub accuracy: f64,
    pub f1: f64,
    pub accuracy_at_truth: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

/// Sorted, deduplicated layer list; duplicates produce a warning.
pub fn normalize_layers(layers: &[usize]) -> (Vec<usize>, Vec<String>) {
    let mut out = layers.to_vec();
    out.sort_unstable();
    let before = out.len();
    out.dedup();
    let mut warnings = Vec::new();
    if out.len() != before {
        warnings.push(format!("dropped {} duplicate tap layer(s)", before - out.len()));
    }
    (out, warnings)
}

/// One `auxiliary_frozen` run per tap layer on the same data, seed and
/// detector. Every configuration is validated before any training starts.
pub fn ablate_tap_layer(
    dataset: &Dataset,
    base: &ModelConfig,
    detector: &ParamStore<f32>,
    layers: &[usize],
    train_cfg: &TrainConfig,
    eval_opts: &EvalOptions,
) -> Result<AblationTable> {
    let (layers, warnings) = normalize_layers(layers);
    for w in &warnings {
        log::warn!("{w}");
    }
    if layers.len() < 2 {
        return Err(Error::config("layers", "need at least two distinct tap layers"));
    }
    let models: Vec<ModelConfig> = layers.iter().map(|&l| base.clone().with_tap_layer(l)).collect();
    for m in &models {
        m.validate()?;
    }
    let cfg = TrainConfig {
        regime: Regime::AuxiliaryFrozen,
        ..train_cfg.clone()
    };
    let mut rows = Vec::new();
    for (m, &l) in models.iter().zip(&layers) {
        let run = train(
            dataset,
            m,
            &cfg,
            TrainOptions {
                init: Some(detector.clone()),
                ..Default::default()
            },
        )?;
        let metrics = evaluate(&run.params, m, dataset, &dataset.test, eval_opts)?;
        let intent = metrics.intent.expect("intent scored");
        rows.push(AblationRow {
            tap_layer: l,
            tap_shape: m.auxiliary.tap_shape,
            accuracy: intent.accuracy,
            f1: intent.f1,
            accuracy_at_truth: metrics.intent_at_truth.map_or(f64::NAN, |m| m.accuracy),
            final_loss: run.epochs.last().map_or(f64::NAN, |e| e.loss),
        });
    }
    Ok(AblationTable { rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::DatasetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dedup_with_warning() {
        let (l, w) = normalize_layers(&[5, 3, 5, 4]);
        assert_eq!(l, vec![3, 4, 5]);
        assert_eq!(w.len(), 1);
        assert!(normalize_layers(&[3, 4]).1.is_empty());
    }

    fn setup() -> (Dataset, ModelConfig, ParamStore<f32>) {
        let mut cfg = DatasetConfig::desk();
        cfg.n_train = 4;
        cfg.n_test = 8;
        let ds = Dataset::plan(&cfg).unwrap();
        let model = ModelConfig::desk();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (ds, model, store)
    }

    #[test]
    fn invalid_layer_lists_are_config_errors() {
        let (ds, model, store) = setup();
        let r = ablate_tap_layer(&ds, &model, &store, &[5, 8], &TrainConfig::default(), &EvalOptions::default());
        assert!(matches!(r, Err(Error::Config { .. })));
        let r = ablate_tap_layer(&ds, &model, &store, &[5, 5], &TrainConfig::default(), &EvalOptions::default());
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn one_row_per_layer() {
        let (ds, model, store) = setup();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let t = ablate_tap_layer(&ds, &model, &store, &[5, 4, 5], &cfg, &EvalOptions::default()).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.tap_layer).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(t.warnings.len(), 1);
        for r in &t.rows {
            assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.f1));
        }
    }
}
