//! Run configuration: a preset, overlaid with a TOML file, overlaid with
//! command-line flags.

use std::fs;
use std::path::Path;

use crossnet::eval::{BenchOptions, EvalOptions, DEFAULT_COUNTS};
use crossnet::models::ModelConfig;
use crossnet::scenario::DatasetConfig;
use crossnet::training::TrainConfig;
use crossnet::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub counts: Vec<usize>,
    #[serde(flatten)]
    pub options: BenchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (dataset, model) = match p {
            Preset::Desk => (DatasetConfig::desk(), ModelConfig::desk()),
            Preset::PaperShape => (DatasetConfig::paper_shape(), ModelConfig::paper_shape()),
        };
        RunConfig {
            preset: p,
            dataset,
            model,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            bench: BenchConfig {
                counts: DEFAULT_COUNTS.to_vec(),
                options: BenchOptions::default(),
            },
        }
    }

    /// The preset named in the file (or `fallback`), with every key the
    /// file sets replacing the preset value.
    pub fn load(path: Option<&Path>, fallback: Preset) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::preset(fallback));
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", format!("{}: {e}", path.display())))?;
        let preset = match file.get("preset") {
            Some(v) => Preset::deserialize(v.clone())
                .map_err(|e| Error::config("preset", e.to_string()))?,
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).expect("presets serialise");
        merge(&mut base, file);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let w = &self.dataset.world;
        let d = &self.model.detector;
        if (w.image_height, w.image_width) != (d.image_height, d.image_width) {
            return Err(Error::config("model.detector", "image size differs from dataset.world"));
        }
        if w.seq_len != self.model.auxiliary.seq_len || w.seq_len != self.model.sequential.seq_len {
            return Err(Error::config("model", "sequence length differs from dataset.world.seq_len"));
        }
        if self.bench.counts.is_empty() {
            return Err(Error::config("bench.counts", "must not be empty"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes the merged configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(EFFECTIVE_CONFIG);
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))
    }
}

/// Recursive table overlay; non-table values in `top` replace `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Desk, Preset::PaperShape] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_overrides_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[train]\nepochs = 3\nseed = 9\n[dataset]\nn_train = 10\n").unwrap();
        let c = RunConfig::load(Some(&p), Preset::Desk).unwrap();
        assert_eq!((c.train.epochs, c.train.seed, c.dataset.n_train), (3, 9, 10));
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn preset_key_in_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "preset = \"paper-shape\"\n").unwrap();
        let c = RunConfig::load(Some(&p), Preset::Desk).unwrap();
        assert_eq!(c.model.detector.grid.h, 11);
    }

    #[test]
    fn unknown_value_type_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[train]\nepochs = \"many\"\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), Preset::Desk), Err(Error::Config { .. })));
    }
}
