//! Networks, losses and parameter accounting.

pub mod auxiliary;
pub mod checkpoint;
pub mod detector;
pub mod loss;
pub mod sequential;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use auxiliary::{auxiliary_backward, auxiliary_forward, AuxiliaryConfig, AUX_PREFIX};
pub use checkpoint::{file_hash, load_checkpoint, params_digest, save_checkpoint, Sidecar};
pub use detector::{
    apply_bn_updates, detector_forward, from_grid_layout, to_grid_layout, ConvBlockSpec, DetectorConfig, Mode,
    DETECTOR_PREFIX,
};
pub use loss::{detection_loss, intent_loss, DetLossTerms, DetLossWeights};
pub use sequential::{crop_resize, sequential_backward, sequential_forward, SequentialConfig, SEQ_PREFIX};

use crate::error::Result;
use crate::grid::GridSpec;
use crate::nn::ParamStore;
use crate::scenario::{WorldConfig, IMAGE_CHANNELS, N_CLASSES};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub auxiliary: AuxiliaryConfig,
    pub sequential: SequentialConfig,
    pub det_loss: DetLossWeights,
}

/// Desk anchors `(w, h)` in pixels at the 192-pixel scene height.
pub const DESK_ANCHORS: [(f64, f64); 5] = [(10.0, 26.0), (14.0, 36.0), (56.0, 23.0), (40.0, 48.0), (24.0, 24.0)];

fn grid_for(world: &WorldConfig) -> GridSpec {
    let s = world.scale();
    GridSpec {
        h: world.image_height / 32,
        w: world.image_width / 32,
        stride: 32,
        anchors: DESK_ANCHORS.iter().map(|&(w, h)| (w * s, h * s)).collect(),
        n_classes: N_CLASSES,
        n_intents: 2,
    }
}

fn sequential_default(seq_len: usize) -> SequentialConfig {
    SequentialConfig {
        crop_size: (64, 32),
        context: 1.5,
        in_channels: IMAGE_CHANNELS,
        encoder: vec![
            ConvBlockSpec::leaky(32, 3, 2),
            ConvBlockSpec::leaky(64, 3, 2),
            ConvBlockSpec::leaky(128, 3, 2),
            ConvBlockSpec::leaky(128, 3, 1),
        ],
        hidden: 32,
        kernel: (3, 3),
        seq_len,
        forget_bias: 1.0,
    }
}

impl ModelConfig {
    fn assemble(world: &WorldConfig, layers: Vec<ConvBlockSpec>, tap_layer: usize) -> Self {
        let detector = DetectorConfig {
            in_channels: IMAGE_CHANNELS,
            image_height: world.image_height,
            image_width: world.image_width,
            layers,
            tap_layer,
            grid: grid_for(world),
        };
        let auxiliary = AuxiliaryConfig {
            tap_shape: detector.tap_shape(),
            adapter_channels: 32,
            hidden: vec![32, 32, 32],
            kernel: (3, 3),
            seq_len: world.seq_len,
            forget_bias: 1.0,
            grid: detector.grid.clone(),
        };
        ModelConfig {
            detector,
            auxiliary,
            sequential: sequential_default(world.seq_len),
            det_loss: DetLossWeights::default(),
        }
    }

    /// Eight blocks to stride 32 on 192x320 input; tap after block 5
    /// (stride 16, 12x20).
    pub fn desk() -> Self {
        use ConvBlockSpec as B;
        let layers = vec![
            B::leaky_bn(16, 4, 4),
            B::leaky_bn(24, 3, 2),
            B::leaky_bn(24, 3, 1),
            B::leaky_bn(32, 3, 2),
            B::leaky_bn(32, 3, 1),
            B::leaky_bn(64, 3, 2),
            B::leaky_bn(64, 3, 1),
            B::leaky_bn(64, 1, 1),
        ];
        Self::assemble(&WorldConfig::desk(), layers, 5)
    }

    /// 21 blocks on 352x640 input so the tap can sit at block 18 of the
    /// stride-32 stage.
    pub fn paper_shape() -> Self {
        use ConvBlockSpec as B;
        let layers = vec![
            B::leaky_bn(8, 3, 2),
            B::leaky_bn(16, 3, 2),
            B::leaky_bn(16, 3, 1),
            B::leaky_bn(24, 3, 2),
            B::leaky_bn(24, 3, 1),
            B::leaky_bn(16, 1, 1),
            B::leaky_bn(24, 3, 1),
            B::leaky_bn(32, 3, 2),
            B::leaky_bn(32, 3, 1),
            B::leaky_bn(24, 1, 1),
            B::leaky_bn(32, 3, 1),
            B::leaky_bn(32, 3, 1),
            B::leaky_bn(48, 3, 2),
            B::leaky_bn(48, 3, 1),
            B::leaky_bn(32, 1, 1),
            B::leaky_bn(48, 3, 1),
            B::leaky_bn(32, 1, 1),
            B::leaky_bn(48, 3, 1),
            B::leaky_bn(48, 3, 1),
            B::leaky_bn(48, 3, 1),
            B::leaky_bn(48, 1, 1),
        ];
        Self::assemble(&WorldConfig::paper_shape(), layers, 18)
    }

    /// Moves the tap and resizes the intention head's input to match.
    pub fn with_tap_layer(mut self, tap_layer: usize) -> Self {
        self.detector.tap_layer = tap_layer;
        if tap_layer >= 1 && tap_layer <= self.detector.n_blocks() {
            self.auxiliary.tap_shape = self.detector.tap_shape();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.auxiliary.tap_shape != self.detector.tap_shape() {
            return Err(crate::Error::config("auxiliary.tap_shape", "does not match the detector tap"));
        }
        if self.auxiliary.grid != self.detector.grid {
            return Err(crate::Error::config("auxiliary.grid", "differs from the detector grid"));
        }
        self.auxiliary.validate()?;
        self.sequential.validate()
    }

    /// All three networks in one store.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.detector.init(store, rng)?;
        self.auxiliary.init(store, rng)?;
        self.sequential.init(store, rng)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEntry {
    pub count: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: CountEntry,
    pub trainable: usize,
    pub buffers: usize,
    /// Keyed by the first two name segments, e.g. `detector.block03`.
    pub modules: BTreeMap<String, CountEntry>,
    /// Keyed by the first name segment: `detector`, `aux`, `seq`.
    pub networks: BTreeMap<String, CountEntry>,
}

/// Exact element counts and byte sizes, buffers included.
pub fn parameter_count<T: Scalar>(params: &ParamStore<T>) -> ParamCount {
    let width = T::DTYPE.width();
    let mut out = ParamCount::default();
    for (name, p) in params.iter() {
        let n = p.value.numel();
        let add = |e: &mut CountEntry| {
            e.count += n;
            e.bytes += n * width;
        };
        add(&mut out.total);
        if p.buffer {
            out.buffers += n;
        } else if p.trainable {
            out.trainable += n;
        }
        let mut parts = name.split('.');
        let net = parts.next().unwrap_or("").to_string();
        let module = match parts.next() {
            Some(m) if parts.next().is_some() => format!("{net}.{m}"),
            _ => net.clone(),
        };
        add(out.networks.entry(net).or_default());
        add(out.modules.entry(module).or_default());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::ConvGeom;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_conv_count() {
        let g = ConvGeom::square(2, 4, 3, 1);
        let mut s = ParamStore::<f32>::new();
        s.insert("c.weight", Tensor::zeros(&g.weight_shape()), false).unwrap();
        s.insert("c.bias", Tensor::zeros(&[4]), false).unwrap();
        let c = parameter_count(&s);
        assert_eq!(c.total.count, 76);
        assert_eq!(c.total.bytes, 304);
        assert_eq!(parameter_count(&ParamStore::<f32>::new()).total.count, 0);
    }

    #[test]
    fn desk_detector_matches_layer_table() {
        // conv weights k*k*cin*cout; four batchnorm vectors per block
        let table: [(usize, usize, usize); 8] = [
            (4, 3, 16),
            (3, 16, 24),
            (3, 24, 24),
            (3, 24, 32),
            (3, 32, 32),
            (3, 32, 64),
            (3, 64, 64),
            (1, 64, 64),
        ];
        let mut want = 0;
        for (k, ci, co) in table {
            want += k * k * ci * co + 4 * co;
        }
        want += 64 * 45 + 45;
        let cfg = ModelConfig::desk();
        let mut s = ParamStore::<f32>::new();
        cfg.detector.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = parameter_count(&s);
        assert_eq!(c.total.count, want);
        assert_eq!(c.networks["detector"].count, want);
        assert_eq!(c.modules["detector.block08"].count, 64 * 64 + 4 * 64);
    }

    #[test]
    fn presets_validate_and_init() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper_shape()] {
            cfg.validate().unwrap();
            let mut s = ParamStore::<f32>::new();
            cfg.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let c = parameter_count(&s);
            assert_eq!(c.networks.len(), 3);
        }
    }

    #[test]
    fn tap_layer_knob() {
        let cfg = ModelConfig::desk().with_tap_layer(4);
        cfg.validate().unwrap();
        assert_eq!(cfg.auxiliary.tap_shape, (32, 12, 20));
        let cfg = ModelConfig::desk().with_tap_layer(3);
        assert_eq!(cfg.auxiliary.tap_shape, (24, 24, 40));
        cfg.validate().unwrap();
        assert_eq!(cfg.auxiliary.adapter_geom().kh, 7);
        assert!(ModelConfig::desk().with_tap_layer(8).validate().is_err());
    }
}
