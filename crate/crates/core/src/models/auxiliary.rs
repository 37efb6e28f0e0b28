//! Intention head: strided adapter from the tap resolution down to the
//! grid, a stacked ConvLSTM scan over the `t` tap maps, and a 1x1 head on
//! the final hidden state of the top layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGeom};
use crate::nn::convlstm::{cell_backward, cell_forward, CellCache};
use crate::nn::params::he_normal;
use crate::nn::{Activation, ConvLstmLayer, Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const AUX_PREFIX: &str = "aux";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryConfig {
    /// `(channels, height, width)` of the tap features.
    pub tap_shape: (usize, usize, usize),
    pub adapter_channels: usize,
    /// Hidden channels per ConvLSTM layer, bottom first.
    pub hidden: Vec<usize>,
    pub kernel: (usize, usize),
    pub seq_len: usize,
    pub forget_bias: f64,
    pub grid: GridSpec,
}

impl AuxiliaryConfig {
    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Tap-to-grid downsampling factor.
    pub fn factor(&self) -> usize {
        self.tap_shape.1 / self.grid.h
    }

    /// Kernel `2s - 1`, stride `s`, padding `s - 1`: maps `s * H` to `H`.
    pub fn adapter_geom(&self) -> ConvGeom {
        let s = self.factor();
        ConvGeom {
            c_in: self.tap_shape.0,
            c_out: self.adapter_channels,
            kh: 2 * s - 1,
            kw: 2 * s - 1,
            stride: s,
            pad_h: s - 1,
            pad_w: s - 1,
        }
    }

    pub fn layers(&self) -> Vec<ConvLstmLayer> {
        let mut c_in = self.adapter_channels;
        self.hidden
            .iter()
            .enumerate()
            .map(|(l, &hid)| {
                let layer = ConvLstmLayer::new(format!("{AUX_PREFIX}.lstm{l}"), c_in, hid, self.kernel.0, self.kernel.1);
                c_in = hid;
                layer
            })
            .collect()
    }

    pub fn head_geom(&self) -> ConvGeom {
        let top = *self.hidden.last().expect("at least one layer");
        ConvGeom::square(top, self.grid.n_anchors() * self.grid.n_intents, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers() != 3 {
            return Err(Error::config("hidden", "the intention head has exactly 3 ConvLSTM layers"));
        }
        self.validate_structure()
    }

    /// Checks everything except the fixed layer count.
    pub fn validate_structure(&self) -> Result<()> {
        let (_, th, tw) = self.tap_shape;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "hidden channels must be positive"));
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return Err(Error::config("kernel", "ConvLSTM kernel must be odd to preserve spatial dims"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        if th < self.grid.h || tw < self.grid.w {
            return Err(Error::config("tap_layer", "tap features are spatially smaller than the grid"));
        }
        let s = th / self.grid.h;
        if th != s * self.grid.h || tw != s * self.grid.w {
            return Err(Error::config(
                "tap_layer",
                format!("tap {th}x{tw} is not an integer multiple of grid {}x{}", self.grid.h, self.grid.w),
            ));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let g = self.adapter_geom();
        store.insert(
            format!("{AUX_PREFIX}.adapter.weight"),
            he_normal(&g.weight_shape(), g.patch_len(), 1.0, rng),
            false,
        )?;
        store.insert(format!("{AUX_PREFIX}.adapter.bias"), Tensor::zeros(&[g.c_out]), false)?;
        for layer in self.layers() {
            layer.init(store, self.forget_bias, rng)?;
        }
        let h = self.head_geom();
        store.insert(
            format!("{AUX_PREFIX}.head.weight"),
            he_normal(&h.weight_shape(), h.patch_len(), 0.5, rng),
            false,
        )?;
        store.insert(format!("{AUX_PREFIX}.head.bias"), Tensor::zeros(&[h.c_out]), false)
    }
}

pub struct AuxCache<T> {
    adapter: Vec<(ConvCache<T>, Tensor<T>)>,
    /// `cells[t][layer]`.
    cells: Vec<Vec<CellCache<T>>>,
    head: ConvCache<T>,
    batch: usize,
}

/// Logits `[B, A * N_I, H, W]` from `t` tap maps of shape `[B, C, h, w]`.
pub fn auxiliary_forward<T: Scalar>(
    feature_seq: &[Tensor<T>],
    params: &ParamStore<T>,
    config: &AuxiliaryConfig,
    keep: bool,
) -> Result<(Tensor<T>, Option<AuxCache<T>>)> {
    if feature_seq.len() != config.seq_len {
        return Err(Error::config(
            "seq_len",
            format!("expected {} feature maps, got {}", config.seq_len, feature_seq.len()),
        ));
    }
    let (c, th, tw) = config.tap_shape;
    let b = feature_seq[0].dim(0);
    for f in feature_seq {
        if f.shape() != [b, c, th, tw] {
            return Err(Error::config(
                "tap_shape",
                format!("expected [{b}, {c}, {th}, {tw}], got {:?}", f.shape()),
            ));
        }
    }
    let ag = config.adapter_geom();
    let aw = params.get(&format!("{AUX_PREFIX}.adapter.weight"));
    let ab = params.get(&format!("{AUX_PREFIX}.adapter.bias"));
    let layers = config.layers();
    let (gh, gw) = (config.grid.h, config.grid.w);
    let mut state: Vec<(Tensor<T>, Tensor<T>)> = layers.iter().map(|l| l.zero_state(b, gh, gw)).collect();
    let mut adapter_caches = Vec::new();
    let mut cell_caches = Vec::new();
    for f in feature_seq {
        let (z, ac) = conv2d_forward(f, aw, Some(ab), &ag, keep)?;
        let mut x = Activation::Leaky.forward(z);
        if keep {
            adapter_caches.push((ac.expect("kept"), x.clone()));
        }
        let mut step = Vec::new();
        for (layer, st) in layers.iter().zip(state.iter_mut()) {
            let (h, c_new, cache) = cell_forward(layer, params, &x, &st.0, &st.1, keep)?;
            if let Some(cache) = cache {
                step.push(cache);
            }
            x = h.clone();
            *st = (h, c_new);
        }
        if keep {
            cell_caches.push(step);
        }
    }
    let top = &state.last().expect("layers").0;
    let (logits, head_cache) = conv2d_forward(
        top,
        params.get(&format!("{AUX_PREFIX}.head.weight")),
        Some(params.get(&format!("{AUX_PREFIX}.head.bias"))),
        &config.head_geom(),
        keep,
    )?;
    let cache = head_cache.map(|head| AuxCache {
        adapter: adapter_caches,
        cells: cell_caches,
        head,
        batch: b,
    });
    Ok((logits, cache))
}

/// Backpropagation through time. Returns the gradient for each tap map
/// when `need_dx`.
pub fn auxiliary_backward<T: Scalar>(
    params: &ParamStore<T>,
    config: &AuxiliaryConfig,
    cache: &AuxCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Option<Vec<Tensor<T>>> {
    let hg = config.head_geom();
    let hc = conv2d_backward(
        dlogits,
        &cache.head,
        params.get(&format!("{AUX_PREFIX}.head.weight")),
        &hg,
        true,
    );
    grads.accumulate(&format!("{AUX_PREFIX}.head.weight"), hc.dw);
    grads.accumulate(&format!("{AUX_PREFIX}.head.bias"), hc.db);

    let layers = config.layers();
    let n_layers = layers.len();
    let (gh, gw) = (config.grid.h, config.grid.w);
    let b = cache.batch;
    let mut dh: Vec<Tensor<T>> = layers.iter().map(|l| Tensor::zeros(&[b, l.hidden, gh, gw])).collect();
    let mut dc: Vec<Tensor<T>> = dh.clone();
    dh[n_layers - 1] = hc.dx.expect("requested");

    let ag = config.adapter_geom();
    let aw = params.get(&format!("{AUX_PREFIX}.adapter.weight"));
    let mut dw_layers: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; n_layers];
    let mut d_features = vec![None; cache.cells.len()];
    for t in (0..cache.cells.len()).rev() {
        let mut below: Option<Tensor<T>> = None;
        for l in (0..n_layers).rev() {
            let mut dh_l = std::mem::replace(&mut dh[l], Tensor::zeros(&[0]));
            if let Some(extra) = below.take() {
                dh_l.add_assign(&extra);
            }
            let g = cell_backward(&layers[l], params, &cache.cells[t][l], &dh_l, &dc[l]);
            dh[l] = g.dh_prev;
            dc[l] = g.dc_prev;
            match &mut dw_layers[l] {
                Some((w, bias)) => {
                    w.add_assign(&g.dw);
                    bias.add_assign(&g.db);
                }
                slot => *slot = Some((g.dw, g.db)),
            }
            below = Some(g.dx);
        }
        let (ac, a_out) = &cache.adapter[t];
        let dz = Activation::Leaky.backward(below.expect("layers"), a_out);
        let cg = conv2d_backward(&dz, ac, aw, &ag, need_dx);
        grads.accumulate(&format!("{AUX_PREFIX}.adapter.weight"), cg.dw);
        grads.accumulate(&format!("{AUX_PREFIX}.adapter.bias"), cg.db);
        d_features[t] = cg.dx;
    }
    for (layer, slot) in layers.iter().zip(dw_layers) {
        if let Some((w, bias)) = slot {
            grads.accumulate(&layer.weight_name(), w);
            grads.accumulate(&layer.bias_name(), bias);
        }
    }
    need_dx.then(|| d_features.into_iter().map(|d| d.expect("requested")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::detector::to_grid_layout;
    use crate::models::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq(cfg: &AuxiliaryConfig, b: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = cfg.tap_shape;
        (0..cfg.seq_len)
            .map(|_| Tensor::from_vec(&[b, c, h, w], (0..b * c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect()
    }

    fn small() -> AuxiliaryConfig {
        let mut cfg = ModelConfig::desk().auxiliary;
        cfg.seq_len = 3;
        cfg
    }

    #[test]
    fn paper_shape_logits() {
        let cfg = ModelConfig::paper_shape().auxiliary;
        cfg.validate().unwrap();
        let mut store = ParamStore::<f32>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (c, h, w) = cfg.tap_shape;
        let seq = vec![Tensor::full(&[1, c, h, w], 0.1f32); cfg.seq_len];
        let (logits, _) = auxiliary_forward(&seq, &store, &cfg, false).unwrap();
        let grid = to_grid_layout(&logits, 5, 2);
        assert_eq!(grid[0].shape(), &[11, 20, 5, 2]);
    }

    #[test]
    fn wrong_sequence_length_is_config_error() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let seq = random_seq(&cfg, 1, 1);
        assert!(matches!(
            auxiliary_forward(&seq[..2], &store, &cfg, false),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn earlier_frames_matter() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let seq = random_seq(&cfg, 1, 2);
        let mut swapped = seq.clone();
        swapped.swap(0, 1);
        let (a, _) = auxiliary_forward(&seq, &store, &cfg, false).unwrap();
        let (b, _) = auxiliary_forward(&swapped, &store, &cfg, false).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a, b);
    }

    #[test]
    fn single_frame_is_feedforward() {
        // With zero states the recurrent weights see only zeros, so the
        // output is unchanged when they are scrambled.
        let mut cfg = small();
        cfg.seq_len = 1;
        let mut store = ParamStore::<f64>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let seq = random_seq(&cfg, 2, 3);
        let (a, _) = auxiliary_forward(&seq, &store, &cfg, false).unwrap();
        for layer in cfg.layers() {
            let g = layer.geom();
            let w = store.get_mut(&layer.weight_name());
            let hw = g.kh * g.kw;
            for o in 0..g.c_out {
                for ci in layer.c_in..g.c_in {
                    for k in 0..hw {
                        w.data_mut()[(o * g.c_in + ci) * hw + k] = 123.0;
                    }
                }
            }
        }
        let (b, _) = auxiliary_forward(&seq, &store, &cfg, false).unwrap();
        assert_eq!(a, b);
    }
}
