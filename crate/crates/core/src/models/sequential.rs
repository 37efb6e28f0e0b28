//! Crop-then-classify baseline: a small conv encoder applied to each
//! pedestrian crop, one ConvLSTM layer over the `t` encoded crops, global
//! average pooling and a linear unit producing one crossing logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::detector::{block_dims, block_geoms, ConvBlockSpec};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvCache};
use crate::nn::convlstm::{cell_backward, cell_forward, CellCache};
use crate::nn::params::he_normal;
use crate::nn::{ConvLstmLayer, Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const SEQ_PREFIX: &str = "seq";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialConfig {
    /// `(height, width)` every crop is resampled to.
    pub crop_size: (usize, usize),
    /// Crop window relative to the box size.
    pub context: f64,
    pub in_channels: usize,
    /// Conv blocks with bias; batchnorm is not supported here.
    pub encoder: Vec<ConvBlockSpec>,
    pub hidden: usize,
    pub kernel: (usize, usize),
    pub seq_len: usize,
    pub forget_bias: f64,
}

impl SequentialConfig {
    pub fn encoded_shape(&self) -> (usize, usize, usize) {
        let geoms = block_geoms(self.in_channels, &self.encoder);
        let (h, w) = *block_dims(self.crop_size.0, self.crop_size.1, &geoms).last().expect("encoder");
        (self.encoder.last().expect("encoder").out_channels, h, w)
    }

    pub fn recurrent(&self) -> ConvLstmLayer {
        let (c, _, _) = self.encoded_shape();
        ConvLstmLayer::new(format!("{SEQ_PREFIX}.recurrent"), c, self.hidden, self.kernel.0, self.kernel.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::config("encoder", "needs at least one block"));
        }
        if self.encoder.iter().any(|b| b.batchnorm) {
            return Err(Error::config("encoder", "batchnorm is not supported in the crop encoder"));
        }
        if self.hidden == 0 || self.seq_len == 0 {
            return Err(Error::config("hidden", "hidden and seq_len must be positive"));
        }
        if self.context < 1.0 {
            return Err(Error::config("context", "crop window must contain the box"));
        }
        let (_, h, w) = self.encoded_shape();
        if h == 0 || w == 0 {
            return Err(Error::config("crop_size", "encoder reduces the crop to nothing"));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for (idx, g) in block_geoms(self.in_channels, &self.encoder).iter().enumerate() {
            let p = format!("{SEQ_PREFIX}.encoder{:02}", idx + 1);
            store.insert(
                format!("{p}.weight"),
                he_normal(&g.weight_shape(), g.patch_len(), 1.0, rng),
                false,
            )?;
            store.insert(format!("{p}.bias"), Tensor::zeros(&[g.c_out]), false)?;
        }
        self.recurrent().init(store, self.forget_bias, rng)?;
        store.insert(
            format!("{SEQ_PREFIX}.head.weight"),
            he_normal(&[self.hidden], self.hidden, 0.5, rng),
            false,
        )?;
        store.insert(format!("{SEQ_PREFIX}.head.bias"), Tensor::zeros(&[1]), false)
    }
}

pub struct SeqCache<T> {
    /// `encoder[t][block]` with the post-activation output.
    encoder: Vec<Vec<(ConvCache<T>, Tensor<T>)>>,
    cells: Vec<CellCache<T>>,
    h_final: Tensor<T>,
}

fn encode<T: Scalar>(
    params: &ParamStore<T>,
    config: &SequentialConfig,
    x: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Vec<(ConvCache<T>, Tensor<T>)>)> {
    let mut y = x.clone();
    let mut caches = Vec::new();
    for (idx, (spec, g)) in config
        .encoder
        .iter()
        .zip(block_geoms(config.in_channels, &config.encoder))
        .enumerate()
    {
        let p = format!("{SEQ_PREFIX}.encoder{:02}", idx + 1);
        let (z, cache) = conv2d_forward(
            &y,
            params.get(&format!("{p}.weight")),
            Some(params.get(&format!("{p}.bias"))),
            &g,
            keep,
        )?;
        y = spec.activation.forward(z);
        if let Some(c) = cache {
            caches.push((c, y.clone()));
        }
    }
    Ok((y, caches))
}

/// One logit per track from `t` crop batches of shape `[P, C, ch, cw]`.
pub fn sequential_forward<T: Scalar>(
    crop_seq: &[Tensor<T>],
    params: &ParamStore<T>,
    config: &SequentialConfig,
    keep: bool,
) -> Result<(Tensor<T>, Option<SeqCache<T>>)> {
    if crop_seq.is_empty() {
        return Err(Error::Input("empty track".into()));
    }
    if crop_seq.len() != config.seq_len {
        return Err(Error::config(
            "seq_len",
            format!("expected {} crops, got {}", config.seq_len, crop_seq.len()),
        ));
    }
    let p = crop_seq[0].dim(0);
    let (ch, cw) = config.crop_size;
    for c in crop_seq {
        if c.shape() != [p, config.in_channels, ch, cw] {
            return Err(Error::Shape(format!(
                "crop batch {:?}, expected [{p}, {}, {ch}, {cw}]",
                c.shape(),
                config.in_channels
            )));
        }
    }
    let layer = config.recurrent();
    let (_, eh, ew) = config.encoded_shape();
    let (mut h, mut c) = layer.zero_state::<T>(p, eh, ew);
    let mut enc_caches = Vec::new();
    let mut cells = Vec::new();
    for crops in crop_seq {
        let (x, ec) = encode(params, config, crops, keep)?;
        let (h_new, c_new, cache) = cell_forward(&layer, params, &x, &h, &c, keep)?;
        h = h_new;
        c = c_new;
        if keep {
            enc_caches.push(ec);
            cells.push(cache.expect("kept"));
        }
    }
    let hw = eh * ew;
    let inv = T::c(1.0 / hw as f64);
    let wv = params.get(&format!("{SEQ_PREFIX}.head.weight")).data();
    let b = params.get(&format!("{SEQ_PREFIX}.head.bias")).data()[0];
    let logits: Vec<T> = (0..p)
        .map(|i| {
            let hi = h.outer(i);
            let mut z = b;
            for (k, &wk) in wv.iter().enumerate() {
                z += wk * hi[k * hw..(k + 1) * hw].iter().copied().sum::<T>() * inv;
            }
            z
        })
        .collect();
    let cache = keep.then_some(SeqCache {
        encoder: enc_caches,
        cells,
        h_final: h,
    });
    Ok((Tensor::from_vec(&[p], logits)?, cache))
}

pub fn sequential_backward<T: Scalar>(
    params: &ParamStore<T>,
    config: &SequentialConfig,
    cache: &SeqCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut Grads<T>,
) {
    let layer = config.recurrent();
    let (_, eh, ew) = config.encoded_shape();
    let hw = eh * ew;
    let p = dlogits.numel();
    let inv = T::c(1.0 / hw as f64);
    let wv = params.get(&format!("{SEQ_PREFIX}.head.weight"));
    let mut dw = Tensor::zeros(&[config.hidden]);
    let mut dh = Tensor::zeros(cache.h_final.shape());
    for i in 0..p {
        let g = dlogits.data()[i];
        let hi = cache.h_final.outer(i);
        let dhi = dh.outer_mut(i);
        for k in 0..config.hidden {
            dw.data_mut()[k] += g * hi[k * hw..(k + 1) * hw].iter().copied().sum::<T>() * inv;
            dhi[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v = g * wv.data()[k] * inv);
        }
    }
    grads.accumulate(&format!("{SEQ_PREFIX}.head.weight"), dw);
    grads.accumulate(
        &format!("{SEQ_PREFIX}.head.bias"),
        Tensor::from_vec(&[1], vec![dlogits.sum()]).unwrap(),
    );
    let geoms = block_geoms(config.in_channels, &config.encoder);
    let mut dc = Tensor::zeros(cache.h_final.shape());
    for t in (0..cache.cells.len()).rev() {
        let g = cell_backward(&layer, params, &cache.cells[t], &dh, &dc);
        dh = g.dh_prev;
        dc = g.dc_prev;
        grads.accumulate(&layer.weight_name(), g.dw);
        grads.accumulate(&layer.bias_name(), g.db);
        let mut d = g.dx;
        for (idx, (cc, out)) in cache.encoder[t].iter().enumerate().rev() {
            let name = format!("{SEQ_PREFIX}.encoder{:02}", idx + 1);
            let dz = config.encoder[idx].activation.backward(d, out);
            let cg = conv2d_backward(&dz, cc, params.get(&format!("{name}.weight")), &geoms[idx], idx > 0);
            grads.accumulate(&format!("{name}.weight"), cg.dw);
            grads.accumulate(&format!("{name}.bias"), cg.db);
            match cg.dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

/// Bilinear resample of the window `context * box` (same center) from a
/// `[C, H, W]` frame to `[C, out_h, out_w]`. Samples outside the frame read
/// the nearest edge pixel.
pub fn crop_resize(frame: &Tensor<f32>, bbox: &BBox, context: f64, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    let (bw, bh) = (bbox.w * context, bbox.h * context);
    let (x0, y0) = (bbox.cx - 0.5 * bw, bbox.cy - 0.5 * bh);
    let src = frame.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let fy = (y0 + (oy as f64 + 0.5) * bh / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let iy = (fy.floor() as usize).min(h.saturating_sub(2));
        let ay = (fy - iy as f64) as f32;
        for ox in 0..out_w {
            let fx = (x0 + (ox as f64 + 0.5) * bw / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let ix = (fx.floor() as usize).min(w.saturating_sub(2));
            let ax = (fx - ix as f64) as f32;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = p(iy, ix) * (1.0 - ax) + p(iy, ix + 1) * ax;
                let bot = p(iy + 1, ix) * (1.0 - ax) + p(iy + 1, ix + 1) * ax;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_even_odds() {
        let cfg = ModelConfig::desk().sequential;
        let mut store = ParamStore::<f32>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (ch, cw) = cfg.crop_size;
        let crops = vec![Tensor::full(&[2, 3, ch, cw], 0.4f32); cfg.seq_len];
        let (z, _) = sequential_forward(&crops, &store, &cfg, false).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identical_tracks_identical_logits() {
        let cfg = ModelConfig::desk().sequential;
        let mut store = ParamStore::<f32>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (ch, cw) = cfg.crop_size;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let crops: Vec<Tensor<f32>> = (0..cfg.seq_len)
            .map(|_| {
                let one: Vec<f32> = (0..3 * ch * cw).map(|_| rng.random()).collect();
                let mut two = one.clone();
                two.extend(one);
                Tensor::from_vec(&[2, 3, ch, cw], two).unwrap()
            })
            .collect();
        let (z, _) = sequential_forward(&crops, &store, &cfg, false).unwrap();
        assert_eq!(z.data()[0], z.data()[1]);
        let (z2, _) = sequential_forward(&crops, &store, &cfg, false).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn empty_track_is_input_error() {
        let cfg = ModelConfig::desk().sequential;
        let store = ParamStore::<f32>::new();
        assert!(matches!(
            sequential_forward(&[], &store, &cfg, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn crop_of_constant_frame_is_constant() {
        let frame = Tensor::full(&[3, 20, 30], 0.25f32);
        let crop = crop_resize(&frame, &BBox::new(2.0, 3.0, 10.0, 12.0), 1.5, 8, 4);
        assert_eq!(crop.shape(), &[3, 8, 4]);
        assert!(crop.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn crop_identity_when_window_matches_frame() {
        let data: Vec<f32> = (0..3 * 6 * 8).map(|v| v as f32).collect();
        let frame = Tensor::from_vec(&[3, 6, 8], data).unwrap();
        let crop = crop_resize(&frame, &BBox::from_corners(0.0, 0.0, 8.0, 6.0), 1.0, 6, 8);
        assert_eq!(crop, frame);
    }
}
