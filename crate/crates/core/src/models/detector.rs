//! Plain convolutional grid detector with a feature tap after block `L`.
//!
//! Blocks are numbered from 1. The tap is the post-batchnorm,
//! post-activation output of block `tap_layer`, so the network splits into
//! a lower part (blocks `1..=L`, run on every frame) and an upper part
//! (blocks `L+1..` plus the 1x1 head, run on the final frame only).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::batchnorm::{bn_backward, bn_forward_eval, bn_forward_train, update_running, BnCache};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGeom};
use crate::nn::params::he_normal;
use crate::nn::{Activation, Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batchnorm: bool,
    pub activation: Activation,
}

impl ConvBlockSpec {
    pub fn leaky_bn(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvBlockSpec {
            out_channels,
            kernel,
            stride,
            batchnorm: true,
            activation: Activation::Leaky,
        }
    }

    pub fn leaky(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvBlockSpec {
            batchnorm: false,
            ..Self::leaky_bn(out_channels, kernel, stride)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub layers: Vec<ConvBlockSpec>,
    /// 1-based index of the block whose output feeds the auxiliary head.
    pub tap_layer: usize,
    pub grid: GridSpec,
}

/// Input interval covered by one output position: `o * jump - offset ..=
/// o * jump - offset + size - 1` along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub offset: usize,
}

impl ReceptiveField {
    pub fn span(&self, o: usize) -> (isize, isize) {
        let lo = (o * self.jump) as isize - self.offset as isize;
        (lo, lo + self.size as isize - 1)
    }
}

pub(crate) fn block_geoms(in_channels: usize, layers: &[ConvBlockSpec]) -> Vec<ConvGeom> {
    let mut c = in_channels;
    layers
        .iter()
        .map(|l| {
            let g = ConvGeom::square(c, l.out_channels, l.kernel, l.stride);
            c = l.out_channels;
            g
        })
        .collect()
}

/// Spatial dims after each block.
pub(crate) fn block_dims(h: usize, w: usize, geoms: &[ConvGeom]) -> Vec<(usize, usize)> {
    let mut hw = (h, w);
    geoms
        .iter()
        .map(|g| {
            hw = g.out_hw(hw.0, hw.1);
            hw
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

/// Batch statistics to fold into the running estimates after a
/// training-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn apply_bn_updates<T: Scalar>(params: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        update_running(params.get_mut(&format!("{}.running_mean", u.prefix)), &u.mean);
        update_running(params.get_mut(&format!("{}.running_var", u.prefix)), &u.var);
    }
}

pub struct BlocksOut<T> {
    pub y: Tensor<T>,
    pub caches: Vec<BlockCache<T>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

pub const DETECTOR_PREFIX: &str = "detector";

impl DetectorConfig {
    pub fn n_blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn geoms(&self) -> Vec<ConvGeom> {
        block_geoms(self.in_channels, &self.layers)
    }

    pub fn head_geom(&self) -> ConvGeom {
        let c = self.layers.last().map_or(self.in_channels, |l| l.out_channels);
        ConvGeom::square(c, self.grid.n_anchors() * self.grid.det_channels(), 1, 1)
    }

    /// Spatial dims after each block.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        block_dims(self.image_height, self.image_width, &self.geoms())
    }

    /// `(channels, height, width)` of the output of 1-based block `l`.
    pub fn block_shape(&self, l: usize) -> (usize, usize, usize) {
        let (h, w) = self.dims()[l - 1];
        (self.layers[l - 1].out_channels, h, w)
    }

    pub fn tap_shape(&self) -> (usize, usize, usize) {
        self.block_shape(self.tap_layer)
    }

    pub fn stride_through(&self, l: usize) -> usize {
        self.layers[..l].iter().map(|b| b.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("layers", "detector needs at least one block"));
        }
        if self.layers.iter().any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::config("layers", "channels, kernel and stride must be positive"));
        }
        if self.tap_layer < 1 || self.tap_layer >= self.layers.len() {
            return Err(Error::config(
                "tap_layer",
                format!("{} not in [1, {})", self.tap_layer, self.layers.len()),
            ));
        }
        self.grid.validate(self.image_height, self.image_width)?;
        let total = self.stride_through(self.layers.len());
        if total != self.grid.stride {
            return Err(Error::config(
                "layers",
                format!("composed stride {total} differs from grid stride {}", self.grid.stride),
            ));
        }
        let dims = self.dims();
        if dims.last() != Some(&(self.grid.h, self.grid.w)) {
            return Err(Error::config(
                "layers",
                format!("final feature map {:?} differs from grid {}x{}", dims.last(), self.grid.h, self.grid.w),
            ));
        }
        let (_, th, tw) = self.tap_shape();
        if th < self.grid.h || tw < self.grid.w {
            return Err(Error::config(
                "tap_layer",
                format!("tap {th}x{tw} is smaller than grid {}x{}", self.grid.h, self.grid.w),
            ));
        }
        Ok(())
    }

    pub fn block_prefix(l: usize) -> String {
        format!("{DETECTOR_PREFIX}.block{l:02}")
    }

    /// Adds every detector tensor to `store`.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for (idx, (spec, g)) in self.layers.iter().zip(self.geoms()).enumerate() {
            let p = Self::block_prefix(idx + 1);
            let gain = if spec.activation == Activation::Leaky { 1.0 } else { 0.5 };
            store.insert(
                format!("{p}.conv.weight"),
                he_normal(&g.weight_shape(), g.patch_len(), gain, rng),
                false,
            )?;
            if spec.batchnorm {
                let c = spec.out_channels;
                store.insert(format!("{p}.bn.gamma"), Tensor::full(&[c], T::one()), false)?;
                store.insert(format!("{p}.bn.beta"), Tensor::zeros(&[c]), false)?;
                store.insert(format!("{p}.bn.running_mean"), Tensor::zeros(&[c]), true)?;
                store.insert(format!("{p}.bn.running_var"), Tensor::full(&[c], T::one()), true)?;
            } else {
                store.insert(format!("{p}.conv.bias"), Tensor::zeros(&[spec.out_channels]), false)?;
            }
        }
        let g = self.head_geom();
        store.insert(
            format!("{DETECTOR_PREFIX}.head.weight"),
            he_normal(&g.weight_shape(), g.patch_len(), 0.1, rng),
            false,
        )?;
        // background prior so early objectness is low
        let mut bias = Tensor::zeros(&[g.c_out]);
        let c = self.grid.det_channels();
        for k in 0..self.grid.n_anchors() {
            bias.data_mut()[k * c] = T::c(-4.0);
        }
        store.insert(format!("{DETECTOR_PREFIX}.head.bias"), bias, false)
    }

    /// Runs 0-based blocks `from..to`.
    pub fn forward_blocks<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        from: usize,
        to: usize,
        mode: Mode,
        keep: bool,
    ) -> Result<BlocksOut<T>> {
        let geoms = self.geoms();
        let mut y = x.clone();
        let mut caches = Vec::new();
        let mut bn_updates = Vec::new();
        for idx in from..to {
            let spec = &self.layers[idx];
            let p = Self::block_prefix(idx + 1);
            let g = &geoms[idx];
            let w = params.get(&format!("{p}.conv.weight"));
            let bias = (!spec.batchnorm).then(|| params.get(&format!("{p}.conv.bias")));
            let (z, conv_cache) = conv2d_forward(&y, w, bias, g, keep)?;
            let (z, bn_cache) = if spec.batchnorm {
                let gamma = params.get(&format!("{p}.bn.gamma"));
                let beta = params.get(&format!("{p}.bn.beta"));
                match mode {
                    Mode::Train => {
                        let (out, cache, stats) = bn_forward_train(&z, gamma, beta);
                        bn_updates.push(BnUpdate {
                            prefix: format!("{p}.bn"),
                            mean: stats.mean,
                            var: stats.var,
                        });
                        (out, Some(cache))
                    }
                    Mode::Eval => {
                        let mean = params.get(&format!("{p}.bn.running_mean"));
                        let var = params.get(&format!("{p}.bn.running_var"));
                        (bn_forward_eval(&z, gamma, beta, mean, var), None)
                    }
                }
            } else {
                (z, None)
            };
            y = spec.activation.forward(z);
            if keep {
                caches.push(BlockCache {
                    conv: conv_cache.expect("kept"),
                    bn: bn_cache,
                    out: y.clone(),
                });
            }
        }
        Ok(BlocksOut { y, caches, bn_updates })
    }

    /// Backward through the blocks whose caches are given, the first of
    /// which is 0-based block `from`. Returns the input gradient when
    /// `need_dx`.
    pub fn backward_blocks<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        caches: &[BlockCache<T>],
        from: usize,
        dy: Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let geoms = self.geoms();
        let mut d = dy;
        for (off, cache) in caches.iter().enumerate().rev() {
            let idx = from + off;
            let spec = &self.layers[idx];
            let p = Self::block_prefix(idx + 1);
            let mut dz = spec.activation.backward(d, &cache.out);
            if spec.batchnorm {
                let bn = cache.bn.as_ref().expect("backward needs a training-mode forward");
                let (dx, dgamma, dbeta) = bn_backward(&dz, bn, params.get(&format!("{p}.bn.gamma")));
                grads.accumulate(&format!("{p}.bn.gamma"), dgamma);
                grads.accumulate(&format!("{p}.bn.beta"), dbeta);
                dz = dx;
            }
            let w = params.get(&format!("{p}.conv.weight"));
            let first = off == 0;
            let cg = conv2d_backward(&dz, &cache.conv, w, &geoms[idx], !first || need_dx);
            grads.accumulate(&format!("{p}.conv.weight"), cg.dw);
            if !spec.batchnorm {
                grads.accumulate(&format!("{p}.conv.bias"), cg.db);
            }
            match cg.dx {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    /// 1x1 head producing `[N, A * (1 + N_C + 4), H, W]`.
    pub fn forward_head<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        conv2d_forward(
            x,
            params.get(&format!("{DETECTOR_PREFIX}.head.weight")),
            Some(params.get(&format!("{DETECTOR_PREFIX}.head.bias"))),
            &self.head_geom(),
            keep,
        )
    }

    pub fn backward_head<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let cg = conv2d_backward(
            dy,
            cache,
            params.get(&format!("{DETECTOR_PREFIX}.head.weight")),
            &self.head_geom(),
            true,
        );
        grads.accumulate(&format!("{DETECTOR_PREFIX}.head.weight"), cg.dw);
        grads.accumulate(&format!("{DETECTOR_PREFIX}.head.bias"), cg.db);
        cg.dx.expect("requested")
    }

    /// Receptive field of the output of 1-based block `l` in input pixels.
    pub fn receptive_field(&self, l: usize) -> ReceptiveField {
        let mut rf = ReceptiveField {
            size: 1,
            jump: 1,
            offset: 0,
        };
        for g in &self.geoms()[..l] {
            rf.size += (g.kh - 1) * rf.jump;
            rf.offset += g.pad_h * rf.jump;
            rf.jump *= g.stride;
        }
        rf
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.image_height || s[3] != self.image_width {
            return Err(Error::config(
                "image",
                format!(
                    "expected [N, {}, {}, {}], got {:?}",
                    self.in_channels, self.image_height, self.image_width, s
                ),
            ));
        }
        Ok(())
    }
}

/// `[N, A * C, H, W]` head output to per-image `[H, W, A, C]` tensors.
pub fn to_grid_layout<T: Scalar>(y: &Tensor<T>, n_anchors: usize, channels: usize) -> Vec<Tensor<T>> {
    let (n, h, w) = (y.dim(0), y.dim(2), y.dim(3));
    assert_eq!(y.dim(1), n_anchors * channels, "head channel count");
    let hw = h * w;
    (0..n)
        .map(|b| {
            let src = y.outer(b);
            let mut out = vec![T::zero(); hw * n_anchors * channels];
            for ch in 0..n_anchors * channels {
                for p in 0..hw {
                    out[p * n_anchors * channels + ch] = src[ch * hw + p];
                }
            }
            Tensor::from_vec(&[h, w, n_anchors, channels], out).unwrap()
        })
        .collect()
}

/// Inverse of [`to_grid_layout`].
pub fn from_grid_layout<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let s = parts[0].shape();
    let (h, w, ac) = (s[0], s[1], s[2] * s[3]);
    let hw = h * w;
    let mut data = Vec::with_capacity(parts.len() * hw * ac);
    for part in parts {
        let src = part.data();
        let mut img = vec![T::zero(); hw * ac];
        for p in 0..hw {
            for ch in 0..ac {
                img[ch * hw + p] = src[p * ac + ch];
            }
        }
        data.extend(img);
    }
    Tensor::from_vec(&[parts.len(), ac, h, w], data).unwrap()
}

/// Eval-mode forward for a batch of images: tap features and per-image raw
/// detection tensors `[H, W, A, 1 + N_C + 4]`.
pub fn detector_forward<T: Scalar>(
    images: &Tensor<T>,
    params: &ParamStore<T>,
    config: &DetectorConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    config.check_input(images)?;
    let lower = config.forward_blocks(params, images, 0, config.tap_layer, Mode::Eval, false)?;
    let upper = config.forward_blocks(params, &lower.y, config.tap_layer, config.n_blocks(), Mode::Eval, false)?;
    let (head, _) = config.forward_head(params, &upper.y, false)?;
    let raw = to_grid_layout(&head, config.grid.n_anchors(), config.grid.det_channels());
    Ok((lower.y, raw))
}
