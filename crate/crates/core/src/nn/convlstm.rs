//! Convolutional LSTM cell with gate order (input, forget, output, candidate).
//!
//! All four gates come from one convolution over the channel concatenation
//! `[x_t, h_{t-1}]`:
//!
//! ```text
//! i = σ(z_i)   f = σ(z_f)   o = σ(z_o)   g = tanh(z_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use super::conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGeom};
use super::params::{he_normal, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLstmLayer {
    pub name: String,
    pub c_in: usize,
    pub hidden: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvLstmLayer {
    pub fn new(name: impl Into<String>, c_in: usize, hidden: usize, kh: usize, kw: usize) -> Self {
        ConvLstmLayer {
            name: name.into(),
            c_in,
            hidden,
            kh,
            kw,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::same(self.c_in + self.hidden, 4 * self.hidden, self.kh, self.kw)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.geom().weight_count() + 4 * self.hidden
    }

    /// He-normal weights scaled down for the saturating gates, zero
    /// biases except the forget gate which starts at `forget_bias`.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, forget_bias: f64, rng: &mut R) -> Result<()> {
        let g = self.geom();
        store.insert(
            self.weight_name(),
            he_normal(&g.weight_shape(), g.patch_len(), 0.5, rng),
            false,
        )?;
        let mut b = Tensor::zeros(&[4 * self.hidden]);
        for v in &mut b.data_mut()[self.hidden..2 * self.hidden] {
            *v = T::c(forget_bias);
        }
        store.insert(self.bias_name(), b, false)
    }

    pub fn zero_state<T: Scalar>(&self, n: usize, h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
        let shape = [n, self.hidden, h, w];
        (Tensor::zeros(&shape), Tensor::zeros(&shape))
    }
}

#[derive(Debug, Clone)]
pub struct CellCache<T> {
    conv: ConvCache<T>,
    /// Post-activation gates in conv output layout `[N, 4 * hidden, H, W]`.
    gates: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
    shape: [usize; 4],
}

pub struct CellGrads<T> {
    pub dx: Tensor<T>,
    pub dh_prev: Tensor<T>,
    pub dc_prev: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = a.dim(0);
    let (ca, cb) = (a.dim(1), b.dim(1));
    let (h, w) = (a.dim(2), a.dim(3));
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.outer(i));
        data.extend_from_slice(b.outer(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).unwrap()
}

fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let n = x.dim(0);
    let cb = x.dim(1) - ca;
    let (h, w) = (x.dim(2), x.dim(3));
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for i in 0..n {
        let img = x.outer(i);
        a.extend_from_slice(&img[..ca * hw]);
        b.extend_from_slice(&img[ca * hw..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a).unwrap(),
        Tensor::from_vec(&[n, cb, h, w], b).unwrap(),
    )
}

/// One recurrent step. Returns `(h_t, c_t)` and, when `keep`, the cache
/// needed by [`cell_backward`].
pub fn cell_forward<T: Scalar>(
    layer: &ConvLstmLayer,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<CellCache<T>>)> {
    if !x.all_finite() || !h_prev.all_finite() || !c_prev.all_finite() {
        return Err(Error::Numeric(format!("non-finite input to {}", layer.name)));
    }
    if x.shape().len() != 4 || h_prev.shape() != c_prev.shape() || h_prev.dim(1) != layer.hidden {
        return Err(Error::Shape(format!(
            "{}: x {:?}, h {:?}, c {:?}",
            layer.name,
            x.shape(),
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    if x.dim(0) != h_prev.dim(0) || x.dim(2) != h_prev.dim(2) || x.dim(3) != h_prev.dim(3) {
        return Err(Error::Shape(format!(
            "{}: input {:?} incompatible with state {:?}",
            layer.name,
            x.shape(),
            h_prev.shape()
        )));
    }
    let geom = layer.geom();
    let xh = concat_channels(x, h_prev);
    let w = params.get(&layer.weight_name());
    let b = params.get(&layer.bias_name());
    let (mut z, conv_cache) = conv2d_forward(&xh, w, Some(b), &geom, keep)?;

    let [n, hid, hh, ww] = [h_prev.dim(0), layer.hidden, h_prev.dim(2), h_prev.dim(3)];
    let hw = hh * ww;
    let mut h = Tensor::zeros(h_prev.shape());
    let mut c = Tensor::zeros(c_prev.shape());
    let mut tanh_c = if keep { vec![T::zero(); c.numel()] } else { Vec::new() };
    let zd = z.data_mut();
    for i in 0..n {
        let zi = &mut zd[i * 4 * hid * hw..(i + 1) * 4 * hid * hw];
        for p in 0..hid * hw {
            let ig = sigmoid(zi[p]);
            let fg = sigmoid(zi[hid * hw + p]);
            let og = sigmoid(zi[2 * hid * hw + p]);
            let gg = zi[3 * hid * hw + p].tanh();
            zi[p] = ig;
            zi[hid * hw + p] = fg;
            zi[2 * hid * hw + p] = og;
            zi[3 * hid * hw + p] = gg;
            let idx = i * hid * hw + p;
            let ct = fg * c_prev.data()[idx] + ig * gg;
            let tc = ct.tanh();
            c.data_mut()[idx] = ct;
            h.data_mut()[idx] = og * tc;
            if keep {
                tanh_c[idx] = tc;
            }
        }
    }
    let cache = conv_cache.map(|conv| CellCache {
        conv,
        gates: z.into_data(),
        c_prev: c_prev.data().to_vec(),
        tanh_c,
        shape: [n, hid, hh, ww],
    });
    Ok((h, c, cache))
}

/// Backward through one step given upstream `dh_t` and `dc_t`.
pub fn cell_backward<T: Scalar>(
    layer: &ConvLstmLayer,
    params: &ParamStore<T>,
    cache: &CellCache<T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> CellGrads<T> {
    let [n, hid, hh, ww] = cache.shape;
    let hw = hh * ww;
    let mut dz = Tensor::zeros(&[n, 4 * hid, hh, ww]);
    let mut dc_prev = Tensor::zeros(&[n, hid, hh, ww]);
    {
        let dzd = dz.data_mut();
        for i in 0..n {
            let base = i * 4 * hid * hw;
            for p in 0..hid * hw {
                let idx = i * hid * hw + p;
                let ig = cache.gates[base + p];
                let fg = cache.gates[base + hid * hw + p];
                let og = cache.gates[base + 2 * hid * hw + p];
                let gg = cache.gates[base + 3 * hid * hw + p];
                let tc = cache.tanh_c[idx];
                let dhv = dh.data()[idx];
                let d_o = dhv * tc;
                let dct = dc.data()[idx] + dhv * og * (T::one() - tc * tc);
                let d_i = dct * gg;
                let d_g = dct * ig;
                let d_f = dct * cache.c_prev[idx];
                dc_prev.data_mut()[idx] = dct * fg;
                dzd[base + p] = d_i * ig * (T::one() - ig);
                dzd[base + hid * hw + p] = d_f * fg * (T::one() - fg);
                dzd[base + 2 * hid * hw + p] = d_o * og * (T::one() - og);
                dzd[base + 3 * hid * hw + p] = d_g * (T::one() - gg * gg);
            }
        }
    }
    let w = params.get(&layer.weight_name());
    let g = conv2d_backward(&dz, &cache.conv, w, &layer.geom(), true);
    let (dx, dh_prev) = split_channels(&g.dx.unwrap(), layer.c_in);
    CellGrads {
        dx,
        dh_prev,
        dc_prev,
        dw: g.dw,
        db: g.db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_store(bias: [f64; 4]) -> (ConvLstmLayer, ParamStore<f64>) {
        let layer = ConvLstmLayer::new("lstm", 2, 2, 3, 3);
        let mut store = ParamStore::new();
        store
            .insert(layer.weight_name(), Tensor::zeros(&layer.geom().weight_shape()), false)
            .unwrap();
        let mut b = Tensor::zeros(&[8]);
        for (gate, v) in bias.iter().enumerate() {
            b.data_mut()[gate * 2..gate * 2 + 2].iter_mut().for_each(|x| *x = *v);
        }
        store.insert(layer.bias_name(), b, false).unwrap();
        (layer, store)
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let (layer, store) = layer_store([0.0; 4]);
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let (h0, c0) = layer.zero_state(1, 3, 3);
        let (h, c, _) = cell_forward(&layer, &store, &x, &h0, &c0, false).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_hold_the_cell_state() {
        // b_i = -10, b_f = +10, b_o = -10
        let (layer, store) = layer_store([-10.0, 10.0, -10.0, 0.0]);
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let h0 = Tensor::zeros(&[1, 2, 3, 3]);
        let c0 = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|v| v as f64 * 0.1 - 0.9).collect()).unwrap();
        let (h, c, _) = cell_forward(&layer, &store, &x, &h0, &c0, false).unwrap();
        let sig10 = 1.0 / (1.0 + (-10.0f64).exp());
        for ((&ct, &cp), &ht) in c.data().iter().zip(c0.data()).zip(h.data()) {
            assert!((ct - sig10 * cp).abs() < 1e-12);
            assert!((ct - 0.99995 * cp).abs() <= 1e-5 * cp.abs() + 1e-15);
            assert!(ht.abs() <= 1e-4 * ct.tanh().abs() + 1e-300);
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let (layer, store) = layer_store([0.0; 4]);
        let mut x = Tensor::zeros(&[1, 2, 3, 3]);
        x.data_mut()[4] = f64::NAN;
        let (h0, c0) = layer.zero_state(1, 3, 3);
        assert!(matches!(
            cell_forward(&layer, &store, &x, &h0, &c0, false),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forget_bias_initialisation() {
        let layer = ConvLstmLayer::new("l", 3, 4, 3, 3);
        let mut store = ParamStore::<f32>::new();
        layer.init(&mut store, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = store.get("l.bias").data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
        assert_eq!(layer.param_count(), 16 * 7 * 9 + 16);
    }
}
