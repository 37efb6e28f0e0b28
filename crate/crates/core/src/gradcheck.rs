//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each case builds a tiny f64 instance, computes analytic gradients once,
//! then perturbs every parameter (and selected inputs) by `±EPS` and
//! compares against `(L(θ+ε) − L(θ−ε)) / 2ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::GridSpec;
use crate::models::auxiliary::{auxiliary_backward, auxiliary_forward, AuxiliaryConfig};
use crate::models::detector::{from_grid_layout, to_grid_layout, ConvBlockSpec, DetectorConfig, Mode};
use crate::models::loss::{detection_loss, intent_loss, DetLossWeights};
use crate::models::sequential::{sequential_backward, sequential_forward, SequentialConfig};
use crate::nn::activation::softplus;
use crate::nn::convlstm::{cell_backward, cell_forward};
use crate::nn::{ConvLstmLayer, Grads, ParamStore};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub n_params: usize,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

#[derive(Default)]
struct Tracker {
    n: usize,
    max: f64,
    worst: String,
}

impl Tracker {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.n += 1;
        if err > self.max || self.n == 1 {
            self.max = err;
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", what());
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        if p.buffer {
            continue;
        }
        let (lo, hi) = if name.ends_with("gamma") { (0.5, 1.5) } else { (-0.6, 0.6) };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
}

/// Compares analytic parameter gradients against central differences of
/// `loss` for every non-buffer tensor in `store`.
fn check_params(
    tracker: &mut Tracker,
    store: &mut ParamStore<f64>,
    grads: &Grads<f64>,
    loss: &mut dyn FnMut(&ParamStore<f64>) -> f64,
) {
    let names: Vec<String> = store.iter().filter(|(_, p)| !p.buffer).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = store.get(&name).numel();
        for i in 0..n {
            let orig = store.get(&name).data()[i];
            store.get_mut(&name).data_mut()[i] = orig + EPS;
            let up = loss(store);
            store.get_mut(&name).data_mut()[i] = orig - EPS;
            let down = loss(store);
            store.get_mut(&name).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            tracker.record(|| format!("{name}[{i}]"), analytic, numeric);
        }
    }
}

fn check_input(
    tracker: &mut Tracker,
    label: &str,
    x: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    loss: &mut dyn FnMut(&Tensor<f64>) -> f64,
) {
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + EPS;
        let up = loss(x);
        x.data_mut()[i] = orig - EPS;
        let down = loss(x);
        x.data_mut()[i] = orig;
        tracker.record(|| format!("{label}[{i}]"), analytic.data()[i], (up - down) / (2.0 * EPS));
    }
}

fn finish(name: &str, store: &ParamStore<f64>, t: Tracker) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        n_params: store.iter().filter(|(_, p)| !p.buffer).map(|(_, p)| p.value.numel()).sum(),
        n_checked: t.n,
        max_rel_err: t.max,
        worst: t.worst,
    }
}

fn tiny_grid(h: usize, w: usize, stride: usize) -> GridSpec {
    GridSpec {
        h,
        w,
        stride,
        anchors: vec![(5.0, 7.0), (8.0, 4.0)],
        n_classes: 2,
        n_intents: 2,
    }
}

/// Random detection target: objectness on roughly a third of the slots.
fn random_det_target(spec: &GridSpec, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let c = spec.det_channels();
    let mut t = Tensor::zeros(&[spec.h, spec.w, spec.n_anchors(), c]);
    for slot in t.data_mut().chunks_mut(c) {
        if rng.random_bool(0.35) {
            slot[0] = 1.0;
            slot[1 + rng.random_range(0..spec.n_classes)] = 1.0;
            let b = 1 + spec.n_classes;
            slot[b] = rng.random_range(0.05..0.95);
            slot[b + 1] = rng.random_range(0.05..0.95);
            slot[b + 2] = rng.random_range(-0.5..0.5);
            slot[b + 3] = rng.random_range(-0.5..0.5);
        }
    }
    t
}

fn random_intent(spec: &GridSpec, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let a = spec.n_anchors();
    let mut y = Tensor::zeros(&[spec.h, spec.w, a, spec.n_intents]);
    let mut m = Tensor::zeros(&[spec.h, spec.w, a]);
    for s in 0..m.numel() {
        if rng.random_bool(0.4) {
            m.data_mut()[s] = 1.0;
            y.data_mut()[s * spec.n_intents + rng.random_range(0..spec.n_intents)] = 1.0;
        }
    }
    (y, m)
}

/// Conv + batchnorm (training statistics) + leaky blocks, the 1x1 head and
/// the detection loss, including the image gradient.
pub fn conv_block_detection(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig {
        in_channels: 3,
        image_height: 8,
        image_width: 8,
        layers: vec![
            ConvBlockSpec::leaky_bn(3, 3, 2),
            ConvBlockSpec::leaky_bn(4, 3, 2),
            ConvBlockSpec::leaky(3, 1, 1),
        ],
        tap_layer: 1,
        grid: tiny_grid(2, 2, 4),
    };
    cfg.validate()?;
    let mut store = ParamStore::new();
    cfg.init(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let mut x = random(&[2, 3, 8, 8], &mut rng, -1.0, 1.0);
    let targets: Vec<Tensor<f64>> = (0..2).map(|_| random_det_target(&cfg.grid, &mut rng)).collect();
    let trefs: Vec<&Tensor<f64>> = targets.iter().collect();
    let weights = DetLossWeights::default();
    let (a, c) = (cfg.grid.n_anchors(), cfg.grid.det_channels());

    let forward = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let out = cfg.forward_blocks(store, x, 0, cfg.n_blocks(), Mode::Train, false).unwrap();
        let (head, _) = cfg.forward_head(store, &out.y, false).unwrap();
        detection_loss(&to_grid_layout(&head, a, c), &trefs, &cfg.grid, weights).unwrap().loss
    };

    let out = cfg.forward_blocks(&store, &x, 0, cfg.n_blocks(), Mode::Train, true)?;
    let (head, hc) = cfg.forward_head(&store, &out.y, true)?;
    let l = detection_loss(&to_grid_layout(&head, a, c), &trefs, &cfg.grid, weights)?;
    let mut grads = Grads::new();
    let dhead = from_grid_layout(&l.grads);
    let dy = cfg.backward_head(&store, &hc.expect("kept"), &dhead, &mut grads);
    let dx = cfg.backward_blocks(&store, &out.caches, 0, dy, &mut grads, true).expect("dx");

    let mut t = Tracker::default();
    let x0 = x.clone();
    check_params(&mut t, &mut store, &grads, &mut |s| forward(s, &x0));
    let s0 = store.clone();
    check_input(&mut t, "image", &mut x, &dx, &mut |xx| forward(&s0, xx));
    Ok(finish("conv_block_detection", &store, t))
}

/// Detection loss alone against random logits.
pub fn detection_loss_logits(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = tiny_grid(2, 3, 4);
    let c = spec.det_channels();
    let mut raw = random(&[2, 3, 2, c], &mut rng, -2.0, 2.0);
    let target = random_det_target(&spec, &mut rng);
    let w = DetLossWeights::default();
    let l = detection_loss(std::slice::from_ref(&raw), &[&target], &spec, w)?;
    let mut t = Tracker::default();
    let g = l.grads[0].clone();
    check_input(&mut t, "raw", &mut raw, &g, &mut |r| {
        detection_loss(std::slice::from_ref(r), &[&target], &spec, w).unwrap().loss
    });
    Ok(finish("detection_loss", &ParamStore::new(), t))
}

/// Masked intention loss against random logits.
pub fn intent_loss_logits(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = tiny_grid(3, 3, 4);
    let (y, m) = random_intent(&spec, &mut rng);
    let mut z = random(&[3, 3, 2, 2], &mut rng, -3.0, 3.0);
    let l = intent_loss(std::slice::from_ref(&z), &[&y], &[&m])?;
    let g = l.grads[0].clone();
    let mut t = Tracker::default();
    check_input(&mut t, "logits", &mut z, &g, &mut |zz| {
        intent_loss(std::slice::from_ref(zz), &[&y], &[&m]).unwrap().loss
    });
    Ok(finish("intent_loss", &ParamStore::new(), t))
}

/// One ConvLSTM step on a 3x3 map with 2 input and 2 hidden channels;
/// checks weights, bias and all three inputs.
pub fn convlstm_cell(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = ConvLstmLayer::new("cell", 2, 2, 3, 3);
    let mut store = ParamStore::new();
    layer.init(&mut store, 1.0, &mut rng)?;
    randomize(&mut store, &mut rng);
    let shape = [1, 2, 3, 3];
    let mut x = random(&shape, &mut rng, -1.0, 1.0);
    let mut h0 = random(&shape, &mut rng, -1.0, 1.0);
    let mut c0 = random(&shape, &mut rng, -1.0, 1.0);
    let rh = random(&shape, &mut rng, -1.0, 1.0);
    let rc = random(&shape, &mut rng, -1.0, 1.0);
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
    let loss = |s: &ParamStore<f64>, x: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>| {
        let (h1, c1, _) = cell_forward(&layer, s, x, h, c, false).unwrap();
        dot(&h1, &rh) + dot(&c1, &rc)
    };
    let (_, _, cache) = cell_forward(&layer, &store, &x, &h0, &c0, true)?;
    let g = cell_backward(&layer, &store, &cache.expect("kept"), &rh, &rc);
    let mut grads = Grads::new();
    grads.accumulate(&layer.weight_name(), g.dw);
    grads.accumulate(&layer.bias_name(), g.db);
    let mut t = Tracker::default();
    let (xa, ha, ca) = (x.clone(), h0.clone(), c0.clone());
    check_params(&mut t, &mut store, &grads, &mut |s| loss(s, &xa, &ha, &ca));
    check_input(&mut t, "x", &mut x, &g.dx, &mut |v| loss(&store, v, &ha, &ca));
    check_input(&mut t, "h_prev", &mut h0, &g.dh_prev, &mut |v| loss(&store, &xa, v, &ca));
    check_input(&mut t, "c_prev", &mut c0, &g.dc_prev, &mut |v| loss(&store, &xa, &ha, v));
    Ok(finish("convlstm_cell", &store, t))
}

/// Intention head over `steps` frames with the given hidden sizes, scored
/// by the masked intention loss; checks parameters and tap inputs.
pub fn auxiliary_head(seed: u64, hidden: &[usize], steps: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = tiny_grid(2, 2, 8);
    let cfg = AuxiliaryConfig {
        tap_shape: (2, 4, 4),
        adapter_channels: 2,
        hidden: hidden.to_vec(),
        kernel: (3, 3),
        seq_len: steps,
        forget_bias: 1.0,
        grid: grid.clone(),
    };
    cfg.validate_structure()?;
    let mut store = ParamStore::new();
    cfg.init(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let mut seq: Vec<Tensor<f64>> = (0..steps).map(|_| random(&[2, 2, 4, 4], &mut rng, -1.0, 1.0)).collect();
    let targets: Vec<(Tensor<f64>, Tensor<f64>)> = (0..2).map(|_| random_intent(&grid, &mut rng)).collect();
    let ys: Vec<&Tensor<f64>> = targets.iter().map(|t| &t.0).collect();
    let ms: Vec<&Tensor<f64>> = targets.iter().map(|t| &t.1).collect();
    let a = grid.n_anchors();
    let loss = |s: &ParamStore<f64>, seq: &[Tensor<f64>]| {
        let (z, _) = auxiliary_forward(seq, s, &cfg, false).unwrap();
        intent_loss(&to_grid_layout(&z, a, 2), &ys, &ms).unwrap().loss
    };
    let (z, cache) = auxiliary_forward(&seq, &store, &cfg, true)?;
    let l = intent_loss(&to_grid_layout(&z, a, 2), &ys, &ms)?;
    let mut grads = Grads::new();
    let dxs = auxiliary_backward(&store, &cfg, &cache.expect("kept"), &from_grid_layout(&l.grads), &mut grads, true)
        .expect("dx");
    let mut t = Tracker::default();
    let seq0 = seq.clone();
    check_params(&mut t, &mut store, &grads, &mut |s| loss(s, &seq0));
    for step in 0..steps {
        let mut x = seq[step].clone();
        check_input(&mut t, &format!("tap{step}"), &mut x, &dxs[step], &mut |v| {
            let mut s2 = seq0.clone();
            s2[step] = v.clone();
            loss(&store, &s2)
        });
        seq[step] = x;
    }
    let name = format!("auxiliary_{}layer_{}step", hidden.len(), steps);
    Ok(finish(&name, &store, t))
}

/// Crop encoder, recurrent layer and linear head under a logistic loss.
pub fn sequential_head(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SequentialConfig {
        crop_size: (8, 6),
        context: 1.0,
        in_channels: 3,
        encoder: vec![ConvBlockSpec::leaky(3, 3, 2), ConvBlockSpec::leaky(3, 3, 1)],
        hidden: 2,
        kernel: (3, 3),
        seq_len: 2,
        forget_bias: 1.0,
    };
    cfg.validate()?;
    let mut store = ParamStore::new();
    cfg.init(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let crops: Vec<Tensor<f64>> = (0..2).map(|_| random(&[2, 3, 8, 6], &mut rng, 0.0, 1.0)).collect();
    let labels = [1.0, 0.0];
    let loss = |s: &ParamStore<f64>| {
        let (z, _) = sequential_forward(&crops, s, &cfg, false).unwrap();
        z.data().iter().zip(labels).map(|(&z, y)| softplus(z) - y * z).sum::<f64>()
    };
    let (z, cache) = sequential_forward(&crops, &store, &cfg, true)?;
    let dz = Tensor::from_vec(
        &[2],
        z.data().iter().zip(labels).map(|(&z, y)| crate::nn::sigmoid(z) - y).collect(),
    )?;
    let mut grads = Grads::new();
    sequential_backward(&store, &cfg, &cache.expect("kept"), &dz, &mut grads);
    let mut t = Tracker::default();
    check_params(&mut t, &mut store, &grads, &mut |s| loss(s));
    Ok(finish("sequential_head", &store, t))
}

/// Every case at its default seed.
pub fn suite() -> Result<Vec<GradCheck>> {
    Ok(vec![
        conv_block_detection(11)?,
        detection_loss_logits(12)?,
        intent_loss_logits(13)?,
        convlstm_cell(14)?,
        auxiliary_head(15, &[2], 2)?,
        auxiliary_head(16, &[2, 2, 2], 2)?,
        sequential_head(17)?,
    ])
}
