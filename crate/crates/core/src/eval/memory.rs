//! Parameter memory of the two pipelines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{parameter_count, CountEntry, ModelConfig, AUX_PREFIX, DETECTOR_PREFIX, SEQ_PREFIX};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandTable {
    pub detector: usize,
    pub aux_head: usize,
    pub crop_encoder: usize,
    pub recurrent_head: usize,
}

impl HandTable {
    /// Element counts summed layer by layer from the configuration alone.
    pub fn from_config(model: &ModelConfig) -> Self {
        let det = &model.detector;
        let mut detector = 0;
        let mut c_in = det.in_channels;
        for b in &det.layers {
            detector += b.kernel * b.kernel * c_in * b.out_channels;
            detector += if b.batchnorm { 4 * b.out_channels } else { b.out_channels };
            c_in = b.out_channels;
        }
        let slots = det.grid.anchors.len();
        detector += c_in * slots * (1 + det.grid.n_classes + 4) + slots * (1 + det.grid.n_classes + 4);

        let aux = &model.auxiliary;
        let (tap_c, tap_h, _) = aux.tap_shape;
        let f = tap_h / det.grid.h;
        let k = 2 * f - 1;
        let mut aux_head = k * k * tap_c * aux.adapter_channels + aux.adapter_channels;
        let (kh, kw) = aux.kernel;
        let mut c = aux.adapter_channels;
        for &h in &aux.hidden {
            aux_head += 4 * h * (c + h) * kh * kw + 4 * h;
            c = h;
        }
        aux_head += c * slots * det.grid.n_intents + slots * det.grid.n_intents;

        let seq = &model.sequential;
        let mut crop_encoder = 0;
        let mut c = seq.in_channels;
        for b in &seq.encoder {
            crop_encoder += b.kernel * b.kernel * c * b.out_channels + b.out_channels;
            c = b.out_channels;
        }
        let h = seq.hidden;
        let recurrent_head = 4 * h * (c + h) * seq.kernel.0 * seq.kernel.1 + 4 * h + h + 1;
        HandTable {
            detector,
            aux_head,
            crop_encoder,
            recurrent_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub dtype_bytes: usize,
    pub detector: CountEntry,
    pub aux_head: CountEntry,
    pub crop_encoder: CountEntry,
    pub recurrent_head: CountEntry,
    /// Detector plus intention head; tap layers are counted once.
    pub single_shot_total: CountEntry,
    /// Detector plus crop encoder plus recurrent head.
    pub sequential_total: CountEntry,
    /// `sequential_total - single_shot_total` in bytes.
    pub delta_bytes: i64,
    pub delta_params: i64,
    pub hand_table: HandTable,
    pub hand_table_agrees: bool,
}

fn sum_prefix<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> CountEntry {
    let w = T::DTYPE.width();
    let mut e = CountEntry::default();
    for (name, p) in store.iter() {
        if name.starts_with(prefix) {
            e.count += p.value.numel();
            e.bytes += p.value.numel() * w;
        }
    }
    e
}

fn add(a: CountEntry, b: CountEntry) -> CountEntry {
    CountEntry {
        count: a.count + b.count,
        bytes: a.bytes + b.bytes,
    }
}

/// Exact counts from a parameter store holding all three networks.
pub fn memory_report<T: Scalar>(store: &ParamStore<T>, model: &ModelConfig) -> Result<MemoryReport> {
    let counts = parameter_count(store);
    for net in [DETECTOR_PREFIX, AUX_PREFIX, SEQ_PREFIX] {
        if !counts.networks.contains_key(net) {
            return Err(Error::Input(format!("parameter store has no {net} tensors")));
        }
    }
    let detector = counts.networks[DETECTOR_PREFIX];
    let aux_head = counts.networks[AUX_PREFIX];
    let crop_encoder = sum_prefix(store, &format!("{SEQ_PREFIX}.encoder"));
    let recurrent_head = add(
        sum_prefix(store, &format!("{SEQ_PREFIX}.recurrent.")),
        sum_prefix(store, &format!("{SEQ_PREFIX}.head.")),
    );
    let single = add(detector, aux_head);
    let sequential = add(add(detector, crop_encoder), recurrent_head);
    let hand = HandTable::from_config(model);
    let agrees = hand.detector == detector.count
        && hand.aux_head == aux_head.count
        && hand.crop_encoder == crop_encoder.count
        && hand.recurrent_head == recurrent_head.count
        && crop_encoder.count + recurrent_head.count == counts.networks[SEQ_PREFIX].count;
    Ok(MemoryReport {
        dtype_bytes: T::DTYPE.width(),
        detector,
        aux_head,
        crop_encoder,
        recurrent_head,
        single_shot_total: single,
        sequential_total: sequential,
        delta_bytes: sequential.bytes as i64 - single.bytes as i64,
        delta_params: sequential.count as i64 - single.count as i64,
        hand_table: hand,
        hand_table_agrees: agrees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(model: &ModelConfig) -> MemoryReport {
        let mut s = ParamStore::<f32>::new();
        model.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        memory_report(&s, model).unwrap()
    }

    #[test]
    fn accounting_identities() {
        let r = report(&ModelConfig::desk());
        assert!(r.hand_table_agrees);
        assert_eq!(r.single_shot_total.count, r.detector.count + r.aux_head.count);
        assert_eq!(
            r.sequential_total.count,
            r.detector.count + r.crop_encoder.count + r.recurrent_head.count
        );
        assert_eq!(
            r.delta_params,
            (r.crop_encoder.count + r.recurrent_head.count) as i64 - r.aux_head.count as i64
        );
        assert_eq!(r.delta_bytes, 4 * r.delta_params);
    }

    #[test]
    fn desk_aux_head_by_hand() {
        // adapter 3x3 32->32, three ConvLSTM layers 32->32, 1x1 head to 10
        let want = 9 * 32 * 32 + 32 + 3 * (4 * 32 * 64 * 9 + 4 * 32) + 32 * 10 + 10;
        assert_eq!(report(&ModelConfig::desk()).aux_head.count, want);
    }

    #[test]
    fn paper_shape_agrees() {
        assert!(report(&ModelConfig::paper_shape()).hand_table_agrees);
    }

    #[test]
    fn missing_network_is_error() {
        let model = ModelConfig::desk();
        let mut s = ParamStore::<f32>::new();
        model.detector.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(memory_report(&s, &model).is_err());
    }
}
