//! Simulated post-training quantization.
//!
//! Weights: symmetric per-channel INT4, `scale_c = max|w_c| / 7`, codes
//! clamped to `[-8, 7]`. Activations: symmetric per-tensor INT8 with a
//! calibrated scale `max_abs / 127`, codes clamped to `[-128, 127]`.
//! Rounding is half away from zero. Embeddings, norm gains and the output
//! head stay f32; LoRA factors stay f32.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, DType, Payload, Role};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraOps};
use crate::model::{
    AttentionMask, Dense, KLayout, KvCache, Linear, LinearOps, Model, ModelWeights, RowInput,
};
use crate::tensor::Tensor;

pub const INT4_MIN: i8 = -8;
pub const INT4_MAX: i8 = 7;
pub const INT8_MIN: i8 = -128;
pub const INT8_MAX: i8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    PerChannelInt4,
    PerTensorInt8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i8>,
    scheme: QuantScheme,
    /// One scale per channel (int4) or a single scale (int8).
    scales: Vec<f32>,
    shape: Vec<usize>,
    axis: usize,
}

fn quantize_value(v: f32, scale: f32, lo: i8, hi: i8) -> i8 {
    (v / scale).round().clamp(lo as f32, hi as f32) as i8
}

/// Channel index of flat element `i` along `axis`.
fn channel_of(shape: &[usize], axis: usize, i: usize) -> usize {
    let inner: usize = shape[axis + 1..].iter().product();
    (i / inner) % shape[axis]
}

/// Per-channel symmetric INT4 along `axis`. An all-zero channel gets scale 1.
pub fn quantize_weights(w: &Tensor, axis: usize) -> Result<QuantizedTensor> {
    if axis >= w.rank() {
        return Err(Error::dim(format!("channel axis {axis} for shape {:?}", w.shape())));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("weight tensor".into()));
    }
    let shape = w.shape().to_vec();
    let mut max_abs = vec![0.0f32; shape[axis]];
    for (i, &v) in w.data().iter().enumerate() {
        let c = channel_of(&shape, axis, i);
        max_abs[c] = max_abs[c].max(v.abs());
    }
    let scales: Vec<f32> = max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / INT4_MAX as f32 } else { 1.0 })
        .collect();
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize_value(v, scales[channel_of(&shape, axis, i)], INT4_MIN, INT4_MAX))
        .collect();
    Ok(QuantizedTensor {
        codes,
        scheme: QuantScheme::PerChannelInt4,
        scales,
        shape,
        axis,
    })
}

/// Per-tensor symmetric INT8 with a calibrated `max_abs`.
pub fn quantize_activation(x: &Tensor, max_abs: f32) -> Result<QuantizedTensor> {
    if !x.is_finite() || !max_abs.is_finite() {
        return Err(Error::NonFinite("activation".into()));
    }
    let scale = activation_scale(max_abs);
    Ok(QuantizedTensor {
        codes: x
            .data()
            .iter()
            .map(|&v| quantize_value(v, scale, INT8_MIN, INT8_MAX))
            .collect(),
        scheme: QuantScheme::PerTensorInt8,
        scales: vec![scale],
        shape: x.shape().to_vec(),
        axis: 0,
    })
}

pub fn activation_scale(max_abs: f32) -> f32 {
    if max_abs > 0.0 {
        max_abs / INT8_MAX as f32
    } else {
        1.0
    }
}

/// Quantize-dequantize in one pass.
pub fn fake_quant_activation(x: &Tensor, max_abs: f32) -> Tensor {
    let scale = activation_scale(max_abs);
    x.map(|v| quantize_value(v, scale, INT8_MIN, INT8_MAX) as f32 * scale)
}

impl QuantizedTensor {
    pub fn from_parts(codes: Vec<i8>, scheme: QuantScheme, scales: Vec<f32>, shape: Vec<usize>, axis: usize) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let (lo, hi) = match scheme {
            QuantScheme::PerChannelInt4 => (INT4_MIN, INT4_MAX),
            QuantScheme::PerTensorInt8 => (INT8_MIN, INT8_MAX),
        };
        let n_scales = match scheme {
            QuantScheme::PerChannelInt4 => shape.get(axis).copied().unwrap_or(0),
            QuantScheme::PerTensorInt8 => 1,
        };
        if codes.len() != numel || scales.len() != n_scales {
            return Err(Error::dim("quantized tensor parts do not match shape"));
        }
        if codes.iter().any(|&c| c < lo || c > hi) || scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("quantized codes or scales out of range".into()));
        }
        Ok(QuantizedTensor { codes, scheme, scales, shape, axis })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    /// Scale governing flat element `i`.
    pub fn scale_at(&self, i: usize) -> f32 {
        match self.scheme {
            QuantScheme::PerChannelInt4 => self.scales[channel_of(&self.shape, self.axis, i)],
            QuantScheme::PerTensorInt8 => self.scales[0],
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f32 * self.scale_at(i))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape checked at construction")
    }
}

/// Running max-abs of every projection input, collected over prompts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    max_abs: BTreeMap<String, f32>,
    batches: usize,
}

fn calib_key(layer: usize, which: Linear) -> String {
    format!("layers.{layer}.{}", which.name())
}

impl CalibStats {
    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn get(&self, layer: usize, which: Linear) -> Option<f32> {
        self.max_abs.get(&calib_key(layer, which)).copied()
    }

    fn observe(&mut self, layer: usize, which: Linear, x: &Tensor) {
        let e = self.max_abs.entry(calib_key(layer, which)).or_insert(0.0);
        *e = e.max(x.max_abs());
    }

    pub fn entries(&self) -> &BTreeMap<String, f32> {
        &self.max_abs
    }
}

struct CalibratingOps<'a> {
    inner: &'a dyn LinearOps,
    stats: RefCell<CalibStats>,
}

impl LinearOps for CalibratingOps<'_> {
    fn linear(&self, layer: usize, which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        self.stats.borrow_mut().observe(layer, which, x);
        self.inner.linear(layer, which, x, weight)
    }
}

/// Collect activation ranges by running full-precision prefills.
pub fn calibrate(model: &Model, prompts: &[Vec<u32>], adapter: Option<&LoraAdapter>) -> Result<CalibStats> {
    let lora;
    let inner: &dyn LinearOps = match adapter {
        Some(a) => {
            lora = LoraOps { inner: &Dense, adapter: a };
            &lora
        }
        None => &Dense,
    };
    let ops = CalibratingOps {
        inner,
        stats: RefCell::new(CalibStats::default()),
    };
    for p in prompts.iter().filter(|p| !p.is_empty()) {
        let mut cache = KvCache::new(model.config(), KLayout::KPlain);
        let rows: Vec<RowInput> = p.iter().map(|&t| RowInput::Token(t)).collect();
        let pos: Vec<usize> = (0..p.len()).collect();
        model.forward_rows(&mut cache, &rows, &pos, &AttentionMask::causal(p.len(), 0), &ops, 0)?;
        ops.stats.borrow_mut().batches += 1;
    }
    let stats = ops.stats.into_inner();
    if stats.batches == 0 {
        return Err(Error::MissingCalibration("empty calibration set".into()));
    }
    Ok(stats)
}

/// Which tensors are simulated at low precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantMode {
    pub weights_int4: bool,
    pub activations_int8: bool,
}

impl QuantMode {
    pub const FULL: QuantMode = QuantMode { weights_int4: true, activations_int8: true };
    pub const WEIGHTS_ONLY: QuantMode = QuantMode { weights_int4: true, activations_int8: false };
    pub const ACTIVATIONS_ONLY: QuantMode = QuantMode { weights_int4: false, activations_int8: true };
}

/// Per-projection INT4 weights plus activation calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    matrices: BTreeMap<String, QuantizedTensor>,
    dequantized: BTreeMap<String, Tensor>,
    calib: Option<CalibStats>,
}

impl QuantizedWeights {
    /// Quantize every projection matrix along its output channel (axis 1).
    pub fn quantize(weights: &ModelWeights, calib: Option<CalibStats>) -> Result<Self> {
        let mut matrices = BTreeMap::new();
        for (i, layer) in weights.layers().iter().enumerate() {
            for which in Linear::ALL {
                matrices.insert(calib_key(i, which), quantize_weights(which.weight(layer), 1)?);
            }
        }
        Ok(Self::from_matrices(matrices, calib))
    }

    fn from_matrices(matrices: BTreeMap<String, QuantizedTensor>, calib: Option<CalibStats>) -> Self {
        let dequantized = matrices.iter().map(|(k, q)| (k.clone(), q.dequantize())).collect();
        QuantizedWeights { matrices, dequantized, calib }
    }

    pub fn matrix(&self, layer: usize, which: Linear) -> Option<&QuantizedTensor> {
        self.matrices.get(&calib_key(layer, which))
    }

    pub fn calibration(&self) -> Option<&CalibStats> {
        self.calib.as_ref()
    }

    pub fn ops(&self, mode: QuantMode) -> QuantOps<'_> {
        QuantOps { q: self, mode }
    }

    /// Quantized bundle: projection codes as `i4packed` with a `.scales`
    /// sidecar, everything else f32, activation ranges as `.act_max`.
    pub fn to_bundle(&self, model: &Model) -> Bundle {
        let mut b = Bundle::new(Role::QuantizedModel, model.config().clone());
        for (name, t) in model.weights().named_tensors() {
            match self.matrices.get(&name) {
                Some(q) => {
                    b.push(name.clone(), Payload::Codes {
                        shape: q.shape.clone(),
                        codes: q.codes.clone(),
                        dtype: DType::I4Packed,
                    });
                    b.push(format!("{name}.scales"), Payload::F32(Tensor::new(vec![q.scales.len()], q.scales.clone()).expect("1-D")));
                    if let Some(m) = self.calib.as_ref().and_then(|c| c.max_abs.get(&name)) {
                        b.push(format!("{name}.act_max"), Payload::F32(Tensor::filled(&[1], *m)));
                    }
                }
                None => b.push(name, Payload::F32(t.clone())),
            }
        }
        b
    }

    /// Load a quantized bundle. The returned model carries the dequantized
    /// projection weights so that its plain forward is the weight-only path.
    pub fn from_bundle(b: &Bundle) -> Result<(Model, Self)> {
        if b.role != Role::QuantizedModel {
            return Err(Error::Config("bundle role is not 'quantized_model'".into()));
        }
        let mut named = b.f32_tensors();
        let mut matrices = BTreeMap::new();
        let mut calib = CalibStats::default();
        for (name, p) in &b.tensors {
            if let Payload::Codes { shape, codes, .. } = p {
                let scales = named
                    .remove(&format!("{name}.scales"))
                    .ok_or_else(|| Error::Config(format!("missing scales for {name}")))?;
                let q = QuantizedTensor::from_parts(codes.clone(), QuantScheme::PerChannelInt4, scales.into_data(), shape.clone(), 1)?;
                if let Some(m) = named.remove(&format!("{name}.act_max")) {
                    calib.max_abs.insert(name.clone(), m.data()[0]);
                }
                named.insert(name.clone(), q.dequantize());
                matrices.insert(name.clone(), q);
            }
        }
        let calib = (!calib.max_abs.is_empty()).then_some(CalibStats { batches: 1, ..calib });
        let weights = ModelWeights::from_named(&b.config, named)?;
        let model = Model::new(b.config.clone(), weights)?;
        Ok((model, Self::from_matrices(matrices, calib)))
    }

    pub fn save(&self, model: &Model, dir: &Path) -> Result<()> {
        self.to_bundle(model).save(dir)
    }
}

/// Fake-quant projection backend.
pub struct QuantOps<'a> {
    q: &'a QuantizedWeights,
    mode: QuantMode,
}

impl LinearOps for QuantOps<'_> {
    fn linear(&self, layer: usize, which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let key = calib_key(layer, which);
        let w = if self.mode.weights_int4 {
            self.q
                .dequantized
                .get(&key)
                .ok_or_else(|| Error::Config(format!("no quantized weight for {key}")))?
        } else {
            weight
        };
        if self.mode.activations_int8 {
            let max = self
                .q
                .calib
                .as_ref()
                .and_then(|c| c.max_abs.get(&key))
                .ok_or(Error::MissingCalibration(key))?;
            fake_quant_activation(x, *max).matmul(w)
        } else {
            x.matmul(w)
        }
    }
}

/// Forward with simulated low precision; the adapter (if any) stays f32.
pub fn fake_quant_forward(
    model: &Model,
    q: &QuantizedWeights,
    mode: QuantMode,
    adapter: Option<&LoraAdapter>,
    cache: &mut KvCache,
    rows: &[RowInput],
    positions: &[usize],
    mask: &AttentionMask,
) -> Result<Tensor> {
    let ops = q.ops(mode);
    match adapter {
        Some(a) => model.forward_rows(cache, rows, positions, mask, &LoraOps { inner: &ops, adapter: a }, 0),
        None => model.forward_rows(cache, rows, positions, mask, &ops, 0),
    }
}

/// Byte accounting in the layout "LLM + LoRA".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub params: usize,
    pub fp16_bytes: usize,
    /// 0.5 byte per parameter.
    pub int4_payload_bytes: usize,
    /// f32 per-channel scales.
    pub scale_bytes: usize,
    pub int4_bytes: usize,
    pub ratio: f64,
    pub ratio_excluding_scales: f64,
    /// Adapters at 2 bytes/param, identical in both precisions.
    pub adapter_params: usize,
    pub adapter_bytes: usize,
}

/// Channel count used for scale overhead: rows of the embedding table,
/// output columns of every other matrix, one for vectors.
fn scale_channels(name: &str, t: &Tensor) -> usize {
    match t.shape() {
        [rows, _] if name == "token_embedding" => *rows,
        [_, cols] => *cols,
        _ => 1,
    }
}

pub fn compression_report(weights: &ModelWeights, adapters: &[&LoraAdapter]) -> CompressionReport {
    let tensors = weights.named_tensors();
    let params: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let channels: usize = tensors.iter().map(|(n, t)| scale_channels(n, t)).sum();
    let payload = params.div_ceil(2);
    let scale_bytes = if params == 0 { 0 } else { channels * 4 };
    let fp16 = params * 2;
    let int4 = payload + scale_bytes;
    let ratio = |den: usize| if den == 0 { 0.0 } else { fp16 as f64 / den as f64 };
    let adapter_params: usize = adapters.iter().map(|a| a.param_count()).sum();
    CompressionReport {
        params,
        fp16_bytes: fp16,
        int4_payload_bytes: payload,
        scale_bytes,
        int4_bytes: int4,
        ratio: ratio(int4),
        ratio_excluding_scales: ratio(payload),
        adapter_params,
        adapter_bytes: adapter_params * 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let w = Tensor::new(vec![2, 1], vec![0.7, -0.35]).unwrap();
        let q = quantize_weights(&w, 1).unwrap();
        assert_eq!(q.scales(), &[0.1]);
        assert_eq!(q.codes(), &[7, -4]);
        let d = q.dequantize();
        assert!((d.data()[0] - 0.7).abs() < 1e-6);
        assert!((d.data()[1] + 0.4).abs() < 1e-6);
        let err = d.max_abs_diff(&w);
        assert!((err - 0.05).abs() < 1e-6 && err <= 0.1 / 2.0 + 1e-7);
    }

    #[test]
    fn zero_tensor() {
        let q = quantize_weights(&Tensor::zeros(&[3, 4]), 1).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 1.0));
        assert_eq!(q.dequantize(), Tensor::zeros(&[3, 4]));
        let a = quantize_activation(&Tensor::zeros(&[2, 2]), 0.0).unwrap();
        assert!(a.codes().iter().all(|&c| c == 0));
    }

    #[test]
    fn grid_is_lossless() {
        // 2^-3 scale keeps every product exact in f32
        let s = 0.125f32;
        let vals: Vec<f32> = (-7..=7).map(|k| k as f32 * s).collect();
        let w = Tensor::new(vec![15, 1], vals).unwrap();
        let q = quantize_weights(&w, 1).unwrap();
        assert_eq!(q.scales(), &[s]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn decimal_grid_within_float_noise() {
        let vals: Vec<f32> = (-7..=7).map(|k| k as f32 * 0.1).collect();
        let w = Tensor::new(vec![1, 15], vals.clone()).unwrap();
        let q = quantize_weights(&w.transpose().unwrap(), 1).unwrap();
        let codes: Vec<i8> = (-7..=7).collect();
        assert_eq!(q.codes(), codes.as_slice());
        assert!(q.dequantize().max_abs_diff(&w.transpose().unwrap()) < 1e-6);
    }

    #[test]
    fn activation_at_calib_max() {
        let x = Tensor::new(vec![1, 3], vec![2.0, -2.0, 5.0]).unwrap();
        let q = quantize_activation(&x, 2.0).unwrap();
        assert_eq!(q.codes(), &[127, -127, 127]);
    }

    #[test]
    fn non_finite_rejected() {
        let w = Tensor::new(vec![1, 2], vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(quantize_weights(&w, 1), Err(Error::NonFinite(_))));
        assert!(quantize_activation(&w, 1.0).is_err());
    }

    #[test]
    fn per_channel_axis_zero() {
        let w = Tensor::from_rows(&[vec![1.0, 0.25], vec![0.0, 0.0]]).unwrap();
        let q = quantize_weights(&w, 0).unwrap();
        assert_eq!(q.scales(), &[1.0 / 7.0, 1.0]);
        assert_eq!(q.codes(), &[7, 2, 0, 0]);
    }
}
