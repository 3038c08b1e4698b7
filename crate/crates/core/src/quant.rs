//! Uniform fixed-point quantization of weights and activations.
//!
//! Weights use unsigned codes in `[0, 2^b - 1]` with one (scale, zero-point)
//! pair per output filter. Activations use signed codes in
//! `[-2^(b-1), 2^(b-1) - 1]` with per-tensor parameters computed from the
//! tensor itself at run time.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, Subnet};
use crate::error::{arg_err, Error, Result};
use crate::nn::{Layer, Param};
use crate::pruner::{apply_masks, merged_masks, StructuredMask};
use crate::train::{train, BatchSource, TrainConfig, TrainReport};

/// Smallest admissible scale.
pub const S_MIN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    UnsignedWeights,
    SignedActivations,
}

/// Scale / zero-point / bit-width. `scale` and `zero_point` hold either one
/// entry (per tensor) or one entry per output filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero_point: Vec<f64>,
    pub bits: u32,
    pub signedness: Signedness,
}

impl QuantParams {
    pub fn new(scale: Vec<f64>, zero_point: Vec<f64>, bits: u32, signedness: Signedness) -> Result<Self> {
        let p = QuantParams { scale, zero_point, bits, signedness };
        p.validate()?;
        Ok(p)
    }

    pub fn per_tensor(scale: f64, zero_point: f64, bits: u32, signedness: Signedness) -> Result<Self> {
        Self::new(vec![scale], vec![zero_point], bits, signedness)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return arg_err(format!("bit width {} outside [2, 16]", self.bits));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return arg_err("scale and zero-point vectors must be nonempty and equally long");
        }
        if let Some(s) = self.scale.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return arg_err(format!("quantization scale must be positive, got {}", s));
        }
        Ok(())
    }

    /// Clip bounds `[L, U]`.
    pub fn bounds(&self) -> (f64, f64) {
        clip_bounds(self.bits, self.signedness)
    }

    fn at(&self, group: usize) -> (f64, f64) {
        if self.scale.len() == 1 {
            (self.scale[0], self.zero_point[0])
        } else {
            (self.scale[group], self.zero_point[group])
        }
    }
}

pub fn clip_bounds(bits: u32, signedness: Signedness) -> (f64, f64) {
    match signedness {
        Signedness::UnsignedWeights => (0.0, ((1u64 << bits) - 1) as f64),
        Signedness::SignedActivations => (-((1u64 << (bits - 1)) as f64), ((1u64 << (bits - 1)) - 1) as f64),
    }
}

/// Integer code `round(clip(v / s + z; L, U))`.
#[inline]
pub fn quant_code(v: f64, s: f64, z: f64, lo: f64, hi: f64) -> f64 {
    (v / s + z).clamp(lo, hi).round()
}

#[inline]
fn fake_quant(v: f64, s: f64, z: f64, lo: f64, hi: f64) -> f64 {
    s * (quant_code(v, s, z, lo, hi) - z)
}

/// Quantize-dequantize weights laid out as `filters` contiguous blocks.
pub fn quantize_weights(w: &[f64], filters: usize, p: &QuantParams) -> Result<Vec<f64>> {
    p.validate()?;
    if filters == 0 || w.len() % filters != 0 {
        return arg_err(format!("{} weights do not split into {} filters", w.len(), filters));
    }
    if p.scale.len() != 1 && p.scale.len() != filters {
        return arg_err(format!("{} scales for {} filters", p.scale.len(), filters));
    }
    let (lo, hi) = p.bounds();
    let per = w.len() / filters;
    Ok(w.chunks(per)
        .enumerate()
        .flat_map(|(f, chunk)| {
            let (s, z) = p.at(f);
            chunk.iter().map(move |&v| fake_quant(v, s, z, lo, hi))
        })
        .collect())
}

/// Quantize-dequantize activations with per-tensor parameters.
pub fn quantize_acts(a: &[f64], p: &QuantParams) -> Result<Vec<f64>> {
    p.validate()?;
    let (lo, hi) = p.bounds();
    let (s, z) = p.at(0);
    Ok(a.iter().map(|&v| fake_quant(v, s, z, lo, hi)).collect())
}

/// Per-tensor signed activation parameters whose clip window covers `[min(a), max(a)]`.
pub fn dynamic_act_params(a: &[f64], bits: u32) -> QuantParams {
    let (min, max) = min_max(a);
    let levels = ((1u64 << bits) - 1) as f64;
    let s = ((max - min) / levels).max(S_MIN);
    // The zero-point is left unclamped: clamping it to the code range would
    // stop the clip window from covering tensors whose range excludes zero.
    let z = (-min / s).round() - (1u64 << (bits - 1)) as f64;
    QuantParams { scale: vec![s], zero_point: vec![z], bits, signedness: Signedness::SignedActivations }
}

/// Per-filter min/max initialization of unsigned weight parameters. The range
/// is widened to contain zero so that zero stays exactly representable.
pub fn init_weight_params(w: &[f64], filters: usize, bits: u32) -> Result<QuantParams> {
    if w.is_empty() || filters == 0 || w.len() % filters != 0 {
        return arg_err(format!("{} weights do not split into {} filters", w.len(), filters));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let per = w.len() / filters;
    let mut scale = Vec::with_capacity(filters);
    let mut zero = Vec::with_capacity(filters);
    for chunk in w.chunks(per) {
        let (min, max) = min_max(chunk);
        let (min, max) = (min.min(0.0), max.max(0.0));
        let s = ((max - min) / levels).max(S_MIN);
        scale.push(s);
        zero.push((-min / s).round().clamp(0.0, levels));
    }
    QuantParams::new(scale, zero, bits, Signedness::UnsignedWeights)
}

fn min_max(a: &[f64]) -> (f64, f64) {
    a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Fake-quantization state attached to one convolution layer.
///
/// Weight scales and zero-points are trainable; the forward pass uses the
/// rounded zero-point so that zero weights stay exactly zero.
#[derive(Clone, Debug)]
pub struct FakeQuantState {
    pub scale: Param,
    pub zero_point: Param,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub enabled: bool,
}

impl FakeQuantState {
    pub fn from_weights(w: &[f64], filters: usize, bits: u32) -> Result<Self> {
        let p = init_weight_params(w, filters, bits)?;
        Ok(FakeQuantState {
            scale: Param::new(p.scale),
            zero_point: Param::new(p.zero_point),
            weight_bits: bits,
            act_bits: bits,
            enabled: true,
        })
    }

    /// Weight parameters as used in the forward pass.
    pub fn weight_params(&self) -> QuantParams {
        let (lo, hi) = clip_bounds(self.weight_bits, Signedness::UnsignedWeights);
        QuantParams {
            scale: self.scale.value.iter().map(|s| s.max(S_MIN)).collect(),
            zero_point: self.zero_point.value.iter().map(|z| z.round().clamp(lo, hi)).collect(),
            bits: self.weight_bits,
            signedness: Signedness::UnsignedWeights,
        }
    }

    pub fn fake_quant_weights(&self, w: &[f64], filters: usize) -> Result<Vec<f64>> {
        quantize_weights(w, filters, &self.weight_params())
    }

    /// Integer weight codes, one per weight element.
    pub fn weight_codes(&self, w: &[f64], filters: usize) -> Vec<u32> {
        let p = self.weight_params();
        let (lo, hi) = p.bounds();
        let per = w.len() / filters;
        w.chunks(per)
            .enumerate()
            .flat_map(|(f, chunk)| {
                let (s, z) = (p.scale[f], p.zero_point[f]);
                chunk.iter().map(move |&v| quant_code(v, s, z, lo, hi) as u32)
            })
            .collect()
    }

    /// Straight-through backward: returns dL/dw and accumulates scale and
    /// zero-point gradients.
    pub fn backward_weights(&mut self, w: &[f64], filters: usize, dw_eff: &[f64]) -> Vec<f64> {
        let p = self.weight_params();
        let (lo, hi) = p.bounds();
        let per = w.len() / filters;
        let mut dw = vec![0.0; w.len()];
        for f in 0..filters {
            let (s, z) = (p.scale[f], p.zero_point[f]);
            let (mut ds, mut dz) = (0.0, 0.0);
            for j in f * per..(f + 1) * per {
                let v = w[j] / s + z;
                let g = dw_eff[j];
                if v < lo {
                    ds += g * (lo - z);
                    dz -= g * s;
                } else if v > hi {
                    ds += g * (hi - z);
                    dz -= g * s;
                } else {
                    dw[j] = g;
                    ds += g * (v.round() - v);
                }
            }
            self.scale.grad[f] += ds;
            self.zero_point.grad[f] += dz;
        }
        dw
    }

    /// Quantizes `a` in place with dynamic parameters; returns the
    /// straight-through pass mask (true where the value was inside the clip range).
    pub fn quantize_activations_in_place(&self, a: &mut [f64]) -> Vec<bool> {
        if a.is_empty() {
            return Vec::new();
        }
        let p = dynamic_act_params(a, self.act_bits);
        let (lo, hi) = p.bounds();
        let (s, z) = (p.scale[0], p.zero_point[0]);
        a.iter_mut()
            .map(|v| {
                let t = *v / s + z;
                *v = fake_quant(*v, s, z, lo, hi);
                (lo..=hi).contains(&t)
            })
            .collect()
    }

    /// Keeps parameters inside their domain after an optimizer step.
    pub fn project(&mut self) {
        let (lo, hi) = clip_bounds(self.weight_bits, Signedness::UnsignedWeights);
        self.scale.value.iter_mut().for_each(|s| *s = s.max(S_MIN));
        self.zero_point.value.iter_mut().for_each(|z| *z = z.clamp(lo, hi));
    }
}

impl From<&FakeQuantState> for QuantParams {
    fn from(q: &FakeQuantState) -> Self {
        q.weight_params()
    }
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Argument(format!("bit width {} outside [2, 16]", bits)));
    }
    Ok(())
}

/// Attaches freshly initialized `bits`-bit quantizers to every convolution
/// that has none yet.
pub fn attach_quantizers(model: &mut CodecModel, bits: u32) -> Result<()> {
    check_bits(bits)?;
    for subnet in Subnet::ALL {
        for layer in model.stack_mut(subnet).layers.iter_mut() {
            if let Layer::Conv(c) = layer {
                if c.quant.is_none() {
                    c.quant = Some(FakeQuantState::from_weights(&c.weight.value, c.out_ch, bits)?);
                }
            }
        }
    }
    Ok(())
}

/// Turns fake quantization on or off for every quantized layer.
pub fn set_quant_enabled(model: &mut CodecModel, enabled: bool) {
    for subnet in Subnet::ALL {
        for layer in model.stack_mut(subnet).layers.iter_mut() {
            if let Layer::Conv(c) = layer {
                if let Some(q) = c.quant.as_mut() {
                    q.enabled = enabled;
                }
            }
        }
    }
}

pub fn is_quantized(model: &CodecModel) -> bool {
    Subnet::ALL.iter().any(|&s| {
        model.stack(s).layers.iter().any(|l| matches!(l, Layer::Conv(c) if c.quant.as_ref().is_some_and(|q| q.enabled)))
    })
}

/// Masks `model`, attaches quantizers where missing and finetunes with fake
/// quantization in the loop. Gradients reach the full-precision weights and
/// the per-filter scales and zero-points; masked weights stay zero.
pub fn qat_finetune(
    model: &CodecModel,
    masks: &[StructuredMask],
    bits: u32,
    data: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<(CodecModel, TrainReport)> {
    let mut m = apply_masks(model, masks)?;
    attach_quantizers(&mut m, bits)?;
    let report = train(&mut m, data, cfg)?;
    Ok((m, report))
}

/// Storage estimate of a (possibly pruned, possibly quantized) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSize {
    pub bytes: f64,
    /// Dense float32 model of the same configuration.
    pub baseline_bytes: f64,
    pub compression_ratio: f64,
    pub quantized_weights: usize,
    pub float_params: usize,
    pub quantized_filters: usize,
}

/// Bytes needed to store `model` under `masks`.
///
/// Kept convolution weights cost `bits / 8` bytes when `quantized` (plus one
/// 4-byte scale and one `bits`-wide integer zero-point per kept filter) and 4 bytes
/// otherwise. Pruned weights cost nothing. Biases, normalization and
/// entropy-model parameters are stored as 4-byte floats.
pub fn model_size_bytes(model: &CodecModel, masks: &[StructuredMask], quantized: bool, bits: u32) -> Result<ModelSize> {
    if quantized {
        check_bits(bits)?;
    }
    let merged = merged_masks(model, masks)?;
    let mut qweights = 0usize;
    let mut floats = model.entropy.param_count();
    let mut filters = 0usize;
    for subnet in Subnet::ALL {
        let st = model.stack(subnet);
        let mut width = 0usize;
        for (i, layer) in st.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let (ko, ki) = merged
                        .get(&st.layer_id(i))
                        .map_or((c.out_ch, c.in_ch), |m| (m.kept_out(), m.kept_in()));
                    let w = ko * ki * c.kernel * c.kernel;
                    if quantized {
                        qweights += w;
                        filters += ko;
                    } else {
                        floats += w;
                    }
                    floats += ko;
                    width = ko;
                }
                Layer::Gdn(_) => floats += width + width * width,
                Layer::Relu => {}
            }
        }
    }
    let bytes = (qweights + filters) as f64 * bits as f64 / 8.0 + floats as f64 * 4.0 + filters as f64 * 4.0;
    let baseline_bytes = CodecModel::zeroed(model.config.clone())?.param_count() as f64 * 4.0;
    Ok(ModelSize {
        bytes,
        baseline_bytes,
        compression_ratio: baseline_bytes / bytes,
        quantized_weights: qweights,
        float_params: floats,
        quantized_filters: filters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn w8(s: f64, z: f64) -> QuantParams {
        QuantParams::per_tensor(s, z, 8, Signedness::UnsignedWeights).unwrap()
    }

    fn a8(s: f64, z: f64) -> QuantParams {
        QuantParams::per_tensor(s, z, 8, Signedness::SignedActivations).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(quantize_weights(&[0.0], 1, &w8(0.1, 128.0)).unwrap(), vec![0.0]);
        assert!((quantize_weights(&[12.7], 1, &w8(0.1, 0.0)).unwrap()[0] - 12.7).abs() < 1e-12);
        assert!((quantize_weights(&[100.0], 1, &w8(0.1, 0.0)).unwrap()[0] - 25.5).abs() < 1e-12);
        assert!(QuantParams::per_tensor(0.0, 0.0, 8, Signedness::UnsignedWeights).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(quantize_acts(&[-20.0], &a8(0.25, 0.0)).unwrap(), vec![-20.0]);
        assert_eq!(quantize_acts(&[50.0], &a8(0.25, 0.0)).unwrap(), vec![31.75]);
    }

    #[test]
    fn dynamic_params_cover_range() {
        let a: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 * 0.01).collect();
        let p = dynamic_act_params(&a, 8);
        assert!((p.scale[0] - 2.0 / 255.0).abs() < 1e-15);
        let c = dynamic_act_params(&[0.7; 5], 8);
        assert_eq!(c.scale[0], S_MIN);
        let q = quantize_acts(&[0.7], &c).unwrap();
        assert!((q[0] - 0.7).abs() <= S_MIN / 2.0 + 1e-15);
    }

    #[test]
    fn weight_init_examples() {
        let w = [-0.5, 0.1, 0.5, 0.0, 0.0, 0.0];
        let p = init_weight_params(&w, 2, 8).unwrap();
        assert!((p.scale[0] - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.scale[1], S_MIN);
        assert_eq!(p.zero_point[1], 0.0);
        let q = quantize_weights(&w, 2, &p).unwrap();
        assert_eq!(&q[3..], &[0.0, 0.0, 0.0]);
        for (a, b) in w.iter().zip(&q) {
            assert!((a - b).abs() <= p.scale[0] / 2.0 + 1e-15);
        }
    }

    #[test]
    fn disabled_state_is_transparent() {
        let mut model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 1).unwrap();
        let x = crate::tensor::Tensor::full([1, 3, 64, 64], 0.3);
        let plain = model.eval_forward(&x).unwrap();
        attach_quantizers(&mut model, 8).unwrap();
        assert!(is_quantized(&model));
        let fake = model.eval_forward(&x).unwrap();
        assert!(fake.x_hat.max_abs_diff(&plain.x_hat) > 0.0);
        set_quant_enabled(&mut model, false);
        assert_eq!(model.eval_forward(&x).unwrap().x_hat, plain.x_hat);
    }

    #[test]
    fn unpruned_float_model_has_unit_ratio() {
        let model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 1).unwrap();
        let s = model_size_bytes(&model, &[], false, 8).unwrap();
        assert_eq!(s.compression_ratio, 1.0);
        assert_eq!(s.bytes, model.param_count() as f64 * 4.0);
    }
}
