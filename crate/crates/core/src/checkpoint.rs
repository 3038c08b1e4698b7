//! Versioned binary checkpoint container.
//!
//! Layout: the magic bytes `LICP`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then the raw little-endian arrays in
//! header order. Floating-point values are stored as `f64` bit patterns so
//! a save/load round trip is exact. Quantized layers store integer weight
//! codes with their per-filter scale and zero-point instead of float weights.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecModel, FactorizedDensity, Subnet};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvKind, Gdn, Layer, Param, Scatter, Stack};
use crate::pruner::{PruningPlan, StructuredMask};
use crate::quant::FakeQuantState;

const MAGIC: &[u8; 4] = b"LICP";
pub const FORMAT_VERSION: u32 = 1;

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lambda: Option<f64>,
    pub step: usize,
    pub seed: u64,
    pub plan: Option<PruningPlan>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QuantRecord {
    weight_bits: u32,
    act_bits: u32,
    enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerRecord {
    Conv {
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gather: Option<Vec<Option<usize>>>,
        scatter: Option<Scatter>,
        quant: Option<QuantRecord>,
    },
    Gdn {
        channels: usize,
        inverse: bool,
    },
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DType {
    F64,
    U16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    dtype: DType,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: CodecConfig,
    stacks: Vec<(String, Vec<LayerRecord>)>,
    entropy_channels: usize,
    masks: Vec<StructuredMask>,
    meta: CheckpointMeta,
    arrays: Vec<ArrayRecord>,
}

enum Payload {
    F64(Vec<f64>),
    U16(Vec<u16>),
}

fn checkpoint_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Serializes `model` (with its masks and quantizers) and `meta` to bytes.
pub fn to_bytes(model: &CodecModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut arrays: Vec<(ArrayRecord, Payload)> = Vec::new();
    let mut push_f = |name: String, v: &[f64]| {
        arrays.push((ArrayRecord { name, dtype: DType::F64, len: v.len() }, Payload::F64(v.to_vec())));
    };
    let mut stacks = Vec::new();
    let mut codes: Vec<(String, Vec<u16>)> = Vec::new();
    for subnet in Subnet::ALL {
        let st = model.stack(subnet);
        let mut records = Vec::new();
        for (i, layer) in st.layers.iter().enumerate() {
            let id = st.layer_id(i);
            records.push(match layer {
                Layer::Conv(c) => {
                    match &c.quant {
                        Some(q) => {
                            let code: Vec<u16> =
                                q.weight_codes(&c.weight.value, c.out_ch).into_iter().map(|v| v as u16).collect();
                            codes.push((format!("{}.weight_codes", id), code));
                            push_f(format!("{}.quant.scale", id), &q.scale.value);
                            push_f(format!("{}.quant.zero_point", id), &q.zero_point.value);
                        }
                        None => push_f(format!("{}.weight", id), &c.weight.value),
                    }
                    push_f(format!("{}.bias", id), &c.bias.value);
                    LayerRecord::Conv {
                        kind: c.kind,
                        in_ch: c.in_ch,
                        out_ch: c.out_ch,
                        kernel: c.kernel,
                        stride: c.stride,
                        gather: c.gather.clone(),
                        scatter: c.scatter.clone(),
                        quant: c.quant.as_ref().map(|q| QuantRecord {
                            weight_bits: q.weight_bits,
                            act_bits: q.act_bits,
                            enabled: q.enabled,
                        }),
                    }
                }
                Layer::Gdn(g) => {
                    push_f(format!("{}.beta", id), &g.beta.value);
                    push_f(format!("{}.gamma", id), &g.gamma.value);
                    LayerRecord::Gdn { channels: g.channels, inverse: g.inverse }
                }
                Layer::Relu => LayerRecord::Relu,
            });
        }
        stacks.push((st.name.clone(), records));
    }
    let mut entropy = model.entropy.clone();
    for (name, p) in entropy.params_mut() {
        push_f(name, &p.value);
    }
    for (name, code) in codes {
        arrays.push((ArrayRecord { name, dtype: DType::U16, len: code.len() }, Payload::U16(code)));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        stacks,
        entropy_channels: model.entropy.channels,
        masks: model.masks.values().cloned().collect(),
        meta: meta.clone(),
        arrays: arrays.iter().map(|(r, _)| r.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, payload) in arrays {
        match payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return checkpoint_err("truncated checkpoint");
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Rebuilds a model and its metadata from [`to_bytes`] output.
pub fn from_bytes(bytes: &[u8]) -> Result<(CodecModel, CheckpointMeta)> {
    let mut buf = bytes;
    if take(&mut buf, 4)? != MAGIC {
        return checkpoint_err("not a checkpoint (bad magic)");
    }
    let version = u32::from_le_bytes(take(&mut buf, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return checkpoint_err(format!("unsupported checkpoint version {}", version));
    }
    let hlen = u64::from_le_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, hlen)?)?;
    let mut f64s: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut u16s: BTreeMap<String, Vec<u16>> = BTreeMap::new();
    for rec in &header.arrays {
        match rec.dtype {
            DType::F64 => {
                let raw = take(&mut buf, rec.len * 8)?;
                f64s.insert(
                    rec.name.clone(),
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                );
            }
            DType::U16 => {
                let raw = take(&mut buf, rec.len * 2)?;
                u16s.insert(
                    rec.name.clone(),
                    raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect(),
                );
            }
        }
    }
    if !buf.is_empty() {
        return checkpoint_err("trailing bytes after the last array");
    }
    let mut fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = f64s.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing array {}", name)))?;
        if v.len() != len {
            return checkpoint_err(format!("array {} has {} values, expected {}", name, v.len(), len));
        }
        Ok(v)
    };
    let mut model = CodecModel::zeroed(header.config.clone())?;
    for (name, records) in &header.stacks {
        let subnet = Subnet::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown sub-network {}", name)))?;
        let mut layers = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let id = format!("{}.{}", name, i);
            layers.push(match rec {
                LayerRecord::Conv { kind, in_ch, out_ch, kernel, stride, gather, scatter, quant } => {
                    let mut c = Conv2d::new(*kind, *in_ch, *out_ch, *kernel, *stride);
                    c.gather = gather.clone();
                    c.scatter = scatter.clone();
                    c.bias = Param::new(fetch(&format!("{}.bias", id), *out_ch)?);
                    match quant {
                        None => c.weight = Param::new(fetch(&format!("{}.weight", id), c.weight.len())?),
                        Some(q) => {
                            let state = FakeQuantState {
                                scale: Param::new(fetch(&format!("{}.quant.scale", id), *out_ch)?),
                                zero_point: Param::new(fetch(&format!("{}.quant.zero_point", id), *out_ch)?),
                                weight_bits: q.weight_bits,
                                act_bits: q.act_bits,
                                enabled: q.enabled,
                            };
                            let code = u16s
                                .remove(&format!("{}.weight_codes", id))
                                .ok_or_else(|| Error::Checkpoint(format!("missing codes for {}", id)))?;
                            if code.len() != c.weight.len() {
                                return checkpoint_err(format!("{}: wrong number of weight codes", id));
                            }
                            let p = state.weight_params();
                            let per = c.weight.len() / out_ch;
                            let w = code
                                .iter()
                                .enumerate()
                                .map(|(j, &k)| p.scale[j / per] * (k as f64 - p.zero_point[j / per]))
                                .collect();
                            c.weight = Param::new(w);
                            c.quant = Some(state);
                        }
                    }
                    Layer::Conv(c)
                }
                LayerRecord::Gdn { channels, inverse } => {
                    let mut g = Gdn::new(*channels, *inverse);
                    g.beta = Param::new(fetch(&format!("{}.beta", id), *channels)?);
                    g.gamma = Param::new(fetch(&format!("{}.gamma", id), channels * channels)?);
                    Layer::Gdn(g)
                }
                LayerRecord::Relu => Layer::Relu,
            });
        }
        *model.stack_mut(subnet) = Stack::new(name.clone(), layers);
    }
    let mut entropy = FactorizedDensity::new(header.entropy_channels, 10.0);
    for (name, p) in entropy.params_mut() {
        p.value = fetch(&name, p.value.len())?;
        p.grad = vec![0.0; p.value.len()];
    }
    model.entropy = entropy;
    if let Some(name) = f64s.keys().chain(u16s.keys()).next() {
        return checkpoint_err(format!("unexpected array {}", name));
    }
    for m in header.masks {
        if model.conv_layer(&m.layer_id).is_none() {
            return checkpoint_err(format!("mask for unknown layer {}", m.layer_id));
        }
        model.masks.insert(m.layer_id.clone(), m);
    }
    Ok((model, header.meta))
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, model: &CodecModel, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CodecModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_is_exact() {
        let model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 11).unwrap();
        let meta = CheckpointMeta { lambda: Some(0.013), step: 7, seed: 11, ..Default::default() };
        let bytes = to_bytes(&model, &meta).unwrap();
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(to_bytes(&back, &meta2).unwrap(), bytes);
        let x = Tensor::full([1, 3, 64, 64], 0.2);
        assert_eq!(model.eval_forward(&x).unwrap().x_hat, back.eval_forward(&x).unwrap().x_hat);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 1).unwrap();
        let bytes = to_bytes(&model, &CheckpointMeta::default()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"NOPE...."), Err(Error::Checkpoint(_))));
    }
}
