//! Structured masks over convolution filters and filter channels, sparsity
//! accounting, and compaction of masked models into smaller dense ones.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, Subnet};
use crate::criteria::{layer_importance, rank_channels, Criterion, Direction, FeatureBank, ImportanceScores};
use crate::error::{arg_err, Error, Result};
use crate::nn::{Conv2d, Gdn, Layer, Param, Scatter};

/// Fewest channels a mask may keep in either direction.
pub fn min_keep(channels: usize) -> usize {
    ((channels as f64 * 0.05).ceil() as usize).max(1)
}

/// Channels removed at ratio `kappa` (rounded down).
pub fn pruned_count(kappa: f64, channels: usize) -> usize {
    ((kappa * channels as f64) + 1e-9).floor() as usize
}

/// Largest ratio whose pruned count still respects [`min_keep`].
pub fn max_ratio(channels: usize) -> f64 {
    (channels - min_keep(channels)) as f64 / channels as f64
}

fn check_ratio(kappa: f64, channels: usize, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&kappa) || !kappa.is_finite() {
        return arg_err(format!("{} ratio {} outside [0, 1)", what, kappa));
    }
    if channels - pruned_count(kappa, channels).min(channels) < min_keep(channels) {
        return arg_err(format!(
            "{} ratio {} leaves fewer than {} of {} channels",
            what,
            kappa,
            min_keep(channels),
            channels
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredMask {
    pub layer_id: String,
    pub keep_out: Vec<bool>,
    pub keep_in: Vec<bool>,
}

impl StructuredMask {
    pub fn full(layer_id: impl Into<String>, out_ch: usize, in_ch: usize) -> Self {
        StructuredMask { layer_id: layer_id.into(), keep_out: vec![true; out_ch], keep_in: vec![true; in_ch] }
    }

    pub fn kept_out(&self) -> usize {
        self.keep_out.iter().filter(|&&k| k).count()
    }

    pub fn kept_in(&self) -> usize {
        self.keep_in.iter().filter(|&&k| k).count()
    }

    pub fn is_full(&self) -> bool {
        self.keep_out.iter().chain(&self.keep_in).all(|&k| k)
    }

    /// Keeps only channels kept by both masks.
    pub fn intersect(&self, other: &StructuredMask) -> Result<StructuredMask> {
        if self.layer_id != other.layer_id
            || self.keep_out.len() != other.keep_out.len()
            || self.keep_in.len() != other.keep_in.len()
        {
            return Err(Error::Structural(format!("cannot combine masks for {}", self.layer_id)));
        }
        let and = |a: &[bool], b: &[bool]| a.iter().zip(b).map(|(x, y)| *x && *y).collect();
        Ok(StructuredMask {
            layer_id: self.layer_id.clone(),
            keep_out: and(&self.keep_out, &other.keep_out),
            keep_in: and(&self.keep_in, &other.keep_in),
        })
    }

    fn validate(&self, out_ch: usize, in_ch: usize) -> Result<()> {
        if self.keep_out.len() != out_ch || self.keep_in.len() != in_ch {
            return Err(Error::Structural(format!(
                "mask for {} is {}x{}, layer is {}x{}",
                self.layer_id,
                self.keep_out.len(),
                self.keep_in.len(),
                out_ch,
                in_ch
            )));
        }
        if self.kept_out() < min_keep(out_ch) || self.kept_in() < min_keep(in_ch) {
            return Err(Error::Structural(format!("mask for {} keeps too few channels", self.layer_id)));
        }
        Ok(())
    }
}

/// Masks keyed by layer id.
pub type MaskSet = BTreeMap<String, StructuredMask>;

/// Builds a mask keeping the most important channels in each direction.
pub fn select_prune_sets(
    scores_out: &ImportanceScores,
    scores_in: &ImportanceScores,
    kappa_out: f64,
    kappa_in: f64,
) -> Result<StructuredMask> {
    if scores_out.layer_id != scores_in.layer_id {
        return arg_err("score vectors belong to different layers");
    }
    if scores_out.scores.is_empty() || scores_in.scores.is_empty() {
        return arg_err(format!("{}: empty score vector", scores_out.layer_id));
    }
    check_ratio(kappa_out, scores_out.scores.len(), "output")?;
    check_ratio(kappa_in, scores_in.scores.len(), "input")?;
    let keep = |s: &ImportanceScores, kappa: f64| {
        let mut keep = vec![true; s.scores.len()];
        for &i in rank_channels(s).iter().take(pruned_count(kappa, s.scores.len())) {
            keep[i] = false;
        }
        keep
    };
    Ok(StructuredMask {
        layer_id: scores_out.layer_id.clone(),
        keep_out: keep(scores_out, kappa_out),
        keep_in: keep(scores_in, kappa_in),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub kappa_out: f64,
    pub kappa_in: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fixed,
    Nas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub entries: BTreeMap<String, PlanEntry>,
    pub criterion: Criterion,
    pub provenance: Provenance,
}

impl PruningPlan {
    /// A plan with zero ratios on every prunable layer.
    pub fn empty(model: &CodecModel, criterion: Criterion, provenance: Provenance) -> Self {
        let entries =
            model.prunable_layer_ids().into_iter().map(|id| (id, PlanEntry { kappa_out: 0.0, kappa_in: 0.0 })).collect();
        PruningPlan { entries, criterion, provenance }
    }

    /// The same ratio on every prunable layer, clipped to each layer's
    /// [`max_ratio`]. With `channels` false only filters are pruned.
    pub fn uniform(model: &CodecModel, kappa: f64, channels: bool, criterion: Criterion) -> Result<Self> {
        if !(0.0..1.0).contains(&kappa) {
            return arg_err(format!("ratio {} outside [0, 1)", kappa));
        }
        let mut plan = Self::empty(model, criterion, Provenance::Fixed);
        for (id, e) in plan.entries.iter_mut() {
            let c = model.conv_layer(id).expect("prunable layer exists");
            e.kappa_out = kappa.min(max_ratio(c.out_ch));
            if channels {
                e.kappa_in = kappa.min(max_ratio(c.in_ch));
            }
        }
        Ok(plan)
    }

    /// Uniform plan whose sparsity is as close as possible to `target`.
    pub fn uniform_for_sparsity(model: &CodecModel, target: f64, channels: bool, criterion: Criterion) -> Result<Self> {
        if !(0.0..1.0).contains(&target) {
            return arg_err(format!("target sparsity {} outside [0, 1)", target));
        }
        let shapes = LayerShape::of_model(model);
        let s_of = |k: f64| -> Result<f64> {
            let plan = Self::uniform(model, k, channels, criterion)?;
            Ok(sparsity_from_counts(&shapes, &plan.kept_counts(&shapes)?).s)
        };
        let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if s_of(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = if (s_of(lo)? - target).abs() <= (s_of(hi)? - target).abs() { lo } else { hi };
        Self::uniform(model, best, channels, criterion)
    }

    pub fn validate(&self, model: &CodecModel) -> Result<()> {
        for id in model.prunable_layer_ids() {
            let e = self
                .entries
                .get(&id)
                .ok_or_else(|| Error::Argument(format!("plan has no entry for layer {}", id)))?;
            let c = model.conv_layer(&id).expect("prunable layer exists");
            check_ratio(e.kappa_out, c.out_ch, "output")?;
            check_ratio(e.kappa_in, c.in_ch, "input")?;
        }
        for id in self.entries.keys() {
            if !model.is_prunable(id) {
                return arg_err(format!("plan names non-prunable layer {}", id));
            }
        }
        Ok(())
    }

    /// `(kept_out, kept_in)` per layer implied by the ratios.
    pub fn kept_counts(&self, shapes: &[LayerShape]) -> Result<BTreeMap<String, (usize, usize)>> {
        let mut out = BTreeMap::new();
        for s in shapes {
            let (ko, ki) = match self.entries.get(&s.layer_id) {
                Some(e) => (s.out_ch - pruned_count(e.kappa_out, s.out_ch), s.in_ch - pruned_count(e.kappa_in, s.in_ch)),
                None => (s.out_ch, s.in_ch),
            };
            out.insert(s.layer_id.clone(), (ko, ki));
        }
        Ok(out)
    }

    /// Turns ratios into masks using importance scores of `model`.
    pub fn to_masks(&self, model: &CodecModel, bank: Option<&FeatureBank>) -> Result<Vec<StructuredMask>> {
        self.validate(model)?;
        let mut masks = Vec::new();
        for (id, e) in &self.entries {
            if e.kappa_out == 0.0 && e.kappa_in == 0.0 {
                continue;
            }
            let so = layer_importance(model, bank, id, Direction::OutputMaps, self.criterion)?;
            let si = layer_importance(model, bank, id, Direction::InputMaps, self.criterion)?;
            masks.push(select_prune_sets(&so, &si, e.kappa_out, e.kappa_in)?);
        }
        Ok(masks)
    }
}

/// Shape of one prunable layer, for counting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: String,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel_area: usize,
}

impl LayerShape {
    pub fn of_model(model: &CodecModel) -> Vec<LayerShape> {
        model
            .prunable_layer_ids()
            .into_iter()
            .map(|id| {
                let c = model.conv_layer(&id).expect("prunable layer exists");
                LayerShape { layer_id: id, out_ch: c.out_ch, in_ch: c.in_ch, kernel_area: c.kernel * c.kernel }
            })
            .collect()
    }

    pub fn weights(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel_area
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub before: usize,
    pub after: usize,
    pub kappa_out: f64,
    pub kappa_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Weights of all prunable layers (biases excluded).
    pub total_prunable_params: usize,
    pub pruned_params: usize,
    /// `pruned_params / total_prunable_params`.
    pub s: f64,
    pub per_layer: BTreeMap<String, LayerSparsity>,
    /// Biases dropped together with their filters.
    pub pruned_biases: usize,
    /// Every stored parameter of the model, before and after compaction.
    pub total_params_before: usize,
    pub total_params_after: usize,
}

impl SparsityReport {
    /// Fraction of all model parameters removed.
    pub fn total_reduction(&self) -> f64 {
        if self.total_params_before == 0 {
            return 0.0;
        }
        1.0 - self.total_params_after as f64 / self.total_params_before as f64
    }

    /// Writes `layer,before,after,kappa_out,kappa_in` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "before", "after", "kappa_out", "kappa_in"])?;
        for (id, l) in &self.per_layer {
            w.write_record([
                id.clone(),
                l.before.to_string(),
                l.after.to_string(),
                l.kappa_out.to_string(),
                l.kappa_in.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Prunable-weight sparsity given kept channel counts per layer.
pub fn sparsity_from_counts(shapes: &[LayerShape], kept: &BTreeMap<String, (usize, usize)>) -> SparsityReport {
    let mut per_layer = BTreeMap::new();
    let (mut total, mut pruned, mut pruned_biases) = (0, 0, 0);
    for s in shapes {
        let (ko, ki) = kept.get(&s.layer_id).copied().unwrap_or((s.out_ch, s.in_ch));
        let before = s.weights();
        let after = ko * ki * s.kernel_area;
        total += before;
        pruned += before - after;
        pruned_biases += s.out_ch - ko;
        per_layer.insert(
            s.layer_id.clone(),
            LayerSparsity {
                before,
                after,
                kappa_out: (s.out_ch - ko) as f64 / s.out_ch as f64,
                kappa_in: (s.in_ch - ki) as f64 / s.in_ch as f64,
            },
        );
    }
    SparsityReport {
        total_prunable_params: total,
        pruned_params: pruned,
        s: if total == 0 { 0.0 } else { pruned as f64 / total as f64 },
        per_layer,
        pruned_biases,
        total_params_before: 0,
        total_params_after: 0,
    }
}

/// Validates `masks` against `model` and merges them with the model's own masks.
pub fn merged_masks(model: &CodecModel, masks: &[StructuredMask]) -> Result<MaskSet> {
    let mut merged = model.masks.clone();
    for m in masks {
        let c = model
            .conv_layer(&m.layer_id)
            .ok_or_else(|| Error::Argument(format!("unknown layer {}", m.layer_id)))?;
        if !model.is_prunable(&m.layer_id) {
            return arg_err(format!("layer {} is not prunable", m.layer_id));
        }
        m.validate(c.out_ch, c.in_ch)?;
        let combined = match merged.get(&m.layer_id) {
            Some(prev) => prev.intersect(m)?,
            None => m.clone(),
        };
        combined.validate(c.out_ch, c.in_ch)?;
        merged.insert(m.layer_id.clone(), combined);
    }
    Ok(merged)
}

/// Returns a copy of `model` with `masks` attached and masked weights zeroed.
/// Masks combine with any already attached (a channel stays pruned once pruned).
pub fn apply_masks(model: &CodecModel, masks: &[StructuredMask]) -> Result<CodecModel> {
    let merged = merged_masks(model, masks)?;
    let mut out = model.clone();
    out.masks = merged.into_iter().filter(|(_, m)| !m.is_full()).collect();
    out.enforce_masks();
    Ok(out)
}

/// Sparsity of `model` under its own masks combined with `masks`.
pub fn sparsity(model: &CodecModel, masks: &[StructuredMask]) -> Result<SparsityReport> {
    let merged = merged_masks(model, masks)?;
    let shapes = LayerShape::of_model(model);
    let kept: BTreeMap<String, (usize, usize)> =
        merged.values().map(|m| (m.layer_id.clone(), (m.kept_out(), m.kept_in()))).collect();
    let mut report = sparsity_from_counts(&shapes, &kept);
    report.total_params_before = model.param_count();
    report.total_params_after = compacted_param_count(model, &merged);
    Ok(report)
}

fn compacted_param_count(model: &CodecModel, masks: &MaskSet) -> usize {
    let mut n = model.entropy.param_count();
    for subnet in Subnet::ALL {
        let st = model.stack(subnet);
        let mut width = 0usize;
        for (i, layer) in st.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let (ko, ki) = masks
                        .get(&st.layer_id(i))
                        .map_or((c.out_ch, c.in_ch), |m| (m.kept_out(), m.kept_in()));
                    n += ko * ki * c.kernel * c.kernel + ko;
                    width = ko;
                }
                Layer::Gdn(_) => n += width + width * width,
                Layer::Relu => {}
            }
        }
    }
    n
}

/// Builds a dense model holding only the kept channels.
///
/// Layers whose `keep_in` disagrees with what their producer emits read their
/// input through a gather; the last convolution of a stack scatters back to
/// the stack's interface width, so latents keep their shape. Normalization
/// layers shrink with the filters feeding them.
pub fn compact(model: &CodecModel, masks: &[StructuredMask]) -> Result<CodecModel> {
    let merged = merged_masks(model, masks)?;
    let mut out = model.clone();
    out.masks.clear();
    for subnet in Subnet::ALL {
        let src = model.stack(subnet);
        let convs = src.conv_indices();
        let last = *convs.last().ok_or_else(|| Error::Structural(format!("{} has no convolutions", src.name)))?;
        let first_in = src.conv(convs[0]).map(|c| c.in_ch).unwrap_or(0);
        // present[original channel] = position in the compact tensor, if emitted.
        let mut present: Vec<Option<usize>> = (0..first_in).map(Some).collect();
        let mut layers = Vec::with_capacity(src.layers.len());
        for (i, layer) in src.layers.iter().enumerate() {
            let new_layer = match layer {
                Layer::Conv(c) => {
                    if c.gather.is_some() || c.scatter.is_some() {
                        return Err(Error::Structural(format!("{} is already compacted", src.layer_id(i))));
                    }
                    if c.quant.is_some() {
                        return Err(Error::Structural(format!(
                            "{} carries quantizer state; compact before quantizing",
                            src.layer_id(i)
                        )));
                    }
                    if present.len() != c.in_ch {
                        return Err(Error::Structural(format!(
                            "{} reads {} channels but receives {}",
                            src.layer_id(i),
                            c.in_ch,
                            present.len()
                        )));
                    }
                    let full = StructuredMask::full(src.layer_id(i), c.out_ch, c.in_ch);
                    let m = merged.get(&src.layer_id(i)).unwrap_or(&full);
                    let ins: Vec<usize> = (0..c.in_ch).filter(|&k| m.keep_in[k]).collect();
                    let outs: Vec<usize> = (0..c.out_ch).filter(|&k| m.keep_out[k]).collect();
                    let emitted = present.iter().filter(|p| p.is_some()).count();
                    let gather: Vec<Option<usize>> = ins.iter().map(|&k| present[k]).collect();
                    let identity = gather.len() == emitted && gather.iter().enumerate().all(|(j, g)| *g == Some(j));
                    let mut nc = compact_conv(c, &outs, &ins);
                    if !identity {
                        nc.gather = Some(gather);
                    }
                    if i == last && outs.len() < c.out_ch {
                        nc.scatter = Some(Scatter { width: c.out_ch, index: outs.clone() });
                        present = (0..c.out_ch).map(Some).collect();
                    } else {
                        present = vec![None; c.out_ch];
                        for (pos, &o) in outs.iter().enumerate() {
                            present[o] = Some(pos);
                        }
                    }
                    Layer::Conv(nc)
                }
                Layer::Gdn(g) => {
                    if present.len() != g.channels {
                        return Err(Error::Structural(format!("{} width mismatch", src.layer_id(i))));
                    }
                    let kept: Vec<usize> = (0..g.channels).filter(|&k| present[k].is_some()).collect();
                    Layer::Gdn(compact_gdn(g, &kept))
                }
                Layer::Relu => Layer::Relu,
            };
            layers.push(new_layer);
        }
        out.stack_mut(subnet).layers = layers;
    }
    Ok(out)
}

fn compact_conv(c: &Conv2d, outs: &[usize], ins: &[usize]) -> Conv2d {
    let kk = c.kernel * c.kernel;
    let mut nc = Conv2d::new(c.kind, ins.len(), outs.len(), c.kernel, c.stride);
    let mut w = Vec::with_capacity(outs.len() * ins.len() * kk);
    for &o in outs {
        for &i in ins {
            let start = (o * c.in_ch + i) * kk;
            w.extend_from_slice(&c.weight.value[start..start + kk]);
        }
    }
    nc.weight = Param::new(w);
    nc.bias = Param::new(outs.iter().map(|&o| c.bias.value[o]).collect());
    nc
}

fn compact_gdn(g: &Gdn, kept: &[usize]) -> Gdn {
    let mut ng = Gdn::new(kept.len(), g.inverse);
    ng.beta = Param::new(kept.iter().map(|&k| g.beta.value[k]).collect());
    let mut gamma = Vec::with_capacity(kept.len() * kept.len());
    for &a in kept {
        for &b in kept {
            gamma.push(g.gamma.value[a * g.channels + b]);
        }
    }
    ng.gamma = Param::new(gamma);
    ng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::tensor::Tensor;

    fn scores(id: &str, v: Vec<f64>) -> ImportanceScores {
        ImportanceScores { layer_id: id.into(), direction: Direction::OutputMaps, criterion: Criterion::L2, scores: v }
    }

    #[test]
    fn rounding_and_min_keep() {
        assert_eq!(min_keep(64), 4);
        assert_eq!(min_keep(3), 1);
        assert_eq!(pruned_count(0.25, 64), 16);
        assert_eq!(pruned_count(0.3, 10), 3);
        assert_eq!(pruned_count(0.29, 10), 2);
    }

    #[test]
    fn prunes_lowest_scores() {
        let so = scores("l", (0..64).map(|i| ((i * 37) % 64) as f64).collect());
        let si = scores("l", vec![1.0; 8]);
        let m = select_prune_sets(&so, &si, 0.25, 0.0).unwrap();
        assert_eq!(m.keep_out.iter().filter(|k| !**k).count(), 16);
        for (i, k) in m.keep_out.iter().enumerate() {
            assert_eq!(*k, so.scores[i] >= 16.0);
        }
        assert!(m.keep_in.iter().all(|&k| k));
        assert!(select_prune_sets(&so, &si, 0.99, 0.0).is_err());
        assert!(select_prune_sets(&so, &si, 1.0, 0.0).is_err());
    }

    #[test]
    fn layer_sparsity_arithmetic() {
        let shapes = vec![LayerShape { layer_id: "l".into(), out_ch: 64, in_ch: 32, kernel_area: 9 }];
        let kept = BTreeMap::from([("l".to_string(), (48, 24))]);
        let r = sparsity_from_counts(&shapes, &kept);
        assert_eq!(r.per_layer["l"].before, 18432);
        assert_eq!(r.per_layer["l"].after, 10368);
        assert!((r.s - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 0).unwrap();
        let m = StructuredMask::full("g_a.9", 6, 6);
        assert!(matches!(apply_masks(&model, &[m]), Err(Error::Argument(_))));
        let bad = StructuredMask::full("g_a.0", 5, 3);
        assert!(matches!(apply_masks(&model, &[bad]), Err(Error::Structural(_))));
    }

    #[test]
    fn full_masks_change_nothing() {
        let model = CodecModel::new(CodecConfig::mean_scale(4, 6, 3).unwrap(), 3).unwrap();
        let masks: Vec<_> = model
            .prunable_layer_ids()
            .iter()
            .map(|id| {
                let c = model.conv_layer(id).unwrap();
                StructuredMask::full(id.clone(), c.out_ch, c.in_ch)
            })
            .collect();
        let x = Tensor::full([1, 3, 64, 64], 0.4);
        let a = model.eval_forward(&x).unwrap();
        let b = apply_masks(&model, &masks).unwrap().eval_forward(&x).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        let c = compact(&model, &masks).unwrap();
        assert_eq!(c.param_count(), model.param_count());
        assert!(c.eval_forward(&x).unwrap().x_hat.max_abs_diff(&a.x_hat) < 1e-12);
        assert_eq!(sparsity(&model, &masks).unwrap().s, 0.0);
    }
}
