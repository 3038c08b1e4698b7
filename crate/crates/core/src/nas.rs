//! Layer-wise pruning-ratio search.
//!
//! The inner sweep prunes one layer at a time in groups of `K` channels and
//! keeps the largest pruned count whose relative RD-loss increase stays
//! within a tolerance `alpha`. The outer loop adjusts `alpha` until the
//! resulting model sparsity is within `delta` of the target.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;
use crate::criteria::{layer_importance, rank_channels, CalibrationSet, Criterion, Direction, FeatureBank};
use crate::error::{arg_err, Error, Result};
use crate::optim::LrSchedule;
use crate::pruner::{apply_masks, min_keep, sparsity_from_counts, LayerShape, PlanEntry, PruningPlan, Provenance, StructuredMask};
use crate::tensor::Tensor;
use crate::train::{train, FixedBatches, TrainConfig};

/// Search settings. The defaults are sized for the desk codec: loss changes
/// are measured without a per-candidate finetune on 16 calibration crops.
/// [`SearchConfig::full`] holds the full-size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub alpha_init: f64,
    pub delta: f64,
    pub group_size: usize,
    pub s_target: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub calib_size: usize,
    pub criterion: Criterion,
    pub max_outer_iters: usize,
    pub seed: u64,
    /// Also sweep filter channels after the filters of each layer.
    pub channels: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha_init: 0.05,
            delta: 0.01,
            group_size: 4,
            s_target: 0.3,
            finetune_steps: 0,
            finetune_lr: 1e-4,
            calib_size: 16,
            criterion: Criterion::Chip,
            max_outer_iters: 30,
            seed: 0,
            channels: true,
        }
    }
}

impl SearchConfig {
    /// 250 calibration images, 50 finetuning steps per candidate, groups of 8.
    pub fn full() -> Self {
        SearchConfig { finetune_steps: 50, calib_size: 250, group_size: 8, ..SearchConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_init > 0.0) || !self.alpha_init.is_finite() {
            return arg_err(format!("alpha_init must be positive, got {}", self.alpha_init));
        }
        if !(self.delta > 0.0) {
            return arg_err(format!("delta must be positive, got {}", self.delta));
        }
        if self.group_size == 0 {
            return arg_err("group size must be at least 1");
        }
        if !(self.s_target > 0.0 && self.s_target < 1.0) {
            return arg_err(format!("target sparsity {} outside (0, 1)", self.s_target));
        }
        if self.max_outer_iters == 0 {
            return arg_err("max_outer_iters must be at least 1");
        }
        if self.calib_size == 0 {
            return arg_err("calibration set size must be at least 1");
        }
        Ok(())
    }
}

/// One candidate of an inner sweep: prune the `pruned` least important
/// channels of `layer_id` along `direction`. For the input direction,
/// `out_pruned` filters chosen earlier in the same layer visit stay pruned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate<'a> {
    pub layer_id: &'a str,
    pub direction: Direction,
    pub out_pruned: usize,
    pub pruned: usize,
}

/// Something whose layers can be probed for RD-loss sensitivity.
pub trait SearchTarget {
    /// Prunable layers in topological order.
    fn layers(&self) -> Vec<LayerShape>;

    /// Relative RD-loss change caused by `candidate`, all other layers intact.
    fn delta_rd(&mut self, candidate: &Candidate) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchResult {
    pub layer_id: String,
    pub direction: Direction,
    /// `(pruned channel count, relative RD-loss change)` per candidate.
    pub tested: Vec<(usize, f64)>,
    pub chosen_pruned: usize,
    pub chosen_ratio: f64,
}

/// Candidate pruned counts: multiples of `group` up to the limit set by
/// [`min_keep`], plus the limit itself when it is not a multiple.
pub fn candidate_counts(channels: usize, group: usize) -> Vec<usize> {
    let limit = channels.saturating_sub(min_keep(channels));
    let mut out: Vec<usize> = (1..).map(|n| n * group).take_while(|&n| n <= limit).collect();
    if limit > 0 && out.last() != Some(&limit) {
        out.push(limit);
    }
    out
}

/// Largest tested count whose change is within `alpha` (zero if none is).
pub fn select_count(tested: &[(usize, f64)], alpha: f64) -> usize {
    tested.iter().filter(|(_, d)| *d <= alpha).map(|(n, _)| *n).max().unwrap_or(0)
}

/// Sweeps one layer along one direction and picks its ratio.
pub fn layer_ratio_search(
    target: &mut dyn SearchTarget,
    layer_id: &str,
    direction: Direction,
    out_pruned: usize,
    alpha: f64,
    cfg: &SearchConfig,
) -> Result<LayerSearchResult> {
    let shape = target
        .layers()
        .into_iter()
        .find(|l| l.layer_id == layer_id)
        .ok_or_else(|| Error::Argument(format!("layer {} is not prunable", layer_id)))?;
    if cfg.group_size == 0 {
        return arg_err("group size must be at least 1");
    }
    let channels = match direction {
        Direction::OutputMaps => shape.out_ch,
        Direction::InputMaps => shape.in_ch,
    };
    let mut tested = Vec::new();
    for n in candidate_counts(channels, cfg.group_size) {
        let d = target.delta_rd(&Candidate { layer_id, direction, out_pruned, pruned: n })?;
        tested.push((n, d));
    }
    let chosen = select_count(&tested, alpha);
    Ok(LayerSearchResult {
        layer_id: layer_id.to_string(),
        direction,
        tested,
        chosen_pruned: chosen,
        chosen_ratio: chosen as f64 / channels as f64,
    })
}

/// Runs the filter sweep and then the filter-channel sweep on every layer.
/// Returns the plan and its sparsity.
pub fn assign_ratios(target: &mut dyn SearchTarget, alpha: f64, cfg: &SearchConfig) -> Result<(PruningPlan, f64)> {
    let shapes = target.layers();
    let mut entries = BTreeMap::new();
    for s in &shapes {
        let out = layer_ratio_search(target, &s.layer_id, Direction::OutputMaps, 0, alpha, cfg)?;
        let kappa_in = if cfg.channels {
            layer_ratio_search(target, &s.layer_id, Direction::InputMaps, out.chosen_pruned, alpha, cfg)?.chosen_ratio
        } else {
            0.0
        };
        entries.insert(s.layer_id.clone(), PlanEntry { kappa_out: out.chosen_ratio, kappa_in });
    }
    let plan = PruningPlan { entries, criterion: cfg.criterion, provenance: Provenance::Nas };
    let s = sparsity_from_counts(&shapes, &plan.kept_counts(&shapes)?).s;
    Ok((plan, s))
}

/// Next tolerance given every `(alpha, S)` tried so far.
///
/// Doubles or halves `alpha` until some tried value lands on each side of
/// the target, then bisects between the closest bracketing pair.
pub fn adaptive_step(alpha: f64, achieved: f64, target: f64, history: &[(f64, f64)]) -> f64 {
    let below = history.iter().filter(|(_, s)| *s < target).map(|(a, _)| *a).fold(f64::NEG_INFINITY, f64::max);
    let above = history.iter().filter(|(_, s)| *s > target).map(|(a, _)| *a).fold(f64::INFINITY, f64::min);
    if below.is_finite() && above.is_finite() && below < above {
        return 0.5 * (below + above);
    }
    if achieved < target {
        alpha * 2.0
    } else {
        alpha / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub alpha: f64,
    pub achieved_s: f64,
    pub plan: PruningPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub s_target: f64,
    pub outer_iters: Vec<OuterIteration>,
    pub terminated: Termination,
}

impl SearchTrace {
    /// One line per outer iteration: alpha, sparsity and per-layer ratios.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for (i, it) in self.outer_iters.iter().enumerate() {
            let _ = write!(s, "iter={} alpha={:.6e} S={:.6} target={:.4} ratios=", i + 1, it.alpha, it.achieved_s, self.s_target);
            let ratios: Vec<String> = it
                .plan
                .entries
                .iter()
                .map(|(id, e)| format!("{}:{:.4}/{:.4}", id, e.kappa_out, e.kappa_in))
                .collect();
            s.push_str(&ratios.join(","));
            s.push('\n');
        }
        let _ = writeln!(s, "terminated={}", match self.terminated {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
        });
        s
    }

    /// The iteration closest to the target.
    pub fn best(&self) -> Option<&OuterIteration> {
        self.outer_iters
            .iter()
            .min_by(|a, b| (a.achieved_s - self.s_target).abs().total_cmp(&(b.achieved_s - self.s_target).abs()))
    }
}

/// Outer tolerance search over any `alpha → (plan, S)` map.
///
/// Stops once `|S - S_target| ≤ delta` or after `max_outer_iters`
/// evaluations; in the latter case the plan closest to the target is
/// returned and the trace is flagged.
pub fn outer_search(
    eval: &mut dyn FnMut(f64) -> Result<(PruningPlan, f64)>,
    cfg: &SearchConfig,
) -> Result<(PruningPlan, SearchTrace)> {
    cfg.validate()?;
    let mut trace = SearchTrace { s_target: cfg.s_target, outer_iters: Vec::new(), terminated: Termination::MaxIters };
    let mut history = Vec::new();
    let mut alpha = cfg.alpha_init;
    for _ in 0..cfg.max_outer_iters {
        let (plan, s) = eval(alpha)?;
        log::info!("alpha {:.4e} -> S {:.4} (target {:.4})", alpha, s, cfg.s_target);
        history.push((alpha, s));
        trace.outer_iters.push(OuterIteration { alpha, achieved_s: s, plan });
        if (s - cfg.s_target).abs() <= cfg.delta {
            trace.terminated = Termination::Converged;
            break;
        }
        alpha = adaptive_step(alpha, s, cfg.s_target, &history);
    }
    let plan = match trace.terminated {
        Termination::Converged => trace.outer_iters.last(),
        Termination::MaxIters => trace.best(),
    }
    .map(|it| it.plan.clone())
    .ok_or_else(|| Error::State("search ran no iterations".into()))?;
    Ok((plan, trace))
}

/// Full two-level search on a [`SearchTarget`].
pub fn alpha_outer_search(target: &mut dyn SearchTarget, cfg: &SearchConfig) -> Result<(PruningPlan, SearchTrace)> {
    outer_search(&mut |alpha| assign_ratios(target, alpha, cfg), cfg)
}

/// Mean deterministic RD loss over `batches`.
pub fn mean_rd_loss(model: &CodecModel, batches: &[Tensor], lambda: f64) -> Result<f64> {
    if batches.is_empty() {
        return arg_err("calibration set is empty");
    }
    let mut total = 0.0;
    for b in batches {
        total += model.rd_loss(b, lambda)?.total;
    }
    Ok(total / batches.len() as f64)
}

/// Relative RD-loss change of `model` under `masks` after a short masked
/// finetune on `calib`. `baseline` is the unpruned model's [`mean_rd_loss`].
pub fn measure_delta_rd(
    model: &CodecModel,
    masks: &[StructuredMask],
    calib: &[Tensor],
    finetune_steps: usize,
    lambda: f64,
    lr: f64,
    seed: u64,
    baseline: Option<f64>,
) -> Result<f64> {
    let base = baseline.ok_or_else(|| Error::State("baseline RD loss has not been computed".into()))?;
    let mut m = apply_masks(model, masks)?;
    if finetune_steps > 0 {
        let mut data = FixedBatches::new(calib.to_vec())?;
        let cfg = TrainConfig {
            steps: finetune_steps,
            lr,
            schedule: LrSchedule::Constant,
            lambda,
            clip_norm: Some(1.0),
            seed,
        };
        train(&mut m, &mut data, &cfg)?;
    }
    let loss = mean_rd_loss(&m, calib, lambda)?;
    Ok((loss - base) / base)
}

type MemoKey = (String, Direction, usize, usize);

/// [`SearchTarget`] backed by a trained codec.
///
/// Channel rankings come from the unpruned model and are computed once per
/// layer and direction. Measured changes are memoized, so repeated outer
/// iterations (and searches at other targets) reuse earlier candidates.
pub struct CodecSearch {
    model: CodecModel,
    calib: Vec<Tensor>,
    bank: Option<FeatureBank>,
    lambda: f64,
    criterion: Criterion,
    finetune_steps: usize,
    finetune_lr: f64,
    seed: u64,
    baseline: Option<f64>,
    rankings: BTreeMap<(String, Direction), Vec<usize>>,
    memo: BTreeMap<MemoKey, f64>,
    pub measurements: usize,
}

impl CodecSearch {
    /// `calib` holds the batches used for finetuning and loss measurement;
    /// `features` the images used by feature-guided criteria.
    pub fn new(
        model: CodecModel,
        calib: Vec<Tensor>,
        features: &CalibrationSet,
        lambda: f64,
        cfg: &SearchConfig,
    ) -> Result<Self> {
        if !model.masks.is_empty() {
            return Err(Error::State("search must start from an unpruned model".into()));
        }
        if calib.is_empty() {
            return arg_err("calibration set is empty");
        }
        let bank = if cfg.criterion.feature_guided() { Some(FeatureBank::collect(&model, features)?) } else { None };
        Ok(CodecSearch {
            model,
            calib,
            bank,
            lambda,
            criterion: cfg.criterion,
            finetune_steps: cfg.finetune_steps,
            finetune_lr: cfg.finetune_lr,
            seed: cfg.seed,
            baseline: None,
            rankings: BTreeMap::new(),
            memo: BTreeMap::new(),
            measurements: 0,
        })
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn feature_bank(&self) -> Option<&FeatureBank> {
        self.bank.as_ref()
    }

    /// Computes and caches the unpruned model's calibration RD loss.
    pub fn compute_baseline(&mut self) -> Result<f64> {
        if let Some(b) = self.baseline {
            return Ok(b);
        }
        let b = mean_rd_loss(&self.model, &self.calib, self.lambda)?;
        if !(b > 0.0) {
            return Err(Error::Numerical { term: "baseline".into(), detail: format!("RD loss {}", b) });
        }
        self.baseline = Some(b);
        Ok(b)
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    fn ranking(&mut self, layer_id: &str, direction: Direction) -> Result<Vec<usize>> {
        let key = (layer_id.to_string(), direction);
        if let Some(r) = self.rankings.get(&key) {
            return Ok(r.clone());
        }
        let scores = layer_importance(&self.model, self.bank.as_ref(), layer_id, direction, self.criterion)?;
        let r = rank_channels(&scores);
        self.rankings.insert(key, r.clone());
        Ok(r)
    }

    /// Mask removing the `out_pruned` / `in_pruned` least important channels.
    pub fn candidate_mask(&mut self, layer_id: &str, out_pruned: usize, in_pruned: usize) -> Result<StructuredMask> {
        let c = self
            .model
            .conv_layer(layer_id)
            .ok_or_else(|| Error::Argument(format!("unknown layer {}", layer_id)))?;
        let mut mask = StructuredMask::full(layer_id, c.out_ch, c.in_ch);
        for &i in self.ranking(layer_id, Direction::OutputMaps)?.iter().take(out_pruned) {
            mask.keep_out[i] = false;
        }
        for &i in self.ranking(layer_id, Direction::InputMaps)?.iter().take(in_pruned) {
            mask.keep_in[i] = false;
        }
        Ok(mask)
    }

    /// [`measure_delta_rd`] for explicit masks, using the cached baseline.
    pub fn measure(&mut self, masks: &[StructuredMask]) -> Result<f64> {
        self.measurements += 1;
        measure_delta_rd(
            &self.model,
            masks,
            &self.calib,
            self.finetune_steps,
            self.lambda,
            self.finetune_lr,
            self.seed,
            self.baseline,
        )
    }
}

impl SearchTarget for CodecSearch {
    fn layers(&self) -> Vec<LayerShape> {
        LayerShape::of_model(&self.model)
    }

    fn delta_rd(&mut self, c: &Candidate) -> Result<f64> {
        let (out_p, in_p) = match c.direction {
            Direction::OutputMaps => (c.pruned, 0),
            Direction::InputMaps => (c.out_pruned, c.pruned),
        };
        let key = (c.layer_id.to_string(), Direction::OutputMaps, out_p, in_p);
        if let Some(&d) = self.memo.get(&key) {
            return Ok(d);
        }
        if self.baseline.is_none() {
            return Err(Error::State("baseline RD loss has not been computed".into()));
        }
        let mask = self.candidate_mask(c.layer_id, out_p, in_p)?;
        let d = self.measure(&[mask])?;
        self.memo.insert(key, d);
        Ok(d)
    }
}

/// [`SearchTarget`] whose changes come from a supplied function of
/// `(layer id, direction, filters already pruned, pruned count)`.
pub struct InjectedLandscape<F> {
    pub shapes: Vec<LayerShape>,
    pub delta: F,
}

impl<F> SearchTarget for InjectedLandscape<F>
where
    F: FnMut(&str, Direction, usize, usize) -> f64,
{
    fn layers(&self) -> Vec<LayerShape> {
        self.shapes.clone()
    }

    fn delta_rd(&mut self, c: &Candidate) -> Result<f64> {
        Ok((self.delta)(c.layer_id, c.direction, c.out_pruned, c.pruned))
    }
}
