//! Stage orchestration: baseline training, pruning runs, joint pruning and
//! quantization, evaluation and reporting.
//!
//! Every stage is recorded in `manifest.json` under the output directory with
//! a content hash of its inputs. A rerun skips any stage whose hash matches
//! and whose artifacts are all still on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::codec::CodecModel;
use crate::config::{ExperimentConfig, PruneMode};
use crate::criteria::{CalibrationSet, Criterion, FeatureBank};
use crate::data::{list_images, load_dir, load_eval_set, CropStream, EvalImage};
use crate::error::{Error, Result};
use crate::eval::{bd_rate, emit_plot, evaluate_model, format_table, write_curves_csv, ImageScore, RDCurve, RDPoint};
use crate::nas::{alpha_outer_search, mean_rd_loss, CodecSearch, SearchTrace, Termination};
use crate::pruner::{compact, sparsity, PruningPlan};
use crate::quant::{attach_quantizers, model_size_bytes, ModelSize};
use crate::tensor::Tensor;
use crate::train::{train, BatchSource, TrainConfig, TrainReport};

pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content hash of every image in the given directories (names and bytes).
pub fn hash_inputs(dirs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for dir in dirs {
        for path in list_images(dir)? {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(name.as_bytes());
            let bytes = fs::read(&path)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    #[serde(default)]
    pub flags: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub input_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        write_json(&tmp, self)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// True when `key` finished with the same input hash and its artifacts
    /// are still present under `root`.
    pub fn is_complete(&self, root: &Path, key: &str, hash: &str) -> bool {
        self.stages
            .get(key)
            .is_some_and(|r| r.hash == hash && r.artifacts.iter().all(|a| root.join(a).exists()))
    }

    /// Every artifact listed by any stage.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        self.stages.values().flat_map(|r| r.artifacts.iter().cloned()).collect()
    }
}

/// One pruning (optionally quantized) experiment repeated for every lambda.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub mode: PruneMode,
    pub criterion: Criterion,
    pub s_target: f64,
    pub channels: bool,
    /// Bit width when the run is quantized after pruning.
    pub quant_bits: Option<u32>,
}

impl RunSpec {
    pub fn new(mode: PruneMode, criterion: Criterion, s_target: f64, channels: bool, quant_bits: Option<u32>) -> Self {
        let mut spec = RunSpec { name: String::new(), mode, criterion, s_target, channels, quant_bits };
        spec.name = spec.default_name();
        spec
    }

    /// Run settings described by the config's `[prune]`, `[search]` and `[quant]` tables.
    pub fn from_config(cfg: &ExperimentConfig, quantized: bool) -> Self {
        RunSpec::new(
            cfg.prune.mode,
            cfg.search.criterion,
            cfg.search.s_target,
            cfg.prune.channels,
            if quantized { Some(cfg.quant.bits) } else { None },
        )
    }

    pub fn default_name(&self) -> String {
        let mode = match self.mode {
            PruneMode::Nas => "nas",
            PruneMode::Fixed => "fixed",
        };
        let kind = if self.channels { "fc" } else { "f" };
        let q = self.quant_bits.map(|b| format!("-q{}", b)).unwrap_or_default();
        format!("{}-{}-{}-s{}{}", mode, self.criterion.name(), kind, (self.s_target * 100.0).round(), q)
    }

    /// Row label used in the tables.
    pub fn pruning_label(&self) -> &'static str {
        match (self.mode, self.channels) {
            (PruneMode::Fixed, false) => "filters",
            (PruneMode::Fixed, true) => "filters + channels",
            (PruneMode::Nas, false) => "filters + NAS",
            (PruneMode::Nas, true) => "filters + channels + NAS",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub params: usize,
    pub size: ModelSize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub s: f64,
    pub param_reduction: f64,
    pub params_after: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Calibration RD loss after each stage, in order.
    pub stage_losses: Vec<(String, f64)>,
    pub size: ModelSize,
    pub termination: Option<Termination>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub spec: RunSpec,
    pub per_lambda: Vec<LambdaSummary>,
    pub bd_rate: Option<f64>,
}

impl RunSummary {
    pub fn curve(&self) -> Result<RDCurve> {
        RDCurve::new(
            self.spec.name.clone(),
            self.per_lambda.iter().map(|l| RDPoint { lambda: l.lambda, bpp: l.bpp, psnr_db: l.psnr_db }).collect(),
        )
    }

    fn mean(&self, f: impl Fn(&LambdaSummary) -> f64) -> f64 {
        self.per_lambda.iter().map(f).sum::<f64>() / self.per_lambda.len().max(1) as f64
    }

    pub fn mean_s(&self) -> f64 {
        self.mean(|l| l.s)
    }

    pub fn mean_reduction(&self) -> f64 {
        self.mean(|l| l.param_reduction)
    }

    pub fn mean_ratio(&self) -> f64 {
        self.mean(|l| l.size.compression_ratio)
    }

    pub fn mean_bytes(&self) -> f64 {
        self.mean(|l| l.size.bytes)
    }

    pub fn converged(&self) -> bool {
        self.per_lambda.iter().all(|l| l.termination != Some(Termination::MaxIters))
    }
}

fn lambda_tag(lambda: f64) -> String {
    format!("lambda_{}", lambda)
}

struct Calibration {
    batches: Vec<Tensor>,
    features: CalibrationSet,
}

/// Stateful runner bound to one output directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    root: PathBuf,
    manifest: RunManifest,
    train_images: Option<Vec<Tensor>>,
    eval_images: Option<Vec<EvalImage>>,
    calibration: Option<Calibration>,
    searches: BTreeMap<(u64, Criterion), CodecSearch>,
}

impl Pipeline {
    /// Validates the config, hashes the inputs and opens (or starts) the
    /// manifest in the config's output directory.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        config.validate_paths()?;
        let root = config.output_dir.clone();
        fs::create_dir_all(&root)?;
        let input_hash = hash_inputs(&[&config.data.train_dir, config.data.calib_dir(), &config.data.eval_dir])?;
        let path = root.join(MANIFEST_FILE);
        let stages = if path.exists() { RunManifest::load(&path)?.stages } else { BTreeMap::new() };
        let manifest = RunManifest { config: config.clone(), input_hash, stages };
        manifest.save(&path)?;
        Ok(Pipeline {
            config,
            root,
            manifest,
            train_images: None,
            eval_images: None,
            calibration: None,
            searches: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn stage_hash<P: Serialize>(&self, key: &str, params: &P) -> Result<String> {
        let p = serde_json::to_vec(params)?;
        Ok(sha256_hex(&[self.manifest.input_hash.as_bytes(), key.as_bytes(), &p]))
    }

    /// Runs `body` unless `key` already completed with the same inputs.
    /// `body` returns the written artifacts (absolute or root-relative) and
    /// any flags to record.
    fn stage<P: Serialize>(
        &mut self,
        key: &str,
        params: &P,
        body: impl FnOnce(&mut Self) -> Result<(Vec<PathBuf>, BTreeMap<String, String>)>,
    ) -> Result<StageRecord> {
        let hash = self.stage_hash(key, params)?;
        if self.manifest.is_complete(&self.root, key, &hash) {
            log::info!("stage {} is up to date", key);
            return Ok(self.manifest.stages[key].clone());
        }
        log::info!("running stage {}", key);
        let start = Instant::now();
        let (artifacts, flags) = body(self)?;
        let root = self.root.clone();
        let artifacts = artifacts
            .into_iter()
            .map(|p| p.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(p))
            .collect::<Vec<_>>();
        for a in &artifacts {
            if !root.join(a).exists() {
                return Err(Error::Invariant(format!("stage {} did not produce {}", key, a.display())));
            }
        }
        let record = StageRecord { hash, artifacts, seconds: start.elapsed().as_secs_f64(), flags };
        self.manifest.stages.insert(key.to_string(), record.clone());
        self.manifest.save(&self.root.join(MANIFEST_FILE))?;
        Ok(record)
    }

    fn train_images(&mut self) -> Result<&Vec<Tensor>> {
        if self.train_images.is_none() {
            let imgs = load_dir(&self.config.data.train_dir, self.config.schedule.crop_size)?;
            self.train_images = Some(imgs.into_iter().map(|(_, t)| t).collect());
        }
        Ok(self.train_images.as_ref().expect("loaded above"))
    }

    fn eval_images(&mut self) -> Result<&Vec<EvalImage>> {
        if self.eval_images.is_none() {
            self.eval_images = Some(load_eval_set(&self.config.data.eval_dir, self.config.codec().total_factor())?);
        }
        Ok(self.eval_images.as_ref().expect("loaded above"))
    }

    fn calibration(&mut self) -> Result<&Calibration> {
        if self.calibration.is_none() {
            let s = &self.config.schedule;
            let images: Vec<Tensor> = load_dir(self.config.data.calib_dir(), s.crop_size)?.into_iter().map(|(_, t)| t).collect();
            let mut stream = CropStream::new(images, s.crop_size, 1, s.seed ^ 0x5eed_ca1b)?;
            let crops = (0..self.config.search.calib_size).map(|_| stream.next_batch()).collect::<Result<Vec<_>>>()?;
            let batches = crops.chunks(s.batch_size).map(Tensor::stack).collect::<Result<Vec<_>>>()?;
            let features = CalibrationSet::new(&crops)?.truncated(self.config.data.feature_images);
            self.calibration = Some(Calibration { batches, features });
        }
        Ok(self.calibration.as_ref().expect("built above"))
    }

    fn train_config(&self, steps: usize, lr: f64, lambda: f64, seed: u64) -> TrainConfig {
        let s = &self.config.schedule;
        TrainConfig { steps, lr, schedule: s.lr_schedule, lambda, clip_norm: s.clip_norm, seed }
    }

    fn steps(&mut self, d: crate::config::Duration) -> Result<usize> {
        let batch = self.config.schedule.batch_size;
        let n = self.train_images()?.len();
        Ok(d.steps(n, batch))
    }

    fn finetune(&mut self, model: &mut CodecModel, steps: usize, lambda: f64, seed: u64) -> Result<TrainReport> {
        let s = self.config.schedule.clone();
        let images = self.train_images()?.clone();
        let mut data = CropStream::new(images, s.crop_size, s.batch_size, seed)?;
        let cfg = self.train_config(steps, s.finetune_lr, lambda, seed);
        train(model, &mut data, &cfg)
    }

    fn calib_loss(&mut self, model: &CodecModel, lambda: f64) -> Result<f64> {
        let batches = &self.calibration()?.batches;
        mean_rd_loss(model, batches, lambda)
    }

    fn evaluate_to_csv(&mut self, model: &CodecModel, path: &Path) -> Result<(f64, f64)> {
        let images = self.eval_images()?;
        let (bpp, psnr, scores) = evaluate_model(model, images)?;
        write_scores(path, &scores)?;
        Ok((bpp, psnr))
    }

    pub fn baseline_dir(&self, lambda: f64) -> PathBuf {
        self.root.join("baseline").join(lambda_tag(lambda))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    fn baseline_params(&self, lambda: f64) -> serde_json::Value {
        let s = &self.config.schedule;
        serde_json::json!({
            "codec": self.config.codec(),
            "lambda": lambda,
            "steps": s.baseline,
            "batch": s.batch_size,
            "lr": s.lr,
            "schedule": s.lr_schedule,
            "crop": s.crop_size,
            "clip": s.clip_norm,
            "seed": s.seed,
        })
    }

    /// Trains (or reuses) the baseline for `lambda`; returns its checkpoint.
    pub fn baseline(&mut self, lambda: f64) -> Result<PathBuf> {
        let dir = self.baseline_dir(lambda);
        let key = format!("baseline/{}", lambda_tag(lambda));
        let params = self.baseline_params(lambda);
        self.stage(&key, &params, |p| {
            let s = p.config.schedule.clone();
            let steps = p.steps(s.baseline)?;
            let images = p.train_images()?.clone();
            let epoch_steps = images.len().div_ceil(s.batch_size).max(1);
            let mut data = CropStream::new(images, s.crop_size, s.batch_size, s.seed)?;
            let mut model = CodecModel::new(p.config.codec(), s.seed)?;
            let cfg = p.train_config(steps, s.lr, lambda, s.seed);
            let report = train(&mut model, &mut data, &cfg)?;
            fs::create_dir_all(&dir)?;
            let metrics = dir.join("metrics.csv");
            write_metrics(&metrics, &report, epoch_steps)?;
            let ckpt = dir.join("model.licp");
            let meta = CheckpointMeta { lambda: Some(lambda), step: steps, seed: s.seed, ..Default::default() };
            save_checkpoint(&ckpt, &model, &meta)?;
            let eval_csv = dir.join("eval.csv");
            let (bpp, psnr) = p.evaluate_to_csv(&model, &eval_csv)?;
            let summary = BaselineSummary {
                lambda,
                bpp,
                psnr_db: psnr,
                params: model.param_count(),
                size: model_size_bytes(&model, &[], false, 32)?,
                steps,
                initial_loss: report.losses.first().map_or(f64::NAN, |l| l.total),
                final_loss: report.losses.last().map_or(f64::NAN, |l| l.total),
            };
            let summary_path = dir.join("summary.json");
            write_json(&summary_path, &summary)?;
            Ok((vec![ckpt, metrics, eval_csv, summary_path], BTreeMap::new()))
        })?;
        Ok(self.baseline_dir(lambda).join("model.licp"))
    }

    /// Baselines for every configured lambda, plus their RD curve.
    pub fn train_baselines(&mut self) -> Result<Vec<PathBuf>> {
        let lambdas = self.config.lambdas.clone();
        let ckpts = lambdas.iter().map(|&l| self.baseline(l)).collect::<Result<Vec<_>>>()?;
        let curve = self.baseline_curve()?;
        let path = self.root.join("baseline").join("curve.csv");
        write_curves_csv(&path, &[curve])?;
        self.record_derived("baseline/curve", vec![path])?;
        Ok(ckpts)
    }

    /// Records an always-regenerated artifact (it is cheap and deterministic).
    fn record_derived(&mut self, key: &str, artifacts: Vec<PathBuf>) -> Result<()> {
        let root = self.root.clone();
        let artifacts: Vec<PathBuf> =
            artifacts.into_iter().map(|p| p.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(p)).collect();
        let mut bytes = Vec::new();
        for a in &artifacts {
            bytes.extend(fs::read(root.join(a))?);
        }
        let hash = sha256_hex(&[&bytes]);
        self.manifest.stages.insert(key.to_string(), StageRecord { hash, artifacts, seconds: 0.0, flags: BTreeMap::new() });
        self.manifest.save(&root.join(MANIFEST_FILE))
    }

    pub fn baseline_summaries(&self) -> Result<Vec<BaselineSummary>> {
        self.config
            .lambdas
            .iter()
            .map(|&l| read_json(&self.baseline_dir(l).join("summary.json")))
            .collect()
    }

    pub fn baseline_curve(&self) -> Result<RDCurve> {
        let pts = self
            .baseline_summaries()?
            .into_iter()
            .map(|b| RDPoint { lambda: b.lambda, bpp: b.bpp, psnr_db: b.psnr_db })
            .collect();
        RDCurve::new("baseline", pts)
    }

    fn search_config(&self, spec: &RunSpec) -> crate::nas::SearchConfig {
        crate::nas::SearchConfig {
            s_target: spec.s_target,
            criterion: spec.criterion,
            channels: spec.channels,
            ..self.config.search.clone()
        }
    }

    fn plan_params(&self, spec: &RunSpec, lambda: f64) -> serde_json::Value {
        serde_json::json!({
            "baseline": self.baseline_params(lambda),
            "mode": spec.mode,
            "criterion": spec.criterion,
            "s_target": spec.s_target,
            "channels": spec.channels,
            "search": self.search_config(spec),
            "features": self.config.data.feature_images,
        })
    }

    /// Computes (or reuses) the pruning plan for one lambda.
    pub fn plan(&mut self, spec: &RunSpec, lambda: f64) -> Result<(PruningPlan, StageRecord)> {
        let ckpt = self.baseline(lambda)?;
        let dir = self.run_dir(&spec.name).join(lambda_tag(lambda));
        let key = format!("plan/{}/{}", spec.name, lambda_tag(lambda));
        let params = self.plan_params(spec, lambda);
        let spec2 = spec.clone();
        let record = self.stage(&key, &params, |p| {
            fs::create_dir_all(&dir)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let mut artifacts = Vec::new();
            let mut flags = BTreeMap::new();
            let plan = match spec2.mode {
                PruneMode::Fixed => PruningPlan::uniform_for_sparsity(&model, spec2.s_target, spec2.channels, spec2.criterion)?,
                PruneMode::Nas => {
                    let cfg = p.search_config(&spec2);
                    let (plan, trace) = p.nas(model, lambda, &cfg)?;
                    let log_path = dir.join("trace.log");
                    fs::write(&log_path, trace.to_log())?;
                    let trace_path = dir.join("trace.json");
                    write_json(&trace_path, &trace)?;
                    artifacts.extend([log_path, trace_path]);
                    flags.insert(
                        "termination".into(),
                        match trace.terminated {
                            Termination::Converged => "converged".into(),
                            Termination::MaxIters => "max_iters".into(),
                        },
                    );
                    plan
                }
            };
            let plan_path = dir.join("plan.json");
            write_json(&plan_path, &plan)?;
            artifacts.push(plan_path);
            Ok((artifacts, flags))
        })?;
        let plan = read_json(&self.run_dir(&spec.name).join(lambda_tag(lambda)).join("plan.json"))?;
        Ok((plan, record))
    }

    fn nas(&mut self, model: CodecModel, lambda: f64, cfg: &crate::nas::SearchConfig) -> Result<(PruningPlan, SearchTrace)> {
        let key = (lambda.to_bits(), cfg.criterion);
        if !self.searches.contains_key(&key) {
            let calib = self.calibration()?;
            let (batches, features) = (calib.batches.clone(), calib.features.clone());
            let mut search = CodecSearch::new(model, batches, &features, lambda, cfg)?;
            search.compute_baseline()?;
            self.searches.insert(key, search);
        }
        let search = self.searches.get_mut(&key).expect("inserted above");
        let before = search.measurements;
        let out = alpha_outer_search(search, cfg)?;
        log::info!("search used {} new loss measurements", search.measurements - before);
        Ok(out)
    }

    /// Prunes, compacts, finetunes (with quantization-aware training when the
    /// run asks for it) and evaluates one lambda.
    pub fn run_lambda(&mut self, spec: &RunSpec, lambda: f64) -> Result<LambdaSummary> {
        let (plan, plan_record) = self.plan(spec, lambda)?;
        let ckpt = self.baseline(lambda)?;
        let dir = self.run_dir(&spec.name).join(lambda_tag(lambda));
        let key = format!("run/{}/{}", spec.name, lambda_tag(lambda));
        let s = &self.config.schedule;
        let params = serde_json::json!({
            "plan": plan_record.hash,
            "finetune": s.prune_finetune,
            "pq_pre": s.pq_pre,
            "pq_post": s.pq_post,
            "lr": s.finetune_lr,
            "bits": spec.quant_bits,
        });
        let termination = plan_record.flags.get("termination").map(|t| {
            if t == "max_iters" {
                Termination::MaxIters
            } else {
                Termination::Converged
            }
        });
        let spec2 = spec.clone();
        self.stage(&key, &params, |p| {
            let (base, _) = load_checkpoint(&ckpt)?;
            let bank = if plan.criterion.feature_guided() {
                let features = p.calibration()?.features.clone();
                Some(FeatureBank::collect(&base, &features)?)
            } else {
                None
            };
            let masks = plan.to_masks(&base, bank.as_ref())?;
            let report = sparsity(&base, &masks)?;
            let sparsity_path = dir.join("sparsity.csv");
            report.write_csv(&sparsity_path)?;
            let mut model = compact(&base, &masks)?;
            if model.param_count() != report.total_params_after {
                return Err(Error::Invariant(format!(
                    "compacted model has {} parameters, report says {}",
                    model.param_count(),
                    report.total_params_after
                )));
            }
            let seed = p.config.schedule.seed;
            let mut losses = vec![("post_prune".to_string(), p.calib_loss(&model, lambda)?)];
            let sched = p.config.schedule.clone();
            match spec2.quant_bits {
                None => {
                    let steps = p.steps(sched.prune_finetune)?;
                    p.finetune(&mut model, steps, lambda, seed)?;
                    losses.push(("post_finetune".into(), p.calib_loss(&model, lambda)?));
                }
                Some(bits) => {
                    let pre = p.steps(sched.pq_pre)?;
                    p.finetune(&mut model, pre, lambda, seed)?;
                    losses.push(("post_finetune".into(), p.calib_loss(&model, lambda)?));
                    attach_quantizers(&mut model, bits)?;
                    losses.push(("post_quant".into(), p.calib_loss(&model, lambda)?));
                    let post = p.steps(sched.pq_post)?;
                    p.finetune(&mut model, post, lambda, seed.wrapping_add(1))?;
                    losses.push(("post_qat".into(), p.calib_loss(&model, lambda)?));
                }
            }
            let model_path = dir.join("model.licp");
            let meta = CheckpointMeta { lambda: Some(lambda), step: 0, seed, plan: Some(plan.clone()), notes: BTreeMap::new() };
            save_checkpoint(&model_path, &model, &meta)?;
            let eval_csv = dir.join("eval.csv");
            let (bpp, psnr) = p.evaluate_to_csv(&model, &eval_csv)?;
            let size = model_size_bytes(&model, &[], spec2.quant_bits.is_some(), spec2.quant_bits.unwrap_or(32))?;
            let summary = LambdaSummary {
                lambda,
                s: report.s,
                param_reduction: report.total_reduction(),
                params_after: report.total_params_after,
                bpp,
                psnr_db: psnr,
                stage_losses: losses,
                size,
                termination,
            };
            let summary_path = dir.join("summary.json");
            write_json(&summary_path, &summary)?;
            let mut flags = BTreeMap::new();
            if termination == Some(Termination::MaxIters) {
                flags.insert("termination".into(), "max_iters".into());
            }
            Ok((vec![sparsity_path, model_path, eval_csv, summary_path], flags))
        })?;
        read_json(&dir.join("summary.json"))
    }

    /// A complete run over every lambda, with its curve and BD-rate against
    /// the baseline.
    pub fn run(&mut self, spec: &RunSpec) -> Result<RunSummary> {
        self.train_baselines()?;
        let lambdas = self.config.lambdas.clone();
        let per_lambda = lambdas.iter().map(|&l| self.run_lambda(spec, l)).collect::<Result<Vec<_>>>()?;
        let mut summary = RunSummary { spec: spec.clone(), per_lambda, bd_rate: None };
        let curve = summary.curve()?;
        let base = self.baseline_curve()?;
        summary.bd_rate = match bd_rate(&base, &curve) {
            Ok(b) => Some(b),
            Err(e) => {
                log::warn!("no BD-rate for {}: {}", spec.name, e);
                None
            }
        };
        let dir = self.run_dir(&spec.name);
        let curve_path = dir.join("curve.csv");
        write_curves_csv(&curve_path, &[curve])?;
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        self.record_derived(&format!("summary/{}", spec.name), vec![curve_path, summary_path])?;
        Ok(summary)
    }

    /// Plans only (the `search` subcommand).
    pub fn search(&mut self, spec: &RunSpec) -> Result<Vec<PruningPlan>> {
        let lambdas = self.config.lambdas.clone();
        lambdas.iter().map(|&l| self.plan(spec, l).map(|(p, _)| p)).collect()
    }

    /// Summaries of every run found under the output directory.
    pub fn run_summaries(&self) -> Result<Vec<RunSummary>> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        if dir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            entries.sort();
            for e in entries {
                let p = e.join("summary.json");
                if p.exists() {
                    out.push(read_json(&p)?);
                }
            }
        }
        Ok(out)
    }

    /// Writes the text tables and the RD plot under `report/`.
    pub fn report(&mut self) -> Result<PathBuf> {
        let baseline = self.baseline_curve().ok();
        let baseline_size = self.baseline_summaries().ok().and_then(|b| b.first().map(|s| s.size.bytes));
        let runs = self.run_summaries()?;
        let text = render_report(baseline_size, &runs, self.config.quant.bits);
        let dir = self.root.join("report");
        fs::create_dir_all(&dir)?;
        let tables = dir.join("tables.md");
        fs::write(&tables, &text)?;
        let mut artifacts = vec![tables.clone()];
        let mut curves: Vec<RDCurve> = baseline.into_iter().collect();
        for r in &runs {
            curves.push(r.curve()?);
        }
        if !curves.is_empty() {
            let svg = dir.join("rd.svg");
            let csv = emit_plot(&curves, &svg)?;
            artifacts.extend([svg, csv]);
        }
        self.record_derived("report", artifacts)?;
        Ok(tables)
    }
}

fn write_metrics(path: &Path, report: &TrainReport, window: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "total", "bpp", "distortion"])?;
    for (i, chunk) in report.losses.chunks(window).enumerate() {
        let n = chunk.len() as f64;
        let mean = |f: &dyn Fn(&crate::codec::RDLossBreakdown) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        w.write_record([
            ((i * window + chunk.len()).to_string()),
            mean(&|l| l.total).to_string(),
            mean(&|l| l.bpp).to_string(),
            mean(&|l| l.distortion).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores(path: &Path, scores: &[ImageScore]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "bpp", "psnr_db"])?;
    for s in scores {
        w.write_record([s.source.clone(), s.bpp.to_string(), s.psnr_db.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates a checkpoint on every image of `eval_dir`.
pub fn evaluate_checkpoint(ckpt: &Path, eval_dir: &Path, out_csv: &Path) -> Result<(f64, f64)> {
    let (model, _) = load_checkpoint(ckpt)?;
    let images = load_eval_set(eval_dir, model.config.total_factor())?;
    let (bpp, psnr, scores) = evaluate_model(&model, &images)?;
    write_scores(out_csv, &scores)?;
    Ok((bpp, psnr))
}

fn fmt_pct(v: f64) -> String {
    format!("{:.3}", v * 100.0)
}

fn fmt_bd(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |b| format!("{:+.3}", b))
}

/// The three text tables: per criterion and pruning type, per target
/// sparsity, and per storage size. BD-rates are in percent against the
/// baseline curve.
pub fn render_report(baseline_bytes: Option<f64>, runs: &[RunSummary], bits: u32) -> String {
    let mut out = String::new();
    let mut float_runs: Vec<&RunSummary> = runs.iter().filter(|r| r.spec.quant_bits.is_none()).collect();
    float_runs.sort_by(|a, b| {
        (a.spec.criterion, a.spec.s_target.to_bits(), a.spec.pruning_label())
            .cmp(&(b.spec.criterion, b.spec.s_target.to_bits(), b.spec.pruning_label()))
    });

    out.push_str("## Pruning type by criterion\n\n");
    let rows: Vec<Vec<String>> = float_runs
        .iter()
        .map(|r| {
            vec![
                r.spec.criterion.name().to_string(),
                r.spec.pruning_label().to_string(),
                fmt_pct(r.spec.s_target),
                fmt_pct(r.mean_s()),
                fmt_pct(r.mean_reduction()),
                fmt_bd(r.bd_rate),
            ]
        })
        .collect();
    out.push_str(&format_table(&["criterion", "pruning", "target S (%)", "S (%)", "param reduction (%)", "BD-rate (%)"], &rows));

    out.push_str("\n## Searched ratios by target sparsity\n\n");
    let rows: Vec<Vec<String>> = float_runs
        .iter()
        .filter(|r| r.spec.mode == PruneMode::Nas)
        .map(|r| {
            vec![
                r.spec.criterion.name().to_string(),
                fmt_pct(r.spec.s_target),
                fmt_pct(r.mean_s()),
                if r.converged() { "yes" } else { "no" }.to_string(),
                fmt_bd(r.bd_rate),
            ]
        })
        .collect();
    out.push_str(&format_table(&["criterion", "target S (%)", "S (%)", "converged", "BD-rate (%)"], &rows));

    out.push_str("\n## Model size\n\n");
    let mut rows = Vec::new();
    if let Some(b) = baseline_bytes {
        rows.push(vec!["baseline (float32)".into(), "0.000".into(), "32".into(), format!("{:.1}", b / 1024.0), "1.00".into(), fmt_bd(Some(0.0))]);
    } else {
        rows.push(vec!["baseline (float32)".into(), "absent".into(), String::new(), String::new(), String::new(), String::new()]);
    }
    let mut sized: Vec<&RunSummary> = runs.iter().collect();
    sized.sort_by(|a, b| a.spec.name.cmp(&b.spec.name));
    for r in &sized {
        rows.push(vec![
            r.spec.name.clone(),
            fmt_pct(r.mean_s()),
            r.spec.quant_bits.map_or("32".to_string(), |b| b.to_string()),
            format!("{:.1}", r.mean_bytes() / 1024.0),
            format!("{:.2}", r.mean_ratio()),
            fmt_bd(r.bd_rate),
        ]);
    }
    if !runs.iter().any(|r| r.spec.quant_bits.is_some()) {
        rows.push(vec![format!("pruned + {}-bit", bits), "absent".into(), String::new(), String::new(), String::new(), String::new()]);
    }
    out.push_str(&format_table(&["model", "S (%)", "bits", "size (KiB)", "ratio", "BD-rate (%)"], &rows));
    out
}
