//! Experiment driver: a staged pipeline with one checkpoint and JSON log per
//! stage, policy sweeps, method comparison, and CSV/SVG emission.
//!
//! Stage seeds depend only on the experiment seed, the stage position and the
//! stage name, so resuming from any stage reproduces a fresh run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::clustering::{reconstruct_check, split_ffn_with, DEFAULT_MAX_ITERS};
use crate::cost::{analytic_model_flops, model_flops, write_cost_csv, CostReport};
use crate::data::{gen_dataset, load_dataset, save_dataset, Dataset, Task, CLASSIFY_LEN};
use crate::error::{Error, Result};
use crate::mha::{all_projection_sites, capture_site_inputs, replace_mha, DistillConfig};
use crate::model::{DenseModel, ProjSlot, Site, SiteKind, TaskHead, TransformerConfig};
use crate::moe::{
    attach_router, collect_router_data, convert_model, per_token_expert_counts, set_policy,
    write_histogram_csv, CountHistogramRow, SiteConversion,
};
use crate::routing::{
    train_baseline_router, train_router, BaselineDataset, GatePolicy, RouterTrainConfig,
};
use crate::sparsity::{activation_stats, default_threshold, write_stats_csv, SparsityConfig};
use crate::train::{
    evaluate_traced, sample_train_batches, train, validation_batches, TrainConfig, TrainLog,
};
use crate::{model::TokenBatch, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    /// Characters (byte_lm) or examples (toy_classify).
    pub size: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Load a dataset written by `gen-data` instead of generating one.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub batch_size: usize,
    /// Validation batches per evaluation.
    pub batches: usize,
    #[serde(default)]
    pub seq_len: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            batch_size: 16,
            batches: 8,
            seq_len: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
}

impl PolicyGrid {
    pub fn is_empty(&self) -> bool {
        self.tau.is_empty() && self.k.is_empty()
    }

    pub fn policies(&self) -> Vec<GatePolicy> {
        let dynk = self.tau.iter().map(|&tau| GatePolicy::DynamicK { tau });
        dynk.chain(self.k.iter().map(|&k| GatePolicy::TopK { k }))
            .collect()
    }

    fn validate(&self, v: &mut Vec<String>) {
        for &t in &self.tau {
            if !(0.0..=1.0).contains(&t) {
                v.push(format!("grid tau {t} outside [0, 1]"));
            }
        }
        if self.k.contains(&0) {
            v.push("grid k must be positive".into());
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// MSE regression on expert output norms, dynamic-k gating.
    #[default]
    Regression,
    /// Sigmoid classifier on batch-max-normalized activation sums.
    Baseline,
}

fn default_sample_batches() -> usize {
    16
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

fn default_policy() -> GatePolicy {
    GatePolicy::DynamicK { tau: 0.5 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageSpec {
    Train {
        train: TrainConfig,
    },
    Sparsify {
        train: TrainConfig,
        sparsity: SparsityConfig,
    },
    /// Swap the activation to ReLU, then fine-tune.
    Relufy {
        train: TrainConfig,
    },
    ReplaceMha {
        /// Site names such as `q.0`; all projections when absent.
        #[serde(default)]
        sites: Option<Vec<String>>,
        #[serde(default)]
        distill: DistillConfig,
        #[serde(default = "default_sample_batches")]
        sample_batches: usize,
        /// Fine-tune the whole model after replacement.
        #[serde(default)]
        recovery: Option<TrainConfig>,
    },
    Cluster {
        n_experts: usize,
        /// Also convert replaced projections into this many experts.
        #[serde(default)]
        projection_experts: Option<usize>,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
    },
    TrainRouters {
        #[serde(default)]
        router: RouterTrainConfig,
        #[serde(default)]
        kind: RouterKind,
        #[serde(default = "default_sample_batches")]
        sample_batches: usize,
        /// Policy stored in the checkpoint; sweeps override it.
        #[serde(default = "default_policy")]
        policy: GatePolicy,
    },
}

impl StageSpec {
    pub fn name(&self) -> &'static str {
        match self {
            StageSpec::Train { .. } => "train",
            StageSpec::Sparsify { .. } => "sparsify",
            StageSpec::Relufy { .. } => "relufy",
            StageSpec::ReplaceMha { .. } => "replace_mha",
            StageSpec::Cluster { .. } => "cluster",
            StageSpec::TrainRouters { .. } => "train_routers",
        }
    }

    fn trains(&self) -> Option<&TrainConfig> {
        match self {
            StageSpec::Train { train }
            | StageSpec::Sparsify { train, .. }
            | StageSpec::Relufy { train } => Some(train),
            _ => None,
        }
    }
}

/// One method of a comparison: stages run after the shared base stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    /// Defaults to the experiment grid.
    #[serde(default)]
    pub grid: Option<PolicyGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: Task,
    pub data: DataSpec,
    pub model: TransformerConfig,
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub grid: PolicyGrid,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    /// Expert counts for the granularity study, reusing the cluster and
    /// router stage settings with a fixed router width.
    #[serde(default)]
    pub granularity: Vec<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn validate_stage_order(stages: &[StageSpec], what: &str, v: &mut Vec<String>) {
    let mut seen_cluster = false;
    let mut seen_routers = false;
    for (i, s) in stages.iter().enumerate() {
        match s {
            StageSpec::Train { .. } if i != 0 => {
                v.push(format!("{what}: `train` must be the first stage"))
            }
            StageSpec::Cluster { .. } if seen_cluster => {
                v.push(format!("{what}: `cluster` appears twice"))
            }
            StageSpec::Cluster { .. } => seen_cluster = true,
            StageSpec::TrainRouters { .. } if !seen_cluster => {
                v.push(format!("{what}: `train_routers` must follow `cluster`"))
            }
            StageSpec::TrainRouters { .. } if seen_routers => {
                v.push(format!("{what}: `train_routers` appears twice"))
            }
            StageSpec::TrainRouters { .. } => seen_routers = true,
            other if seen_cluster => {
                v.push(format!("{what}: `{}` must precede `cluster`", other.name()));
            }
            _ => {}
        }
    }
}

fn validate_stage_configs(stages: &[StageSpec], model: &TransformerConfig, v: &mut Vec<String>) {
    for s in stages {
        if let Some(t) = s.trains() {
            if t.steps == 0 || t.batch_size == 0 {
                v.push(format!(
                    "`{}`: steps and batch_size must be positive",
                    s.name()
                ));
            }
        }
        match s {
            StageSpec::Sparsify { sparsity, .. } => {
                if let Err(Error::Validation(e)) = sparsity.validate() {
                    v.extend(e.into_iter().map(|m| format!("`sparsify`: {m}")));
                }
            }
            StageSpec::ReplaceMha {
                sites,
                sample_batches,
                ..
            } => {
                if *sample_batches == 0 {
                    v.push("`replace_mha`: sample_batches must be positive".into());
                }
                for name in sites.iter().flatten() {
                    match name.parse::<Site>() {
                        Ok(site) if site.kind == SiteKind::Ffn => {
                            v.push(format!("`replace_mha`: {name} is not a projection"))
                        }
                        Ok(site) if site.layer >= model.num_layers => {
                            v.push(format!("`replace_mha`: {name} beyond layer count"))
                        }
                        Ok(_) => {}
                        Err(e) => v.push(format!("`replace_mha`: {e}")),
                    }
                }
            }
            StageSpec::Cluster {
                n_experts,
                projection_experts,
                ..
            } => {
                let h = model.hidden_dim();
                if *n_experts == 0 || h % n_experts != 0 {
                    v.push(format!(
                        "`cluster`: n_experts = {n_experts} must divide the hidden width {h}"
                    ));
                }
                if let Some(p) = projection_experts {
                    let hp = crate::mha::matched_hidden(model.model_dim);
                    if *p == 0 || hp % p != 0 {
                        v.push(format!(
                            "`cluster`: projection_experts = {p} must divide {hp}"
                        ));
                    }
                }
            }
            StageSpec::TrainRouters {
                sample_batches,
                router,
                ..
            } => {
                if *sample_batches == 0 || router.steps == 0 || router.batch_size == 0 {
                    v.push(
                        "`train_routers`: sample_batches, steps and batch_size must be positive"
                            .into(),
                    );
                }
            }
            _ => {}
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            serde_json::from_str(s).map_err(|e| Error::Validation(vec![format!("spec: {e}")]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if let Err(Error::Validation(e)) = self.model.validate() {
            v.extend(e);
        }
        match (self.task, &self.model.task_head) {
            (Task::ByteLm, TaskHead::Lm) => {}
            (Task::ToyClassify, TaskHead::Classifier { num_classes })
                if *num_classes >= crate::data::NUM_CLASSES => {}
            _ => v.push(format!(
                "task {:?} does not match head {:?}",
                self.task, self.model.task_head
            )),
        }
        if self.model.vocab_size < 256 {
            v.push("byte-level data needs vocab_size >= 256".into());
        }
        if self.data.size == 0 {
            v.push("data.size must be positive".into());
        }
        if self.eval.batch_size == 0 || self.eval.batches == 0 {
            v.push("eval batch_size and batches must be positive".into());
        }
        if self.stages.is_empty() {
            v.push("no stages".into());
        }
        validate_stage_order(&self.stages, "stages", &mut v);
        validate_stage_configs(&self.stages, &self.model, &mut v);
        self.grid.validate(&mut v);
        let has_routers = |st: &[StageSpec]| {
            st.iter()
                .any(|s| matches!(s, StageSpec::TrainRouters { .. }))
        };
        if has_routers(&self.stages) && self.grid.is_empty() {
            v.push("policy grid is empty".into());
        }
        for m in &self.methods {
            let all: Vec<StageSpec> = self.stages.iter().chain(&m.stages).cloned().collect();
            validate_stage_order(&all, &format!("method `{}`", m.name), &mut v);
            validate_stage_configs(&m.stages, &self.model, &mut v);
            let grid = m.grid.as_ref().unwrap_or(&self.grid);
            grid.validate(&mut v);
            if has_routers(&m.stages) && grid.is_empty() {
                v.push(format!("method `{}`: policy grid is empty", m.name));
            }
        }
        if !self.granularity.is_empty() {
            let h = self.model.hidden_dim();
            for &n in &self.granularity {
                if n == 0 || h % n != 0 {
                    v.push(format!(
                        "granularity n = {n} must divide the hidden width {h}"
                    ));
                }
            }
            let cl = self
                .stages
                .iter()
                .any(|s| matches!(s, StageSpec::Cluster { .. }));
            if !cl || !has_routers(&self.stages) || self.grid.tau.is_empty() {
                v.push("granularity needs `cluster`, `train_routers` and a tau grid".into());
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("spec serializes");
        sha_hex(&serde_json::to_vec(&v).expect("json"))
    }

    fn tokens_per_eval_batch(&self) -> u64 {
        let seq = match self.task {
            Task::ByteLm => self
                .eval
                .seq_len
                .unwrap_or(self.model.context_length)
                .min(self.model.context_length),
            Task::ToyClassify => CLASSIFY_LEN,
        };
        (self.eval.batch_size * seq) as u64
    }

    /// Training tokens a stage consumes, from its configuration alone.
    pub fn stage_budget(&self, stage: &StageSpec) -> u64 {
        let train_tokens = |t: &TrainConfig| -> u64 {
            let seq = match self.task {
                Task::ByteLm => t
                    .seq_len
                    .unwrap_or(self.model.context_length)
                    .min(self.model.context_length),
                Task::ToyClassify => CLASSIFY_LEN,
            };
            (t.steps * t.batch_size * seq) as u64
        };
        match stage {
            StageSpec::Train { train }
            | StageSpec::Sparsify { train, .. }
            | StageSpec::Relufy { train } => train_tokens(train),
            StageSpec::ReplaceMha {
                sample_batches,
                recovery,
                ..
            } => {
                *sample_batches as u64 * self.tokens_per_eval_batch()
                    + recovery.as_ref().map_or(0, train_tokens)
            }
            StageSpec::Cluster { .. } => 0,
            StageSpec::TrainRouters { sample_batches, .. } => {
                *sample_batches as u64 * self.tokens_per_eval_batch()
            }
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Identifier of this build, stable across runs.
pub fn build_id() -> String {
    sha_hex(concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION")).as_bytes())[..12]
        .to_string()
}

/// Seed of the stage at `index` named `name`.
pub fn stage_seed(seed: u64, index: usize, name: &str) -> u64 {
    let mut h = rng::splitmix64(seed ^ rng::splitmix64(index as u64 + 1));
    for b in name.bytes() {
        h = rng::splitmix64(h ^ b as u64);
    }
    h
}

/// JSON log written next to each stage checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub index: usize,
    pub stage: String,
    pub seed: u64,
    /// Hash of everything that determines this stage's output.
    pub chain: String,
    pub tokens_seen: u64,
    pub checkpoint: String,
    #[serde(default)]
    pub train: Option<TrainLog>,
    #[serde(default)]
    pub details: Value,
}

/// Everything a stage needs besides the model.
pub struct StageCtx<'a> {
    pub data: &'a Dataset,
    pub eval: &'a EvalSpec,
    pub seed: u64,
    /// Directory for auxiliary CSV output.
    pub out: Option<&'a Path>,
    pub label: String,
}

pub struct StageResult {
    pub model: DenseModel,
    pub tokens_seen: u64,
    pub train: Option<TrainLog>,
    pub details: Value,
}

fn sample_batches(
    model: &DenseModel,
    ctx: &StageCtx,
    count: usize,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    sample_train_batches(
        model,
        ctx.data,
        ctx.eval.batch_size,
        ctx.eval.seq_len,
        count,
        seed,
    )
}

fn eval_batches(model: &DenseModel, data: &Dataset, eval: &EvalSpec) -> Result<Vec<TokenBatch>> {
    validation_batches(model, data, eval.batch_size, eval.seq_len, eval.batches)
}

fn write_activation_stats(
    model: &DenseModel,
    ctx: &StageCtx,
    threshold: Option<f64>,
) -> Result<Value> {
    if (0..model.num_layers()).all(|l| model.ffn(l).is_none()) {
        return Ok(Value::Null);
    }
    let batches = eval_batches(model, ctx.data, ctx.eval)?;
    let th = threshold.unwrap_or_else(|| default_threshold(model.config.activation));
    let stats = activation_stats(model, &batches, th)?;
    if let Some(dir) = ctx.out {
        let dir = dir.join("stats");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_stats_csv(&dir, &ctx.label, &stats, 8)?;
    }
    Ok(json!({"threshold": th, "mean_nonzero": stats.mean_nonzero()}))
}

/// Run one stage on `model`.
pub fn run_stage(stage: &StageSpec, model: &DenseModel, ctx: &StageCtx) -> Result<StageResult> {
    let mut m = model.clone();
    let seed = ctx.seed;
    match stage {
        StageSpec::Train { train: cfg } => {
            let log = train(&mut m, ctx.data, cfg, None, seed)?;
            let stats = write_activation_stats(&m, ctx, None)?;
            Ok(StageResult {
                tokens_seen: log.tokens_seen,
                train: Some(log),
                details: json!({"activation": stats}),
                model: m,
            })
        }
        StageSpec::Sparsify {
            train: cfg,
            sparsity,
        } => {
            let log = train(&mut m, ctx.data, cfg, Some(sparsity), seed)?;
            let stats = write_activation_stats(&m, ctx, sparsity.nonzero_threshold)?;
            Ok(StageResult {
                tokens_seen: log.tokens_seen,
                train: Some(log),
                details: json!({"activation": stats}),
                model: m,
            })
        }
        StageSpec::Relufy { train: cfg } => {
            let status = m.relufy();
            let log = train(&mut m, ctx.data, cfg, None, seed)?;
            let stats = write_activation_stats(&m, ctx, None)?;
            Ok(StageResult {
                tokens_seen: log.tokens_seen,
                train: Some(log),
                details: json!({"relufy": format!("{status:?}"), "activation": stats}),
                model: m,
            })
        }
        StageSpec::ReplaceMha {
            sites,
            distill,
            sample_batches: nb,
            recovery,
        } => {
            let sites: Vec<Site> = match sites {
                Some(names) => names.iter().map(|s| s.parse()).collect::<Result<_>>()?,
                None => all_projection_sites(&m),
            };
            let batches = sample_batches(&m, ctx, *nb, seed)?;
            let sample_tokens: u64 = batches.iter().map(|b| b.tokens() as u64).sum();
            let (mut m, reports) = replace_mha(&m, &sites, &batches, distill, seed)?;
            let log = match recovery {
                Some(cfg) => Some(train(&mut m, ctx.data, cfg, None, rng::splitmix64(seed))?),
                None => None,
            };
            let tokens_seen = sample_tokens + log.as_ref().map_or(0, |l| l.tokens_seen);
            Ok(StageResult {
                tokens_seen,
                train: log,
                details: json!({"distill": reports}),
                model: m,
            })
        }
        StageSpec::Cluster {
            n_experts,
            projection_experts,
            max_iters,
        } => cluster_stage(&m, ctx, *n_experts, *projection_experts, *max_iters),
        StageSpec::TrainRouters {
            router,
            kind,
            sample_batches: nb,
            policy,
        } => {
            let batches = sample_batches(&m, ctx, *nb, seed)?;
            let tokens_seen: u64 = batches.iter().map(|b| b.tokens() as u64).sum();
            let datas = collect_router_data(&m, &batches)?;
            let results: Vec<_> = datas
                .par_iter()
                .map(|d| {
                    let s = rng::splitmix64(
                        seed ^ rng::splitmix64(((d.site.layer as u64) << 8) | d.site.kind as u64),
                    );
                    match kind {
                        RouterKind::Regression => train_router(&d.data, router, s),
                        RouterKind::Baseline => {
                            let b = BaselineDataset {
                                inputs: d.data.inputs.clone(),
                                sums: d.sums.clone(),
                            };
                            train_baseline_router(&b, router, s)
                        }
                    }
                })
                .collect();
            let mut reports = BTreeMap::new();
            for (d, r) in datas.iter().zip(results) {
                let (r, rep) = r?;
                attach_router(&mut m, d.site, d.source, r)?;
                reports.insert(d.site.to_string(), rep);
            }
            set_policy(&mut m, *policy)?;
            Ok(StageResult {
                tokens_seen,
                train: None,
                details: json!({"routers": reports, "kind": kind}),
                model: m,
            })
        }
    }
}

fn cluster_stage(
    model: &DenseModel,
    ctx: &StageCtx,
    n_experts: usize,
    projection_experts: Option<usize>,
    max_iters: usize,
) -> Result<StageResult> {
    let mut targets: Vec<(
        Site,
        crate::model::FfnWeights,
        crate::model::Activation,
        usize,
    )> = Vec::new();
    for l in 0..model.num_layers() {
        if let Some(np) = projection_experts {
            for kind in SiteKind::PROJECTIONS {
                if let ProjSlot::Replaced(r) = model.blocks[l].proj(kind) {
                    targets.push((
                        Site::proj(l, kind),
                        r.as_ffn(),
                        crate::model::Activation::Relu,
                        np,
                    ));
                }
            }
        }
        if let Some(f) = model.ffn(l) {
            targets.push((Site::ffn(l), f.clone(), model.config.activation, n_experts));
        }
    }
    if targets.is_empty() {
        return Err(Error::contract(
            "no dense FFN or replaced projection left to cluster",
        ));
    }
    let sites: Vec<Site> = targets.iter().map(|t| t.0).collect();
    let probe = sample_batches(model, ctx, 2, ctx.seed)?;
    let inputs = capture_site_inputs(model, &sites, &probe)?;
    let results: Vec<Result<(SiteConversion, f32)>> = targets
        .par_iter()
        .zip(inputs.par_iter())
        .map(|((site, ffn, act, n), z)| {
            let s = rng::splitmix64(
                ctx.seed ^ rng::splitmix64(((site.layer as u64) << 8) | site.kind as u64),
            );
            let (partition, slices) = split_ffn_with(ffn, *n, s, max_iters)?;
            let err = reconstruct_check(ffn, *act, &slices, z)?;
            Ok((
                SiteConversion {
                    site: *site,
                    partition,
                    router: None,
                },
                err,
            ))
        })
        .collect();
    let mut convs = Vec::new();
    let mut details = BTreeMap::new();
    for r in results {
        let (c, err) = r?;
        details.insert(
            c.site.to_string(),
            json!({"n_experts": c.partition.n_experts, "reconstruct_max_abs": err}),
        );
        convs.push(c);
    }
    let m = convert_model(model, convs, GatePolicy::DynamicK { tau: 0.0 })?;
    Ok(StageResult {
        model: m,
        tokens_seen: 0,
        train: None,
        details: json!({"sites": details}),
    })
}

/// Load or generate the experiment's dataset, writing it under `out/data`.
pub fn prepare_data(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Dataset> {
    let data = match &spec.data.dir {
        Some(dir) => load_dataset(dir, spec.task)?,
        None => gen_dataset(
            spec.task,
            spec.data.size,
            spec.data.seed.unwrap_or(spec.seed),
        )?,
    };
    if let Some(out) = out {
        save_dataset(&out.join("data"), &data)?;
    }
    Ok(data)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Reuse stage checkpoints whose recorded chain hash matches.
    pub resume: bool,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs stages in order from `model`, checkpointing each under `dir`.
/// Indices continue from `first_index`; `chain` is the hash of all inputs so far.
#[allow(clippy::too_many_arguments)]
fn run_stage_list(
    spec: &ExperimentSpec,
    data: &Dataset,
    stages: &[StageSpec],
    mut model: DenseModel,
    first_index: usize,
    mut chain: String,
    dir: &Path,
    opts: &RunOptions,
) -> Result<(DenseModel, Vec<StageLog>, Vec<DenseModel>)> {
    let stage_dir = dir.join("stages");
    ensure_dir(&stage_dir)?;
    let mut logs = Vec::new();
    let mut snapshots = Vec::new();
    for (off, stage) in stages.iter().enumerate() {
        let index = first_index + off;
        let name = stage.name();
        let seed = stage_seed(spec.seed, index, name);
        chain = sha_hex(format!("{chain}|{}|{seed}", serde_json::to_string(stage)?).as_bytes());
        let label = format!("{index:02}_{name}");
        let ckpt = stage_dir.join(format!("{label}.ckpt"));
        let log_path = stage_dir.join(format!("{label}.json"));
        snapshots.push(model.clone());
        if opts.resume && ckpt.exists() && log_path.exists() {
            let prev: Option<StageLog> = fs::read_to_string(&log_path)
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok());
            if let Some(prev) = prev.filter(|p| p.chain == chain) {
                log::info!("resuming {label} from {}", ckpt.display());
                model = load_checkpoint(&ckpt).map_err(|e| stage_err(name, e))?;
                logs.push(prev);
                continue;
            }
        }
        log::info!("stage {label}");
        let ctx = StageCtx {
            data,
            eval: &spec.eval,
            seed,
            out: Some(dir),
            label: label.clone(),
        };
        let res = run_stage(stage, &model, &ctx).map_err(|e| stage_err(name, e))?;
        save_checkpoint(&res.model, &ckpt).map_err(|e| stage_err(name, e))?;
        let log = StageLog {
            index,
            stage: name.to_string(),
            seed,
            chain: chain.clone(),
            tokens_seen: res.tokens_seen,
            checkpoint: format!("stages/{label}.ckpt"),
            train: res.train,
            details: res.details,
        };
        write_json(&log_path, &log)?;
        logs.push(log);
        model = res.model;
    }
    Ok((model, logs, snapshots))
}

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

/// Provenance of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub dataset_hash: String,
    pub spec_hash: String,
    pub build_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub meta: SweepMeta,
    /// Sorted by analytic FLOPs.
    pub rows: Vec<CostReport>,
}

fn metric_of(model: &DenseModel, m: &crate::train::EvalMetrics) -> f64 {
    match model.config.task_head {
        TaskHead::Lm => m.loss,
        TaskHead::Classifier { .. } => m.accuracy.unwrap_or(0.0),
    }
}

/// Evaluate the converted `model` at every grid point. One model serves the
/// whole grid; only the gate policy changes between points.
pub fn run_sweep(
    model: &DenseModel,
    grid: &PolicyGrid,
    batches: &[TokenBatch],
    method: &str,
) -> Result<Vec<CostReport>> {
    if model.moe_sites().is_empty() {
        return Err(Error::contract("sweep needs a converted model"));
    }
    let seq = batches.first().map_or(0, |b| b.seq);
    let rows: Vec<Result<CostReport>> = grid
        .policies()
        .par_iter()
        .map(|&policy| {
            let mut m = model.clone();
            set_policy(&mut m, policy)?;
            let (metrics, trace) = evaluate_traced(&m, batches)?;
            let cost = model_flops(&m, &trace, seq, metrics.tokens)?;
            let analytic = analytic_model_flops(&m, &policy, &trace, seq)?;
            let tag = match policy {
                GatePolicy::DynamicK { .. } => "dynk",
                GatePolicy::TopK { .. } => "topk",
            };
            Ok(CostReport {
                method: format!("{method}-{tag}"),
                policy_param: policy.param(),
                analytic_flops: analytic,
                measured_flops: cost.mean(),
                metric: metric_of(&m, &metrics),
                mean_executed_frac: cost.mean_executed_frac.unwrap_or(1.0),
                moe_site_frac: cost.moe_site_frac.unwrap_or(1.0),
                sites: cost
                    .sites
                    .iter()
                    .map(|(s, v)| (s.to_string(), *v))
                    .collect(),
            })
        })
        .collect();
    let mut rows: Vec<CostReport> = rows.into_iter().collect::<Result<_>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [CostReport]) {
    rows.sort_by(|a, b| {
        a.analytic_flops
            .total_cmp(&b.analytic_flops)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.policy_param.total_cmp(&b.policy_param))
    });
}

/// Metric of the model with all dense sites, on the same batches.
pub fn dense_metric(model: &DenseModel, batches: &[TokenBatch]) -> Result<f64> {
    let (m, _) = evaluate_traced(model, batches)?;
    Ok(metric_of(model, &m))
}

fn sweep_method_name(stages: &[StageSpec]) -> &'static str {
    let baseline = stages.iter().any(|s| {
        matches!(
            s,
            StageSpec::TrainRouters {
                kind: RouterKind::Baseline,
                ..
            }
        )
    });
    if baseline {
        "moefication"
    } else {
        "d2dmoe"
    }
}

/// Outputs of [`run_pipeline`].
pub struct PipelineOutput {
    pub model: DenseModel,
    pub logs: Vec<StageLog>,
    pub dataset_hash: String,
    pub sweep: Option<SweepResult>,
    pub granularity: Option<SweepResult>,
    /// Model entering each stage, in stage order.
    pub stage_inputs: Vec<DenseModel>,
}

fn write_sweep(
    dir: &Path,
    stem: &str,
    res: &SweepResult,
    hist: Option<&[CountHistogramRow]>,
) -> Result<()> {
    write_cost_csv(&dir.join(format!("{stem}.csv")), &res.rows)?;
    write_json(&dir.join(format!("{stem}_meta.json")), &res.meta)?;
    if let Some(h) = hist {
        write_histogram_csv(&dir.join(format!("{stem}_counts.csv")), h)?;
    }
    Ok(())
}

fn base_chain(spec: &ExperimentSpec, data_hash: &str) -> Result<String> {
    let head =
        json!({"task": spec.task, "model": spec.model, "seed": spec.seed, "data": data_hash});
    Ok(sha_hex(&serde_json::to_vec(&head)?))
}

/// Execute the spec's stages in order, then sweep and run the granularity
/// study when configured. Writes under `out`.
pub fn run_pipeline(
    spec: &ExperimentSpec,
    out: &Path,
    opts: &RunOptions,
) -> Result<PipelineOutput> {
    spec.validate()?;
    ensure_dir(out)?;
    write_json(&out.join("spec.json"), spec)?;
    let data = prepare_data(spec, Some(out))?;
    let dataset_hash = data.hash();
    let model = DenseModel::build(spec.model.clone(), stage_seed(spec.seed, 0, "init"))?;
    let chain = base_chain(spec, &dataset_hash)?;
    let (model, logs, stage_inputs) =
        run_stage_list(spec, &data, &spec.stages, model, 0, chain, out, opts)?;
    let meta = SweepMeta {
        seed: spec.seed,
        dataset_hash: dataset_hash.clone(),
        spec_hash: spec.hash(),
        build_id: build_id(),
    };
    let mut sweep = None;
    if !model.moe_sites().is_empty() && !spec.grid.is_empty() {
        let batches = eval_batches(&model, &data, &spec.eval)?;
        let rows = run_sweep(
            &model,
            &spec.grid,
            &batches,
            sweep_method_name(&spec.stages),
        )
        .map_err(|e| stage_err("sweep", e))?;
        let (_, hist) = per_token_expert_counts(&model, &batches, &spec.grid.policies())?;
        let res = SweepResult {
            meta: meta.clone(),
            rows,
        };
        write_sweep(out, "sweep", &res, Some(&hist))?;
        sweep = Some(res);
    }
    let mut granularity = None;
    if !spec.granularity.is_empty() {
        let at = spec
            .stages
            .iter()
            .position(|s| matches!(s, StageSpec::Cluster { .. }))
            .expect("validated");
        let rows = run_granularity(spec, &data, &stage_inputs[at], at)
            .map_err(|e| stage_err("granularity", e))?;
        let res = SweepResult { meta, rows };
        write_sweep(out, "granularity", &res, None)?;
        granularity = Some(res);
    }
    Ok(PipelineOutput {
        model,
        logs,
        dataset_hash,
        sweep,
        granularity,
        stage_inputs,
    })
}

/// Re-run clustering and routing at each expert count on the model entering
/// the cluster stage, and sweep the tau grid. Router width stays fixed.
pub fn run_granularity(
    spec: &ExperimentSpec,
    data: &Dataset,
    pre_cluster: &DenseModel,
    cluster_index: usize,
) -> Result<Vec<CostReport>> {
    let (max_iters, projection_experts) = match &spec.stages[cluster_index] {
        StageSpec::Cluster {
            max_iters,
            projection_experts,
            ..
        } => (*max_iters, *projection_experts),
        _ => return Err(Error::contract("granularity needs the cluster stage index")),
    };
    let router_stage = spec
        .stages
        .iter()
        .find(|s| matches!(s, StageSpec::TrainRouters { .. }))
        .ok_or_else(|| Error::contract("granularity needs a router stage"))?
        .clone();
    let router_stage = match router_stage {
        StageSpec::TrainRouters {
            mut router,
            kind,
            sample_batches,
            policy,
        } => {
            router.hidden =
                Some(router.hidden.unwrap_or_else(|| {
                    crate::routing::default_router_hidden(spec.model.model_dim)
                }));
            StageSpec::TrainRouters {
                router,
                kind,
                sample_batches,
                policy,
            }
        }
        _ => unreachable!(),
    };
    let grid = PolicyGrid {
        tau: spec.grid.tau.clone(),
        k: Vec::new(),
    };
    let batches = eval_batches(pre_cluster, data, &spec.eval)?;
    let mut rows = Vec::new();
    for &n in &spec.granularity {
        let cl = StageSpec::Cluster {
            n_experts: n,
            projection_experts,
            max_iters,
        };
        let seed_c = stage_seed(spec.seed, cluster_index, "cluster");
        let ctx = StageCtx {
            data,
            eval: &spec.eval,
            seed: seed_c,
            out: None,
            label: format!("n{n}_cluster"),
        };
        let m = run_stage(&cl, pre_cluster, &ctx)?.model;
        let seed_r = stage_seed(spec.seed, cluster_index + 1, "train_routers");
        let ctx = StageCtx {
            seed: seed_r,
            label: format!("n{n}_routers"),
            ..ctx
        };
        let m = run_stage(&router_stage, &m, &ctx)?.model;
        rows.extend(run_sweep(&m, &grid, &batches, &format!("n{n}"))?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Outputs of [`compare_methods`].
pub struct CompareOutput {
    pub rows: Vec<CostReport>,
    /// Realized training tokens per stage, per method.
    pub budgets: Vec<(String, Vec<u64>)>,
    pub base: DenseModel,
    pub models: Vec<DenseModel>,
    pub meta: SweepMeta,
}

/// Run the shared base stages once, then every method from the base
/// checkpoint with the same per-stage token budgets, and overlay the sweeps.
pub fn compare_methods(
    spec: &ExperimentSpec,
    out: &Path,
    opts: &RunOptions,
) -> Result<CompareOutput> {
    spec.validate()?;
    if spec.methods.len() < 2 {
        return Err(Error::Validation(vec![
            "compare needs at least two methods".into(),
        ]));
    }
    let planned: Vec<(String, Vec<u64>)> = spec
        .methods
        .iter()
        .map(|m| {
            (
                m.name.clone(),
                m.stages.iter().map(|s| spec.stage_budget(s)).collect(),
            )
        })
        .collect();
    check_budgets(&planned)?;
    ensure_dir(out)?;
    write_json(&out.join("spec.json"), spec)?;
    let data = prepare_data(spec, Some(out))?;
    let dataset_hash = data.hash();
    let model = DenseModel::build(spec.model.clone(), stage_seed(spec.seed, 0, "init"))?;
    let chain = base_chain(spec, &dataset_hash)?;
    let base_dir = out.join("base");
    let (base, base_logs, _) =
        run_stage_list(spec, &data, &spec.stages, model, 0, chain, &base_dir, opts)?;
    let base_chain = base_logs
        .last()
        .map(|l| l.chain.clone())
        .unwrap_or_default();
    let batches = eval_batches(&base, &data, &spec.eval)?;
    let mut rows = Vec::new();
    let mut budgets = Vec::new();
    let mut models = Vec::new();
    for (i, m) in spec.methods.iter().enumerate() {
        let dir = out
            .join("methods")
            .join(format!("{i:02}_{}", sanitize(&m.name)));
        let (model, logs, _) = run_stage_list(
            spec,
            &data,
            &m.stages,
            base.clone(),
            spec.stages.len(),
            base_chain.clone(),
            &dir,
            opts,
        )?;
        budgets.push((
            m.name.clone(),
            logs.iter().map(|l| l.tokens_seen).collect::<Vec<_>>(),
        ));
        let grid = m.grid.as_ref().unwrap_or(&spec.grid);
        if !model.moe_sites().is_empty() && !grid.is_empty() {
            rows.extend(
                run_sweep(&model, grid, &batches, &m.name).map_err(|e| stage_err("sweep", e))?,
            );
        }
        models.push(model);
    }
    check_budgets(&budgets)?;
    sort_rows(&mut rows);
    let meta = SweepMeta {
        seed: spec.seed,
        dataset_hash,
        spec_hash: spec.hash(),
        build_id: build_id(),
    };
    let res = SweepResult {
        meta: meta.clone(),
        rows,
    };
    write_sweep(out, "compare", &res, None)?;
    write_json(&out.join("budgets.json"), &budgets)?;
    Ok(CompareOutput {
        rows: res.rows,
        budgets,
        base,
        models,
        meta,
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn check_budgets(budgets: &[(String, Vec<u64>)]) -> Result<()> {
    let Some((first_name, first)) = budgets.first() else {
        return Ok(());
    };
    let bad: Vec<String> = budgets
        .iter()
        .filter(|(_, b)| b != first)
        .map(|(n, b)| format!("method `{n}` budget {b:?} differs from `{first_name}` {first:?}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(bad))
    }
}

/// Linear interpolation of `y` at `x` over points sorted by `x`; `None`
/// outside the covered range. Repeated `x` values are averaged.
pub fn interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    let mut grouped: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for &(px, py) in points {
        if px.is_finite() && py.is_finite() {
            let e = grouped.entry(order_key(px)).or_insert((px, 0.0, 0));
            e.1 += py;
            e.2 += 1;
        }
    }
    let pts: Vec<(f64, f64)> = grouped
        .values()
        .map(|&(px, s, c)| (px, s / c as f64))
        .collect();
    let first = pts.first()?;
    let last = pts.last()?;
    if x < first.0 || x > last.0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            return Some(if x1 == x0 {
                y0
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            });
        }
    }
    Some(first.1)
}

/// Monotone map from finite f64 to u64 ordering.
fn order_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Axis choice for [`plot_svg`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlotAxis {
    AnalyticFlops,
    MeasuredFlops,
    MeanExecutedFrac,
    MoeSiteFrac,
}

impl PlotAxis {
    fn get(self, r: &CostReport) -> f64 {
        match self {
            PlotAxis::AnalyticFlops => r.analytic_flops,
            PlotAxis::MeasuredFlops => r.measured_flops,
            PlotAxis::MeanExecutedFrac => r.mean_executed_frac,
            PlotAxis::MoeSiteFrac => r.moe_site_frac,
        }
    }

    fn label(self) -> &'static str {
        match self {
            PlotAxis::AnalyticFlops => "analytic FLOPs / token",
            PlotAxis::MeasuredFlops => "measured FLOPs / token",
            PlotAxis::MeanExecutedFrac => "executed expert fraction",
            PlotAxis::MoeSiteFrac => "MoE-site cost / dense",
        }
    }
}

/// Cost-versus-metric line chart, one polyline per method.
pub fn plot_svg(rows: &[CostReport], x: PlotAxis, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_method
            .entry(&r.method)
            .or_default()
            .push((x.get(r), r.metric));
    }
    let xs = rows.iter().map(|r| x.get(r));
    let ys = rows.iter().map(|r| r.metric);
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">metric</text>\n\
         <text x=\"{M}\" y=\"{}\" text-anchor=\"start\">{x0:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.4}</text>\n",
        W / 2.0,
        xml_escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 16.0,
        x.label(),
        H / 2.0,
        H / 2.0,
        H - M + 16.0,
        W - M,
        H - M + 16.0,
        M - 4.0,
        H - M,
        M - 4.0,
        M + 4.0,
    );
    for (i, (method, mut pts)) in by_method.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for &(a, b) in &pts {
            s += &format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(a),
                sy(b)
            );
        }
        let ly = M + 16.0 * i as f64;
        s += &format!(
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\">{}</text>\n",
            W - M,
            xml_escape(method)
        );
    }
    s + "</svg>\n"
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Sites named in any row, for callers that want a stable column order.
pub fn row_sites(rows: &[CostReport]) -> BTreeSet<String> {
    rows.iter().flat_map(|r| r.sites.keys().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> ExperimentSpec {
        let mut model = TransformerConfig::desk_lm();
        model.model_dim = 16;
        model.context_length = 16;
        model.num_heads = 2;
        model.num_layers = 1;
        ExperimentSpec {
            name: "tiny".into(),
            task: Task::ByteLm,
            data: DataSpec {
                size: 20_000,
                seed: None,
                dir: None,
            },
            model,
            seed: 3,
            stages: vec![
                StageSpec::Train {
                    train: TrainConfig::new(20, 4, 1e-2),
                },
                StageSpec::Cluster {
                    n_experts: 4,
                    projection_experts: None,
                    max_iters: 10,
                },
                StageSpec::TrainRouters {
                    router: RouterTrainConfig {
                        hidden: None,
                        steps: 20,
                        batch_size: 32,
                        opt: crate::optim::AdamConfig::new(1e-2),
                    },
                    kind: RouterKind::Regression,
                    sample_batches: 2,
                    policy: default_policy(),
                },
            ],
            grid: PolicyGrid {
                tau: vec![0.0, 0.5, 1.0],
                k: vec![1, 4],
            },
            eval: EvalSpec {
                batch_size: 4,
                batches: 2,
                seq_len: None,
            },
            methods: Vec::new(),
            granularity: Vec::new(),
            out_dir: None,
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        let mut s = tiny_spec();
        s.stages.swap(1, 2);
        let Err(Error::Validation(v)) = s.validate() else {
            panic!("expected validation error")
        };
        assert!(
            v.iter().any(|m| m.contains("must follow `cluster`")),
            "{v:?}"
        );
        let mut s = tiny_spec();
        s.stages.push(StageSpec::Sparsify {
            train: TrainConfig::new(1, 1, 1e-3),
            sparsity: SparsityConfig::new(0.1),
        });
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut s = tiny_spec();
        s.grid = PolicyGrid::default();
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = tiny_spec();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(ExperimentSpec::from_json(&j).unwrap(), s);
    }

    #[test]
    fn interpolation() {
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)];
        assert_eq!(interpolate(&pts, 0.5), Some(2.0));
        assert_eq!(interpolate(&pts, 2.0), Some(3.0));
        assert_eq!(interpolate(&pts, 2.5), None);
        assert_eq!(interpolate(&[(1.0, 1.0), (1.0, 3.0)], 1.0), Some(2.0));
    }

    #[test]
    fn stage_seeds_differ_by_position_and_name() {
        assert_ne!(stage_seed(1, 0, "train"), stage_seed(1, 1, "train"));
        assert_ne!(stage_seed(1, 0, "train"), stage_seed(1, 0, "sparsify"));
        assert_eq!(stage_seed(1, 2, "cluster"), stage_seed(1, 2, "cluster"));
    }
}
