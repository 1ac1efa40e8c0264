//! Class-incremental and domain-incremental experiment driver.
//!
//! A run is fully determined by its run seed: the seed fixes the class to
//! task assignment (CIL) or the task order (DIL), the projection, the lambda
//! splits and the probe shuffles (see [`crate::seeds`]). Stages within a run
//! are sequential; runs for different seeds execute in parallel.
//!
//! Learners only reach training data through [`TaskAccess`], which logs every
//! read of a train or validation split. A non-joint learner that touches any
//! task other than the current one is counted as a violation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{probe_joint_train, LinearProbe, NcmModel, ProbeHyper, ProbeMode};
use crate::embedding::{read_batch, EmbeddingBatch, SplitSet};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, ProtocolKind, ProtocolManifest};
use crate::metrics::{aggregate_runs, LedgerSource, MetricsLedger, Report};
use crate::projection::{FeatureMap, Nonlinearity, ProjectionMatrix};
use crate::ridge::{learn_task, predict, LambdaMode, RidgeHead};
use crate::seeds::SeedPlan;
use crate::stats::SufficientStats;
use crate::synth::SyntheticProtocol;

pub const DEFAULT_Q: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    Ncm,
    LpOnline,
    LpOffline,
    JlpOnline,
    JlpOffline,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Proposed,
        Method::Ncm,
        Method::LpOnline,
        Method::LpOffline,
        Method::JlpOnline,
        Method::JlpOffline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ncm => "ncm",
            Method::LpOnline => "lp-online",
            Method::LpOffline => "lp-offline",
            Method::JlpOnline => "jlp-online",
            Method::JlpOffline => "jlp-offline",
        }
    }

    /// Joint methods retrain on every task seen so far.
    pub fn is_joint(self) -> bool {
        matches!(self, Method::JlpOnline | Method::JlpOffline)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}' (expected one of {})",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }
}

/// Everything besides the method and seeds that shapes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Projected feature width.
    pub q: usize,
    /// Off means the head is fit on raw embeddings.
    pub use_projection: bool,
    pub nonlinearity: Nonlinearity,
    /// Replace the random projection by `I_H` (so `q` is ignored).
    pub identity_projection: bool,
    pub lambda: LambdaMode,
    /// L2-normalize embeddings before the feature map (proposed method only).
    pub normalize: bool,
    pub probe: ProbeHyper,
    /// Draw a fresh class assignment (CIL) or task order (DIL) per run.
    pub shuffle_tasks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            use_projection: true,
            nonlinearity: Nonlinearity::Relu,
            identity_projection: false,
            lambda: LambdaMode::default(),
            normalize: false,
            probe: ProbeHyper::default(),
            shuffle_tasks: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_projection && !self.identity_projection && self.q == 0 {
            return Err(Error::InvalidArgument("Q must be positive".into()));
        }
        if let LambdaMode::Fixed(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fixed lambda must be positive and finite, got {l}"
                )));
            }
        }
        Ok(())
    }

    /// Short name for the configuration, used to group runs in reports.
    pub fn variant_label(&self, method: Method) -> String {
        let mut parts: Vec<String> = Vec::new();
        match method {
            Method::Proposed => {
                parts.push(
                    if !self.use_projection {
                        "no_projection"
                    } else if self.identity_projection {
                        "identity_projection"
                    } else if self.nonlinearity == Nonlinearity::Identity {
                        "projection_no_relu"
                    } else {
                        "full"
                    }
                    .to_string(),
                );
                if self.identity_projection && self.nonlinearity == Nonlinearity::Relu {
                    parts.push("relu".into());
                }
                if self.use_projection && !self.identity_projection && self.q != DEFAULT_Q {
                    parts.push(format!("q{}", self.q));
                }
                if let LambdaMode::Fixed(l) = self.lambda {
                    parts.push(format!("lambda{l:e}"));
                }
                if self.normalize {
                    parts.push("l2norm".into());
                }
            }
            Method::Ncm => parts.push("default".into()),
            _ => {
                parts.push("default".into());
                if self.probe.lr != ProbeHyper::default().lr {
                    parts.push(format!("lr{:e}", self.probe.lr));
                }
            }
        }
        parts.join("_")
    }
}

/// Trainable and frozen parameter counts of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub trainable: usize,
    pub frozen: usize,
}

/// Prototype head `Q x C`.
pub fn head_parameters(q: usize, classes: usize) -> usize {
    q * classes
}

/// Linear probe weights `H x C` (biases are not counted).
pub fn probe_parameters(h: usize, classes: usize) -> usize {
    h * classes
}

/// The frozen projection `H x Q`.
pub fn projection_parameters(h: usize, q: usize) -> usize {
    h * q
}

pub fn parameter_count(method: Method, cfg: &ExperimentConfig, h: usize, classes: usize) -> ParameterCount {
    match method {
        Method::Proposed => {
            let q = feature_dim(cfg, h);
            ParameterCount {
                trainable: head_parameters(q, classes),
                frozen: if cfg.use_projection {
                    projection_parameters(h, q)
                } else {
                    0
                },
            }
        }
        _ => ParameterCount {
            trainable: probe_parameters(h, classes),
            frozen: 0,
        },
    }
}

fn feature_dim(cfg: &ExperimentConfig, h: usize) -> usize {
    if !cfg.use_projection || cfg.identity_projection {
        h
    } else {
        cfg.q
    }
}

/// A manifest with all of its split files loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    manifest: ProtocolManifest,
    /// `folds[f][task]`, tasks in manifest order.
    folds: Vec<Vec<SplitSet>>,
}

impl Experiment {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let mut folds = vec![Vec::with_capacity(manifest.task_count()); manifest.fold_total()];
        for spec in &manifest.tasks {
            for (f, paths) in spec.fold_splits().into_iter().enumerate() {
                folds[f].push(SplitSet {
                    train: read_batch(manifest.resolve(&paths.train))?,
                    validation: read_batch(manifest.resolve(&paths.validation))?,
                    test: read_batch(manifest.resolve(&paths.test))?,
                });
            }
        }
        Self::from_parts(manifest, folds)
    }

    pub fn from_parts(manifest: ProtocolManifest, folds: Vec<Vec<SplitSet>>) -> Result<Self> {
        manifest.validate()?;
        if folds.len() != manifest.fold_total() {
            return Err(Error::Manifest(format!(
                "expected {} folds of data, got {}",
                manifest.fold_total(),
                folds.len()
            )));
        }
        for (f, tasks) in folds.iter().enumerate() {
            if tasks.len() != manifest.task_count() {
                return Err(Error::Manifest(format!(
                    "fold {f}: expected {} tasks, got {}",
                    manifest.task_count(),
                    tasks.len()
                )));
            }
            for (i, split) in tasks.iter().enumerate() {
                let allowed = manifest.task_classes(i);
                for (name, b) in [
                    ("train", &split.train),
                    ("validation", &split.validation),
                    ("test", &split.test),
                ] {
                    if b.is_empty() {
                        continue;
                    }
                    if b.dim() != manifest.embedding_dim {
                        return Err(Error::DimensionMismatch {
                            expected: manifest.embedding_dim,
                            found: b.dim(),
                        });
                    }
                    b.check_labels(manifest.total_classes)?;
                    if let Some(&l) = b.labels().iter().find(|l| !allowed.contains(l)) {
                        return Err(Error::Manifest(format!(
                            "task {} {name} split holds label {l} outside its class subset",
                            manifest.tasks[i].task_id
                        )));
                    }
                }
                if split.train.is_empty() || split.test.is_empty() {
                    return Err(Error::Manifest(format!(
                        "task {} has an empty train or test split",
                        manifest.tasks[i].task_id
                    )));
                }
            }
        }
        Ok(Self { manifest, folds })
    }

    pub fn from_synthetic(p: &SyntheticProtocol) -> Result<Self> {
        Self::from_parts(p.manifest.clone(), vec![p.tasks.clone()])
    }

    pub fn manifest(&self) -> &ProtocolManifest {
        &self.manifest
    }

    pub fn folds(&self) -> &[Vec<SplitSet>] {
        &self.folds
    }

    pub fn task_count(&self) -> usize {
        self.manifest.task_count()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.total_classes
    }

    pub fn dim(&self) -> usize {
        self.manifest.embedding_dim
    }

    /// Stage-by-stage task layout for one run. With `shuffle`, CIL classes
    /// are permuted across the manifest's task sizes and DIL tasks are
    /// permuted; both use `order_seed`.
    pub fn plan_tasks(&self, order_seed: u64, shuffle: bool) -> Vec<PlannedTask> {
        let m = &self.manifest;
        let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
        match (m.protocol, shuffle) {
            (ProtocolKind::Cil, true) => {
                let mut classes: Vec<usize> =
                    (0..m.task_count()).flat_map(|i| m.task_classes(i)).collect();
                classes.sort_unstable();
                classes.shuffle(&mut rng);
                let mut next = 0;
                (0..m.task_count())
                    .map(|i| {
                        let n = m.task_classes(i).len();
                        let mut block = classes[next..next + n].to_vec();
                        block.sort_unstable();
                        next += n;
                        PlannedTask {
                            stage: i + 1,
                            source_task: None,
                            classes: block,
                            domain_tag: None,
                        }
                    })
                    .collect()
            }
            _ => {
                let mut order: Vec<usize> = (0..m.task_count()).collect();
                if shuffle {
                    order.shuffle(&mut rng);
                }
                order
                    .into_iter()
                    .enumerate()
                    .map(|(s, i)| PlannedTask {
                        stage: s + 1,
                        source_task: Some(m.tasks[i].task_id),
                        classes: m.task_classes(i),
                        domain_tag: m.tasks[i].domain_tag.clone(),
                    })
                    .collect()
            }
        }
    }

    /// The split sets of fold `fold` arranged as `plan` says.
    pub fn task_stream(&self, fold: usize, plan: &[PlannedTask]) -> Result<Vec<SplitSet>> {
        let tasks = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::InvalidArgument(format!("no fold {fold}")))?;
        let by_id: HashMap<usize, usize> = self
            .manifest
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id, i))
            .collect();
        let mut pooled: Option<SplitSet> = None;
        plan.iter()
            .map(|p| match p.source_task {
                Some(id) => Ok(tasks[by_id[&id]].clone()),
                None => {
                    if pooled.is_none() {
                        let cat = |f: fn(&SplitSet) -> &EmbeddingBatch| {
                            EmbeddingBatch::concat(&tasks.iter().map(f).collect::<Vec<_>>())
                        };
                        pooled = Some(SplitSet {
                            train: cat(|s| &s.train)?,
                            validation: cat(|s| &s.validation)?,
                            test: cat(|s| &s.test)?,
                        });
                    }
                    let pool = pooled.as_ref().expect("pooled above");
                    Ok(pool.map(|b| b.filter_labels(|l| p.classes.binary_search(&l).is_ok())))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedTask {
    pub stage: usize,
    /// Manifest task id when the task is taken whole from the manifest.
    pub source_task: Option<usize>,
    pub classes: Vec<usize>,
    pub domain_tag: Option<String>,
}

static ACCESS_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Violations recorded by every tracker in this process so far.
pub fn total_access_violations() -> usize {
    ACCESS_VIOLATIONS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub stage: usize,
    pub task: usize,
    pub split: SplitKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub events: Vec<AccessEvent>,
    /// Reads of earlier tasks (allowed for joint methods only).
    pub past_reads: usize,
    /// Reads a non-joint method was not entitled to, plus any future read.
    pub violations: usize,
}

/// The only door from a learner to training data.
pub struct TaskAccess<'a> {
    stream: &'a [SplitSet],
    stage: usize,
    joint: bool,
    log: &'a mut AccessLog,
}

impl<'a> TaskAccess<'a> {
    pub fn new(stream: &'a [SplitSet], stage: usize, joint: bool, log: &'a mut AccessLog) -> Self {
        Self {
            stream,
            stage,
            joint,
            log,
        }
    }

    /// Current stage, 1-based.
    pub fn stage(&self) -> usize {
        self.stage
    }

    fn record(&mut self, task: usize, split: SplitKind) -> Result<()> {
        if task == 0 || task > self.stream.len() {
            return Err(Error::InvalidArgument(format!("no task {task}")));
        }
        self.log.events.push(AccessEvent {
            stage: self.stage,
            task,
            split,
        });
        let bad = if task < self.stage {
            self.log.past_reads += 1;
            !self.joint
        } else {
            task > self.stage
        };
        if bad {
            self.log.violations += 1;
            ACCESS_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
        }
        Ok(())
    }

    pub fn train(&mut self, task: usize) -> Result<&'a EmbeddingBatch> {
        self.record(task, SplitKind::Train)?;
        Ok(&self.stream[task - 1].train)
    }

    pub fn validation(&mut self, task: usize) -> Result<&'a EmbeddingBatch> {
        self.record(task, SplitKind::Validation)?;
        Ok(&self.stream[task - 1].validation)
    }
}

/// What a learner reports after a stage.
#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub lambda: Option<f64>,
}

pub trait Learner {
    fn learn(&mut self, access: &mut TaskAccess<'_>, seeds: &SeedPlan) -> Result<StageOutcome>;
    /// Top-1 predictions for the test split of stream task `task`.
    fn predict(&mut self, task: usize, batch: &EmbeddingBatch) -> Result<Vec<usize>>;
}

fn l2_normalized(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let mut v = batch.vectors().clone();
    for mut row in v.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    EmbeddingBatch::new(v, batch.labels().to_vec(), batch.class_hint())
}

struct ProposedLearner {
    map: FeatureMap,
    stats: SufficientStats,
    head: Option<RidgeHead>,
    lambda: LambdaMode,
    normalize: bool,
    test_features: HashMap<usize, Array2<f64>>,
}

impl ProposedLearner {
    fn new(cfg: &ExperimentConfig, h: usize, classes: usize, projection_seed: u64) -> Result<Self> {
        let map = if !cfg.use_projection {
            FeatureMap::Raw { dim: h }
        } else if cfg.identity_projection {
            FeatureMap::Projected(ProjectionMatrix::identity(h, cfg.nonlinearity)?)
        } else {
            FeatureMap::Projected(ProjectionMatrix::generate(
                h,
                cfg.q,
                projection_seed,
                cfg.nonlinearity,
            )?)
        };
        Ok(Self {
            stats: SufficientStats::new(map.out_dim(), classes)?,
            map,
            head: None,
            lambda: cfg.lambda.clone(),
            normalize: cfg.normalize,
            test_features: HashMap::new(),
        })
    }

    fn prepare(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        if self.normalize {
            l2_normalized(batch)
        } else {
            Ok(batch.clone())
        }
    }
}

impl Learner for ProposedLearner {
    fn learn(&mut self, access: &mut TaskAccess<'_>, seeds: &SeedPlan) -> Result<StageOutcome> {
        let stage = access.stage();
        let batch = self.prepare(access.train(stage)?)?;
        let fit = learn_task(
            &self.stats,
            &self.map,
            &batch,
            seeds.lambda_split[stage - 1],
            &self.lambda,
        )?;
        self.stats = fit.stats;
        let lambda = fit.head.lambda();
        self.head = Some(fit.head);
        Ok(StageOutcome {
            lambda: Some(lambda),
        })
    }

    /// Argmax over the classes seen so far; a column for a class with no
    /// samples is identically zero and is not a candidate.
    fn predict(&mut self, task: usize, batch: &EmbeddingBatch) -> Result<Vec<usize>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Invariant("predict before any task was learned".into()))?;
        if !self.test_features.contains_key(&task) {
            let prepared = self.prepare(batch)?;
            let f = self.map.apply(&prepared)?.features;
            self.test_features.insert(task, f);
        }
        let (scores, _) = predict(head, self.test_features[&task].view())?;
        let seen: Vec<usize> = (0..self.stats.class_count())
            .filter(|&c| self.stats.counts()[c] > 0)
            .collect();
        Ok(scores
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = seen[0];
                for &c in &seen[1..] {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

struct NcmLearner {
    model: NcmModel,
}

impl Learner for NcmLearner {
    fn learn(&mut self, access: &mut TaskAccess<'_>, _seeds: &SeedPlan) -> Result<StageOutcome> {
        let stage = access.stage();
        self.model.update(access.train(stage)?)?;
        Ok(StageOutcome::default())
    }

    fn predict(&mut self, _task: usize, batch: &EmbeddingBatch) -> Result<Vec<usize>> {
        self.model.predict(batch)
    }
}

struct ProbeLearner {
    probe: LinearProbe,
    mode: ProbeMode,
    hyper: ProbeHyper,
}

impl Learner for ProbeLearner {
    fn learn(&mut self, access: &mut TaskAccess<'_>, seeds: &SeedPlan) -> Result<StageOutcome> {
        let stage = access.stage();
        let train = access.train(stage)?;
        let val = match self.mode {
            ProbeMode::Offline => Some(access.validation(stage)?),
            ProbeMode::Online => None,
        };
        self.probe
            .train(train, val, self.mode, &self.hyper, seeds.shuffle[stage - 1])?;
        Ok(StageOutcome::default())
    }

    fn predict(&mut self, _task: usize, batch: &EmbeddingBatch) -> Result<Vec<usize>> {
        Ok(self.probe.predict(batch.vectors().view()))
    }
}

struct JointProbeLearner {
    probe: Option<LinearProbe>,
    classes: usize,
    mode: ProbeMode,
    hyper: ProbeHyper,
}

impl Learner for JointProbeLearner {
    fn learn(&mut self, access: &mut TaskAccess<'_>, seeds: &SeedPlan) -> Result<StageOutcome> {
        let stage = access.stage();
        let history = (1..=stage)
            .map(|j| access.train(j))
            .collect::<Result<Vec<_>>>()?;
        let val = match self.mode {
            ProbeMode::Offline => {
                let parts = (1..=stage)
                    .map(|j| access.validation(j))
                    .collect::<Result<Vec<_>>>()?;
                Some(EmbeddingBatch::concat(&parts)?)
            }
            ProbeMode::Online => None,
        };
        let (probe, _) = probe_joint_train(
            &history,
            val.as_ref(),
            self.classes,
            self.mode,
            &self.hyper,
            seeds.probe_init,
            seeds.shuffle[stage - 1],
        )?;
        self.probe = Some(probe);
        Ok(StageOutcome::default())
    }

    fn predict(&mut self, _task: usize, batch: &EmbeddingBatch) -> Result<Vec<usize>> {
        let probe = self
            .probe
            .as_ref()
            .ok_or_else(|| Error::Invariant("predict before any task was learned".into()))?;
        Ok(probe.predict(batch.vectors().view()))
    }
}

fn make_learner(
    method: Method,
    cfg: &ExperimentConfig,
    h: usize,
    classes: usize,
    seeds: &SeedPlan,
) -> Result<Box<dyn Learner>> {
    Ok(match method {
        Method::Proposed => Box::new(ProposedLearner::new(cfg, h, classes, seeds.projection)?),
        Method::Ncm => Box::new(NcmLearner {
            model: NcmModel::new(h, classes),
        }),
        Method::LpOnline | Method::LpOffline => Box::new(ProbeLearner {
            probe: LinearProbe::new(h, classes, seeds.probe_init),
            mode: probe_mode(method),
            hyper: cfg.probe,
        }),
        Method::JlpOnline | Method::JlpOffline => Box::new(JointProbeLearner {
            probe: None,
            classes,
            mode: probe_mode(method),
            hyper: cfg.probe,
        }),
    })
}

fn probe_mode(method: Method) -> ProbeMode {
    match method {
        Method::LpOffline | Method::JlpOffline => ProbeMode::Offline,
        _ => ProbeMode::Online,
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// One run of one method, everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_hash: String,
    pub protocol: ProtocolKind,
    pub method: Method,
    pub variant: String,
    pub seeds: SeedPlan,
    pub task_plan: Vec<PlannedTask>,
    /// `lambdas[fold][stage - 1]`; `None` for methods without a ridge head.
    pub lambdas: Vec<Vec<Option<f64>>>,
    /// Fold-averaged ledger.
    pub ledger: MetricsLedger,
    pub fold_ledgers: Vec<MetricsLedger>,
    /// Wall-clock seconds per stage, summed over folds.
    pub stage_seconds: Vec<f64>,
    pub config: ExperimentConfig,
    pub feature_dim: usize,
    pub parameters: ParameterCount,
    /// Set for joint methods, which keep every past task's data.
    pub protocol_violating: bool,
    pub past_reads: usize,
    pub access_violations: usize,
    pub notes: Vec<String>,
}

impl LedgerSource for RunRecord {
    fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    fn method_label(&self) -> String {
        self.method.name().to_string()
    }

    fn variant_label(&self) -> String {
        self.variant.clone()
    }

    fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }
}

impl RunRecord {
    /// File stem shared by the JSON record and the ledger CSV.
    pub fn file_stem(&self) -> String {
        format!("{}__{}__seed{}", self.method.name(), self.variant, self.seeds.run_seed)
    }

    /// Writes `<stem>.json` and `<stem>.ledger.csv` into `dir`; returns the
    /// JSON path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}.ledger.csv")), self.ledger.to_csv())?;
        Ok(json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Every `*.json` run record in `dir`, sorted by file name.
pub fn load_run_dir(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no run records in {}",
            dir.as_ref().display()
        )));
    }
    paths.iter().map(RunRecord::load).collect()
}

/// Runs one seed through every fold.
pub fn run_single(exp: &Experiment, method: Method, cfg: &ExperimentConfig, run_seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let tasks = exp.task_count();
    let (h, classes) = (exp.dim(), exp.class_count());
    let seeds = SeedPlan::new(run_seed, tasks);
    let plan = exp.plan_tasks(seeds.task_order, cfg.shuffle_tasks);
    let mut fold_ledgers = Vec::with_capacity(exp.folds.len());
    let mut lambdas = Vec::with_capacity(exp.folds.len());
    let mut stage_seconds = vec![0.0; tasks];
    let mut log = AccessLog::default();

    for fold in 0..exp.folds.len() {
        let stream = exp.task_stream(fold, &plan)?;
        let mut learner = make_learner(method, cfg, h, classes, &seeds)?;
        let mut ledger = MetricsLedger::new(tasks);
        let mut fold_lambdas = Vec::with_capacity(tasks);
        for stage in 1..=tasks {
            let start = Instant::now();
            let outcome = {
                let mut access = TaskAccess::new(&stream, stage, method.is_joint(), &mut log);
                learner.learn(&mut access, &seeds)?
            };
            fold_lambdas.push(outcome.lambda);
            for j in 1..=stage {
                let test = &stream[j - 1].test;
                let pred = learner.predict(j, test)?;
                ledger.set(stage, j, accuracy(&pred, test.labels()))?;
            }
            stage_seconds[stage - 1] += start.elapsed().as_secs_f64();
        }
        fold_ledgers.push(ledger);
        lambdas.push(fold_lambdas);
    }

    let mut notes = Vec::new();
    if matches!(method, Method::LpOffline | Method::JlpOffline) {
        notes.push(format!(
            "early stopping on validation loss, patience {}",
            cfg.probe.patience
        ));
    }
    if method.is_joint() {
        notes.push("joint training keeps every past task's data".into());
    }
    Ok(RunRecord {
        manifest_hash: exp.manifest.content_hash(),
        protocol: exp.manifest.protocol,
        method,
        variant: cfg.variant_label(method),
        seeds,
        task_plan: plan,
        lambdas,
        ledger: MetricsLedger::mean_of(&fold_ledgers)?,
        fold_ledgers,
        stage_seconds,
        config: cfg.clone(),
        feature_dim: if method == Method::Proposed {
            feature_dim(cfg, h)
        } else {
            h
        },
        parameters: parameter_count(method, cfg, h, classes),
        protocol_violating: method.is_joint(),
        past_reads: log.past_reads,
        access_violations: log.violations,
        notes,
    })
}

/// One record per seed, seeds processed in parallel; records come back in
/// seed order.
pub fn run_protocol(
    exp: &Experiment,
    method: Method,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no run seeds".into()));
    }
    seeds
        .par_iter()
        .map(|&s| run_single(exp, method, cfg, s))
        .collect()
}

/// Groups records by method and variant and aggregates each group. All
/// records must come from one manifest.
pub fn report_runs(records: &[RunRecord]) -> Result<Vec<Report>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run records to report".into()))?;
    if let Some(r) = records.iter().find(|r| r.manifest_hash != first.manifest_hash) {
        return Err(Error::InvalidArgument(format!(
            "run records come from different manifests ({} vs {}); report them separately",
            first.manifest_hash, r.manifest_hash
        )));
    }
    let mut groups: BTreeMap<(Method, String), Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.variant.clone()))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| aggregate_runs(g)).collect()
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Final-stage table: one row per method and variant, values in percent.
pub fn render_table(reports: &[Report]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<28} {:>4} {:>14} {:>14}",
        "method", "variant", "runs", "AA_T (%)", "FR_T (%)"
    );
    for r in reports {
        let s = r.final_stage();
        let fr = match (s.fr_mean, s.fr_std) {
            (Some(m), Some(sd)) => format!("{} ± {}", pct(m), pct(sd)),
            _ => "-".into(),
        };
        let _ = writeln!(
            out,
            "{:<12} {:<28} {:>4} {:>14} {:>14}",
            r.method,
            r.variant,
            r.runs,
            format!("{} ± {}", pct(s.aa_mean), pct(s.aa_std)),
            fr
        );
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(reports: &[Report]) -> String {
    let mut out = String::from("method,variant,runs,stages,aa_mean,aa_std,fr_mean,fr_std\n");
    for r in reports {
        let s = r.final_stage();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.variant,
            r.runs,
            r.stages.len(),
            s.aa_mean,
            s.aa_std,
            opt(s.fr_mean),
            opt(s.fr_std)
        );
    }
    out
}

/// One row per method, variant and stage.
pub fn render_stagewise_csv(reports: &[Report]) -> String {
    let mut out = String::from("method,variant,stage,aa_mean,aa_std,fr_mean,fr_std\n");
    for r in reports {
        for s in &r.stages {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.variant,
                s.stage,
                s.aa_mean,
                s.aa_std,
                opt(s.fr_mean),
                opt(s.fr_std)
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoProjection,
    ProjectionNoRelu,
    QSweep(Vec<usize>),
}

impl AblationVariant {
    /// `(label, config)` pairs this variant expands to.
    fn configs(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut full = base.clone();
        full.use_projection = true;
        full.identity_projection = false;
        full.nonlinearity = Nonlinearity::Relu;
        Ok(match self {
            AblationVariant::Full => vec![("full".into(), full)],
            AblationVariant::NoProjection => {
                let mut c = full;
                c.use_projection = false;
                vec![("no_projection".into(), c)]
            }
            AblationVariant::ProjectionNoRelu => {
                let mut c = full;
                c.nonlinearity = Nonlinearity::Identity;
                vec![("projection_no_relu".into(), c)]
            }
            AblationVariant::QSweep(qs) => {
                if qs.is_empty() {
                    return Err(Error::InvalidArgument("empty Q sweep".into()));
                }
                qs.iter()
                    .map(|&q| {
                        if q == 0 {
                            return Err(Error::InvalidArgument("Q must be positive".into()));
                        }
                        let mut c = base.clone();
                        c.use_projection = true;
                        c.q = q;
                        Ok((format!("q={q}"), c))
                    })
                    .collect::<Result<_>>()?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub feature_dim: usize,
    pub report: Report,
    pub head_parameters: usize,
    pub frozen_parameters: usize,
    /// A linear probe on the raw embeddings, for comparison.
    pub probe_parameters: usize,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn extend(&mut self, other: AblationReport) {
        self.rows.extend(other.rows);
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>14} {:>14} {:>12} {:>12} {:>12}",
            "variant", "Q", "AA_T (%)", "FR_T (%)", "head", "frozen", "probe"
        );
        for r in &self.rows {
            let s = r.report.final_stage();
            let fr = match (s.fr_mean, s.fr_std) {
                (Some(m), Some(sd)) => format!("{} ± {}", pct(m), pct(sd)),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>14} {:>14} {:>12} {:>12} {:>12}",
                r.label,
                r.feature_dim,
                format!("{} ± {}", pct(s.aa_mean), pct(s.aa_std)),
                fr,
                r.head_parameters,
                r.frozen_parameters,
                r.probe_parameters
            );
        }
        out
    }

    /// AA_t curves: one row per variant and stage.
    pub fn render_curves_csv(&self) -> String {
        let mut out = String::from("variant,feature_dim,stage,aa_mean,aa_std\n");
        for r in &self.rows {
            for s in &r.report.stages {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.label, r.feature_dim, s.stage, s.aa_mean, s.aa_std
                );
            }
        }
        out
    }
}

/// Runs the proposed method under `variant` (starting from `base`) for every
/// seed.
pub fn run_ablation(
    exp: &Experiment,
    base: &ExperimentConfig,
    variant: &AblationVariant,
    seeds: &[u64],
) -> Result<AblationReport> {
    let (h, classes) = (exp.dim(), exp.class_count());
    let mut rows = Vec::new();
    for (label, cfg) in variant.configs(base)? {
        let records = run_protocol(exp, Method::Proposed, &cfg, seeds)?;
        let report = aggregate_runs(&records)?;
        let params = parameter_count(Method::Proposed, &cfg, h, classes);
        rows.push(AblationRow {
            label,
            feature_dim: feature_dim(&cfg, h),
            report,
            head_parameters: params.trainable,
            frozen_parameters: params.frozen,
            probe_parameters: probe_parameters(h, classes),
            records,
        });
    }
    Ok(AblationReport { rows })
}
