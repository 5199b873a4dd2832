//! Splitting, training, evaluation and the generalization protocols.

use crate::dataset::{generate_filtered, generate_range, Dataset, DatasetError};
use mmon_core::model::{
    frozen_modules, predict, Example, MmonModel, Mode, ModelDims, ModelError, StepConfig,
};
use mmon_core::puzzle::derive_seed;
use mmon_core::tensor::{AdamConfig, AdamState};
use mmon_core::{Configuration, RuleFamily};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("need at least 5 instances to split, got {0}")]
    TooFew(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no instances left after filtering for {0}")]
    EmptyAfterFilter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "Mode", rename_all = "lowercase")]
enum ModeDef {
    Plain,
    Meta,
}

mod config_names {
    use mmon_core::Configuration;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Configuration], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|c| c.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Configuration>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|n| Configuration::from_name(n).ok_or_else(|| D::Error::custom(format!("unknown configuration {n}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(with = "ModeDef")]
    pub mode: Mode,
    pub lambda: f64,
    pub mu: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub size: u32,
    #[serde(with = "config_names")]
    pub configs: Vec<Configuration>,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Meta,
            lambda: 0.01,
            mu: 0.1,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 32,
            epochs: 30,
            seed: 0,
            size: 40,
            configs: vec![Configuration::Center],
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return fail("lambda and mu must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if !mmon_core::render::SUPPORTED_SIZES.contains(&self.size) {
            return fail("size must be 40 or 80");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.configs.is_empty() {
            return fail("at least one configuration is required");
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            mode: self.mode,
            lambda: self.lambda,
            mu: self.mu,
            dropout: self.dropout,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

pub type Split<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Seeded 6:2:2 split: `⌊0.6n⌋` train, `⌊0.2n⌋` validation, the rest test.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Result<Split<T>, HarnessError> {
    let n = items.len();
    if n < 5 {
        return Err(HarnessError::TooFew(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = (n * 6 / 10, n * 2 / 10);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..a]), pick(&order[a..a + b]), pick(&order[a + b..])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigAccuracy {
    pub config: String,
    /// `in_config`, `transfer` or `holdout`.
    pub role: String,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub mode: String,
    pub per_config: Vec<ConfigAccuracy>,
    pub mean_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub seeds: Vec<u64>,
    pub wall_time_secs: f64,
}

impl MetricsRecord {
    pub fn accuracy_of(&self, config: Configuration, role: &str) -> Option<f64> {
        self.per_config
            .iter()
            .find(|c| c.config == config.name() && c.role == role)
            .map(|c| c.accuracy)
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy (the initial
    /// parameters count as epoch "none").
    pub model: MmonModel,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

fn accuracy(model: &MmonModel, examples: &[Example], mode: Mode) -> Result<f64, HarnessError> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let hits = examples
        .par_iter()
        .map(|ex| Ok(model.predict_example(ex, mode)? == ex.label as usize))
        .collect::<Result<Vec<bool>, ModelError>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

const SHUFFLE_SALT: u64 = 0x5348_5546;
const STEP_SALT: u64 = 0x5354_4550;

/// Trains from `config.seed` with the per-example gradient pipeline. Each epoch
/// shuffles with its own derived seed; `on_epoch` sees every record as soon as
/// it is produced.
pub fn train(
    config: &TrainConfig,
    dims: ModelDims,
    train_set: &[Example],
    val_set: &[Example],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let start = Instant::now();
    let mut model = MmonModel::new(dims, config.seed);
    let mut state = AdamState::new(config.adam(), &model.params);
    let step_cfg = config.step_config();
    let mut best = (model.clone(), None, accuracy(&model, val_set, config.mode)?);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        let shuffle_seed = derive_seed(config.seed ^ SHUFFLE_SALT, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step_seed = derive_seed(config.seed ^ STEP_SALT, (epoch as u64) << 32 | b as u64);
            let grads = batch
                .par_iter()
                .enumerate()
                .map(|(i, ex)| model.instance_gradient(ex, &step_cfg, derive_seed(step_seed, i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            let frozen = frozen_modules(batch.iter().copied());
            let stats = model.apply_gradients(&grads, &frozen, &mut state)?;
            loss_sum += stats.loss * grads.len() as f64;
            hits += grads.iter().filter(|g| g.correct).count();
        }
        let val = accuracy(&model, val_set, config.mode)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: hits as f64 / train_set.len() as f64,
            val_accuracy: val,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if val > best.2 {
            best = (model.clone(), Some(epoch), val);
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_val_accuracy: best.2,
        history,
    })
}

/// Accuracy overall and per configuration. Never mutates `model`.
pub fn evaluate(
    model: &MmonModel,
    examples: &[Example],
    mode: Mode,
    role: &str,
) -> Result<Vec<ConfigAccuracy>, HarnessError> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let preds = examples
        .par_iter()
        .map(|ex| model.score_candidates(ex, mode).map(|s| predict(&s.scores)))
        .collect::<Result<Vec<usize>, ModelError>>()?;
    let mut out = Vec::new();
    for config in Configuration::ALL {
        let (mut n, mut hits) = (0usize, 0usize);
        for (ex, &p) in examples.iter().zip(&preds) {
            if ex.config == config {
                n += 1;
                hits += (p == ex.label as usize) as usize;
            }
        }
        if n > 0 {
            out.push(ConfigAccuracy {
                config: config.name().into(),
                role: role.into(),
                count: n,
                accuracy: hits as f64 / n as f64,
            });
        }
    }
    Ok(out)
}

pub fn mean_accuracy(per_config: &[ConfigAccuracy]) -> f64 {
    if per_config.is_empty() {
        return 0.0;
    }
    per_config.iter().map(|c| c.accuracy).sum::<f64>() / per_config.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    InConfig,
    ConfigTransfer,
    RuleHoldout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub train_configs: Vec<Configuration>,
    pub test_configs: Vec<Configuration>,
    pub held_out: Option<RuleFamily>,
}

impl ExperimentSpec {
    pub fn in_config(configs: &[Configuration]) -> Self {
        Self {
            kind: ExperimentKind::InConfig,
            train_configs: configs.to_vec(),
            test_configs: configs.to_vec(),
            held_out: None,
        }
    }

    pub fn transfer(train: &[Configuration], test: &[Configuration]) -> Self {
        Self {
            kind: ExperimentKind::ConfigTransfer,
            train_configs: train.to_vec(),
            test_configs: test.to_vec(),
            held_out: None,
        }
    }

    pub fn holdout(configs: &[Configuration], family: RuleFamily) -> Self {
        Self {
            kind: ExperimentKind::RuleHoldout,
            train_configs: configs.to_vec(),
            test_configs: configs.to_vec(),
            held_out: Some(family),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.train_configs.is_empty() || self.test_configs.is_empty() {
            return fail("train and test configurations must be non-empty");
        }
        match self.kind {
            ExperimentKind::RuleHoldout if self.held_out.is_none() => fail("rule holdout needs a rule family"),
            ExperimentKind::ConfigTransfer
                if self.train_configs.iter().any(|c| self.test_configs.contains(c)) =>
            {
                fail("transfer train and test configurations must be disjoint")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        let join = |cs: &[Configuration]| cs.iter().map(|c| c.name()).collect::<Vec<_>>().join("+");
        match self.kind {
            ExperimentKind::InConfig => format!("in_config:{}", join(&self.train_configs)),
            ExperimentKind::ConfigTransfer => {
                format!("transfer:{}->{}", join(&self.train_configs), join(&self.test_configs))
            }
            ExperimentKind::RuleHoldout => format!(
                "holdout:{}:{}",
                self.held_out.map_or("?", |f| f.name()),
                join(&self.train_configs)
            ),
        }
    }
}

/// Instance counts per configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSize {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusSize {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

/// Stream offsets keeping train/val and test instances disjoint.
const TEST_OFFSET: u64 = 1 << 40;
const SCAN_FACTOR: u64 = 50;

pub struct GeneralizationResult {
    pub metrics: MetricsRecord,
    pub model: MmonModel,
    pub history: Vec<EpochRecord>,
}

/// Keep instances whose annotation does (`true`) or does not contain a family.
type Filter = Option<(RuleFamily, bool)>;

fn corpus(
    config: Configuration,
    data_seed: u64,
    start: u64,
    quota: usize,
    size: u32,
    keep: Filter,
) -> Result<(Dataset, u64), HarnessError> {
    match keep {
        None => Ok((
            generate_range(config, data_seed, start, quota as u64, size)?,
            start + quota as u64,
        )),
        Some((family, wanted)) => {
            let limit = SCAN_FACTOR * quota.max(1) as u64;
            let (ds, next) = generate_filtered(config, data_seed, start, quota, limit, size, |a| {
                a.contains_family(family) == wanted
            })?;
            if ds.is_empty() && quota > 0 {
                return Err(HarnessError::EmptyAfterFilter(format!("{} on {}", family.name(), config.name())));
            }
            Ok((ds, next))
        }
    }
}

/// Runs one protocol end to end: generate, train with best-val selection,
/// evaluate. Transfer experiments also report the in-configuration test
/// accuracy of the training configurations (role `in_config`).
pub fn run_generalization(
    spec: &ExperimentSpec,
    config: &TrainConfig,
    sizes: CorpusSize,
    data_seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<GeneralizationResult, HarnessError> {
    spec.validate()?;
    config.validate()?;
    let start = Instant::now();
    let exclude = spec.held_out.map(|f| (f, false));
    let include = spec.held_out.map(|f| (f, true));
    let (mut train_ds, mut val_ds) = (Dataset::empty(config.size), Dataset::empty(config.size));
    for &c in &spec.train_configs {
        let (t, next) = corpus(c, data_seed, 0, sizes.train, config.size, exclude)?;
        let (v, _) = corpus(c, data_seed, next, sizes.val, config.size, exclude)?;
        train_ds.extend(t);
        val_ds.extend(v);
    }
    if let Some(f) = spec.held_out {
        debug_assert!(train_ds.instances.iter().all(|i| !i.annotation.contains_family(f)));
    }
    let outcome = train(config, ModelDims::default(), &train_ds.examples()?, &val_ds.examples()?, on_epoch)?;

    let mut per_config = Vec::new();
    let mut test_sets: Vec<(Configuration, &str, Filter)> = Vec::new();
    match spec.kind {
        ExperimentKind::InConfig => test_sets.extend(spec.test_configs.iter().map(|&c| (c, "in_config", None))),
        ExperimentKind::ConfigTransfer => {
            test_sets.extend(spec.train_configs.iter().map(|&c| (c, "in_config", None)));
            test_sets.extend(spec.test_configs.iter().map(|&c| (c, "transfer", None)));
        }
        ExperimentKind::RuleHoldout => test_sets.extend(spec.test_configs.iter().map(|&c| (c, "holdout", include))),
    }
    for (c, role, keep) in test_sets {
        let (ds, _) = corpus(c, data_seed, TEST_OFFSET, sizes.test, config.size, keep)?;
        per_config.extend(evaluate(&outcome.model, &ds.examples()?, config.mode, role)?);
    }
    let scored: Vec<ConfigAccuracy> = per_config.iter().filter(|c| c.role != "in_config" || spec.kind == ExperimentKind::InConfig).cloned().collect();
    let metrics = MetricsRecord {
        experiment: spec.name(),
        mode: config.mode.name().into(),
        mean_accuracy: mean_accuracy(&scored),
        per_config,
        loss_history: outcome.history.iter().map(|r| r.loss).collect(),
        seeds: vec![data_seed, config.seed],
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(GeneralizationResult {
        metrics,
        model: outcome.model,
        history: outcome.history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str = "experiment,mode,role,config,count,accuracy,mean_accuracy,seeds,wall_time_secs";

/// One CSV row per (experiment, configuration); accuracies with 4 decimals.
pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        for c in &r.per_config {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4},{},{:.1}\n",
                r.experiment, r.mode, c.role, c.config, c.count, c.accuracy, r.mean_accuracy, seeds, r.wall_time_secs
            ));
        }
    }
    out
}

pub fn render_report(records: &[MetricsRecord], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(records),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(records).expect("records serialize");
            s.push('\n');
            s
        }
    }
}

pub fn emit_report(records: &[MetricsRecord], path: &std::path::Path, format: ReportFormat) -> std::io::Result<()> {
    std::fs::write(path, render_report(records, format))
}
