//! The seeded benchmark matrix over label availabilities, methods and
//! seeds, with per-cell caching.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mask_labels, split_train_test, BondTensor, FeatureScaler, LABEL_AVAILABILITIES};
use crate::error::{Error, Result};
use crate::pretrain::{Checkpoint, PretrainConfig};
use crate::viz::plot_boxes;

use super::probe::{fit_and_score, mean_absolute_error, MlpProbeConfig, ProbeKind};
use super::transfer::{fine_tune, FineTuneConfig, SupervisedModel, TransferInit};
use super::{
    ensure_disjoint, extract_trained, extract_untrained, RepresentationMatrix, RepresentationSource,
};

/// Smallest label count accepted by transfer cells.
pub const MIN_TRANSFER_LABELS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Probe(ProbeKind, RepresentationSource),
    Transfer(TransferInit),
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Probe(ProbeKind::Linear, RepresentationSource::TrainedDim),
        Method::Probe(ProbeKind::Linear, RepresentationSource::UntrainedDim),
        Method::Probe(ProbeKind::Linear, RepresentationSource::ExternalBaseline),
        Method::Probe(ProbeKind::Mlp64, RepresentationSource::TrainedDim),
        Method::Probe(ProbeKind::Mlp64, RepresentationSource::UntrainedDim),
        Method::Probe(ProbeKind::Mlp64, RepresentationSource::ExternalBaseline),
        Method::Transfer(TransferInit::Random),
        Method::Transfer(TransferInit::DimCheckpoint),
        Method::Transfer(TransferInit::DonorSupervised),
    ];

    pub fn is_transfer(self) -> bool {
        matches!(self, Method::Transfer(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Probe(kind, source) => {
                let k = match kind {
                    ProbeKind::Linear => "linear",
                    ProbeKind::Mlp64 => "mlp64",
                };
                write!(f, "{k}_{}", source.name())
            }
            Method::Transfer(init) => f.write_str(match init {
                TransferInit::Random => "transfer_random",
                TransferInit::DimCheckpoint => "transfer_dim",
                TransferInit::DonorSupervised => "transfer_donor",
            }),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                let names: Vec<String> = Method::ALL.iter().map(Method::to_string).collect();
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_labels: Vec<usize>,
    pub methods: Vec<Method>,
    pub probe_seeds: usize,
    pub transfer_seeds: usize,
    pub split_seed: u64,
    pub untrained_seed: u64,
    /// Site budget per batch during representation extraction.
    pub extract_budget: usize,
    pub probe: MlpProbeConfig,
    pub fine_tune: FineTuneConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_labels: LABEL_AVAILABILITIES.to_vec(),
            methods: vec![
                Method::Probe(ProbeKind::Linear, RepresentationSource::TrainedDim),
                Method::Probe(ProbeKind::Linear, RepresentationSource::UntrainedDim),
                Method::Probe(ProbeKind::Mlp64, RepresentationSource::TrainedDim),
                Method::Probe(ProbeKind::Mlp64, RepresentationSource::UntrainedDim),
                Method::Transfer(TransferInit::Random),
                Method::Transfer(TransferInit::DimCheckpoint),
            ],
            probe_seeds: 100,
            transfer_seeds: 12,
            split_seed: 0,
            untrained_seed: 1,
            extract_budget: 4000,
            probe: MlpProbeConfig::default(),
            fine_tune: FineTuneConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels.is_empty() || self.methods.is_empty() {
            return Err(Error::Config(
                "benchmark needs label counts and methods".into(),
            ));
        }
        if self.probe_seeds == 0 || self.transfer_seeds == 0 {
            return Err(Error::Config("seed counts must be positive".into()));
        }
        let smallest = self.n_labels.iter().copied().min().unwrap_or(0);
        if self.methods.iter().any(|m| m.is_transfer()) && smallest < MIN_TRANSFER_LABELS {
            return Err(Error::Parameter(format!(
                "transfer methods need at least {MIN_TRANSFER_LABELS} labels, got {smallest}"
            )));
        }
        if self.extract_budget == 0 || self.fine_tune.batch_budget == 0 {
            return Err(Error::Config("batch budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self, method: Method) -> usize {
        if method.is_transfer() {
            self.transfer_seeds
        } else {
            self.probe_seeds
        }
    }
}

/// A labeled corpus with its bond tensors, in matching order.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub tensors: Vec<BondTensor>,
}

/// Models and feature files the methods draw on.
#[derive(Clone, Debug, Default)]
pub struct BenchmarkInputs {
    pub dim_checkpoint: Option<Checkpoint>,
    pub donor_checkpoint: Option<Checkpoint>,
    pub external: Option<RepresentationMatrix>,
    /// Architecture for untrained and randomly initialized models when no
    /// InfoMax checkpoint is given.
    pub model_config: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub task: String,
    pub n_labels: usize,
    pub method: Method,
    pub seed: u64,
    pub test_mae: f64,
}

/// A computed cell as stored in the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub result: BenchmarkResult,
    pub fingerprint: String,
    pub visible_ids: Vec<String>,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub results: Vec<BenchmarkResult>,
    pub records: Vec<CellRecord>,
    pub computed: usize,
    pub cached: usize,
    pub skipped_n_labels: Vec<usize>,
    pub test_ids: Vec<String>,
    /// Every id whose label reached a training routine.
    pub training_ids: BTreeSet<String>,
}

pub const RESULTS_HEADER: &str = "task,n_labels,method,seed,test_mae";

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for r in &self.results {
            s.push_str(&format!(
                "{},{},{},{},{:?}\n",
                r.task, r.n_labels, r.method, r.seed, r.test_mae
            ));
        }
        s
    }

    /// Test MAEs of one (n_labels, method) cell.
    pub fn maes(&self, n_labels: usize, method: Method) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.n_labels == n_labels && r.method == method)
            .map(|r| r.test_mae)
            .collect()
    }
}

/// Seed of the visible-label subset for `(n_labels, seed)`. It does not
/// depend on the method, so all methods see the same labels.
pub fn mask_seed(split_seed: u64, n_labels: usize, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(split_seed.to_le_bytes());
    h.update((n_labels as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let bytes = h.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes"))
}

struct Prepared<'a> {
    task: &'a Task,
    config: &'a BenchmarkConfig,
    inputs: &'a BenchmarkInputs,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    trained: Option<RepresentationMatrix>,
    untrained: Option<RepresentationMatrix>,
    fingerprint: String,
}

fn cell_path(dir: &Path, task: &str, n: usize, method: Method, seed: u64) -> PathBuf {
    dir.join("cells")
        .join(task)
        .join(format!("n{n}"))
        .join(method.to_string())
        .join(format!("seed{seed:04}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fingerprint(task: &Task, config: &BenchmarkConfig, inputs: &BenchmarkInputs) -> String {
    let mut h = Sha256::new();
    h.update(task.name.as_bytes());
    for (id, y) in task.ids.iter().zip(&task.labels) {
        h.update(id.as_bytes());
        h.update(y.to_le_bytes());
    }
    let settings = serde_json::json!({
        "split_seed": config.split_seed,
        "untrained_seed": config.untrained_seed,
        "probe": config.probe,
        "fine_tune": config.fine_tune,
        "model": inputs.model_config,
    });
    h.update(settings.to_string().as_bytes());
    for ck in [&inputs.dim_checkpoint, &inputs.donor_checkpoint] {
        h.update(
            ck.as_ref()
                .map(Checkpoint::digest)
                .unwrap_or_default()
                .as_bytes(),
        );
    }
    if let Some(ext) = &inputs.external {
        for v in ext.x.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn labels_for(task: &Task, ids: &[String]) -> Vec<f64> {
    let index: std::collections::HashMap<&str, usize> = task
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| task.labels[index[id.as_str()]])
        .collect()
}

fn tensors_for<'a>(task: &'a Task, ids: &[String]) -> Vec<&'a BondTensor> {
    let index: std::collections::HashMap<&str, usize> = task
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| &task.tensors[index[id.as_str()]])
        .collect()
}

impl Prepared<'_> {
    fn representations(&self, source: RepresentationSource) -> Result<&RepresentationMatrix> {
        match source {
            RepresentationSource::TrainedDim => self.trained.as_ref(),
            RepresentationSource::UntrainedDim => self.untrained.as_ref(),
            RepresentationSource::ExternalBaseline => self.inputs.external.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("no {} representations available", source.name())))
    }

    fn run_cell(&self, n: usize, method: Method, seed: u64) -> Result<CellRecord> {
        let masked = mask_labels(
            &self.train_ids,
            n,
            mask_seed(self.config.split_seed, n, seed),
        )?;
        let visible = masked.visible_label_ids;
        ensure_disjoint(
            &visible,
            &self.test_ids,
            &format!("{method} n={n} seed={seed}"),
        )?;
        let y_train = labels_for(self.task, &visible);
        let y_test = labels_for(self.task, &self.test_ids);
        let (test_mae, rank_deficient) = match method {
            Method::Probe(kind, source) => {
                let reps = self.representations(source)?;
                fit_and_score(
                    kind,
                    &reps.rows(&visible)?,
                    &y_train,
                    &reps.rows(&self.test_ids)?,
                    &y_test,
                    &self.config.probe,
                    seed,
                )?
            }
            Method::Transfer(init) => {
                let source = match init {
                    TransferInit::Random => None,
                    TransferInit::DimCheckpoint => {
                        Some(self.inputs.dim_checkpoint.as_ref().ok_or_else(|| {
                            Error::Config("transfer_dim needs an InfoMax checkpoint".into())
                        })?)
                    }
                    TransferInit::DonorSupervised => {
                        Some(self.inputs.donor_checkpoint.as_ref().ok_or_else(|| {
                            Error::Config("transfer_donor needs a donor checkpoint".into())
                        })?)
                    }
                };
                let fallback = FeatureScaler::fit(
                    &tensors_for(self.task, &self.train_ids)
                        .into_iter()
                        .cloned()
                        .collect::<Vec<_>>(),
                );
                let mut model = SupervisedModel::initialize(
                    init,
                    &self.inputs.model_config.encoder,
                    source,
                    fallback,
                    seed,
                )?;
                fine_tune(
                    &mut model,
                    &tensors_for(self.task, &visible),
                    &y_train,
                    &self.config.fine_tune,
                    seed,
                )?;
                let pred = model.predict(
                    &tensors_for(self.task, &self.test_ids),
                    self.config.fine_tune.batch_budget,
                )?;
                (mean_absolute_error(&pred, &y_test), false)
            }
        };
        Ok(CellRecord {
            result: BenchmarkResult {
                task: self.task.name.clone(),
                n_labels: n,
                method,
                seed,
                test_mae,
            },
            fingerprint: self.fingerprint.clone(),
            visible_ids: visible,
            rank_deficient,
        })
    }
}

/// Runs every `(n_labels, method, seed)` cell on `task`. With `out_dir`,
/// cells are cached there and the results table and box plots are written;
/// with `resume`, cached cells whose inputs match are reused.
pub fn run_benchmark(
    task: &Task,
    config: &BenchmarkConfig,
    inputs: &BenchmarkInputs,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<BenchmarkReport> {
    config.validate()?;
    if task.ids.len() != task.labels.len() || task.ids.len() != task.tensors.len() {
        return Err(Error::Config(
            "task ids, labels and structures differ in length".into(),
        ));
    }
    let (train_ids, test_ids) = split_train_test(&task.ids, config.split_seed);
    for (name, ck) in [
        ("InfoMax", &inputs.dim_checkpoint),
        ("donor", &inputs.donor_checkpoint),
    ] {
        if let Some(ck) = ck {
            ensure_disjoint(&ck.trained_on, &test_ids, &format!("{name} checkpoint"))?;
            if ck.config.encoder != inputs.model_config.encoder {
                return Err(Error::Config(format!(
                    "{name} checkpoint architecture differs from the model configuration"
                )));
            }
        }
    }

    let uses = |source: RepresentationSource| {
        config
            .methods
            .iter()
            .any(|m| matches!(m, Method::Probe(_, s) if *s == source))
    };
    let all: Vec<&BondTensor> = task.tensors.iter().collect();
    let trained = if uses(RepresentationSource::TrainedDim) {
        let ck = inputs.dim_checkpoint.as_ref().ok_or_else(|| {
            Error::Config("trained-representation probes need an InfoMax checkpoint".into())
        })?;
        Some(extract_trained(ck, &task.ids, &all, config.extract_budget)?)
    } else {
        None
    };
    let untrained = if uses(RepresentationSource::UntrainedDim) {
        let scaler = match &inputs.dim_checkpoint {
            Some(ck) => ck.scaler.clone(),
            None => FeatureScaler::fit(
                &tensors_for(task, &train_ids)
                    .into_iter()
                    .cloned()
                    .collect::<Vec<_>>(),
            ),
        };
        Some(extract_untrained(
            &inputs.model_config,
            config.untrained_seed,
            &scaler,
            &task.ids,
            &all,
            config.extract_budget,
        )?)
    } else {
        None
    };

    let mut skipped = Vec::new();
    let mut cells = Vec::new();
    for &n in &config.n_labels {
        if n > train_ids.len() {
            log::warn!(
                "skipping {n} labels: only {} training crystals in task {}",
                train_ids.len(),
                task.name
            );
            skipped.push(n);
            continue;
        }
        for &method in &config.methods {
            for seed in 0..config.seeds(method) as u64 {
                cells.push((n, method, seed));
            }
        }
    }

    let prepared = Prepared {
        task,
        config,
        inputs,
        train_ids,
        test_ids,
        trained,
        untrained,
        fingerprint: fingerprint(task, config, inputs),
    };
    let outcomes: Vec<(CellRecord, bool)> = cells
        .par_iter()
        .map(|&(n, method, seed)| {
            let path = out_dir.map(|d| cell_path(d, &task.name, n, method, seed));
            if resume {
                if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                    let cached: Option<CellRecord> = fs::read(p)
                        .ok()
                        .and_then(|b| serde_json::from_slice(&b).ok());
                    if let Some(rec) = cached.filter(|r| r.fingerprint == prepared.fingerprint) {
                        return Ok((rec, true));
                    }
                }
            }
            let rec = prepared.run_cell(n, method, seed)?;
            if let Some(p) = &path {
                write_atomic(p, &serde_json::to_vec(&rec)?)?;
            }
            Ok((rec, false))
        })
        .collect::<Result<_>>()?;

    let mut training_ids = BTreeSet::new();
    for (rec, _) in &outcomes {
        ensure_disjoint(&rec.visible_ids, &prepared.test_ids, "benchmark audit")?;
        training_ids.extend(rec.visible_ids.iter().cloned());
    }
    let cached = outcomes.iter().filter(|o| o.1).count();
    let records: Vec<CellRecord> = outcomes.into_iter().map(|o| o.0).collect();
    let report = BenchmarkReport {
        results: records.iter().map(|r| r.result.clone()).collect(),
        computed: records.len() - cached,
        cached,
        records,
        skipped_n_labels: skipped,
        test_ids: prepared.test_ids,
        training_ids,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("results.csv"), report.to_csv().as_bytes())?;
        for &n in &config.n_labels {
            if report.skipped_n_labels.contains(&n) {
                continue;
            }
            let groups: Vec<(String, Vec<f64>)> = config
                .methods
                .iter()
                .map(|&m| (m.to_string(), report.maes(n, m)))
                .collect();
            plot_boxes(&groups, &dir.join(format!("{}_n{n}.png", task.name)))?;
        }
    }
    Ok(report)
}
