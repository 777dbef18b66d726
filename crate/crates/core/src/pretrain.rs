//! Dual-objective InfoMax training: the local and global losses are summed
//! and stepped together, with the global branch reading local features as
//! constants.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::dataset::split_fraction;
use crate::data::{
    build_bond_tensor, build_supercell, BondTensor, CrystalStructure, ElementPropertyTable,
    FeatureScaler,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::infomax::{build_dim_batch, DimConfig, DimModel, LevelStats};
use crate::nn::{AdamW, Params, Tape, TensorRecord};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Summed supercell sites per batch.
    pub batch_budget: usize,
    pub site_cap: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8.12e-4,
            weight_decay: 0.01,
            batch_budget: 1200,
            site_cap: 50,
            max_epochs: 100,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.site_cap == 0 || self.batch_budget < self.site_cap {
            return Err(Error::Config(format!(
                "batch_budget {} must be at least site_cap {}",
                self.batch_budget, self.site_cap
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that determines a pretraining run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub dim: DimConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dim.validate()?;
        self.train.validate()
    }
}

/// Supercells and bond tensors for every structure, in input order.
pub fn featurize(
    structures: &[CrystalStructure],
    site_cap: usize,
    table: &ElementPropertyTable,
) -> Result<Vec<BondTensor>> {
    structures
        .par_iter()
        .map(|s| {
            s.validate(table)?;
            Ok(build_bond_tensor(&build_supercell(s, site_cap, table)?))
        })
        .collect()
}

/// Packs crystals in `order` into batches whose summed site count stays
/// within `budget`. A trailing single-crystal batch is merged into the one
/// before it, since in-batch sampling needs two crystals.
pub fn pack_batches(sizes: &[usize], order: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for &k in order {
        if !current.is_empty() && used + sizes[k] > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(k);
        used += sizes[k];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Validation and training values for one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_local_dim: f64,
    pub train_global_dim: f64,
    pub local_dim: f64,
    pub global_dim: f64,
    pub local_kl: f64,
    pub global_kl: f64,
    pub local_in_batch_accuracy: f64,
    pub global_in_batch_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurves {
    pub const CSV_HEADER: &'static str = "epoch,local_dim,global_dim,local_kl,global_kl,train_local_dim,train_global_dim,local_in_batch_accuracy,global_in_batch_accuracy,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.local_dim,
                r.global_dim,
                r.local_kl,
                r.global_kl,
                r.train_local_dim,
                r.train_global_dim,
                r.local_in_batch_accuracy,
                r.global_in_batch_accuracy,
                r.seconds
            ));
        }
        out
    }

    /// Writes the table and a line plot of the four validation curves with
    /// the zero-score baseline dashed.
    pub fn export(&self, csv: &Path, png: &Path) -> Result<()> {
        fs::write(csv, self.to_csv())?;
        let series = [
            self.records.iter().map(|r| r.local_dim).collect::<Vec<_>>(),
            self.records.iter().map(|r| r.global_dim).collect(),
            self.records.iter().map(|r| r.local_kl).collect(),
            self.records.iter().map(|r| r.global_kl).collect(),
        ];
        crate::viz::plot_lines(&series, Some(2.0 * std::f64::consts::LN_2), png)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Dim,
    Supervised,
}

/// A self-contained model file: configuration, scaler, seed and every
/// parameter tensor by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: PretrainConfig,
    pub scaler: FeatureScaler,
    pub seed: u64,
    pub epochs_completed: usize,
    pub trained_on: Vec<String>,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn digest(&self) -> String {
        let mut params = Params::new();
        for (name, rec) in &self.params {
            let value =
                ndarray::Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                    .expect("consistent record");
            params.add(name.clone(), value);
        }
        params.digest()
    }

    /// Rebuilds the InfoMax model with the stored parameters.
    pub fn dim_model(&self) -> Result<(Params, DimModel)> {
        let (mut params, model) = init_dim_model(&self.config, self.seed)?;
        let copied = params
            .load_matching(&self.params, |_| true)
            .map_err(Error::Checkpoint)?;
        if copied.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {} of {} parameters",
                copied.len(),
                params.len()
            )));
        }
        Ok((params, model))
    }
}

/// Freshly initialized encoder plus InfoMax heads.
pub fn init_dim_model(config: &PretrainConfig, seed: u64) -> Result<(Params, DimModel)> {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut params, &config.encoder, &mut rng)?;
    let model = DimModel::new(&mut params, encoder, &config.dim, &mut rng)?;
    Ok((params, model))
}

/// Files written alongside training. All are optional.
#[derive(Clone, Debug, Default)]
pub struct PretrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub curves_csv: Option<PathBuf>,
    pub curves_png: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curves: TrainingCurves,
    pub best_epoch: usize,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    /// Statistics of the last validation pass.
    pub validation: (LevelStats, LevelStats),
}

const SPLIT_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;
const SAMPLE_STREAM: u64 = 0x5eed_0003;
const NOISE_STREAM: u64 = 0x5eed_0004;
const VALIDATION_STREAM: u64 = 0x5eed_0005;

fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which);
    rng
}

/// The training state between epochs.
pub struct Pretrainer<'a> {
    pub config: PretrainConfig,
    pub params: Params,
    pub model: DimModel,
    pub scaler: FeatureScaler,
    optimizer: AdamW,
    table: &'a ElementPropertyTable,
    shuffle_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        config: &PretrainConfig,
        scaler: FeatureScaler,
        table: &'a ElementPropertyTable,
    ) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let (params, model) = init_dim_model(config, seed)?;
        let optimizer = AdamW::new(
            &params,
            config.train.learning_rate,
            config.train.weight_decay,
        );
        Ok(Pretrainer {
            config: config.clone(),
            params,
            model,
            scaler,
            optimizer,
            table,
            shuffle_rng: stream(seed, SHUFFLE_STREAM),
            sample_rng: stream(seed, SAMPLE_STREAM),
            noise_rng: stream(seed, NOISE_STREAM),
        })
    }

    /// One pass over `tensors` in shuffled batches. Returns the mean
    /// training statistics per level.
    pub fn train_epoch(
        &mut self,
        tensors: &[&BondTensor],
        epoch: usize,
    ) -> Result<(LevelStats, LevelStats)> {
        let sizes: Vec<usize> = tensors.iter().map(|t| t.num_sites()).collect();
        let mut order: Vec<usize> = (0..tensors.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut local = LevelStats::default();
        let mut global = LevelStats::default();
        for batch_ids in pack_batches(&sizes, &order, self.config.train.batch_budget) {
            let members: Vec<&BondTensor> = batch_ids.iter().map(|&k| tensors[k]).collect();
            let batch = build_dim_batch(
                &members,
                &self.config.dim,
                &self.scaler,
                self.table,
                &mut self.sample_rng,
            )?;
            let mut tape = Tape::new();
            let losses = self.model.losses(
                &mut tape,
                &self.params,
                &batch,
                &self.config.dim,
                &mut self.noise_rng,
                &mut self.sample_rng,
            )?;
            let total = tape.scalar(losses.total);
            if !total.is_finite() || total.abs() > self.config.train.divergence_threshold {
                return Err(Error::Divergence {
                    epoch,
                    loss: total,
                    checkpoint: PathBuf::new(),
                });
            }
            let grads = tape.backward(losses.total);
            let grads = tape.param_grads(&self.params, &grads);
            self.optimizer.step(&mut self.params, &grads);
            local.merge(&losses.local_stats);
            global.merge(&losses.global_stats);
        }
        Ok((local, global))
    }

    /// Losses on `tensors` with fixed noise and fixed false samples, so
    /// repeated calls agree exactly.
    pub fn validate(&self, tensors: &[&BondTensor]) -> Result<(LevelStats, LevelStats)> {
        validate_model(
            &self.model,
            &self.params,
            &self.config,
            &self.scaler,
            self.table,
            tensors,
        )
    }

    pub fn checkpoint(&self, trained_on: &[String], epochs_completed: usize) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: CheckpointKind::Dim,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            seed: self.config.train.seed,
            epochs_completed,
            trained_on: trained_on.to_vec(),
            params: self.params.to_records(),
        }
    }
}

/// Validation losses of `model` on `tensors`.
pub fn validate_model(
    model: &DimModel,
    params: &Params,
    config: &PretrainConfig,
    scaler: &FeatureScaler,
    table: &ElementPropertyTable,
    tensors: &[&BondTensor],
) -> Result<(LevelStats, LevelStats)> {
    let sizes: Vec<usize> = tensors.iter().map(|t| t.num_sites()).collect();
    let order: Vec<usize> = (0..tensors.len()).collect();
    let mut rng = stream(config.train.seed, VALIDATION_STREAM);
    let mut noise = stream(config.train.seed ^ 1, VALIDATION_STREAM);
    let mut local = LevelStats::default();
    let mut global = LevelStats::default();
    for batch_ids in pack_batches(&sizes, &order, config.train.batch_budget) {
        let members: Vec<&BondTensor> = batch_ids.iter().map(|&k| tensors[k]).collect();
        let batch = build_dim_batch(&members, &config.dim, scaler, table, &mut rng)?;
        let mut tape = Tape::new();
        let losses = model.losses(&mut tape, params, &batch, &config.dim, &mut noise, &mut rng)?;
        local.merge(&losses.local_stats);
        global.merge(&losses.global_stats);
    }
    Ok((local, global))
}

fn write_log_line(log: &mut Option<fs::File>, value: &serde_json::Value) -> Result<()> {
    if let Some(f) = log {
        serde_json::to_writer(&mut *f, value)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains on `tensors` (ids in `ids`), holding out a seeded validation
/// fraction. Early stopping keeps the parameters of the best summed
/// validation InfoMax loss.
pub fn pretrain(
    ids: &[String],
    tensors: &[BondTensor],
    config: &PretrainConfig,
    table: &ElementPropertyTable,
    outputs: &PretrainOutputs,
) -> Result<PretrainOutcome> {
    config.validate()?;
    assert_eq!(ids.len(), tensors.len());
    if tensors.len() < 4 {
        return Err(Error::Sampling(format!(
            "pretraining needs at least 4 crystals, got {}",
            tensors.len()
        )));
    }
    let index: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let (mut train_ids, mut val_ids) = split_fraction(ids, config.train.validation_fraction, {
        let mut r = stream(config.train.seed, SPLIT_STREAM);
        rand::Rng::random(&mut r)
    });
    while val_ids.len() < 2 {
        val_ids.push(train_ids.pop().expect("at least four ids"));
    }
    let pick = |set: &[String]| -> Vec<&BondTensor> {
        set.iter().map(|id| &tensors[index[id.as_str()]]).collect()
    };
    let train_set = pick(&train_ids);
    let val_set = pick(&val_ids);
    let scaler = FeatureScaler::fit(&train_set.iter().map(|t| (*t).clone()).collect::<Vec<_>>());
    let mut trainer = Pretrainer::new(config, scaler, table)?;
    let mut log = match &outputs.log {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };

    let mut curves = TrainingCurves::default();
    let mut best = (f64::INFINITY, 0usize, trainer.params.clone());
    let mut last_validation = (LevelStats::default(), LevelStats::default());
    let mut since_best = 0;
    for epoch in 1..=config.train.max_epochs {
        let started = Instant::now();
        let (tl, tg) = match trainer.train_epoch(&train_set, epoch) {
            Ok(v) => v,
            Err(Error::Divergence { epoch, loss, .. }) => {
                let path = outputs
                    .checkpoint
                    .as_ref()
                    .map(|p| p.with_extension("diverged.json"))
                    .unwrap_or_else(|| std::env::temp_dir().join("crystal-infomax-diverged.json"));
                trainer.checkpoint(ids, epoch - 1).save(&path)?;
                return Err(Error::Divergence {
                    epoch,
                    loss,
                    checkpoint: path,
                });
            }
            Err(e) => return Err(e),
        };
        let (vl, vg) = trainer.validate(&val_set)?;
        let record = EpochRecord {
            epoch,
            train_local_dim: tl.js,
            train_global_dim: tg.js,
            local_dim: vl.js,
            global_dim: vg.js,
            local_kl: vl.kl,
            global_kl: vg.kl,
            local_in_batch_accuracy: vl.in_batch_accuracy(),
            global_in_batch_accuracy: vg.in_batch_accuracy(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: local {:.4} global {:.4} (kl {:.4} / {:.4}) in {:.1}s",
            record.local_dim,
            record.global_dim,
            record.local_kl,
            record.global_kl,
            record.seconds
        );
        write_log_line(
            &mut log,
            &serde_json::json!({
                "epoch": epoch,
                "record": &record,
                "train": {"local": &tl, "global": &tg},
                "validation": {"local": &vl, "global": &vg},
            }),
        )?;
        let monitored = vl.js + vg.js;
        curves.records.push(record);
        last_validation = (vl, vg);
        if monitored < best.0 {
            best = (monitored, epoch, trainer.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.train.patience {
                log::info!("early stop at epoch {epoch}, best epoch {}", best.1);
                break;
            }
        }
    }
    let epochs_completed = curves.records.len();
    trainer.params = best.2;
    let checkpoint = trainer.checkpoint(ids, epochs_completed);
    if let Some(p) = &outputs.checkpoint {
        checkpoint.save(p)?;
    }
    if let (Some(csv), Some(png)) = (&outputs.curves_csv, &outputs.curves_png) {
        curves.export(csv, png)?;
    } else if let Some(csv) = &outputs.curves_csv {
        fs::write(csv, curves.to_csv())?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        curves,
        best_epoch: best.1,
        train_ids,
        validation_ids: val_ids,
        validation: last_validation,
    })
}
