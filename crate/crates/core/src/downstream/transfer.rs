//! Supervised fine-tuning of the encoder plus prediction head, optionally
//! initialized from a pretrained or donor checkpoint.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BondTensor, FeatureScaler};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, SupervisedHead, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Mat, Params, Tape};
use crate::pretrain::{
    pack_batches, Checkpoint, CheckpointKind, PretrainConfig, CHECKPOINT_FORMAT_VERSION,
};

use super::probe::mean_absolute_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferInit {
    Random,
    DimCheckpoint,
    DonorSupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_budget: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            learning_rate: 8.12e-4,
            weight_decay: 0.01,
            batch_budget: 400,
            max_epochs: 200,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

/// Encoder plus post-pooling network and prediction layers.
#[derive(Clone, Debug)]
pub struct SupervisedModel {
    pub params: Params,
    pub encoder: Encoder,
    pub head: SupervisedHead,
    pub scaler: FeatureScaler,
    /// Targets are predicted in standardized units.
    pub target_mean: f64,
    pub target_std: f64,
}

impl SupervisedModel {
    /// Random initialization from `seed`; the head is always random.
    pub fn new(config: &EncoderConfig, scaler: FeatureScaler, seed: u64) -> Result<Self> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut params, config, &mut rng)?;
        let head = SupervisedHead::new(&mut params, config, &mut rng);
        Ok(SupervisedModel {
            params,
            encoder,
            head,
            scaler,
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    /// Builds the model for `init`. Pretrained variants copy every matching
    /// encoder tensor from `source` and reuse its feature scaler.
    pub fn initialize(
        init: TransferInit,
        config: &EncoderConfig,
        source: Option<&Checkpoint>,
        fallback_scaler: FeatureScaler,
        seed: u64,
    ) -> Result<Self> {
        let Some(ck) = source.filter(|_| init != TransferInit::Random) else {
            if init != TransferInit::Random {
                return Err(Error::Config(format!(
                    "{init:?} initialization needs a checkpoint"
                )));
            }
            return Self::new(config, fallback_scaler, seed);
        };
        if &ck.config.encoder != config {
            return Err(Error::Config(
                "checkpoint encoder configuration differs".into(),
            ));
        }
        let expected = match init {
            TransferInit::DimCheckpoint => CheckpointKind::Dim,
            _ => CheckpointKind::Supervised,
        };
        if ck.kind != expected {
            return Err(Error::Config(format!(
                "{init:?} initialization needs a {expected:?} checkpoint, got {:?}",
                ck.kind
            )));
        }
        let mut model = Self::new(config, ck.scaler.clone(), seed)?;
        let copied = model
            .params
            .load_matching(&ck.params, |name| !name.starts_with(HEAD_PREFIX))
            .map_err(Error::Checkpoint)?;
        if copied.is_empty() {
            return Err(Error::Checkpoint(
                "checkpoint shares no encoder parameters".into(),
            ));
        }
        Ok(model)
    }

    /// Predictions in label units, batched by `budget` sites.
    pub fn predict(&self, tensors: &[&BondTensor], budget: usize) -> Result<Vec<f64>> {
        let sizes: Vec<usize> = tensors.iter().map(|t| t.num_sites()).collect();
        let order: Vec<usize> = (0..tensors.len()).collect();
        let mut out = Vec::with_capacity(tensors.len());
        for batch in pack_batches(&sizes, &order, budget) {
            let members: Vec<&BondTensor> = batch.iter().map(|&k| tensors[k]).collect();
            let input = EncoderInput::new(&members, &self.scaler)?;
            let mut tape = Tape::new();
            let g = self
                .encoder
                .forward(&mut tape, &self.params, &input, false)
                .global;
            let y = self.head.forward(&mut tape, &self.params, g);
            out.extend(
                tape.value(y)
                    .iter()
                    .map(|v| v * self.target_std + self.target_mean),
            );
        }
        Ok(out)
    }

    pub fn checkpoint(
        &self,
        config: &PretrainConfig,
        seed: u64,
        trained_on: &[String],
    ) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: CheckpointKind::Supervised,
            config: config.clone(),
            scaler: self.scaler.clone(),
            seed,
            epochs_completed: 0,
            trained_on: trained_on.to_vec(),
            params: self.params.to_records(),
        }
    }
}

/// Fine-tunes every parameter on `(tensors, labels)` with a mean absolute
/// error objective, early-stopping on a seeded validation split.
pub fn fine_tune(
    model: &mut SupervisedModel,
    tensors: &[&BondTensor],
    labels: &[f64],
    config: &FineTuneConfig,
    seed: u64,
) -> Result<usize> {
    assert_eq!(tensors.len(), labels.len());
    let n = tensors.len();
    if n < 2 {
        return Err(Error::Parameter(
            "fine-tuning needs at least two labels".into(),
        ));
    }
    let mean = labels.iter().sum::<f64>() / n as f64;
    let std = (labels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    model.target_mean = mean;
    model.target_std = if std > 1e-12 { std } else { 1.0 };
    if config.max_epochs == 0 {
        return Ok(0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_rows, fit_rows) = order.split_at(n_val);
    let val_tensors: Vec<&BondTensor> = val_rows.iter().map(|&k| tensors[k]).collect();
    let val_labels: Vec<f64> = val_rows.iter().map(|&k| labels[k]).collect();
    let mut fit_rows = fit_rows.to_vec();
    let sizes: Vec<usize> = tensors.iter().map(|t| t.num_sites()).collect();

    let mut opt = AdamW::new(&model.params, config.learning_rate, config.weight_decay);
    let mut best = (
        mean_absolute_error(
            &model.predict(&val_tensors, config.batch_budget)?,
            &val_labels,
        ),
        model.params.clone(),
    );
    let mut since = 0;
    let mut epochs = 0;
    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        fit_rows.shuffle(&mut rng);
        for batch in pack_batches(&sizes, &fit_rows, config.batch_budget) {
            let members: Vec<&BondTensor> = batch.iter().map(|&k| tensors[k]).collect();
            let target = Mat::from_shape_fn((batch.len(), 1), |(i, _)| {
                (labels[batch[i]] - model.target_mean) / model.target_std
            });
            let input = EncoderInput::new(&members, &model.scaler)?;
            let mut tape = Tape::new();
            let g = model
                .encoder
                .forward(&mut tape, &model.params, &input, false)
                .global;
            let pred = model.head.forward(&mut tape, &model.params, g);
            let y = tape.constant(target);
            let diff = tape.sub(pred, y);
            let abs = tape.abs(diff);
            let loss = tape.mean_all(abs);
            let value = tape.scalar(loss);
            if !value.is_finite() || value > 1e6 {
                return Err(Error::Divergence {
                    epoch,
                    loss: value,
                    checkpoint: Default::default(),
                });
            }
            let grads = tape.backward(loss);
            let grads = tape.param_grads(&model.params, &grads);
            opt.step(&mut model.params, &grads);
        }
        let v = mean_absolute_error(
            &model.predict(&val_tensors, config.batch_budget)?,
            &val_labels,
        );
        if v < best.0 {
            best = (v, model.params.clone());
            since = 0;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok(epochs)
}

/// Looks up tensors and labels for `ids`.
pub fn gather<'a>(
    ids: &[String],
    tensors: &'a BTreeMap<String, BondTensor>,
    labels: &BTreeMap<String, f64>,
) -> Result<(Vec<&'a BondTensor>, Vec<f64>)> {
    let mut ts = Vec::with_capacity(ids.len());
    let mut ys = Vec::with_capacity(ids.len());
    for id in ids {
        ts.push(
            tensors
                .get(id)
                .ok_or_else(|| Error::Config(format!("no structure for id {id}")))?,
        );
        ys.push(
            *labels
                .get(id)
                .ok_or_else(|| Error::Config(format!("no label for id {id}")))?,
        );
    }
    Ok((ts, ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_bond_tensor, build_supercell, ElementPropertyTable};
    use crate::downstream::synthetic::toy_corpus;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            site_embed_dim: 8,
            interaction_embed_dim: 8,
            attention_weights_net: vec![8],
            local_env_dim: 8,
            pre_pooling_net: vec![8, 16],
            post_pooling_net: vec![8],
            head_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched_and_fitting_lowers_error() {
        let table = ElementPropertyTable::bundled();
        let corpus = toy_corpus(40, 2, table).unwrap();
        let tensors: Vec<BondTensor> = corpus
            .iter()
            .map(|s| build_bond_tensor(&build_supercell(s, 8, table).unwrap()))
            .collect();
        let refs: Vec<&BondTensor> = tensors.iter().collect();
        let labels: Vec<f64> = corpus.iter().map(|s| s.label.unwrap()).collect();
        let scaler = FeatureScaler::fit(&tensors);
        let cfg = small_config();

        let mut frozen = SupervisedModel::new(&cfg, scaler.clone(), 1).unwrap();
        let before = frozen.params.digest();
        let none = FineTuneConfig {
            max_epochs: 0,
            ..Default::default()
        };
        fine_tune(&mut frozen, &refs, &labels, &none, 1).unwrap();
        assert_eq!(frozen.params.digest(), before);

        let mut model = SupervisedModel::new(&cfg, scaler, 1).unwrap();
        let start = mean_absolute_error(&model.predict(&refs, 100).unwrap(), &labels);
        let tune = FineTuneConfig {
            max_epochs: 30,
            learning_rate: 3e-3,
            batch_budget: 80,
            ..Default::default()
        };
        fine_tune(&mut model, &refs, &labels, &tune, 1).unwrap();
        let end = mean_absolute_error(&model.predict(&refs, 100).unwrap(), &labels);
        assert!(end < start, "{end} >= {start}");
    }

    #[test]
    fn pretrained_init_requires_checkpoint() {
        let err = SupervisedModel::initialize(
            TransferInit::DimCheckpoint,
            &small_config(),
            None,
            FeatureScaler::identity(),
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
