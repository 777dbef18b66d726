//! Evaluation harness: representation extraction, probes, transfer learning
//! and the seeded benchmark matrix.

pub mod benchmark;
pub mod probe;
pub mod synthetic;
pub mod transfer;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{BondTensor, FeatureScaler};
use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::pretrain::{init_dim_model, pack_batches, Checkpoint, CheckpointKind, PretrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationSource {
    TrainedDim,
    UntrainedDim,
    ExternalBaseline,
}

impl RepresentationSource {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationSource::TrainedDim => "trained_dim",
            RepresentationSource::UntrainedDim => "untrained_dim",
            RepresentationSource::ExternalBaseline => "external",
        }
    }
}

/// One representation row per crystal id.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMatrix {
    pub ids: Vec<String>,
    pub x: Array2<f64>,
    pub source: RepresentationSource,
    /// Columns were standardized over the rows.
    pub normalized: bool,
}

impl RepresentationMatrix {
    /// Rows for `ids`, in that order.
    pub fn rows(&self, ids: &[String]) -> Result<Array2<f64>> {
        let index: BTreeMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let rows = ids
            .iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "no {} representation for id {id}",
                        self.source.name()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.x.select(Axis(0), &rows))
    }

    /// `id,x0,x1,...` with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..self.x.ncols()).map(|j| format!("x{j}")).collect();
        writeln!(out, "id,{}", header.join(","))?;
        for (id, row) in self.ids.iter().zip(self.x.rows()) {
            let values: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{id},{}", values.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads an id-to-vector file: one `id,v1,...,vd` line per crystal. A
    /// first line whose values do not parse as numbers is treated as a header.
    pub fn read_csv(path: &Path, source: RepresentationSource, normalized: bool) -> Result<Self> {
        let bad = |message: String| Error::Ingestion {
            path: path.to_owned(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let id = fields.next().unwrap_or_default().to_owned();
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = match values {
                Ok(v) => v,
                Err(_) if ids.is_empty() && width.is_none() => continue,
                Err(e) => return Err(bad(format!("line {}: {e}", n + 1))),
            };
            if values.is_empty() || *width.get_or_insert(values.len()) != values.len() {
                return Err(bad(format!(
                    "line {}: expected {} values",
                    n + 1,
                    width.unwrap_or(0)
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("line {}: non-finite value", n + 1)));
            }
            ids.push(id);
            data.extend(values);
        }
        let width = width.ok_or_else(|| bad("no rows".into()))?;
        let x = Array2::from_shape_vec((ids.len(), width), data).expect("rows checked");
        Ok(RepresentationMatrix {
            ids,
            x,
            source,
            normalized,
        })
    }
}

/// Global representations of `tensors`, batched by `budget` sites.
pub fn represent_batched(
    encoder: &Encoder,
    params: &Params,
    scaler: &FeatureScaler,
    tensors: &[&BondTensor],
    budget: usize,
) -> Result<Array2<f64>> {
    let sizes: Vec<usize> = tensors.iter().map(|t| t.num_sites()).collect();
    let order: Vec<usize> = (0..tensors.len()).collect();
    let mut x = Array2::zeros((tensors.len(), encoder.config.global_dim()));
    for batch in pack_batches(&sizes, &order, budget) {
        let members: Vec<&BondTensor> = batch.iter().map(|&k| tensors[k]).collect();
        let g = encoder.represent(params, &EncoderInput::new(&members, scaler)?);
        for (row, &k) in batch.iter().enumerate() {
            x.row_mut(k).assign(&g.row(row));
        }
    }
    Ok(x)
}

/// Raw representations from a pretrained InfoMax checkpoint.
pub fn extract_trained(
    checkpoint: &Checkpoint,
    ids: &[String],
    tensors: &[&BondTensor],
    budget: usize,
) -> Result<RepresentationMatrix> {
    if checkpoint.kind != CheckpointKind::Dim {
        return Err(Error::Config(
            "representations need an InfoMax checkpoint".into(),
        ));
    }
    let (params, model) = checkpoint.dim_model()?;
    let x = represent_batched(&model.encoder, &params, &checkpoint.scaler, tensors, budget)?;
    Ok(RepresentationMatrix {
        ids: ids.to_vec(),
        x,
        source: RepresentationSource::TrainedDim,
        normalized: false,
    })
}

/// Column-standardized representations of a freshly initialized model.
pub fn extract_untrained(
    config: &PretrainConfig,
    seed: u64,
    scaler: &FeatureScaler,
    ids: &[String],
    tensors: &[&BondTensor],
    budget: usize,
) -> Result<RepresentationMatrix> {
    let (params, model) = init_dim_model(config, seed)?;
    let x = represent_batched(&model.encoder, &params, scaler, tensors, budget)?;
    Ok(RepresentationMatrix {
        ids: ids.to_vec(),
        x: standardize_columns(&x),
        source: RepresentationSource::UntrainedDim,
        normalized: true,
    })
}

/// Zero mean and unit variance per column; constant columns become zero.
pub fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    if x.nrows() == 0 {
        return x.clone();
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (x - &mean) / &std
}

/// Fails if any id in `test_ids` appears among `training_ids`.
pub fn ensure_disjoint(training_ids: &[String], test_ids: &[String], context: &str) -> Result<()> {
    let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    let leaked: Vec<&str> = training_ids
        .iter()
        .map(String::as_str)
        .filter(|id| test.contains(id))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::TestLeak(format!(
            "{context}: {} test ids reached training, first {}",
            leaked.len(),
            leaked[0]
        )))
    }
}
