//! Train/test partitions, label masking and descriptor standardization.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elements::DESCRIPTOR_COUNT;
use super::supercell::BondTensor;
use crate::error::{Error, Result};

/// Label availabilities used by the benchmark harness.
pub const LABEL_AVAILABILITIES: [usize; 4] = [50, 100, 250, 1000];

/// Fraction of ids held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Deterministic 80/20 partition. Both halves keep the input order.
pub fn split_train_test(ids: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    split_fraction(ids, TEST_FRACTION, seed)
}

/// Deterministic partition holding out `round(fraction · n)` ids.
pub fn split_fraction(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n = ids.len();
    let n_out = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: BTreeSet<usize> = order[..n_out].iter().copied().collect();
    let mut keep = Vec::with_capacity(n - n_out);
    let mut out = Vec::with_capacity(n_out);
    for (i, id) in ids.iter().enumerate() {
        if held.contains(&i) {
            out.push(id.clone());
        } else {
            keep.push(id.clone());
        }
    }
    (keep, out)
}

/// Seeded record of which training labels are visible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedDataset {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub visible_label_ids: Vec<String>,
    pub n_labels: usize,
    pub seed: u64,
}

impl MaskedDataset {
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Uniform sample of `n_labels` training ids without replacement.
pub fn mask_labels(train_ids: &[String], n_labels: usize, seed: u64) -> Result<MaskedDataset> {
    if n_labels > train_ids.len() {
        return Err(Error::Capacity(format!(
            "{n_labels} labels requested from {} training ids",
            train_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, train_ids.len(), n_labels).into_vec();
    picked.sort_unstable();
    Ok(MaskedDataset {
        train_ids: train_ids.to_vec(),
        test_ids: Vec::new(),
        visible_label_ids: picked.into_iter().map(|i| train_ids[i].clone()).collect(),
        n_labels,
        seed,
    })
}

/// Per-dimension z-score over the nine site descriptors and the distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub site_mean: Vec<f64>,
    pub site_std: Vec<f64>,
    pub distance_mean: f64,
    pub distance_std: f64,
}

impl FeatureScaler {
    pub fn identity() -> Self {
        FeatureScaler {
            site_mean: vec![0.0; DESCRIPTOR_COUNT],
            site_std: vec![1.0; DESCRIPTOR_COUNT],
            distance_mean: 0.0,
            distance_std: 1.0,
        }
    }

    /// Statistics over every site row and every pair distance in `tensors`.
    /// Constant dimensions get unit scale.
    pub fn fit(tensors: &[BondTensor]) -> Self {
        if tensors.is_empty() {
            return Self::identity();
        }
        let rows: usize = tensors.iter().map(|t| t.num_sites()).sum();
        let mut sites = Array2::zeros((rows, DESCRIPTOR_COUNT));
        let mut r = 0;
        for t in tensors {
            for row in t.site_features.rows() {
                sites.row_mut(r).assign(&row);
                r += 1;
            }
        }
        let site_mean = sites.mean_axis(Axis(0)).expect("non-empty");
        let site_std = sites.std_axis(Axis(0), 0.0);
        let dists: Array1<f64> = tensors
            .iter()
            .flat_map(|t| t.distances.iter().copied())
            .collect();
        let unit = |s: f64| if s > 1e-12 { s } else { 1.0 };
        FeatureScaler {
            site_mean: site_mean.to_vec(),
            site_std: site_std.iter().map(|s| unit(*s)).collect(),
            distance_mean: dists.mean().unwrap_or(0.0),
            distance_std: unit(dists.std(0.0)),
        }
    }

    pub fn transform_sites(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (f, v) in row.iter_mut().enumerate() {
                *v = (*v - self.site_mean[f]) / self.site_std[f];
            }
        }
        out
    }

    pub fn transform_distance(&self, d: f64) -> f64 {
        (d - self.distance_mean) / self.distance_std
    }
}
