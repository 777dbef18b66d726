use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Index of a tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

/// Serialized form of one tensor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weights scaled by `gain`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.iter()
            .map(|(_, name, v)| {
                (
                    name.to_owned(),
                    TensorRecord {
                        shape: [v.nrows(), v.ncols()],
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every tensor whose name appears in `records` with a
    /// matching shape. Returns the names that were copied.
    pub fn load_matching(
        &mut self,
        records: &BTreeMap<String, TensorRecord>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>, String> {
        let mut copied = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            if !filter(name) {
                continue;
            }
            let Some(rec) = records.get(name) else {
                continue;
            };
            let shape = (rec.shape[0], rec.shape[1]);
            if shape != self.values[i].dim() {
                return Err(format!(
                    "parameter {name}: stored shape {:?} does not match {:?}",
                    shape,
                    self.values[i].dim()
                ));
            }
            self.values[i] = Array2::from_shape_vec(shape, rec.data.clone())
                .map_err(|e| format!("parameter {name}: {e}"))?;
            copied.push(name.clone());
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, name, v) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update((v.nrows() as u64).to_le_bytes());
            hasher.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &Params, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, _, v)| Array2::zeros(v.dim()))
            .collect();
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.values[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p -= lr * self.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
