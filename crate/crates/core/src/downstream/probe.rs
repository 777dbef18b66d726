//! Frozen-representation probes: least squares and a one-hidden-layer
//! rectifier network.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, Mat, Mlp, MlpStyle, Params, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp64,
}

/// Least-squares fit with intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
    /// The centered design matrix had rank below its column count; the
    /// minimum-norm solution was used.
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn fit(x: &Array2<f64>, y: &[f64]) -> Result<Self> {
        let (n, d) = x.dim();
        if n != y.len() || n == 0 {
            return Err(Error::Parameter(format!("{n} rows for {} labels", y.len())));
        }
        let mean_x = x.mean_axis(Axis(0)).expect("non-empty");
        let mean_y = y.iter().sum::<f64>() / n as f64;
        let a = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean_x[j]);
        let b = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
        let svd = a.svd(true, true);
        let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let tol = s_max * (n.max(d) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        let w = svd.solve(&b, tol).map_err(|e| Error::Numeric {
            id: "linear probe".into(),
            message: e.to_string(),
        })?;
        let weights = Array1::from_iter(w.iter().copied());
        let intercept = mean_y - mean_x.dot(&weights);
        Ok(LinearModel {
            weights,
            intercept,
            rank_deficient: rank < d,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        x.dot(&self.weights)
            .iter()
            .map(|v| v + self.intercept)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpProbeConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for MlpProbeConfig {
    fn default() -> Self {
        MlpProbeConfig {
            hidden: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            max_epochs: 3000,
            patience: 200,
            validation_fraction: 0.1,
        }
    }
}

/// One hidden rectifier layer trained full-batch on squared error, with
/// inputs and targets standardized on the training rows.
#[derive(Clone, Debug)]
pub struct MlpProbe {
    params: Params,
    net: Mlp,
    x_mean: Array1<f64>,
    x_std: Array1<f64>,
    y_mean: f64,
    y_std: f64,
}

fn standardize(x: &Array2<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> Mat {
    (x - mean) / std
}

impl MlpProbe {
    pub fn fit(x: &Array2<f64>, y: &[f64], config: &MlpProbeConfig, seed: u64) -> Result<Self> {
        let (n, d) = x.dim();
        if n != y.len() || n < 2 {
            return Err(Error::Parameter(format!("{n} rows for {} labels", y.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
        let x_std = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let y_arr = Array1::from(y.to_vec());
        let y_mean = y_arr.mean().expect("non-empty");
        let y_std = Some(y_arr.std(0.0)).filter(|s| *s > 1e-12).unwrap_or(1.0);
        let xs = standardize(x, &x_mean, &x_std);
        let ys = (&y_arr - y_mean) / y_std;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
        let (val_rows, fit_rows) = order.split_at(n_val);
        let take = |rows: &[usize]| {
            (
                xs.select(Axis(0), rows),
                Mat::from_shape_fn((rows.len(), 1), |(i, _)| ys[rows[i]]),
            )
        };
        let (x_fit, y_fit) = take(fit_rows);
        let (x_val, y_val) = take(val_rows);

        let mut params = Params::new();
        let style = MlpStyle {
            activation: Activation::Relu,
            layer_norm: false,
            activate_last: false,
            last_gain: 1.0,
        };
        let net = Mlp::new(
            &mut params,
            "probe",
            d,
            &[config.hidden, 1],
            style,
            &mut rng,
        );
        let mut opt = AdamW::new(&params, config.learning_rate, config.weight_decay);
        let mse = |params: &Params, x: &Mat, y: &Mat| -> (Tape, crate::nn::Var) {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let yi = tape.constant(y.clone());
            let pred = net.forward(&mut tape, params, xi);
            let diff = tape.sub(pred, yi);
            let sq = tape.square(diff);
            let loss = tape.mean_all(sq);
            (tape, loss)
        };
        let mut best = (f64::INFINITY, params.clone());
        let mut since = 0;
        for _ in 0..config.max_epochs {
            let (tape, loss) = mse(&params, &x_fit, &y_fit);
            let grads = tape.backward(loss);
            let grads = tape.param_grads(&params, &grads);
            opt.step(&mut params, &grads);
            let (vt, vl) = mse(&params, &x_val, &y_val);
            let v = vt.scalar(vl);
            if !v.is_finite() {
                break;
            }
            if v < best.0 {
                best = (v, params.clone());
                since = 0;
            } else {
                since += 1;
                if since >= config.patience {
                    break;
                }
            }
        }
        Ok(MlpProbe {
            params: best.1,
            net,
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let xi = tape.constant(standardize(x, &self.x_mean, &self.x_std));
        let pred = self.net.forward(&mut tape, &self.params, xi);
        tape.value(pred)
            .iter()
            .map(|v| v * self.y_std + self.y_mean)
            .collect()
    }
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// Fits `kind` on `(x_train, y_train)` and returns the test MAE and whether
/// the linear fit was rank deficient.
pub fn fit_and_score(
    kind: ProbeKind,
    x_train: &Array2<f64>,
    y_train: &[f64],
    x_test: &Array2<f64>,
    y_test: &[f64],
    config: &MlpProbeConfig,
    seed: u64,
) -> Result<(f64, bool)> {
    if y_train.len() < 10 {
        return Err(Error::Parameter(format!(
            "probes need at least 10 labels, got {}",
            y_train.len()
        )));
    }
    match kind {
        ProbeKind::Linear => {
            let m = LinearModel::fit(x_train, y_train)?;
            if m.rank_deficient {
                log::debug!("linear probe is rank deficient; using the minimum-norm solution");
            }
            Ok((
                mean_absolute_error(&m.predict(x_test), y_test),
                m.rank_deficient,
            ))
        }
        ProbeKind::Mlp64 => {
            let m = MlpProbe::fit(x_train, y_train, config, seed)?;
            Ok((mean_absolute_error(&m.predict(x_test), y_test), false))
        }
    }
}
