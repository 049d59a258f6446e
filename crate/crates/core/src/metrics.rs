//! Per-round metrics and their CSV files.
//!
//! `rounds.csv`: round, val_acc_real, val_acc_binary, val_loss, train_loss,
//! test_acc_binary, best_so_far, lr, n_clients.
//! `layers.csv`: round, layer, lambda, one_minus_alpha, alpha_times_beta,
//! alpha_times_one_minus_beta.
//! Floats are written with six significant digits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::MixParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMix {
    /// Index among the trainable layers.
    pub layer: usize,
    pub lambda: f64,
    pub one_minus_alpha: f64,
    pub alpha_times_beta: f64,
    pub alpha_times_one_minus_beta: f64,
}

impl LayerMix {
    pub fn from_params(layer: usize, mix: &MixParams, lambda_one: bool) -> Self {
        let (a, b) = (mix.alpha(), mix.beta());
        Self {
            layer,
            lambda: if lambda_one { 1.0 } else { mix.lambda() },
            one_minus_alpha: 1.0 - a,
            alpha_times_beta: a * b,
            alpha_times_one_minus_beta: a * (1.0 - b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub val_acc_real: f64,
    pub val_acc_binary: f64,
    pub val_loss: f64,
    pub train_loss: f64,
    pub test_acc_binary: Option<f64>,
    pub best_so_far: bool,
    pub lr: f64,
    pub n_clients: usize,
    pub per_layer: Vec<LayerMix>,
}

/// Validation results for one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundEval {
    pub val_acc_real: f64,
    pub val_acc_binary: f64,
    pub val_loss: f64,
}

/// Sample-weighted mean of each binarized layer's mixing coefficients.
///
/// `clients` holds each participant's per-layer parameters and sample count;
/// `binarized` marks the layers to report.
pub fn mean_layer_mix(clients: &[(&[MixParams], usize)], binarized: &[bool], lambda_one: bool) -> Vec<LayerMix> {
    let total: usize = clients.iter().map(|c| c.1).sum();
    binarized
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(j, _)| {
            let mut acc = LayerMix {
                layer: j,
                lambda: 0.0,
                one_minus_alpha: 0.0,
                alpha_times_beta: 0.0,
                alpha_times_one_minus_beta: 0.0,
            };
            for (mixes, n) in clients {
                let p = *n as f64 / total as f64;
                let m = LayerMix::from_params(j, &mixes[j], lambda_one);
                acc.lambda += p * m.lambda;
                acc.one_minus_alpha += p * m.one_minus_alpha;
                acc.alpha_times_beta += p * m.alpha_times_beta;
                acc.alpha_times_one_minus_beta += p * m.alpha_times_one_minus_beta;
            }
            acc
        })
        .collect()
}

/// Builds the record for one round; `prior_best` is the best
/// `val_acc_binary` of earlier rounds.
#[allow(clippy::too_many_arguments)]
pub fn record_round(
    round: usize,
    clients: &[(&[MixParams], usize)],
    binarized: &[bool],
    lambda_one: bool,
    eval: &RoundEval,
    train_loss: f64,
    lr: f64,
    prior_best: Option<f64>,
) -> MetricsRecord {
    MetricsRecord {
        round,
        val_acc_real: eval.val_acc_real,
        val_acc_binary: eval.val_acc_binary,
        val_loss: eval.val_loss,
        train_loss,
        test_acc_binary: None,
        best_so_far: prior_best.is_none_or(|b| eval.val_acc_binary > b),
        lr,
        n_clients: clients.len(),
        per_layer: mean_layer_mix(clients, binarized, lambda_one),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.5e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.to_path_buf(), io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

pub const ROUNDS_HEADER: [&str; 9] = [
    "round",
    "val_acc_real",
    "val_acc_binary",
    "val_loss",
    "train_loss",
    "test_acc_binary",
    "best_so_far",
    "lr",
    "n_clients",
];

pub const LAYERS_HEADER: [&str; 6] = [
    "round",
    "layer",
    "lambda",
    "one_minus_alpha",
    "alpha_times_beta",
    "alpha_times_one_minus_beta",
];

pub fn write_rounds_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(ROUNDS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt(r.val_acc_real),
            fmt(r.val_acc_binary),
            fmt(r.val_loss),
            fmt(r.train_loss),
            r.test_acc_binary.map(fmt).unwrap_or_default(),
            u8::from(r.best_so_far).to_string(),
            fmt(r.lr),
            r.n_clients.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn write_layers_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LAYERS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        for l in &r.per_layer {
            w.write_record([
                r.round.to_string(),
                l.layer.to_string(),
                fmt(l.lambda),
                fmt(l.one_minus_alpha),
                fmt(l.alpha_times_beta),
                fmt(l.alpha_times_one_minus_beta),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Writes `rounds.csv` and `layers.csv` into `dir`.
pub fn write_csv(records: &[MetricsRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_rounds_csv(records, dir.join("rounds.csv"))?;
    write_layers_csv(records, dir.join("layers.csv"))
}
