//! End-to-end runs on generated blobs and the one-axis ablation sweeps built
//! on them.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::config::{DataConfig, EvalConfig, RunConfig};
use crate::data::{make_blobs, Dataset};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{embed, knn_eval, linear_probe, EvalReport};
use crate::loss::LossSwitches;
use crate::training::{run, EpochMetrics, RunOptions, TrainState};

/// Blobs from the data settings, split into `(train, test)`.
pub fn prepare_data(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    let ds = make_blobs(
        data.classes,
        data.per_class,
        data.d_in,
        data.separation,
        data.data_seed,
    )?;
    ds.split(data.test_fraction, data.data_seed)
}

pub fn knn_accuracy(
    params: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
) -> Result<f64> {
    let a = embed(params, &train.samples, eval.penultimate)?;
    let b = embed(params, &test.samples, eval.penultimate)?;
    knn_eval(&a, &train.labels, &b, &test.labels, eval.knn_k)
}

pub fn probe_accuracy(
    params: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
) -> Result<f64> {
    let a = embed(params, &train.samples, eval.penultimate)?;
    let b = embed(params, &test.samples, eval.penultimate)?;
    Ok(linear_probe(
        &a,
        &train.labels,
        &b,
        &test.labels,
        eval.probe_steps,
        eval.probe_lr,
    )?
    .accuracy)
}

pub struct ExperimentResult {
    pub report: EvalReport,
    pub state: TrainState,
    pub epochs: Vec<EpochMetrics>,
}

/// Generate, train, then score the frozen query encoder with k-NN (and the
/// linear probe when `probe` is set).
pub fn train_and_eval(cfg: &RunConfig, probe: bool) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train, test) = prepare_data(&cfg.data)?;
    let outcome = run(&cfg.train, &train, None, RunOptions::default())?;
    let f = &outcome.state.pair.f;
    let knn = knn_accuracy(f, &train, &test, &cfg.eval)?;
    let linear = if probe {
        Some(probe_accuracy(f, &train, &test, &cfg.eval)?)
    } else {
        None
    };
    Ok(ExperimentResult {
        report: EvalReport {
            knn_accuracy: Some(knn),
            linear_accuracy: linear,
            k: cfg.eval.knn_k,
            train_size: train.len(),
            test_size: test.len(),
        },
        state: outcome.state,
        epochs: outcome.epochs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Xi,
    BankSize,
    LossSwitches,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xi" => Ok(Self::Xi),
            "K" | "k" | "bank_size" => Ok(Self::BankSize),
            "loss-switches" => Ok(Self::LossSwitches),
            _ => Err(Error::param(
                "axis",
                format!("expected xi, K or loss-switches, got {s:?}"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Xi => "xi",
            Self::BankSize => "K",
            Self::LossSwitches => "loss-switches",
        }
    }
}

/// One configuration per value; `values` is ignored for the switch grid,
/// which always yields its four cells.
pub fn ablation_configs(
    base: &RunConfig,
    axis: AblationAxis,
    values: &[String],
) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::LossSwitches => {
            for switches in LossSwitches::grid() {
                let mut cfg = base.clone();
                cfg.train.switches = switches;
                out.push((switches.label().to_string(), cfg));
            }
        }
        AblationAxis::Xi | AblationAxis::BankSize => {
            if values.is_empty() {
                return Err(Error::param("values", "need at least one value"));
            }
            let key = if axis == AblationAxis::Xi {
                "xi"
            } else {
                "bank_size"
            };
            for v in values {
                let mut cfg = base.clone();
                cfg.set(key, v)
                    .map_err(|reason| Error::param("values", reason))?;
                out.push((v.trim().to_string(), cfg));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    /// Median over seeds of the k-NN accuracy.
    pub knn_accuracy: Option<f64>,
    pub seed_accuracies: Vec<f64>,
    pub wall_time: f64,
    pub error: Option<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every configuration sequentially for seeds `seed, seed+1, …`. A
/// failing run is recorded on its row and the sweep continues.
pub fn run_ablation(configs: &[(String, RunConfig)], seeds: usize) -> Vec<AblationRow> {
    configs
        .iter()
        .map(|(value, cfg)| {
            let start = Instant::now();
            let mut accs = Vec::with_capacity(seeds);
            let mut error = None;
            for i in 0..seeds.max(1) {
                let mut c = cfg.clone();
                c.train.seed = cfg.train.seed + i as u64;
                match train_and_eval(&c, false) {
                    Ok(r) => accs.push(r.report.knn_accuracy.expect("k-NN always runs")),
                    Err(e) => {
                        log::warn!("ablation value {value} seed {}: {e}", c.train.seed);
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            AblationRow {
                value: value.clone(),
                knn_accuracy: if error.is_none() {
                    Some(median(accs.clone()))
                } else {
                    None
                },
                seed_accuracies: accs,
                wall_time: start.elapsed().as_secs_f64(),
                error,
            }
        })
        .collect()
}

/// CSV table `value,knn_accuracy,wall_time,error`, preceded by `# `-prefixed
/// header lines. `wall_time` is the only nondeterministic column; pass
/// `timing = false` to write it as empty.
pub fn write_ablation_csv<W: Write>(
    w: W,
    header: &[String],
    rows: &[AblationRow],
    timing: bool,
) -> Result<()> {
    let mut w = w;
    for line in header {
        writeln!(w, "# {line}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format {
        what: "csv output",
        reason: e.to_string(),
    };
    out.write_record(["value", "knn_accuracy", "wall_time", "error"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.value.clone(),
            r.knn_accuracy.map_or(String::new(), |a| a.to_string()),
            if timing {
                format!("{:.3}", r.wall_time)
            } else {
                String::new()
            },
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
