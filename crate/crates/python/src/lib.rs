//! Python bindings. Matrices cross the boundary as lists of rows; datasets
//! and features as lists of samples.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use xmoco::config::RunConfig;
use xmoco::data::make_blobs as blobs;
use xmoco::eval::knn_eval as knn;
use xmoco::experiment::train_and_eval;
use xmoco::gradcheck::{run_gradcheck, GradcheckOptions};
use xmoco::loss::xmoco_loss_with;
use xmoco::probability::get_prob;
use xmoco::pseudolabel::sinkhorn_labels as labels;
use xmoco::{Error, Mat};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::Io { .. } | Error::Stream(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(to_py)
}

fn samples(columns: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_columns(&columns).map_err(to_py)
}

/// Peer probabilities `(K+1) × N` for queries `d × N`, current keys `d × N`
/// and a bank `d × K`, all given as lists of rows.
#[pyfunction]
fn peer_probabilities(
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    bank: Vec<Vec<f64>>,
    tau: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let p = get_prob(&mat(queries)?, &mat(keys)?, &mat(bank)?, tau).map_err(to_py)?;
    Ok(p.into_inner().to_rows())
}

/// Pseudo-labels for a `(K+1) × N` probability matrix.
#[pyfunction]
#[pyo3(signature = (p, xi=0.9, lambda_=2.0, iters=3))]
fn sinkhorn_labels(
    p: Vec<Vec<f64>>,
    xi: f64,
    lambda_: f64,
    iters: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let y = labels(&mat(p)?, xi, lambda_, iters).map_err(to_py)?;
    Ok(y.y().to_rows())
}

/// Loss value, its four terms and the logit gradients.
#[pyfunction]
#[pyo3(signature = (ps, pt, ys, yt, xsim_reg=true))]
fn xmoco_loss<'py>(
    py: Python<'py>,
    ps: Vec<Vec<f64>>,
    pt: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    yt: Vec<Vec<f64>>,
    xsim_reg: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let r = xmoco_loss_with(&mat(ps)?, &mat(pt)?, &mat(ys)?, &mat(yt)?, xsim_reg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("total", r.total)?;
    d.set_item("term_label_s_on_pt", r.term_label_s_on_pt)?;
    d.set_item("term_label_t_on_ps", r.term_label_t_on_ps)?;
    d.set_item("term_xsim_s_on_pt", r.term_xsim_s_on_pt)?;
    d.set_item("term_xsim_t_on_ps", r.term_xsim_t_on_ps)?;
    d.set_item("grad_logits_s", r.grad_logits_s.to_rows())?;
    d.set_item("grad_logits_t", r.grad_logits_t.to_rows())?;
    Ok(d)
}

/// Gaussian blobs as `(samples, labels)`.
#[pyfunction]
#[pyo3(signature = (classes=3, per_class=400, d_in=16, separation=6.0, seed=0))]
fn make_blobs(
    classes: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = blobs(classes, per_class, d_in, separation, seed).map_err(to_py)?;
    Ok((ds.samples.transpose().to_rows(), ds.labels))
}

/// Cosine k-NN accuracy on unit-norm features.
#[pyfunction]
#[pyo3(signature = (train_features, train_labels, test_features, test_labels, k=5))]
fn knn_eval(
    train_features: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    test_features: Vec<Vec<f64>>,
    test_labels: Vec<usize>,
    k: usize,
) -> PyResult<f64> {
    knn(
        &samples(train_features)?,
        &train_labels,
        &samples(test_features)?,
        &test_labels,
        k,
    )
    .map_err(to_py)
}

/// Finite-difference gradient check; returns the worst relative error and
/// whether it is below tolerance.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=20))]
fn gradcheck(seed: u64, instances: usize) -> PyResult<(f64, bool)> {
    let r = run_gradcheck(&GradcheckOptions {
        seed,
        instances,
        ..GradcheckOptions::default()
    })
    .map_err(to_py)?;
    Ok((r.worst_rel_error, r.passed))
}

/// The resolved default configuration as `key -> value` strings.
#[pyfunction]
fn default_config() -> Vec<(String, String)> {
    RunConfig::default()
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn config_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(d) = overrides {
        // canonical order, so batch_size is applied before base_lr
        for key in RunConfig::KEYS {
            if let Some(v) = d.get_item(key)? {
                let text = v.str()?.to_string();
                let text = match text.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => text
                        .trim_matches(|c| c == '[' || c == ']' || c == '(' || c == ')')
                        .replace(' ', ""),
                };
                cfg.set(key, &text).map_err(PyValueError::new_err)?;
            }
        }
        for k in d.keys() {
            let k: String = k.extract()?;
            if !RunConfig::KEYS.contains(&k.as_str()) {
                return Err(PyValueError::new_err(format!("unknown key '{k}'")));
            }
        }
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Trains on generated blobs with keyword overrides of the default
/// configuration and returns the evaluation report.
#[pyfunction]
#[pyo3(signature = (probe=false, **overrides))]
fn train<'py>(
    py: Python<'py>,
    probe: bool,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(overrides)?;
    let r = py.detach(|| train_and_eval(&cfg, probe)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("knn_accuracy", r.report.knn_accuracy)?;
    d.set_item("linear_accuracy", r.report.linear_accuracy)?;
    d.set_item(
        "epoch_losses",
        r.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
    )?;
    d.set_item("steps", r.state.step)?;
    Ok(d)
}

#[pymodule]
fn xmoco_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(peer_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_labels, m)?)?;
    m.add_function(wrap_pyfunction!(xmoco_loss, m)?)?;
    m.add_function(wrap_pyfunction!(make_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(knn_eval, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
