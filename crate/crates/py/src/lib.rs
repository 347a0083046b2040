//! Python bindings. Structured results cross the boundary as JSON text.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use projbnn::data::{gen_sine_tasks, gen_toy_four_modes, gen_toy_latent_rbf, Dataset};
use projbnn::nn::Matrix;
use projbnn::pipeline::{evaluate_stored, run_pipeline, Overrides, RunConfig};
use projbnn::vi::{MeanFieldGaussian, PriorSpec};

fn to_py(e: projbnn::Error) -> PyErr {
    match e {
        projbnn::Error::Config(_) | projbnn::Error::InvalidArgument(_) | projbnn::Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Generated dataset as `{"x": [[..]], "y": [[..]], "labels": [..] | null}`.
/// Labels are the mode of each row for `four-modes` and the task for `sine`.
pub fn generate(kind: &str, seed: u64, tasks: usize, points: usize) -> projbnn::Result<String> {
    let (data, labels): (Dataset, Option<Vec<usize>>) = match kind {
        "toy-rbf" => (gen_toy_latent_rbf(seed)?.data, None),
        "four-modes" => {
            let t = gen_toy_four_modes(seed)?;
            (t.data, Some(t.labels))
        }
        "sine" => {
            let set = gen_sine_tasks(tasks, points, seed)?;
            let parts = set.datasets();
            let labels = parts.iter().enumerate().flat_map(|(t, d)| std::iter::repeat_n(t, d.len())).collect();
            (Dataset::concat("sine", &parts)?, Some(labels))
        }
        other => {
            return Err(projbnn::Error::InvalidArgument(format!(
                "unknown dataset kind `{other}` (expected toy-rbf, four-modes or sine)"
            )))
        }
    };
    let doc = serde_json::json!({ "x": rows(&data.x), "y": rows(&data.y), "labels": labels });
    Ok(doc.to_string())
}

/// Runs the pipeline from JSON config text (or defaults) and returns the metrics document.
pub fn pipeline(
    config_json: Option<&str>,
    seed: Option<u64>,
    scale: Option<f64>,
    method: Option<&str>,
    out: Option<PathBuf>,
) -> projbnn::Result<String> {
    let mut cfg: RunConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| projbnn::Error::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed,
        scale,
        out,
        method: method.map(str::parse).transpose()?,
        ..Overrides::default()
    });
    cfg.validate()?;
    let outcome = run_pipeline(&cfg, &mut |_| {})?;
    Ok(serde_json::to_string(&outcome.metrics)?)
}

#[pyfunction]
#[pyo3(signature = (kind, seed = 0, tasks = 8, points = 50))]
fn gen_data(kind: &str, seed: u64, tasks: usize, points: usize) -> PyResult<String> {
    generate(kind, seed, tasks, points).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (config_json = None, seed = None, scale = None, method = None, out = None))]
fn run(
    py: Python<'_>,
    config_json: Option<String>,
    seed: Option<u64>,
    scale: Option<f64>,
    method: Option<String>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    py.detach(|| pipeline(config_json.as_deref(), seed, scale, method.as_deref(), out))
        .map_err(to_py)
}

/// Metrics JSON for a stored model on a CSV, every row.
#[pyfunction]
#[pyo3(signature = (model_path, data_path, samples = 500))]
fn evaluate(py: Python<'_>, model_path: PathBuf, data_path: PathBuf, samples: usize) -> PyResult<String> {
    py.detach(|| {
        let m = evaluate_stored(&model_path, &data_path, None, samples)?;
        Ok(serde_json::to_string(&m)?)
    })
    .map_err(to_py)
}

#[pyfunction]
fn logmeanexp(values: Vec<f64>) -> f64 {
    projbnn::eval::logmeanexp(&values)
}

/// Mean over points of logmeanexp over samples; `log_lik[n][s]`.
#[pyfunction]
fn marginal_test_ll(log_lik: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = Matrix::from_rows(&log_lik).map_err(to_py)?;
    projbnn::eval::marginal_test_ll(&m).map_err(to_py)
}

#[pyfunction]
fn cyclic_lr(t: usize, cycle_len: usize, lr_max: f64, lr_min: f64) -> PyResult<f64> {
    projbnn::ensemble::cyclic_lr(t, cycle_len, lr_max, lr_min).map_err(to_py)
}

/// KL from a diagonal Gaussian to a zero-mean isotropic prior with the given variance.
#[pyfunction]
fn kl_gaussian_diag(mu: Vec<f64>, log_std: Vec<f64>, prior_variance: f64) -> PyResult<f64> {
    let q = MeanFieldGaussian::new(mu, log_std).map_err(to_py)?;
    let p = PriorSpec::new(prior_variance).map_err(to_py)?;
    Ok(projbnn::vi::kl_gaussian_diag(&q, &p))
}

#[pymodule]
fn projbnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(logmeanexp, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_test_ll, m)?)?;
    m.add_function(wrap_pyfunction!(cyclic_lr, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussian_diag, m)?)?;
    Ok(())
}
