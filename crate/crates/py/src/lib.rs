//! Python bindings. Arrays cross the boundary as nested lists of floats.

#![allow(clippy::type_complexity)]

use std::collections::HashMap;

use asklearn_core::calibration;
use asklearn_core::data::init_pools;
use asklearn_core::embedding::grad_embed;
use asklearn_core::engine::run_experiment;
use asklearn_core::metrics;
use asklearn_core::model::train;
use asklearn_core::oracle;
use asklearn_core::rng::seeded;
use asklearn_core::sampler::{self, DensePoints, QueryBatch, SelectionMethod};
use asklearn_core::{CalibSpec, ExperimentConfig, GroundTruth, PoolState, TrainConfig};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(value_err)
}

fn to_rows(a: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

#[pyfunction]
fn kl_to_uniform(p: Vec<f64>) -> PyResult<f64> {
    calibration::kl_to_uniform(ArrayView1::from(&p)).map_err(value_err)
}

#[pyfunction]
fn bhattacharyya(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    calibration::bhattacharyya(ArrayView1::from(&p), ArrayView1::from(&q)).map_err(value_err)
}

/// `alpha` for one sample from its `T` stochastic predictions.
#[pyfunction]
fn variance_weight(passes: Vec<Vec<f64>>) -> PyResult<f64> {
    let views: Vec<ArrayView1<f64>> = passes.iter().map(ArrayView1::from).collect();
    calibration::variance_weight(&views).map_err(value_err)
}

#[pyfunction]
fn likelihood_weight(p: Vec<f64>, true_label: usize, predicted_label: usize) -> f64 {
    calibration::likelihood_weight(ArrayView1::from(&p), true_label, predicted_label)
}

/// VWCC loss over `passes[t][i][k]`; returns `(loss, alphas)`.
#[pyfunction]
#[pyo3(signature = (passes, labels, lam = 1.0))]
fn vwcc_loss(passes: Vec<Vec<Vec<f64>>>, labels: Vec<usize>, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    let mats = passes.iter().map(|p| matrix(p)).collect::<PyResult<Vec<_>>>()?;
    let views: Vec<ArrayView2<f64>> = mats.iter().map(|m| m.view()).collect();
    calibration::vwcc_loss(&views, &labels, lam).map_err(value_err)
}

/// LWCC loss; returns `(loss, betas)`.
#[pyfunction]
#[pyo3(signature = (probs, labels, lam = 1.0))]
fn lwcc_loss(probs: Vec<Vec<f64>>, labels: Vec<usize>, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    calibration::lwcc_loss(matrix(&probs)?.view(), &labels, lam).map_err(value_err)
}

/// Accuracy, ECE, NLL and Brier score.
#[pyfunction]
#[pyo3(signature = (probs, labels, n_bins = 15))]
fn evaluate(probs: Vec<Vec<f64>>, labels: Vec<usize>, n_bins: usize) -> PyResult<HashMap<String, f64>> {
    let r = metrics::evaluate(matrix(&probs)?.view(), &labels, n_bins).map_err(value_err)?;
    Ok(HashMap::from([
        ("accuracy".to_string(), r.accuracy),
        ("ece".to_string(), r.ece),
        ("nll".to_string(), r.nll),
        ("brier".to_string(), r.brier),
    ]))
}

/// Dense gradient embeddings, one row of `K * d` per sample.
#[pyfunction]
fn grad_embedding(probs: Vec<Vec<f64>>, features: Vec<Vec<f64>>, pseudo_labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
    let ids = (0..probs.len()).collect();
    let e = grad_embed(ids, matrix(&probs)?.view(), matrix(&features)?.view(), &pseudo_labels, 0).map_err(value_err)?;
    Ok(to_rows(e.to_dense().view()))
}

/// k-means++ seeding over dense points; returns row indices.
#[pyfunction]
#[pyo3(signature = (points, b, seed = 0))]
fn kmeanspp(points: Vec<Vec<f64>>, b: usize, seed: u64) -> PyResult<Vec<usize>> {
    let pts = matrix(&points)?;
    sampler::kmeanspp_indices(&DensePoints(pts.view()), b, None, &mut seeded(seed)).map_err(value_err)
}

#[pyfunction]
fn entropy_select(probs: Vec<Vec<f64>>, ids: Vec<usize>, b: usize) -> PyResult<Vec<usize>> {
    Ok(sampler::entropy_select(matrix(&probs)?.view(), &ids, b, 0).map_err(value_err)?.ids)
}

#[pyfunction]
fn confidence_select(probs: Vec<Vec<f64>>, ids: Vec<usize>, b: usize) -> PyResult<Vec<usize>> {
    Ok(sampler::confidence_select(matrix(&probs)?.view(), &ids, b, 0).map_err(value_err)?.ids)
}

#[pyfunction]
fn noisy_count(rho: f64, b: usize) -> usize {
    oracle::noisy_count(rho, b)
}

/// Noisy oracle over `truth`; returns `(pairs, corrupted_ids)`.
#[pyfunction]
#[pyo3(signature = (ids, truth, num_classes, rho, seed = 0))]
fn annotate_noisy(
    ids: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
    rho: f64,
    seed: u64,
) -> PyResult<(Vec<(usize, usize)>, Vec<usize>)> {
    let truth = GroundTruth::new(truth, num_classes).map_err(value_err)?;
    let query = QueryBatch { ids, method: SelectionMethod::Random, round: 0 };
    let a = oracle::annotate_noisy(&query, &truth, rho, &mut seeded(seed)).map_err(value_err)?;
    Ok((a.pairs, a.corrupted_ids.into_iter().collect()))
}

/// Run an experiment from a JSON config; returns one list of round records
/// (dicts) per trial.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str) -> PyResult<Py<PyAny>> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let trials = py.detach(|| run_experiment(&config)).map_err(value_err)?;
    let text = serde_json::to_string(&trials).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: asklearn_core::Mlp,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (dims, dropout = 0.2, seed = 0))]
    fn new(dims: Vec<usize>, dropout: f64, seed: u64) -> PyResult<Self> {
        let inner = asklearn_core::Mlp::new(&dims, dropout, &mut seeded(seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(self.inner.predict_proba(matrix(&x)?.view()).map_err(value_err)?.view()))
    }

    /// `(probs, penultimate features)` in eval mode.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (p, z) = self.inner.predict(matrix(&x)?.view()).map_err(value_err)?;
        Ok((to_rows(p.view()), to_rows(z.view())))
    }

    /// Train with `loss` in {"ce", "vwcc", "lwcc"}; returns the final epoch loss.
    #[pyo3(signature = (x, y, loss = "ce", lam = 1.0, passes = 10, epochs = 100, batch_size = 64, lr = 1e-3, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        loss: &str,
        lam: f64,
        passes: usize,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let spec = match loss {
            "ce" => CalibSpec::none(),
            "vwcc" => CalibSpec::vwcc(lam, passes),
            "lwcc" => CalibSpec::lwcc(lam),
            other => return Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
        };
        let x = matrix(&x)?;
        let cfg = TrainConfig { max_epochs: epochs, batch_size, learning_rate: lr, ..TrainConfig::default() };
        let model = &mut self.inner;
        let report = py
            .detach(|| train(model, x.view(), &y, &spec, &cfg, &mut seeded(seed)))
            .map_err(value_err)?;
        Ok(report.final_loss)
    }
}

#[pyclass(name = "Pool")]
struct PyPool {
    inner: PoolState,
}

#[pymethods]
impl PyPool {
    #[new]
    #[pyo3(signature = (n, seed_size, budget, batch_size, seed = 0))]
    fn new(n: usize, seed_size: usize, budget: usize, batch_size: usize, seed: u64) -> PyResult<Self> {
        let inner = init_pools(n, seed_size, budget, batch_size, &mut seeded(seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn labeled(&self) -> Vec<usize> {
        self.inner.labeled_vec()
    }

    fn unlabeled(&self) -> Vec<usize> {
        self.inner.unlabeled_vec()
    }

    #[getter]
    fn budget_remaining(&self) -> usize {
        self.inner.budget_remaining()
    }

    #[getter]
    fn rounds_completed(&self) -> usize {
        self.inner.rounds_completed()
    }

    fn commit(&mut self, ids: Vec<usize>) -> PyResult<()> {
        self.inner.commit_query(&ids).map_err(value_err)
    }
}

#[pymodule]
fn asklearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_to_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(bhattacharyya, m)?)?;
    m.add_function(wrap_pyfunction!(variance_weight, m)?)?;
    m.add_function(wrap_pyfunction!(likelihood_weight, m)?)?;
    m.add_function(wrap_pyfunction!(vwcc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lwcc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(kmeanspp, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_select, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_select, m)?)?;
    m.add_function(wrap_pyfunction!(noisy_count, m)?)?;
    m.add_function(wrap_pyfunction!(annotate_noisy, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyPool>()?;
    Ok(())
}
