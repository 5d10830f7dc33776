//! Python bindings: datasets, splits, model training, evaluation and
//! checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use deepicf::checkpoint::{load_checkpoint, save_checkpoint};
use deepicf::config::{config_to_text, parse_config};
use deepicf::data::{
    leave_one_out_split_with, parse_interactions, read_interactions, read_split, write_split, EVAL_NEGATIVES,
};
use deepicf::eval::{evaluate_item_knn, evaluate_item_pop, evaluate_model, EvalReport};
use deepicf::model::predict_logit;
use deepicf::train::{fit, initial_params};
use deepicf::{InteractionDataset, LineFormat, LooSplit, ModelConfig, ModelParams};

fn to_py(err: deepicf::Error) -> PyErr {
    match err {
        deepicf::Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn format(name: &str) -> PyResult<LineFormat> {
    name.parse().map_err(to_py)
}

fn metrics(report: &EvalReport) -> (f64, f64) {
    (report.hr_at_k, report.ndcg_at_k)
}

/// An indexed interaction log.
#[pyclass(name = "Dataset", module = "deepicf", frozen)]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    /// Reads `path` in `format` ("tab" or "double_colon").
    #[staticmethod]
    #[pyo3(signature = (path, format="tab"))]
    fn from_file(path: PathBuf, format: &str) -> PyResult<Self> {
        let inner = read_interactions(&path, self::format(format)?).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, format="tab"))]
    fn from_text(text: &str, format: &str) -> PyResult<Self> {
        let inner = parse_interactions(text.as_bytes(), self::format(format)?).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn num_interactions(&self) -> usize {
        self.inner.num_interactions()
    }

    /// Leave-one-out split. `num_negatives=None` uses every unseen item.
    #[pyo3(signature = (seed=0, num_negatives=Some(EVAL_NEGATIVES)))]
    fn split(&self, seed: u64, num_negatives: Option<usize>) -> PyResult<PySplit> {
        let inner = leave_one_out_split_with(&self.inner, seed, num_negatives).map_err(to_py)?;
        Ok(PySplit { inner })
    }
}

/// Training interactions plus one held-out item and fixed negatives per user.
#[pyclass(name = "Split", module = "deepicf", frozen)]
struct PySplit {
    inner: LooSplit,
}

#[pymethods]
impl PySplit {
    /// Reads the `.train/.test/.negatives/.idmap` files at `prefix`.
    #[staticmethod]
    #[pyo3(signature = (prefix, seed=0))]
    fn load(prefix: PathBuf, seed: u64) -> PyResult<Self> {
        Ok(PySplit {
            inner: read_split(&prefix, seed).map_err(to_py)?,
        })
    }

    fn save(&self, prefix: PathBuf) -> PyResult<()> {
        write_split(&self.inner, &prefix).map_err(to_py)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn test_items(&self) -> Vec<usize> {
        self.inner.test_items.clone()
    }

    #[getter]
    fn user_ids(&self) -> Vec<String> {
        self.inner.train.user_ids().to_vec()
    }

    fn train_items(&self, user: usize) -> PyResult<Vec<usize>> {
        self.check_user(user)?;
        Ok(self.inner.train.items(user).to_vec())
    }

    fn eval_negatives(&self, user: usize) -> PyResult<Vec<usize>> {
        self.check_user(user)?;
        Ok(self.inner.eval_negatives[user].clone())
    }

    /// `(HR@k, NDCG@k)` of the ItemPop baseline.
    #[pyo3(signature = (k=10))]
    fn item_pop(&self, k: usize) -> PyResult<(f64, f64)> {
        Ok(metrics(&evaluate_item_pop(&self.inner, k).map_err(to_py)?))
    }

    /// `(HR@k, NDCG@k)` of ItemKNN with cosine similarity.
    #[pyo3(signature = (k=10, neighbors=None))]
    fn item_knn(&self, k: usize, neighbors: Option<usize>) -> PyResult<(f64, f64)> {
        Ok(metrics(&evaluate_item_knn(&self.inner, k, neighbors).map_err(to_py)?))
    }
}

impl PySplit {
    fn check_user(&self, user: usize) -> PyResult<()> {
        if user < self.inner.num_users() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "user index {user} out of range (split has {} users)",
                self.inner.num_users()
            )))
        }
    }
}

/// Model hyperparameters. Keyword arguments use the config-file keys, e.g.
/// `Config("DeepICF_A", 16, layers=2, beta=0.5, epochs=20)`.
#[pyclass(name = "Config", module = "deepicf", frozen)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (variant="DeepICF", k=16, **options))]
    fn new(variant: &str, k: usize, options: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut text = format!("variant = {variant}\nk = {k}\n");
        if let Some(options) = options {
            for (key, value) in options.iter() {
                let key: String = key.extract()?;
                let value = match value.extract::<Vec<usize>>() {
                    Ok(list) => list.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                    Err(_) => value.str()?.to_string(),
                };
                text.push_str(&format!("{key} = {value}\n"));
            }
        }
        Ok(PyConfig {
            inner: parse_config(&text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: parse_config(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        config_to_text(&self.inner)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes.clone()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(variant={:?}, k={}, layer_sizes={:?}, epochs={})",
            self.inner.variant.name(),
            self.inner.k,
            self.inner.layer_sizes,
            self.inner.epochs
        )
    }
}

/// `(item, score, attention)`
type RecommendationRow = (String, f64, Option<Vec<(String, f64)>>);

/// A trained (or freshly initialised) FISM, DeepICF or DeepICF+a model.
#[pyclass(name = "Model", module = "deepicf")]
struct PyModel {
    config: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Initial parameters for `config` on `split`, pre-training with FISM
    /// first when the config asks for it.
    #[new]
    fn new(config: &PyConfig, split: &PySplit) -> PyResult<Self> {
        let params = initial_params(&config.inner, &split.inner).map_err(to_py)?;
        Ok(PyModel {
            config: config.inner.clone(),
            params,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, params) = load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.config, &self.params).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Trains for the configured number of epochs and returns the mean loss
    /// of each epoch. `callback(epoch, loss)` is called after every epoch.
    #[pyo3(signature = (split, callback=None))]
    fn train(&mut self, py: Python<'_>, split: &PySplit, callback: Option<Py<PyAny>>) -> PyResult<Vec<f64>> {
        let mut failure: Option<PyErr> = None;
        let result = fit(&mut self.params, &self.config, &split.inner, |stats, _| {
            if let Some(cb) = &callback {
                if let Err(e) = cb.call1(py, (stats.epoch, stats.loss)) {
                    failure = Some(e);
                    return Err(deepicf::Error::Invalid("training callback raised".into()));
                }
            }
            Ok(())
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(result.map_err(to_py)?.losses())
    }

    /// `(HR@k, NDCG@k)` on the split's held-out items.
    #[pyo3(signature = (split, k=10))]
    fn evaluate(&self, split: &PySplit, k: usize) -> PyResult<(f64, f64)> {
        let report = evaluate_model(&self.params, &self.config, &split.inner, k).map_err(to_py)?;
        Ok(metrics(&report))
    }

    /// Logit for `item` given the user's history (dense indices). The target
    /// is ignored if it appears in `history`.
    fn predict(&self, user: usize, history: Vec<usize>, item: usize) -> PyResult<f64> {
        let (logit, _) = predict_logit(&self.params, &self.config, user, &history, item).map_err(to_py)?;
        Ok(logit)
    }

    /// Attention weights over the history for `item` (DeepICF+a only).
    fn attention(&self, user: usize, history: Vec<usize>, item: usize) -> PyResult<Option<Vec<(usize, f64)>>> {
        let (_, cache) = predict_logit(&self.params, &self.config, user, &history, item).map_err(to_py)?;
        Ok(cache
            .attention
            .map(|a| cache.history.iter().copied().zip(a.weights).collect()))
    }

    /// Top-`n` unseen items for a raw user id as `(item, score, attention)`.
    #[pyo3(signature = (split, user, n=10))]
    fn recommend(
        &self,
        split: &PySplit,
        user: &str,
        n: usize,
    ) -> PyResult<Vec<RecommendationRow>> {
        let recs = deepicf::cli::recommend(&self.params, &self.config, &split.inner, user, n).map_err(to_py)?;
        Ok(recs.items.into_iter().map(|r| (r.item, r.score, r.attention)).collect())
    }
}

#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    deepicf::math::sigmoid(x)
}

/// `exp(s_t) / (Σ exp s)^beta`
#[pyfunction]
fn softmax_beta(scores: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    deepicf::math::softmax_beta(&scores, beta).map_err(to_py)
}

/// `(hit, ndcg)` for a single relevant item at 1-based `rank`.
#[pyfunction]
fn metrics_at_k(rank: usize, k: usize) -> (f64, f64) {
    deepicf::eval::metrics_at_k(rank, k)
}

#[pymodule(name = "deepicf")]
fn deepicf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_beta, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_at_k, m)?)?;
    m.add("EVAL_NEGATIVES", EVAL_NEGATIVES)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keywords_use_config_file_keys() {
        Python::initialize();
        Python::attach(|py| {
            let options = PyDict::new(py);
            options.set_item("layers", 2).unwrap();
            options.set_item("beta", 0.25).unwrap();
            options.set_item("pretrain", true).unwrap();
            let config = PyConfig::new("DeepICF_A", 8, Some(&options)).unwrap();
            assert_eq!(config.inner.layer_sizes, vec![8, 4]);
            assert_eq!(config.inner.beta, 0.25);
            assert!(config.inner.pretrain);

            let options = PyDict::new(py);
            options.set_item("layer_sizes", vec![6, 3]).unwrap();
            let config = PyConfig::new("DeepICF", 8, Some(&options)).unwrap();
            assert_eq!(config.inner.layer_sizes, vec![6, 3]);

            let options = PyDict::new(py);
            options.set_item("bogus", 1).unwrap();
            assert!(PyConfig::new("DeepICF", 8, Some(&options)).is_err());
        });
    }

    #[test]
    fn io_errors_map_to_os_error() {
        Python::initialize();
        Python::attach(|py| {
            let err = PyDataset::from_file(PathBuf::from("/nonexistent/ratings.dat"), "tab").err().unwrap();
            assert!(err.is_instance_of::<PyOSError>(py));
            let err = PyDataset::from_text("u\ti\tx\t1\n", "tab").err().unwrap();
            assert!(err.is_instance_of::<PyValueError>(py));
        });
    }
}
