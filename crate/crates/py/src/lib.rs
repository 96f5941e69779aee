use augoverlap::encoder::{infonce_term, initial_encoder, Activation};
use augoverlap::eval::{self, BoundsConfig, FeatureTable, ProbeConfig};
use augoverlap::graph::{self, AugmentationGraph, Diameter};
use augoverlap::metrics::{self, AugmentedFeatureSet};
use augoverlap::sphere::{synthetic_split, UnitVector};
use augoverlap::{CapSize, EncoderParams, LabeledSphereDataset, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn py_err(e: augoverlap::Error) -> PyErr {
    match e {
        augoverlap::Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn cap_size(area: Option<f64>, radius: Option<f64>) -> PyResult<CapSize> {
    match (area, radius) {
        (Some(a), None) => Ok(CapSize::Area(a)),
        (None, Some(r)) => Ok(CapSize::Radius(r)),
        (None, None) => Ok(CapSize::Area(1.0)),
        _ => Err(PyValueError::new_err("give either area or radius, not both")),
    }
}

/// Labeled points on the unit sphere.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(LabeledSphereDataset);

#[pymethods]
impl PyDataset {
    /// Uniform samples from caps around `centers`, `per_class` points each.
    #[staticmethod]
    #[pyo3(signature = (centers, per_class, seed, area=None, radius=None))]
    fn make(centers: Vec<Vec<f64>>, per_class: usize, seed: u64, area: Option<f64>, radius: Option<f64>) -> PyResult<Self> {
        let centers = centers
            .into_iter()
            .map(UnitVector::new)
            .collect::<augoverlap::Result<Vec<_>>>()
            .map_err(py_err)?;
        augoverlap::make_dataset(&centers, per_class, cap_size(area, radius)?, seed)
            .map(Self)
            .map_err(py_err)
    }

    /// Two area-1 caps at the poles of S², as a (train, test) pair.
    #[staticmethod]
    #[pyo3(signature = (train_per_class=2500, test_per_class=500, seed=0))]
    fn synthetic(train_per_class: usize, test_per_class: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = synthetic_split(train_per_class, test_per_class, CapSize::Area(1.0), seed).map_err(py_err)?;
        Ok((Self(a), Self(b)))
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        self.0.points.iter().map(|p| p.as_slice().to_vec()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn critical_radii<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &graph::dataset_critical_radii(&self.0).map_err(py_err)?)
    }
}

/// Augmentation graph: edge iff geodesic distance ≤ connect_factor · r.
#[pyclass(name = "Graph", frozen)]
struct PyGraph(AugmentationGraph);

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (dataset, r, connect_factor=2.0))]
    fn new(dataset: &PyDataset, r: f64, connect_factor: f64) -> PyResult<Self> {
        augoverlap::build_graph(&dataset.0, r, connect_factor)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.0.num_edges()
    }

    #[getter]
    fn num_components(&self) -> usize {
        self.0.num_components()
    }

    fn components(&self) -> Vec<usize> {
        self.0.connected_components()
    }

    fn classwise_connected(&self) -> PyResult<Vec<bool>> {
        self.0.is_classwise_connected().map_err(py_err)
    }

    fn label_violations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.label_consistency_violations().map_err(py_err)?)
    }

    /// Per-class hop diameters; `None` marks a disconnected class.
    fn diameters(&self) -> PyResult<Vec<Option<usize>>> {
        let d = self.0.intra_class_diameter().map_err(py_err)?;
        Ok(d.per_class.into_iter().map(Diameter::finite).collect())
    }
}

/// One-hidden-layer encoder with unit-norm output.
#[pyclass(name = "Encoder", frozen)]
struct PyEncoder(EncoderParams);

fn parse_activation(name: &str) -> PyResult<Activation> {
    match name {
        "softmax" => Ok(Activation::Softmax),
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        _ => Err(PyValueError::new_err(format!("unknown activation {name:?}"))),
    }
}

fn train_config(config_json: Option<&str>) -> PyResult<TrainConfig> {
    match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(TrainConfig::default()),
    }
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden=128, output=16, activation="softmax", seed=0))]
    fn init(input_dim: usize, hidden: usize, output: usize, activation: &str, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig {
            hidden_width: hidden,
            output_dim: output,
            activation: parse_activation(activation)?,
            seed,
            ..TrainConfig::default()
        };
        initial_encoder(input_dim, &cfg).map(Self).map_err(py_err)
    }

    /// Trains on `dataset`; `config_json` holds `TrainConfig` fields. Returns (encoder, trace).
    #[staticmethod]
    #[pyo3(signature = (dataset, config_json=None))]
    fn train<'py>(py: Python<'py>, dataset: &PyDataset, config_json: Option<&str>) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let cfg = train_config(config_json)?;
        let (p, trace) = augoverlap::train(&dataset.0, &cfg).map_err(py_err)?;
        Ok((Self(p), to_py(py, &trace.records)?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        EncoderParams::from_json(text).map(Self).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    fn embed(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        points.iter().map(|x| self.0.forward(x)).collect::<augoverlap::Result<_>>().map_err(py_err)
    }

    #[getter]
    fn output_dim(&self) -> usize {
        augoverlap::Encoder::output_dim(&self.0)
    }
}

/// InfoNCE of one anchor against its positive and negatives (temperature 1).
#[pyfunction]
fn infonce(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>) -> PyResult<f64> {
    if negatives.is_empty() {
        return Err(PyValueError::new_err("at least one negative is required"));
    }
    Ok(infonce_term(&anchor, &positive, &negatives))
}

fn table(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<FeatureTable> {
    FeatureTable::new((0..labels.len()).collect(), labels, features).map_err(py_err)
}

#[pyfunction]
fn mean_ce_loss(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    eval::mean_ce_loss(&table(features, labels)?).map_err(py_err)
}

#[pyfunction]
fn conditional_variance(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    eval::conditional_variance(&table(features, labels)?).map_err(py_err)
}

/// Multinomial logistic probe on frozen features; returns weights and accuracies.
#[pyfunction]
fn linear_probe<'py>(
    py: Python<'py>,
    train_features: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    test_features: Vec<Vec<f64>>,
    test_labels: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let train = table(train_features, train_labels)?;
    let test = table(test_features, test_labels)?;
    let k = train.num_classes().max(test.num_classes());
    let res = eval::linear_probe(&train.with_num_classes(k), &test.with_num_classes(k), &ProbeConfig::default())
        .map_err(py_err)?;
    to_py(py, &res)
}

/// Per-row confusion ratios and their mean over `k` nearest neighbours.
#[pyfunction]
#[pyo3(signature = (source_ids, features, k=1))]
fn confusion_ratio(source_ids: Vec<usize>, features: Vec<Vec<f64>>, k: usize) -> PyResult<(Vec<f64>, f64)> {
    let mut seen = std::collections::HashMap::new();
    let views = source_ids
        .iter()
        .map(|&s| {
            let c = seen.entry(s).or_insert(0usize);
            *c += 1;
            *c - 1
        })
        .collect();
    let set = AugmentedFeatureSet::new(source_ids, views, features, k).map_err(py_err)?;
    let rep = metrics::confusion_ratio_all(&set);
    Ok((rep.cr_values, rep.acr))
}

/// ACR of `encoder` on `views` augmentations per sample at strength `r`.
#[pyfunction]
#[pyo3(signature = (encoder, dataset, r, views=10, k=1, seed=0))]
fn acr(encoder: &PyEncoder, dataset: &PyDataset, r: f64, views: usize, k: usize, seed: u64) -> PyResult<f64> {
    let set = metrics::build_augmented_features(&encoder.0, &dataset.0, views, r, k, seed).map_err(py_err)?;
    Ok(metrics::confusion_ratio_all(&set).acr)
}

#[pyfunction]
fn arc(acr_init: f64, acr_final: f64) -> PyResult<f64> {
    metrics::arc(acr_init, acr_final).map_err(py_err)
}

/// All bound quantities for `encoder` at strength `r` with `m` negatives.
#[pyfunction]
#[pyo3(signature = (encoder, dataset, r, m=512, seed=0, with_graph=true))]
fn bounds_report<'py>(
    py: Python<'py>,
    encoder: &PyEncoder,
    dataset: &PyDataset,
    r: f64,
    m: usize,
    seed: u64,
    with_graph: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let graph = if with_graph {
        Some(augoverlap::build_graph(&dataset.0.subsample(1000), r, 2.0).map_err(py_err)?)
    } else {
        None
    };
    let rep = eval::bounds_report(&encoder.0, &dataset.0, r, m, graph.as_ref(), &BoundsConfig::default(), seed)
        .map_err(py_err)?;
    to_py(py, &rep)
}

/// Mean |LSE_M − LSE| per M within a feature table.
#[pyfunction]
#[pyo3(signature = (features, m_list, trials=200, seed=0))]
fn lse_approximation_error<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    m_list: Vec<usize>,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let labels = vec![0; features.len()];
    let t = table(features, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = eval::lse_approximation_error(&t, &m_list, trials, &mut rng).map_err(py_err)?;
    to_py(py, &pts)
}

#[pyfunction]
#[pyo3(signature = (n, k, m=16, seed=0))]
fn uniform_counterexample<'py>(py: Python<'py>, n: usize, k: usize, m: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &eval::uniform_counterexample(n, k, m, seed).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (n_list, d=2, trials=20, seed=0, area=None, radius=None))]
fn scaling_experiment<'py>(
    py: Python<'py>,
    n_list: Vec<usize>,
    d: usize,
    trials: usize,
    seed: u64,
    area: Option<f64>,
    radius: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let recs = graph::scaling_experiment(&n_list, d, trials, cap_size(area, radius)?, seed).map_err(py_err)?;
    to_py(py, &recs)
}

#[pymodule]
fn pyaugoverlap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(conditional_variance, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(acr, m)?)?;
    m.add_function(wrap_pyfunction!(arc, m)?)?;
    m.add_function(wrap_pyfunction!(bounds_report, m)?)?;
    m.add_function(wrap_pyfunction!(lse_approximation_error, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_counterexample, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_experiment, m)?)?;
    Ok(())
}
