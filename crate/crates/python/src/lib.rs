//! Python bindings: cases, SocialCircle features, checkpoints, training and probing.

use std::collections::HashMap;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use socialcircle::circle::{self, FactorSet};
use socialcircle::config::Settings;
use socialcircle::data::{self, normalize_case};
use socialcircle::probe::{run_probe, ManualNeighborSpec};
use socialcircle::train::{train_from, TrainError};
use socialcircle::{metrics, model, synthetic, Point};

type XY = (f64, f64);

fn xy(p: &Point) -> XY {
    (p[0], p[1])
}

fn xys(points: &[Point]) -> Vec<XY> {
    points.iter().map(xy).collect()
}

fn points(v: &[XY]) -> Vec<Point> {
    v.iter().map(|&(x, y)| [x, y]).collect()
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One prediction case: the target's observed window, its future and its neighbors.
#[pyclass(name = "PredictionCase", module = "socialcircle", from_py_object)]
#[derive(Clone)]
struct PyCase {
    inner: socialcircle::PredictionCase,
}

#[pymethods]
impl PyCase {
    #[getter]
    fn case_id(&self) -> &str {
        &self.inner.case_id
    }

    #[getter]
    fn scene_id(&self) -> &str {
        &self.inner.scene_id
    }

    #[getter]
    fn observed(&self) -> Vec<XY> {
        xys(&self.inner.observed)
    }

    #[getter]
    fn future(&self) -> Option<Vec<XY>> {
        self.inner.future.as_deref().map(xys)
    }

    /// `(agent_id, manual, points)` per neighbor.
    #[getter]
    fn neighbors(&self) -> Vec<(String, bool, Vec<XY>)> {
        self.inner
            .neighbors
            .iter()
            .map(|n| (n.agent_id.clone(), n.manual, xys(&n.window)))
            .collect()
    }

    /// A copy with a manual neighbor moving linearly from `start` to `end`.
    #[pyo3(signature = (start, end, cap = 50))]
    fn with_manual_neighbor(&self, start: XY, end: XY, cap: usize) -> PyCase {
        let inner =
            circle::inject_manual_neighbor(&self.inner, [start.0, start.1], [end.0, end.1], cap);
        PyCase { inner }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyCase> {
        Ok(PyCase {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "PredictionCase({:?}, neighbors={})",
            self.inner.case_id,
            self.inner.neighbors.len()
        )
    }
}

/// A model configuration and its parameters.
#[pyclass(name = "Checkpoint", module = "socialcircle")]
struct PyCheckpoint {
    inner: socialcircle::Checkpoint,
}

fn settings_from(settings: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Settings> {
    let mut s = Settings::default();
    for (key, value) in settings.unwrap_or_default() {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        s.set(&key, &text).map_err(value_err)?;
    }
    Ok(s)
}

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialized parameters. `settings` holds config keys such as
    /// `{"d": 32, "n_partitions": 4, "use_socialcircle": False}`.
    #[staticmethod]
    #[pyo3(signature = (settings = None, seed = 0))]
    fn init(
        settings: Option<HashMap<String, Bound<'_, PyAny>>>,
        seed: u64,
    ) -> PyResult<PyCheckpoint> {
        let s = settings_from(settings)?;
        let params = model::ParameterStore::init(&s.model, seed).map_err(value_err)?;
        let inner = socialcircle::Checkpoint::new(s.model, params).map_err(value_err)?;
        Ok(PyCheckpoint { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyCheckpoint> {
        let inner =
            socialcircle::Checkpoint::load(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyCheckpoint { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner
            .save(path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(value_err)
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.params.n_values()
    }

    /// `k` futures in scene coordinates.
    #[pyo3(signature = (case, k = 1, seed = 0))]
    fn predict(
        &self,
        py: Python<'_>,
        case: &PyCase,
        k: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<XY>>> {
        let out = py
            .detach(|| {
                model::sample_k(&case.inner, &self.inner.params, &self.inner.config, k, seed)
            })
            .map_err(value_err)?;
        Ok(out
            .denormalized
            .unwrap_or_default()
            .iter()
            .map(|s| xys(s))
            .collect())
    }

    /// Runs a probe; returns the response as a JSON string.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (case, manual = Vec::new(), k = 1, seed = 0, n_partitions = None, factors = None))]
    fn probe(
        &self,
        py: Python<'_>,
        case: &PyCase,
        manual: Vec<(XY, XY)>,
        k: usize,
        seed: u64,
        n_partitions: Option<usize>,
        factors: Option<&str>,
    ) -> PyResult<String> {
        let factors = factors
            .map(|f| f.parse::<FactorSet>())
            .transpose()
            .map_err(value_err)?;
        let request = socialcircle::ProbeRequest {
            case_id: case.inner.case_id.clone(),
            manual_neighbors: manual
                .into_iter()
                .map(|(a, b)| ManualNeighborSpec {
                    start: [a.0, a.1],
                    end: [b.0, b.1],
                })
                .collect(),
            k,
            seed,
            n_partitions,
            factors,
        };
        let response = py
            .detach(|| run_probe(&self.inner, &case.inner, &request))
            .map_err(value_err)?;
        serde_json::to_string(&response).map_err(value_err)
    }

    /// `{"min_ade_k", "min_fde_k", "k", "n_cases"}` over `cases`.
    #[pyo3(signature = (cases, k = 20, seed = 0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        cases: Vec<PyCase>,
        k: usize,
        seed: u64,
    ) -> PyResult<HashMap<String, f64>> {
        let cases: Vec<_> = cases.into_iter().map(|c| c.inner).collect();
        let report = py
            .detach(|| metrics::evaluate(&self.inner.params, &self.inner.config, &cases, k, seed))
            .map_err(value_err)?;
        Ok(HashMap::from([
            ("min_ade_k".to_string(), report.min_ade_k),
            ("min_fde_k".to_string(), report.min_fde_k),
            ("k".to_string(), report.k as f64),
            ("n_cases".to_string(), report.n_cases as f64),
        ]))
    }
}

/// Cases windowed from trajectory-file text (`frame agent_id x y` lines).
#[pyfunction]
#[pyo3(signature = (text, scene_id, t_h = 8, t_f = 12, stride = 1))]
fn load_cases(
    text: &str,
    scene_id: &str,
    t_h: usize,
    t_f: usize,
    stride: usize,
) -> PyResult<Vec<PyCase>> {
    let tracks = data::parse_trajectory_file(text).map_err(value_err)?;
    Ok(data::build_windows(&tracks, scene_id, t_h, t_f, stride)
        .into_iter()
        .map(|inner| PyCase { inner })
        .collect())
}

/// Synthetic scenes as trajectory-file text; `kind` is `linear` or `avoidance`.
#[pyfunction]
#[pyo3(signature = (kind, n, seed = 0, t_h = 8, t_f = 12))]
fn synthetic_scenes(kind: &str, n: usize, seed: u64, t_h: usize, t_f: usize) -> PyResult<String> {
    let tracks = match kind {
        "linear" => synthetic::linear_scenes(n, t_h, t_f, 0.4, seed),
        "avoidance" => synthetic::avoidance_scenes(n, t_h, t_f, 0.4, seed),
        other => return Err(PyValueError::new_err(format!("unknown kind `{other}`"))),
    };
    Ok(synthetic::to_text(&tracks))
}

#[pyfunction]
fn relative_angle(target: XY, neighbor: XY) -> f64 {
    circle::relative_angle([target.0, target.1], [neighbor.0, neighbor.1])
}

#[pyfunction]
fn assign_partition(angle: f64, n_partitions: usize) -> PyResult<usize> {
    circle::assign_partition(angle, n_partitions).map_err(value_err)
}

/// `(values, counts)` of the case after moving it to the origin.
#[pyfunction]
#[pyo3(signature = (case, n_partitions = 8, factors = "vdr"))]
fn compute_meta(
    case: &PyCase,
    n_partitions: usize,
    factors: &str,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let config = circle::PartitionConfig {
        n_partitions,
        factors: factors.parse().map_err(value_err)?,
        t_h: case.inner.observed.len(),
        ..Default::default()
    };
    let meta = circle::compute_meta(&normalize_case(&case.inner).0, &config).map_err(value_err)?;
    Ok((meta.values, meta.counts))
}

/// `(raw, normalized)` squared-sum scores of each row.
#[pyfunction]
fn attention_scores(rows: Vec<Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let p = circle::attention_scores(&rows);
    (p.raw, p.normalized)
}

#[pyfunction]
fn ade(pred: Vec<XY>, gt: Vec<XY>) -> PyResult<f64> {
    metrics::ade(&points(&pred), &points(&gt)).map_err(value_err)
}

#[pyfunction]
fn fde(pred: Vec<XY>, gt: Vec<XY>) -> PyResult<f64> {
    metrics::fde(&points(&pred), &points(&gt)).map_err(value_err)
}

#[pyfunction]
fn min_over_k(samples: Vec<Vec<XY>>, gt: Vec<XY>) -> PyResult<(f64, f64)> {
    let samples: Vec<Vec<Point>> = samples.iter().map(|s| points(s)).collect();
    metrics::min_over_k(&samples, &points(&gt)).map_err(value_err)
}

/// Trains a model; returns `(checkpoint, loss_curve)`.
#[pyfunction]
#[pyo3(signature = (cases, settings = None))]
fn train(
    py: Python<'_>,
    cases: Vec<PyCase>,
    settings: Option<HashMap<String, Bound<'_, PyAny>>>,
) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let s = settings_from(settings)?;
    let cases: Vec<_> = cases.into_iter().map(|c| c.inner).collect();
    let outcome = py.detach(|| {
        let params = model::ParameterStore::init(&s.model, s.train.seed)?;
        train_from(&cases, &s.model, &s.train, params, |_, _| Ok(()))
    });
    let outcome = outcome.map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => PyArithmeticError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    let inner = socialcircle::Checkpoint::new(s.model, outcome.params).map_err(value_err)?;
    Ok((PyCheckpoint { inner }, outcome.loss_curve))
}

#[pymodule]
#[pyo3(name = "socialcircle")]
fn socialcircle_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCase>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(load_cases, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(relative_angle, m)?)?;
    m.add_function(wrap_pyfunction!(assign_partition, m)?)?;
    m.add_function(wrap_pyfunction!(compute_meta, m)?)?;
    m.add_function(wrap_pyfunction!(attention_scores, m)?)?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    m.add_function(wrap_pyfunction!(fde, m)?)?;
    m.add_function(wrap_pyfunction!(min_over_k, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
