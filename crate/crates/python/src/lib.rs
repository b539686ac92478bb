//! Python bindings: experiment configs, the CLI drivers, aggregation and the
//! wire format.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use fedlsi_core::data::DomainDataset;
use fedlsi_core::federation::{self, Method};
use fedlsi_core::report::{self, ExperimentConfig, ProjectVariants, Unseen};
use fedlsi_core::transport::{self, Frame, MsgType, PartId, TransportKind};
use fedlsi_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Hands a serializable value to Python as plain dicts and lists.
fn to_object<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// An experiment configuration. Built from TOML text, a TOML file, or the
/// defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => report::parse_config_str(t).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: report::parse_config(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    /// A domain id, or "all".
    #[getter]
    fn unseen(&self) -> String {
        self.inner.unseen.to_string()
    }

    #[setter]
    fn set_unseen(&mut self, unseen: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.unseen = match unseen.extract::<usize>() {
            Ok(i) => Unseen::Id(i),
            Err(_) => parse(&unseen.extract::<String>()?)?,
        };
        Ok(())
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
    }

    /// "memory" or "socket".
    #[getter]
    fn transport(&self) -> String {
        self.inner.transport.to_string()
    }

    #[setter]
    fn set_transport(&mut self, kind: &str) -> PyResult<()> {
        self.inner.transport = parse::<TransportKind>(kind)?;
        Ok(())
    }

    #[getter]
    fn parallel(&self) -> bool {
        self.inner.parallel
    }

    #[setter]
    fn set_parallel(&mut self, on: bool) {
        self.inner.parallel = on;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// The full configuration as nested dicts.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seeds={:?}, unseen={}, out={:?}, transport={})",
            self.inner.seeds,
            self.inner.unseen,
            self.inner.out,
            self.inner.transport
        )
    }
}

#[derive(Serialize)]
struct DatasetView<'a> {
    domain: usize,
    features: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

fn dataset_views(data: &[DomainDataset]) -> Vec<DatasetView<'_>> {
    data.iter()
        .map(|d| DatasetView {
            domain: d.domain,
            features: d.examples.iter().map(|e| e.features.as_slice()).collect(),
            labels: d.labels(),
        })
        .collect()
}

/// Per-domain features and labels for one seed. Writes `path` as CSV when
/// given.
#[pyfunction]
#[pyo3(signature = (config, seed=0, path=None))]
fn generate_data<'py>(py: Python<'py>, config: &PyConfig, seed: u64, path: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let data = match path {
        Some(p) => report::cmd_gen_data(&config.inner, seed, p),
        None => config.inner.datasets(seed),
    }
    .map_err(to_py)?;
    to_object(py, &dataset_views(&data))
}

/// Leave-one-domain-out runs of "lsi" or "fedavg". Writes metrics.csv,
/// comms.csv and report.json under the config's output directory and
/// returns the summary.
#[pyfunction]
#[pyo3(signature = (config, method="lsi"))]
fn run<'py>(py: Python<'py>, config: &PyConfig, method: &str) -> PyResult<Bound<'py, PyAny>> {
    let method = parse::<Method>(method)?;
    let cfg = config.inner.clone();
    let out = py.detach(move || report::cmd_run(&cfg, method)).map_err(to_py)?;
    to_object(py, &out.summary)
}

/// The 2x2 toggle grid; returns one row per variant.
#[pyfunction]
fn ablation<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let out = py.detach(move || report::cmd_ablation(&cfg)).map_err(to_py)?;
    to_object(py, &out.table)
}

/// Full pipeline over invariance weights; defaults to the standard grid.
#[pyfunction]
#[pyo3(signature = (config, values=None))]
fn sweep<'py>(py: Python<'py>, config: &PyConfig, values: Option<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let values = values.unwrap_or_else(|| report::DEFAULT_SWEEP.to_vec());
    let out = py.detach(move || report::cmd_sweep(&cfg, &values)).map_err(to_py)?;
    to_object(py, &out.table)
}

/// PCA exports of real and synthesized latents for one held-out domain.
#[pyfunction]
#[pyo3(signature = (config, unseen, seed=0, ablations=false))]
fn project<'py>(py: Python<'py>, config: &PyConfig, unseen: usize, seed: u64, ablations: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let variants = if ablations { ProjectVariants::all() } else { ProjectVariants::default() };
    let exports = py.detach(move || report::cmd_project(&cfg, seed, unseen, variants)).map_err(to_py)?;
    to_object(py, &exports)
}

/// Rebuilds the summary from `<out>/metrics.csv`.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &report::cmd_report(out).map_err(to_py)?)
}

/// Per-coordinate weights that sum to one across clients.
#[pyfunction]
fn normalize_importance(raw: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    federation::normalize_importance(&raw).map_err(to_py)
}

/// Uniform mean of the client vectors, or the importance-weighted
/// combination when `weights` is given.
#[pyfunction]
#[pyo3(signature = (params, weights=None))]
fn aggregate(params: Vec<Vec<f64>>, weights: Option<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    federation::aggregate(&params, weights.as_deref()).map_err(to_py)
}

fn msg_type(name: &str) -> PyResult<MsgType> {
    Ok(match name {
        "upload" => MsgType::ParamUpload,
        "broadcast" => MsgType::ParamBroadcast,
        "delivery" => MsgType::GeneratorDelivery,
        "ack" => MsgType::Ack,
        other => return Err(PyValueError::new_err(format!("unknown message type {other:?}"))),
    })
}

fn msg_name(t: MsgType) -> &'static str {
    match t {
        MsgType::ParamUpload => "upload",
        MsgType::ParamBroadcast => "broadcast",
        MsgType::GeneratorDelivery => "delivery",
        MsgType::Ack => "ack",
    }
}

fn part_id(name: &str) -> PyResult<PartId> {
    [PartId::Encoder, PartId::Head, PartId::Generator, PartId::Importance]
        .into_iter()
        .find(|p| p.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown part {name:?}")))
}

/// Encodes a parameter frame. `kind` is upload, broadcast or delivery;
/// `client` defaults to the server id.
#[pyfunction]
#[pyo3(signature = (kind, part, values, round, client=transport::SERVER))]
fn encode_frame<'py>(py: Python<'py>, kind: &str, part: &str, values: Vec<f64>, round: u32, client: u32) -> PyResult<Bound<'py, PyBytes>> {
    let blob = transport::encode_params(part_id(part)?, client, round, &values).map_err(to_py)?;
    let frame = Frame::params(msg_type(kind)?, &blob);
    frame.check().map_err(to_py)?;
    Ok(PyBytes::new(py, &frame.encode()))
}

#[derive(Serialize)]
struct FrameView {
    kind: &'static str,
    part: Option<&'static str>,
    client: Option<u32>,
    round: Option<u32>,
    values: Vec<f32>,
}

/// Decodes and validates one frame.
#[pyfunction]
fn decode_frame<'py>(py: Python<'py>, bytes: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    let frame = Frame::decode(bytes).map_err(to_py)?;
    let view = if frame.msg_type == MsgType::Ack {
        FrameView {
            kind: "ack",
            part: None,
            client: None,
            round: None,
            values: Vec::new(),
        }
    } else {
        let blob = frame.blob().map_err(to_py)?;
        FrameView {
            kind: msg_name(frame.msg_type),
            part: Some(blob.part.as_str()),
            client: Some(blob.client),
            round: Some(blob.round),
            values: blob.values,
        }
    };
    to_object(py, &view)
}

#[pymodule]
fn fedlsi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_importance, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add("SERVER", transport::SERVER)?;
    m.add("FRAME_OVERHEAD", transport::FRAME_OVERHEAD)?;
    Ok(())
}
