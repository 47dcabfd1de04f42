//! Python bindings: subject matching, filter evaluation, percentiles and an
//! in-process broker that the load harness can be pointed at.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use servicenet::broker::{serve, Broker as CoreBroker, BrokerConfig, BrokerServer};
use servicenet::loadgen::{self, LoadOptions, Op, RunStats, Scenario};
use servicenet::model::GeoPoint;
use servicenet::peer::filter::evaluate;
use servicenet::peer::{Filter, PeerProfile, Verdict};
use servicenet::pubsub::{match_subject, AttrValue, Envelope, Subject, SubjectPattern};

fn runtime() -> &'static tokio::runtime::Runtime {
    static RT: OnceLock<tokio::runtime::Runtime> = OnceLock::new();
    RT.get_or_init(|| {
        tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime")
    })
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Nearest-rank percentile of `samples` for `q` in (0, 1].
#[pyfunction]
fn percentile(samples: Vec<f64>, q: f64) -> PyResult<f64> {
    loadgen::percentile(&samples, q).map_err(value_err)
}

/// Whether a subscription pattern (`*`, `>` wildcards) matches a subject.
#[pyfunction]
fn subject_matches(pattern: &str, subject: &str) -> PyResult<bool> {
    let p: SubjectPattern = pattern.parse().map_err(value_err)?;
    let s: Subject = subject.parse().map_err(value_err)?;
    Ok(match_subject(&p, &s))
}

/// Great-circle distance in kilometres.
#[pyfunction]
fn distance_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    servicenet::model::distance_km(lat1, lon1, lat2, lon2).map_err(value_err)
}

#[derive(FromPyObject)]
enum Attr {
    // bool first: Python bools are ints too.
    Bool(bool),
    Num(f64),
    Str(String),
}

/// Run filters against a message and return the gateway verdict:
/// `accept`, `no_match`, `rejected` or `missing_attr`.
#[pyfunction]
#[pyo3(signature = (filters, subject, attrs, location=None))]
fn filter_verdict(
    filters: Vec<String>,
    subject: &str,
    attrs: BTreeMap<String, Attr>,
    location: Option<(f64, f64)>,
) -> PyResult<&'static str> {
    let filters: Vec<Filter> = filters.iter().map(|f| f.parse()).collect::<Result<_, _>>().map_err(value_err)?;
    let attrs = attrs
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                Attr::Bool(b) => AttrValue::Bool(b),
                Attr::Num(n) => AttrValue::Num(n),
                Attr::Str(s) => AttrValue::Str(s),
            };
            (k, v)
        })
        .collect();
    let me = PeerProfile {
        location: location.map(|(lat, lon)| GeoPoint::new(lat, lon)).transpose().map_err(value_err)?,
    };
    let env = Envelope::new(subject.parse().map_err(value_err)?, "PEER00".parse().map_err(value_err)?, attrs, Vec::new());
    Ok(match evaluate(&filters, &env, &me) {
        Verdict::Accept => "accept",
        Verdict::NoMatch => "no_match",
        Verdict::Rejected => "rejected",
        Verdict::MissingAttr => "missing_attr",
    })
}

fn stats_dict<'py>(py: Python<'py>, s: &RunStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("op", s.op.as_str())?;
    d.set_item("rate", s.rate)?;
    d.set_item("samples", s.samples)?;
    d.set_item("mean_ms", s.mean_ms)?;
    d.set_item("median_ms", s.median_ms)?;
    d.set_item("p95_ms", s.p95_ms)?;
    d.set_item("p99_ms", s.p99_ms)?;
    d.set_item("throughput_rps", s.throughput_rps)?;
    d.set_item("errors", s.errors)?;
    d.set_item("faults", s.faults)?;
    Ok(d)
}

/// Drive `op` (REGISTER, LOGIN or FETCH_PEERS) at `rate` clients per second
/// and return the statistics averaged over `repeats` runs.
#[pyfunction]
#[pyo3(signature = (url, op, rate, duration_s, repeats=5, seed=None))]
fn run_scenario<'py>(
    py: Python<'py>,
    url: String,
    op: &str,
    rate: f64,
    duration_s: f64,
    repeats: usize,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let op: Op = op.parse().map_err(value_err)?;
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(PyValueError::new_err("duration_s must be a non-negative number"));
    }
    let mut scenario = Scenario::new(op, rate, Duration::from_secs_f64(duration_s));
    scenario.repeats = repeats;
    let mut opts = LoadOptions::default();
    if let Some(s) = seed {
        opts.seed = s;
    }
    let result = py
        .detach(|| runtime().block_on(loadgen::run_scenario(&scenario, &url, &opts)))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    stats_dict(py, &result.stats)
}

/// A broker serving on a loopback port inside this process.
#[pyclass]
struct Broker {
    server: Option<BrokerServer>,
    url: String,
}

#[pymethods]
impl Broker {
    #[new]
    #[pyo3(signature = (pool_cap=500, db_delay_ms=0, db_path=None))]
    fn new(py: Python<'_>, pool_cap: usize, db_delay_ms: u64, db_path: Option<String>) -> PyResult<Self> {
        if pool_cap == 0 {
            return Err(PyValueError::new_err("pool_cap must be positive"));
        }
        let config = BrokerConfig {
            db_path: db_path.map(Into::into),
            pool_cap,
            db_delay: Duration::from_millis(db_delay_ms),
            ..Default::default()
        };
        let server = py
            .detach(|| {
                runtime().block_on(async {
                    let broker = CoreBroker::open(config).map_err(|e| e.to_string())?;
                    serve(broker, "127.0.0.1:0".parse().unwrap()).await.map_err(|e| e.to_string())
                })
            })
            .map_err(PyRuntimeError::new_err)?;
        let url = server.url();
        Ok(Broker {
            server: Some(server),
            url,
        })
    }

    #[getter]
    fn url(&self) -> &str {
        &self.url
    }

    /// Number of registered peers.
    fn registered(&self) -> PyResult<usize> {
        Ok(self.live()?.broker().registry().len())
    }

    fn pool_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.live()?.broker().pool_stats();
        let d = PyDict::new(py);
        d.set_item("capacity", s.capacity)?;
        d.set_item("in_use", s.in_use)?;
        d.set_item("high_water", s.high_water)?;
        d.set_item("acquisitions", s.acquisitions)?;
        Ok(d)
    }

    fn close(&mut self, py: Python<'_>) {
        if let Some(server) = self.server.take() {
            py.detach(|| runtime().block_on(server.shutdown()));
        }
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(&mut self, py: Python<'_>, _ty: Py<PyAny>, _value: Py<PyAny>, _tb: Py<PyAny>) {
        self.close(py);
    }
}

impl Broker {
    fn live(&self) -> PyResult<&BrokerServer> {
        self.server.as_ref().ok_or_else(|| PyRuntimeError::new_err("broker is closed"))
    }
}

#[pymodule]
fn servicenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(subject_matches, m)?)?;
    m.add_function(wrap_pyfunction!(distance_km, m)?)?;
    m.add_function(wrap_pyfunction!(filter_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_class::<Broker>()?;
    Ok(())
}
