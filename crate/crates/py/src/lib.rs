//! Python bindings: tensors, the process mesh, token partitioning, the
//! simulated unified attention, the cost model and the planner.
//!
//! Structured inputs (model, cluster, strategy, plan options) are plain
//! dicts with the same fields as the JSON configs; structured results come
//! back as dicts.

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use usp_core::costmodel::{self, ClusterConfig, ModelConfig, RankLayout, Strategy};
use usp_core::numerics::{self, Dims4};
use usp_core::planner::{self, PlanOptions};
use usp_core::simcomm;
use usp_core::usp::{self, SimulateConfig};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid {what}: {e}")))
}

/// Dense `(bs, seq, heads, head_size)` float64 tensor.
#[pyclass(name = "Tensor4", module = "usp_sim", frozen)]
struct PyTensor4 {
    inner: numerics::Tensor4<f64>,
}

fn dims_of(shape: (usize, usize, usize, usize)) -> Dims4 {
    Dims4::new(shape.0, shape.1, shape.2, shape.3)
}

#[pymethods]
impl PyTensor4 {
    /// Row-major values for `shape`.
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        let inner = numerics::Tensor4::new(dims_of(shape), data).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        let inner = numerics::Tensor4::zeros(dims_of(shape)).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.bs, d.seq, d.heads, d.head_size)
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, b: usize, i: usize, h: usize, c: usize) -> PyResult<f64> {
        let d = self.inner.dims();
        if b >= d.bs || i >= d.seq || h >= d.heads || c >= d.head_size {
            return Err(PyIndexError::new_err(format!("index out of range for {d}")));
        }
        Ok(self.inner.get(b, i, h, c))
    }

    fn max_abs_diff(&self, other: &PyTensor4) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor4{:?}", self.shape())
    }
}

/// `ulysses × ring` mesh; rank `r·U + u` sits in Ulysses row `r`, ring column `u`.
#[pyclass(name = "ProcessMesh", module = "usp_sim", frozen)]
struct PyProcessMesh {
    inner: simcomm::ProcessMesh,
}

impl PyProcessMesh {
    fn check_rank(&self, rank: usize) -> PyResult<()> {
        if rank >= self.inner.world_size() {
            return Err(PyIndexError::new_err(format!(
                "rank {rank} outside world of {}",
                self.inner.world_size()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl PyProcessMesh {
    #[new]
    fn new(ulysses: usize, ring: usize) -> PyResult<Self> {
        let inner = simcomm::ProcessMesh::new(ulysses, ring).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn ulysses(&self) -> usize {
        self.inner.ulysses_degree()
    }

    #[getter]
    fn ring(&self) -> usize {
        self.inner.ring_degree()
    }

    #[getter]
    fn world_size(&self) -> usize {
        self.inner.world_size()
    }

    /// `(ulysses_rank, ring_rank)` of `rank`.
    fn coords(&self, rank: usize) -> PyResult<(usize, usize)> {
        self.check_rank(rank)?;
        Ok(self.inner.coords(rank))
    }

    fn rank_of(&self, ulysses_rank: usize, ring_rank: usize) -> PyResult<usize> {
        if ulysses_rank >= self.inner.ulysses_degree() || ring_rank >= self.inner.ring_degree() {
            return Err(PyIndexError::new_err("coordinates outside the mesh"));
        }
        Ok(self.inner.rank_of(ulysses_rank, ring_rank))
    }

    fn ulysses_group(&self, rank: usize) -> PyResult<Vec<usize>> {
        self.check_rank(rank)?;
        Ok(self.inner.ulysses_group_of(rank).members().to_vec())
    }

    fn ring_group(&self, rank: usize) -> PyResult<Vec<usize>> {
        self.check_rank(rank)?;
        Ok(self.inner.ring_group_of(rank).members().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "ProcessMesh(ulysses={}, ring={})",
            self.inner.ulysses_degree(),
            self.inner.ring_degree()
        )
    }
}

/// Token indices per ring rank: rank `r` holds chunks `r` and `2R−1−r`.
#[pyfunction]
fn zigzag_partition(seq_len: usize, ring: usize) -> PyResult<Vec<Vec<usize>>> {
    usp::zigzag_partition(seq_len, ring).map_err(value_error)
}

#[pyfunction]
fn even_partition(seq_len: usize, ring: usize) -> PyResult<Vec<Vec<usize>>> {
    usp::even_partition(seq_len, ring).map_err(value_error)
}

/// Causal `(query, key)` pairs each rank computes.
#[pyfunction]
fn causal_workload(assignment: Vec<Vec<usize>>, seq_len: usize) -> Vec<u64> {
    usp::causal_workload(&assignment, seq_len)
}

#[pyfunction]
#[pyo3(signature = (q, k, v, causal=false))]
fn reference_attention(q: &PyTensor4, k: &PyTensor4, v: &PyTensor4, causal: bool) -> PyResult<PyTensor4> {
    let inner = numerics::reference_attention(&q.inner, &k.inner, &v.inner, causal, None)
        .map_err(value_error)?;
    Ok(PyTensor4 { inner })
}

/// Seeded `(q, k, v, d_out)` with values uniform in `[-1, 1)`.
#[pyfunction]
fn seeded_inputs(
    bs: usize,
    seq_len: usize,
    heads: usize,
    kv_heads: usize,
    head_size: usize,
    seed: u64,
) -> PyResult<(PyTensor4, PyTensor4, PyTensor4, PyTensor4)> {
    let x = usp::seeded_inputs::<f64>(bs, seq_len, heads, kv_heads, head_size, seed)
        .map_err(value_error)?;
    Ok((
        PyTensor4 { inner: x.q },
        PyTensor4 { inner: x.k },
        PyTensor4 { inner: x.v },
        PyTensor4 { inner: x.d_out },
    ))
}

/// Unified attention over simulated ranks. Returns a dict with `output`,
/// optional `dq`/`dk`/`dv` and the per-rank `ledger` entries.
#[pyfunction]
#[pyo3(signature = (q, k, v, mesh, causal=false, d_out=None))]
fn usp_attention<'py>(
    py: Python<'py>,
    q: &PyTensor4,
    k: &PyTensor4,
    v: &PyTensor4,
    mesh: &PyProcessMesh,
    causal: bool,
    d_out: Option<&PyTensor4>,
) -> PyResult<Bound<'py, PyDict>> {
    let run = py
        .detach(|| {
            usp::run_usp(
                mesh.inner,
                &q.inner,
                &k.inner,
                &v.inner,
                d_out.map(|t| &t.inner),
                causal,
            )
        })
        .map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("output", PyTensor4 { inner: run.output })?;
    if let Some(g) = run.grads {
        out.set_item("dq", PyTensor4 { inner: g.dq })?;
        out.set_item("dk", PyTensor4 { inner: g.dk })?;
        out.set_item("dv", PyTensor4 { inner: g.dv })?;
    }
    out.set_item("ledger", to_py(py, &run.ledger.entries())?)?;
    Ok(out)
}

/// Fwd + bwd on seeded inputs; `config` has the fields of the CLI's
/// `simulate` report config.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SimulateConfig = from_py(config, "simulate config")?;
    let result = py.detach(|| usp::simulate(&cfg)).map_err(value_error)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (model, strategy, cluster=None))]
fn cost<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    strategy: &Bound<'py, PyAny>,
    cluster: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let model: ModelConfig = from_py(model, "model")?;
    let strategy: Strategy = from_py(strategy, "strategy")?;
    let cluster: Option<ClusterConfig> = cluster.map(|c| from_py(c, "cluster")).transpose()?;
    let report = costmodel::cost_report(&strategy, &model, cluster.as_ref()).map_err(value_error)?;
    to_py(py, &report)
}

/// The reference strategy table for `devices`, as `(rows, text)`.
#[pyfunction]
fn cost_table<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    devices: u64,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let model: ModelConfig = from_py(model, "model")?;
    let table = costmodel::table2(&model, devices).map_err(value_error)?;
    Ok((to_py(py, &table)?, table.to_string()))
}

/// Ranked feasible plans plus the rejection tally.
#[pyfunction]
#[pyo3(signature = (model, cluster, options=None, top=10))]
fn plan<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    cluster: &Bound<'py, PyAny>,
    options: Option<&Bound<'py, PyAny>>,
    top: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let model: ModelConfig = from_py(model, "model")?;
    let cluster: ClusterConfig = from_py(cluster, "cluster")?;
    model.validate().map_err(value_error)?;
    cluster.validate().map_err(value_error)?;
    let options: PlanOptions = match options {
        Some(o) => from_py(o, "plan options")?,
        None => PlanOptions::default(),
    };
    let e = planner::enumerate_strategies(&model, &cluster, &options);
    let mut plans = planner::rank_plans(&e.candidates);
    plans.truncate(top);
    let tally: std::collections::BTreeMap<&str, usize> =
        e.tally().iter().map(|(r, n)| (r.id(), *n)).collect();
    let out = PyDict::new(py);
    out.set_item("candidates", e.candidates.len())?;
    out.set_item("plans", to_py(py, &plans)?)?;
    out.set_item("rejections", to_py(py, &tally)?)?;
    Ok(out)
}

#[pyfunction]
fn check_feasibility<'py>(
    py: Python<'py>,
    strategy: &Bound<'py, PyAny>,
    model: &Bound<'py, PyAny>,
    cluster: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let strategy: Strategy = from_py(strategy, "strategy")?;
    let model: ModelConfig = from_py(model, "model")?;
    let cluster: ClusterConfig = from_py(cluster, "cluster")?;
    to_py(py, &planner::check_feasibility(&strategy, &model, &cluster))
}

/// Rank layout string and the coordinates of every rank.
#[pyfunction]
fn group_order<'py>(
    py: Python<'py>,
    strategy: &Bound<'py, PyAny>,
) -> PyResult<(String, Bound<'py, PyAny>)> {
    let strategy: Strategy = from_py(strategy, "strategy")?;
    strategy.validate().map_err(value_error)?;
    let layout = RankLayout::new(strategy);
    let coords: Vec<_> = (0..layout.world_size()).map(|r| layout.coords(r)).collect();
    Ok((layout.to_string(), to_py(py, &coords)?))
}

#[pymodule]
fn usp_sim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor4>()?;
    m.add_class::<PyProcessMesh>()?;
    m.add_function(wrap_pyfunction!(zigzag_partition, m)?)?;
    m.add_function(wrap_pyfunction!(even_partition, m)?)?;
    m.add_function(wrap_pyfunction!(causal_workload, m)?)?;
    m.add_function(wrap_pyfunction!(reference_attention, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_inputs, m)?)?;
    m.add_function(wrap_pyfunction!(usp_attention, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(cost_table, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(check_feasibility, m)?)?;
    m.add_function(wrap_pyfunction!(group_order, m)?)?;
    Ok(())
}
