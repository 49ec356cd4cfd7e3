//! Python bindings for `survdtr`. Configs travel as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use survdtr::simbench::{self, Design};
use survdtr::{FitConfig, PropensityLookup, PropensitySource, Regime, TimeGrid, TuningGrid};

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(py_err),
        None => Ok(T::default()),
    }
}

/// A set of right-censored multi-stage trajectories.
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset(survdtr::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn read_dir(path: PathBuf) -> PyResult<Self> {
        survdtr::Dataset::read_dir(&path).map(Self).map_err(py_err)
    }

    fn write_dir(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_dir(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn p(&self) -> usize {
        self.0.p()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn censoring_rate(&self) -> f64 {
        self.0.censoring_rate()
    }

    fn ids(&self) -> Vec<String> {
        self.0.trajectories().iter().map(|t| t.id.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, p={}, K={})",
            self.0.len(),
            self.0.p(),
            self.0.k()
        )
    }
}

/// Vertices of the regular simplex used to code `K` treatments.
#[pyclass(name = "SimplexCode")]
struct PySimplexCode(survdtr::SimplexCode);

#[pymethods]
impl PySimplexCode {
    #[new]
    fn new(k: usize) -> PyResult<Self> {
        survdtr::SimplexCode::new(k).map(Self).map_err(py_err)
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        self.0.vertices().to_vec()
    }

    /// 1-based treatment whose vertex has the largest inner product with `f`.
    fn recommend(&self, f: Vec<f64>) -> PyResult<usize> {
        self.0.recommend(&f).map_err(py_err)
    }
}

/// Learned stage-wise linear decision rules.
#[pyclass(name = "Policy")]
#[derive(Clone)]
struct PyPolicy(survdtr::PolicySet);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(Self).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(py_err)
    }

    #[getter]
    fn m_g(&self) -> usize {
        self.0.m_g()
    }

    fn theta(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    /// Treatment recommended to every subject of `data` at `stage`, or `None`
    /// where the subject never reached it.
    fn decide(&self, data: &PyDataset, stage: usize) -> PyResult<Vec<Option<usize>>> {
        data.0
            .trajectories()
            .iter()
            .map(|t| {
                if t.n_stages() < stage {
                    Ok(None)
                } else {
                    self.0.decide(t, stage).map(Some).map_err(py_err)
                }
            })
            .collect()
    }
}

/// Draws `n` subjects from simulation example `example` with censoring
/// calibrated to `censor_rate`. Returns the data and the ground truth as JSON.
#[pyfunction]
#[pyo3(signature = (example, n, censor_rate, seed = 0))]
fn simulate(example: u8, n: usize, censor_rate: f64, seed: u64) -> PyResult<(PyDataset, String)> {
    let design = Design::example(example);
    design.validate().map_err(py_err)?;
    let c0 = simbench::calibrate_c0(&design, censor_rate, survdtr::derive_seed(seed, 0))
        .map_err(py_err)?;
    let (data, truth) =
        simbench::simulate(&design, n, c0, survdtr::derive_seed(seed, 1)).map_err(py_err)?;
    let truth = serde_json::to_string(&truth).map_err(py_err)?;
    Ok((PyDataset(data), truth))
}

/// Fits a regime. Returns the policy and a JSON summary of the ascent.
#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn fit(py: Python<'_>, data: &PyDataset, config: Option<&str>) -> PyResult<(PyPolicy, String)> {
    let config: FitConfig = parse(config)?;
    let (result, _) = py
        .allow_threads(|| survdtr::fit(&data.0, &config))
        .map_err(py_err)?;
    let summary =
        serde_json::to_string(&survdtr::optimizer::FitSummary::from(&result)).map_err(py_err)?;
    Ok((PyPolicy(result.policy), summary))
}

/// Hard IPW Kaplan-Meier survival at `t_g` under `policy`.
#[pyfunction]
#[pyo3(signature = (policy, data, t_g, propensity = None))]
fn evaluate(
    policy: &PyPolicy,
    data: &PyDataset,
    t_g: f64,
    propensity: Option<&str>,
) -> PyResult<f64> {
    let source: PropensitySource = match propensity {
        Some(s) => serde_json::from_str(s).map_err(py_err)?,
        None => PropensitySource::Uniform,
    };
    let grid = TimeGrid::build(&data.0, t_g).map_err(py_err)?;
    let prop =
        PropensityLookup::resolve(&source, &data.0, grid.decision_stages()).map_err(py_err)?;
    survdtr::km_value_hard(&data.0, &policy.0, &prop, &grid).map_err(py_err)
}

/// Cross-validates `(b, lambda)`. Returns `(b, lambda, best_score)`.
#[pyfunction]
#[pyo3(signature = (data, grid, config = None))]
fn cross_validate(
    py: Python<'_>,
    data: &PyDataset,
    grid: &str,
    config: Option<&str>,
) -> PyResult<(f64, f64, f64)> {
    let grid: TuningGrid = serde_json::from_str(grid).map_err(py_err)?;
    let config: FitConfig = parse(config)?;
    let out = py
        .allow_threads(|| survdtr::cross_validate(&data.0, &grid, &config))
        .map_err(py_err)?;
    Ok((out.b, out.lambda, out.best_score))
}

#[pymodule]
fn pysurvdtr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", survdtr::VERSION)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySimplexCode>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    Ok(())
}
