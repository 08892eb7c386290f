//! Python bindings: the pipeline workspace, trained models, and the scoring
//! and statistics primitives.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::NaiveDate;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pythonize::pythonize;
use serde::Serialize;

use hapi_core::claims::{PatientId, PatientRecord};
use hapi_core::hapi::{self as core_hapi, HapiConfig, Identifier, WeekGrid};
use hapi_core::pipeline::{
    CohortOptions, EvalIdOptions, FairnessOptions, FeatureOptions, Stage, StageReport, StageStatus,
    TrainIdOptions, Workspace as CoreWorkspace,
};
use hapi_core::risk::RiskTriage;
use hapi_core::stats;
use hapi_core::synth::GeneratorConfig;
use hapi_core::workflow;

create_exception!(hapi_py, HapiError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    HapiError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    Ok(pythonize(py, v)?)
}

fn date(s: &str) -> PyResult<NaiveDate> {
    s.parse()
        .map_err(|e| PyValueError::new_err(format!("bad date `{s}` (want YYYY-MM-DD): {e}")))
}

#[derive(Serialize)]
struct ReportView<'a> {
    stage: &'a str,
    status: &'a str,
    config_hash: &'a str,
    outputs: Vec<&'a str>,
}

fn report<'py>(py: Python<'py>, r: &StageReport) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &ReportView {
            stage: r.manifest.stage.as_str(),
            status: match r.status {
                StageStatus::Ran => "ran",
                StageStatus::UpToDate => "up_to_date",
            },
            config_hash: &r.manifest.config_hash,
            outputs: r.manifest.outputs.iter().map(|o| o.path.as_str()).collect(),
        },
    )
}

/// A data directory holding every pipeline artifact and manifest.
#[pyclass(frozen)]
struct Workspace {
    inner: CoreWorkspace,
}

#[pymethods]
impl Workspace {
    #[new]
    fn new(root: PathBuf) -> Self {
        Workspace {
            inner: CoreWorkspace::new(root),
        }
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root.clone()
    }

    #[pyo3(signature = (patients=2000, seed=1, force=false))]
    fn synth<'py>(
        &self,
        py: Python<'py>,
        patients: usize,
        seed: u64,
        force: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .synth(&GeneratorConfig::with_total(patients, seed), force)
            .map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (seed, roles=None, force=false))]
    fn cohort<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        roles: Option<PathBuf>,
        force: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .cohort(&CohortOptions { seed, roles }, force)
            .map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (seed, force=false))]
    fn features<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        force: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .features(&FeatureOptions::new(seed), force)
            .map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (force=false))]
    fn train_id<'py>(&self, py: Python<'py>, force: bool) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .train_id(&TrainIdOptions::default(), force)
            .map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (force=false))]
    fn train_risk<'py>(&self, py: Python<'py>, force: bool) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.train_risk(force).map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (taus=None, force=false))]
    fn eval_id<'py>(
        &self,
        py: Python<'py>,
        taus: Option<Vec<f64>>,
        force: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let options = EvalIdOptions {
            taus,
            ..EvalIdOptions::default()
        };
        let r = self.inner.eval_id(&options, force).map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (force=false))]
    fn eval_risk<'py>(&self, py: Python<'py>, force: bool) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.eval_risk(force).map_err(err)?;
        report(py, &r)
    }

    #[pyo3(signature = (min_group_size=None, force=false))]
    fn eval_fairness<'py>(
        &self,
        py: Python<'py>,
        min_group_size: Option<usize>,
        force: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut options = FairnessOptions::default();
        if let Some(n) = min_group_size {
            options.min_group_size = n;
        }
        let r = self.inner.eval_fairness(&options, force).map_err(err)?;
        report(py, &r)
    }

    /// Every stage in order; returns one status dict per stage.
    #[pyo3(signature = (patients=2000, seed=1, force=false))]
    fn run_all<'py>(
        &self,
        py: Python<'py>,
        patients: usize,
        seed: u64,
        force: bool,
    ) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let cfg = GeneratorConfig::with_total(patients, seed);
        let reports = py.detach(|| self.inner.run_all(&cfg, force)).map_err(err)?;
        reports.iter().map(|r| report(py, r)).collect()
    }

    /// The stage manifest as a dict, or None before the stage has run.
    fn manifest<'py>(&self, py: Python<'py>, stage: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
        let stage: Stage = serde_json::from_value(serde_json::Value::String(stage.to_string()))
            .map_err(|_| PyValueError::new_err(format!("unknown stage `{stage}`")))?;
        self.inner
            .manifest(stage)
            .map(|m| to_py(py, &m))
            .transpose()
    }

    /// Loads claims and trained models for scoring.
    fn models(&self) -> PyResult<Models> {
        let (_, records) = self.inner.load_records().map_err(err)?;
        let identifier = self.inner.load_identifier().map_err(err)?;
        let (triage, _) = self.inner.load_triage().map_err(err)?;
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.patient_id.clone(), i))
            .collect();
        Ok(Models {
            records,
            index,
            identifier,
            triage,
            grid: workflow::default_week_grid(),
        })
    }

    fn __repr__(&self) -> String {
        format!("Workspace({:?})", self.inner.root)
    }
}

/// Claims plus the trained identification and risk models.
#[pyclass(frozen)]
struct Models {
    records: Vec<PatientRecord>,
    index: BTreeMap<PatientId, usize>,
    identifier: Identifier,
    triage: RiskTriage,
    grid: WeekGrid,
}

impl Models {
    fn record(&self, id: &str) -> PyResult<&PatientRecord> {
        self.index
            .get(&PatientId::new(id))
            .map(|&i| &self.records[i])
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }
}

#[pymethods]
impl Models {
    /// The selected identification threshold.
    #[getter]
    fn tau(&self) -> f64 {
        self.identifier.config.tau
    }

    fn patient_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.patient_id.to_string())
            .collect()
    }

    /// Weekly scores and the inferred episode from the first claim through
    /// `until` (default: the last claim).
    #[pyo3(signature = (patient_id, until=None))]
    fn timeline<'py>(
        &self,
        py: Python<'py>,
        patient_id: &str,
        until: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let record = self.record(patient_id)?;
        let until = until.map(date).transpose()?;
        let t = self.identifier.run_patient(record, &self.grid, until, None);
        to_py(py, &t)
    }

    /// Complication probabilities and evidence for an episode starting at
    /// `t_start`, using claims through `as_of`.
    fn predict_risk<'py>(
        &self,
        py: Python<'py>,
        patient_id: &str,
        t_start: &str,
        as_of: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let record = self.record(patient_id)?;
        let (prediction, evidence) =
            self.triage
                .predict_with_evidence(record, date(t_start)?, date(as_of)?);
        #[derive(Serialize)]
        struct View {
            prediction: hapi_core::risk::RiskPrediction,
            evidence: Vec<hapi_core::risk::EvidenceItem>,
        }
        to_py(
            py,
            &View {
                prediction,
                evidence,
            },
        )
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }
}

/// Exponentially weighted moving average over the trailing window.
#[pyfunction]
#[pyo3(signature = (f, window=None, decay=None))]
fn ema_smooth(f: Vec<f64>, window: Option<usize>, decay: Option<f64>) -> Vec<f64> {
    let d = HapiConfig::default();
    core_hapi::ema_smooth(
        &f,
        window.unwrap_or(d.ema_window),
        decay.unwrap_or(d.ema_decay),
    )
}

#[pyfunction]
fn binarize(q: Vec<f64>, tau: f64) -> Vec<bool> {
    core_hapi::binarize(&q, tau)
}

/// Model-only (start, end) indices of the episode.
#[pyfunction]
#[pyo3(signature = (q, y, confirm_steps=None))]
fn model_episode(
    q: Vec<f64>,
    y: Vec<bool>,
    confirm_steps: Option<usize>,
) -> PyResult<(Option<usize>, Option<usize>)> {
    if q.len() != y.len() {
        return Err(PyValueError::new_err("q and y differ in length"));
    }
    Ok(core_hapi::model_episode(
        &q,
        &y,
        confirm_steps.unwrap_or(HapiConfig::default().confirm_steps),
    ))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    stats::auc(&scores, &labels).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Wilson score interval as (low, high).
#[pyfunction]
#[pyo3(signature = (successes, n, level=0.95))]
fn wilson_interval(successes: u64, n: u64, level: f64) -> PyResult<(f64, f64)> {
    let ci = stats::wilson_interval(successes, n, level)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((ci.low, ci.high))
}

/// McNemar chi-square on discordant counts as (statistic, p_value).
#[pyfunction]
fn mcnemar(b: u64, c: u64) -> PyResult<(f64, f64)> {
    let t = stats::mcnemar(b, c).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((t.statistic, t.p_value))
}

#[pymodule]
fn hapi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HapiError", m.py().get_type::<HapiError>())?;
    m.add_class::<Workspace>()?;
    m.add_class::<Models>()?;
    m.add_function(wrap_pyfunction!(ema_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(model_episode, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_parse_iso_only() {
        assert_eq!(
            date("2020-02-29").unwrap(),
            NaiveDate::from_ymd_opt(2020, 2, 29).unwrap()
        );
        assert!(date("02/29/2020").is_err());
    }
}
