//! Sparse L1 / elastic-net logistic regression (binary and one-vs-rest
//! multiclass), grid search and decision-threshold selection.

mod grid;
mod solver;
mod threshold;

pub use grid::{
    grid_search, identification_grid, risk_elastic_net_grid, risk_lasso_grid, GridResult, GridRow,
    Selection,
};
pub use solver::{fit_binary, loss_gradient, objective, penalty_strengths, BinaryFit, Csc};
pub use threshold::{select_threshold, ThresholdRule};

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::features::{DesignMatrix, FeatureKey, FeatureVocabulary, SparseExample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GlmError {
    #[error("training data must contain at least two classes")]
    SingleClass,
    #[error("training data is empty")]
    Empty,
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary fingerprint mismatch: model {model}, data {data}")]
    Fingerprint { model: String, data: String },
    #[error("threshold selection needs both classes")]
    ThresholdOneClass,
    #[error("every grid candidate failed")]
    AllCandidatesFailed,
    #[error("model artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "penalty", rename_all = "snake_case")]
pub enum Penalty {
    L1,
    ElasticNet { l1_ratio: f64 },
}

impl Penalty {
    pub fn l1_ratio(self) -> f64 {
        match self {
            Penalty::L1 => 1.0,
            Penalty::ElasticNet { l1_ratio } => l1_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InversePrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    #[serde(flatten)]
    pub penalty: Penalty,
    #[serde(rename = "C")]
    pub c: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub class_weighting: ClassWeighting,
}

impl GlmConfig {
    pub fn lasso(c: f64, tolerance: f64) -> Self {
        GlmConfig {
            penalty: Penalty::L1,
            c,
            tolerance,
            max_iters: 1000,
            class_weighting: ClassWeighting::None,
        }
    }

    pub fn with_weighting(mut self, w: ClassWeighting) -> Self {
        self.class_weighting = w;
        self
    }

    pub fn validate(&self) -> Result<(), GlmError> {
        let bad = |m: &str| Err(GlmError::Config(m.to_string()));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("C must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if let Penalty::ElasticNet { l1_ratio } = self.penalty {
            if !(l1_ratio > 0.0 && l1_ratio < 1.0) {
                return bad("l1_ratio must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Per-class weights `1 / p(y_j)` from the empirical class proportions.
pub fn inverse_prior_weights(labels: &[u8], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / c as f64 })
        .collect()
}

/// Exactly the nonzero weights of one decision function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseWeights {
    pub index: Vec<u32>,
    pub value: Vec<f64>,
}

impl SparseWeights {
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut out = SparseWeights::default();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                out.index.push(i as u32);
                out.value.push(v);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.index.len()
    }

    fn to_text(&self) -> String {
        self.index
            .iter()
            .zip(&self.value)
            .map(|(i, v)| format!("{i}:{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn from_text(s: &str) -> Result<Self, GlmError> {
        let mut out = SparseWeights::default();
        for tok in s.split_whitespace() {
            let parsed = tok
                .split_once(':')
                .and_then(|(i, v)| Some((i.parse::<u32>().ok()?, v.parse::<f64>().ok()?)));
            let (i, v) = parsed.ok_or_else(|| GlmError::Artifact(format!("bad weight `{tok}`")))?;
            if out.index.last().is_some_and(|&p| p >= i) || v == 0.0 {
                return Err(GlmError::Artifact(
                    "weights must be increasing nonzeros".into(),
                ));
            }
            out.index.push(i);
            out.value.push(v);
        }
        Ok(out)
    }
}

/// A fitted model. Binary models carry one decision function, multiclass
/// models one per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub fingerprint: String,
    pub n_features: usize,
    pub n_classes: usize,
    pub weights: Vec<SparseWeights>,
    pub intercepts: Vec<f64>,
    pub threshold: Option<f64>,
    pub config: GlmConfig,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    dense: OnceLock<Vec<Vec<f64>>>,
}

impl LinearModel {
    pub fn new(
        fingerprint: String,
        n_features: usize,
        n_classes: usize,
        weights: Vec<SparseWeights>,
        intercepts: Vec<f64>,
        config: GlmConfig,
    ) -> Self {
        LinearModel {
            fingerprint,
            n_features,
            n_classes,
            weights,
            intercepts,
            threshold: None,
            config,
            converged: true,
            iterations: 0,
            dense: OnceLock::new(),
        }
    }

    fn dense(&self) -> &[Vec<f64>] {
        self.dense.get_or_init(|| {
            self.weights
                .iter()
                .map(|sw| {
                    let mut d = vec![0.0; self.n_features];
                    for (&i, &v) in sw.index.iter().zip(&sw.value) {
                        d[i as usize] = v;
                    }
                    d
                })
                .collect()
        })
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.iter().map(|w| w.nnz()).sum()
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<(), GlmError> {
        if fingerprint != self.fingerprint {
            return Err(GlmError::Fingerprint {
                model: self.fingerprint.clone(),
                data: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Decision values `w_k . x + b_k` for each decision function.
    pub fn margins(&self, ex: &SparseExample) -> Vec<f64> {
        self.dense()
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| {
                b + ex
                    .iter()
                    .filter(|(c, _)| (*c as usize) < w.len())
                    .map(|(c, v)| w[c as usize] * v)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Class probabilities; binary models return `[1 - p, p]`, multiclass
    /// models normalize the per-class sigmoids.
    pub fn predict_proba(&self, ex: &SparseExample) -> Vec<f64> {
        let m = self.margins(ex);
        if self.n_classes == 2 {
            let p = solver::sigmoid(m[0]);
            return vec![1.0 - p, p];
        }
        let s: Vec<f64> = m.iter().map(|&z| solver::sigmoid(z)).collect();
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            s.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / self.n_classes as f64; self.n_classes]
        }
    }

    pub fn predict_proba_checked(
        &self,
        ex: &SparseExample,
        fingerprint: &str,
    ) -> Result<Vec<f64>, GlmError> {
        self.check_fingerprint(fingerprint)?;
        Ok(self.predict_proba(ex))
    }

    /// Positive-class probability of a binary model.
    pub fn score(&self, ex: &SparseExample) -> f64 {
        *self.predict_proba(ex).last().expect("at least two classes")
    }

    pub fn predict_matrix(&self, m: &DesignMatrix) -> Result<Vec<Vec<f64>>, GlmError> {
        self.check_fingerprint(&m.fingerprint)?;
        Ok(m.rows.iter().map(|r| self.predict_proba(r)).collect())
    }

    pub fn predict_class(&self, ex: &SparseExample) -> usize {
        argmax(&self.predict_proba(ex))
    }

    /// Weights of class `class` (ignored for binary models).
    pub fn class_weights(&self, class: usize) -> &SparseWeights {
        if self.weights.len() == 1 {
            &self.weights[0]
        } else {
            &self.weights[class]
        }
    }

    /// Up to `k` nonzero weights of `class` passing `keep`, by descending
    /// magnitude with ties broken by column index.
    pub fn top_weighted_columns(
        &self,
        k: usize,
        class: usize,
        keep: impl Fn(u32) -> bool,
    ) -> Vec<(u32, f64)> {
        let w = self.class_weights(class);
        let mut all: Vec<(u32, f64)> = w
            .index
            .iter()
            .copied()
            .zip(w.value.iter().copied())
            .filter(|(c, _)| keep(*c))
            .collect();
        all.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    pub fn top_weighted_features(
        &self,
        vocab: &FeatureVocabulary,
        k: usize,
        class: Option<usize>,
    ) -> Vec<(FeatureKey, f64)> {
        self.top_weighted_columns(k, class.unwrap_or(0), |_| true)
            .into_iter()
            .filter_map(|(c, w)| vocab.key(c).map(|key| (key, w)))
            .collect()
    }

    pub fn to_artifact(&self, grid: Option<&GridResult>) -> ModelArtifact {
        ModelArtifact {
            format: ARTIFACT_FORMAT.to_string(),
            fingerprint: self.fingerprint.clone(),
            n_features: self.n_features,
            n_classes: self.n_classes,
            config: self.config,
            intercepts: self.intercepts.clone(),
            weights: self.weights.iter().map(|w| w.to_text()).collect(),
            threshold: self.threshold,
            converged: self.converged,
            iterations: self.iterations,
            grid: grid.cloned(),
        }
    }

    pub fn from_artifact(a: &ModelArtifact) -> Result<Self, GlmError> {
        if a.format != ARTIFACT_FORMAT {
            return Err(GlmError::Artifact(format!("unknown format `{}`", a.format)));
        }
        let weights = a
            .weights
            .iter()
            .map(|s| SparseWeights::from_text(s))
            .collect::<Result<Vec<_>, _>>()?;
        let expected = if a.n_classes == 2 { 1 } else { a.n_classes };
        if weights.len() != expected || a.intercepts.len() != expected {
            return Err(GlmError::Artifact(
                "weight/intercept count does not match classes".into(),
            ));
        }
        if weights
            .iter()
            .any(|w| w.index.last().is_some_and(|&i| i as usize >= a.n_features))
        {
            return Err(GlmError::Artifact("weight index out of range".into()));
        }
        let mut m = LinearModel::new(
            a.fingerprint.clone(),
            a.n_features,
            a.n_classes,
            weights,
            a.intercepts.clone(),
            a.config,
        );
        m.threshold = a.threshold;
        m.converged = a.converged;
        m.iterations = a.iterations;
        Ok(m)
    }

    pub fn to_json(&self, grid: Option<&GridResult>) -> String {
        serde_json::to_string_pretty(&self.to_artifact(grid)).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<(Self, Option<GridResult>), GlmError> {
        let a: ModelArtifact =
            serde_json::from_str(s).map_err(|e| GlmError::Artifact(e.to_string()))?;
        Ok((Self::from_artifact(&a)?, a.grid))
    }
}

pub const ARTIFACT_FORMAT: &str = "hapi-linear-model/1";

/// On-disk model: weights are `index:weight` strings per decision function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub fingerprint: String,
    pub n_features: usize,
    pub n_classes: usize,
    pub config: GlmConfig,
    pub intercepts: Vec<f64>,
    pub weights: Vec<String>,
    pub threshold: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grid: Option<GridResult>,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits `matrix` under `config`. Two-class data yields a single binary
/// decision function; more classes are fit one-vs-rest.
pub fn fit(matrix: &DesignMatrix, config: &GlmConfig) -> Result<LinearModel, GlmError> {
    config.validate()?;
    if matrix.is_empty() {
        return Err(GlmError::Empty);
    }
    let labels = matrix.labels();
    let n_classes = matrix.n_classes.max(2);
    if labels.iter().any(|&l| l as usize >= n_classes) {
        return Err(GlmError::Config(format!("label outside 0..{n_classes}")));
    }
    let present = (0..n_classes)
        .filter(|&k| labels.iter().any(|&l| l as usize == k))
        .count();
    if present < 2 {
        return Err(GlmError::SingleClass);
    }
    let class_w = match config.class_weighting {
        ClassWeighting::None => vec![1.0; n_classes],
        ClassWeighting::InversePrior => inverse_prior_weights(&labels, n_classes),
    };
    let s: Vec<f64> = labels.iter().map(|&l| class_w[l as usize]).collect();
    if matrix
        .rows
        .iter()
        .any(|r| r.values.iter().any(|v| !v.is_finite()))
    {
        // reported as a failure before the first sweep
        return Err(GlmError::NonFinite { iteration: 0 });
    }
    let x = Csc::from_rows(&matrix.rows, matrix.total_columns);

    let targets: Vec<usize> = if n_classes == 2 {
        vec![1]
    } else {
        (0..n_classes).collect()
    };
    let mut weights = Vec::new();
    let mut intercepts = Vec::new();
    let mut converged = true;
    let mut iterations = 0;
    for k in targets {
        let t: Vec<f64> = labels
            .iter()
            .map(|&l| if l as usize == k { 1.0 } else { 0.0 })
            .collect();
        let fit = match fit_binary(&x, &t, &s, config) {
            Ok(f) => f,
            // a class absent from a multiclass training set never wins
            Err(GlmError::SingleClass) if n_classes > 2 && !t.contains(&1.0) => BinaryFit {
                weights: vec![0.0; x.n_cols],
                intercept: -30.0,
                iterations: 0,
                converged: true,
            },
            Err(e) => return Err(e),
        };
        converged &= fit.converged;
        iterations = iterations.max(fit.iterations);
        weights.push(SparseWeights::from_dense(&fit.weights));
        intercepts.push(fit.intercept);
    }
    let mut model = LinearModel::new(
        matrix.fingerprint.clone(),
        matrix.total_columns,
        n_classes,
        weights,
        intercepts,
        *config,
    );
    model.converged = converged;
    model.iterations = iterations;
    Ok(model)
}
