//! In-memory composition of the stages: cohorts, feature matrices,
//! training, and the identification and risk evaluations.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{CodeRoles, ConceptId, PatientId, PatientRecord, RiskLabel, Vocabulary};
use crate::cohort::{
    build_identification_cohort, build_risk_cohort, CohortError, CohortSpec, IdentificationCohort,
    RiskCohort, Split,
};
use crate::eval::{
    self, AlertTimeline, DelayInput, DelayStats, EarliestAlertBuckets, FprPoint, PairedComparison,
    Period, Scored, SubgroupReport, TrendSeries,
};
use crate::features::{
    extract_features, sample_complication_cutoffs, sample_identification_grid, ConceptFilter,
    DesignMatrix, FeatureError, FeatureSpec, FeatureVocabulary, SparseExample, VocabularyBuilder,
    GRID_MARGIN_WEEKS,
};
use crate::glm::{
    grid_search, identification_grid, risk_elastic_net_grid, risk_lasso_grid, select_threshold,
    GlmConfig, GlmError, GridResult, LinearModel, Selection, ThresholdRule,
};
use crate::hapi::{
    binarize, infer_episode, HapiConfig, HapiError, Identifier, PatientTimeline, WeekGrid,
};
use crate::risk::{classify_history, train_group_models, GroupModels, HistoryGroup, RiskTriage};

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] GlmError),
    #[error(transparent)]
    Hapi(#[from] HapiError),
    #[error("{0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

/// Monday origin of the weekly clock shared by evaluation and the service.
pub fn default_week_grid() -> WeekGrid {
    WeekGrid::new(NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"))
}

pub const RISK_CUTOFFS_PER_EPISODE: usize = 4;

pub fn index_records(records: &[PatientRecord]) -> BTreeMap<&PatientId, &PatientRecord> {
    records.iter().map(|r| (&r.patient_id, r)).collect()
}

/// Both cohorts from the same records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohorts {
    pub identification: IdentificationCohort,
    pub risk: RiskCohort,
}

pub fn build_cohorts(records: &[PatientRecord], roles: &CodeRoles, seed: u64) -> Result<Cohorts> {
    Ok(Cohorts {
        identification: build_identification_cohort(
            records,
            roles,
            &CohortSpec::identification(seed),
        )?,
        risk: build_risk_cohort(records, roles, &CohortSpec::complications(seed))?,
    })
}

/// Feature matrices over a vocabulary frozen on the training split.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub vocab: FeatureVocabulary,
    pub filter: ConceptFilter,
    pub train: DesignMatrix,
    pub val: DesignMatrix,
    pub test: DesignMatrix,
}

impl FeatureSet {
    pub fn split(&self, s: Split) -> &DesignMatrix {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Anchor codes never enter the identification features.
pub fn identification_filter(vocabulary: &Vocabulary, roles: &CodeRoles) -> ConceptFilter {
    ConceptFilter::new(
        vocabulary,
        &FeatureSpec::identification(),
        &roles.anchor_concepts(),
    )
}

/// Risk features exclude anchors and the complication-target codes.
pub fn risk_filter(vocabulary: &Vocabulary, roles: &CodeRoles) -> ConceptFilter {
    let mut exclude: BTreeSet<ConceptId> = roles.anchor_concepts();
    exclude.extend(roles.complication_target_concepts());
    ConceptFilter::new(vocabulary, &FeatureSpec::complications(), &exclude)
}

type Point<'a> = (&'a PatientRecord, NaiveDate, u8);

fn materialize(
    points: &[Point<'_>],
    spec: FeatureSpec,
    filter: ConceptFilter,
    n_classes: usize,
    split_of: impl Fn(&PatientId) -> Option<Split> + Sync,
) -> Result<FeatureSet> {
    let mut builder = VocabularyBuilder::new(spec)?;
    for (r, d, _) in points
        .iter()
        .filter(|p| split_of(&p.0.patient_id) == Some(Split::Train))
    {
        builder.observe(r, *d, &filter);
    }
    let vocab = builder.freeze();
    let matrix = |s: Split| {
        let rows: Vec<SparseExample> = points
            .par_iter()
            .filter(|p| split_of(&p.0.patient_id) == Some(s))
            .map(|(r, d, l)| SparseExample {
                label: *l,
                ..extract_features(r, *d, &vocab, &filter)
            })
            .collect();
        DesignMatrix::new(&vocab, n_classes, rows)
    };
    let (train, val, test) = (
        matrix(Split::Train),
        matrix(Split::Val),
        matrix(Split::Test),
    );
    Ok(FeatureSet {
        vocab,
        filter,
        train,
        val,
        test,
    })
}

/// Weekly grid points around each identification episode plus the
/// never-pregnant windows, labeled pregnant when inside the episode.
pub fn identification_features(
    records: &[PatientRecord],
    vocabulary: &Vocabulary,
    roles: &CodeRoles,
    cohort: &IdentificationCohort,
) -> Result<FeatureSet> {
    let by_id = index_records(records);
    let mut points = Vec::new();
    for pid in cohort.splits.assignments.keys() {
        let Some(r) = by_id.get(pid) else {
            return Err(WorkflowError::Missing(format!(
                "cohort patient {pid} has no record"
            )));
        };
        let sample = sample_identification_grid(r, cohort.episodes.get(pid));
        points.extend(sample.points.into_iter().map(|(d, l)| (*r, d, l as u8)));
    }
    materialize(
        &points,
        FeatureSpec::identification(),
        identification_filter(vocabulary, roles),
        2,
        |p| cohort.splits.split_of(p),
    )
}

/// Random cutoffs per risk episode, labeled with the episode's class.
pub fn risk_features(
    records: &[PatientRecord],
    vocabulary: &Vocabulary,
    roles: &CodeRoles,
    cohort: &RiskCohort,
    cutoffs_per_episode: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let by_id = index_records(records);
    let mut points = Vec::new();
    for (pid, (ep, label)) in &cohort.episodes {
        let Some(r) = by_id.get(pid) else {
            return Err(WorkflowError::Missing(format!(
                "cohort patient {pid} has no record"
            )));
        };
        for d in sample_complication_cutoffs(ep, cutoffs_per_episode, seed) {
            points.push((*r, d, label.index() as u8));
        }
    }
    materialize(
        &points,
        FeatureSpec::complications(),
        risk_filter(vocabulary, roles),
        3,
        |p| cohort.splits.split_of(p),
    )
}

/// History group of every row's patient, in row order.
pub fn row_history_groups(
    matrix: &DesignMatrix,
    records: &[PatientRecord],
    cohort: &RiskCohort,
    roles: &CodeRoles,
) -> Result<Vec<HistoryGroup>> {
    let by_id = index_records(records);
    matrix
        .rows
        .iter()
        .map(|row| {
            let r = by_id.get(&row.patient_id).ok_or_else(|| {
                WorkflowError::Missing(format!("no record for {}", row.patient_id))
            })?;
            let (ep, _) = cohort.episodes.get(&row.patient_id).ok_or_else(|| {
                WorkflowError::Missing(format!("no risk episode for {}", row.patient_id))
            })?;
            Ok(classify_history(r, ep.t_start, roles.history(), None))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IdentificationTraining {
    pub model: LinearModel,
    pub grid: GridResult,
}

/// Lasso grid by validation accuracy, then the decision threshold on the
/// validation scores.
pub fn train_identification(
    features: &FeatureSet,
    grid: &[GlmConfig],
    rule: ThresholdRule,
) -> Result<IdentificationTraining> {
    let (grid, mut model) =
        grid_search(&features.train, &features.val, grid, Selection::ValAccuracy)?;
    let scores: Vec<f64> = features.val.rows.iter().map(|r| model.score(r)).collect();
    let labels: Vec<bool> = features.val.rows.iter().map(|r| r.label == 1).collect();
    model.threshold = Some(select_threshold(&scores, &labels, rule)?);
    Ok(IdentificationTraining { model, grid })
}

pub fn train_identification_default(features: &FeatureSet) -> Result<IdentificationTraining> {
    train_identification(features, &identification_grid(), ThresholdRule::default())
}

#[derive(Debug, Clone)]
pub struct RiskTraining {
    pub lasso: LinearModel,
    pub lasso_grid: GridResult,
    /// Elastic net over L1 ratio and tolerance at the Lasso's chosen C.
    pub elastic_net: LinearModel,
    pub elastic_net_grid: GridResult,
    pub groups: GroupModels,
}

pub fn train_risk(features: &FeatureSet, train_groups: &[HistoryGroup]) -> Result<RiskTraining> {
    let (lasso_grid, lasso) = grid_search(
        &features.train,
        &features.val,
        &risk_lasso_grid(),
        Selection::AucTimesAccuracy,
    )?;
    let (elastic_net_grid, elastic_net) = grid_search(
        &features.train,
        &features.val,
        &risk_elastic_net_grid(lasso.config.c),
        Selection::AucTimesAccuracy,
    )?;
    let groups = train_group_models(&features.train, train_groups, &lasso.config)?;
    Ok(RiskTraining {
        lasso,
        lasso_grid,
        elastic_net,
        elastic_net_grid,
        groups,
    })
}

/// Identification evaluation on one patient: the weeks scored and the true
/// start if pregnant.
#[derive(Debug, Clone)]
pub struct EvalPatient<'a> {
    pub record: &'a PatientRecord,
    pub true_start: Option<NaiveDate>,
    pub true_end: Option<NaiveDate>,
}

/// Weeks scored for a patient: twenty weeks either side of a known
/// episode, otherwise the never-pregnant sampling window.
pub fn evaluation_weeks(grid: &WeekGrid, p: &EvalPatient<'_>) -> Vec<(i64, NaiveDate)> {
    let margin = Days::new(7 * GRID_MARGIN_WEEKS as u64);
    match (p.true_start, p.true_end) {
        (Some(s), Some(e)) => grid.span(s - margin, e + margin),
        _ => {
            let pts = sample_identification_grid(p.record, None).points;
            match (pts.first(), pts.last()) {
                (Some(a), Some(b)) => grid.span(a.0, b.0),
                _ => Vec::new(),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentificationEval {
    pub timelines: Vec<PatientTimeline>,
    pub delays: DelayStats,
    pub sweep: Vec<FprPoint>,
}

fn reinfer(
    t: &PatientTimeline,
    config: &HapiConfig,
    true_start: Option<NaiveDate>,
) -> Option<NaiveDate> {
    let q: Vec<f64> = t.weeks.iter().map(|w| w.q).collect();
    let y = binarize(&q, config.tau);
    let anchors: Vec<_> = t.weeks.iter().map(|w| w.anchor_hit).collect();
    let dates: Vec<NaiveDate> = t.weeks.iter().map(|w| w.as_of).collect();
    infer_episode(&q, &y, &anchors, &dates, config, true_start)
        .start
        .map(|i| dates[i])
}

fn delay_inputs(
    timelines: &[PatientTimeline],
    patients: &[EvalPatient<'_>],
    start_of: impl Fn(&PatientTimeline, &EvalPatient<'_>) -> Option<NaiveDate>,
) -> Vec<DelayInput> {
    timelines
        .iter()
        .zip(patients)
        .map(|(t, p)| DelayInput {
            patient_id: p.record.patient_id.clone(),
            true_start: p.true_start,
            hapi_start: start_of(t, p),
            anchor_start: t.anchor_start_date(),
        })
        .collect()
}

/// HAPI against the anchor-only start on every patient, plus the
/// never-pregnant false-positive rate at each of `taus`.
pub fn evaluate_identification(
    identifier: &Identifier,
    patients: &[EvalPatient<'_>],
    grid: &WeekGrid,
    taus: &[f64],
) -> IdentificationEval {
    let timelines: Vec<PatientTimeline> = patients
        .par_iter()
        .map(|p| identifier.run_weeks(p.record, &evaluation_weeks(grid, p), p.true_start))
        .collect();
    let delays = eval::delay_report(&delay_inputs(&timelines, patients, |t, _| t.start_date()));
    let sweep = taus
        .iter()
        .map(|&tau| {
            let cfg = HapiConfig {
                tau,
                ..identifier.config
            };
            let s = eval::delay_report(&delay_inputs(&timelines, patients, |t, p| {
                reinfer(t, &cfg, p.true_start)
            }));
            FprPoint {
                tau,
                false_positives: s.false_positives,
                n_never: s.n_never,
                fpr: s.fpr.unwrap_or(0.0),
                fraction_earlier: s.fraction_earlier,
            }
        })
        .collect();
    IdentificationEval {
        timelines,
        delays,
        sweep,
    }
}

/// Five thresholds centered on `tau` in steps of 0.1, kept inside (0, 1).
pub fn tau_sweep(tau: f64) -> Vec<f64> {
    (-2..=2)
        .map(|k| (tau + 0.1 * k as f64).clamp(0.01, 0.99))
        .collect()
}

pub fn scored_row(model: &LinearModel, row: &SparseExample) -> Scored {
    let probabilities = model.predict_proba(row);
    let predicted = eval::predicted_class(&probabilities, 0.5);
    Scored {
        patient_id: row.patient_id.clone(),
        label: row.label,
        probabilities,
        predicted,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub accuracy: Option<eval::Accuracy>,
    pub auc: Option<eval::AucSummary>,
}

pub fn model_metrics(name: &str, scored: &[Scored], n_classes: usize) -> ModelMetrics {
    let correct = scored.iter().filter(|s| s.predicted == s.label).count();
    let probs: Vec<Vec<f64>> = scored.iter().map(|s| s.probabilities.clone()).collect();
    let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
    ModelMetrics {
        name: name.to_string(),
        accuracy: eval::accuracy(correct, scored.len(), eval::LEVEL).ok(),
        auc: eval::auc_summary(&probs, &labels, n_classes, eval::LEVEL).ok(),
    }
}

#[derive(Debug, Clone)]
pub struct RiskEval {
    pub test: Vec<Scored>,
    pub lasso: ModelMetrics,
    pub elastic_net: ModelMetrics,
    /// Lasso correct vs elastic net correct on the test rows.
    pub comparison: PairedComparison,
    pub trend: TrendSeries,
    pub alerts: EarliestAlertBuckets,
}

/// Test-set metrics, the per-period trend over test episodes and the
/// earliest-alert buckets of the complicated test patients.
pub fn evaluate_risk(
    triage: &RiskTriage,
    elastic_net: &LinearModel,
    features: &FeatureSet,
    records: &[PatientRecord],
    cohort: &RiskCohort,
    grid: &WeekGrid,
) -> Result<RiskEval> {
    let test: Vec<Scored> = features
        .test
        .rows
        .iter()
        .map(|r| scored_row(&triage.global, r))
        .collect();
    let en: Vec<Scored> = features
        .test
        .rows
        .iter()
        .map(|r| scored_row(elastic_net, r))
        .collect();
    let comparison = eval::compare_correctness(
        &test
            .iter()
            .map(|s| s.predicted == s.label)
            .collect::<Vec<_>>(),
        &en.iter()
            .map(|s| s.predicted == s.label)
            .collect::<Vec<_>>(),
    );

    let by_id = index_records(records);
    let members: Vec<(&PatientRecord, NaiveDate, NaiveDate, RiskLabel)> = cohort
        .splits
        .members(Split::Test)
        .iter()
        .filter_map(|pid| {
            let (ep, label) = cohort.episodes.get(pid)?;
            Some((*by_id.get(pid)?, ep.t_start, ep.t_end, *label))
        })
        .collect();
    if members.len() != cohort.splits.count(Split::Test, None) {
        return Err(WorkflowError::Missing(
            "test episode without a record".into(),
        ));
    }

    let per_period: Vec<(Period, Scored)> = members
        .par_iter()
        .flat_map_iter(|&(r, s, e, label)| {
            Period::ALL.into_iter().map(move |p| {
                let (pred, _) = triage.predict(r, s, p.cutoff(s, e));
                let predicted = pred.predicted.index() as u8;
                (
                    p,
                    Scored {
                        patient_id: r.patient_id.clone(),
                        label: label.index() as u8,
                        probabilities: pred.probabilities,
                        predicted,
                    },
                )
            })
        })
        .collect();
    let trend = eval::trend_over_pregnancy(&per_period, 3);

    let lead = Days::new(crate::features::CUTOFF_LEAD_DAYS);
    let timelines: Vec<AlertTimeline> = members
        .par_iter()
        .filter(|m| m.3 != RiskLabel::None)
        .map(|&(r, s, e, _)| {
            let end = e.pred_opt().unwrap_or(e);
            let points = grid
                .span(s - lead, end)
                .into_iter()
                .map(|(_, d)| (d, triage.predict(r, s, d).0.predicted != RiskLabel::None))
                .collect();
            AlertTimeline {
                patient_id: r.patient_id.clone(),
                t_start: s,
                points,
            }
        })
        .collect();
    let alerts = eval::earliest_alerts(&timelines);

    Ok(RiskEval {
        lasso: model_metrics("lasso", &test, 3),
        elastic_net: model_metrics("elastic_net", &en, 3),
        test,
        comparison,
        trend,
        alerts,
    })
}

/// Per-race audit of scored test rows.
pub fn fairness(
    scored: &[Scored],
    records: &[PatientRecord],
    n_classes: usize,
    min_group_size: usize,
) -> SubgroupReport {
    let by_id = index_records(records);
    let items: Vec<(Scored, crate::claims::Race)> = scored
        .iter()
        .map(|s| {
            let race = by_id
                .get(&s.patient_id)
                .map_or(crate::claims::Race::Unreported, |r| r.race);
            (s.clone(), race)
        })
        .collect();
    eval::fairness_audit(&items, n_classes, min_group_size)
}

pub const DEFAULT_MIN_GROUP_SIZE: usize = 30;
