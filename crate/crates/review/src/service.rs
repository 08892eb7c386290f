//! Review state: the served corpus, surfaced cases, decisions and the
//! simulation clock.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::RwLock;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hapi_core::claims::{PatientId, PatientRecord, Race, RiskLabel, Sex, Vocabulary};
use hapi_core::cohort::Split;
use hapi_core::hapi::{
    infer_episode, AnchorHit, EpisodeInference, Identifier, Source, WeekGrid, WeekPoint,
};
use hapi_core::pipeline::{PipelineError, Workspace};
use hapi_core::risk::{EvidenceItem, RiskPrediction, RiskTriage};
use hapi_core::workflow;

use crate::store::{DecisionLog, LogEntry, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown patient `{0}`")]
    PatientNotFound(String),
    #[error("patient `{0}` has no surfaced case")]
    CaseNotFound(String),
    #[error("case `{0}` already has a decision")]
    DuplicateDecision(String),
    #[error("invalid request")]
    Validation(Vec<FieldError>),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("decision log does not replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub problem: String,
}

/// Patients eligible to surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    /// Identification test split only, so no case was seen in training.
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub panel: Panel,
    /// Initial clock week; the earliest corpus week when absent.
    pub start_week: Option<i64>,
    /// Weeks of timeline kept in a case snapshot.
    pub tail_weeks: usize,
    /// Append-only decision log; `review/decisions.jsonl` under the data
    /// dir when absent.
    pub log: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            panel: Panel::Test,
            start_week: None,
            tail_weeks: 12,
            log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationClock {
    pub week: i64,
    pub min_week: i64,
    pub max_week: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    Reviewed,
}

impl std::str::FromStr for CaseStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pending" => Ok(CaseStatus::Pending),
            "reviewed" => Ok(CaseStatus::Reviewed),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: Option<u32>,
    pub sex: Sex,
    pub race: Race,
    pub diabetes_history: bool,
    pub hypertension_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(flatten)]
    pub item: EvidenceItem,
    pub description: Option<String>,
}

/// Everything shown for a case, frozen when it surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSnapshot {
    pub as_of: NaiveDate,
    pub inferred_start: NaiveDate,
    pub start_source: Source,
    pub timeline_tail: Vec<WeekPoint>,
    pub risk: RiskPrediction,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NurseDecision {
    pub patient_id: PatientId,
    pub call: bool,
    pub predicted_complication: RiskLabel,
    pub note: String,
    pub decided_at_week: i64,
    pub decided_at: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCase {
    pub patient_id: PatientId,
    pub status: CaseStatus,
    pub surfaced_at: i64,
    pub snapshot: CaseSnapshot,
    pub demographics: Demographics,
    pub decision: Option<NurseDecision>,
}

/// Decision fields as submitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionInput {
    pub call: bool,
    pub predicted_complication: RiskLabel,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub patient_id: PatientId,
    pub clock_week: i64,
    pub weeks: Vec<WeekPoint>,
    pub inferred_start: Option<NaiveDate>,
    pub inferred_end: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePage {
    pub clock_week: i64,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub cases: Vec<ReviewCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockAdvance {
    pub clock: SimulationClock,
    pub surfaced: Vec<PatientId>,
}

struct Served {
    record: usize,
    points: Vec<WeekPoint>,
}

/// Read-only data loaded at startup.
pub struct Corpus {
    records: Vec<PatientRecord>,
    vocabulary: Vocabulary,
    identifier: Identifier,
    triage: RiskTriage,
    grid: WeekGrid,
    served: BTreeMap<PatientId, Served>,
    tail_weeks: usize,
    bounds: (i64, i64),
}

fn infer_prefix(points: &[WeekPoint], identifier: &Identifier) -> EpisodeInference {
    let q: Vec<f64> = points.iter().map(|p| p.q).collect();
    let y: Vec<bool> = points.iter().map(|p| p.y).collect();
    let anchors: Vec<AnchorHit> = points.iter().map(|p| p.anchor_hit).collect();
    let dates: Vec<NaiveDate> = points.iter().map(|p| p.as_of).collect();
    infer_episode(&q, &y, &anchors, &dates, &identifier.config, None)
}

impl Corpus {
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let ws = Workspace::new(&config.data_dir);
        let (vocabulary, records) = ws.load_records()?;
        let identifier = ws.load_identifier()?;
        let (triage, _) = ws.load_triage()?;
        let grid = workflow::default_week_grid();
        let panel: BTreeSet<PatientId> = match config.panel {
            Panel::All => records.iter().map(|r| r.patient_id.clone()).collect(),
            Panel::Test => ws
                .load_cohorts()?
                .identification
                .splits
                .members(Split::Test),
        };
        let spans: Vec<(usize, NaiveDate, NaiveDate)> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| panel.contains(&r.patient_id))
            .filter_map(|(i, r)| r.span().map(|(a, b)| (i, a, b)))
            .collect();
        let min_week = spans.iter().map(|s| grid.week_of(s.1)).min().unwrap_or(0);
        let max_week = spans
            .iter()
            .map(|s| grid.week_of(s.2))
            .max()
            .unwrap_or(min_week);
        let last = grid.as_of(max_week);
        let served = spans
            .par_iter()
            .map(|&(i, first, _)| {
                let r = &records[i];
                let t = identifier.run_weeks(r, &grid.span(first, last), None);
                (
                    r.patient_id.clone(),
                    Served {
                        record: i,
                        points: t.weeks,
                    },
                )
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        Ok(Corpus {
            records,
            vocabulary,
            identifier,
            triage,
            grid,
            served,
            tail_weeks: config.tail_weeks.max(1),
            bounds: (min_week, max_week),
        })
    }

    pub fn bounds(&self) -> (i64, i64) {
        self.bounds
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientId> {
        self.served.keys()
    }

    pub fn record(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.served.get(id).map(|s| &self.records[s.record])
    }

    fn points_until<'a>(&self, s: &'a Served, week: i64) -> &'a [WeekPoint] {
        let n = s.points.partition_point(|p| p.week <= week);
        &s.points[..n]
    }

    pub fn timeline(&self, id: &PatientId, clock_week: i64) -> Option<Timeline> {
        let s = self.served.get(id)?;
        let weeks = self.points_until(s, clock_week);
        let inf = infer_prefix(weeks, &self.identifier);
        Some(Timeline {
            patient_id: id.clone(),
            clock_week,
            weeks: weeks.to_vec(),
            inferred_start: inf.start.map(|i| weeks[i].as_of),
            inferred_end: inf.end.map(|i| weeks[i].as_of),
        })
    }

    /// The week at which the patient's case first triggers, if by `week`.
    pub fn trigger_week(&self, id: &PatientId, week: i64) -> Option<i64> {
        let s = self.served.get(id)?;
        let weeks = self.points_until(s, week);
        infer_prefix(weeks, &self.identifier)
            .start
            .map(|i| weeks[i].week)
    }

    /// The case as it looks at the week it surfaces.
    pub fn snapshot(
        &self,
        id: &PatientId,
        surfaced_at: i64,
    ) -> Option<(CaseSnapshot, Demographics)> {
        let s = self.served.get(id)?;
        let record = &self.records[s.record];
        let weeks = self.points_until(s, surfaced_at);
        let inf = infer_prefix(weeks, &self.identifier);
        let start = inf.start?;
        let as_of = self.grid.as_of(surfaced_at);
        let inferred_start = weeks[start].as_of;
        let (risk, items) = self
            .triage
            .predict_with_evidence(record, inferred_start, as_of);
        let evidence = items
            .into_iter()
            .map(|item| Evidence {
                description: item
                    .concept
                    .and_then(|c| self.vocabulary.get(c))
                    .map(|c| c.description.clone()),
                item,
            })
            .collect();
        let history = hapi_core::risk::classify_history(
            record,
            inferred_start,
            self.triage.roles.history(),
            None,
        );
        let demographics = Demographics {
            age: record.age_at(as_of),
            sex: record.sex,
            race: record.race,
            diabetes_history: history.has_diabetes(),
            hypertension_history: history.has_hypertension(),
        };
        let tail_from = weeks.len().saturating_sub(self.tail_weeks);
        Some((
            CaseSnapshot {
                as_of,
                inferred_start,
                start_source: inf.start_source.unwrap_or(Source::Model),
                timeline_tail: weeks[tail_from..].to_vec(),
                risk,
                evidence,
            },
            demographics,
        ))
    }
}

struct State {
    clock: SimulationClock,
    cases: BTreeMap<PatientId, ReviewCase>,
    order: BTreeSet<(i64, PatientId)>,
}

pub struct ReviewService {
    corpus: Corpus,
    state: RwLock<State>,
    log: DecisionLog,
}

pub const MAX_PAGE_SIZE: usize = 200;

impl ReviewService {
    /// Loads the corpus and replays the decision log under the data dir.
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let corpus = Corpus::load(config)?;
        let (min_week, max_week) = corpus.bounds();
        let start = config
            .start_week
            .unwrap_or(min_week)
            .clamp(min_week, max_week);
        let log_path = config
            .log
            .clone()
            .unwrap_or_else(|| config.data_dir.join("review").join("decisions.jsonl"));
        let log = DecisionLog::open(log_path)?;
        let entries = log.replay()?;
        let svc = ReviewService {
            corpus,
            state: RwLock::new(State {
                clock: SimulationClock {
                    week: start,
                    min_week,
                    max_week,
                },
                cases: BTreeMap::new(),
                order: BTreeSet::new(),
            }),
            log,
        };
        {
            let mut st = svc.state.write().expect("state lock");
            svc.surface(&mut st);
            for e in entries {
                match e {
                    LogEntry::Clock { week } => {
                        if week < st.clock.week {
                            return Err(ServiceError::Replay(format!(
                                "clock moves back to {week}"
                            )));
                        }
                        st.clock.week = week.min(max_week);
                        svc.surface(&mut st);
                    }
                    LogEntry::Decision(d) => {
                        let case = st.cases.get_mut(&d.patient_id).ok_or_else(|| {
                            ServiceError::Replay(format!(
                                "decision for unsurfaced `{}`",
                                d.patient_id
                            ))
                        })?;
                        if case.decision.is_some() {
                            return Err(ServiceError::Replay(format!(
                                "second decision for `{}`",
                                d.patient_id
                            )));
                        }
                        case.status = CaseStatus::Reviewed;
                        case.decision = Some(d);
                    }
                }
            }
        }
        Ok(svc)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn surface(&self, st: &mut State) -> Vec<PatientId> {
        let week = st.clock.week;
        let fresh: Vec<(PatientId, i64)> = self
            .corpus
            .patients()
            .filter(|p| !st.cases.contains_key(*p))
            .filter_map(|p| self.corpus.trigger_week(p, week).map(|w| (p.clone(), w)))
            .collect();
        let mut out = Vec::new();
        for (pid, at) in fresh {
            let Some((snapshot, demographics)) = self.corpus.snapshot(&pid, at) else {
                continue;
            };
            st.order.insert((at, pid.clone()));
            st.cases.insert(
                pid.clone(),
                ReviewCase {
                    patient_id: pid.clone(),
                    status: CaseStatus::Pending,
                    surfaced_at: at,
                    snapshot,
                    demographics,
                    decision: None,
                },
            );
            out.push(pid);
        }
        out
    }

    pub fn clock(&self) -> SimulationClock {
        self.state.read().expect("state lock").clock
    }

    /// Cases ordered by `(surfaced_at, patient_id)`; pages start at 1.
    pub fn list_cases(
        &self,
        status: Option<CaseStatus>,
        page: usize,
        page_size: usize,
    ) -> Result<CasePage, ServiceError> {
        let mut errors = Vec::new();
        if page == 0 {
            errors.push(FieldError {
                field: "page".into(),
                problem: "must be at least 1".into(),
            });
        }
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            errors.push(FieldError {
                field: "page_size".into(),
                problem: format!("must be between 1 and {MAX_PAGE_SIZE}"),
            });
        }
        if !errors.is_empty() {
            return Err(ServiceError::Validation(errors));
        }
        let st = self.state.read().expect("state lock");
        let matching: Vec<&ReviewCase> = st
            .order
            .iter()
            .map(|(_, p)| &st.cases[p])
            .filter(|c| status.is_none_or(|s| c.status == s))
            .collect();
        Ok(CasePage {
            clock_week: st.clock.week,
            page,
            page_size,
            total: matching.len(),
            cases: matching
                .into_iter()
                .skip((page - 1) * page_size)
                .take(page_size)
                .cloned()
                .collect(),
        })
    }

    pub fn get_case(&self, id: &str) -> Result<ReviewCase, ServiceError> {
        let pid = self.known(id)?;
        let st = self.state.read().expect("state lock");
        st.cases
            .get(&pid)
            .cloned()
            .ok_or_else(|| ServiceError::CaseNotFound(id.to_string()))
    }

    fn known(&self, id: &str) -> Result<PatientId, ServiceError> {
        let pid = PatientId::new(id);
        if self.corpus.record(&pid).is_none() {
            return Err(ServiceError::PatientNotFound(id.to_string()));
        }
        Ok(pid)
    }

    /// Weekly series up to the current clock.
    pub fn get_timeline(&self, id: &str) -> Result<Timeline, ServiceError> {
        let pid = self.known(id)?;
        let week = self.clock().week;
        self.corpus
            .timeline(&pid, week)
            .ok_or_else(|| ServiceError::PatientNotFound(id.to_string()))
    }

    pub fn get_evidence(&self, id: &str) -> Result<(RiskPrediction, Vec<Evidence>), ServiceError> {
        let case = self.get_case(id)?;
        Ok((case.snapshot.risk, case.snapshot.evidence))
    }

    /// Records the decision; a second decision for the same case conflicts.
    pub fn post_decision(
        &self,
        id: &str,
        input: DecisionInput,
    ) -> Result<NurseDecision, ServiceError> {
        let pid = self.known(id)?;
        let mut st = self.state.write().expect("state lock");
        let clock = st.clock;
        let case = st
            .cases
            .get_mut(&pid)
            .ok_or_else(|| ServiceError::CaseNotFound(id.to_string()))?;
        if case.decision.is_some() {
            return Err(ServiceError::DuplicateDecision(id.to_string()));
        }
        let d = NurseDecision {
            patient_id: pid,
            call: input.call,
            predicted_complication: input.predicted_complication,
            note: input.note,
            decided_at_week: clock.week,
            decided_at: self.corpus.grid.as_of(clock.week),
        };
        self.log.append(&LogEntry::Decision(d.clone()))?;
        case.status = CaseStatus::Reviewed;
        case.decision = Some(d.clone());
        Ok(d)
    }

    /// Moves the clock forward (clamped to the corpus) and surfaces every
    /// case triggered by then.
    pub fn advance_clock(&self, weeks: i64) -> Result<ClockAdvance, ServiceError> {
        if weeks < 0 {
            return Err(ServiceError::Validation(vec![FieldError {
                field: "weeks".into(),
                problem: "must not be negative".into(),
            }]));
        }
        let mut st = self.state.write().expect("state lock");
        let target = st.clock.week.saturating_add(weeks).min(st.clock.max_week);
        if target != st.clock.week {
            self.log.append(&LogEntry::Clock { week: target })?;
            st.clock.week = target;
        }
        let surfaced = self.surface(&mut st);
        Ok(ClockAdvance {
            clock: st.clock,
            surfaced,
        })
    }
}
