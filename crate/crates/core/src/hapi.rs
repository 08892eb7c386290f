//! Hybrid pregnancy identification: anchor-code override of the Lasso
//! score, EMA smoothing, thresholding and episode start/end inference.

use std::io::Write;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::claims::{CodeRoles, PatientId, PatientRecord};
use crate::features::{extract_features, ConceptFilter, FeatureVocabulary};
use crate::glm::{GlmError, LinearModel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HapiError {
    #[error("invalid HAPI configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] GlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapiConfig {
    pub ema_window: usize,
    pub ema_decay: f64,
    pub tau: f64,
    pub confirm_steps: usize,
    /// Simulation only: replace model starts earlier than
    /// `true_start + delta_month_days` with the code-based start.
    pub nurse_filter: bool,
    pub delta_month_days: u32,
}

impl Default for HapiConfig {
    fn default() -> Self {
        HapiConfig {
            ema_window: 5,
            ema_decay: 1.0 / 3.0,
            tau: 0.5,
            confirm_steps: 2,
            nurse_filter: false,
            delta_month_days: 30,
        }
    }
}

impl HapiConfig {
    pub fn validate(&self) -> Result<(), HapiError> {
        let bad = |m: &str| Err(HapiError::Config(m.to_string()));
        if self.ema_window == 0 {
            return bad("ema_window must be at least 1");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.confirm_steps == 0 {
            return bad("confirm_steps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorHit {
    None,
    StartCode,
    EndCode,
}

impl AnchorHit {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorHit::None => "none",
            AnchorHit::StartCode => "start_code",
            AnchorHit::EndCode => "end_code",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Anchor,
    Model,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Anchor => "anchor",
            Source::Model => "model",
        }
    }
}

/// Anchor state of `record` as of a date: an end code dated after the
/// latest start code wins, then any start code.
pub fn anchor_state(record: &PatientRecord, as_of: NaiveDate, roles: &CodeRoles) -> AnchorHit {
    let mut last_start = None;
    let mut last_end = None;
    for e in record.events_until(as_of) {
        if roles.is_hapi_start(e.concept_id) {
            last_start = Some(e.date);
        }
        if roles.is_hapi_end(e.concept_id) {
            last_end = Some(e.date);
        }
    }
    match (last_start, last_end) {
        (s, Some(end)) if s.is_none_or(|s| end > s) => AnchorHit::EndCode,
        (Some(_), _) => AnchorHit::StartCode,
        _ => AnchorHit::None,
    }
}

/// Combines the anchor rule with a model probability.
pub fn hybrid_from(anchor: AnchorHit, model_probability: impl FnOnce() -> f64) -> f64 {
    match anchor {
        AnchorHit::StartCode => 1.0,
        AnchorHit::EndCode => 0.0,
        AnchorHit::None => model_probability(),
    }
}

/// Normalized truncated EMA: `q_t = sum_k d^k f_{t-k} / sum_k d^k` over
/// `k = 0..=min(t, window - 1)`.
pub fn ema_smooth(f: &[f64], window: usize, decay: f64) -> Vec<f64> {
    (0..f.len())
        .map(|t| {
            let kmax = t.min(window.saturating_sub(1));
            let mut num = 0.0;
            let mut den = 0.0;
            let mut w = 1.0;
            for k in 0..=kmax {
                num += w * f[t - k];
                den += w;
                w *= decay;
            }
            num / den
        })
        .collect()
}

pub fn binarize(q: &[f64], tau: f64) -> Vec<bool> {
    q.iter().map(|&v| v >= tau).collect()
}

fn run_of(q: &[f64], t: usize, steps: usize, increasing: bool) -> bool {
    if t + steps >= q.len() {
        return false;
    }
    (t..t + steps).all(|i| {
        if increasing {
            q[i] < q[i + 1]
        } else {
            q[i] > q[i + 1]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeInference {
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub start_source: Option<Source>,
    pub end_source: Option<Source>,
}

/// Model-only start and end indices: start is `t + s` for the first `t`
/// with `y[t]` set and `s` strict increases of `q` after it; end is the
/// analogous first decreasing run with `y[t]` unset, searched only after
/// the start was found.
pub fn model_episode(
    q: &[f64],
    y: &[bool],
    confirm_steps: usize,
) -> (Option<usize>, Option<usize>) {
    let mut start = None;
    let mut found_at = 0;
    for t in 0..q.len() {
        if y[t] && run_of(q, t, confirm_steps, true) {
            start = Some(t + confirm_steps);
            found_at = t;
            break;
        }
    }
    let Some(_) = start else {
        return (None, None);
    };
    let end = ((found_at + 1)..q.len())
        .find(|&t| !y[t] && run_of(q, t, confirm_steps, false))
        .map(|t| t + confirm_steps);
    (start, end)
}

fn earliest(code: Option<usize>, model: Option<usize>) -> (Option<usize>, Option<Source>) {
    match (code, model) {
        (Some(c), Some(m)) if m < c => (Some(m), Some(Source::Model)),
        (Some(c), _) => (Some(c), Some(Source::Anchor)),
        (None, Some(m)) => (Some(m), Some(Source::Model)),
        (None, None) => (None, None),
    }
}

/// Combines the model episode with code-based hits per week. `true_start`
/// is only available in simulation and is consulted only when the nurse
/// filter is enabled.
pub fn infer_episode(
    q: &[f64],
    y: &[bool],
    anchors: &[AnchorHit],
    as_of: &[NaiveDate],
    config: &HapiConfig,
    true_start: Option<NaiveDate>,
) -> EpisodeInference {
    let (mut model_start, model_end) = model_episode(q, y, config.confirm_steps);
    let code_start = anchors.iter().position(|a| *a == AnchorHit::StartCode);
    if let (true, Some(ts), Some(ms)) = (config.nurse_filter, true_start, model_start) {
        if as_of[ms] < ts + Days::new(config.delta_month_days as u64) {
            model_start = None;
        }
    }
    let (start, start_source) = earliest(code_start, model_start);
    let Some(s) = start else {
        return EpisodeInference::default();
    };
    let code_end = anchors
        .iter()
        .enumerate()
        .skip(s + 1)
        .find(|(_, a)| **a == AnchorHit::EndCode)
        .map(|(i, _)| i);
    let model_end = model_end.filter(|&e| e > s);
    let (end, end_source) = earliest(code_end, model_end);
    EpisodeInference {
        start,
        end,
        start_source,
        end_source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekPoint {
    pub week: i64,
    pub as_of: NaiveDate,
    pub f: f64,
    pub q: f64,
    pub y: bool,
    pub anchor_hit: AnchorHit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient_id: PatientId,
    pub weeks: Vec<WeekPoint>,
    pub inference: EpisodeInference,
}

impl PatientTimeline {
    pub fn start_date(&self) -> Option<NaiveDate> {
        self.inference.start.map(|i| self.weeks[i].as_of)
    }

    pub fn end_date(&self) -> Option<NaiveDate> {
        self.inference.end.map(|i| self.weeks[i].as_of)
    }

    /// Date of the first week with a start code in history.
    pub fn anchor_start_date(&self) -> Option<NaiveDate> {
        self.weeks
            .iter()
            .find(|w| w.anchor_hit == AnchorHit::StartCode)
            .map(|w| w.as_of)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "week,as_of,f,q_smooth,y_hat,anchor_hit")?;
        for p in &self.weeks {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.week,
                p.as_of,
                p.f,
                p.q,
                p.y as u8,
                p.anchor_hit.as_str()
            )?;
        }
        Ok(())
    }
}

/// Weekly clock shared by every patient: week `k` covers
/// `[origin + 7k, origin + 7k + 6]` and is evaluated at its last day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekGrid {
    pub origin: NaiveDate,
}

impl WeekGrid {
    pub fn new(origin: NaiveDate) -> Self {
        WeekGrid { origin }
    }

    pub fn week_of(&self, date: NaiveDate) -> i64 {
        (date - self.origin).num_days().div_euclid(7)
    }

    pub fn as_of(&self, week: i64) -> NaiveDate {
        let days = 7 * week + 6;
        if days >= 0 {
            self.origin + Days::new(days as u64)
        } else {
            self.origin - Days::new((-days) as u64)
        }
    }

    /// Weeks from the one containing `from` through the one containing `to`.
    pub fn span(&self, from: NaiveDate, to: NaiveDate) -> Vec<(i64, NaiveDate)> {
        (self.week_of(from)..=self.week_of(to))
            .map(|k| (k, self.as_of(k)))
            .collect()
    }
}

/// Everything needed to score a patient timeline.
#[derive(Debug, Clone)]
pub struct Identifier {
    pub model: LinearModel,
    pub vocab: FeatureVocabulary,
    pub filter: ConceptFilter,
    pub roles: CodeRoles,
    pub config: HapiConfig,
}

impl Identifier {
    pub fn new(
        model: LinearModel,
        vocab: FeatureVocabulary,
        filter: ConceptFilter,
        roles: CodeRoles,
        config: HapiConfig,
    ) -> Result<Self, HapiError> {
        config.validate()?;
        model.check_fingerprint(vocab.fingerprint())?;
        Ok(Identifier {
            model,
            vocab,
            filter,
            roles,
            config,
        })
    }

    pub fn hybrid_score(&self, record: &PatientRecord, as_of: NaiveDate) -> (f64, AnchorHit) {
        let hit = anchor_state(record, as_of, &self.roles);
        let f = hybrid_from(hit, || {
            self.model
                .score(&extract_features(record, as_of, &self.vocab, &self.filter))
        });
        (f, hit)
    }

    /// Scores the given weeks in order and infers the episode.
    pub fn run_weeks(
        &self,
        record: &PatientRecord,
        weeks: &[(i64, NaiveDate)],
        true_start: Option<NaiveDate>,
    ) -> PatientTimeline {
        let scored: Vec<(f64, AnchorHit)> = weeks
            .iter()
            .map(|&(_, d)| self.hybrid_score(record, d))
            .collect();
        let f: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let anchors: Vec<AnchorHit> = scored.iter().map(|s| s.1).collect();
        let q = ema_smooth(&f, self.config.ema_window, self.config.ema_decay);
        let y = binarize(&q, self.config.tau);
        let dates: Vec<NaiveDate> = weeks.iter().map(|w| w.1).collect();
        let inference = infer_episode(&q, &y, &anchors, &dates, &self.config, true_start);
        let weeks = weeks
            .iter()
            .enumerate()
            .map(|(i, &(week, as_of))| WeekPoint {
                week,
                as_of,
                f: f[i],
                q: q[i],
                y: y[i],
                anchor_hit: anchors[i],
            })
            .collect();
        PatientTimeline {
            patient_id: record.patient_id.clone(),
            weeks,
            inference,
        }
    }

    /// Runs the weekly grid from the patient's first event through `until`
    /// (default: last event).
    pub fn run_patient(
        &self,
        record: &PatientRecord,
        grid: &WeekGrid,
        until: Option<NaiveDate>,
        true_start: Option<NaiveDate>,
    ) -> PatientTimeline {
        let weeks = match record.span() {
            Some((first, last)) => grid.span(first, until.unwrap_or(last)),
            None => Vec::new(),
        };
        self.run_weeks(record, &weeks, true_start)
    }
}

pub fn write_inference_csv<W: Write>(
    timelines: &[PatientTimeline],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "patient_id,pred_start,pred_end,start_source,end_source")?;
    let opt = |d: Option<NaiveDate>| d.map(|d| d.to_string()).unwrap_or_default();
    let src = |s: Option<Source>| s.map(|s| s.as_str()).unwrap_or("");
    for t in timelines {
        writeln!(
            w,
            "{},{},{},{},{}",
            t.patient_id,
            opt(t.start_date()),
            opt(t.end_date()),
            src(t.inference.start_source),
            src(t.inference.end_source)
        )?;
    }
    Ok(())
}
