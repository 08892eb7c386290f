//! Complication-risk prediction with the global model and evidence drawn
//! from per-history-group models.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::claims::{CodeRoles, ConceptId, HistoryCodes, PatientId, PatientRecord, RiskLabel};
use crate::features::{
    extract_features, ConceptFilter, DesignMatrix, FeatureKey, FeatureVocabulary, SparseExample,
};
use crate::glm::{fit, GlmConfig, GlmError, LinearModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryGroup {
    NoHistory,
    DbOnly,
    HtOnly,
    DbAndHt,
}

impl HistoryGroup {
    pub const ALL: [HistoryGroup; 4] = [
        HistoryGroup::NoHistory,
        HistoryGroup::DbOnly,
        HistoryGroup::HtOnly,
        HistoryGroup::DbAndHt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_flags(db: bool, ht: bool) -> Self {
        match (db, ht) {
            (false, false) => HistoryGroup::NoHistory,
            (true, false) => HistoryGroup::DbOnly,
            (false, true) => HistoryGroup::HtOnly,
            (true, true) => HistoryGroup::DbAndHt,
        }
    }

    pub fn has_diabetes(self) -> bool {
        matches!(self, HistoryGroup::DbOnly | HistoryGroup::DbAndHt)
    }

    pub fn has_hypertension(self) -> bool {
        matches!(self, HistoryGroup::HtOnly | HistoryGroup::DbAndHt)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HistoryGroup::NoHistory => "no_history",
            HistoryGroup::DbOnly => "db_only",
            HistoryGroup::HtOnly => "ht_only",
            HistoryGroup::DbAndHt => "db_and_ht",
        }
    }
}

impl fmt::Display for HistoryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HistoryGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        HistoryGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown history group `{s}`"))
    }
}

/// Group from diabetes/hypertension history codes dated strictly before
/// `t_start`, optionally limited to `lookback_days`.
pub fn classify_history(
    record: &PatientRecord,
    t_start: NaiveDate,
    codes: &HistoryCodes,
    lookback_days: Option<u32>,
) -> HistoryGroup {
    let Some(before) = t_start.pred_opt() else {
        return HistoryGroup::NoHistory;
    };
    let from = lookback_days
        .and_then(|l| t_start.checked_sub_days(Days::new(l as u64)))
        .unwrap_or(NaiveDate::MIN);
    let mut db = false;
    let mut ht = false;
    for e in record.events_between(from, before) {
        db |= codes.diabetes.contains(&e.concept_id);
        ht |= codes.hypertension.contains(&e.concept_id);
    }
    HistoryGroup::from_flags(db, ht)
}

/// One model per history group; `None` falls back to the global model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroupModels {
    pub models: [Option<LinearModel>; 4],
    pub fallbacks: Vec<(HistoryGroup, String)>,
}

impl GroupModels {
    pub fn get(&self, g: HistoryGroup) -> Option<&LinearModel> {
        self.models[g.index()].as_ref()
    }
}

/// Fits a model per group on the rows tagged with that group. Groups that
/// are empty or single-class fall back to the global model.
pub fn train_group_models(
    train: &DesignMatrix,
    groups: &[HistoryGroup],
    config: &GlmConfig,
) -> Result<GroupModels, GlmError> {
    assert_eq!(train.rows.len(), groups.len(), "one group per training row");
    let mut out = GroupModels::default();
    for g in HistoryGroup::ALL {
        let rows: Vec<SparseExample> = train
            .rows
            .iter()
            .zip(groups)
            .filter(|(_, rg)| **rg == g)
            .map(|(r, _)| r.clone())
            .collect();
        let part = DesignMatrix {
            rows,
            ..train.clone_header()
        };
        match fit(&part, config) {
            Ok(m) => out.models[g.index()] = Some(m),
            Err(e @ (GlmError::SingleClass | GlmError::Empty)) => {
                out.fallbacks.push((g, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    RiskIncreasing,
    RiskDecreasing,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::RiskIncreasing => "risk_increasing",
            Polarity::RiskDecreasing => "risk_decreasing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    Global,
    Group,
    /// A complication-target code already present in the history.
    Anchor,
}

impl EvidenceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceSource::Global => "global",
            EvidenceSource::Group => "group",
            EvidenceSource::Anchor => "anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub column: Option<u32>,
    pub concept: Option<ConceptId>,
    pub window_days: Option<u32>,
    /// Non-temporal feature name when the column is not a concept window.
    pub feature: Option<String>,
    pub weight: Option<f64>,
    pub polarity: Polarity,
    pub source: EvidenceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub patient_id: PatientId,
    pub as_of: NaiveDate,
    pub probabilities: Vec<f64>,
    pub predicted: RiskLabel,
    pub history_group: HistoryGroup,
}

pub const DEFAULT_EVIDENCE_K: usize = 10;

/// Global model for prediction plus group models for evidence.
#[derive(Debug, Clone)]
pub struct RiskTriage {
    pub global: LinearModel,
    pub groups: GroupModels,
    pub vocab: FeatureVocabulary,
    pub filter: ConceptFilter,
    pub roles: CodeRoles,
    pub evidence_k: usize,
    pub lookback_days: Option<u32>,
}

impl RiskTriage {
    pub fn new(
        global: LinearModel,
        groups: GroupModels,
        vocab: FeatureVocabulary,
        filter: ConceptFilter,
        roles: CodeRoles,
    ) -> Result<Self, GlmError> {
        global.check_fingerprint(vocab.fingerprint())?;
        for m in groups.models.iter().flatten() {
            m.check_fingerprint(vocab.fingerprint())?;
        }
        Ok(RiskTriage {
            global,
            groups,
            vocab,
            filter,
            roles,
            evidence_k: DEFAULT_EVIDENCE_K,
            lookback_days: None,
        })
    }

    pub fn history_group(&self, record: &PatientRecord, t_start: NaiveDate) -> HistoryGroup {
        classify_history(record, t_start, self.roles.history(), self.lookback_days)
    }

    pub fn predict(
        &self,
        record: &PatientRecord,
        t_start: NaiveDate,
        as_of: NaiveDate,
    ) -> (RiskPrediction, SparseExample) {
        let ex = extract_features(record, as_of, &self.vocab, &self.filter);
        let probabilities = self.global.predict_proba(&ex);
        let predicted =
            RiskLabel::from_index(crate::glm::argmax(&probabilities)).unwrap_or(RiskLabel::None);
        let pred = RiskPrediction {
            patient_id: record.patient_id.clone(),
            as_of,
            probabilities,
            predicted,
            history_group: self.history_group(record, t_start),
        };
        (pred, ex)
    }

    pub fn predict_with_evidence(
        &self,
        record: &PatientRecord,
        t_start: NaiveDate,
        as_of: NaiveDate,
    ) -> (RiskPrediction, Vec<EvidenceItem>) {
        let (pred, ex) = self.predict(record, t_start, as_of);
        let (model, source) = match self.groups.get(pred.history_group) {
            Some(m) => (m, EvidenceSource::Group),
            None => (&self.global, EvidenceSource::Global),
        };
        let mut items = self.anchor_evidence(record, as_of);
        items.extend(model_evidence(
            model,
            &self.vocab,
            &ex,
            pred.predicted,
            self.evidence_k,
            source,
        ));
        (pred, items)
    }

    /// Complication-target codes already in the history, in order of first
    /// appearance.
    fn anchor_evidence(&self, record: &PatientRecord, as_of: NaiveDate) -> Vec<EvidenceItem> {
        let targets = self.roles.complication_target_concepts();
        let mut seen = BTreeSet::new();
        record
            .events_until(as_of)
            .iter()
            .filter(|e| targets.contains(&e.concept_id) && seen.insert(e.concept_id))
            .map(|e| EvidenceItem {
                column: None,
                concept: Some(e.concept_id),
                window_days: None,
                feature: None,
                weight: None,
                polarity: Polarity::RiskIncreasing,
                source: EvidenceSource::Anchor,
            })
            .collect()
    }
}

/// Top-`k` weights of `model` for `predicted` among the columns active in
/// `ex`. Polarity follows the weight sign, inverted when the predicted class
/// is `none`.
pub fn model_evidence(
    model: &LinearModel,
    vocab: &FeatureVocabulary,
    ex: &SparseExample,
    predicted: RiskLabel,
    k: usize,
    source: EvidenceSource,
) -> Vec<EvidenceItem> {
    let active: BTreeSet<u32> = ex
        .iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|(c, _)| c)
        .collect();
    model
        .top_weighted_columns(k, predicted.index(), |c| active.contains(&c))
        .into_iter()
        .map(|(c, w)| {
            let toward_risk = (w > 0.0) != (predicted == RiskLabel::None);
            let (concept, window_days, feature) = match vocab.key(c) {
                Some(FeatureKey::Windowed {
                    concept,
                    window_days,
                }) => (Some(concept), Some(window_days), None),
                Some(FeatureKey::Nontemporal(name)) => (None, None, Some(name)),
                None => (None, None, None),
            };
            EvidenceItem {
                column: Some(c),
                concept,
                window_days,
                feature,
                weight: Some(w),
                polarity: if toward_risk {
                    Polarity::RiskIncreasing
                } else {
                    Polarity::RiskDecreasing
                },
                source,
            }
        })
        .collect()
}

pub fn write_predictions_csv<W: Write>(preds: &[RiskPrediction], mut w: W) -> std::io::Result<()> {
    writeln!(w, "patient_id,as_of,p_none,p_ght,p_gdb,pred,history_group")?;
    for p in preds {
        let pr = |i: usize| p.probabilities.get(i).copied().unwrap_or(0.0);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.patient_id,
            p.as_of,
            pr(0),
            pr(1),
            pr(2),
            p.predicted,
            p.history_group
        )?;
    }
    Ok(())
}

pub fn write_evidence_csv<W: Write>(
    rows: &[(PatientId, NaiveDate, Vec<EvidenceItem>)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "patient_id,as_of,rank,concept_id,window,weight,polarity,source"
    )?;
    for (pid, as_of, items) in rows {
        for (rank, it) in items.iter().enumerate() {
            let concept = it
                .concept
                .map(|c| c.to_string())
                .or_else(|| it.feature.clone())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                pid,
                as_of,
                rank + 1,
                concept,
                it.window_days.map(|x| x.to_string()).unwrap_or_default(),
                it.weight.map(|x| x.to_string()).unwrap_or_default(),
                it.polarity.as_str(),
                it.source.as_str()
            )?;
        }
    }
    Ok(())
}
