//! Named code-role sets (pregnancy start anchors, outcome anchors with their
//! gestation lookback bounds, complication targets) loaded from a sectioned
//! TOML file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClaimsError, ConceptId, EpisodeOutcome, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeRole {
    PregnancyStartAnchor,
    PregnancyOutcomeAnchor,
    ComplicationTarget,
}

/// Which second-pass target sets the forward search consults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondPass {
    /// Sets flagged `pregnancy_id` (identification cohort).
    Identification,
    /// Sets flagged `risk_factor` (complications cohort).
    RiskFactors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestationBounds {
    pub min_days: u32,
    pub max_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CodeRoleSet {
    pub name: String,
    pub role: CodeRole,
    pub outcome: Option<EpisodeOutcome>,
    pub concept_ids: BTreeSet<ConceptId>,
    pub gestation: Option<GestationBounds>,
    pub pregnancy_id: bool,
    pub risk_factor: bool,
    /// Whether the identification pipeline treats this set as an anchor.
    /// Cohort construction always uses every start/outcome set.
    pub hapi_anchor: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct HistoryCodes {
    pub diabetes: BTreeSet<ConceptId>,
    pub hypertension: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSet {
    role: CodeRole,
    #[serde(default)]
    outcome: Option<EpisodeOutcome>,
    #[serde(default)]
    g_min_days: Option<u32>,
    #[serde(default)]
    g_max_days: Option<u32>,
    #[serde(default)]
    pregnancy_id: bool,
    #[serde(default)]
    risk_factor: bool,
    #[serde(default = "yes")]
    hapi_anchor: bool,
    concepts: Vec<u32>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHistory {
    #[serde(default)]
    diabetes: Vec<u32>,
    #[serde(default)]
    hypertension: Vec<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    severity_order: Vec<EpisodeOutcome>,
    #[serde(default)]
    history: RawHistory,
    #[serde(default)]
    set: BTreeMap<String, RawSet>,
}

/// The loaded role configuration with concept lookups precomputed.
#[derive(Debug, Clone)]
pub struct CodeRoles {
    sets: Vec<CodeRoleSet>,
    severity_order: Vec<EpisodeOutcome>,
    history: HistoryCodes,
    by_concept: HashMap<ConceptId, Vec<usize>>,
}

const DEFAULT_CONFIG: &str = include_str!("../../data/code_roles.toml");

pub fn load_code_roles(path: impl AsRef<Path>) -> Result<CodeRoles> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ClaimsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_code_roles(&text)
}

pub fn parse_code_roles(text: &str) -> Result<CodeRoles> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ClaimsError::Config(e.to_string()))?;
    let mut sets = Vec::with_capacity(raw.set.len());
    for (name, s) in raw.set {
        let err = |message: &str| ClaimsError::RoleSet {
            name: name.clone(),
            message: message.to_string(),
        };
        if s.concepts.is_empty() {
            return Err(err("concept set is empty"));
        }
        let mut concept_ids = BTreeSet::new();
        for c in &s.concepts {
            if *c == 0 {
                return Err(err("concept ids must be positive"));
            }
            concept_ids.insert(ConceptId(*c));
        }
        let gestation = match (s.g_min_days, s.g_max_days) {
            (Some(min_days), Some(max_days)) => {
                if min_days >= max_days {
                    return Err(err("g_min_days must be strictly less than g_max_days"));
                }
                Some(GestationBounds { min_days, max_days })
            }
            (None, None) => None,
            _ => return Err(err("g_min_days and g_max_days must be given together")),
        };
        match s.role {
            CodeRole::PregnancyOutcomeAnchor => {
                if gestation.is_none() {
                    return Err(err("outcome anchor requires g_min_days/g_max_days"));
                }
                if s.outcome.is_none() {
                    return Err(err("outcome anchor requires an outcome"));
                }
            }
            CodeRole::ComplicationTarget => {
                if s.outcome.is_none() {
                    return Err(err("complication target requires an outcome"));
                }
                if gestation.is_some() {
                    return Err(err("gestation bounds only apply to outcome anchors"));
                }
            }
            CodeRole::PregnancyStartAnchor => {
                if gestation.is_some() {
                    return Err(err("gestation bounds only apply to outcome anchors"));
                }
            }
        }
        sets.push(CodeRoleSet {
            name,
            role: s.role,
            outcome: s.outcome,
            concept_ids,
            gestation,
            pregnancy_id: s.pregnancy_id,
            risk_factor: s.risk_factor,
            hapi_anchor: s.hapi_anchor,
        });
    }
    let history = HistoryCodes {
        diabetes: raw.history.diabetes.into_iter().map(ConceptId).collect(),
        hypertension: raw
            .history
            .hypertension
            .into_iter()
            .map(ConceptId)
            .collect(),
    };
    Ok(CodeRoles::from_parts(sets, raw.severity_order, history))
}

impl CodeRoles {
    pub fn from_parts(
        mut sets: Vec<CodeRoleSet>,
        severity_order: Vec<EpisodeOutcome>,
        history: HistoryCodes,
    ) -> Self {
        sets.sort_by(|a, b| a.name.cmp(&b.name));
        let mut by_concept: HashMap<ConceptId, Vec<usize>> = HashMap::new();
        for (i, s) in sets.iter().enumerate() {
            for c in &s.concept_ids {
                by_concept.entry(*c).or_default().push(i);
            }
        }
        CodeRoles {
            sets,
            severity_order,
            history,
            by_concept,
        }
    }

    /// The shipped placeholder configuration (matches the synthetic vocabulary).
    pub fn default_config() -> Self {
        parse_code_roles(DEFAULT_CONFIG).expect("shipped code-role config is valid")
    }

    pub fn default_config_text() -> &'static str {
        DEFAULT_CONFIG
    }

    pub fn sets(&self) -> &[CodeRoleSet] {
        &self.sets
    }

    pub fn set(&self, name: &str) -> Option<&CodeRoleSet> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn with_role(&self, role: CodeRole) -> impl Iterator<Item = &CodeRoleSet> {
        self.sets.iter().filter(move |s| s.role == role)
    }

    /// Complication-target sets carrying `outcome`.
    pub fn targets_for(&self, outcome: EpisodeOutcome) -> impl Iterator<Item = &CodeRoleSet> {
        self.with_role(CodeRole::ComplicationTarget)
            .filter(move |s| s.outcome == Some(outcome))
    }

    pub fn second_pass_targets(&self, pass: SecondPass) -> impl Iterator<Item = &CodeRoleSet> {
        self.with_role(CodeRole::ComplicationTarget)
            .filter(move |s| match pass {
                SecondPass::Identification => s.pregnancy_id,
                SecondPass::RiskFactors => s.risk_factor,
            })
    }

    pub fn sets_of(&self, concept: ConceptId) -> impl Iterator<Item = &CodeRoleSet> {
        self.by_concept
            .get(&concept)
            .into_iter()
            .flatten()
            .map(|&i| &self.sets[i])
    }

    pub fn has_role(&self, concept: ConceptId, role: CodeRole) -> bool {
        self.sets_of(concept).any(|s| s.role == role)
    }

    pub fn is_start_anchor(&self, concept: ConceptId) -> bool {
        self.has_role(concept, CodeRole::PregnancyStartAnchor)
    }

    pub fn is_outcome_anchor(&self, concept: ConceptId) -> bool {
        self.has_role(concept, CodeRole::PregnancyOutcomeAnchor)
    }

    pub fn is_hapi_start(&self, concept: ConceptId) -> bool {
        self.sets_of(concept)
            .any(|s| s.role == CodeRole::PregnancyStartAnchor && s.hapi_anchor)
    }

    pub fn is_hapi_end(&self, concept: ConceptId) -> bool {
        self.sets_of(concept)
            .any(|s| s.role == CodeRole::PregnancyOutcomeAnchor && s.hapi_anchor)
    }

    fn concepts_where(&self, pred: impl Fn(&CodeRoleSet) -> bool) -> BTreeSet<ConceptId> {
        self.sets
            .iter()
            .filter(|s| pred(s))
            .flat_map(|s| s.concept_ids.iter().copied())
            .collect()
    }

    /// Every start and outcome anchor concept: removed from model features
    /// and forbidden in never-pregnant histories.
    pub fn anchor_concepts(&self) -> BTreeSet<ConceptId> {
        self.concepts_where(|s| s.role != CodeRole::ComplicationTarget)
    }

    pub fn complication_target_concepts(&self) -> BTreeSet<ConceptId> {
        self.concepts_where(|s| s.role == CodeRole::ComplicationTarget)
    }

    /// Position in the severity order; lower is more severe. Unlisted
    /// outcomes rank after every listed one.
    pub fn severity_rank(&self, outcome: EpisodeOutcome) -> usize {
        self.severity_order
            .iter()
            .position(|o| *o == outcome)
            .unwrap_or(self.severity_order.len() + outcome as usize)
    }

    /// The most severe outcome-anchor set containing `concept`.
    pub fn outcome_anchor_set(&self, concept: ConceptId) -> Option<&CodeRoleSet> {
        self.sets_of(concept)
            .filter(|s| s.role == CodeRole::PregnancyOutcomeAnchor)
            .min_by_key(|s| {
                s.outcome
                    .map(|o| self.severity_rank(o))
                    .unwrap_or(usize::MAX)
            })
    }

    /// Gestation bounds for an outcome: taken from the outcome-anchor sets
    /// that carry it (widest if several).
    pub fn gestation_for(&self, outcome: EpisodeOutcome) -> Option<GestationBounds> {
        self.with_role(CodeRole::PregnancyOutcomeAnchor)
            .filter(|s| s.outcome == Some(outcome))
            .filter_map(|s| s.gestation)
            .reduce(|a, b| GestationBounds {
                min_days: a.min_days.min(b.min_days),
                max_days: a.max_days.max(b.max_days),
            })
    }

    pub fn history(&self) -> &HistoryCodes {
        &self.history
    }
}
