//! Claims domain types: concept vocabulary, dated claim events, patient
//! histories and the episode/risk outcome labels shared by every stage.

mod io;
mod roles;

pub use io::{
    load_claims, load_patients, load_vocabulary, read_claims, read_patients, read_vocabulary,
    write_claims, write_patients, write_vocabulary, ClaimsLoad, Demographics, Rejection,
    RejectionReason,
};
pub use roles::{
    load_code_roles, parse_code_roles, CodeRole, CodeRoleSet, CodeRoles, GestationBounds,
    HistoryCodes, SecondPass,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClaimsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("duplicate concept_id {0} in vocabulary")]
    DuplicateConcept(ConceptId),
    #[error("code-role config: {0}")]
    Config(String),
    #[error("code-role set `{name}`: {message}")]
    RoleSet { name: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ClaimsError>;

/// Earliest and latest calendar days accepted anywhere in the claims model.
pub const MIN_DATE: NaiveDate = match NaiveDate::from_ymd_opt(1900, 1, 1) {
    Some(d) => d,
    None => unreachable!(),
};
pub const MAX_DATE: NaiveDate = match NaiveDate::from_ymd_opt(2100, 12, 31) {
    Some(d) => d,
    None => unreachable!(),
};

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    let d = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| format!("unparsable date `{s}`: {e}"))?;
    if d < MIN_DATE || d > MAX_DATE {
        return Err(format!("date {d} outside [1900-01-01, 2100-12-31]"));
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ConceptId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().parse::<u32>() {
            Ok(0) => Err("concept_id must be positive".into()),
            Ok(v) => Ok(ConceptId(v)),
            Err(e) => Err(format!("bad concept_id `{s}`: {e}")),
        }
    }
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " `{}`"), other)),
                }
            }
        }
    };
}

string_enum!(Domain {
    Condition => "condition",
    Drug => "drug",
    Procedure => "procedure",
    Specialty => "specialty",
    Lab => "lab",
    Observation => "observation",
    Demographic => "demographic",
});

string_enum!(Sex {
    Female => "female",
    Male => "male",
    Unknown => "unknown",
});

string_enum!(
    /// Reporting groups; anything not recorded is `Unreported`.
    Race {
        White => "white",
        Black => "black",
        Other => "other",
        Unreported => "unreported",
    }
);

string_enum!(
    /// Outcome of a pregnancy episode. The first-pass outcomes come from the
    /// outcome-anchor sets, the rest are reachable through the second pass.
    EpisodeOutcome {
        LiveBirth => "live_birth",
        Stillbirth => "stillbirth",
        SpontaneousAbortion => "spontaneous_abortion",
        InducedAbortion => "induced_abortion",
        Ectopic => "ectopic",
        Nicu => "nicu",
        Hppe => "hppe",
        Preterm => "preterm",
        GestationalHt => "gestational_ht",
        GestationalDb => "gestational_db",
    }
);

impl EpisodeOutcome {
    pub fn is_complicated(self) -> bool {
        self != EpisodeOutcome::LiveBirth
    }

    /// Only live births and the two triage targets enter the risk dataset.
    pub fn risk_label(self) -> Option<RiskLabel> {
        match self {
            EpisodeOutcome::LiveBirth => Some(RiskLabel::None),
            EpisodeOutcome::GestationalHt => Some(RiskLabel::Ght),
            EpisodeOutcome::GestationalDb => Some(RiskLabel::Gdb),
            _ => None,
        }
    }
}

/// Complication-risk label; the discriminants are the class indices used by
/// the 3-class models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLabel {
    None = 0,
    Ght = 1,
    Gdb = 2,
}

impl RiskLabel {
    pub const ALL: [RiskLabel; 3] = [RiskLabel::None, RiskLabel::Ght, RiskLabel::Gdb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLabel::None => "none",
            RiskLabel::Ght => "ght",
            RiskLabel::Gdb => "gdb",
        }
    }
}

impl fmt::Display for RiskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskLabel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "none" | "0" => Ok(RiskLabel::None),
            "ght" | "1" => Ok(RiskLabel::Ght),
            "gdb" | "2" => Ok(RiskLabel::Gdb),
            other => Err(format!("unknown risk label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCode {
    pub id: ConceptId,
    pub domain: Domain,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    codes: BTreeMap<ConceptId, ConceptCode>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, code: ConceptCode) -> Result<()> {
        if self.codes.contains_key(&code.id) {
            return Err(ClaimsError::DuplicateConcept(code.id));
        }
        self.codes.insert(code.id, code);
        Ok(())
    }

    pub fn get(&self, id: ConceptId) -> Option<&ConceptCode> {
        self.codes.get(&id)
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.codes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptCode> {
        self.codes.values()
    }
}

impl FromIterator<ConceptCode> for Vocabulary {
    /// Later duplicates are ignored.
    fn from_iter<I: IntoIterator<Item = ConceptCode>>(iter: I) -> Self {
        let mut codes = BTreeMap::new();
        for c in iter {
            codes.entry(c.id).or_insert(c);
        }
        Vocabulary { codes }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(Arc<str>);

impl PatientId {
    pub fn new(s: impl AsRef<str>) -> Self {
        PatientId(Arc::from(s.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        PatientId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimEvent {
    pub patient_id: PatientId,
    pub concept_id: ConceptId,
    pub date: NaiveDate,
}

/// A patient's full history. Events are kept sorted by date; ties keep
/// their insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub birth_date: Option<NaiveDate>,
    pub sex: Sex,
    pub race: Race,
    events: Vec<ClaimEvent>,
}

impl PatientRecord {
    pub fn new(
        patient_id: PatientId,
        birth_date: Option<NaiveDate>,
        sex: Sex,
        race: Race,
        mut events: Vec<ClaimEvent>,
    ) -> Self {
        events.sort_by_key(|e| e.date);
        for e in &mut events {
            if e.patient_id != patient_id {
                e.patient_id = patient_id.clone();
            }
        }
        PatientRecord {
            patient_id,
            birth_date,
            sex,
            race,
            events,
        }
    }

    pub fn events(&self) -> &[ClaimEvent] {
        &self.events
    }

    /// Events dated on or before `as_of`.
    pub fn events_until(&self, as_of: NaiveDate) -> &[ClaimEvent] {
        let end = self.events.partition_point(|e| e.date <= as_of);
        &self.events[..end]
    }

    /// Events with `from <= date <= to`.
    pub fn events_between(&self, from: NaiveDate, to: NaiveDate) -> &[ClaimEvent] {
        let lo = self.events.partition_point(|e| e.date < from);
        let hi = self.events.partition_point(|e| e.date <= to);
        if lo >= hi {
            &[]
        } else {
            &self.events[lo..hi]
        }
    }

    pub fn span(&self) -> Option<(NaiveDate, NaiveDate)> {
        Some((self.events.first()?.date, self.events.last()?.date))
    }

    /// Completed years of age on `date`.
    pub fn age_at(&self, date: NaiveDate) -> Option<u32> {
        let birth = self.birth_date?;
        date.years_since(birth)
    }

    pub fn set_demographics(&mut self, birth_date: Option<NaiveDate>, sex: Sex, race: Race) {
        self.birth_date = birth_date;
        self.sex = sex;
        self.race = race;
    }
}
