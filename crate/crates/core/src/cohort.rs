//! Pregnancy episode inference over a patient's history, episode start/end
//! labeling, the age-matched never-pregnant cohort and patient-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::{
    CodeRole, CodeRoles, EpisodeOutcome, PatientId, PatientRecord, RiskLabel, SecondPass,
};

/// Full-term gestation used when back-filling an uncomplicated episode start.
pub const FULL_TERM_DAYS: u64 = 280;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CohortError {
    #[error("patient {0}: complicated episode has no pregnancy start code to label its start")]
    NoStartCode(PatientId),
    #[error("split fractions must be non-negative and sum to 1 (got {0:?})")]
    BadFractions([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartProvenance {
    Backfilled40w,
    FirstStartCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PregnancyEpisode {
    pub patient_id: PatientId,
    pub t_start: NaiveDate,
    pub t_end: NaiveDate,
    pub outcome: EpisodeOutcome,
    /// Outcome found by the first pass; its lookback bounds located `t_start`.
    pub anchor_outcome: EpisodeOutcome,
    pub start_provenance: StartProvenance,
    pub second_pass_updated: bool,
}

impl PregnancyEpisode {
    pub fn gestation_days(&self) -> i64 {
        (self.t_end - self.t_start).num_days()
    }

    pub fn is_complicated(&self) -> bool {
        self.outcome.is_complicated()
    }
}

fn sub_days(d: NaiveDate, n: u32) -> NaiveDate {
    d.checked_sub_days(Days::new(n as u64))
        .unwrap_or(NaiveDate::MIN)
}

/// Most recent pregnancy episode: latest outcome anchor, earliest start
/// anchor inside that outcome's lookback window, then a forward search over
/// `[t_start, t_out]` against the second-pass targets that may relabel the
/// outcome. Returns `None` when there is no outcome or no start in window.
pub fn infer_latest_episode(
    record: &PatientRecord,
    roles: &CodeRoles,
    pass: SecondPass,
) -> Option<PregnancyEpisode> {
    // first pass: latest outcome anchor, same-day ties to the most severe
    let mut found: Option<(NaiveDate, EpisodeOutcome, usize)> = None;
    for e in record.events().iter().rev() {
        if let Some((date, _, _)) = found {
            if e.date < date {
                break;
            }
        }
        if let Some(set) = roles.outcome_anchor_set(e.concept_id) {
            let outcome = set.outcome?;
            let rank = roles.severity_rank(outcome);
            match found {
                Some((_, _, best)) if best <= rank => {}
                _ => found = Some((e.date, outcome, rank)),
            }
        }
    }
    let (t_out, anchor_outcome, _) = found?;
    let bounds = roles.gestation_for(anchor_outcome)?;

    // backtrack: earliest start anchor in [t_out - g_max, t_out - g_min]
    let lo = sub_days(t_out, bounds.max_days);
    let hi = sub_days(t_out, bounds.min_days);
    let t_start = record
        .events_between(lo, hi)
        .iter()
        .find(|e| roles.is_start_anchor(e.concept_id))?
        .date;

    // forward search: latest matching target wins, same-day ties by severity
    let mut update: Option<(NaiveDate, EpisodeOutcome)> = None;
    for e in record.events_between(t_start, t_out) {
        for set in roles.sets_of(e.concept_id) {
            let selected = set.role == CodeRole::ComplicationTarget
                && match pass {
                    SecondPass::Identification => set.pregnancy_id,
                    SecondPass::RiskFactors => set.risk_factor,
                };
            let Some(outcome) = set.outcome.filter(|_| selected) else {
                continue;
            };
            update = match update {
                Some((d, prev))
                    if d == e.date && roles.severity_rank(prev) <= roles.severity_rank(outcome) =>
                {
                    Some((d, prev))
                }
                _ => Some((e.date, outcome)),
            };
        }
    }

    Some(PregnancyEpisode {
        patient_id: record.patient_id.clone(),
        t_start,
        t_end: t_out,
        outcome: update.map(|(_, o)| o).unwrap_or(anchor_outcome),
        anchor_outcome,
        start_provenance: StartProvenance::FirstStartCode,
        second_pass_updated: update.is_some(),
    })
}

/// Fixes the reference start of an episode. Uncomplicated pregnancies are
/// back-filled a full term before the outcome; complicated ones start at
/// the first start anchor inside the outcome's lookback window.
pub fn label_episode_bounds(
    episode: &PregnancyEpisode,
    complicated: bool,
    record: &PatientRecord,
    roles: &CodeRoles,
) -> Result<PregnancyEpisode, CohortError> {
    let mut out = episode.clone();
    if !complicated {
        out.t_start = episode.t_end - Days::new(FULL_TERM_DAYS);
        out.start_provenance = StartProvenance::Backfilled40w;
        return Ok(out);
    }
    let (lo, hi) = match roles.gestation_for(episode.anchor_outcome) {
        Some(b) => (
            sub_days(episode.t_end, b.max_days),
            sub_days(episode.t_end, b.min_days),
        ),
        None => (NaiveDate::MIN, episode.t_end),
    };
    let first = record
        .events_between(lo, hi)
        .iter()
        .find(|e| roles.is_start_anchor(e.concept_id))
        .ok_or_else(|| CohortError::NoStartCode(episode.patient_id.clone()))?;
    out.t_start = first.date;
    out.start_provenance = StartProvenance::FirstStartCode;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    Uncomplicated,
    Complicated,
    NeverPregnant,
    RiskNone,
    RiskGht,
    RiskGdb,
}

impl Subgroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Uncomplicated => "uncomplicated",
            Subgroup::Complicated => "complicated",
            Subgroup::NeverPregnant => "never_pregnant",
            Subgroup::RiskNone => "risk_none",
            Subgroup::RiskGht => "risk_ght",
            Subgroup::RiskGdb => "risk_gdb",
        }
    }

    pub fn for_risk(label: RiskLabel) -> Self {
        match label {
            RiskLabel::None => Subgroup::RiskNone,
            RiskLabel::Ght => Subgroup::RiskGht,
            RiskLabel::Gdb => Subgroup::RiskGdb,
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subgroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            Subgroup::Uncomplicated,
            Subgroup::Complicated,
            Subgroup::NeverPregnant,
            Subgroup::RiskNone,
            Subgroup::RiskGht,
            Subgroup::RiskGdb,
        ]
        .into_iter()
        .find(|g| g.as_str() == s.trim())
        .ok_or_else(|| format!("unknown subgroup `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|g| g.as_str() == s.trim())
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const IDENTIFICATION: SplitFractions = SplitFractions {
        train: 0.50,
        val: 0.25,
        test: 0.25,
    };
    /// 20% test, with validation carved as 20% of the total out of the 80%.
    pub const COMPLICATIONS: SplitFractions = SplitFractions {
        train: 0.60,
        val: 0.20,
        test: 0.20,
    };

    pub fn validate(&self) -> Result<(), CohortError> {
        let v = [self.train, self.val, self.test];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0)
            || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CohortError::BadFractions(v));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub min_age: u32,
    pub max_age: u32,
    pub fractions: SplitFractions,
    /// Share of never-pregnant patients in the final identification cohort.
    pub never_pregnant_share: f64,
    pub seed: u64,
}

impl CohortSpec {
    pub fn identification(seed: u64) -> Self {
        CohortSpec {
            min_age: 18,
            max_age: 48,
            fractions: SplitFractions::IDENTIFICATION,
            never_pregnant_share: 0.15,
            seed,
        }
    }

    pub fn complications(seed: u64) -> Self {
        CohortSpec {
            fractions: SplitFractions::COMPLICATIONS,
            never_pregnant_share: 0.0,
            ..Self::identification(seed)
        }
    }

    pub fn age_ok(&self, age: Option<u32>) -> bool {
        matches!(age, Some(a) if a >= self.min_age && a <= self.max_age)
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reference age for a never-pregnant patient: age at the midpoint of the
/// recorded history.
pub fn history_midpoint(record: &PatientRecord) -> Option<NaiveDate> {
    let (a, b) = record.span()?;
    Some(a + Days::new(((b - a).num_days() / 2) as u64))
}

pub fn has_any_anchor(record: &PatientRecord, roles: &CodeRoles) -> bool {
    record
        .events()
        .iter()
        .any(|e| roles.is_start_anchor(e.concept_id) || roles.is_outcome_anchor(e.concept_id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumFallback {
    pub wanted_age: u32,
    pub taken_age: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeverPregnantSample {
    pub selected: Vec<PatientId>,
    pub requested: usize,
    pub excluded_with_anchors: usize,
    pub fallbacks: Vec<StratumFallback>,
}

/// Samples `n` never-pregnant patients so that their integer-age histogram
/// follows `pregnant_ages` (largest-remainder quotas per age, seeded
/// shuffling within each age). Patients carrying any anchor code are
/// excluded. An exhausted stratum borrows from the nearest age that still
/// has candidates; each borrow is recorded.
pub fn build_never_pregnant_cohort(
    pool: &[PatientRecord],
    pregnant_ages: &[u32],
    n: usize,
    roles: &CodeRoles,
    seed: u64,
) -> NeverPregnantSample {
    let mut excluded = 0;
    let mut strata: BTreeMap<u32, Vec<PatientId>> = BTreeMap::new();
    for r in pool {
        if has_any_anchor(r, roles) {
            excluded += 1;
            continue;
        }
        if let Some(age) = history_midpoint(r).and_then(|m| r.age_at(m)) {
            strata.entry(age).or_default().push(r.patient_id.clone());
        }
    }
    let mut rng = seeded(seed, 0x006e_6576_6572);
    for ids in strata.values_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
    }

    let quotas = largest_remainder_quotas(pregnant_ages, n);
    let mut selected = Vec::with_capacity(n);
    let mut fallbacks: Vec<StratumFallback> = Vec::new();
    for (age, quota) in quotas {
        let mut need = quota;
        while need > 0 {
            let Some(take_age) = nearest_nonempty(&strata, age) else {
                break;
            };
            let bucket = strata.get_mut(&take_age).expect("stratum exists");
            let k = need.min(bucket.len());
            selected.extend(bucket.drain(..k));
            need -= k;
            if take_age != age {
                match fallbacks
                    .iter_mut()
                    .find(|f| f.wanted_age == age && f.taken_age == take_age)
                {
                    Some(f) => f.count += k,
                    None => fallbacks.push(StratumFallback {
                        wanted_age: age,
                        taken_age: take_age,
                        count: k,
                    }),
                }
            }
        }
    }
    selected.sort();
    NeverPregnantSample {
        selected,
        requested: n,
        excluded_with_anchors: excluded,
        fallbacks,
    }
}

fn nearest_nonempty(strata: &BTreeMap<u32, Vec<PatientId>>, age: u32) -> Option<u32> {
    strata
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(a, _)| *a)
        .min_by_key(|a| (a.abs_diff(age), *a))
}

/// Integer quotas per age summing to `n`, proportional to the age histogram.
fn largest_remainder_quotas(ages: &[u32], n: usize) -> Vec<(u32, usize)> {
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for a in ages {
        *hist.entry(*a).or_default() += 1;
    }
    let total = ages.len();
    if total == 0 {
        return Vec::new();
    }
    let mut quotas: Vec<(u32, usize, f64)> = hist
        .iter()
        .map(|(a, c)| {
            let exact = n as f64 * *c as f64 / total as f64;
            (*a, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&i, &j| {
        quotas[j]
            .2
            .total_cmp(&quotas[i].2)
            .then(quotas[i].0.cmp(&quotas[j].0))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        quotas[i].1 += 1;
    }
    quotas.into_iter().map(|(a, q, _)| (a, q)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub assignments: BTreeMap<PatientId, (Split, Subgroup)>,
}

impl Splits {
    pub fn split_of(&self, id: &PatientId) -> Option<Split> {
        self.assignments.get(id).map(|a| a.0)
    }

    pub fn members(&self, split: Split) -> BTreeSet<PatientId> {
        self.assignments
            .iter()
            .filter(|(_, (s, _))| *s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn count(&self, split: Split, group: Option<Subgroup>) -> usize {
        self.assignments
            .values()
            .filter(|(s, g)| *s == split && group.is_none_or(|x| x == *g))
            .count()
    }

    pub fn write_membership<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["patient_id", "split", "subgroup"])?;
        for (id, (split, group)) in &self.assignments {
            wtr.write_record([id.as_str(), split.as_str(), group.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_membership<R: std::io::Read>(r: R) -> Result<Self, String> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut assignments = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let id = PatientId::new(rec.get(0).ok_or("missing patient_id")?);
            let split: Split = rec.get(1).ok_or("missing split")?.parse()?;
            let group: Subgroup = rec.get(2).ok_or("missing subgroup")?.parse()?;
            assignments.insert(id, (split, group));
        }
        Ok(Splits { assignments })
    }
}

/// Patient-level partition. Each subgroup is shuffled and cut independently
/// (rounded train and validation counts, remainder to test), then the
/// subgroup splits are unioned.
pub fn split_by_patient(
    members: &[(PatientId, Subgroup)],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Splits, CohortError> {
    fractions.validate()?;
    let mut by_group: BTreeMap<Subgroup, Vec<PatientId>> = BTreeMap::new();
    for (id, g) in members {
        by_group.entry(*g).or_default().push(id.clone());
    }
    let mut assignments = BTreeMap::new();
    for (g, mut ids) in by_group {
        ids.sort();
        ids.dedup();
        let mut rng = seeded(seed, g as u64 + 1);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((fractions.train * n as f64).round() as usize).min(n);
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            assignments.insert(id, (split, g));
        }
    }
    Ok(Splits { assignments })
}

/// Identification cohort: episodes with labeled bounds plus the matched
/// never-pregnant patients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentificationCohort {
    pub episodes: BTreeMap<PatientId, PregnancyEpisode>,
    pub never_pregnant: NeverPregnantSample,
    pub splits: Splits,
    pub excluded_age: usize,
    pub excluded_unlabeled: usize,
}

pub fn build_identification_cohort(
    records: &[PatientRecord],
    roles: &CodeRoles,
    spec: &CohortSpec,
) -> Result<IdentificationCohort, CohortError> {
    let mut episodes = BTreeMap::new();
    let mut ages = Vec::new();
    let mut excluded_age = 0;
    let mut excluded_unlabeled = 0;
    let mut pool = Vec::new();
    for r in records {
        match infer_latest_episode(r, roles, SecondPass::Identification) {
            Some(ep) => {
                let complicated = ep.is_complicated();
                let labeled = match label_episode_bounds(&ep, complicated, r, roles) {
                    Ok(l) => l,
                    Err(_) => {
                        excluded_unlabeled += 1;
                        continue;
                    }
                };
                let age = r.age_at(labeled.t_start);
                if !spec.age_ok(age) {
                    excluded_age += 1;
                    continue;
                }
                ages.push(age.unwrap_or_default());
                episodes.insert(r.patient_id.clone(), labeled);
            }
            None => {
                if !has_any_anchor(r, roles) {
                    pool.push(r.clone());
                }
            }
        }
    }
    let pool: Vec<PatientRecord> = pool
        .into_iter()
        .filter(|r| spec.age_ok(history_midpoint(r).and_then(|m| r.age_at(m))))
        .collect();
    let share = spec.never_pregnant_share.clamp(0.0, 0.99);
    let wanted = ((episodes.len() as f64) * share / (1.0 - share)).round() as usize;
    let never = build_never_pregnant_cohort(&pool, &ages, wanted.min(pool.len()), roles, spec.seed);

    let mut members: Vec<(PatientId, Subgroup)> = episodes
        .values()
        .map(|e| {
            let g = if e.is_complicated() {
                Subgroup::Complicated
            } else {
                Subgroup::Uncomplicated
            };
            (e.patient_id.clone(), g)
        })
        .collect();
    members.extend(
        never
            .selected
            .iter()
            .map(|id| (id.clone(), Subgroup::NeverPregnant)),
    );
    let splits = split_by_patient(&members, spec.fractions, spec.seed)?;
    Ok(IdentificationCohort {
        episodes,
        never_pregnant: never,
        splits,
        excluded_age,
        excluded_unlabeled,
    })
}

/// Complications cohort: episodes whose (second-pass) outcome is a live
/// birth, gestational hypertension or gestational diabetes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskCohort {
    pub episodes: BTreeMap<PatientId, (PregnancyEpisode, RiskLabel)>,
    pub splits: Splits,
}

pub fn build_risk_cohort(
    records: &[PatientRecord],
    roles: &CodeRoles,
    spec: &CohortSpec,
) -> Result<RiskCohort, CohortError> {
    let mut episodes = BTreeMap::new();
    for r in records {
        let Some(ep) = infer_latest_episode(r, roles, SecondPass::RiskFactors) else {
            continue;
        };
        let Some(label) = ep.outcome.risk_label() else {
            continue;
        };
        if !spec.age_ok(r.age_at(ep.t_start)) {
            continue;
        }
        episodes.insert(r.patient_id.clone(), (ep, label));
    }
    let members: Vec<_> = episodes
        .iter()
        .map(|(id, (_, l))| (id.clone(), Subgroup::for_risk(*l)))
        .collect();
    let splits = split_by_patient(&members, spec.fractions, spec.seed)?;
    Ok(RiskCohort { episodes, splits })
}
