//! Windowed binary features over claims history, the weekly identification
//! grid, uniform complication cutoffs and the sparse design-matrix format.
//!
//! A temporal column `(concept, w)` is set for an as-of date when the
//! concept occurs in the half-open window `(as_of - w, as_of]`. The first
//! twelve columns are the non-temporal demographics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::{ConceptId, Domain, PatientId, PatientRecord, Race, Sex, Vocabulary};
use crate::cohort::PregnancyEpisode;
use crate::fingerprint::{sha256_hex, stable_hash};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature windows must be positive and strictly increasing: {0:?}")]
    BadWindows(Vec<u32>),
    #[error("design matrix line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of non-temporal columns at the front of every vocabulary.
pub const NONTEMPORAL_COUNT: usize = 12;

/// Weeks sampled before the episode start and after its end.
pub const GRID_MARGIN_WEEKS: i64 = 20;
/// Points sampled for never-pregnant patients.
pub const NEVER_PREGNANT_POINTS: usize = 80;
/// Complication cutoffs start this many days before the episode.
pub const CUTOFF_LEAD_DAYS: u64 = 90;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub windows_days: Vec<u32>,
    pub domains: BTreeSet<Domain>,
    /// Upper-exclusive edges of the five age-band slots.
    pub age_band_edges: [u32; 4],
}

impl FeatureSpec {
    fn five_domains() -> BTreeSet<Domain> {
        [
            Domain::Condition,
            Domain::Drug,
            Domain::Procedure,
            Domain::Specialty,
            Domain::Lab,
        ]
        .into_iter()
        .collect()
    }

    pub fn identification() -> Self {
        FeatureSpec {
            windows_days: vec![5, 10],
            domains: Self::five_domains(),
            age_band_edges: [25, 30, 35, 40],
        }
    }

    pub fn complications() -> Self {
        FeatureSpec {
            windows_days: vec![30, 180, 365, 730, 10_000],
            ..Self::identification()
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let w = &self.windows_days;
        if w.is_empty() || w[0] == 0 || w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(FeatureError::BadWindows(w.clone()));
        }
        Ok(())
    }

    pub fn nontemporal_names(&self) -> Vec<String> {
        let e = self.age_band_edges;
        let mut names: Vec<String> = [
            "age",
            "sex_female",
            "sex_male",
            "race_white",
            "race_black",
            "race_other",
            "race_unreported",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        names.push(format!("age_lt_{}", e[0]));
        for p in e.windows(2) {
            names.push(format!("age_{}_{}", p[0], p[1] - 1));
        }
        names.push(format!("age_ge_{}", e[3]));
        debug_assert_eq!(names.len(), NONTEMPORAL_COUNT);
        names
    }
}

/// Concepts eligible for temporal columns: in an included domain and not
/// excluded (anchor removal).
#[derive(Debug, Clone, Default)]
pub struct ConceptFilter {
    allowed: HashSet<ConceptId>,
}

impl ConceptFilter {
    pub fn new(vocab: &Vocabulary, spec: &FeatureSpec, exclude: &BTreeSet<ConceptId>) -> Self {
        let allowed = vocab
            .iter()
            .filter(|c| spec.domains.contains(&c.domain) && !exclude.contains(&c.id))
            .map(|c| c.id)
            .collect();
        ConceptFilter { allowed }
    }

    pub fn allows(&self, c: ConceptId) -> bool {
        self.allowed.contains(&c)
    }
}

/// Calls `hit(concept, window_index)` for every window containing an event.
fn scan_windows(
    record: &PatientRecord,
    as_of: NaiveDate,
    windows: &[u32],
    filter: &ConceptFilter,
    mut hit: impl FnMut(ConceptId, usize),
) {
    let Some(&widest) = windows.last() else {
        return;
    };
    let lo = as_of
        .checked_sub_days(Days::new(widest as u64 - 1))
        .unwrap_or(NaiveDate::MIN);
    for e in record.events_between(lo, as_of) {
        if !filter.allows(e.concept_id) {
            continue;
        }
        let delta = (as_of - e.date).num_days();
        let first = windows.partition_point(|&w| (w as i64) <= delta);
        for wi in first..windows.len() {
            hit(e.concept_id, wi);
        }
    }
}

/// Collects the `(concept, window)` pairs and age range seen on the training
/// split, then freezes them into a [`FeatureVocabulary`].
#[derive(Debug, Clone)]
pub struct VocabularyBuilder {
    spec: FeatureSpec,
    pairs: BTreeSet<(ConceptId, u32)>,
    age_min: Option<u32>,
    age_max: Option<u32>,
}

impl VocabularyBuilder {
    pub fn new(spec: FeatureSpec) -> Result<Self, FeatureError> {
        spec.validate()?;
        Ok(VocabularyBuilder {
            spec,
            pairs: BTreeSet::new(),
            age_min: None,
            age_max: None,
        })
    }

    pub fn observe(&mut self, record: &PatientRecord, as_of: NaiveDate, filter: &ConceptFilter) {
        let windows = &self.spec.windows_days;
        let pairs = &mut self.pairs;
        scan_windows(record, as_of, windows, filter, |c, wi| {
            pairs.insert((c, windows[wi]));
        });
        if let Some(age) = record.age_at(as_of) {
            self.age_min = Some(self.age_min.map_or(age, |m| m.min(age)));
            self.age_max = Some(self.age_max.map_or(age, |m| m.max(age)));
        }
    }

    pub fn freeze(self) -> FeatureVocabulary {
        let (lo, hi) = match (self.age_min, self.age_max) {
            (Some(a), Some(b)) => (a as f64, b as f64),
            _ => (18.0, 48.0),
        };
        FeatureVocabulary::from_parts(self.spec, self.pairs.into_iter().collect(), lo, hi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabularyRepr {
    spec: FeatureSpec,
    nontemporal: Vec<String>,
    temporal: Vec<(ConceptId, u32)>,
    age_min: f64,
    age_max: f64,
}

/// Frozen bijection between features and column indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct FeatureVocabulary {
    spec: FeatureSpec,
    nontemporal: Vec<String>,
    temporal: Vec<(ConceptId, u32)>,
    index: HashMap<(ConceptId, u32), u32>,
    age_min: f64,
    age_max: f64,
    fingerprint: String,
}

impl From<VocabularyRepr> for FeatureVocabulary {
    fn from(r: VocabularyRepr) -> Self {
        FeatureVocabulary::from_parts(r.spec, r.temporal, r.age_min, r.age_max)
    }
}

impl From<FeatureVocabulary> for VocabularyRepr {
    fn from(v: FeatureVocabulary) -> Self {
        VocabularyRepr {
            spec: v.spec,
            nontemporal: v.nontemporal,
            temporal: v.temporal,
            age_min: v.age_min,
            age_max: v.age_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKey {
    Nontemporal(String),
    Windowed {
        concept: ConceptId,
        window_days: u32,
    },
}

impl FeatureVocabulary {
    pub fn from_parts(
        spec: FeatureSpec,
        mut temporal: Vec<(ConceptId, u32)>,
        age_min: f64,
        age_max: f64,
    ) -> Self {
        temporal.sort();
        temporal.dedup();
        let nontemporal = spec.nontemporal_names();
        let index = temporal
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, (i + NONTEMPORAL_COUNT) as u32))
            .collect();
        let repr = VocabularyRepr {
            spec: spec.clone(),
            nontemporal: nontemporal.clone(),
            temporal: temporal.clone(),
            age_min,
            age_max,
        };
        let canonical = serde_json::to_vec(&repr).expect("vocabulary serializes");
        let fingerprint = sha256_hex(&canonical)[..16].to_string();
        FeatureVocabulary {
            spec,
            nontemporal,
            temporal,
            index,
            age_min,
            age_max,
            fingerprint,
        }
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn total_columns(&self) -> usize {
        NONTEMPORAL_COUNT + self.temporal.len()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn column_of(&self, concept: ConceptId, window_days: u32) -> Option<u32> {
        self.index.get(&(concept, window_days)).copied()
    }

    pub fn key(&self, column: u32) -> Option<FeatureKey> {
        let c = column as usize;
        if c < NONTEMPORAL_COUNT {
            return Some(FeatureKey::Nontemporal(self.nontemporal[c].clone()));
        }
        self.temporal
            .get(c - NONTEMPORAL_COUNT)
            .map(|&(concept, window_days)| FeatureKey::Windowed {
                concept,
                window_days,
            })
    }

    /// Min-max scaled age, clamped to [0, 1].
    pub fn scale_age(&self, age: u32) -> f64 {
        let span = self.age_max - self.age_min;
        if span <= 0.0 {
            return 0.0;
        }
        ((age as f64 - self.age_min) / span).clamp(0.0, 1.0)
    }

    fn age_band(&self, age: u32) -> usize {
        self.spec.age_band_edges.partition_point(|&e| e <= age)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseExample {
    pub patient_id: PatientId,
    pub as_of: NaiveDate,
    /// Strictly increasing column indices.
    pub columns: Vec<u32>,
    pub values: Vec<f64>,
    /// Binary label (0/1) or risk class index.
    pub label: u8,
}

impl SparseExample {
    pub fn nnz(&self) -> usize {
        self.columns.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.columns
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }
}

/// Features of `record` as of `as_of`. Events after `as_of` are never read.
pub fn extract_features(
    record: &PatientRecord,
    as_of: NaiveDate,
    vocab: &FeatureVocabulary,
    filter: &ConceptFilter,
) -> SparseExample {
    let mut cols: Vec<(u32, f64)> = Vec::new();
    if let Some(age) = record.age_at(as_of) {
        let scaled = vocab.scale_age(age);
        if scaled > 0.0 {
            cols.push((0, scaled));
        }
        cols.push((7 + vocab.age_band(age) as u32, 1.0));
    }
    match record.sex {
        Sex::Female => cols.push((1, 1.0)),
        Sex::Male => cols.push((2, 1.0)),
        Sex::Unknown => {}
    }
    let race_col = match record.race {
        Race::White => 3,
        Race::Black => 4,
        Race::Other => 5,
        Race::Unreported => 6,
    };
    cols.push((race_col, 1.0));

    let windows = &vocab.spec.windows_days;
    scan_windows(record, as_of, windows, filter, |c, wi| {
        if let Some(col) = vocab.column_of(c, windows[wi]) {
            cols.push((col, 1.0));
        }
    });
    cols.sort_by_key(|c| c.0);
    cols.dedup_by_key(|c| c.0);
    let (columns, values) = cols.into_iter().unzip();
    SparseExample {
        patient_id: record.patient_id.clone(),
        as_of,
        columns,
        values,
        label: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSample {
    pub points: Vec<(NaiveDate, bool)>,
    /// Never-pregnant history shorter than the full grid.
    pub clamped: bool,
}

fn week_end(origin: NaiveDate, k: usize) -> NaiveDate {
    origin + Days::new(7 * k as u64 + 6)
}

/// Weekly as-of dates (each the last day of its week). Pregnant patients
/// are sampled from 20 weeks before `t_start` to 20 weeks after `t_end`
/// with label `t_start <= as_of <= t_end`; never-pregnant patients get 80
/// unlabeled weeks centered on their history midpoint.
pub fn sample_identification_grid(
    record: &PatientRecord,
    episode: Option<&PregnancyEpisode>,
) -> GridSample {
    match episode {
        Some(ep) => {
            let origin = ep.t_start - Days::new(7 * GRID_MARGIN_WEEKS as u64);
            let span = ep.gestation_days() + 14 * GRID_MARGIN_WEEKS;
            let weeks = ((span + 6) / 7).max(0) as usize;
            let points = (0..weeks)
                .map(|k| {
                    let d = week_end(origin, k);
                    (d, ep.t_start <= d && d <= ep.t_end)
                })
                .collect();
            GridSample {
                points,
                clamped: false,
            }
        }
        None => {
            let Some((first, last)) = record.span() else {
                return GridSample {
                    points: Vec::new(),
                    clamped: true,
                };
            };
            let span_days = (last - first).num_days() + 1;
            let full = 7 * NEVER_PREGNANT_POINTS as i64;
            let (origin, weeks, clamped) = if span_days >= full {
                let mid = first + Days::new(((last - first).num_days() / 2) as u64);
                let origin = mid - Days::new((full / 2) as u64);
                let origin = origin.max(first).min(last - Days::new(full as u64 - 1));
                (origin, NEVER_PREGNANT_POINTS, false)
            } else {
                (first, ((span_days / 7).max(1)) as usize, true)
            };
            let points = (0..weeks).map(|k| (week_end(origin, k), false)).collect();
            GridSample { points, clamped }
        }
    }
}

/// `n` cutoff dates drawn uniformly on `[t_start - 90d, t_end]`, sorted.
/// The draw depends only on `seed` and the patient id.
pub fn sample_complication_cutoffs(ep: &PregnancyEpisode, n: usize, seed: u64) -> Vec<NaiveDate> {
    let lo = ep.t_start - Days::new(CUTOFF_LEAD_DAYS);
    let span = (ep.t_end - lo).num_days().max(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(ep.patient_id.as_str()));
    let mut out: Vec<NaiveDate> = (0..n)
        .map(|_| lo + Days::new(rng.random_range(0..=span)))
        .collect();
    out.sort();
    out
}

/// Rows over a frozen vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub fingerprint: String,
    pub total_columns: usize,
    pub n_classes: usize,
    pub rows: Vec<SparseExample>,
}

impl DesignMatrix {
    pub fn new(vocab: &FeatureVocabulary, n_classes: usize, rows: Vec<SparseExample>) -> Self {
        DesignMatrix {
            fingerprint: vocab.fingerprint().to_string(),
            total_columns: vocab.total_columns(),
            n_classes,
            rows,
        }
    }

    /// Same header, no rows.
    pub fn clone_header(&self) -> Self {
        DesignMatrix {
            fingerprint: self.fingerprint.clone(),
            total_columns: self.total_columns,
            n_classes: self.n_classes,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Sparse triplet text: a header line carrying the column count, class
    /// count, vocabulary fingerprint and file, then one row per example.
    pub fn write<W: Write>(&self, mut w: W, vocabulary_file: &str) -> std::io::Result<()> {
        writeln!(
            w,
            "# total_columns={} classes={} fingerprint={} vocabulary={}",
            self.total_columns, self.n_classes, self.fingerprint, vocabulary_file
        )?;
        writeln!(w, "patient_id,as_of,label,features")?;
        for r in &self.rows {
            write!(w, "{},{},{},", r.patient_id, r.as_of, r.label)?;
            for (i, (c, v)) in r.iter().enumerate() {
                if i > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{c}:{v}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, FeatureError> {
        let mut lines = r.lines().enumerate();
        let perr = |line: usize, message: &str| FeatureError::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| perr(0, "empty file"))?;
        let header = header?;
        let mut total_columns = None;
        let mut n_classes = None;
        let mut fingerprint = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("total_columns", v)) => total_columns = v.parse().ok(),
                Some(("classes", v)) => n_classes = v.parse().ok(),
                Some(("fingerprint", v)) => fingerprint = Some(v.to_string()),
                _ => {}
            }
        }
        let total_columns = total_columns.ok_or_else(|| perr(0, "missing total_columns"))?;
        let n_classes = n_classes.ok_or_else(|| perr(0, "missing classes"))?;
        let fingerprint = fingerprint.ok_or_else(|| perr(0, "missing fingerprint"))?;
        let mut rows = Vec::new();
        for (ln, line) in lines {
            let line = line?;
            if ln == 1 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(4, ',');
            let (Some(pid), Some(date), Some(label), Some(feats)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(perr(ln, "expected 4 fields"));
            };
            let as_of =
                NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|_| perr(ln, "bad date"))?;
            let label: u8 = label.parse().map_err(|_| perr(ln, "bad label"))?;
            let mut columns = Vec::new();
            let mut values = Vec::new();
            for tok in feats.split_whitespace() {
                let (c, v) = tok.split_once(':').ok_or_else(|| perr(ln, "bad idx:val"))?;
                let c: u32 = c.parse().map_err(|_| perr(ln, "bad column"))?;
                if c as usize >= total_columns || columns.last().is_some_and(|&p| p >= c) {
                    return Err(perr(ln, "column indices must increase and stay in range"));
                }
                columns.push(c);
                values.push(v.parse().map_err(|_| perr(ln, "bad value"))?);
            }
            rows.push(SparseExample {
                patient_id: PatientId::new(pid),
                as_of,
                columns,
                values,
                label,
            });
        }
        Ok(DesignMatrix {
            fingerprint,
            total_columns,
            n_classes,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{parse_date, ClaimEvent, CodeRoles, ConceptCode, EpisodeOutcome};
    use crate::cohort::StartProvenance;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn vocab() -> Vocabulary {
        [
            (10, Domain::Condition),
            (20, Domain::Lab),
            (4001, Domain::Condition),
            (30, Domain::Observation),
        ]
        .into_iter()
        .map(|(id, domain)| ConceptCode {
            id: ConceptId(id),
            domain,
            description: String::new(),
        })
        .collect()
    }

    fn rec(events: &[(u32, NaiveDate)]) -> PatientRecord {
        let pid = PatientId::new("p");
        PatientRecord::new(
            pid.clone(),
            Some(d("1990-01-01")),
            Sex::Female,
            Race::White,
            events
                .iter()
                .map(|(c, date)| ClaimEvent {
                    patient_id: pid.clone(),
                    concept_id: ConceptId(*c),
                    date: *date,
                })
                .collect(),
        )
    }

    fn frozen_for(r: &PatientRecord, as_of: NaiveDate, f: &ConceptFilter) -> FeatureVocabulary {
        let mut b = VocabularyBuilder::new(FeatureSpec::identification()).unwrap();
        b.observe(r, as_of, f);
        b.freeze()
    }

    fn windowed(v: &FeatureVocabulary, ex: &SparseExample) -> Vec<(u32, u32)> {
        ex.columns
            .iter()
            .filter_map(|&c| match v.key(c) {
                Some(FeatureKey::Windowed {
                    concept,
                    window_days,
                }) => Some((concept.0, window_days)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn event_three_days_ago_sets_both_windows() {
        let as_of = d("2020-06-10");
        let r = rec(&[(10, d("2020-06-07"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        let ex = extract_features(&r, as_of, &v, &f);
        assert_eq!(windowed(&v, &ex), vec![(10, 5), (10, 10)]);
    }

    #[test]
    fn event_seven_days_ago_sets_only_ten_day_window() {
        let as_of = d("2020-06-10");
        let r = rec(&[(10, d("2020-06-03"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        assert_eq!(
            windowed(&v, &extract_features(&r, as_of, &v, &f)),
            vec![(10, 10)]
        );
    }

    #[test]
    fn window_is_half_open() {
        let as_of = d("2020-06-10");
        let r = rec(&[(10, d("2020-06-05")), (20, d("2020-06-10"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        // 5 days back is outside the 5-day window; same-day is inside
        assert_eq!(
            windowed(&v, &extract_features(&r, as_of, &v, &f)),
            vec![(10, 10), (20, 5), (20, 10)]
        );
    }

    #[test]
    fn excluded_anchor_never_set() {
        let as_of = d("2020-06-10");
        let r = rec(&[(4001, d("2020-06-09"))]);
        let exclude = CodeRoles::default_config().anchor_concepts();
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &exclude);
        let v = frozen_for(&r, as_of, &f);
        assert!(windowed(&v, &extract_features(&r, as_of, &v, &f)).is_empty());
    }

    #[test]
    fn out_of_domain_concepts_ignored() {
        let as_of = d("2020-06-10");
        let r = rec(&[(30, d("2020-06-09"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        assert_eq!(v.total_columns(), NONTEMPORAL_COUNT);
    }

    #[test]
    fn nontemporal_always_present() {
        let as_of = d("2020-06-10");
        let r = rec(&[]);
        let f = ConceptFilter::default();
        let v = frozen_for(&r, as_of, &f);
        let ex = extract_features(&r, as_of, &v, &f);
        // female, white, age band 30-34
        assert!(ex.columns.contains(&1));
        assert!(ex.columns.contains(&3));
        assert!(ex.columns.contains(&9));
    }

    #[test]
    fn freeze_counts_and_determinism() {
        let as_of = d("2020-06-10");
        let r = rec(&[(20, d("2020-06-09")), (10, d("2020-06-08"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v1 = frozen_for(&r, as_of, &f);
        let v2 = frozen_for(&r, as_of, &f);
        assert_eq!(v1.total_columns(), 16);
        assert_eq!(v1.fingerprint(), v2.fingerprint());
        assert_eq!(v1.column_of(ConceptId(10), 5), Some(12));
        assert_eq!(v1.column_of(ConceptId(10), 10), Some(13));
        assert_eq!(v1.column_of(ConceptId(20), 5), Some(14));
        // unseen concept at test time contributes nothing
        let later = rec(&[(20, d("2021-01-01")), (99, d("2021-01-01"))]);
        let mut wide = vocab();
        wide.insert(ConceptCode {
            id: ConceptId(99),
            domain: Domain::Lab,
            description: String::new(),
        })
        .unwrap();
        let f2 = ConceptFilter::new(&wide, &FeatureSpec::identification(), &BTreeSet::new());
        let ex = extract_features(&later, d("2021-01-02"), &v1, &f2);
        assert!(ex
            .columns
            .iter()
            .all(|&c| (c as usize) < v1.total_columns()));
        assert_eq!(windowed(&v1, &ex), vec![(20, 5), (20, 10)]);
    }

    fn episode(start: &str, end: &str) -> PregnancyEpisode {
        PregnancyEpisode {
            patient_id: PatientId::new("p"),
            t_start: d(start),
            t_end: d(end),
            outcome: EpisodeOutcome::LiveBirth,
            anchor_outcome: EpisodeOutcome::LiveBirth,
            start_provenance: StartProvenance::Backfilled40w,
            second_pass_updated: false,
        }
    }

    #[test]
    fn forty_week_grid_has_80_points_40_positive() {
        // oracle: enumerate every day in the sampled span and count week ends
        let ep = episode("2020-01-01", "2020-10-07");
        let g = sample_identification_grid(&rec(&[]), Some(&ep));
        assert_eq!(g.points.len(), 80);
        assert_eq!(g.points.iter().filter(|p| p.1).count(), 40);
        assert!(g
            .points
            .windows(2)
            .all(|w| (w[1].0 - w[0].0).num_days() == 7));
        assert_eq!(g.points[0].0, d("2020-01-01") - Days::new(140 - 6));
    }

    #[test]
    fn thirty_week_grid_has_70_points() {
        let ep = episode("2020-01-01", "2020-07-29");
        assert_eq!(ep.gestation_days(), 210);
        let g = sample_identification_grid(&rec(&[]), Some(&ep));
        assert_eq!(g.points.len(), 70);
        assert_eq!(g.points.iter().filter(|p| p.1).count(), 30);
    }

    #[test]
    fn never_pregnant_grid_is_centered() {
        let first = d("2016-01-01");
        let last = first + Days::new(200 * 7 - 1);
        let r = rec(&[(10, first), (10, last)]);
        let g = sample_identification_grid(&r, None);
        assert_eq!(g.points.len(), 80);
        assert!(!g.clamped);
        assert!(g.points.iter().all(|p| !p.1));
        let before = (g.points[0].0 - first).num_days();
        let after = (last - g.points[79].0).num_days();
        assert!((before - after).abs() <= 7, "{before} vs {after}");
    }

    #[test]
    fn short_never_pregnant_history_is_clamped() {
        let first = d("2016-01-01");
        let r = rec(&[(10, first), (10, first + Days::new(30 * 7 - 1))]);
        let g = sample_identification_grid(&r, None);
        assert!(g.clamped);
        assert_eq!(g.points.len(), 30);
        assert!(g.points.last().unwrap().0 <= first + Days::new(30 * 7 - 1));
    }

    #[test]
    fn cutoffs_in_interval_and_deterministic() {
        let ep = episode("2020-01-01", "2020-10-07");
        let a = sample_complication_cutoffs(&ep, 10, 42);
        assert_eq!(a.len(), 10);
        assert!(a
            .iter()
            .all(|c| *c >= d("2019-10-03") && *c <= d("2020-10-07")));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(a, sample_complication_cutoffs(&ep, 10, 42));
    }

    #[test]
    fn cutoff_positions_follow_uniform_quartiles() {
        let mut pos = Vec::new();
        for i in 0..1000 {
            let mut ep = episode("2020-01-01", "2020-10-07");
            ep.patient_id = PatientId::new(format!("p{i}"));
            let lo = ep.t_start - Days::new(CUTOFF_LEAD_DAYS);
            let span = (ep.t_end - lo).num_days() as f64;
            for c in sample_complication_cutoffs(&ep, 10, 7) {
                pos.push((c - lo).num_days() as f64 / span);
            }
        }
        pos.sort_by(f64::total_cmp);
        for (q, want) in [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75)] {
            let got = pos[(q * pos.len() as f64) as usize];
            assert!((got - want).abs() <= 0.02, "q{q}: {got}");
        }
    }

    #[test]
    fn design_matrix_text_roundtrip() {
        let as_of = d("2020-06-10");
        let r = rec(&[(20, d("2020-06-09")), (10, d("2020-06-08"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        let mut ex = extract_features(&r, as_of, &v, &f);
        ex.label = 1;
        let m = DesignMatrix::new(&v, 2, vec![ex]);
        let mut buf = Vec::new();
        m.write(&mut buf, "vocab.json").unwrap();
        let back = DesignMatrix::read(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn vocabulary_json_roundtrip_keeps_fingerprint() {
        let as_of = d("2020-06-10");
        let r = rec(&[(20, d("2020-06-09"))]);
        let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &BTreeSet::new());
        let v = frozen_for(&r, as_of, &f);
        let s = serde_json::to_string(&v).unwrap();
        let back: FeatureVocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(
            back.column_of(ConceptId(20), 10),
            v.column_of(ConceptId(20), 10)
        );
    }

    fn arb_events() -> impl Strategy<Value = Vec<(u32, i64)>> {
        prop::collection::vec(
            (prop::sample::select(vec![10u32, 20, 4001]), -40i64..40),
            0..30,
        )
    }

    proptest! {
        #[test]
        fn windows_monotone_and_causal(events in arb_events(), future in 1i64..30) {
            let as_of = d("2020-06-10");
            let evs: Vec<_> = events.iter().map(|(c, off)| (*c, as_of + chrono::Duration::days(*off))).collect();
            let r = rec(&evs);
            let exclude = CodeRoles::default_config().anchor_concepts();
            let f = ConceptFilter::new(&vocab(), &FeatureSpec::identification(), &exclude);
            let mut b = VocabularyBuilder::new(FeatureSpec::identification()).unwrap();
            for off in -5..45 {
                b.observe(&r, as_of + chrono::Duration::days(off), &f);
            }
            let v = b.freeze();
            let ex = extract_features(&r, as_of, &v, &f);
            let set = windowed(&v, &ex);
            for (c, w) in &set {
                prop_assert!(*c != 4001, "anchor leaked");
                if *w == 5 {
                    prop_assert!(set.contains(&(*c, 10)));
                }
            }
            let mut more = evs.clone();
            more.push((10, as_of + chrono::Duration::days(future)));
            let r2 = rec(&more);
            prop_assert_eq!(extract_features(&r2, as_of, &v, &f), ex);
        }
    }
}
