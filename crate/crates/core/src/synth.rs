//! Seeded synthetic claims with ground truth.
//!
//! Each patient is uncomplicated-pregnant, complicated-pregnant or never
//! pregnant. Pregnant patients carry latent history, risk-factor and
//! per-trimester marker flags; the pregnancy class follows a multinomial
//! logit over those flags whose intercepts are calibrated so the class
//! marginals match the configured shares. Latents are sampled from their
//! posterior given the class, which is the same joint distribution.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, Days, Months, NaiveDate};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::claims::{
    ClaimEvent, ConceptCode, ConceptId, Domain, EpisodeOutcome, PatientId, PatientRecord, Race,
    RiskLabel, Sex, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("ground truth line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub mod concepts {
    //! Concept ids of the synthetic vocabulary.
    pub const BACKGROUND_CONDITIONS: std::ops::RangeInclusive<u32> = 1001..=1052;
    pub const BACKGROUND_DRUGS: std::ops::RangeInclusive<u32> = 1101..=1130;
    pub const BACKGROUND_PROCEDURES: std::ops::RangeInclusive<u32> = 1201..=1230;
    pub const BACKGROUND_SPECIALTIES: std::ops::RangeInclusive<u32> = 1301..=1310;
    pub const BACKGROUND_LABS: std::ops::RangeInclusive<u32> = 1401..=1420;
    pub const CORRELATES: [u32; 8] = [3001, 3002, 3003, 3004, 3005, 3006, 3007, 3008];
    pub const START_ANCHORS: [u32; 3] = [4001, 4002, 4003];
    pub const LIVE_BIRTH: [u32; 2] = [4101, 4102];
    pub const DB_HISTORY: [u32; 3] = [5001, 5002, 5003];
    pub const HT_HISTORY: [u32; 3] = [5101, 5102, 5103];
    pub const GHT_RISK_FACTORS: [u32; 2] = [5201, 5202];
    pub const GDB_RISK_FACTORS: [u32; 2] = [5203, 5204];
    pub const GHT_MARKERS: [u32; 2] = [6001, 6002];
    pub const GDB_MARKERS: [u32; 2] = [6101, 6102];
    pub const NICU: [u32; 5] = [7001, 7002, 7003, 7004, 7005];
    pub const HPPE: [u32; 5] = [7101, 7102, 7103, 7104, 7105];
    pub const PRETERM: [u32; 5] = [7201, 7202, 7203, 7204, 7205];
    pub const GHT: [u32; 6] = [7301, 7302, 7303, 7304, 7305, 7306];
    pub const GDB: [u32; 5] = [7401, 7402, 7403, 7404, 7405];
}

/// The 200-concept vocabulary used by the generator.
pub fn synth_vocabulary() -> Vocabulary {
    use concepts::*;
    let mut codes: Vec<(u32, Domain, String)> = Vec::new();
    let mut push_range = |r: std::ops::RangeInclusive<u32>, d: Domain, label: &str| {
        for id in r {
            codes.push((id, d, format!("{label} {id}")));
        }
    };
    push_range(BACKGROUND_CONDITIONS, Domain::Condition, "condition");
    push_range(BACKGROUND_DRUGS, Domain::Drug, "drug");
    push_range(BACKGROUND_PROCEDURES, Domain::Procedure, "procedure");
    push_range(BACKGROUND_SPECIALTIES, Domain::Specialty, "specialty visit");
    push_range(BACKGROUND_LABS, Domain::Lab, "lab");
    let named: [(u32, Domain, &str); 48] = [
        (3001, Domain::Specialty, "obstetrics and gynecology visit"),
        (3002, Domain::Lab, "urinalysis dip stick"),
        (3003, Domain::Lab, "chorionic gonadotropin"),
        (3004, Domain::Drug, "prenatal vitamin"),
        (3005, Domain::Procedure, "obstetric ultrasound"),
        (3006, Domain::Procedure, "immunization administration"),
        (3007, Domain::Procedure, "venipuncture"),
        (3008, Domain::Lab, "urine culture colony count"),
        (
            4001,
            Domain::Condition,
            "supervision of normal first pregnancy",
        ),
        (
            4002,
            Domain::Condition,
            "supervision of other normal pregnancy",
        ),
        (4003, Domain::Procedure, "initial prenatal care visit"),
        (4101, Domain::Condition, "single live birth"),
        (4102, Domain::Procedure, "vaginal delivery"),
        (4103, Domain::Condition, "stillbirth"),
        (4104, Domain::Condition, "spontaneous abortion"),
        (4105, Domain::Procedure, "induced abortion"),
        (4106, Domain::Condition, "ectopic pregnancy"),
        (4201, Domain::Condition, "amenorrhea"),
        (5001, Domain::Condition, "type 2 diabetes mellitus"),
        (5002, Domain::Drug, "metformin"),
        (5003, Domain::Lab, "hemoglobin A1c elevated"),
        (5101, Domain::Condition, "essential hypertension"),
        (5102, Domain::Drug, "lisinopril"),
        (5103, Domain::Condition, "hypertensive heart disease"),
        (5201, Domain::Condition, "obesity"),
        (5202, Domain::Condition, "chronic kidney disease"),
        (5203, Domain::Condition, "polycystic ovary syndrome"),
        (5204, Domain::Condition, "prediabetes"),
        (6001, Domain::Lab, "urine protein"),
        (6002, Domain::Condition, "elevated blood pressure reading"),
        (6101, Domain::Lab, "glucose tolerance test"),
        (6102, Domain::Drug, "glucose meter supplies"),
        (7001, Domain::Procedure, "neonatal intensive care admission"),
        (7002, Domain::Condition, "newborn respiratory distress"),
        (7003, Domain::Condition, "neonatal jaundice of prematurity"),
        (7004, Domain::Procedure, "neonatal critical care"),
        (7005, Domain::Condition, "low birth weight"),
        (7101, Domain::Condition, "pre-eclampsia"),
        (7102, Domain::Condition, "eclampsia"),
        (7103, Domain::Condition, "HELLP syndrome"),
        (7104, Domain::Condition, "postpartum hypertension"),
        (7105, Domain::Drug, "magnesium sulfate"),
        (7201, Domain::Condition, "preterm labor"),
        (7202, Domain::Condition, "preterm delivery"),
        (7203, Domain::Procedure, "cervical cerclage"),
        (7204, Domain::Drug, "antenatal corticosteroid"),
        (7205, Domain::Condition, "premature rupture of membranes"),
        (7301, Domain::Condition, "gestational hypertension"),
    ];
    for (id, d, label) in named {
        codes.push((id, d, label.to_string()));
    }
    let rest: [(u32, Domain, &str); 10] = [
        (
            7302,
            Domain::Condition,
            "gestational hypertension without proteinuria",
        ),
        (7303, Domain::Condition, "pregnancy-induced hypertension"),
        (7304, Domain::Lab, "blood pressure monitoring"),
        (
            7305,
            Domain::Procedure,
            "ambulatory blood pressure monitoring",
        ),
        (7306, Domain::Drug, "methyldopa"),
        (7401, Domain::Condition, "gestational diabetes"),
        (
            7402,
            Domain::Condition,
            "gestational diabetes diet controlled",
        ),
        (
            7403,
            Domain::Condition,
            "gestational diabetes insulin controlled",
        ),
        (7404, Domain::Lab, "glucose challenge abnormal"),
        (7405, Domain::Drug, "insulin"),
    ];
    for (id, d, label) in rest {
        codes.push((id, d, label.to_string()));
    }
    codes
        .into_iter()
        .map(|(id, domain, description)| ConceptCode {
            id: ConceptId(id),
            domain,
            description,
        })
        .collect()
}

/// Coefficients of the pregnancy-class logit over the latent flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoefficients {
    /// Own-condition history (hypertension for GHT, diabetes for GDB).
    pub history: f64,
    /// The other condition's history.
    pub cross_history: f64,
    pub risk_factor: f64,
    /// Marker coefficients for trimesters 1, 2, 3.
    pub markers: [f64; 3],
    /// Weak history effect on the other complications.
    pub other_history: f64,
    pub p_db_history: f64,
    pub p_ht_history: f64,
    pub p_risk_factor: f64,
    pub p_marker: f64,
}

impl Default for RiskCoefficients {
    fn default() -> Self {
        RiskCoefficients {
            history: 2.5,
            cross_history: 0.4,
            risk_factor: 1.2,
            markers: [2.0, 2.5, 3.0],
            other_history: 0.3,
            p_db_history: 0.08,
            p_ht_history: 0.10,
            p_risk_factor: 0.15,
            p_marker: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Expected subgroup sizes; each patient's subgroup is drawn with
    /// probabilities proportional to these.
    pub n_uncomplicated: usize,
    pub n_complicated: usize,
    pub n_never: usize,
    /// Shares of GHT, GDB, NICU, HPPE, preterm within complicated patients.
    pub complicated_mix: [f64; 5],
    pub gestation_mean_days: f64,
    pub gestation_sd_days: f64,
    pub gestation_min_days: u32,
    pub gestation_max_days: u32,
    pub preterm_max_days: u32,
    /// Fraction of complicated patients whose start code is delayed.
    pub delayed_fraction: f64,
    pub delay_mean_weeks: f64,
    pub correlate_p_in: f64,
    pub correlate_p_out: f64,
    pub background_per_week: f64,
    pub coefficients: RiskCoefficients,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: u32,
    pub age_max: u32,
    /// White, black, other, unreported.
    pub race_probs: [f64; 4],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_total(5000, 0)
    }
}

impl GeneratorConfig {
    /// Subgroup sizes in the 22.6 / 62.4 / 15.0 ratio.
    pub fn with_total(n: usize, seed: u64) -> Self {
        let unc = (n as f64 * 0.226).round() as usize;
        let never = (n as f64 * 0.150).round() as usize;
        GeneratorConfig {
            seed,
            n_uncomplicated: unc,
            n_complicated: n - unc - never,
            n_never: never,
            complicated_mix: [0.083, 0.046, 0.290, 0.290, 0.291],
            gestation_mean_days: 280.0,
            gestation_sd_days: 14.0,
            gestation_min_days: 161,
            gestation_max_days: 300,
            preterm_max_days: 258,
            delayed_fraction: 0.3,
            delay_mean_weeks: 6.0,
            correlate_p_in: 0.25,
            correlate_p_out: 0.004,
            background_per_week: 0.8,
            coefficients: RiskCoefficients::default(),
            age_mean: 32.3,
            age_sd: 6.1,
            age_min: 18,
            age_max: 48,
            race_probs: [0.391, 0.057, 0.034, 0.518],
        }
    }

    pub fn total(&self) -> usize {
        self.n_uncomplicated + self.n_complicated + self.n_never
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if self.total() == 0 {
            return bad("no patients requested".into());
        }
        let c = &self.coefficients;
        for (name, p) in [
            ("delayed_fraction", self.delayed_fraction),
            ("correlate_p_in", self.correlate_p_in),
            ("correlate_p_out", self.correlate_p_out),
            ("p_db_history", c.p_db_history),
            ("p_ht_history", c.p_ht_history),
            ("p_risk_factor", c.p_risk_factor),
            ("p_marker", c.p_marker),
        ] {
            if !prob(p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.correlate_p_in == 0.0 && self.correlate_p_out == 0.0 {
            return bad("pregnancy-correlated emission probabilities are all zero".into());
        }
        let coefs = [
            c.history,
            c.cross_history,
            c.risk_factor,
            c.other_history,
            c.markers[0],
            c.markers[1],
            c.markers[2],
        ];
        if coefs.iter().any(|x| !x.is_finite()) {
            return bad("risk coefficients must be finite".into());
        }
        if self.complicated_mix.iter().any(|&x| !(x >= 0.0))
            || self.complicated_mix.iter().sum::<f64>() <= 0.0
        {
            return bad("complicated_mix must be non-negative with positive sum".into());
        }
        if self.race_probs.iter().any(|&x| !(x >= 0.0))
            || self.race_probs.iter().sum::<f64>() <= 0.0
        {
            return bad("race_probs must be non-negative with positive sum".into());
        }
        if !(self.gestation_min_days <= self.preterm_max_days
            && self.preterm_max_days <= self.gestation_max_days)
        {
            return bad("gestation bounds must satisfy min <= preterm_max <= max".into());
        }
        if !(self.gestation_sd_days > 0.0 && self.age_sd > 0.0 && self.age_min <= self.age_max) {
            return bad("standard deviations must be positive and age bounds ordered".into());
        }
        if !(self.delay_mean_weeks >= 1.0) {
            return bad("delay_mean_weeks must be at least 1".into());
        }
        if !(self.background_per_week > 0.0) {
            return bad("background_per_week must be positive".into());
        }
        Ok(())
    }
}

/// Pregnancy classes in logit order.
pub const CLASS_OUTCOMES: [EpisodeOutcome; 6] = [
    EpisodeOutcome::LiveBirth,
    EpisodeOutcome::GestationalHt,
    EpisodeOutcome::GestationalDb,
    EpisodeOutcome::Nicu,
    EpisodeOutcome::Hppe,
    EpisodeOutcome::Preterm,
];

const N_LATENT: usize = 10;

/// Latent flags of a patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Latents {
    pub db_history: bool,
    pub ht_history: bool,
    pub ght_risk_factor: bool,
    pub gdb_risk_factor: bool,
    pub ght_markers: [bool; 3],
    pub gdb_markers: [bool; 3],
}

impl Latents {
    fn from_bits(b: u16) -> Self {
        let bit = |i: usize| b & (1 << i) != 0;
        Latents {
            db_history: bit(0),
            ht_history: bit(1),
            ght_risk_factor: bit(2),
            gdb_risk_factor: bit(3),
            ght_markers: [bit(4), bit(5), bit(6)],
            gdb_markers: [bit(7), bit(8), bit(9)],
        }
    }
}

/// The calibrated class model.
#[derive(Debug, Clone)]
pub struct ClassModel {
    coef: RiskCoefficients,
    pub intercepts: [f64; 6],
    prior: Vec<f64>,
    posterior: Vec<WeightedIndex<f64>>,
}

impl ClassModel {
    fn raw_logits(c: &RiskCoefficients, x: &Latents) -> [f64; 6] {
        let f = |b: bool| b as u8 as f64;
        let mark = |m: &[bool; 3]| (0..3).map(|t| c.markers[t] * f(m[t])).sum::<f64>();
        [
            0.0,
            c.history * f(x.ht_history)
                + c.cross_history * f(x.db_history)
                + c.risk_factor * f(x.ght_risk_factor)
                + mark(&x.ght_markers),
            c.history * f(x.db_history)
                + c.cross_history * f(x.ht_history)
                + c.risk_factor * f(x.gdb_risk_factor)
                + mark(&x.gdb_markers),
            c.other_history * (f(x.db_history) + f(x.ht_history)),
            2.0 * c.other_history * f(x.ht_history) + c.other_history * f(x.ght_markers[2]),
            c.other_history * (f(x.db_history) + f(x.ht_history)),
        ]
    }

    fn prior_of(c: &RiskCoefficients, b: u16) -> f64 {
        let probs = [
            c.p_db_history,
            c.p_ht_history,
            c.p_risk_factor,
            c.p_risk_factor,
            c.p_marker,
            c.p_marker,
            c.p_marker,
            c.p_marker,
            c.p_marker,
            c.p_marker,
        ];
        (0..N_LATENT)
            .map(|i| {
                if b & (1 << i) != 0 {
                    probs[i]
                } else {
                    1.0 - probs[i]
                }
            })
            .product()
    }

    /// Calibrates intercepts so the class marginals equal `targets`.
    pub fn calibrate(coef: RiskCoefficients, targets: [f64; 6]) -> Self {
        let n = 1usize << N_LATENT;
        let prior: Vec<f64> = (0..n as u16).map(|b| Self::prior_of(&coef, b)).collect();
        let logits: Vec<[f64; 6]> = (0..n as u16)
            .map(|b| Self::raw_logits(&coef, &Latents::from_bits(b)))
            .collect();
        let total: f64 = targets.iter().sum();
        let targets = targets.map(|t| t / total);
        let mut b = [0.0; 6];
        for _ in 0..5000 {
            let marg = Self::marginals(&prior, &logits, &b);
            let mut worst: f64 = 0.0;
            for k in 0..6 {
                if targets[k] > 0.0 {
                    let step = (targets[k] / marg[k]).ln();
                    worst = worst.max(step.abs());
                    b[k] += step;
                } else {
                    b[k] = -80.0;
                }
            }
            let b0 = b[0];
            b.iter_mut().for_each(|v| *v -= b0);
            if worst < 1e-13 {
                break;
            }
        }
        let posterior = (0..6)
            .map(|k| {
                let w: Vec<f64> = (0..n)
                    .map(|i| prior[i] * softmax(&logits[i], &b)[k])
                    .collect();
                WeightedIndex::new(w).expect("positive posterior mass")
            })
            .collect();
        ClassModel {
            coef,
            intercepts: b,
            prior,
            posterior,
        }
    }

    fn marginals(prior: &[f64], logits: &[[f64; 6]], b: &[f64; 6]) -> [f64; 6] {
        let mut m = [0.0; 6];
        for (p, l) in prior.iter().zip(logits) {
            let s = softmax(l, b);
            for k in 0..6 {
                m[k] += p * s[k];
            }
        }
        m
    }

    /// Class probabilities for latent flags.
    pub fn probabilities(&self, x: &Latents) -> [f64; 6] {
        softmax(&Self::raw_logits(&self.coef, x), &self.intercepts)
    }

    pub fn class_marginals(&self) -> [f64; 6] {
        let logits: Vec<[f64; 6]> = (0..self.prior.len() as u16)
            .map(|b| Self::raw_logits(&self.coef, &Latents::from_bits(b)))
            .collect();
        Self::marginals(&self.prior, &logits, &self.intercepts)
    }

    fn sample_latents(&self, class: usize, rng: &mut ChaCha8Rng) -> Latents {
        Latents::from_bits(self.posterior[class].sample(rng) as u16)
    }

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> Latents {
        let c = &self.coef;
        Latents {
            db_history: rng.random_bool(c.p_db_history),
            ht_history: rng.random_bool(c.p_ht_history),
            ght_risk_factor: rng.random_bool(c.p_risk_factor),
            gdb_risk_factor: rng.random_bool(c.p_risk_factor),
            ..Latents::default()
        }
    }
}

fn softmax(l: &[f64; 6], b: &[f64; 6]) -> [f64; 6] {
    let z: [f64; 6] = std::array::from_fn(|k| l[k] + b[k]);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub patient_id: PatientId,
    pub t_start: Option<NaiveDate>,
    pub t_end: Option<NaiveDate>,
    /// `None` for never-pregnant patients.
    pub outcome: Option<EpisodeOutcome>,
    pub db_history: bool,
    pub ht_history: bool,
    pub anchor_delay_weeks: Option<u32>,
}

impl TruthRow {
    pub fn is_pregnant_at(&self, as_of: NaiveDate) -> bool {
        matches!((self.t_start, self.t_end), (Some(s), Some(e)) if s <= as_of && as_of <= e)
    }

    pub fn risk_label(&self) -> Option<RiskLabel> {
        self.outcome.and_then(|o| o.risk_label())
    }

    pub fn is_complicated(&self) -> bool {
        self.outcome.is_some_and(|o| o.is_complicated())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: BTreeMap<PatientId, TruthRow>,
}

impl GroundTruth {
    pub fn get(&self, id: &PatientId) -> Option<&TruthRow> {
        self.rows.get(id)
    }

    pub fn write<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "patient_id",
            "t_start",
            "t_end",
            "outcome",
            "db_history",
            "ht_history",
            "anchor_delay_weeks",
        ])?;
        let opt_date = |d: Option<NaiveDate>| d.map(|d| d.to_string()).unwrap_or_default();
        for r in self.rows.values() {
            out.write_record([
                r.patient_id.to_string(),
                opt_date(r.t_start),
                opt_date(r.t_end),
                r.outcome
                    .map(|o| o.as_str().to_string())
                    .unwrap_or_else(|| "never_pregnant".into()),
                (r.db_history as u8).to_string(),
                (r.ht_history as u8).to_string(),
                r.anchor_delay_weeks
                    .map(|d| d.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, SynthError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let perr = |m: String| SynthError::Parse { line, message: m };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if rec.len() != 7 {
                return Err(perr(format!("expected 7 fields, got {}", rec.len())));
            }
            let date = |s: &str| -> Result<Option<NaiveDate>, SynthError> {
                if s.is_empty() {
                    return Ok(None);
                }
                crate::claims::parse_date(s).map(Some).map_err(perr)
            };
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(perr(format!("bad flag `{s}`"))),
            };
            let outcome = match &rec[3] {
                "never_pregnant" => None,
                s => Some(
                    s.parse::<EpisodeOutcome>()
                        .map_err(|e| perr(e.to_string()))?,
                ),
            };
            let delay = match &rec[6] {
                "" => None,
                s => Some(s.parse().map_err(|_| perr(format!("bad delay `{s}`")))?),
            };
            let row = TruthRow {
                patient_id: PatientId::new(&rec[0]),
                t_start: date(&rec[1])?,
                t_end: date(&rec[2])?,
                outcome,
                db_history: flag(&rec[4])?,
                ht_history: flag(&rec[5])?,
                anchor_delay_weeks: delay,
            };
            rows.insert(row.patient_id.clone(), row);
        }
        Ok(GroundTruth { rows })
    }
}

/// Generated corpus: records sorted by patient id, truth and latents.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub vocabulary: Vocabulary,
    pub records: Vec<PatientRecord>,
    pub truth: GroundTruth,
    pub latents: BTreeMap<PatientId, Latents>,
    pub class_model: ClassModel,
}

const TRIMESTER_DAYS: [(u64, u64); 3] = [(0, 97), (98, 195), (196, u64::MAX)];

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn uniform_date(rng: &mut ChaCha8Rng, lo: NaiveDate, hi: NaiveDate) -> NaiveDate {
    let span = (hi - lo).num_days().max(0) as u64;
    lo + Days::new(rng.random_range(0..=span))
}

fn pick(rng: &mut ChaCha8Rng, ids: &[u32]) -> ConceptId {
    ConceptId(ids[rng.random_range(0..ids.len())])
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: &Normal<f64>, lo: f64, hi: f64) -> f64 {
    loop {
        let v = n.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

struct Emitter<'a> {
    pid: &'a PatientId,
    events: Vec<ClaimEvent>,
}

impl Emitter<'_> {
    fn emit(&mut self, c: ConceptId, date: NaiveDate) {
        self.events.push(ClaimEvent {
            patient_id: self.pid.clone(),
            concept_id: c,
            date,
        });
    }

    fn emit_n(
        &mut self,
        rng: &mut ChaCha8Rng,
        ids: &[u32],
        n: usize,
        lo: NaiveDate,
        hi: NaiveDate,
    ) {
        if hi < lo {
            return;
        }
        for _ in 0..n {
            let d = uniform_date(rng, lo, hi);
            let c = pick(rng, ids);
            self.emit(c, d);
        }
    }
}

fn background_ids() -> Vec<u32> {
    use concepts::*;
    BACKGROUND_CONDITIONS
        .chain(BACKGROUND_DRUGS)
        .chain(BACKGROUND_PROCEDURES)
        .chain(BACKGROUND_SPECIALTIES)
        .chain(BACKGROUND_LABS)
        .collect()
}

/// Generates the corpus. Identical configurations give identical output.
pub fn generate(cfg: &GeneratorConfig) -> Result<SynthCorpus, SynthError> {
    use concepts::*;
    cfg.validate()?;
    let shares = [
        cfg.n_uncomplicated as f64,
        cfg.n_complicated as f64,
        cfg.n_never as f64,
    ];
    let mix_total: f64 = cfg.complicated_mix.iter().sum();
    let pregnant_total = shares[0] + shares[1];
    let targets: [f64; 6] = if pregnant_total > 0.0 {
        let mut t = [0.0; 6];
        t[0] = shares[0] / pregnant_total;
        for k in 0..5 {
            t[k + 1] = shares[1] / pregnant_total * cfg.complicated_mix[k] / mix_total;
        }
        t
    } else {
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    };
    let model = ClassModel::calibrate(cfg.coefficients, targets);
    let subgroup_dist =
        WeightedIndex::new(shares).map_err(|e| SynthError::Config(e.to_string()))?;
    let mix_dist =
        WeightedIndex::new(cfg.complicated_mix).map_err(|e| SynthError::Config(e.to_string()))?;
    let race_dist =
        WeightedIndex::new(cfg.race_probs).map_err(|e| SynthError::Config(e.to_string()))?;
    let gestation = Normal::new(cfg.gestation_mean_days, cfg.gestation_sd_days)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let age_dist =
        Normal::new(cfg.age_mean, cfg.age_sd).map_err(|e| SynthError::Config(e.to_string()))?;
    let delay_dist = Geometric::new(1.0 / cfg.delay_mean_weeks)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let bg_dist =
        Poisson::new(cfg.background_per_week).map_err(|e| SynthError::Config(e.to_string()))?;
    let background = background_ids();
    let races = [Race::White, Race::Black, Race::Other, Race::Unreported];

    let base = ChaCha8Rng::seed_from_u64(cfg.seed);
    let corpus_start = ymd(2014, 1, 1);
    let corpus_end = ymd(2023, 12, 31);

    let mut records = Vec::with_capacity(cfg.total());
    let mut truth = GroundTruth::default();
    let mut latents = BTreeMap::new();
    for i in 0..cfg.total() {
        let mut rng = base.clone();
        rng.set_stream(i as u64 + 1);
        let pid = PatientId::new(format!("P{:06}", i + 1));
        let mut em = Emitter {
            pid: &pid,
            events: Vec::new(),
        };
        let subgroup = subgroup_dist.sample(&mut rng);
        let race = races[race_dist.sample(&mut rng)];
        let age = truncated_normal(
            &mut rng,
            &age_dist,
            cfg.age_min as f64,
            cfg.age_max as f64 + 0.999,
        )
        .floor() as u32;

        let (hist_lo, hist_hi, row, lat) = if subgroup < 2 {
            let class = if subgroup == 0 {
                0
            } else {
                1 + mix_dist.sample(&mut rng)
            };
            let outcome = CLASS_OUTCOMES[class];
            let lat = model.sample_latents(class, &mut rng);
            let gmax = if outcome == EpisodeOutcome::Preterm {
                cfg.preterm_max_days
            } else {
                cfg.gestation_max_days
            };
            let g = truncated_normal(
                &mut rng,
                &gestation,
                cfg.gestation_min_days as f64,
                gmax as f64 + 0.999,
            )
            .floor() as u64;
            let t_start = uniform_date(&mut rng, ymd(2015, 6, 1), ymd(2022, 3, 1));
            let t_end = t_start + Days::new(g);
            let hist_lo = t_start - Days::new(rng.random_range(365..=1095));
            let hist_hi = (t_end + Days::new(rng.random_range(120..=720))).min(corpus_end);

            // start anchor, possibly delayed but kept inside the outcome's lookback
            let max_delay = (g.saturating_sub(cfg.gestation_min_days as u64) / 7) as u32;
            let delay = if subgroup == 1 && rng.random_bool(cfg.delayed_fraction) {
                (1 + delay_dist.sample(&mut rng) as u32).min(max_delay)
            } else {
                0
            };
            em.emit(
                pick(&mut rng, &START_ANCHORS),
                t_start + Days::new(7 * delay as u64),
            );
            em.emit(pick(&mut rng, &LIVE_BIRTH), t_end);

            match outcome {
                EpisodeOutcome::GestationalHt => {
                    let n = rng.random_range(1..=3);
                    em.emit_n(&mut rng, &GHT, n, t_start + Days::new(140), t_end)
                }
                EpisodeOutcome::GestationalDb => {
                    let n = rng.random_range(1..=3);
                    em.emit_n(&mut rng, &GDB, n, t_start + Days::new(168), t_end)
                }
                EpisodeOutcome::Hppe => {
                    let n = rng.random_range(1..=3);
                    em.emit_n(&mut rng, &HPPE, n, t_start + Days::new(140), t_end)
                }
                EpisodeOutcome::Nicu => em.emit_n(&mut rng, &NICU, 1, t_end, t_end),
                EpisodeOutcome::Preterm => em.emit_n(&mut rng, &PRETERM, 1, t_end, t_end),
                _ => {}
            }

            for (flags, ids) in [
                (&lat.ght_markers, &GHT_MARKERS),
                (&lat.gdb_markers, &GDB_MARKERS),
            ] {
                for (t, &(lo, hi)) in TRIMESTER_DAYS.iter().enumerate() {
                    if !flags[t] {
                        continue;
                    }
                    let lo_d = t_start + Days::new(lo);
                    let hi_d = t_start
                        .checked_add_days(Days::new(hi))
                        .unwrap_or(t_end)
                        .min(t_end);
                    let n = rng.random_range(2..=4);
                    em.emit_n(&mut rng, ids, n, lo_d, hi_d);
                }
            }
            let rf_lo = (t_start - Days::new(365)).max(hist_lo);
            let before = t_start - Days::new(1);
            if lat.ght_risk_factor {
                let n = rng.random_range(1..=2);
                em.emit_n(&mut rng, &GHT_RISK_FACTORS, n, rf_lo, before);
            }
            if lat.gdb_risk_factor {
                let n = rng.random_range(1..=2);
                em.emit_n(&mut rng, &GDB_RISK_FACTORS, n, rf_lo, before);
            }
            let row = TruthRow {
                patient_id: pid.clone(),
                t_start: Some(t_start),
                t_end: Some(t_end),
                outcome: Some(outcome),
                db_history: lat.db_history,
                ht_history: lat.ht_history,
                anchor_delay_weeks: Some(delay),
            };
            emit_weekly(
                &mut em,
                &mut rng,
                cfg,
                &bg_dist,
                &background,
                hist_lo,
                hist_hi,
                Some((t_start, t_end)),
            );
            (hist_lo, t_start - Days::new(1), row, lat)
        } else {
            let lat = model.sample_prior(&mut rng);
            let span_days = rng.random_range(3 * 365..=8 * 365);
            let latest_start = corpus_end - Days::new(span_days);
            let hist_lo = uniform_date(&mut rng, corpus_start, latest_start);
            let hist_hi = hist_lo + Days::new(span_days);
            if lat.ght_risk_factor {
                let n = rng.random_range(1..=2);
                em.emit_n(&mut rng, &GHT_RISK_FACTORS, n, hist_lo, hist_hi);
            }
            if lat.gdb_risk_factor {
                let n = rng.random_range(1..=2);
                em.emit_n(&mut rng, &GDB_RISK_FACTORS, n, hist_lo, hist_hi);
            }
            emit_weekly(
                &mut em,
                &mut rng,
                cfg,
                &bg_dist,
                &background,
                hist_lo,
                hist_hi,
                None,
            );
            let row = TruthRow {
                patient_id: pid.clone(),
                t_start: None,
                t_end: None,
                outcome: None,
                db_history: lat.db_history,
                ht_history: lat.ht_history,
                anchor_delay_weeks: None,
            };
            (hist_lo, hist_hi, row, lat)
        };

        if lat.db_history {
            let n = rng.random_range(1..=3);
            em.emit_n(&mut rng, &DB_HISTORY, n, hist_lo, hist_hi);
        }
        if lat.ht_history {
            let n = rng.random_range(1..=3);
            em.emit_n(&mut rng, &HT_HISTORY, n, hist_lo, hist_hi);
        }

        // age is exact at the episode start (or history midpoint)
        let reference = row
            .t_start
            .unwrap_or_else(|| hist_lo + Days::new(((hist_hi - hist_lo).num_days() / 2) as u64));
        let birth = reference
            .checked_sub_months(Months::new(12 * age))
            .expect("birth date in range")
            - Days::new(rng.random_range(0..365));
        debug_assert!(birth.year() > 1900);

        let events = std::mem::take(&mut em.events);
        records.push(PatientRecord::new(
            pid.clone(),
            Some(birth),
            Sex::Female,
            race,
            events,
        ));
        latents.insert(pid.clone(), lat);
        truth.rows.insert(pid, row);
    }
    Ok(SynthCorpus {
        vocabulary: synth_vocabulary(),
        records,
        truth,
        latents,
        class_model: model,
    })
}

#[allow(clippy::too_many_arguments)]
fn emit_weekly(
    em: &mut Emitter<'_>,
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    bg: &Poisson<f64>,
    background: &[u32],
    lo: NaiveDate,
    hi: NaiveDate,
    pregnancy: Option<(NaiveDate, NaiveDate)>,
) {
    let mut week = lo;
    while week <= hi {
        let week_end = (week + Days::new(6)).min(hi);
        let n = bg.sample(rng) as usize;
        em.emit_n(rng, background, n, week, week_end);
        let mid = week + Days::new(3);
        let inside = pregnancy.is_some_and(|(s, e)| s <= mid && mid <= e);
        let p = if inside {
            cfg.correlate_p_in
        } else {
            cfg.correlate_p_out
        };
        for &c in &concepts::CORRELATES {
            if rng.random_bool(p) {
                let d = uniform_date(rng, week, week_end);
                em.emit(ConceptId(c), d);
            }
        }
        week = week + Days::new(7);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub patient_id: PatientId,
    pub as_of: NaiveDate,
    pub pregnant: bool,
    pub risk: Option<RiskLabel>,
}

/// Ground-truth labels at each requested date. The pregnancy interval is
/// closed; the risk label is the episode's and does not vary with the date.
pub fn oracle_labels(truth: &GroundTruth, grid: &[(PatientId, NaiveDate)]) -> Vec<OracleLabel> {
    grid.iter()
        .filter_map(|(pid, d)| {
            let row = truth.get(pid)?;
            Some(OracleLabel {
                patient_id: pid.clone(),
                as_of: *d,
                pregnant: row.is_pregnant_at(*d),
                risk: row.risk_label(),
            })
        })
        .collect()
}
