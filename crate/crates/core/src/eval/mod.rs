//! Retrospective evaluation: detection delays, per-race audit, per-period
//! trend and earliest-alert buckets, plus CSV and HTML emitters.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::claims::{PatientId, Race};
use crate::glm::argmax;
use crate::stats::{self, AucWithCi, Interval, StatsError, TestResult};

pub mod html;

pub const LEVEL: f64 = 0.95;

/// AUC summary for binary or multiclass scores. Multiclass uses the macro
/// average of one-vs-rest AUCs; its bounds are the averages of the
/// per-class bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub per_class: Vec<(usize, AucWithCi)>,
}

pub fn auc_summary(
    probs: &[Vec<f64>],
    labels: &[u8],
    n_classes: usize,
    level: f64,
) -> Result<AucSummary, StatsError> {
    let classes: Vec<usize> = if n_classes == 2 {
        vec![1]
    } else {
        (0..n_classes).collect()
    };
    let mut per_class = Vec::new();
    for k in classes {
        let y: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let a = match stats::auc(&s, &y) {
            Ok(a) => a,
            Err(StatsError::OneClass { .. }) => continue,
            Err(e) => return Err(e),
        };
        let m = y.iter().filter(|&&v| v).count();
        per_class.push((k, stats::auc_ci(a, m, y.len() - m, level)?));
    }
    if per_class.is_empty() {
        return Err(StatsError::Precondition(
            "no class has both positives and negatives",
        ));
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&AucWithCi) -> f64| per_class.iter().map(|(_, c)| f(c)).sum::<f64>() / n;
    Ok(AucSummary {
        auc: mean(|c| c.auc),
        ci_low: mean(|c| c.ci_low),
        ci_high: mean(|c| c.ci_high),
        level,
        per_class,
    })
}

/// Accuracy with its Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub n: usize,
    pub value: f64,
    pub ci: Interval,
}

pub fn accuracy(correct: usize, n: usize, level: f64) -> Result<Accuracy, StatsError> {
    let ci = stats::wilson_interval(correct as u64, n as u64, level)?;
    Ok(Accuracy {
        correct,
        n,
        value: correct as f64 / n as f64,
        ci,
    })
}

/// Class predicted from probabilities: `p1 >= threshold` for binary
/// models, arg-max otherwise.
pub fn predicted_class(probs: &[f64], threshold: f64) -> u8 {
    if probs.len() == 2 {
        (probs[1] >= threshold) as u8
    } else {
        argmax(probs) as u8
    }
}

// ---------------------------------------------------------------- delays

/// One patient's identification outcome. `true_start` is `None` for
/// never-pregnant patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayInput {
    pub patient_id: PatientId,
    pub true_start: Option<NaiveDate>,
    pub hapi_start: Option<NaiveDate>,
    pub anchor_start: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDelay {
    pub patient_id: PatientId,
    pub hapi_days: Option<i64>,
    pub anchor_days: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub delays: Vec<PatientDelay>,
    pub n_pregnant: usize,
    /// Patients where both methods detect a start and HAPI's is earlier.
    pub n_earlier: usize,
    pub fraction_earlier: f64,
    pub earlier_mean_hapi: Option<f64>,
    pub earlier_mean_anchor: Option<f64>,
    /// Means over the patients each method detected.
    pub mean_hapi: Option<f64>,
    pub mean_anchor: Option<f64>,
    /// Mean of `hapi - anchor` over patients both methods detected.
    pub mean_difference: Option<f64>,
    pub hapi_miss_rate: f64,
    pub anchor_miss_rate: f64,
    pub n_never: usize,
    pub false_positives: usize,
    pub fpr: Option<f64>,
    /// Paired t-test of the HAPI and anchor delays on the earlier subset.
    pub earlier_test: Option<TestResult>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn delay_report(rows: &[DelayInput]) -> DelayStats {
    let mut delays = Vec::new();
    let (mut hapi, mut anchor, mut diff) = (Vec::new(), Vec::new(), Vec::new());
    let (mut e_hapi, mut e_anchor, mut e_diff) = (Vec::new(), Vec::new(), Vec::new());
    let (mut n_pregnant, mut n_never, mut fp) = (0, 0, 0);
    let (mut hapi_miss, mut anchor_miss) = (0, 0);
    for r in rows {
        let Some(ts) = r.true_start else {
            n_never += 1;
            fp += r.hapi_start.is_some() as usize;
            continue;
        };
        n_pregnant += 1;
        let h = r.hapi_start.map(|d| (d - ts).num_days());
        let a = r.anchor_start.map(|d| (d - ts).num_days());
        hapi_miss += h.is_none() as usize;
        anchor_miss += a.is_none() as usize;
        hapi.extend(h.map(|v| v as f64));
        anchor.extend(a.map(|v| v as f64));
        if let (Some(h), Some(a)) = (h, a) {
            diff.push((h - a) as f64);
            if h < a {
                e_hapi.push(h as f64);
                e_anchor.push(a as f64);
                e_diff.push((h - a) as f64);
            }
        }
        delays.push(PatientDelay {
            patient_id: r.patient_id.clone(),
            hapi_days: h,
            anchor_days: a,
        });
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    DelayStats {
        delays,
        n_pregnant,
        n_earlier: e_hapi.len(),
        fraction_earlier: frac(e_hapi.len(), n_pregnant),
        earlier_mean_hapi: mean(&e_hapi),
        earlier_mean_anchor: mean(&e_anchor),
        mean_hapi: mean(&hapi),
        mean_anchor: mean(&anchor),
        mean_difference: mean(&diff),
        hapi_miss_rate: frac(hapi_miss, n_pregnant),
        anchor_miss_rate: frac(anchor_miss, n_pregnant),
        n_never,
        false_positives: fp,
        fpr: (n_never > 0).then(|| fp as f64 / n_never as f64),
        earlier_test: stats::paired_t(&e_diff).ok(),
    }
}

impl DelayStats {
    pub fn write_delays_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "patient_id,hapi_delay_days,anchor_delay_days")?;
        let opt = |v: Option<i64>| v.map(|v| v.to_string()).unwrap_or_default();
        for d in &self.delays {
            writeln!(
                w,
                "{},{},{}",
                d.patient_id,
                opt(d.hapi_days),
                opt(d.anchor_days)
            )?;
        }
        Ok(())
    }

    /// Weekly-binned histogram of both delay series.
    pub fn histogram(&self, bin_days: i64) -> Vec<(i64, usize, usize)> {
        let all = self
            .delays
            .iter()
            .flat_map(|d| [d.hapi_days, d.anchor_days])
            .flatten();
        let (lo, hi) = all.fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo > hi {
            return Vec::new();
        }
        let bin = |v: i64| v.div_euclid(bin_days);
        let (b0, b1) = (bin(lo), bin(hi));
        let mut out: Vec<(i64, usize, usize)> = (b0..=b1).map(|b| (b * bin_days, 0, 0)).collect();
        for d in &self.delays {
            if let Some(h) = d.hapi_days {
                out[(bin(h) - b0) as usize].1 += 1;
            }
            if let Some(a) = d.anchor_days {
                out[(bin(a) - b0) as usize].2 += 1;
            }
        }
        out
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W, bin_days: i64) -> std::io::Result<()> {
        writeln!(w, "bin_start_days,bin_end_days,hapi_count,anchor_count")?;
        for (start, h, a) in self.histogram(bin_days) {
            writeln!(w, "{},{},{},{}", start, start + bin_days - 1, h, a)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(w, "metric,value")?;
        writeln!(w, "n_pregnant,{}", self.n_pregnant)?;
        writeln!(w, "n_earlier,{}", self.n_earlier)?;
        writeln!(w, "fraction_earlier,{:.6}", self.fraction_earlier)?;
        writeln!(w, "earlier_mean_hapi_days,{}", opt(self.earlier_mean_hapi))?;
        writeln!(
            w,
            "earlier_mean_anchor_days,{}",
            opt(self.earlier_mean_anchor)
        )?;
        writeln!(w, "mean_hapi_days,{}", opt(self.mean_hapi))?;
        writeln!(w, "mean_anchor_days,{}", opt(self.mean_anchor))?;
        writeln!(w, "mean_difference_days,{}", opt(self.mean_difference))?;
        writeln!(w, "hapi_miss_rate,{:.6}", self.hapi_miss_rate)?;
        writeln!(w, "anchor_miss_rate,{:.6}", self.anchor_miss_rate)?;
        writeln!(w, "n_never,{}", self.n_never)?;
        writeln!(w, "false_positives,{}", self.false_positives)?;
        writeln!(w, "fpr,{}", opt(self.fpr))?;
        writeln!(
            w,
            "earlier_paired_t,{}",
            opt(self.earlier_test.map(|t| t.statistic))
        )?;
        writeln!(
            w,
            "earlier_paired_p,{}",
            opt(self.earlier_test.map(|t| t.p_value))
        )?;
        Ok(())
    }
}

/// Never-pregnant false-positive rate at each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FprPoint {
    pub tau: f64,
    pub false_positives: usize,
    pub n_never: usize,
    pub fpr: f64,
    pub fraction_earlier: f64,
}

pub fn write_fpr_sweep_csv<W: Write>(points: &[FprPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "tau,false_positives,n_never,fpr,fraction_earlier")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6}",
            p.tau, p.false_positives, p.n_never, p.fpr, p.fraction_earlier
        )?;
    }
    Ok(())
}

// -------------------------------------------------------------- fairness

/// One scored test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub patient_id: PatientId,
    pub label: u8,
    pub probabilities: Vec<f64>,
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub n: usize,
    pub accuracy: Option<Accuracy>,
    pub auc: Option<AucSummary>,
    /// Share of examples with a non-zero label.
    pub base_rate: f64,
    /// Among non-zero labels, share predicted as exactly that class.
    pub tpr: Option<f64>,
    pub small_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub min_group_size: usize,
    pub rows: Vec<SubgroupRow>,
}

fn subgroup_row(group: &str, items: &[&Scored], n_classes: usize, min_size: usize) -> SubgroupRow {
    let n = items.len();
    let correct = items.iter().filter(|s| s.predicted == s.label).count();
    let positives: Vec<&&Scored> = items.iter().filter(|s| s.label != 0).collect();
    let probs: Vec<Vec<f64>> = items.iter().map(|s| s.probabilities.clone()).collect();
    let labels: Vec<u8> = items.iter().map(|s| s.label).collect();
    SubgroupRow {
        group: group.to_string(),
        n,
        accuracy: accuracy(correct, n, LEVEL).ok(),
        auc: auc_summary(&probs, &labels, n_classes, LEVEL).ok(),
        base_rate: if n == 0 {
            0.0
        } else {
            positives.len() as f64 / n as f64
        },
        tpr: (!positives.is_empty()).then(|| {
            positives.iter().filter(|s| s.predicted == s.label).count() as f64
                / positives.len() as f64
        }),
        small_sample: n < min_size,
    }
}

/// Per-race metrics for white, black and other; unreported examples only
/// enter the total row.
pub fn fairness_audit(
    items: &[(Scored, Race)],
    n_classes: usize,
    min_group_size: usize,
) -> SubgroupReport {
    let mut rows = Vec::new();
    for race in [Race::White, Race::Black, Race::Other] {
        let sel: Vec<&Scored> = items
            .iter()
            .filter(|(_, r)| *r == race)
            .map(|(s, _)| s)
            .collect();
        rows.push(subgroup_row(race.as_str(), &sel, n_classes, min_group_size));
    }
    let all: Vec<&Scored> = items.iter().map(|(s, _)| s).collect();
    rows.push(subgroup_row("total", &all, n_classes, min_group_size));
    SubgroupReport {
        min_group_size,
        rows,
    }
}

impl SubgroupReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "group,n,accuracy,accuracy_low,accuracy_high,auc,auc_low,auc_high,base_rate,tpr,small_sample"
        )?;
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{:.6},{},{}",
                r.group,
                r.n,
                f(r.accuracy.map(|a| a.value)),
                f(r.accuracy.map(|a| a.ci.low)),
                f(r.accuracy.map(|a| a.ci.high)),
                f(r.auc.as_ref().map(|a| a.auc)),
                f(r.auc.as_ref().map(|a| a.ci_low)),
                f(r.auc.as_ref().map(|a| a.ci_high)),
                r.base_rate,
                f(r.tpr),
                r.small_sample as u8
            )?;
        }
        Ok(())
    }
}

// ----------------------------------------------------------------- trend

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    PreGestation,
    T1,
    T2,
    T3,
}

/// Last gestational day of trimesters 1 and 2 (weeks 0-13 and 14-27).
pub const T1_LAST_DAY: i64 = 7 * 14 - 1;
pub const T2_LAST_DAY: i64 = 7 * 28 - 1;

impl Period {
    pub const ALL: [Period; 4] = [Period::PreGestation, Period::T1, Period::T2, Period::T3];

    pub fn as_str(self) -> &'static str {
        match self {
            Period::PreGestation => "pre_gestation",
            Period::T1 => "t1",
            Period::T2 => "t2",
            Period::T3 => "t3",
        }
    }

    pub fn of(t_start: NaiveDate, date: NaiveDate) -> Period {
        match (date - t_start).num_days() {
            d if d < 0 => Period::PreGestation,
            d if d <= T1_LAST_DAY => Period::T1,
            d if d <= T2_LAST_DAY => Period::T2,
            _ => Period::T3,
        }
    }

    /// Prediction date at the close of the period: the day before the
    /// start, the last day of T1 or T2, the day before delivery.
    pub fn cutoff(self, t_start: NaiveDate, t_end: NaiveDate) -> NaiveDate {
        let plus = |d: i64| t_start + chrono::Days::new(d as u64);
        let before_end = t_end.pred_opt().unwrap_or(t_end);
        match self {
            Period::PreGestation => t_start.pred_opt().unwrap_or(t_start),
            Period::T1 => plus(T1_LAST_DAY).min(before_end),
            Period::T2 => plus(T2_LAST_DAY).min(before_end),
            Period::T3 => before_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetrics {
    pub period: Period,
    pub n: usize,
    pub accuracy: Option<Accuracy>,
    pub auc: Option<AucSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSeries {
    pub periods: Vec<PeriodMetrics>,
    /// Least-squares slope of AUC against the period index 0..3.
    pub auc_slope: Option<f64>,
    pub accuracy_slope: Option<f64>,
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Metrics per period from examples already scored at each period's cutoff.
pub fn trend_over_pregnancy(scored: &[(Period, Scored)], n_classes: usize) -> TrendSeries {
    let periods: Vec<PeriodMetrics> = Period::ALL
        .iter()
        .map(|&p| {
            let items: Vec<&Scored> = scored
                .iter()
                .filter(|(q, _)| *q == p)
                .map(|(_, s)| s)
                .collect();
            let row = subgroup_row(p.as_str(), &items, n_classes, 0);
            PeriodMetrics {
                period: p,
                n: row.n,
                accuracy: row.accuracy,
                auc: row.auc,
            }
        })
        .collect();
    let series = |f: &dyn Fn(&PeriodMetrics) -> Option<f64>| {
        let pts: Vec<(f64, f64)> = periods
            .iter()
            .enumerate()
            .filter_map(|(i, m)| f(m).map(|v| (i as f64, v)))
            .collect();
        least_squares_slope(&pts)
    };
    TrendSeries {
        auc_slope: series(&|m| m.auc.as_ref().map(|a| a.auc)),
        accuracy_slope: series(&|m| m.accuracy.map(|a| a.value)),
        periods,
    }
}

impl TrendSeries {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "period,n,accuracy,accuracy_low,accuracy_high,auc,auc_low,auc_high"
        )?;
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for m in &self.periods {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                m.period.as_str(),
                m.n,
                f(m.accuracy.map(|a| a.value)),
                f(m.accuracy.map(|a| a.ci.low)),
                f(m.accuracy.map(|a| a.ci.high)),
                f(m.auc.as_ref().map(|a| a.auc)),
                f(m.auc.as_ref().map(|a| a.ci_low)),
                f(m.auc.as_ref().map(|a| a.ci_high)),
            )?;
        }
        writeln!(w, "# auc_slope={}", f(self.auc_slope))?;
        writeln!(w, "# accuracy_slope={}", f(self.accuracy_slope))?;
        Ok(())
    }
}

// --------------------------------------------------------- earliest alert

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertBucket {
    PreGestation,
    T1,
    T2,
    T3,
    Never,
}

impl AlertBucket {
    pub const ALL: [AlertBucket; 5] = [
        AlertBucket::PreGestation,
        AlertBucket::T1,
        AlertBucket::T2,
        AlertBucket::T3,
        AlertBucket::Never,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlertBucket::Never => "never",
            AlertBucket::PreGestation => "pre_gestation",
            AlertBucket::T1 => "t1",
            AlertBucket::T2 => "t2",
            AlertBucket::T3 => "t3",
        }
    }

    fn from_period(p: Period) -> Self {
        match p {
            Period::PreGestation => AlertBucket::PreGestation,
            Period::T1 => AlertBucket::T1,
            Period::T2 => AlertBucket::T2,
            Period::T3 => AlertBucket::T3,
        }
    }
}

/// Weekly risk alerts of one truly complicated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertTimeline {
    pub patient_id: PatientId,
    pub t_start: NaiveDate,
    /// `(as_of, alert)` in any order.
    pub points: Vec<(NaiveDate, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarliestAlertBuckets {
    pub assignments: Vec<(PatientId, AlertBucket)>,
    pub counts: [usize; 5],
}

impl EarliestAlertBuckets {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bucket,count")?;
        for (b, c) in AlertBucket::ALL.iter().zip(self.counts) {
            writeln!(w, "{},{}", b.as_str(), c)?;
        }
        Ok(())
    }
}

pub fn earliest_alerts(timelines: &[AlertTimeline]) -> EarliestAlertBuckets {
    let mut counts = [0; 5];
    let assignments = timelines
        .iter()
        .map(|t| {
            let first = t.points.iter().filter(|p| p.1).map(|p| p.0).min();
            let b = first.map_or(AlertBucket::Never, |d| {
                AlertBucket::from_period(Period::of(t.t_start, d))
            });
            counts[b as usize] += 1;
            (t.patient_id.clone(), b)
        })
        .collect();
    EarliestAlertBuckets {
        assignments,
        counts,
    }
}

// ------------------------------------------------------------ comparisons

/// McNemar's test on two classifiers' per-example correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    /// Correct under the first classifier only.
    pub b: usize,
    /// Correct under the second classifier only.
    pub c: usize,
    pub test: Option<TestResult>,
}

pub fn compare_correctness(first: &[bool], second: &[bool]) -> PairedComparison {
    assert_eq!(first.len(), second.len(), "paired outcomes must align");
    let b = first
        .iter()
        .zip(second)
        .filter(|(a, b)| **a && !**b)
        .count();
    let c = first
        .iter()
        .zip(second)
        .filter(|(a, b)| !**a && **b)
        .count();
    PairedComparison {
        b,
        c,
        test: stats::mcnemar(b as u64, c as u64).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::parse_date;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn pid(s: &str) -> PatientId {
        PatientId::new(s)
    }

    fn row(id: &str, t: Option<&str>, h: Option<&str>, a: Option<&str>) -> DelayInput {
        DelayInput {
            patient_id: pid(id),
            true_start: t.map(d),
            hapi_start: h.map(d),
            anchor_start: a.map(d),
        }
    }

    #[test]
    fn identical_methods_have_no_earlier_patients() {
        let rows = vec![
            row(
                "a",
                Some("2020-01-01"),
                Some("2020-01-10"),
                Some("2020-01-10"),
            ),
            row(
                "b",
                Some("2020-03-01"),
                Some("2020-04-01"),
                Some("2020-04-01"),
            ),
        ];
        let s = delay_report(&rows);
        assert_eq!(s.fraction_earlier, 0.0);
        assert_eq!(s.mean_difference, Some(0.0));
        assert_eq!(s.earlier_mean_hapi, None);
    }

    #[test]
    fn earlier_subset_means_and_fpr() {
        let rows = vec![
            row(
                "a",
                Some("2020-01-01"),
                Some("2020-01-08"),
                Some("2020-02-05"),
            ),
            row(
                "b",
                Some("2020-01-01"),
                Some("2020-01-08"),
                Some("2020-01-08"),
            ),
            row("c", Some("2020-01-01"), None, Some("2020-01-15")),
            row("n1", None, Some("2020-05-01"), None),
            row("n2", None, None, None),
        ];
        let s = delay_report(&rows);
        assert_eq!(s.n_pregnant, 3);
        assert_eq!(s.n_earlier, 1);
        assert!((s.fraction_earlier - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.earlier_mean_hapi, Some(7.0));
        assert_eq!(s.earlier_mean_anchor, Some(35.0));
        assert_eq!(s.mean_hapi, Some(7.0));
        assert_eq!(s.mean_anchor, Some((35.0 + 7.0 + 14.0) / 3.0));
        assert!((s.hapi_miss_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.false_positives, 1);
        assert_eq!(s.fpr, Some(0.5));
    }

    #[test]
    fn histogram_bins_cover_all_delays() {
        let rows = vec![
            row(
                "a",
                Some("2020-01-01"),
                Some("2020-01-01"),
                Some("2020-01-20"),
            ),
            row(
                "b",
                Some("2020-01-01"),
                Some("2019-12-30"),
                Some("2020-01-06"),
            ),
        ];
        let s = delay_report(&rows);
        let h = s.histogram(7);
        assert_eq!(h.first().unwrap().0, -7);
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 2);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 2);
        let mut buf = Vec::new();
        s.write_histogram_csv(&mut buf, 7).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("bin_start_days,bin_end_days,hapi_count,anchor_count\n-7,-1,1,0\n"));
    }

    fn scored(id: &str, label: u8, p1: f64) -> Scored {
        let probabilities = vec![1.0 - p1, p1];
        Scored {
            patient_id: pid(id),
            label,
            predicted: predicted_class(&probabilities, 0.5),
            probabilities,
        }
    }

    #[test]
    fn symmetric_groups_have_identical_metrics() {
        let base = [(1, 0.9), (0, 0.2), (1, 0.4), (0, 0.6), (0, 0.1)];
        let mut items = Vec::new();
        for race in [Race::White, Race::Black, Race::Other] {
            for (i, (l, p)) in base.iter().enumerate() {
                items.push((scored(&format!("{race}{i}"), *l, *p), race));
            }
        }
        items.push((scored("u", 1, 0.99), Race::Unreported));
        let r = fairness_audit(&items, 2, 3);
        assert_eq!(r.rows.len(), 4);
        for k in 1..3 {
            let (a, b) = (&r.rows[0], &r.rows[k]);
            assert_eq!(
                (a.n, a.accuracy, &a.auc, a.base_rate, a.tpr),
                (b.n, b.accuracy, &b.auc, b.base_rate, b.tpr)
            );
        }
        assert_eq!(r.rows[3].n, 16);
        assert!(r.rows.iter().all(|x| !x.small_sample));
    }

    #[test]
    fn small_groups_are_flagged() {
        let items = vec![
            (scored("a", 1, 0.9), Race::Black),
            (scored("b", 0, 0.1), Race::White),
        ];
        let r = fairness_audit(&items, 2, 5);
        assert!(r.rows.iter().all(|x| x.small_sample));
        assert_eq!(r.rows[2].n, 0);
        assert!(r.rows[2].accuracy.is_none());
    }

    #[test]
    fn base_rate_gap_can_invert_accuracy_and_auc() {
        // the high-base-rate group ranks better but is less accurate
        let white = [
            (0, 0.1),
            (0, 0.2),
            (0, 0.3),
            (1, 0.35),
            (0, 0.4),
            (0, 0.45),
            (0, 0.2),
            (1, 0.7),
        ];
        let black = [
            (1, 0.45),
            (1, 0.8),
            (0, 0.3),
            (1, 0.4),
            (0, 0.1),
            (1, 0.48),
            (0, 0.2),
            (0, 0.35),
        ];
        let mut items = Vec::new();
        for (i, (l, p)) in white.iter().enumerate() {
            items.push((scored(&format!("w{i}"), *l, *p), Race::White));
        }
        for (i, (l, p)) in black.iter().enumerate() {
            items.push((scored(&format!("b{i}"), *l, *p), Race::Black));
        }
        let r = fairness_audit(&items, 2, 1);
        let (w, b) = (&r.rows[0], &r.rows[1]);
        assert!(b.base_rate > w.base_rate);
        assert!(b.accuracy.unwrap().value < w.accuracy.unwrap().value);
        assert!(b.auc.as_ref().unwrap().auc > w.auc.as_ref().unwrap().auc);
    }

    #[test]
    fn periods_follow_trimester_boundaries() {
        let s = d("2020-01-01");
        assert_eq!(Period::of(s, d("2019-12-31")), Period::PreGestation);
        assert_eq!(Period::of(s, s), Period::T1);
        assert_eq!(Period::of(s, s + chrono::Days::new(97)), Period::T1);
        assert_eq!(Period::of(s, s + chrono::Days::new(98)), Period::T2);
        assert_eq!(Period::of(s, s + chrono::Days::new(195)), Period::T2);
        assert_eq!(Period::of(s, s + chrono::Days::new(196)), Period::T3);
        let e = s + chrono::Days::new(280);
        for p in Period::ALL {
            assert_eq!(Period::of(s, p.cutoff(s, e)), p);
        }
    }

    #[test]
    fn time_invariant_model_has_flat_trend() {
        let base = [(1, 0.9), (0, 0.2), (1, 0.4), (0, 0.6)];
        let mut v = Vec::new();
        for p in Period::ALL {
            for (i, (l, s)) in base.iter().enumerate() {
                v.push((p, scored(&i.to_string(), *l, *s)));
            }
        }
        let t = trend_over_pregnancy(&v, 2);
        assert_eq!(t.periods.len(), 4);
        assert!(t.auc_slope.unwrap().abs() < 1e-12);
        assert!(t.accuracy_slope.unwrap().abs() < 1e-12);
    }

    #[test]
    fn strengthening_signal_has_positive_slope() {
        let mut v = Vec::new();
        for (k, p) in Period::ALL.iter().enumerate() {
            let sep = 0.1 * k as f64;
            for i in 0..20 {
                let jitter = (i as f64 * 0.37).fract() * 0.5;
                v.push((*p, scored(&format!("p{i}"), 1, 0.25 + sep + jitter)));
                v.push((
                    *p,
                    scored(&format!("n{i}"), 0, 0.25 + (i as f64 * 0.53).fract() * 0.5),
                ));
            }
        }
        let t = trend_over_pregnancy(&v, 2);
        assert!(t.auc_slope.unwrap() > 0.0);
    }

    #[test]
    fn slope_matches_closed_form() {
        let s = least_squares_slope(&[(0.0, 1.0), (1.0, 3.0), (2.0, 2.0), (3.0, 6.0)]).unwrap();
        // sxy = 7, sxx = 5
        assert!((s - 1.4).abs() < 1e-15);
        assert_eq!(least_squares_slope(&[(1.0, 1.0)]), None);
    }

    #[test]
    fn alert_buckets_use_first_alert() {
        let s = d("2020-01-01");
        let tl = |id: &str, pts: &[(i64, bool)]| AlertTimeline {
            patient_id: pid(id),
            t_start: s,
            points: pts
                .iter()
                .map(|&(o, a)| {
                    (
                        if o < 0 {
                            s - chrono::Days::new((-o) as u64)
                        } else {
                            s + chrono::Days::new(o as u64)
                        },
                        a,
                    )
                })
                .collect(),
        };
        let b = earliest_alerts(&[
            tl("a", &[(-10, true), (5, true)]),
            tl("b", &[(200, true), (120, true), (-3, false)]),
            tl("c", &[(10, false)]),
            tl("d", &[]),
        ]);
        assert_eq!(b.counts, [1, 0, 1, 0, 2]);
        assert_eq!(b.total(), 4);
    }

    #[test]
    fn mcnemar_from_correctness() {
        let a = [true, true, true, false, false, true];
        let b = [true, false, false, true, false, true];
        let c = compare_correctness(&a, &b);
        assert_eq!((c.b, c.c), (2, 1));
        assert!((c.test.unwrap().statistic - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multiclass_summary_averages_classes() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.3, 0.6],
            vec![0.5, 0.4, 0.1],
            vec![0.3, 0.3, 0.4],
        ];
        let labels = [0, 1, 2, 1, 0];
        let s = auc_summary(&probs, &labels, 3, LEVEL).unwrap();
        assert_eq!(s.per_class.len(), 3);
        let expected = stats::macro_auc(&probs, &labels, 3).unwrap();
        assert!((s.auc - expected).abs() < 1e-15);
        assert!(s.ci_low <= s.auc && s.auc <= s.ci_high);
    }

    proptest! {
        #[test]
        fn buckets_partition(offsets in prop::collection::vec(prop::collection::vec((-300i64..400, any::<bool>()), 0..6), 0..30)) {
            let s = d("2020-06-01");
            let tls: Vec<AlertTimeline> = offsets.iter().enumerate().map(|(i, pts)| AlertTimeline {
                patient_id: pid(&i.to_string()),
                t_start: s,
                points: pts.iter().map(|&(o, a)| (s + chrono::Duration::days(o), a)).collect(),
            }).collect();
            let b = earliest_alerts(&tls);
            prop_assert_eq!(b.total(), tls.len());
            prop_assert_eq!(b.assignments.len(), tls.len());
        }

        #[test]
        fn delay_fractions_in_unit_interval(rows in prop::collection::vec((any::<bool>(), prop::option::of(-50i64..300), prop::option::of(-50i64..300)), 1..40)) {
            let base = d("2020-01-01");
            let inputs: Vec<DelayInput> = rows.iter().enumerate().map(|(i, &(preg, h, a))| DelayInput {
                patient_id: pid(&i.to_string()),
                true_start: preg.then_some(base),
                hapi_start: h.map(|v| base + chrono::Duration::days(v)),
                anchor_start: a.map(|v| base + chrono::Duration::days(v)),
            }).collect();
            let s = delay_report(&inputs);
            prop_assert!((0.0..=1.0).contains(&s.fraction_earlier));
            prop_assert!((0.0..=1.0).contains(&s.hapi_miss_rate));
            if let Some(f) = s.fpr { prop_assert!((0.0..=1.0).contains(&f)); }
            if let (Some(h), Some(a)) = (s.earlier_mean_hapi, s.earlier_mean_anchor) { prop_assert!(h < a); }
        }
    }
}
