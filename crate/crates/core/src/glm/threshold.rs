use serde::{Deserialize, Serialize};

use super::GlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// sqrt(sensitivity * specificity)
    #[default]
    GmeanSensSpec,
    /// sqrt(F1 of the positive class * F1 of the negative class)
    GmeanF1,
}

struct Counts {
    tp: f64,
    fp: f64,
    tn: f64,
    fn_: f64,
}

impl ThresholdRule {
    fn value(self, c: &Counts) -> f64 {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        match self {
            ThresholdRule::GmeanSensSpec => {
                (ratio(c.tp, c.tp + c.fn_) * ratio(c.tn, c.tn + c.fp)).sqrt()
            }
            ThresholdRule::GmeanF1 => {
                let f1_pos = ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn_);
                let f1_neg = ratio(2.0 * c.tn, 2.0 * c.tn + c.fn_ + c.fp);
                (f1_pos * f1_neg).sqrt()
            }
        }
    }
}

/// Picks τ among the midpoints of consecutive distinct scores, predicting
/// positive when `score >= τ`. Ties go to the smallest τ; if all scores are
/// equal that score is returned.
pub fn select_threshold(
    scores: &[f64],
    labels: &[bool],
    rule: ThresholdRule,
) -> Result<f64, GlmError> {
    let pos_total = labels.iter().filter(|&&l| l).count() as f64;
    let neg_total = labels.len() as f64 - pos_total;
    if pos_total == 0.0 || neg_total == 0.0 || scores.len() != labels.len() {
        return Err(GlmError::ThresholdOneClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // everything at or below the current distinct value is predicted negative
    let mut below_pos = 0.0;
    let mut below_neg = 0.0;
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                below_pos += 1.0;
            } else {
                below_neg += 1.0;
            }
            i += 1;
        }
        let Some(&next) = order.get(i) else { break };
        let tau = (v + scores[next]) / 2.0;
        let c = Counts {
            tp: pos_total - below_pos,
            fn_: below_pos,
            tn: below_neg,
            fp: neg_total - below_neg,
        };
        let g = rule.value(&c);
        if best.is_none_or(|(bg, _)| g > bg) {
            best = Some((g, tau));
        }
    }
    Ok(best.map_or(scores[order[0]], |(_, t)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[bool], rule: ThresholdRule) -> f64 {
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() == 1 {
            return distinct[0];
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for w in distinct.windows(2) {
            let tau = (w[0] + w[1]) / 2.0;
            let mut c = Counts {
                tp: 0.0,
                fp: 0.0,
                tn: 0.0,
                fn_: 0.0,
            };
            for (&s, &l) in scores.iter().zip(labels) {
                match (s >= tau, l) {
                    (true, true) => c.tp += 1.0,
                    (true, false) => c.fp += 1.0,
                    (false, true) => c.fn_ += 1.0,
                    (false, false) => c.tn += 1.0,
                }
            }
            let g = rule.value(&c);
            if g > best.0 {
                best = (g, tau);
            }
        }
        best.1
    }

    #[test]
    fn separated_scores_pick_middle_midpoint() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(
            select_threshold(&s, &l, ThresholdRule::GmeanSensSpec).unwrap(),
            0.5
        );
    }

    #[test]
    fn equal_scores_return_that_value() {
        let s = [0.3, 0.3, 0.3];
        let l = [true, false, true];
        assert_eq!(
            select_threshold(&s, &l, ThresholdRule::GmeanSensSpec).unwrap(),
            0.3
        );
    }

    #[test]
    fn overlapping_six_points_match_sweep() {
        let s = [0.2, 0.35, 0.4, 0.55, 0.6, 0.8];
        let l = [false, true, false, true, false, true];
        for rule in [ThresholdRule::GmeanSensSpec, ThresholdRule::GmeanF1] {
            assert_eq!(select_threshold(&s, &l, rule).unwrap(), brute(&s, &l, rule));
        }
    }

    #[test]
    fn one_class_is_error() {
        assert!(
            select_threshold(&[0.1, 0.2], &[true, true], ThresholdRule::GmeanSensSpec).is_err()
        );
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in prop::collection::vec((0u8..20, any::<bool>()), 2..40), f1 in any::<bool>()) {
            let s: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 19.0).collect();
            let l: Vec<bool> = pts.iter().map(|p| p.1).collect();
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let rule = if f1 { ThresholdRule::GmeanF1 } else { ThresholdRule::GmeanSensSpec };
            prop_assert_eq!(select_threshold(&s, &l, rule).unwrap(), brute(&s, &l, rule));
        }
    }
}
