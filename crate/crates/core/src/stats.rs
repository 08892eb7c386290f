//! AUC with distribution-independent confidence intervals, Wilson score
//! intervals, McNemar's test and the paired t-test.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("both classes must be present (positives {positives}, negatives {negatives})")]
    OneClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("{0}")]
    Precondition(&'static str),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

/// Two-sided standard-normal critical value for `level`.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::Length(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(StatsError::OneClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives (Mann-Whitney U)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (m, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

/// Macro average of one-vs-rest AUCs over classes that have both positive
/// and negative examples.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[u8], n_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..n_classes {
        let bin: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        match auc(&scores, &bin) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(StatsError::OneClass { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(StatsError::Precondition(
            "no class has both positives and negatives",
        ));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucWithCi {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub m: usize,
    pub n: usize,
    pub level: f64,
    /// Number of misranked examples the interval was evaluated at.
    pub errors: usize,
}

fn big(x: i128) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Exact moments of the AUC over all rankings with a fixed number of
/// misranked examples `k`, for `m` positives and `n` negatives. Valid for
/// `k <= min(m, n)`.
pub struct AucMoments {
    m: i64,
    n: i64,
    /// Prefix sums `sum_{x<=j} C(N+1-i, x)` for i = 0..=4.
    prefix: [Vec<BigInt>; 5],
    /// Prefix sums of `C(N, x)`.
    prefix_n: Vec<BigInt>,
}

fn binomial_prefix(top: i64, upto: usize) -> Vec<BigInt> {
    let mut out = Vec::with_capacity(upto + 1);
    let mut c = BigInt::one();
    let mut acc = BigInt::zero();
    for x in 0..=upto as i64 {
        if x > 0 {
            if x > top {
                c = BigInt::zero();
            } else {
                c = c * BigInt::from(top - x + 1) / BigInt::from(x);
            }
        }
        acc += &c;
        out.push(acc.clone());
    }
    out
}

impl AucMoments {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(StatsError::OneClass {
                positives: m,
                negatives: n,
            });
        }
        let kmax = m.min(n);
        let total = (m + n) as i64;
        let prefix = std::array::from_fn(|i| binomial_prefix(total + 1 - i as i64, kmax));
        let prefix_n = binomial_prefix(total, kmax);
        Ok(AucMoments {
            m: m as i64,
            n: n as i64,
            prefix,
            prefix_n,
        })
    }

    pub fn max_errors(&self) -> usize {
        self.m.min(self.n) as usize
    }

    fn z(&self, i: usize, k: usize) -> BigRational {
        if k < i {
            return BigRational::zero();
        }
        BigRational::new(self.prefix[i][k - i].clone(), self.prefix[0][k].clone())
    }

    pub fn expectation_exact(&self, k: usize) -> BigRational {
        let (m, n) = (self.m, self.n);
        let total = m + n;
        let kk = k as i64;
        let ratio = if k == 0 {
            BigRational::zero()
        } else {
            BigRational::new(self.prefix_n[k - 1].clone(), self.prefix[0][k].clone())
        };
        let kn = BigRational::new(BigInt::from(kk), BigInt::from(total));
        let coef = BigRational::new(
            BigInt::from((n - m) as i128 * (n - m) as i128 * (total + 1) as i128),
            BigInt::from(4 * m * n),
        );
        BigRational::one() - kn.clone() - coef * (kn - ratio)
    }

    pub fn expectation(&self, k: usize) -> f64 {
        to_f64(&self.expectation_exact(k))
    }

    pub fn variance_exact(&self, k: usize) -> BigRational {
        let (m, n) = (self.m as i128, self.n as i128);
        let nn = m + n;
        let kk = k as i128;
        let t = 3 * ((m - n) * (m - n) + m + n) + 2;
        let (z1, z2, z3, z4) = (self.z(1, k), self.z(2, k), self.z(3, k), self.z(4, k));
        let q0 = (nn + 1) * t * kk * kk
            + ((-3 * n * n + 3 * m * n + 3 * m + 1) * t - 12 * (3 * m * n + m + n) - 8) * kk
            + (-3 * m * m + 7 * m + 10 * n + 3 * n * m + 10) * t
            - 4 * (3 * m * n + m + n + 1);
        let q1 = t * kk * kk * kk
            + 3 * (m - 1) * t * kk * kk
            + ((-3 * n * n + 3 * m * n - 3 * m + 8) * t - 6 * (6 * m * n + m + n)) * kk
            + (-3 * m * m + 7 * (m + n) + 3 * m * n) * t
            - 2 * (6 * m * n + m + n);
        let mn2 = big(m * m * n * n);
        let mn4 = (m - n) * (m - n) * (m - n) * (m - n);

        let term1 = big((nn + 1) * nn * (nn - 1) * t)
            * (big(nn - 2) * z4 - big(2 * m - n + 3 * kk - 10) * z3)
            / (big(72) * mn2.clone());
        let term2 = big((nn + 1) * nn * t)
            * big(m * m - n * m + 3 * kk * m - 5 * m + 2 * kk * kk - n * kk + 12 - 9 * kk)
            * z2
            / (big(48) * mn2.clone());
        let term3 =
            big((nn + 1) * (nn + 1) * mn4) * z1.clone() * z1.clone() / (big(16) * mn2.clone());
        let term4 = big((nn + 1) * q1) * z1 / (big(72) * mn2.clone());
        let term5 = big(kk * q0) / (big(144) * mn2);
        term1 + term2 - term3 - term4 + term5
    }

    pub fn variance(&self, k: usize) -> f64 {
        to_f64(&self.variance_exact(k))
    }

    /// Error count whose expected AUC is closest to `auc` (`auc >= 0.5`).
    pub fn errors_for(&self, auc: f64) -> usize {
        let kmax = self.max_errors();
        // expectation is decreasing in k: find the first k with E(k) <= auc
        let (mut lo, mut hi) = (0usize, kmax);
        if self.expectation(kmax) > auc {
            return kmax;
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.expectation(mid) <= auc {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if lo > 0 && (self.expectation(lo - 1) - auc).abs() < (self.expectation(lo) - auc).abs() {
            lo - 1
        } else {
            lo
        }
    }
}

/// Confidence interval from an explicit misranking count `k`.
pub fn auc_ci_from_errors(auc: f64, k: usize, m: usize, n: usize, level: f64) -> Result<AucWithCi> {
    let moments = AucMoments::new(m, n)?;
    if k > moments.max_errors() {
        return Err(StatsError::Precondition("error count exceeds min(m, n)"));
    }
    let z = z_for_level(level)?;
    let sd = moments.variance(k).max(0.0).sqrt();
    Ok(AucWithCi {
        auc,
        ci_low: (auc - z * sd).max(0.0),
        ci_high: (auc + z * sd).min(1.0),
        m,
        n,
        level,
        errors: k,
    })
}

/// Distribution-independent interval for an observed AUC: the variance is
/// taken at the misranking count whose expected AUC matches the
/// observation. AUCs below ½ use the reflected value `1 - auc`.
pub fn auc_ci(auc: f64, m: usize, n: usize, level: f64) -> Result<AucWithCi> {
    if !(0.0..=1.0).contains(&auc) {
        return Err(StatsError::Precondition("auc must lie in [0, 1]"));
    }
    let moments = AucMoments::new(m, n)?;
    let k = moments.errors_for(auc.max(1.0 - auc));
    auc_ci_from_errors(auc, k, m, n, level)
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: u64, n: u64, level: f64) -> Result<Interval> {
    if n == 0 || successes > n {
        return Err(StatsError::Precondition(
            "need 0 <= successes <= n and n >= 1",
        ));
    }
    let z = z_for_level(level)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let mut low = (center - half).max(0.0);
    let mut high = (center + half).min(1.0);
    if successes == 0 {
        low = 0.0;
    }
    if successes == n {
        high = 1.0;
    }
    Ok(Interval { low, high })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// McNemar's chi-square on the discordant counts `b` and `c`.
pub fn mcnemar(b: u64, c: u64) -> Result<TestResult> {
    if b + c == 0 {
        return Err(StatsError::Precondition("McNemar needs b + c >= 1"));
    }
    let diff = b as f64 - c as f64;
    let statistic = diff * diff / (b + c) as f64;
    let chi = ChiSquared::new(1.0).expect("valid dof");
    Ok(TestResult {
        statistic,
        p_value: chi.sf(statistic),
    })
}

/// Two-sided paired t-test on the differences.
pub fn paired_t(diffs: &[f64]) -> Result<TestResult> {
    if diffs.len() < 2 {
        return Err(StatsError::Precondition(
            "paired t-test needs at least two values",
        ));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(StatsError::Precondition(
            "paired t-test needs nonzero variance",
        ));
    }
    let statistic = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    Ok(TestResult {
        statistic,
        p_value: (2.0 * dist.sf(statistic.abs())).min(1.0),
    })
}
