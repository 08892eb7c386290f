//! Cyclic coordinate descent for weighted, penalized binary logistic
//! regression over column-compressed sparse data.

use super::{GlmConfig, GlmError};
use crate::features::SparseExample;

/// Column-compressed copy of a row-sparse matrix.
#[derive(Debug, Clone)]
pub struct Csc {
    pub n_rows: usize,
    pub n_cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    vals: Vec<f64>,
}

impl Csc {
    pub fn from_rows(rows: &[SparseExample], n_cols: usize) -> Self {
        let mut counts = vec![0usize; n_cols + 1];
        for r in rows {
            for &c in &r.columns {
                counts[c as usize + 1] += 1;
            }
        }
        for j in 0..n_cols {
            counts[j + 1] += counts[j];
        }
        let col_ptr = counts.clone();
        let nnz = col_ptr[n_cols];
        let mut fill = counts;
        let mut row_idx = vec![0u32; nnz];
        let mut vals = vec![0.0; nnz];
        for (i, r) in rows.iter().enumerate() {
            for (c, v) in r.iter() {
                let slot = &mut fill[c as usize];
                row_idx[*slot] = i as u32;
                vals[*slot] = v;
                *slot += 1;
            }
        }
        Csc {
            n_rows: rows.len(),
            n_cols,
            col_ptr,
            row_idx,
            vals,
        }
    }

    pub fn column(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.vals[a..b])
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic loss for target `t` in {0, 1} at margin `z`.
#[inline]
pub(crate) fn logistic_loss(z: f64, t: f64) -> f64 {
    softplus(z) - t * z
}

#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Penalty strengths `(l1, l2)` for the objective
/// `sum_i s_i loss_i + l1 |w|_1 + l2 / 2 |w|^2`.
pub fn penalty_strengths(cfg: &GlmConfig) -> (f64, f64) {
    let rho = cfg.penalty.l1_ratio();
    (rho / cfg.c, (1.0 - rho) / cfg.c)
}

pub fn objective(x: &Csc, t: &[f64], s: &[f64], w: &[f64], b: f64, l1: f64, l2: f64) -> f64 {
    let z = margins(x, w, b);
    let loss: f64 = z
        .iter()
        .zip(t)
        .zip(s)
        .map(|((&z, &t), &s)| s * logistic_loss(z, t))
        .sum();
    loss + l1 * w.iter().map(|v| v.abs()).sum::<f64>()
        + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn margins(x: &Csc, w: &[f64], b: f64) -> Vec<f64> {
    let mut z = vec![b; x.n_rows];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            let (rows, vals) = x.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                z[i as usize] += wj * v;
            }
        }
    }
    z
}

/// Gradient of the weighted loss (no penalty) with respect to each weight.
pub fn loss_gradient(x: &Csc, t: &[f64], s: &[f64], w: &[f64], b: f64) -> Vec<f64> {
    let z = margins(x, w, b);
    (0..x.n_cols)
        .map(|j| {
            let (rows, vals) = x.column(j);
            rows.iter()
                .zip(vals)
                .map(|(&i, &v)| {
                    let i = i as usize;
                    s[i] * (sigmoid(z[i]) - t[i]) * v
                })
                .sum()
        })
        .collect()
}

fn soft_threshold(v: f64, l: f64) -> f64 {
    if v > l {
        v - l
    } else if v < -l {
        v + l
    } else {
        0.0
    }
}

const MAX_BACKTRACK: usize = 64;

/// Minimizes the weighted penalized logistic objective for targets `t`
/// (0/1) and sample weights `s`. The intercept starts at the weighted
/// log-odds and is never penalized.
pub fn fit_binary(x: &Csc, t: &[f64], s: &[f64], cfg: &GlmConfig) -> Result<BinaryFit, GlmError> {
    let (l1, l2) = penalty_strengths(cfg);
    let p = x.n_cols;
    let mut w = vec![0.0; p];
    let w_total: f64 = s.iter().sum();
    let w_pos: f64 = s.iter().zip(t).map(|(s, t)| s * t).sum();
    if w_pos <= 0.0 || w_pos >= w_total {
        return Err(GlmError::SingleClass);
    }
    let mut b = (w_pos / (w_total - w_pos)).ln();
    let mut z = vec![b; x.n_rows];
    // quadratic majorization of the loss curvature along each coordinate
    let bound: Vec<f64> = (0..p)
        .map(|j| {
            let (rows, vals) = x.column(j);
            0.25 * rows
                .iter()
                .zip(vals)
                .map(|(&i, &v)| s[i as usize] * v * v)
                .sum::<f64>()
        })
        .collect();
    let b_bound = 0.25 * w_total;
    let mut active = vec![true; p];
    let mut full_sweep = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if !full_sweep && !active[j] {
                continue;
            }
            let (rows, vals) = x.column(j);
            if rows.is_empty() {
                active[j] = false;
                continue;
            }
            let mut g = 0.0;
            let mut h = 0.0;
            for (&i, &v) in rows.iter().zip(vals) {
                let i = i as usize;
                let pi = sigmoid(z[i]);
                g += s[i] * (pi - t[i]) * v;
                h += s[i] * pi * (1.0 - pi) * v * v;
            }
            let wj = w[j];
            let grad = g + l2 * wj;
            if full_sweep {
                active[j] = wj != 0.0 || grad.abs() > l1;
            }
            let mut curv = h.max(1e-12 * bound[j]);
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACK {
                let at_bound = curv >= bound[j];
                let hh = curv.min(bound[j]) + l2;
                if hh <= 0.0 {
                    break;
                }
                let u = soft_threshold(hh * wj - grad, l1) / hh;
                let d = u - wj;
                if d == 0.0 {
                    accepted = Some(0.0);
                    break;
                }
                let mut change = l1 * (u.abs() - wj.abs()) + 0.5 * l2 * (u * u - wj * wj);
                for (&i, &v) in rows.iter().zip(vals) {
                    let i = i as usize;
                    change +=
                        s[i] * (logistic_loss(z[i] + d * v, t[i]) - logistic_loss(z[i], t[i]));
                }
                if change <= 0.0 || at_bound {
                    accepted = Some(d);
                    break;
                }
                curv *= 2.0;
            }
            let Some(d) = accepted else { continue };
            if d != 0.0 {
                w[j] += d;
                for (&i, &v) in rows.iter().zip(vals) {
                    z[i as usize] += d * v;
                }
                max_delta = max_delta.max(d.abs());
            }
        }

        // unpenalized Newton step on the intercept
        let mut g = 0.0;
        let mut h = 0.0;
        for i in 0..x.n_rows {
            let pi = sigmoid(z[i]);
            g += s[i] * (pi - t[i]);
            h += s[i] * pi * (1.0 - pi);
        }
        let mut curv = h.max(1e-12 * b_bound);
        for _ in 0..MAX_BACKTRACK {
            let at_bound = curv >= b_bound;
            let d = -g / curv.min(b_bound);
            if d == 0.0 || !d.is_finite() {
                break;
            }
            let change: f64 = (0..x.n_rows)
                .map(|i| s[i] * (logistic_loss(z[i] + d, t[i]) - logistic_loss(z[i], t[i])))
                .sum();
            if change <= 0.0 || at_bound {
                b += d;
                z.iter_mut().for_each(|zi| *zi += d);
                max_delta = max_delta.max(d.abs());
                break;
            }
            curv *= 2.0;
        }

        let loss: f64 = z
            .iter()
            .zip(t)
            .zip(s)
            .map(|((&z, &t), &s)| s * logistic_loss(z, t))
            .sum();
        if !loss.is_finite() || !b.is_finite() {
            return Err(GlmError::NonFinite {
                iteration: iterations,
            });
        }
        if max_delta < cfg.tolerance {
            if full_sweep {
                converged = true;
                break;
            }
            full_sweep = true;
        } else {
            full_sweep = false;
        }
    }
    Ok(BinaryFit {
        weights: w,
        intercept: b,
        iterations,
        converged,
    })
}
