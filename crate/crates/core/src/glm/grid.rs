use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, fit, ClassWeighting, GlmConfig, GlmError, LinearModel, Penalty};
use crate::features::DesignMatrix;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValAccuracy,
    AucTimesAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: GlmConfig,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
    pub metric: Option<f64>,
    pub nonzeros: usize,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub selection: Selection,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn chosen(&self) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.chosen)
    }
}

fn cartesian(
    cs: &[f64],
    tols: &[f64],
    penalty: Penalty,
    weighting: ClassWeighting,
) -> Vec<GlmConfig> {
    cs.iter()
        .flat_map(|&c| {
            tols.iter().map(move |&tolerance| GlmConfig {
                penalty,
                c,
                tolerance,
                max_iters: 1000,
                class_weighting: weighting,
            })
        })
        .collect()
}

/// 5 x 5 Lasso grid for the pregnancy identification model.
pub fn identification_grid() -> Vec<GlmConfig> {
    cartesian(
        &[1e-3, 7.5e-4, 5e-4, 2.5e-4, 1e-4],
        &[1.0, 1e-1, 1e-2, 1e-3, 1e-4],
        Penalty::L1,
        ClassWeighting::None,
    )
}

/// 5 x 4 Lasso grid for the risk model, inverse-prior class weights.
pub fn risk_lasso_grid() -> Vec<GlmConfig> {
    cartesian(
        &[1.0, 1e-1, 1e-2, 1e-3, 1e-4],
        &[1e-1, 1e-2, 1e-3, 1e-4],
        Penalty::L1,
        ClassWeighting::InversePrior,
    )
}

/// Elastic-net grid over the L1 ratio and tolerance at a fixed `c`.
pub fn risk_elastic_net_grid(c: f64) -> Vec<GlmConfig> {
    [0.25, 0.5, 0.75]
        .into_iter()
        .flat_map(|l1_ratio| {
            cartesian(
                &[c],
                &[1e-1, 5e-2],
                Penalty::ElasticNet { l1_ratio },
                ClassWeighting::InversePrior,
            )
        })
        .collect()
}

struct Scored {
    accuracy: f64,
    auc: Option<f64>,
}

fn score(model: &LinearModel, val: &DesignMatrix) -> Result<Scored, GlmError> {
    let probs = model.predict_matrix(val)?;
    let labels = val.labels();
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| {
            let pred = if model.n_classes == 2 {
                (p[1] >= 0.5) as usize
            } else {
                argmax(p)
            };
            pred == l as usize
        })
        .count();
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    let auc = if model.n_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        stats::auc(&s, &y).ok()
    } else {
        stats::macro_auc(&probs, &labels, model.n_classes).ok()
    };
    Ok(Scored { accuracy, auc })
}

/// Fits every candidate (in parallel) and picks the best by `selection`;
/// ties go to the earliest candidate and failed candidates are skipped.
pub fn grid_search(
    train: &DesignMatrix,
    val: &DesignMatrix,
    grid: &[GlmConfig],
    selection: Selection,
) -> Result<(GridResult, LinearModel), GlmError> {
    if grid.is_empty() {
        return Err(GlmError::Config("grid is empty".into()));
    }
    let fitted: Vec<Result<(LinearModel, Scored), GlmError>> = grid
        .par_iter()
        .map(|cfg| {
            let m = fit(train, cfg)?;
            let s = score(&m, val)?;
            Ok((m, s))
        })
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, (cfg, res)) in grid.iter().zip(&fitted).enumerate() {
        let row = match res {
            Ok((m, s)) => {
                let metric = match selection {
                    Selection::ValAccuracy => Some(s.accuracy),
                    Selection::AucTimesAccuracy => s.auc.map(|a| a * s.accuracy),
                };
                if let Some(v) = metric {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
                GridRow {
                    config: *cfg,
                    val_accuracy: Some(s.accuracy),
                    val_auc: s.auc,
                    metric,
                    nonzeros: m.nonzeros(),
                    converged: m.converged,
                    iterations: m.iterations,
                    error: None,
                    chosen: false,
                }
            }
            Err(e) => GridRow {
                config: *cfg,
                val_accuracy: None,
                val_auc: None,
                metric: None,
                nonzeros: 0,
                converged: false,
                iterations: 0,
                error: Some(e.to_string()),
                chosen: false,
            },
        };
        rows.push(row);
    }
    let (chosen, _) = best.ok_or(GlmError::AllCandidatesFailed)?;
    rows[chosen].chosen = true;
    let model = fitted
        .into_iter()
        .nth(chosen)
        .and_then(|r| r.ok())
        .map(|(m, _)| m)
        .expect("chosen candidate fitted");
    Ok((GridResult { selection, rows }, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::tests::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_sizes() {
        assert_eq!(identification_grid().len(), 25);
        assert_eq!(risk_lasso_grid().len(), 20);
        assert_eq!(risk_elastic_net_grid(1e-3).len(), 6);
    }

    #[test]
    fn single_candidate_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tr = random_matrix(&mut rng, 200, 10, 2, 0.3);
        let va = random_matrix(&mut rng, 100, 10, 2, 0.3);
        let (g, _) = grid_search(
            &tr,
            &va,
            &[GlmConfig::lasso(1.0, 1e-4)],
            Selection::ValAccuracy,
        )
        .unwrap();
        assert_eq!(g.rows.len(), 1);
        assert!(g.rows[0].chosen);
    }

    #[test]
    fn failed_candidates_excluded_and_exactly_one_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tr = random_matrix(&mut rng, 300, 10, 3, 0.3);
        let va = random_matrix(&mut rng, 150, 10, 3, 0.3);
        let mut grid = risk_lasso_grid();
        grid.insert(0, GlmConfig { c: -1.0, ..grid[0] });
        let (g, model) = grid_search(&tr, &va, &grid, Selection::AucTimesAccuracy).unwrap();
        assert_eq!(g.rows.len(), 21);
        assert!(g.rows[0].error.is_some() && !g.rows[0].chosen);
        assert_eq!(g.rows.iter().filter(|r| r.chosen).count(), 1);
        let best = g.chosen().unwrap();
        assert_eq!(best.config, model.config);
        let top = g
            .rows
            .iter()
            .filter_map(|r| r.metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.metric, Some(top));
        let first_top = g.rows.iter().position(|r| r.metric == Some(top)).unwrap();
        assert!(g.rows[first_top].chosen);
    }
}
