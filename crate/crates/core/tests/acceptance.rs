//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hapi_core::claims::{
    parse_date, ClaimEvent, CodeRoles, ConceptId, PatientId, PatientRecord, Race, RiskLabel,
    SecondPass, Sex,
};
use hapi_core::cohort::{infer_latest_episode, label_episode_bounds, Split};
use hapi_core::features::{DesignMatrix, SparseExample};
use hapi_core::glm::{fit, loss_gradient, Csc, GlmConfig, LinearModel, Penalty};
use hapi_core::hapi::{ema_smooth, HapiConfig, Identifier};
use hapi_core::pipeline::Workspace;
use hapi_core::stats;
use hapi_core::synth::{generate, GeneratorConfig, SynthCorpus};
use hapi_core::workflow::{self, EvalPatient};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    match f() {
        Ok(detail) => Outcome {
            name,
            pass: true,
            detail,
        },
        Err(detail) => Outcome {
            name,
            pass: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ------------------------------------------------------------------ solver

fn random_instance(rng: &mut ChaCha8Rng) -> DesignMatrix {
    let n = rng.random_range(40..160);
    let p = rng.random_range(5..40);
    let density = rng.random_range(0.05..0.4);
    let rows = (0..n)
        .map(|i| {
            let mut columns = Vec::new();
            let mut values = Vec::new();
            for c in 0..p as u32 {
                if rng.random_bool(density) {
                    columns.push(c);
                    values.push(if c % 3 == 0 {
                        rng.random_range(0.0..1.0)
                    } else {
                        1.0
                    });
                }
            }
            let signal: f64 = columns
                .iter()
                .zip(&values)
                .filter(|(c, _)| **c < 4)
                .map(|(_, v)| v)
                .sum();
            let mut label = rng.random_bool((0.15 + 0.3 * signal).min(0.9)) as u8;
            // both classes always present
            if i < 2 {
                label = i as u8;
            }
            SparseExample {
                patient_id: PatientId::new(format!("r{i}")),
                as_of: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                label,
                columns,
                values,
            }
        })
        .collect();
    DesignMatrix {
        fingerprint: "acceptance".into(),
        total_columns: p,
        n_classes: 2,
        rows,
    }
}

fn dense_rows(m: &DesignMatrix) -> Vec<Vec<f64>> {
    m.rows
        .iter()
        .map(|r| {
            let mut x = vec![0.0; m.total_columns];
            for (c, v) in r.columns.iter().zip(&r.values) {
                x[*c as usize] = *v;
            }
            x
        })
        .collect()
}

/// Unpenalized negative log-likelihood, computed densely.
fn nll(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let z = b + xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            (1.0 + z.exp()).ln() - yi * z
        })
        .sum()
}

/// Gradient of `nll` in (w, b), computed densely.
fn nll_grad(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let mut g = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = b + xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let r = 1.0 / (1.0 + (-z).exp()) - yi;
        for (gj, xj) in g.iter_mut().zip(xi) {
            *gj += r * xj;
        }
        gb += r;
    }
    (g, gb)
}

fn weights_of(model: &LinearModel, p: usize) -> Vec<f64> {
    let mut w = vec![0.0; p];
    let sw = model.class_weights(0);
    for (i, v) in sw.index.iter().zip(&sw.value) {
        w[*i as usize] = *v;
    }
    w
}

fn solver_correctness() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut worst_fd = 0.0f64;
    let mut worst_kkt = 0.0f64;
    for inst in 0..50 {
        let m = random_instance(&mut rng);
        let p = m.total_columns;
        let x = dense_rows(&m);
        let y: Vec<f64> = m.rows.iter().map(|r| r.label as f64).collect();

        // library gradient against central differences of the dense loss
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let g = loss_gradient(&Csc::from_rows(&m.rows, p), &y, &vec![1.0; y.len()], &w, b);
        for j in 0..p {
            let h = 1e-6;
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            let fd = (nll(&x, &y, &wp, b) - nll(&x, &y, &wm, b)) / (2.0 * h);
            let scale = g[j].abs().max(fd.abs());
            let rel = if scale < 1e-7 {
                0.0
            } else {
                (g[j] - fd).abs() / scale
            };
            worst_fd = worst_fd.max(rel);
        }

        // subgradient optimality at convergence
        let c = rng.random_range(0.05..2.0);
        let cfg = if inst % 2 == 0 {
            GlmConfig::lasso(c, 1e-10)
        } else {
            GlmConfig {
                penalty: Penalty::ElasticNet { l1_ratio: 0.5 },
                ..GlmConfig::lasso(c, 1e-10)
            }
        };
        let model = fit(&m, &cfg).map_err(|e| format!("instance {inst}: {e}"))?;
        ensure(model.converged, || {
            format!("instance {inst} did not converge")
        })?;
        let rho = cfg.penalty.l1_ratio();
        let (l1, l2) = (rho / c, (1.0 - rho) / c);
        let wf = weights_of(&model, p);
        let (gf, gb) = nll_grad(&x, &y, &wf, model.intercepts[0]);
        let mut v = gb.abs();
        for (gj, wj) in gf.iter().zip(&wf) {
            let r = if *wj == 0.0 {
                (gj.abs() - l1).max(0.0)
            } else {
                (gj + l2 * wj + l1 * wj.signum()).abs()
            };
            v = v.max(r);
        }
        worst_kkt = worst_kkt.max(v);
    }
    ensure(worst_fd < 1e-5, || {
        format!("gradient relative error {worst_fd:e}")
    })?;
    ensure(worst_kkt < 1e-5, || format!("KKT violation {worst_kkt:e}"))?;

    // C -> 0: no weights survive and the intercept is the log-odds
    let m = random_instance(&mut rng);
    let model = fit(&m, &GlmConfig::lasso(1e-12, 1e-12)).map_err(|e| e.to_string())?;
    let pos = m.rows.iter().filter(|r| r.label == 1).count() as f64;
    let log_odds = (pos / (m.len() as f64 - pos)).ln();
    ensure(model.nonzeros() == 0, || {
        format!("{} nonzero weights at C=1e-12", model.nonzeros())
    })?;
    ensure((model.intercepts[0] - log_odds).abs() < 1e-9, || {
        format!("intercept {} vs log-odds {log_odds}", model.intercepts[0])
    })?;

    let took = t0.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!(
        "50 instances, max grad rel err {worst_fd:.1e}, max KKT violation {worst_kkt:.1e}, intercept-only at C->0, {:.2}s",
        took.as_secs_f64()
    ))
}

// ------------------------------------------------------------------- stats

fn statistics_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let m = labels.iter().filter(|&&l| l).count();
        if m == 0 || m == n {
            continue;
        }
        let mut twice_wins = 0u64;
        for (sp, _) in scores.iter().zip(&labels).filter(|p| *p.1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|p| !*p.1) {
                twice_wins += if sp > sn {
                    2
                } else if sp == sn {
                    1
                } else {
                    0
                };
            }
        }
        let brute = twice_wins as f64 / (2 * m * (n - m)) as f64;
        let got = stats::auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(got == brute, || {
            format!("set {sets}: auc {got} vs pairwise {brute}")
        })?;
        sets += 1;
    }

    let mut intervals = 0;
    for n in 1..=500u64 {
        for s in 0..=n {
            let iv = stats::wilson_interval(s, n, 0.95).map_err(|e| e.to_string())?;
            let p = s as f64 / n as f64;
            ensure(
                0.0 <= iv.low && iv.low <= p && p <= iv.high && iv.high <= 1.0,
                || format!("wilson({s}, {n}) = [{}, {}]", iv.low, iv.high),
            )?;
            intervals += 1;
        }
    }

    let chi = stats::mcnemar(10, 2).map_err(|e| e.to_string())?.statistic;
    ensure((chi - 16.0 / 3.0).abs() <= 1e-9, || {
        format!("McNemar statistic {chi}")
    })?;
    Ok(format!(
        "1000 AUC sets equal to pairwise counting, {intervals} Wilson intervals contain s/n within [0,1], McNemar(10,2) = {chi:.9}"
    ))
}

// ---------------------------------------------------------------- episodes

fn record(id: &str, events: &[(u32, &str)]) -> PatientRecord {
    let pid = PatientId::new(id);
    PatientRecord::new(
        pid.clone(),
        Some(parse_date("1990-01-01").unwrap()),
        Sex::Female,
        Race::Unreported,
        events
            .iter()
            .map(|(c, s)| ClaimEvent {
                patient_id: pid.clone(),
                concept_id: ConceptId(*c),
                date: parse_date(s).unwrap(),
            })
            .collect(),
    )
}

fn episode_fidelity() -> Result<String, String> {
    let roles = CodeRoles::default_config();
    let d = |s: &str| parse_date(s).unwrap();
    let (start, amenorrhea, delivery) = (4001, 4201, 4101);

    let included = record(
        "included",
        &[
            (start, "2020-01-10"),
            (1001, "2020-04-02"),
            (delivery, "2020-10-01"),
        ],
    );
    let ep = infer_latest_episode(&included, &roles, SecondPass::Identification)
        .ok_or("start code inside the window followed by an outcome was excluded")?;
    ensure(
        ep.t_start == d("2020-01-10") && ep.t_end == d("2020-10-01"),
        || format!("bounds {ep:?}"),
    )?;

    let no_start = record(
        "no_start",
        &[(start, "2019-08-28"), (delivery, "2020-10-01")],
    );
    ensure(
        infer_latest_episode(&no_start, &roles, SecondPass::Identification).is_none(),
        || "outcome without a start code in the window was included".into(),
    )?;

    let no_outcome = record(
        "no_outcome",
        &[
            (amenorrhea, "2020-01-10"),
            (start, "2020-02-01"),
            (1001, "2020-05-01"),
        ],
    );
    ensure(
        infer_latest_episode(&no_outcome, &roles, SecondPass::Identification).is_none(),
        || "pregnancy codes without an outcome were included".into(),
    )?;

    let backfill = record(
        "backfill",
        &[(start, "2020-02-01"), (delivery, "2020-10-07")],
    );
    let ep = infer_latest_episode(&backfill, &roles, SecondPass::Identification)
        .ok_or("backfill episode missing")?;
    let labeled = label_episode_bounds(&ep, false, &backfill, &roles).map_err(|e| e.to_string())?;
    ensure(
        labeled.t_start == d("2020-01-01") && labeled.t_end == d("2020-10-07"),
        || format!("backfilled bounds {} .. {}", labeled.t_start, labeled.t_end),
    )?;
    Ok("included / no start in window / no outcome decided as expected; 2020-10-07 backfills to 2020-01-01".into())
}

// -------------------------------------------------------------------- HAPI

struct Corpus {
    corpus: SynthCorpus,
    roles: CodeRoles,
    cohorts: workflow::Cohorts,
    seed: u64,
}

const CORPUS_SEED: u64 = 1;
const CORPUS_PATIENTS: usize = 2000;

fn build_corpus() -> Result<(Corpus, Duration), String> {
    let t0 = Instant::now();
    let cfg = GeneratorConfig::with_total(CORPUS_PATIENTS, CORPUS_SEED);
    ensure(
        cfg.delayed_fraction == 0.3 && cfg.delay_mean_weeks == 6.0,
        || {
            format!(
                "delay settings {} / {}",
                cfg.delayed_fraction, cfg.delay_mean_weeks
            )
        },
    )?;
    let corpus = generate(&cfg).map_err(|e| e.to_string())?;
    let roles = CodeRoles::default_config();
    let cohorts =
        workflow::build_cohorts(&corpus.records, &roles, CORPUS_SEED).map_err(|e| e.to_string())?;
    Ok((
        Corpus {
            corpus,
            roles,
            cohorts,
            seed: CORPUS_SEED,
        },
        t0.elapsed(),
    ))
}

fn hapi_reproduction(c: &Corpus, setup: Duration) -> Result<String, String> {
    let t0 = Instant::now();
    let records = &c.corpus.records;
    let features = workflow::identification_features(
        records,
        &c.corpus.vocabulary,
        &c.roles,
        &c.cohorts.identification,
    )
    .map_err(|e| e.to_string())?;
    let trained = workflow::train_identification_default(&features).map_err(|e| e.to_string())?;
    let tau = trained.model.threshold.ok_or("no threshold selected")?;
    let identifier = Identifier::new(
        trained.model.clone(),
        features.vocab.clone(),
        features.filter.clone(),
        c.roles.clone(),
        HapiConfig {
            tau,
            ..HapiConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let by_id = workflow::index_records(records);
    let patients: Vec<EvalPatient> = c
        .cohorts
        .identification
        .splits
        .members(Split::Test)
        .iter()
        .map(|p| {
            let t = c.corpus.truth.get(p).expect("every patient has truth");
            EvalPatient {
                record: by_id[p],
                true_start: t.t_start,
                true_end: t.t_end,
            }
        })
        .collect();
    let taus = workflow::tau_sweep(tau);
    let e = workflow::evaluate_identification(
        &identifier,
        &patients,
        &workflow::default_week_grid(),
        &taus,
    );
    let took = setup + t0.elapsed();

    let s = &e.delays;
    ensure(s.fraction_earlier > 0.0, || {
        "HAPI never detects a start earlier".into()
    })?;
    let (h, a) = (
        s.earlier_mean_hapi.ok_or("empty earlier subset")?,
        s.earlier_mean_anchor.ok_or("empty earlier subset")?,
    );
    ensure(h < a, || {
        format!("earlier-subset means: HAPI {h:.1} d, anchor {a:.1} d")
    })?;
    let fprs: Vec<f64> = e.sweep.iter().map(|p| p.fpr).collect();
    ensure(
        e.sweep.len() == 5 && e.sweep.iter().all(|p| p.n_never > 0 && p.fpr.is_finite()),
        || format!("sweep {:?}", e.sweep),
    )?;
    ensure(taus.windows(2).all(|w| w[0] < w[1]), || {
        format!("thresholds not increasing: {taus:?}")
    })?;
    ensure(
        fprs.windows(2).all(|w| w[1] <= w[0]) && fprs[4] < fprs[0],
        || format!("FPR across tau {taus:?} is {fprs:?}"),
    )?;
    ensure(took < Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!(
        "fraction earlier {:.3} ({} of {}), earlier-subset mean delay HAPI {h:.1} d vs anchor {a:.1} d, FPR at tau {} = {:?}, {:.1}s",
        s.fraction_earlier,
        s.n_earlier,
        s.n_pregnant,
        taus.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join("/"),
        fprs.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        took.as_secs_f64()
    ))
}

fn risk_trend(c: &Corpus) -> Result<String, String> {
    let records = &c.corpus.records;
    let cohort = &c.cohorts.risk;
    let features = workflow::risk_features(
        records,
        &c.corpus.vocabulary,
        &c.roles,
        cohort,
        workflow::RISK_CUTOFFS_PER_EPISODE,
        c.seed,
    )
    .map_err(|e| e.to_string())?;
    let groups = workflow::row_history_groups(&features.train, records, cohort, &c.roles)
        .map_err(|e| e.to_string())?;
    let trained = workflow::train_risk(&features, &groups).map_err(|e| e.to_string())?;
    let triage = hapi_core::risk::RiskTriage::new(
        trained.lasso.clone(),
        trained.groups.clone(),
        features.vocab.clone(),
        features.filter.clone(),
        c.roles.clone(),
    )
    .map_err(|e| e.to_string())?;
    let e = workflow::evaluate_risk(
        &triage,
        &trained.elastic_net,
        &features,
        records,
        cohort,
        &workflow::default_week_grid(),
    )
    .map_err(|e| e.to_string())?;

    let slope = e
        .trend
        .auc_slope
        .ok_or("AUC undefined in too many periods")?;
    let aucs: Vec<String> = e
        .trend
        .periods
        .iter()
        .map(|p| {
            p.auc
                .as_ref()
                .map_or("n/a".into(), |a| format!("{:.3}", a.auc))
        })
        .collect();
    ensure(slope > 0.0, || {
        format!("AUC slope {slope:.4} over {aucs:?}")
    })?;

    let complicated: Vec<&PatientId> = cohort
        .splits
        .members(Split::Test)
        .iter()
        .filter_map(|p| cohort.episodes.get_key_value(p))
        .filter(|(_, (_, l))| *l != RiskLabel::None)
        .map(|(p, _)| p)
        .collect();
    let mut seen: BTreeMap<&PatientId, usize> = BTreeMap::new();
    for (p, _) in &e.alerts.assignments {
        *seen.entry(p).or_default() += 1;
    }
    ensure(
        e.alerts.total() == complicated.len()
            && seen.len() == complicated.len()
            && seen.values().all(|&n| n == 1)
            && complicated.iter().all(|p| seen.contains_key(p)),
        || {
            format!(
                "buckets {:?} for {} complicated test patients",
                e.alerts.counts,
                complicated.len()
            )
        },
    )?;
    Ok(format!(
        "AUC by period {aucs:?}, slope {slope:.4}; earliest-alert buckets {:?} partition {} complicated test patients",
        e.alerts.counts,
        complicated.len()
    ))
}

// --------------------------------------------------------------------- EMA

fn ema_unit_answers() -> Result<String, String> {
    let third = 1.0 / 3.0;
    let step = ema_smooth(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 5, third);
    let impulse = ema_smooth(&[1.0, 0.0, 0.0, 0.0, 0.0], 5, third);
    ensure((step[4] - 81.0 / 121.0).abs() <= 1e-12, || {
        format!("step response {}", step[4])
    })?;
    ensure((impulse[4] - 1.0 / 121.0).abs() <= 1e-12, || {
        format!("impulse tail {}", impulse[4])
    })?;
    Ok(format!(
        "step {:.15}, impulse tail {:.15}",
        step[4], impulse[4]
    ))
}

// ------------------------------------------------------------- determinism

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Result<String, String> {
    let cfg = GeneratorConfig::with_total(400, 3);
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (wa, wb) = (Workspace::new(a.path()), Workspace::new(b.path()));
    wa.run_all(&cfg, false).map_err(|e| e.to_string())?;
    wb.run_all(&cfg, false).map_err(|e| e.to_string())?;
    let first = tree(a.path());
    let second = tree(b.path());
    ensure(first == second, || {
        let differing: Vec<&String> = first
            .keys()
            .filter(|k| first.get(*k) != second.get(*k))
            .collect();
        format!("differing files: {differing:?}")
    })?;
    wa.run_all(&cfg, true).map_err(|e| e.to_string())?;
    let forced = tree(a.path());
    ensure(forced == first, || "forced rerun changed bytes".into())?;
    Ok(format!(
        "{} files identical across two workspaces and a forced rerun",
        first.len()
    ))
}

fn main() {
    let mut results = vec![
        check("solver correctness", solver_correctness),
        check("AUC, Wilson and McNemar oracles", statistics_oracles),
        check("episode inference fidelity", episode_fidelity),
    ];
    match build_corpus() {
        Ok((corpus, setup)) => {
            results.push(check("HAPI qualitative reproduction", || {
                hapi_reproduction(&corpus, setup)
            }));
            results.push(check("risk trend and alert buckets", || {
                risk_trend(&corpus)
            }));
        }
        Err(e) => {
            for name in [
                "HAPI qualitative reproduction",
                "risk trend and alert buckets",
            ] {
                results.push(Outcome {
                    name,
                    pass: false,
                    detail: format!("corpus: {e}"),
                });
            }
        }
    }
    results.push(check("EMA unit answers", ema_unit_answers));
    results.push(check("determinism", determinism));

    for r in &results {
        println!(
            "{} {}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
