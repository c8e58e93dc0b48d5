use pdnac_core::acceptance::{select_trend_instance, TREND_SEEDS};
use pdnac_core::cmdp::{garnet, ConstraintMode};
use pdnac_core::pdnac::{dual_update, run, PdnacConfig, RunMetrics, CSV_HEADER};

fn quarter_means(values: &[f64]) -> [f64; 4] {
    let q = values.len() / 4;
    let mut out = [0.0; 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let chunk = &values[i * q..(i + 1) * q];
        *slot = chunk.iter().sum::<f64>() / chunk.len() as f64;
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn small_config(seed: u64) -> PdnacConfig {
    PdnacConfig {
        seed,
        width: 16,
        ..PdnacConfig::with_t(64)
    }
}

#[test]
fn single_epoch_runs_are_byte_identical() {
    let model = garnet(3, 2, 2, ConstraintMode::Slater { margin: 0.25 }, 1).unwrap();
    let config = PdnacConfig {
        k: Some(1),
        h: Some(1),
        ..small_config(42)
    };
    let a = run(&config, &model).unwrap();
    let b = run(&config, &model).unwrap();
    assert_eq!(a.rows.len(), 1);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.summary_json(), b.summary_json());
    let other = run(&PdnacConfig { seed: 43, ..config }, &model).unwrap();
    assert_ne!(a.to_csv(), other.to_csv());
}

#[test]
fn first_row_lambda_is_one_clamped_step_from_zero() {
    let model = garnet(4, 2, 3, ConstraintMode::Uniform, 3).unwrap();
    for seed in 0..4 {
        let m = run(&small_config(seed), &model).unwrap();
        let cfg = &m.summary.config;
        let row = &m.rows[0];
        assert_eq!(row.lambda, dual_update(0.0, cfg.beta, row.eta_c, cfg.delta));
        for pair in m.rows.windows(2) {
            assert_eq!(pair[1].lambda, dual_update(pair[0].lambda, cfg.beta, pair[1].eta_c, cfg.delta));
        }
    }
}

#[test]
fn rows_and_bookkeeping() {
    let model = garnet(4, 2, 3, ConstraintMode::Slater { margin: 0.25 }, 0).unwrap();
    let m = run(&small_config(7), &model).unwrap();
    m.check_invariants().unwrap();
    let cfg = &m.summary.config;
    assert_eq!(m.rows.len(), cfg.k);
    assert!(m.rows.iter().enumerate().all(|(i, r)| r.k == i));
    assert_eq!(m.summary.inner_iterations, 2 * (cfg.k * cfg.h) as u64);
    assert!(m.summary.total_env_steps >= m.summary.inner_iterations);
    assert!(m.summary.mean_batch_length() <= 2.0 * (cfg.t_max as f64).log2() + 2.0);
    let mean_gap = m.rows.iter().map(|r| r.gap).sum::<f64>() / m.rows.len() as f64;
    assert!((m.summary.mean_gap - mean_gap).abs() < 1e-12);
    assert!(m.rows.iter().all(|r| (r.violation + r.j_c).abs() == 0.0));
    let star = m.summary.j_r_star.unwrap();
    assert!(m.rows.iter().all(|r| (r.gap - (star - r.j_r)).abs() == 0.0));
}

#[test]
fn csv_has_the_exact_header_and_parses_back() {
    let model = garnet(3, 2, 2, ConstraintMode::Slater { margin: 0.25 }, 2).unwrap();
    let m = run(&small_config(1), &model).unwrap();
    let csv = m.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let cols = CSV_HEADER.split(',').count();
    for (line, row) in lines.zip(&m.rows) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), cols);
        assert_eq!(fields[0].parse::<usize>().unwrap(), row.k);
        assert_eq!(fields[1].parse::<f64>().unwrap(), row.j_r);
        assert_eq!(fields[3].parse::<f64>().unwrap(), row.lambda);
        assert_eq!(fields[12], "0");
    }
}

#[test]
fn summary_json_carries_the_documented_keys() {
    let model = garnet(3, 2, 2, ConstraintMode::Slater { margin: 0.25 }, 2).unwrap();
    let m = run(&small_config(1), &model).unwrap();
    let v: serde_json::Value = serde_json::from_str(&m.summary_json()).unwrap();
    for key in [
        "config",
        "config_hash",
        "seed",
        "mean_gap",
        "mean_violation",
        "mean_positive_violation",
        "total_env_steps",
        "inner_iterations",
        "j_r_star",
        "final_theta",
        "warnings",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["config"]["t"], 64);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["config_hash"].as_str().unwrap(), m.summary.config.hash());
}

#[test]
fn infeasible_models_report_nan_gap_and_a_warning() {
    let base = garnet(3, 2, 2, ConstraintMode::Uniform, 5).unwrap();
    let model = base.with_cost(vec![-1.0; 6]).unwrap();
    let m = run(&small_config(0), &model).unwrap();
    assert!(m.rows.iter().all(|r| r.gap.is_nan()));
    assert!(m.summary.j_r_star.is_none());
    assert_eq!(m.summary.warnings.len(), 1);
    assert!(m.summary.mean_gap.is_nan());
    // an always-violated constraint keeps pushing the dual variable up
    let cap = m.summary.config.dual_cap();
    assert!(m.rows.windows(2).all(|w| w[1].lambda > w[0].lambda || w[1].lambda == cap));
}

#[test]
fn invalid_configs_are_rejected() {
    let model = garnet(2, 2, 1, ConstraintMode::Uniform, 0).unwrap();
    let bad = [
        PdnacConfig::with_t(3),
        PdnacConfig {
            delta: 1.0,
            ..PdnacConfig::with_t(16)
        },
        PdnacConfig {
            t_max: Some(1),
            ..PdnacConfig::with_t(16)
        },
        PdnacConfig {
            k: Some(0),
            ..PdnacConfig::with_t(16)
        },
        PdnacConfig {
            alpha: Some(-0.1),
            ..PdnacConfig::with_t(16)
        },
        PdnacConfig {
            beta: Some(f64::NAN),
            ..PdnacConfig::with_t(16)
        },
    ];
    for config in bad {
        assert!(run(&config, &model).is_err(), "{config:?}");
    }
}

#[test]
fn slack_constraint_reduces_to_unconstrained_ascent() {
    let base = garnet(4, 2, 3, ConstraintMode::Uniform, 12).unwrap();
    let model = base.with_cost(vec![1.0; 8]).unwrap();
    let runs: Vec<RunMetrics> = (0..5)
        .map(|seed| {
            let config = PdnacConfig {
                seed,
                beta: Some(0.0),
                ..PdnacConfig::with_t(1024)
            };
            run(&config, &model).unwrap()
        })
        .collect();
    for m in &runs {
        assert!(m.rows.iter().all(|r| r.lambda == 0.0));
    }
    let quarters: Vec<[f64; 4]> = runs
        .iter()
        .map(|m| quarter_means(&m.rows.iter().map(|r| r.j_r).collect::<Vec<_>>()))
        .collect();
    let med: Vec<f64> = (0..4).map(|q| median(quarters.iter().map(|x| x[q]).collect())).collect();
    assert!(med.windows(2).all(|w| w[1] >= w[0]), "{med:?}");
}

#[test]
fn violation_shrinks_from_first_to_last_quarter() {
    let (_, _, model) = select_trend_instance().unwrap();
    let (first, last): (Vec<f64>, Vec<f64>) = (0..TREND_SEEDS)
        .map(|seed| {
            let m = run(
                &PdnacConfig {
                    seed,
                    ..PdnacConfig::with_t(1024)
                },
                &model,
            )
            .unwrap();
            let q = quarter_means(&m.rows.iter().map(|r| r.violation).collect::<Vec<_>>());
            (q[0], q[3])
        })
        .unzip();
    let (f, l) = (median(first), median(last));
    assert!(l <= f, "last quarter {l} > first quarter {f}");
}
