//! End-to-end acceptance criteria, one PASS/FAIL line each.
//!
//! The full-scale run (criterion 1) takes hours on one core and only runs
//! with `DEEP_BSDE_FULL_SCALE=1`.

use std::io::Write;
use std::time::Instant;

use deep_bsde::audit::{c_objective, check_conditions, compute_c, compute_l0_l1, LAMBDA_MAX, LAMBDA_MIN};
use deep_bsde::experiments::run::build_problem;
use deep_bsde::experiments::{preset, ExperimentConfig};
use deep_bsde::networks::LrSchedule;
use deep_bsde::oracle::{lsmc_implicit_solve, oracle_cross_check, OracleConfig};
use deep_bsde::problems::{builtin_problem, FbsdeProblem, ProblemConstants, ProblemParams};
use deep_bsde::scheme::{
    fit_empirical_constant, lemma2_statistical_check, martingale_residual_test, rollout_gradient_check,
    sample_increments, PolicyInit, SolverPolicy, TimeGrid,
};
use deep_bsde::trainer::{convergence_study, mean_sd, run_seed, train, TrainConfig};
use deep_bsde::{finite_diff_check, gaussian_batch, seeded_rng, Tape, Tensor};
use rand::Rng;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Self { pass: Some(pass), detail }
    }
}

// libtest captures print macros but not direct writes
fn report(n: usize, title: &str, o: &Outcome) {
    let status = match o.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "NOT RUN",
    };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} [{status}] {title}: {}", o.detail);
}

struct Trained {
    problem: FbsdeProblem<f64>,
    grid: TimeGrid,
    policies: Vec<SolverPolicy<f64>>,
    rel_errors: Vec<f64>,
    seconds: Vec<f64>,
}

fn train_preset(cfg: &ExperimentConfig) -> Trained {
    let problem = build_problem(cfg).unwrap();
    let grid = TimeGrid::for_problem(&problem, cfg.grid.n).unwrap();
    let mut out = Trained {
        problem,
        grid,
        policies: Vec::new(),
        rel_errors: Vec::new(),
        seconds: Vec::new(),
    };
    for r in 0..cfg.runs {
        let tc = TrainConfig {
            seed: run_seed(cfg.train.seed, r),
            ..cfg.train.clone()
        };
        let start = Instant::now();
        let (pol, rep) = train(&out.problem, &out.grid, &tc).unwrap();
        out.seconds.push(start.elapsed().as_secs_f64());
        out.rel_errors.push(rep.final_rel_error().unwrap());
        out.policies.push(pol);
    }
    out
}

fn preset_accuracy(name: &str, tol: f64, budget_s: f64) -> (Outcome, Trained) {
    let cfg = preset(name).unwrap();
    let t = train_preset(&cfg);
    let (mean, _) = mean_sd(&t.rel_errors);
    let slowest = t.seconds.iter().cloned().fold(0.0, f64::max);
    let pass = mean <= tol && slowest <= budget_s;
    let detail = format!(
        "mean relative Y0 error {:.3}% over {} runs (limit {}%), slowest run {slowest:.0}s (limit {budget_s:.0}s)",
        100.0 * mean,
        cfg.runs,
        100.0 * tol
    );
    (Outcome::check(pass, detail), t)
}

fn criterion_1() -> Outcome {
    if std::env::var("DEEP_BSDE_FULL_SCALE").map(|v| v == "1").unwrap_or(false) {
        preset_accuracy("example2-paper", 0.01, 7200.0).0
    } else {
        Outcome {
            pass: None,
            detail: "full scale (about 50 min per run on one core, 5 runs); set DEEP_BSDE_FULL_SCALE=1".into(),
        }
    }
}

fn criterion_4() -> Outcome {
    let cfg = preset("example2-desk").unwrap();
    let problem = build_problem(&cfg).unwrap();
    let start = Instant::now();
    let rows = convergence_study(&problem, &cfg.train, &[10, 20, 40, 80], cfg.runs).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    let pooled = |a: f64, b: f64| ((a * a + b * b) / 2.0).sqrt();
    let mut pass = last.mean_rel_error <= first.mean_rel_error && secs <= 1800.0;
    for r in &rows[1..rows.len() - 1] {
        pass &= r.mean_rel_error <= first.mean_rel_error + 2.0 * pooled(r.sd_rel_error, first.sd_rel_error);
    }
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("N={} {:.3e}+-{:.1e}", r.n, r.mean_rel_error, r.sd_rel_error))
        .collect();
    Outcome::check(pass, format!("{} in {secs:.0}s", table.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut worst_rollout = 0.0f64;
    for (name, seed) in [("example1", 1u64), ("example2", 2)] {
        let p = builtin_problem::<f64>(name, 2, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 3).unwrap();
        let mut rng = seeded_rng(seed);
        let init = PolicyInit {
            hidden: Some(vec![5, 5]),
            mu0_interval: (0.5, 1.5),
            ..PolicyInit::default()
        };
        let mut pol = SolverPolicy::init(&p, &g, &init, &mut rng).unwrap();
        // keep pre-activations off the relu kink at zero
        let names = pol.trainable_names();
        for (n, t) in names.iter().zip(pol.trainable_mut()) {
            if n.ends_with(".bias") {
                let noise = gaussian_batch::<f64, _>(&mut rng, 1, t.numel());
                for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v += 0.1 * e;
                }
            }
        }
        let inc = sample_increments::<f64, _>(&mut rng, &g, 4, 2);
        worst_rollout = worst_rollout.max(rollout_gradient_check(&p, &g, &pol, &inc, 1e-6).unwrap());
    }
    let mut rng = seeded_rng(3);
    let a = gaussian_batch::<f64, _>(&mut rng, 4, 3).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
    let w = gaussian_batch::<f64, _>(&mut rng, 3, 2);
    let pos = a.map(|v| v.abs() + 0.5);
    let probe = gaussian_batch::<f64, _>(&mut rng, 4, 3);
    type Prim = fn(&Tape<f64>, &[deep_bsde::Var<f64>]) -> deep_bsde::Result<deep_bsde::Var<f64>>;
    let prims: Vec<(Prim, Vec<Tensor<f64>>)> = vec![
        (|t, v| t.relu(&v[0]), vec![a.clone()]),
        (|t, v| t.exp(&v[0]), vec![a.clone()]),
        (|t, v| t.sin(&v[0]), vec![a.clone()]),
        (|t, v| t.cos(&v[0]), vec![a.clone()]),
        (|t, v| t.square(&v[0]), vec![a.clone()]),
        (|t, v| t.sqrt(&v[0]), vec![pos.clone()]),
        (|t, v| t.mul(&v[0], &v[1]), vec![a.clone(), pos.clone()]),
        (|t, v| t.div(&v[0], &v[1]), vec![a.clone(), pos.clone()]),
        (|t, v| t.matmul(&v[0], &v[1]), vec![a.clone(), w.clone()]),
        (|t, v| t.sum_cols(&v[0]), vec![a.clone()]),
        (
            |t, v| Ok(t.batch_norm(&v[0], &v[1], &v[2], 1e-6)?.0),
            vec![a.clone(), Tensor::row(vec![1.5, 2.0, 0.7]), Tensor::row(vec![0.1, -0.2, 0.3])],
        ),
    ];
    let mut worst_prim = 0.0f64;
    for (op, params) in prims {
        let err = finite_diff_check(
            |t, v| {
                let out = op(t, v)?;
                let c = Tensor::from_fn(out.rows(), out.cols(), |r, k| probe.at(r % 4, k % 3));
                t.mean(&t.mul(&out, &t.constant(c))?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        worst_prim = worst_prim.max(err);
    }
    Outcome::check(
        worst_rollout <= 1e-3 && worst_prim <= 1e-4,
        format!("full rollout {worst_rollout:.2e} (limit 1e-3), primitives {worst_prim:.2e} (limit 1e-4)"),
    )
}

fn small_train(iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        lr: LrSchedule::new(1e-2, 1e-3, 100, iterations).unwrap(),
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let lin = builtin_problem::<f64>("linear1d", 1, &ProblemParams::default()).unwrap();
    let g = TimeGrid::for_problem(&lin, 10).unwrap();
    let (pol, _) = train(&lin, &g, &small_train(1000, 1)).unwrap();
    let oracle_cfg = OracleConfig {
        degree: 1,
        ..OracleConfig::default()
    };
    let sol = lsmc_implicit_solve(&lin, &g, &oracle_cfg, &mut seeded_rng(2)).unwrap();
    let lc = oracle_cross_check(&lin, &g, &pol, &sol).unwrap();

    let e2 = builtin_problem::<f64>("example2", 1, &ProblemParams::default()).unwrap();
    let g2 = TimeGrid::for_problem(&e2, 10).unwrap();
    let (pol2, _) = train(&e2, &g2, &small_train(2000, 3)).unwrap();
    let sol2 = lsmc_implicit_solve(&e2, &g2, &OracleConfig::default(), &mut seeded_rng(4)).unwrap();
    let ec = oracle_cross_check(&e2, &g2, &pol2, &sol2).unwrap();

    let secs = start.elapsed().as_secs_f64();
    let pass = lc.deep_rel_error.unwrap() <= 0.01
        && lc.oracle_rel_error.unwrap() <= 0.01
        && lc.relative_discrepancy <= 0.02
        && ec.deep_rel_error.unwrap() <= 0.02
        && ec.oracle_rel_error.unwrap() <= 0.02
        && secs <= 300.0;
    Outcome::check(
        pass,
        format!(
            "linear1d deep {:.2e} oracle {:.2e} gap {:.2e}; example2 d=1 deep {:.2e} oracle {:.2e}; {secs:.0}s",
            lc.deep_rel_error.unwrap(),
            lc.oracle_rel_error.unwrap(),
            lc.relative_discrepancy,
            ec.deep_rel_error.unwrap(),
            ec.oracle_rel_error.unwrap()
        ),
    )
}

fn criterion_7() -> Outcome {
    let lin = builtin_problem::<f64>("linear1d", 1, &ProblemParams::default()).unwrap();
    let g = TimeGrid::for_problem(&lin, 10).unwrap();
    let mut cfg = small_train(1000, 5);
    cfg.checkpoint_every = 25;
    let (_, rep) = train(&lin, &g, &cfg).unwrap();
    let points = rep.certificate_points();
    let fit: Vec<_> = points.iter().step_by(2).cloned().collect();
    let held: Vec<_> = points.iter().skip(1).step_by(2).cloned().collect();
    let c_fit = fit_empirical_constant(&fit).unwrap();
    let worst = held.iter().map(|p| p.ratio() / c_fit).fold(0.0, f64::max);
    Outcome::check(
        points.len() >= 10 && worst <= 1.1,
        format!(
            "{} checkpoints, C_fit {c_fit:.3} from {}, worst held-out ratio {worst:.3} of C_fit (limit 1.1)",
            points.len(),
            fit.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut k = ProblemConstants {
        k_b: 0.3,
        k_f: 0.2,
        big_k: 1.0,
        b_y: 0.0,
        sigma_x: 0.5,
        sigma_y: 0.0,
        f_x: 0.4,
        f_z: 0.3,
        g_x: 0.6,
        b_0: 0.0,
        sigma_0: 0.0,
        f_0: 0.0,
        g_0: 0.0,
        horizon: 1.0,
    };
    let rep = check_conditions(&k).unwrap();
    let decoupled = rep.l0 == 0.0 && rep.c == 0.0 && rep.holds;

    let mut rng = seeded_rng(8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        k.b_y = rng.random_range(0.0..0.5);
        k.sigma_y = rng.random_range(0.0..0.5);
        k.g_x = rng.random_range(0.0..0.5);
        k.f_x = rng.random_range(0.0..0.5);
        k.horizon = rng.random_range(0.05..1.0);
        let (_, l1) = compute_l0_l1(&k).unwrap();
        let (lo, hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
        let brute = (0..100_000)
            .map(|i| c_objective(&k, l1, (lo + (hi - lo) * i as f64 / 99_999.0).exp()))
            .fold(f64::INFINITY, f64::min);
        let c = compute_c(&k).unwrap().c;
        worst = worst.max(((brute - c) / brute).abs());
        if c > brute + 1e-10 {
            worst = f64::INFINITY;
        }
    }

    let mut monotone = true;
    for _ in 0..20 {
        let base = ProblemConstants {
            b_y: rng.random_range(0.0..0.4),
            sigma_y: rng.random_range(0.0..0.4),
            g_x: rng.random_range(0.0..0.4),
            f_x: rng.random_range(0.0..0.4),
            horizon: rng.random_range(0.05..1.0),
            ..k.clone()
        };
        for which in 0..5 {
            let mut up = base.clone();
            match which {
                0 => up.b_y += 0.1,
                1 => up.sigma_y += 0.1,
                2 => up.g_x += 0.1,
                3 => up.f_x += 0.1,
                _ => up.horizon += 0.1,
            }
            let (a, b) = (check_conditions(&base).unwrap(), check_conditions(&up).unwrap());
            monotone &= b.l0 >= a.l0 && b.c >= a.c * (1.0 - 1e-9);
        }
    }
    Outcome::check(
        decoupled && worst <= 1e-6 && monotone,
        format!("decoupled L0 = c = 0 holds: {decoupled}; c vs 1e5-point grid worst rel {worst:.1e} (limit 1e-6); monotone: {monotone}"),
    )
}

fn criterion_9(ex1: &Trained) -> Outcome {
    let start = Instant::now();
    let stats = martingale_residual_test(&ex1.problem, &ex1.grid, &ex1.policies[0], 10_000, &mut seeded_rng(9)).unwrap();
    let max_z = stats.iter().map(|s| s.z.abs()).fold(0.0, f64::max);
    let lemma = lemma2_statistical_check(&mut seeded_rng(10), 1_000_000, 1.0, 2.0).unwrap();
    let g = TimeGrid::new(1.0, 20).unwrap();
    let inc = sample_increments::<f64, _>(&mut seeded_rng(11), &g, 5000, 4);
    let vals: Vec<f64> = inc.iter().flat_map(|t| t.data().to_vec()).collect();
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (2.0 / (n - 1.0)).sqrt() * g.h;
    let dev = (var - g.h).abs() / se;
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        max_z <= 4.0 && lemma.passed && dev <= 5.0 && secs <= 120.0,
        format!(
            "max |z| {max_z:.2} over {} steps (limit 4); brownian identity check passed: {}; dW variance {dev:.2} SE from h (limit 5); {secs:.0}s",
            stats.len(),
            lemma.passed
        ),
    )
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_deep-bsde");
    let mut identical = true;
    let mut names = Vec::new();
    for p in ["linear1d-smoke", "example2-desk"] {
        let mut csvs = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("{p}-{k}"));
            let cfg = tmp.path().join(format!("{p}.toml"));
            // a single run keeps the check quick; determinism is per run
            std::fs::write(&cfg, format!("schema_version = 1\npreset = \"{p}\"\nruns = 1\n")).unwrap();
            let status = std::process::Command::new(bin)
                .args(["solve", "--config", cfg.to_str().unwrap(), "--deterministic", "--seed", "42"])
                .arg("--out")
                .arg(&out)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            identical &= status.success();
            csvs.push(std::fs::read(out.join("run0/training.csv")).unwrap_or_default());
        }
        identical &= !csvs[0].is_empty() && csvs[0] == csvs[1];
        names.push(p);
    }
    Outcome::check(identical, format!("byte-identical training CSVs for {}", names.join(", ")))
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    let mut run = |n: usize, title: &str, o: Outcome| {
        report(n, title, &o);
        results.push((n, o.pass));
    };
    run(1, "example2 full scale", criterion_1());
    run(2, "example2 desk scale", preset_accuracy("example2-desk", 0.02, 300.0).0);
    let (o3, ex1) = preset_accuracy("example1-desk", 0.02, 600.0);
    run(3, "example1 desk scale", o3);
    run(4, "convergence trend", criterion_4());
    run(5, "gradient correctness", criterion_5());
    run(6, "oracle equivalence", criterion_6());
    run(7, "empirical bound shape", criterion_7());
    run(8, "conditions auditor", criterion_8());
    run(9, "statistical invariants", criterion_9(&ex1));
    run(10, "determinism", criterion_10());
    let failed: Vec<usize> = results.iter().filter(|r| r.1 == Some(false)).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
