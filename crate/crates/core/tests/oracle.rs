use deep_bsde::networks::InputLayout;
use deep_bsde::oracle::{lsmc_implicit_solve, oracle_cross_check, regress_conditional, OracleConfig, RegressionBasis};
use deep_bsde::problems::{builtin_problem, FbsdeProblem, ProblemParams};
use deep_bsde::scheme::{SolverPolicy, TimeGrid};
use deep_bsde::seeded_rng;
use rand::Rng;

fn p64(name: &str) -> FbsdeProblem<f64> {
    builtin_problem(name, 1, &ProblemParams::default()).unwrap()
}

fn cfg(degree: usize, n_paths: usize) -> OracleConfig {
    OracleConfig {
        degree,
        n_paths,
        ..OracleConfig::default()
    }
}

#[test]
fn regression_recovers_a_two_dimensional_quadratic() {
    let mut rng = seeded_rng(4);
    let n = 2000;
    let pts: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let basis = RegressionBasis::new(2, 2).unwrap();
    let a = basis.design(&pts, n);
    let target: Vec<f64> = (0..n)
        .map(|r| {
            let (u, v) = (pts[2 * r], pts[2 * r + 1]);
            1.0 - u + 0.25 * v + 3.0 * u * v - v * v
        })
        .collect();
    let fit = regress_conditional(&a, &target).unwrap();
    let pred = fit.predict(&a);
    for (p, t) in pred.iter().zip(&target) {
        assert!((p - t).abs() < 1e-10);
    }
    assert_eq!(basis.n_features(), 6);
}

#[test]
fn linear1d_oracle_hits_the_closed_form() {
    let p = p64("linear1d");
    let g = TimeGrid::for_problem(&p, 10).unwrap();
    let sol = lsmc_implicit_solve(&p, &g, &cfg(1, 100_000), &mut seeded_rng(1)).unwrap();
    assert!((sol.y0 - 1.0).abs() <= 3.0 * sol.y0_std_error, "{} +- {}", sol.y0, sol.y0_std_error);
    assert_eq!(sol.n_paths, 100_000);
    assert_eq!(sol.y_functionals.len(), 10);
    assert!(sol.sweeps <= 2, "decoupled problem took {} sweeps", sol.sweeps);
    assert_eq!(sol.max_contraction, 0.0);
}

#[test]
fn decoupled_martingale_has_unit_z() {
    // dX = dW, g(x) = x: Z is identically one
    let p = p64("linear1d");
    let g = TimeGrid::for_problem(&p, 10).unwrap();
    let sol = lsmc_implicit_solve(&p, &g, &cfg(1, 400_000), &mut seeded_rng(2)).unwrap();
    for (i, z) in sol.z_mean.iter().enumerate() {
        assert!((z[0] - 1.0).abs() <= 0.02, "step {i}: {}", z[0]);
    }
}

#[test]
fn example2_in_one_dimension() {
    let p = p64("example2");
    let exact = (-0.1f64).exp() * 0.1;
    assert!((p.reference_y0().unwrap() - exact).abs() < 1e-15);
    let mut errs = Vec::new();
    for n in [10, 20] {
        let g = TimeGrid::for_problem(&p, n).unwrap();
        let sol = lsmc_implicit_solve(&p, &g, &cfg(2, 100_000), &mut seeded_rng(3)).unwrap();
        let err = (sol.y0 - exact).abs();
        assert!(err / exact <= 0.01, "N = {n}: {} vs {exact}", sol.y0);
        assert!(sol.sweep_history.last().copied().unwrap_or(0.0) <= 1e-6);
        // the implicit step y = E + h f(y) is a contraction with modulus r h
        assert!(sol.max_contraction <= 0.1 * g.h * (1.0 + 1e-6), "{}", sol.max_contraction);
        errs.push((err, sol.y0_std_error));
    }
    let ((e10, s10), (e20, s20)) = (errs[0], errs[1]);
    assert!(e20 <= e10 + 3.0 * (s10 * s10 + s20 * s20).sqrt(), "{errs:?}");
}

#[test]
fn error_shrinks_like_inverse_root_paths() {
    let p = p64("linear1d");
    let g = TimeGrid::for_problem(&p, 4).unwrap();
    let rms = |n: usize| {
        let sq: f64 = (0..8u64)
            .map(|s| {
                let sol = lsmc_implicit_solve(&p, &g, &cfg(1, n), &mut seeded_rng(100 + s)).unwrap();
                (sol.y0 - 1.0).powi(2)
            })
            .sum();
        (sq / 8.0).sqrt()
    };
    let e: Vec<f64> = [1_000, 10_000, 100_000].iter().map(|&n| rms(n)).collect();
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        let expect = 10f64.sqrt();
        assert!(ratio >= expect / 2.0 && ratio <= expect * 2.0, "{e:?}");
    }
}

#[test]
fn cross_check_against_known_policies() {
    let p = p64("linear1d");
    let g = TimeGrid::for_problem(&p, 10).unwrap();
    let sol = lsmc_implicit_solve(&p, &g, &cfg(1, 100_000), &mut seeded_rng(5)).unwrap();
    let exact = SolverPolicy::exact_linear1d(&p, &g).unwrap();
    let c = oracle_cross_check(&p, &g, &exact, &sol).unwrap();
    assert!(c.discrepancy <= 3.0 * c.oracle_std_error, "{c:?}");
    assert_eq!(c.deep_rel_error, Some(0.0));
    let off = SolverPolicy::constant(&p, &g, InputLayout::Xy, 2.0, &[1.0]).unwrap();
    let c = oracle_cross_check(&p, &g, &off, &sol).unwrap();
    assert!((c.discrepancy - 1.0).abs() <= 3.0 * c.oracle_std_error, "{c:?}");
    assert!((c.deep_rel_error.unwrap() - 1.0).abs() < 1e-15);
    let coarse = TimeGrid::for_problem(&p, 5).unwrap();
    let other = SolverPolicy::exact_linear1d(&p, &coarse).unwrap();
    assert!(oracle_cross_check(&p, &coarse, &other, &sol).is_err());
}

#[test]
fn coefficient_csv_lists_every_step() {
    let p = p64("example2");
    let g = TimeGrid::for_problem(&p, 3).unwrap();
    let sol = lsmc_implicit_solve(&p, &g, &cfg(2, 5_000), &mut seeded_rng(6)).unwrap();
    let mut buf = Vec::new();
    sol.write_coefficients_csv(&mut buf, &g).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i,t,quantity,coefficients");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1].starts_with("0,0,y,"));
}

#[test]
fn oracle_rejects_high_dimensions() {
    let p = builtin_problem::<f64>("example2", 4, &ProblemParams::default()).unwrap();
    let g = TimeGrid::for_problem(&p, 3).unwrap();
    assert!(lsmc_implicit_solve(&p, &g, &cfg(2, 1_000), &mut seeded_rng(7)).is_err());
}
