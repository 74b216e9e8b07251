//! Weak-coupling and monotonicity constants `L0`, `L1`, `c` and the
//! well-posedness condition `L0 < 1/e`, `c < 1`.
//!
//! Bracket grouping of `c` used here:
//!
//! ```text
//! A(l)  = [2k_b + 1 + s_x + (1 + l)(b_y + s_y) L1] T
//! B     = [2k_f + 1 + f_z] T
//! c(l)  = max(exp([2k_b + 1 + s_x + (b_y + s_y) L1] T), 1)
//!         * (1 + 1/l) * (b_y + s_y) T
//!         * ( g_x Gamma1(B, A(l)) + f_x T Gamma0(B) Gamma0(A(l)) )
//! c     = inf_{l > 0} c(l)
//! ```
//!
//! It gives `c = 0` whenever `b_y + s_y = 0` or `g_x = f_x = 0`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problems::ProblemConstants;

/// `(e^x - 1) / x`, continuous at 0.
pub fn gamma0(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

/// `sup_{0 < t < 1} t e^{t x}`.
pub fn theta_sup(x: f64) -> f64 {
    if x >= -1.0 {
        x.exp()
    } else {
        (-1.0 / x) * (-1.0f64).exp()
    }
}

/// `sup_{0 < t < 1} t e^{t x} Gamma0(y)`.
pub fn gamma1(x: f64, y: f64) -> f64 {
    theta_sup(x) * gamma0(y)
}

fn coupling_exponent(k: &ProblemConstants) -> f64 {
    let t = k.horizon;
    (k.b_y + k.sigma_y) * (k.g_x + k.f_x * t) * t + (2.0 * k.k_b + 2.0 * k.k_f + 2.0 + k.sigma_x + k.f_z) * t
}

/// `(L0, L1)`.
pub fn compute_l0_l1(k: &ProblemConstants) -> Result<(f64, f64)> {
    k.validate()?;
    let t = k.horizon;
    let e = coupling_exponent(k);
    let lead = k.g_x + k.f_x * t;
    let l0 = (k.b_y + k.sigma_y) * lead * t * e.exp();
    let l1 = lead * (e + 1.0).exp().max(1.0);
    Ok((l0, l1))
}

/// The bracketed function of `lambda` whose infimum is `c`.
pub fn c_objective(k: &ProblemConstants, l1: f64, lambda: f64) -> f64 {
    let t = k.horizon;
    let coupling = k.b_y + k.sigma_y;
    if coupling == 0.0 || (k.g_x == 0.0 && k.f_x == 0.0) {
        return 0.0;
    }
    let pre = ((2.0 * k.k_b + 1.0 + k.sigma_x + coupling * l1) * t).exp().max(1.0);
    let a = (2.0 * k.k_b + 1.0 + k.sigma_x + (1.0 + lambda) * coupling * l1) * t;
    let b = (2.0 * k.k_f + 1.0 + k.f_z) * t;
    let bracket = k.g_x * gamma1(b, a) + k.f_x * t * gamma0(b) * gamma0(a);
    pre * (1.0 + 1.0 / lambda) * coupling * t * bracket
}

pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e6;

/// Minimum of `c_objective` over `lambda` in `[1e-6, 1e6]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMinimum {
    pub c: f64,
    pub lambda1_star: f64,
    /// The minimizer sits on the search boundary, so the infimum may not be
    /// attained inside it.
    pub at_boundary: bool,
}

/// Log-grid bracketing followed by golden-section search in `ln lambda`.
pub fn compute_c(k: &ProblemConstants) -> Result<CMinimum> {
    let (_, l1) = compute_l0_l1(k)?;
    if c_objective(k, l1, 1.0) == 0.0 {
        return Ok(CMinimum {
            c: 0.0,
            lambda1_star: 1.0,
            at_boundary: false,
        });
    }
    let f = |u: f64| c_objective(k, l1, u.exp());
    let (lo, hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    let grid = 241usize;
    let step = (hi - lo) / (grid - 1) as f64;
    let mut best = 0usize;
    let mut best_v = f64::INFINITY;
    for i in 0..grid {
        let v = f(lo + i as f64 * step);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = lo + best.saturating_sub(1) as f64 * step;
    let mut b = lo + (best + 1).min(grid - 1) as f64 * step;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    // relative tolerance 1e-8 on lambda is an absolute 1e-8 on ln lambda
    while b - a > 1e-8 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let mut u = 0.5 * (a + b);
    let mut c = f(u);
    for (cand, v) in [(lo, f(lo)), (hi, f(hi)), (lo + best as f64 * step, best_v)] {
        if v < c {
            u = cand;
            c = v;
        }
    }
    let at_boundary = (u - lo).abs() < 1e-6 || (hi - u).abs() < 1e-6;
    if at_boundary {
        warn!("minimizer of c sits at lambda = {:.3e}; the infimum may not be attained", u.exp());
    }
    Ok(CMinimum {
        c,
        lambda1_star: u.exp(),
        at_boundary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub constants: ProblemConstants,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    pub c: f64,
    pub lambda1_star: f64,
    pub lambda_at_boundary: bool,
    pub holds: bool,
    /// `min(1/e - L0, 1 - c)`; positive exactly when the condition holds.
    pub margin: f64,
}

pub fn check_conditions(k: &ProblemConstants) -> Result<AuditReport> {
    let (l0, l1) = compute_l0_l1(k)?;
    let cm = compute_c(k)?;
    let inv_e = (-1.0f64).exp();
    Ok(AuditReport {
        constants: *k,
        l0,
        l1,
        c: cm.c,
        lambda1_star: cm.lambda1_star,
        lambda_at_boundary: cm.at_boundary,
        holds: l0 < inv_e && cm.c < 1.0,
        margin: (inv_e - l0).min(1.0 - cm.c),
    })
}

pub const AUDIT_CSV_HEADER: [&str; 20] = [
    "k_b", "k_f", "K", "b_y", "sigma_x", "sigma_y", "f_x", "f_z", "g_x", "b_0", "sigma_0", "f_0", "g_0", "T", "L0",
    "L1", "c", "lambda1_star", "holds", "margin",
];

impl AuditReport {
    pub fn csv_row(&self) -> Vec<String> {
        let k = &self.constants;
        let mut row: Vec<String> = [
            k.k_b, k.k_f, k.big_k, k.b_y, k.sigma_x, k.sigma_y, k.f_x, k.f_z, k.g_x, k.b_0, k.sigma_0, k.f_0, k.g_0,
            k.horizon, self.l0, self.l1, self.c, self.lambda1_star,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect();
        row.push(self.holds.to_string());
        row.push(self.margin.to_string());
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> ProblemConstants {
        ProblemConstants {
            k_b: -0.2,
            k_f: 0.1,
            big_k: 1.0,
            b_y: 0.01,
            sigma_x: 0.1,
            sigma_y: 0.02,
            f_x: 0.05,
            f_z: 0.1,
            g_x: 0.1,
            b_0: 0.0,
            sigma_0: 0.0,
            f_0: 0.0,
            g_0: 0.0,
            horizon: 0.5,
        }
    }

    #[test]
    fn gamma0_values() {
        assert_eq!(gamma0(0.0), 1.0);
        assert!((gamma0(1e-9) - 1.0).abs() < 1e-9);
        assert!((gamma0(1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        let x = 0.999e-6f64;
        assert!((gamma0(x) - x.exp_m1() / x).abs() < 1e-12);
    }

    #[test]
    fn gamma1_values() {
        assert_eq!(gamma1(0.0, 2.0), gamma0(2.0));
        assert!((gamma1(-2.0, 1.0) - gamma0(1.0) * (-1.0f64).exp() / 2.0).abs() < 1e-15);
        assert!((theta_sup(-1.0) - (-1.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn decoupled_limits() {
        let mut k = consts();
        k.b_y = 0.0;
        k.sigma_y = 0.0;
        let r = check_conditions(&k).unwrap();
        assert_eq!((r.l0, r.c), (0.0, 0.0));
        assert!(r.holds);
        let mut k = consts();
        k.g_x = 0.0;
        k.f_x = 0.0;
        let (l0, l1) = compute_l0_l1(&k).unwrap();
        assert_eq!((l0, l1), (0.0, 0.0));
        assert_eq!(compute_c(&k).unwrap().c, 0.0);
    }

    #[test]
    fn strong_coupling_fails() {
        let k = ProblemConstants {
            k_b: 0.0,
            k_f: 0.0,
            big_k: 1.0,
            b_y: 1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
            f_x: 1.0,
            f_z: 1.0,
            g_x: 1.0,
            b_0: 0.0,
            sigma_0: 0.0,
            f_0: 0.0,
            g_0: 0.0,
            horizon: 1.0,
        };
        let r = check_conditions(&k).unwrap();
        assert!(!r.holds);
        assert!(r.l0 > 100.0 && r.c > 100.0, "{r:?}");
        assert!(r.margin < 0.0);
    }

    #[test]
    fn small_time_holds() {
        let mut k = consts();
        k.horizon = 1e-6;
        let r = check_conditions(&k).unwrap();
        assert!(r.holds && r.l0 < 1e-6 && r.c < 1e-3, "{r:?}");
    }

    #[test]
    fn invalid_constants_rejected() {
        let mut k = consts();
        k.g_x = -1.0;
        assert!(check_conditions(&k).is_err());
    }
}
