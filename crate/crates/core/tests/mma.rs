use pato_core::mma::{MmaParams, MmaState};
use proptest::prelude::*;

/// Minimizer of `p/(U-x) + q/(x-L)` on `[a, b]`.
fn separable_argmin(p: f64, q: f64, low: f64, upp: f64, a: f64, b: f64) -> f64 {
    let (sp, sq) = (p.sqrt(), q.sqrt());
    ((low * sp + upp * sq) / (sp + sq)).clamp(a, b)
}

/// Solves the single-constraint subproblem through its one-dimensional dual:
/// for a multiplier `lam` every variable has a closed-form minimizer, and the
/// constraint value is monotone in `lam`.
fn dual_oracle(s: &pato_core::mma::Subproblem) -> Vec<f64> {
    let n = s.alfa.len();
    let x_of = |lam: f64| -> Vec<f64> {
        (0..n)
            .map(|j| {
                separable_argmin(
                    s.p0[j] + lam * s.pm[0][j],
                    s.q0[j] + lam * s.qm[0][j],
                    s.low[j],
                    s.upp[j],
                    s.alfa[j],
                    s.beta[j],
                )
            })
            .collect()
    };
    let g = |x: &[f64]| -> f64 {
        (0..n).map(|j| s.pm[0][j] / (s.upp[j] - x[j]) + s.qm[0][j] / (x[j] - s.low[j])).sum::<f64>() - s.b[0]
    };
    if g(&x_of(0.0)) <= 0.0 {
        return x_of(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while g(&x_of(hi)) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(&x_of(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    x_of(hi)
}

#[test]
fn sum_of_squares_converges_to_zero() {
    let n = 6;
    let mut s = MmaState::unit(n, MmaParams::default()).unwrap();
    let mut x = vec![0.5; n];
    let mut steps = 0;
    while x.iter().any(|v| *v > 1e-4) {
        assert!(steps < 50, "not converged: {x:?}");
        let df: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        x = s.update(&x, &df, &[-1.0], &[vec![0.0; n]]).unwrap();
        steps += 1;
    }
}

#[test]
fn descending_linear_objective_hits_upper_bound() {
    let mut s = MmaState::unit(3, MmaParams::default()).unwrap();
    let x = vec![0.5, 0.9, 0.95];
    let next = s.update(&x, &[-1.0, -2.0, -0.1], &[-1.0], &[vec![0.0; 3]]).unwrap();
    // Move-limited box: x + 0.2 capped at 1.
    for (a, b) in next.iter().zip([0.7, 1.0, 1.0]) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn uniform_volume_problem_stays_uniform() {
    let n = 8;
    let mut s = MmaState::unit(n, MmaParams::default()).unwrap();
    let mut x = vec![0.4; n];
    for _ in 0..5 {
        let vol: f64 = x.iter().sum::<f64>() / n as f64;
        let dg = vec![1.0 / (0.3 * n as f64); n];
        x = s.update(&x, &vec![-1.0; n], &[vol / 0.3 - 1.0], &[dg]).unwrap();
        assert!(x.iter().all(|v| (v - x[0]).abs() < 1e-12));
    }
    assert!((x[0] - 0.3).abs() < 1e-6);
}

#[test]
fn iterates_respect_unit_box() {
    let n = 5;
    let mut s = MmaState::unit(n, MmaParams::default()).unwrap();
    let mut x = vec![0.5; n];
    for it in 0..30 {
        let df: Vec<f64> = (0..n).map(|j| if (j + it) % 2 == 0 { 3.0 } else { -3.0 }).collect();
        let vol: f64 = x.iter().sum::<f64>() / n as f64;
        x = s.update(&x, &df, &[vol / 0.5 - 1.0], &[vec![1.0 / (0.5 * n as f64); n]]).unwrap();
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn subproblem_matches_dual_bisection(
        x in proptest::collection::vec(0.05f64..0.95, 5),
        df in proptest::collection::vec(-2.0f64..2.0, 5),
        dg in proptest::collection::vec(0.01f64..1.0, 5),
        target in 0.2f64..0.8,
    ) {
        let mut s = MmaState::unit(5, MmaParams::default()).unwrap();
        let vol = x.iter().sum::<f64>() / 5.0;
        let g = vol - target;
        let Ok(sub) = s.subproblem(&x, &df, &[g], &[dg.clone()]) else { return Ok(()) };
        let ip = sub.solve(1e-13);
        let oracle = dual_oracle(&sub);
        for (a, b) in ip.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", ip, oracle);
        }
    }
}
