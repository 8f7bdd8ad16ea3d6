use peakdyn::stationary::{m_bar, mass_of, solve_a_for_mass, IndexWindow, ShiftSequence};
use peakdyn::Kernel;
use proptest::prelude::*;

const DELTA0: f64 = 0.05;

fn model() -> Kernel {
    Kernel::default_canonical()
}

fn window() -> IndexWindow {
    IndexWindow::new(-12, 9).unwrap()
}

fn shifts() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-DELTA0..DELTA0, window().len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn recurrences_hold(a in 0.05f64..5.0, p in shifts(), p_inf in -DELTA0..DELTA0) {
        let m = model();
        let s = ShiftSequence::new(window(), p, p_inf, 0.0).unwrap();
        let prof = m_bar(&m, a, &s).unwrap();
        prop_assert!(prof.recurrence_residual() < 1e-10);
        prop_assert!(prof.mu_recurrence_residual(&m) < 1e-10);
    }

    #[test]
    fn window_growth_leaves_interior_unchanged(a in 0.05f64..5.0, p in shifts(), p_inf in -DELTA0..DELTA0, lo_ext in -DELTA0..DELTA0) {
        let m = model();
        let w = window();
        let small = m_bar(&m, a, &ShiftSequence::new(w, p.clone(), p_inf, lo_ext).unwrap()).unwrap();
        // the grown window repeats the extension values, so the sequence is the same
        let big_w = IndexWindow::new(w.n_lo - 5, w.n_hi + 5).unwrap();
        let mut big_p = vec![lo_ext; 5];
        big_p.extend(&p);
        big_p.extend([p_inf; 5]);
        let big = m_bar(&m, a, &ShiftSequence::new(big_w, big_p, p_inf, lo_ext).unwrap()).unwrap();
        for n in w.indices() {
            let d = (small.ln_m_bar_at(n) - big.ln_m_bar_at(n)).exp_m1().abs();
            prop_assert!(d < 1e-12, "n = {n}: {d:e}");
        }
    }

    #[test]
    fn log_derivative_in_a_is_minus_two_to_the_n(a in 0.05f64..5.0, p in shifts()) {
        let m = model();
        let s = ShiftSequence::new(window(), p, 0.0, 0.0).unwrap();
        let prof = m_bar(&m, a, &s).unwrap();
        let h = 1e-4 * a;
        let up = m_bar(&m, a + h, &s).unwrap();
        let dn = m_bar(&m, a - h, &s).unwrap();
        for n in -10..=6 {
            // ln m_bar is affine in A, so the central difference is exact up to rounding
            let fd = (up.ln_m_bar_at(n) - dn.ln_m_bar_at(n)) / (2.0 * h);
            let exact = prof.d_mbar_da(n) / prof.m_bar(n);
            prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "n = {n}: {fd} vs {exact}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn mass_round_trip(ln_mass in -3.0f64..4.0, rho in -DELTA0..DELTA0) {
        let m = model();
        let mass = ln_mass.exp();
        let a = solve_a_for_mass(&m, mass, rho).unwrap();
        let back = mass_of(&m, a, rho).unwrap();
        prop_assert!((back - mass).abs() <= 1e-10 * mass);
    }

    #[test]
    fn mass_decreases_in_a(a in 0.01f64..10.0, rho in -DELTA0..DELTA0) {
        let m = model();
        prop_assert!(mass_of(&m, 1.1 * a, rho).unwrap() < mass_of(&m, a, rho).unwrap());
    }
}
