//! Grid simulator and closed moment system.

use peakdyn::grid_sim::{support_leakage, GridSim, SimConfig, StepStats};
use peakdyn::kernels::KernelModel;
use peakdyn::moment_ode::{ClosureOptions, MomentModel, MomentRates, MomentState};
use peakdyn::stationary::{a_coeffs, IndexWindow};
use peakdyn::Kernel;
use proptest::prelude::*;

const DELTA0: f64 = 0.05;
const A: f64 = 0.1;

fn window() -> IndexWindow {
    IndexWindow::new(-6, 6).unwrap()
}

fn comb_masses(model: &Kernel) -> Vec<f64> {
    let w = window();
    let prof = a_coeffs(model, A, 0.0, w).unwrap();
    w.indices().map(|n| prof.ln_m_bar_at(n).exp()).collect()
}

fn len() -> usize {
    window().len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn grid_steps_conserve_mass_and_stay_in_the_intervals(
        scale in prop::collection::vec(0.5f64..1.5, len()),
        p in prop::collection::vec(-0.02f64..0.02, len()),
        blob in 0.0f64..0.02,
    ) {
        let model = Kernel::default_canonical();
        let sim = GridSim::new(model, SimConfig::new(DELTA0, window(), 16)).unwrap();
        let m: Vec<f64> = comb_masses(&model).iter().zip(&scale).map(|(a, b)| a * b).collect();
        let mut g = sim.init_from_peaks(&m, &p, blob).unwrap();
        let mass = g.xi_mass();
        let mut recv = Vec::new();
        let mut stats = StepStats::default();
        for _ in 0..20 {
            let dt = sim.stable_dt(&g);
            sim.step(&mut g, dt, &mut recv, &mut stats).unwrap();
            prop_assert!(g.masses.iter().all(|&v| v >= 0.0));
            prop_assert!(((g.xi_mass() - mass) / mass).abs() < 1e-11);
            prop_assert_eq!(support_leakage(&g), 0.0);
        }
    }

    #[test]
    fn coagulation_of_peaks_two_apart_superposes(n0 in -6i32..=3, ma in 0.1f64..10.0, mb in 0.1f64..10.0, off in -0.02f64..0.02) {
        let model = Kernel::default_canonical();
        let sim = GridSim::new(model, SimConfig::new(DELTA0, window(), 16)).unwrap();
        let w = window();
        let lone = |n: i32, mass: f64| {
            let mut m = vec![0.0; len()];
            m[w.idx(n)] = mass;
            m
        };
        let (a, b) = (lone(n0, ma), lone(n0 + 2, mb));
        let both: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ps = vec![off; len()];
        let run = |m: &[f64]| {
            let mut g = sim.init_from_peaks(m, &ps, 0.0).unwrap();
            sim.coagulation_substep(&mut g, 1e-3).unwrap();
            g.masses
        };
        let (ra, rb, rab) = (run(&a), run(&b), run(&both));
        let top = rab.iter().fold(0.0f64, |x, &v| x.max(v));
        for c in 0..rab.len() {
            prop_assert!((rab[c] - ra[c] - rb[c]).abs() <= 1e-14 * top, "cell {c}");
        }
    }

    #[test]
    fn fragments_descend_one_level_at_a_time(n0 in -3i32..=6, mass in 0.1f64..10.0) {
        let model = Kernel::default_canonical();
        let sim = GridSim::new(model, SimConfig::new(DELTA0, window(), 16)).unwrap();
        let w = window();
        let mut m = vec![0.0; len()];
        m[w.idx(n0)] = mass;
        let ratio = |dt: f64| {
            let mut g = sim.init_from_peaks(&m, &vec![0.0; len()], 0.0).unwrap();
            sim.fragmentation_substep(&mut g, dt);
            let s = |n: i32| g.peak(n).iter().sum::<f64>();
            s(n0 - 2) / s(n0 - 1)
        };
        // a cascade through n0 - 1 makes the ratio linear in dt; a direct
        // jump to n0 - 2 would leave it finite as dt -> 0
        let (r1, r2) = (ratio(1e-4), ratio(1e-5));
        prop_assert!(r1 > 0.0 && (r2 / r1 - 0.1).abs() < 0.02, "{r1:e} {r2:e}");
    }
}

fn random_state(model: &Kernel, scale: &[f64], p: &[f64], q: &[f64]) -> MomentState {
    let m = comb_masses(model).iter().zip(scale).map(|(a, b)| a * b).collect();
    MomentState::new(0.0, window().n_lo, m, p.to_vec(), q.to_vec()).unwrap()
}

fn shifted(s: &MomentState, c: f64) -> MomentState {
    MomentState::new(s.t, s.n_lo, s.m.clone(), s.p.iter().map(|p| p + c).collect(), s.q.clone()).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rate_gap(a: &MomentRates, b: &MomentRates) -> f64 {
    max_gap(&a.dm, &b.dm).max(max_gap(&a.dp, &b.dp)).max(max_gap(&a.dq, &b.dq))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flat_kernel_shift_is_a_symmetry_up_to_mass_scaling(
        scale in prop::collection::vec(0.5f64..1.5, len()),
        p in prop::collection::vec(-0.02f64..0.02, len()),
        q in prop::collection::vec(0.0f64..1e-3, len()),
        c in -0.02f64..0.02,
        gaussian in any::<bool>(),
    ) {
        // K carries 1/(xi + eta), so a common shift c scales coagulation by
        // 2^-c; (m, p, q) -> (2^c m, p + c, q) compensates exactly
        let flat = KernelModel::flat(1.0, 1.0, 0.25).unwrap();
        let closure = if gaussian { ClosureOptions::gaussian() } else { ClosureOptions::leading_order() };
        let mm = MomentModel::new(flat, DELTA0, closure).unwrap();
        let s = random_state(&Kernel::default_canonical(), &scale, &p, &q);
        let mut moved = shifted(&s, c);
        moved.m.iter_mut().for_each(|m| *m *= c.exp2());
        let r0 = mm.rhs(&s);
        let r1 = mm.rhs(&moved);
        let back: Vec<f64> = r1.dm.iter().map(|v| v / c.exp2()).collect();
        let size = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
        prop_assert!(max_gap(&r0.dm, &back) <= 1e-12 * size(&r0.dm));
        prop_assert!(max_gap(&r0.dp, &r1.dp) <= 1e-12 * size(&r0.dp));
        prop_assert!(max_gap(&r0.dq, &r1.dq) <= 1e-12 * size(&r0.dq));
    }

    #[test]
    fn canonical_rates_move_linearly_with_a_common_shift(
        scale in prop::collection::vec(0.5f64..1.5, len()),
        p in prop::collection::vec(-0.02f64..0.02, len()),
        q in prop::collection::vec(0.0f64..1e-3, len()),
        c in prop_oneof![-0.02f64..-0.005, 0.005f64..0.02],
    ) {
        let model = Kernel::default_canonical();
        let mm = MomentModel::new(model, DELTA0, ClosureOptions::leading_order()).unwrap();
        let s = random_state(&model, &scale, &p, &q);
        let r0 = mm.rhs(&s);
        let full = rate_gap(&r0, &mm.rhs(&shifted(&s, c)));
        let half = rate_gap(&r0, &mm.rhs(&shifted(&s, 0.5 * c)));
        // O(c): halving the shift roughly halves the change
        prop_assert!(half <= 0.6 * full + 1e-15, "half {half:e}, full {full:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn variances_stay_nonnegative(
        scale in prop::collection::vec(0.8f64..1.2, len()),
        p in prop::collection::vec(-0.02f64..0.02, len()),
        q in prop::collection::vec(0.0f64..1e-4, len()),
    ) {
        let model = Kernel::default_canonical();
        let mm = MomentModel::new(model, DELTA0, ClosureOptions::leading_order()).unwrap();
        let s = random_state(&model, &scale, &p, &q);
        let times: Vec<f64> = (1..=10).map(|i| 0.2 * i as f64).collect();
        let traj = mm.integrate(&s, &times, 1e-8).unwrap();
        for st in &traj.states {
            prop_assert!(st.q.iter().all(|&v| v >= 0.0));
        }
    }
}
