use peakdyn::kernels::KernelModel;
use peakdyn::Kernel;
use proptest::prelude::*;

fn model() -> Kernel {
    Kernel::default_canonical()
}

proptest! {
    #[test]
    fn kernel_is_symmetric(y in -30.0f64..30.0, d in -1.5f64..1.5) {
        let m = model();
        let (xi, eta) = (y.exp2(), (y + d).exp2());
        prop_assert_eq!(m.eval_kernel(xi, eta).unwrap(), m.eval_kernel(eta, xi).unwrap());
    }

    #[test]
    fn kernel_vanishes_beyond_epsilon0(y in -30.0f64..30.0, extra in 0.0f64..3.0, up in any::<bool>()) {
        let m = model();
        let d = if up { m.epsilon0 + extra } else { -(m.epsilon0 + extra) };
        prop_assert_eq!(m.coag_log(y, y + d), 0.0);
        prop_assert_eq!(m.eval_kernel(y.exp2(), (y + d).exp2()).unwrap(), 0.0);
    }

    #[test]
    fn kernel_growth_bound(y in -40.0f64..40.0, d in -0.999f64..0.999) {
        let m = model();
        let z = y + d;
        let lhs = (y.exp2() + z.exp2()) * m.coag(y.exp2(), z.exp2());
        let rhs = m.c_k() * (1.0 + (y + z).exp2());
        prop_assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
    }

    #[test]
    fn rates_positive_and_fragmentation_increasing(x in -40.0f64..40.0, step in 1e-6f64..2.0) {
        let m = model();
        prop_assert!(m.k(x.exp2()) > 0.0);
        prop_assert!(m.gamma(x.exp2()) > 0.0);
        if x >= 0.0 {
            prop_assert!(m.gamma((x + step).exp2()) > m.gamma(x.exp2()));
        }
    }

    #[test]
    fn admissible_exponents_construct(alpha in 0.05f64..0.9, beta in 1.05f64..1.95) {
        let m = KernelModel::<f64>::canonical(alpha, beta, 1.0, 1.0, 0.25).unwrap();
        prop_assert!(m.epsilon0 > 0.0 && m.epsilon0 < 1.0);
        prop_assert_eq!(m.alpha_bar, alpha + 1.0);
    }
}
