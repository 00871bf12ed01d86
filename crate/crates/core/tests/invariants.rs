//! Property tests over random models, states and controls.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qtraj_core::discrete::measure_step;
use qtraj_core::model::OperatorFamily;
use qtraj_core::optimal::{exact_tree_value, CostJson, CostSpec, RunningCostJson, TerminalCostJson};
use qtraj_core::qcore::{psd_repair, BlochVector, Matrix2, QubitState, C64};
use qtraj_core::{ControlBounds, ModelSpec, ObservableSpec};

fn matrix() -> impl Strategy<Value = Matrix2> {
    prop::array::uniform8(-1.0f64..1.0)
        .prop_map(|e| Matrix2::new(C64::new(e[0], e[1]), C64::new(e[2], e[3]), C64::new(e[4], e[5]), C64::new(e[6], e[7])))
}

fn state() -> impl Strategy<Value = QubitState> {
    (0.0f64..=1.0, 0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU).prop_map(|(r, th, ph)| {
        QubitState::from_bloch(BlochVector::new(r * th.cos(), r * th.sin() * ph.cos(), r * th.sin() * ph.sin()))
            .unwrap()
    })
}

/// `H = H₀ + u H₁`, `C = C₀ + u C₁`.
fn model() -> impl Strategy<Value = ModelSpec> {
    (matrix(), matrix(), matrix(), matrix()).prop_map(|(h0, h1, c0, c1)| {
        ModelSpec::new(
            OperatorFamily::linear(h0.hermitian_part(), h1.hermitian_part()),
            OperatorFamily::linear(c0, c1),
            ControlBounds::default(),
        )
    })
}

fn observable() -> impl Strategy<Value = ObservableSpec> {
    prop_oneof![Just(ObservableSpec::diagonal()), (0.01f64..1.56).prop_map(|a| ObservableSpec::nondiagonal(a).unwrap())]
}

fn is_state(m: &Matrix2, tol: f64) -> bool {
    let (lo, _) = m.hermitian_eigenvalues();
    (m.trace().re - 1.0).abs() <= tol && m.trace().im.abs() <= tol && m.hermiticity_defect() <= tol && lo >= -tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generators_are_traceless(m in model(), rho in state(), t in 0.0f64..3.0, u in -1.0f64..1.0) {
        let r = rho.matrix();
        for op in [m.superop_l(t, u, r), m.superop_theta(t, u, r), m.superop_r(t, u, r), m.superop_q(t, u, r)] {
            prop_assert!(op.trace().norm() < 1e-13);
            prop_assert!(op.hermiticity_defect() < 1e-13);
        }
    }

    #[test]
    fn jump_lands_on_a_state(m in model(), rho in state(), u in -1.0f64..1.0) {
        let j = m.superop_j(0.0, u, rho.matrix());
        prop_assume!(j.trace().re > 1e-6);
        let after = *rho.matrix() + m.superop_q(0.0, u, rho.matrix());
        prop_assert!(is_state(&after, 1e-10));
    }

    #[test]
    fn branch_traces_sum_to_one(m in model(), obs in observable(), rho in state(), n in 1usize..100_000, u in -1.0f64..1.0) {
        let ops = qtraj_core::model::measurement_superops(&m.build_unitary(1.0 / n as f64, 0.0, u).unwrap(), &obs);
        let (l0, l1) = ops.both(rho.matrix());
        prop_assert!((l0.trace() + l1.trace() - 1.0).norm() < 1e-12);
        prop_assert!(l0.hermitian_eigenvalues().0 >= -1e-12);
        prop_assert!(l1.hermitian_eigenvalues().0 >= -1e-12);
    }

    #[test]
    fn measurement_keeps_states_valid(
        m in model(), obs in observable(), rho in state(), n in 1usize..10_000, u in -1.0f64..1.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = rho;
        for k in 0..20 {
            let (next, o) = measure_step(&r, k as f64 / n as f64, u, 1.0 / n as f64, &m, &obs, &mut rng).unwrap();
            prop_assert!(is_state(next.matrix(), 1e-9));
            prop_assert!(o.prob > 0.0 && (0.0..=1.0).contains(&o.q));
            r = next;
        }
    }

    #[test]
    fn bloch_map_round_trips(rho in state()) {
        let back = QubitState::from_bloch(rho.to_bloch()).unwrap();
        prop_assert!((*back.matrix() - *rho.matrix()).max_abs() < 1e-14);
        prop_assert!(rho.to_bloch().norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn repair_returns_a_nearby_state(rho in state(), e in prop::array::uniform4(-1e-6f64..1e-6)) {
        let noisy = *rho.matrix() + Matrix2::new(C64::new(e[0], 0.0), C64::new(e[1], e[2]), C64::new(e[1], -e[2]), C64::new(e[3], 0.0));
        let fixed = psd_repair(&noisy, 1e-3).unwrap();
        prop_assert!(is_state(fixed.matrix(), 1e-12));
        prop_assert!((*fixed.matrix() - *rho.matrix()).max_abs() < 1e-5);
    }
}

fn cost() -> CostSpec {
    CostJson {
        running: RunningCostJson::QuadraticControl { weight: 0.01 },
        terminal: TerminalCostJson::OneMinusBloch { target: [1.0, 0.0, 0.0] },
    }
    .to_cost()
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A constant added to the running cost shifts the value by `N·shift` and
    /// leaves the optimal first control unchanged.
    #[test]
    fn dp_is_shift_equivariant(rho in state(), shift in -2.0f64..2.0, horizon in 1usize..4) {
        let desk = ModelSpec::desk();
        let obs = ObservableSpec::diagonal();
        let controls = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let base = exact_tree_value(&desk, &obs, &cost(), horizon, 4, &controls, &rho).unwrap();
        let moved = exact_tree_value(&desk, &obs, &cost().shifted(shift), horizon, 4, &controls, &rho).unwrap();
        prop_assert!((moved.value - base.value - horizon as f64 * shift).abs() < 1e-12);
        prop_assert_eq!(moved.first_control, base.first_control);
    }

    /// Adding a control can only lower the optimal value.
    #[test]
    fn dp_is_monotone_in_the_control_set(rho in state(), extra in -1.0f64..1.0, horizon in 1usize..4) {
        let desk = ModelSpec::desk();
        let obs = ObservableSpec::nondiagonal(0.7).unwrap();
        let small = exact_tree_value(&desk, &obs, &cost(), horizon, 4, &[-1.0, 1.0], &rho).unwrap();
        let large = exact_tree_value(&desk, &obs, &cost(), horizon, 4, &[-1.0, extra, 1.0], &rho).unwrap();
        prop_assert!(large.value <= small.value + 1e-12);
    }
}
