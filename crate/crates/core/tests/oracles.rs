//! Block formulas against dense tensor-product computations.

use nalgebra::{Complex, DMatrix};
use proptest::prelude::*;

use qtraj_core::fluorescence::{fluorescence_superops, laser_state, FluorescenceModel, LaserProfile};
use qtraj_core::model::{measurement_superops, OperatorFamily};
use qtraj_core::qcore::{BlochVector, Matrix2, QubitState, C64};
use qtraj_core::{ControlBounds, ModelSpec, ObservableSpec};

type Cm = DMatrix<Complex<f64>>;

fn dense(m: &Matrix2) -> Cm {
    Cm::from_row_slice(2, 2, &m.entries())
}

fn from_dense(m: &Cm) -> Matrix2 {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn assemble(blocks: &[Vec<Matrix2>]) -> Cm {
    let d = blocks.len();
    let mut u = Cm::zeros(2 * d, 2 * d);
    for (a, row) in blocks.iter().enumerate() {
        for (b, blk) in row.iter().enumerate() {
            u.view_mut((2 * a, 2 * b), (2, 2)).copy_from(&dense(blk));
        }
    }
    u
}

fn trace_out_env(m: &Cm) -> Matrix2 {
    let mut out = Cm::zeros(2, 2);
    for e in 0..m.nrows() / 2 {
        out += m.view((2 * e, 2 * e), (2, 2));
    }
    from_dense(&out)
}

fn defect(u: &Cm) -> f64 {
    (u.adjoint() * u - Cm::identity(u.nrows(), u.nrows())).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn matrix() -> impl Strategy<Value = Matrix2> {
    prop::array::uniform8(-1.0f64..1.0)
        .prop_map(|e| Matrix2::new(C64::new(e[0], e[1]), C64::new(e[2], e[3]), C64::new(e[4], e[5]), C64::new(e[6], e[7])))
}

fn state() -> impl Strategy<Value = QubitState> {
    (0.0f64..1.0, 0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU).prop_map(|(r, th, ph)| {
        QubitState::from_bloch(BlochVector::new(r * th.cos(), r * th.sin() * ph.cos(), r * th.sin() * ph.sin()))
            .unwrap()
    })
}

fn projector() -> impl Strategy<Value = ObservableSpec> {
    (0.05f64..1.5, 0.0f64..std::f64::consts::TAU).prop_map(|(th, ph)| {
        let (a, b) = (C64::new(th.cos(), 0.0), C64::from_polar(th.sin(), ph));
        let p0 = Matrix2::new(a * a.conj(), a * b.conj(), b * a.conj(), b * b.conj());
        ObservableSpec::from_projector(p0, 0.0, 1.0).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measurement_maps_equal_partial_trace(
        h0 in matrix(), c0 in matrix(), obs in projector(), rho in state(), log_h in -4.0f64..-0.5,
    ) {
        let model = ModelSpec::new(
            OperatorFamily::constant(h0.hermitian_part()),
            OperatorFamily::constant(c0),
            ControlBounds::default(),
        );
        let blocks = model.build_unitary(10f64.powf(log_h), 0.0, 0.0).unwrap();
        let u = assemble(&[vec![blocks.l00, blocks.l01], vec![blocks.l10, blocks.l11]]);
        prop_assert!(defect(&u) < 1e-12);
        let joint = &u * dense(&Matrix2::diag(1.0, 0.0)).kronecker(&dense(rho.matrix())) * u.adjoint();
        let ops = measurement_superops(&blocks, &obs);
        for i in 0..2 {
            let p = dense(obs.projector(i)).kronecker(&Cm::identity(2, 2));
            let oracle = trace_out_env(&(&p * &joint * &p));
            prop_assert!((ops.apply(i, rho.matrix()) - oracle).max_abs() < 1e-12);
        }
    }

    #[test]
    fn fluorescence_maps_equal_partial_trace(
        h0 in matrix(), l1 in matrix(), l2 in matrix(), rho in state(),
        n in 2usize..5000, fre in -3.0f64..3.0, fim in -3.0f64..3.0,
    ) {
        let model = FluorescenceModel::new(h0.hermitian_part(), l1, l2).unwrap();
        let f = C64::new(fre, fim);
        let sup = fluorescence_superops(0, n, &LaserProfile::Constant(f), &model).unwrap();
        let blocks = model.unitary_blocks(1.0 / n as f64).unwrap();
        let u = assemble(&blocks.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        prop_assert!(defect(&u) < 1e-12);
        let laser = dense(laser_state((f / (n as f64).sqrt()).conj()).matrix());
        let env = dense(&Matrix2::diag(1.0, 0.0)).kronecker(&laser);
        let joint = &u * env.kronecker(&dense(rho.matrix())) * u.adjoint();
        let (l0, l1) = sup.both(rho.matrix());
        for (i, got) in [l0, l1].iter().enumerate() {
            let p = dense(&if i == 0 { Matrix2::diag(1.0, 0.0) } else { Matrix2::diag(0.0, 1.0) })
                .kronecker(&Cm::identity(4, 4));
            let oracle = trace_out_env(&(&p * &joint * &p));
            prop_assert!((*got - oracle).max_abs() < 1e-12);
        }
        prop_assert!((l0.trace() + l1.trace() - 1.0).norm() < 1e-12);
    }
}

/// Series of `exp` to high order as an independent check of the first block column.
fn expm(a: &Cm) -> Cm {
    let mut out = Cm::identity(a.nrows(), a.nrows());
    let mut term = out.clone();
    for k in 1..30 {
        term = &term * a / Complex::new(k as f64, 0.0);
        out += &term;
    }
    out
}

#[test]
fn decay_coupling_matches_exponential_to_leading_order() {
    // H = 0, C = σ⁻: exp of √h(σ⁺⊗σ⁻ − σ⁻⊗σ⁺) (probe ⊗ atom) has L₁₀ = √h σ⁻ + O(h^{3/2}).
    let h: f64 = 1e-4;
    let sm = dense(&Matrix2::sigma_minus());
    let sp = sm.adjoint();
    let gen = (sp.kronecker(&sm) - sm.kronecker(&sp)) * Complex::new(h.sqrt(), 0.0);
    let u = expm(&gen);
    let model = ModelSpec::constant(Matrix2::zero(), Matrix2::sigma_minus());
    let b = model.build_unitary(h, 0.0, 0.0).unwrap();
    let l10 = from_dense(&u.view((2, 0), (2, 2)).into_owned());
    assert!((b.l10 - l10).max_abs() < 1e-5);
    assert!((b.l10 - Matrix2::sigma_minus().scale(h.sqrt())).op_norm() <= 1e-5);
}
