use proptest::prelude::*;
use qmarket::fock::{build_layout, Basis};
use qmarket::model::{
    interior_projection, portfolio_commutator_closed_form, raised_modes, HamiltonianTerms, ModelOperators,
    ModelParams, ReservoirGrid,
};

fn arb_params() -> impl Strategy<Value = ModelParams> {
    (
        prop::array::uniform2(-1.0..1.0f64),
        prop::array::uniform2(-1.0..1.0f64),
        prop::array::uniform2(-1.0..1.0f64),
        -1.0..1.0f64,
        -1.0..1.0f64,
        prop::array::uniform2(0.0..1.0f64),
        prop::array::uniform2(0.5..2.0f64),
    )
        .prop_map(|(s, c, o, li, l, g, r)| ModelParams {
            omega_s: s,
            omega_c: c,
            omega: o,
            lambda_inf: li,
            lambda: l,
            gamma: g,
            omega_r: r,
            reservoir_grid: ReservoirGrid::midpoint(1.5, 2),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hamiltonian_is_hermitian_and_conserves_m(p in arb_params()) {
        let layout = build_layout([1, 1, 1, 1, 2, 1], 2, 1).unwrap();
        let ops = ModelOperators::on_basis(&Basis::full(&layout).unwrap(), &p).unwrap();
        prop_assert!(ops.h.is_hermitian(1e-14));
        for j in 0..2 {
            prop_assert!(ops.h.commutator(&ops.m[j]).unwrap().max_abs() <= 1e-13);
        }
    }

    #[test]
    fn portfolio_commutator_on_interior(p in arb_params()) {
        let layout = build_layout([2, 1, 1, 2, 1, 1], 2, 1).unwrap();
        let basis = Basis::full(&layout).unwrap();
        let ops = ModelOperators::on_basis(&basis, &p).unwrap();
        let modes = raised_modes(&HamiltonianTerms::new(&layout, &p).unwrap().total());
        for j in 0..2 {
            let diff = ops.h.commutator(&ops.pi[j]).unwrap()
                .sub(&portfolio_commutator_closed_form(&basis, &p, j).unwrap()).unwrap();
            prop_assert!(interior_projection(&basis, &diff, &modes).max_abs() <= 1e-12);
        }
    }
}
