//! Closed-form perturbative quantities against independent test-side
//! computations: direct quadrature of the defining integrals, exhaustive
//! integer checks, and operator-level expectation values.

use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qmarket::fock::build_layout;
use qmarket::model::{InitialOccupations, ModelParams, ReservoirGrid};
use qmarket::perturb::{
    build_perturbative_operators, delta_pi, delta_pi_infinity, eval_kernels, hint_brackets, mean_occupations,
    second_order_coefficients, PerturbInputs, SIGMA1, SIGMA2, THETA1, THETA2,
};

fn params(lambda: f64) -> ModelParams {
    ModelParams {
        omega_s: [0.5, 0.3],
        omega_c: [0.2, 0.45],
        omega: [0.4, 0.35],
        lambda_inf: lambda,
        lambda,
        gamma: [0.3, 0.25],
        omega_r: [1.0, 1.0],
        reservoir_grid: ReservoirGrid::default(),
    }
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson<F: Fn(f64) -> C64>(f: F, a: f64, b: f64, n: usize) -> C64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += f(a + h * k as f64) * w;
    }
    acc * (h / 3.0)
}

#[test]
fn kernels_match_direct_quadrature() {
    let p = params(0.1);
    let w = p.omega_s[0] - p.omega_s[1] - p.omega_c[0] + p.omega_c[1];
    let kappa = [0, 1].map(|j| std::f64::consts::PI * p.gamma[j] * p.gamma[j] / p.omega_r[j]);
    let eta1 = |t: f64| (C64::new(0.0, w * t).exp() - 1.0) / w;
    for k in 0..=40 {
        let t = 0.5 * k as f64;
        let kern = eval_kernels(&p, t).unwrap();
        let n = 4000;
        let e1 = simpson(|s| C64::new(0.0, 1.0) * C64::new(0.0, w * s).exp(), 0.0, t, n);
        let e2 = simpson(|s| eta1(s) * C64::new(0.0, -w * s).exp(), 0.0, t, n);
        assert!((kern.eta1 - e1).norm() < 1e-10, "eta1 at t = {t}");
        assert!((kern.eta2 - e2).norm() < 1e-10, "eta2 at t = {t}");
        for j in 0..2 {
            // ∫ e^{-(iΩ+κ)s} e^{iω s} ds
            let f = |om: f64| move |s: f64| C64::new(-kappa[j] * s, (om - p.omega[j]) * s).exp();
            let es = simpson(f(p.omega_s[j]), 0.0, t, n);
            let ec = simpson(f(p.omega_c[j]), 0.0, t, n);
            assert!((kern.eta_s[j] - es).norm() < 1e-10, "eta_s[{j}] at t = {t}");
            assert!((kern.eta_c[j] - ec).norm() < 1e-10, "eta_c[{j}] at t = {t}");
            let decay = C64::new(-kappa[j] * t, -p.omega[j] * t).exp();
            assert!((kern.ik_coeff[j] - decay).norm() < 1e-14);
        }
    }
}

#[test]
fn cancellation_identity_is_exhaustively_exact() {
    for n1 in 0..=6 {
        for n2 in 0..=6 {
            for k1 in 0..=6 {
                for k2 in 0..=6 {
                    let b = hint_brackets(n1, n2, k1, k2);
                    assert_eq!(b[0] + b[2], 0, "trader 1 at {:?}", (n1, n2, k1, k2));
                    assert_eq!(b[1] + b[3], 0, "trader 2 at {:?}", (n1, n2, k1, k2));
                }
            }
        }
    }
}

/// The `H_I` brackets come from the `λ²` term of `⟨σ^(2)†σ^(2)⟩`, so the
/// operator expansion on a number state must reproduce the closed forms.
#[test]
fn operator_expansion_reproduces_closed_form_second_order() {
    let layout = build_layout([4; 6], 0, 1).unwrap();
    for init in [
        InitialOccupations { n: [1, 0], k: [1, 1], i: [1, 1] },
        InitialOccupations { n: [2, 1], k: [0, 2], i: [2, 0] },
        InitialOccupations { n: [1, 2], k: [2, 1], i: [0, 3] },
    ] {
        let inputs = PerturbInputs::new(params(0.1), init).unwrap();
        let phi = layout.occupation_vector(&init.mode_list()).unwrap();
        for k in 0..=10 {
            let t = 1.3 * k as f64;
            let bundle = build_perturbative_operators(&layout, &inputs, t).unwrap();
            let c = bundle.expectation_coefficients(&layout, &phi, 2).unwrap();
            let closed = second_order_coefficients(&inputs, t);
            let expected = [closed.shares[0], closed.shares[1], closed.cash[0], closed.cash[1]];
            let zeroth = [init.n[0], init.n[1], init.k[0], init.k[1]];
            for (op, (&e, &z)) in [SIGMA1, SIGMA2, THETA1, THETA2].iter().zip(expected.iter().zip(&zeroth)) {
                assert!((c[*op][0] - z as f64).abs() < 1e-12);
                assert!(c[*op][1].abs() < 1e-12);
                assert!((c[*op][2] - e).abs() < 1e-8, "op {op} at t = {t}: {} vs {e}", c[*op][2]);
            }
        }
    }
}

#[test]
fn asymptote_matches_late_time_value() {
    let inputs = PerturbInputs::new(params(0.1), InitialOccupations { n: [1, 0], k: [1, 1], i: [2, 1] }).unwrap();
    let inf = delta_pi_infinity(&inputs).unwrap();
    let p = inputs.params();
    for j in 0..2 {
        let t = 50.0 * p.omega_r[j] / (std::f64::consts::PI * p.gamma[j] * p.gamma[j]);
        let d = delta_pi(&inputs, t)[j];
        assert!(((d - inf[j]) / inf[j]).abs() < 1e-6);
    }
}

#[test]
fn resonant_asymptote() {
    let pi = std::f64::consts::PI;
    let mut p = params(0.1);
    p.gamma = [1.0, 0.5];
    p.omega_r = [pi, 1.0];
    p.omega_s[0] = p.omega[0];
    p.omega_c[0] = p.omega[0];
    p.omega_s[1] = 0.9;
    let inputs = PerturbInputs::new(p, InitialOccupations { n: [0, 0], k: [0, 0], i: [2, 0] }).unwrap();
    let v = delta_pi_infinity(&inputs).unwrap()[0];
    assert!((v - 0.04).abs() < 1e-12, "{v}");
}

fn arb_params() -> impl Strategy<Value = ModelParams> {
    (
        prop::array::uniform2(0.0..1.0f64),
        prop::array::uniform2(0.0..1.0f64),
        prop::array::uniform2(0.0..1.0f64),
        0.0..0.3f64,
        prop::array::uniform2(0.05..0.8f64),
        prop::array::uniform2(0.3..3.0f64),
    )
        .prop_filter_map("ω̂ away from zero", |(s, c, o, l, g, r)| {
            let p = ModelParams {
                omega_s: s,
                omega_c: c,
                omega: o,
                lambda_inf: l,
                lambda: l,
                gamma: g,
                omega_r: r,
                reservoir_grid: ReservoirGrid::default(),
            };
            (p.omega_hat().abs() > 1e-3).then_some(p)
        })
}

fn arb_init() -> impl Strategy<Value = InitialOccupations> {
    (
        prop::array::uniform2(0u32..5),
        prop::array::uniform2(0u32..5),
        prop::array::uniform2(0u32..5),
    )
        .prop_map(|(n, k, i)| InitialOccupations { n, k, i })
}

proptest! {
    #[test]
    fn portfolio_change_is_non_negative_within_envelope(p in arb_params(), init in arb_init(), t in 0.0..60.0f64) {
        let inputs = PerturbInputs::new(p, init).unwrap();
        let d = delta_pi(&inputs, t);
        let inf = delta_pi_infinity(&inputs).unwrap();
        let kappa = inputs.decay_rates();
        for j in 0..2 {
            prop_assert!(d[j] >= 0.0);
            // |e^{-2κt} − 2e^{-κt}cos Δt| ≤ 3e^{-κt} in the modulus formula.
            let envelope = 3.0 * inf[j] * (-kappa[j] * t).exp();
            prop_assert!((d[j] - inf[j]).abs() <= envelope * (1.0 + 1e-10) + 1e-15);
        }
    }

    #[test]
    fn portfolio_change_settles_to_asymptote(p in arb_params(), init in arb_init()) {
        let inputs = PerturbInputs::new(p, init).unwrap();
        let inf = delta_pi_infinity(&inputs).unwrap();
        let kappa = inputs.decay_rates();
        for j in 0..2 {
            let t = 40.0 / kappa[j];
            let d = delta_pi(&inputs, t)[j];
            prop_assert!((d - inf[j]).abs() <= 1e-12 + 1e-6 * inf[j]);
        }
    }

    #[test]
    fn hamiltonian_part_of_portfolio_cancels(p in arb_params(), init in arb_init(), t in 0.0..30.0f64) {
        let inputs = PerturbInputs::new(p, init).unwrap();
        let m = mean_occupations(&inputs, t);
        let kern = eval_kernels(inputs.params(), t).unwrap();
        let l2 = inputs.params().lambda.powi(2);
        for j in 0..2 {
            let info = init.i[j] as f64 * (kern.eta_s[j].norm_sqr() + kern.eta_c[j].norm_sqr());
            let change = m.shares[j] + m.cash[j] - (init.n[j] + init.k[j]) as f64;
            prop_assert!((change - l2 * info).abs() <= 1e-12 * (1.0 + l2 * info));
        }
    }
}
