use proptest::prelude::*;
use qmarket::model::{InitialOccupations, ModelParams, ReservoirGrid};
use qmarket::propagate::Engine;
use qmarket::scenario::{
    CompareSpec, ConservationSpec, Cutoffs, DampingSpec, ReservoirSpec, ScalingSpec, Scenario, SweepAxis, SweepField,
    SweepSpec, TimeGrid, Tolerances,
};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3f64, -1e-12..1e-12f64, Just(0.0)]
}

fn arb_scenario() -> impl Strategy<Value = Scenario> {
    let params = (
        prop::array::uniform2(finite()),
        prop::array::uniform2(finite()),
        prop::array::uniform2(finite()),
        finite(),
        finite(),
        prop::array::uniform2(finite()),
        prop::array::uniform2(finite()),
    )
        .prop_map(|(s, c, o, li, l, g, r)| ModelParams {
            omega_s: s,
            omega_c: c,
            omega: o,
            lambda_inf: li,
            lambda: l,
            gamma: g,
            omega_r: r,
            reservoir_grid: ReservoirGrid::default(),
        });
    let cutoffs = (1u32..6, 1u32..6, 1u32..6, 1u32..4, 1u64..1 << 30).prop_map(|(s, c, i, r, m)| Cutoffs {
        share: s,
        cash: c,
        info: i,
        reservoir: r,
        max_dimension: m,
    });
    let engines = prop::sample::subsequence(vec![Engine::Exact, Engine::HeisenbergOde, Engine::Perturbative], 1..=3);
    let compare = prop::option::of(
        (
            prop::option::of(finite().prop_map(|l| ConservationSpec { no_information_lambda: l })),
            prop::option::of(prop::collection::vec(1e-4..1.0f64, 3..5).prop_map(|epsilons| ScalingSpec { epsilons })),
            prop::option::of(
                (prop::collection::vec(1usize..64, 1..4), 1e-3..1.0f64, 1.0..50.0f64, 2usize..300).prop_map(
                    |(grid_sizes, node_spacing, t_max, samples)| DampingSpec {
                        grid_sizes,
                        node_spacing,
                        t_max,
                        samples,
                    },
                ),
            ),
        )
            .prop_map(|(conservation, scaling, damping)| CompareSpec {
                conservation,
                scaling,
                damping,
            }),
    );
    let sweep = prop::option::of(
        prop::collection::vec(
            (
                prop::sample::select(vec![SweepField::Gamma1, SweepField::OmegaS2, SweepField::Lambda, SweepField::I1]),
                prop::collection::vec(0u32..4, 1..4),
            )
                .prop_map(|(field, v)| SweepAxis {
                    field,
                    values: v.into_iter().map(f64::from).collect(),
                }),
            1..3,
        )
        .prop_map(|axes| SweepSpec { axes }),
    );
    (
        "[a-z][a-z0-9_]{0,12}",
        params,
        cutoffs,
        (0.01..100.0f64, 0usize..40),
        (1e-3..1e3f64, 2usize..1000),
        engines,
        (1e-14..1e-2f64, 1e-12..1e-2f64, 1e-3..1.0f64),
        compare,
        sweep,
    )
        .prop_flat_map(|(name, params, cutoffs, (window, nodes), (t_max, samples), engines, tols, compare, sweep)| {
            let (s, c, i) = (cutoffs.share, cutoffs.cash, cutoffs.info);
            (
                prop::array::uniform2(0..=s),
                prop::array::uniform2(0..=c),
                prop::array::uniform2(0..=i),
            )
                .prop_map(move |(n, k, ii)| Scenario {
                    name: name.clone(),
                    params: params.clone(),
                    initial: InitialOccupations { n, k, i: ii },
                    cutoffs: cutoffs.clone(),
                    reservoir: ReservoirSpec { window, nodes },
                    time: TimeGrid { t_max, samples },
                    engines: engines.clone(),
                    tolerances: Tolerances {
                        propagation: tols.0,
                        leakage: tols.1,
                        leakage_warning: tols.1 / 10.0,
                        ode_step: tols.2,
                        ode_drift: tols.0,
                    },
                    compare: compare.clone(),
                    sweep: sweep.clone(),
                })
        })
}

proptest! {
    #[test]
    fn json_round_trip_is_lossless(s in arb_scenario()) {
        prop_assert!(s.validate().is_ok(), "{:?}", s.validate());
        let text = s.to_json();
        let back = Scenario::from_json(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_json(), text);
    }
}
