mod common;

use common::*;
use couple_core::diffusion::{
    init_problem, rank_targets, select_confident, solve, CoordinateDescent, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE,
};
use proptest::prelude::*;

#[test]
fn solver_matches_dense_oracle() {
    let mut r = rng(11);
    for case in 0..50 {
        let g = random_graph(&mut r, 4, 12);
        let p = init_problem(&g).unwrap();
        let sol = solve(&p, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS).unwrap();
        assert!(sol.converged, "case {case}");
        let oracle = qp_oracle(&p);
        let gap = inf_norm_diff(&sol.x, &oracle);
        assert!(gap <= 1e-6, "case {case}: |x - x*| = {gap:e}");
        assert!(p.kkt_residual(&sol.x) <= 1e-8);
        for (m, t) in p.net_mass(&sol.x).iter().zip(p.capacity()) {
            assert!(*m <= t + 1e-8, "case {case}: net mass {m} over capacity {t}");
        }
    }
}

#[test]
fn oracle_itself_satisfies_kkt() {
    let mut r = rng(12);
    for _ in 0..10 {
        let g = random_graph(&mut r, 4, 8);
        let p = init_problem(&g).unwrap();
        assert!(p.kkt_residual(&qp_oracle(&p)) < 1e-9);
    }
}

#[test]
fn scaling_leaves_ranking_unchanged() {
    let mut r = rng(13);
    for _ in 0..20 {
        let g = random_graph(&mut r, 4, 12);
        let p = init_problem(&g).unwrap();
        let sol = solve(&p, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS).unwrap();
        for c in [0.1, 7.3] {
            let gs = scaled_graph(&g, c);
            let ps = init_problem(&gs).unwrap();
            for (a, b) in ps.mass().iter().zip(p.mass()) {
                assert!((a - c * b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let ss = solve(&ps, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS).unwrap();
            assert_eq!(rank_targets(&ss.x, &gs), rank_targets(&sol.x, &g));
            assert_eq!(
                select_confident(&ss, &gs, 0.5).unwrap().member_ids,
                select_confident(&sol, &g, 0.5).unwrap().member_ids
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sweeps_never_increase_the_objective(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 4, 10);
        let p = init_problem(&g).unwrap();
        let mut cd = CoordinateDescent::new(&p).with_relaxation(1.0).unwrap();
        let mut prev = p.objective(cd.x());
        for _ in 0..50 {
            cd.sweep().unwrap();
            let f = p.objective(cd.x());
            prop_assert!(f <= prev + 1e-12);
            prop_assert!(cd.x().iter().all(|&v| v >= 0.0));
            prev = f;
        }
    }

    #[test]
    fn solutions_are_nonnegative_and_stationary(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 4, 12);
        let p = init_problem(&g).unwrap();
        let sol = solve(&p, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(sol.x.iter().all(|&v| v >= 0.0));
        prop_assert!(p.kkt_residual(&sol.x) <= DEFAULT_TOLERANCE);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delivered_mass_never_decreases(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 4, 12);
        let p = init_problem(&g).unwrap();
        let mut cd = CoordinateDescent::new(&p);
        let mut prev = p.delivered_mass(cd.x());
        for _ in 0..100 {
            cd.sweep().unwrap();
            let m = p.delivered_mass(cd.x());
            prop_assert!(m >= prev - 1e-12, "{} < {}", m, prev);
            prev = m;
        }
    }

    #[test]
    fn sourceless_components_stay_at_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 4, 12);
        let p = init_problem(&g).unwrap();
        let sol = solve(&p, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS).unwrap();
        let comp = components(g.num_nodes(), &g.edges());
        for i in 0..g.num_nodes() {
            let has_source = (0..g.num_nodes())
                .any(|j| comp[j] == comp[i] && g.domain(j) == couple_core::dataset::Domain::Source);
            if !has_source {
                prop_assert_eq!(sol.x[i], 0.0);
            }
        }
    }
}
