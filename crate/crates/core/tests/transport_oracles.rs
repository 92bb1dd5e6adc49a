mod common;

use fpk_core::transport::{self, cost_matrix, distance_relations, solve_exact, CostSpec};
use fpk_core::ParticleCloud;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> ParticleCloud {
    let points = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    ParticleCloud::new(dim, points, common::random_weights(n, rng), 0.0).unwrap()
}

#[test]
fn exact_solver_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..60 {
        let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let dim = 1 + trial % 2;
        let mu = random_cloud(m, dim, &mut rng);
        let nu = random_cloud(n, dim, &mut rng);
        let delta = [0.1, 1.0, 5.0][trial % 3];
        for spec in [
            CostSpec::log_squared(delta).unwrap(),
            CostSpec::log_linear(delta).unwrap(),
            CostSpec::power(2.0).unwrap(),
        ] {
            let plan = solve_exact(&mu, &nu, &spec).unwrap();
            let oracle = common::vertex_enumeration(mu.weights(), nu.weights(), &cost_matrix(&mu, &nu, &spec));
            assert!(
                (plan.cost - oracle).abs() <= 1e-10,
                "{spec:?} {m}x{n}: {} vs {oracle}",
                plan.cost
            );
            assert!(plan.marginal_error() <= 1e-12);
        }
    }
}

#[test]
fn oracle_costs_match_library_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let delta = rng.random_range(0.01..2.0);
        let ls = transport::eval_cost(&CostSpec::log_squared(delta).unwrap(), &x, &y);
        let ll = transport::eval_cost(&CostSpec::log_linear(delta).unwrap(), &x, &y);
        assert!((ls - common::log_squared(&x, &y, delta)).abs() < 1e-14);
        assert!((ll - common::log_linear(&x, &y, delta)).abs() < 1e-14);
    }
}

#[test]
fn quantile_path_matches_sorted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..40), rng.random_range(1..40));
        let mu = random_cloud(m, 1, &mut rng);
        let nu = random_cloud(n, 1, &mut rng);
        for p in [1.0, 1.5, 2.0, 3.0] {
            let oracle =
                common::quantile_power_cost(mu.points(), mu.weights(), nu.points(), nu.weights(), p).powf(1.0 / p);
            let w = transport::wasserstein_1d(&mu, &nu, p).unwrap();
            assert!((w - oracle).abs() <= 1e-9, "p={p}: {w} vs {oracle}");
        }
    }
}

#[test]
fn lp_agrees_with_quantile_path_for_power_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..20 {
        let mu = random_cloud(12, 1, &mut rng);
        let nu = random_cloud(9, 1, &mut rng);
        let lp = solve_exact(&mu, &nu, &CostSpec::power(2.0).unwrap()).unwrap().cost;
        let q = transport::power_cost_1d(&mu, &nu, 2.0).unwrap();
        assert!((lp - q).abs() < 1e-10);
    }
}

#[test]
fn distance_relations_hold_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for k in 0..200 {
        let n = rng.random_range(2..12);
        let mu = random_cloud(n, 1 + k % 2, &mut rng);
        let nu = random_cloud(rng.random_range(2..12), 1 + k % 2, &mut rng);
        let delta = 10f64.powf(rng.random_range(-3.0..0.5));
        let r = distance_relations(&mu, &nu, delta).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.tilde_d <= 2.0 * r.d + 1e-12);
        assert!(r.d <= (r.tilde_d / 2f64.ln()).sqrt() + r.tilde_d + 1e-12);
    }
}

#[test]
fn entropic_plan_approaches_exact_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mu = random_cloud(30, 2, &mut rng);
    let nu = random_cloud(25, 2, &mut rng);
    let spec = CostSpec::log_squared(0.5).unwrap();
    let exact = solve_exact(&mu, &nu, &spec).unwrap().cost;
    let ent = transport::solve_entropic(&mu, &nu, &spec, 1e-3, 100_000).unwrap();
    assert!(ent.cost >= exact - 1e-9);
    assert!(ent.cost - exact < 0.02, "{} vs {exact}", ent.cost);
    assert!(ent.marginal_error() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_cost_is_symmetric_and_nonnegative(seed in 0u64..10_000, delta in 0.05f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_cloud(rng.random_range(1..8), 2, &mut rng);
        let nu = random_cloud(rng.random_range(1..8), 2, &mut rng);
        let spec = CostSpec::log_squared(delta).unwrap();
        let ab = solve_exact(&mu, &nu, &spec).unwrap().cost;
        let ba = solve_exact(&nu, &mu, &spec).unwrap().cost;
        prop_assert!(ab >= -1e-14);
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!(solve_exact(&mu, &mu, &spec).unwrap().cost.abs() < 1e-12);
    }

    #[test]
    fn log_discrepancy_decreases_in_delta(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_cloud(6, 1, &mut rng);
        let nu = random_cloud(6, 1, &mut rng);
        let small = transport::log_discrepancy(&mu, &nu, 0.1).unwrap();
        let large = transport::log_discrepancy(&mu, &nu, 1.0).unwrap();
        prop_assert!(large <= small + 1e-12);
    }
}
