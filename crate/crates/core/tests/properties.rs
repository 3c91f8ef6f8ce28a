use approx::assert_abs_diff_eq;
use matchmarket::selfish::{edge_gradient, objective};
use matchmarket::*;
use ndarray::Array2;
use proptest::prelude::*;

fn weights(max_m: usize, max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_m, 1..=max_n).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(0.0..=1.0f64, n), m))
}

fn alpha_models(m: usize, alpha: f64) -> Vec<ReturnModel> {
    vec![ReturnModel::parametric(alpha).unwrap(); m]
}

/// A random doubly substochastic matrix: nonnegative entries scaled down by
/// the largest row or column sum.
fn substochastic(m: usize, n: usize, raw: &[f64]) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((m, n), |(i, j)| raw[(i * n + j) % raw.len()]);
    let max_sum =
        x.rows().into_iter().map(|r| r.sum()).chain(x.columns().into_iter().map(|c| c.sum())).fold(0.0, f64::max);
    if max_sum > 1.0 {
        x /= max_sum * (1.0 + 1e-12);
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn fair_value_is_monotone_in_weights(rows in weights(5, 5), i in 0usize..5, j in 0usize..5, bump in 0.0..1.0f64) {
        let inst = make_instance(&rows).unwrap();
        let (i, j) = (i % inst.m(), j % inst.n());
        let mut raised = rows.clone();
        raised[i][j] = (raised[i][j] + bump).min(1.0);
        let before = solve_fair(&inst).value;
        let after = solve_fair(&make_instance(&raised).unwrap()).value;
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn fair_value_is_permutation_invariant(rows in weights(6, 6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let inst = make_instance(&rows).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rp: Vec<usize> = (0..inst.m()).collect();
        let mut cp: Vec<usize> = (0..inst.n()).collect();
        rp.shuffle(&mut rng);
        cp.shuffle(&mut rng);
        let p = inst.permuted(&rp, &cp);
        prop_assert!((solve_fair(&inst).value - solve_fair(&p).value).abs() <= 1e-9);
        prop_assert!((brute_force_fair(&p).unwrap() - solve_fair(&p).value).abs() <= 1e-9);
    }

    #[test]
    fn fair_dominates_every_fractional_matching(rows in weights(5, 5), raw in prop::collection::vec(0.0..1.0f64, 1..40)) {
        let inst = make_instance(&rows).unwrap();
        let x = substochastic(inst.m(), inst.n(), &raw);
        let m = FractionalMatching::new(&inst, x).unwrap();
        prop_assert!(m.total_utility() <= solve_fair(&inst).value + 1e-9);
    }

    #[test]
    fn selfish_solution_is_feasible_and_never_beats_fair(rows in weights(4, 4), alpha in 0.0..0.9f64) {
        let inst = make_instance(&rows).unwrap();
        let models = alpha_models(inst.m(), alpha);
        let sol = solve_selfish(&inst, &models, Stationary::Monopoly).unwrap();
        sol.matching.check_feasible().unwrap();
        prop_assert_eq!(sol.mode, SolveMode::ConcaveExact);
        prop_assert!(sol.fw_gap <= 1e-7 * inst.m() as f64);
        let fair = solve_fair(&inst).value;
        prop_assert!(sol.matching.total_utility() <= fair + 1e-7);
        if fair > 1e-9 {
            let bound = theorem1_bound(&models).unwrap().bound;
            prop_assert!(sol.matching.total_utility() / fair >= bound - 1e-6);
        }
    }

    #[test]
    fn selfish_never_pushes_utility_past_the_peak(rows in weights(4, 4), alpha in 0.0..0.9f64) {
        // Lowering u_i above the peak of pi_i only raises the objective, so
        // an optimum keeps every user at or below the peak.
        let inst = make_instance(&rows).unwrap();
        let models = alpha_models(inst.m(), alpha);
        let peak = models[0].peak_utility();
        let sol = solve_selfish(&inst, &models, Stationary::Monopoly).unwrap();
        for &u in sol.matching.u() {
            prop_assert!(u <= peak + 1e-4, "u = {} above peak {}", u, peak);
        }
    }

    #[test]
    fn edge_gradient_matches_finite_differences(rows in weights(3, 3), raw in prop::collection::vec(0.05..1.0f64, 9), alpha in 0.0..0.9f64) {
        let inst = make_instance(&rows).unwrap();
        let models = alpha_models(inst.m(), alpha);
        let x = substochastic(inst.m(), inst.n(), &raw) * 0.9;
        let g = edge_gradient(&inst, &models, Stationary::Monopoly, x.view()).unwrap();
        let h = 1e-6;
        for ((i, j), &gij) in g.indexed_iter() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[[i, j]] += h;
            down[[i, j]] -= h;
            let fd = (objective(&inst, &models, Stationary::Monopoly, up.view()).unwrap()
                - objective(&inst, &models, Stationary::Monopoly, down.view()).unwrap())
                / (2.0 * h);
            prop_assert!((fd - gij).abs() <= 1e-5, "({}, {}): fd {} vs {}", i, j, fd, gij);
        }
    }

    #[test]
    fn competition_never_exceeds_monopoly(u in 0.0..=1.0f64, eps in 1e-6..1.0f64, alpha in 0.0..0.95f64) {
        let q = ReturnModel::parametric(alpha).unwrap();
        prop_assert!(q.pi_competition(u, eps) <= q.pi_monopoly(u) + 1e-15);
        prop_assert!((0.0..=0.5).contains(&q.pi_monopoly(u)));
    }

    #[test]
    fn online_is_feasible_and_below_offline(rows in weights(4, 4), seed in any::<u64>()) {
        let inst = make_instance(&rows).unwrap();
        let models = alpha_models(inst.m(), 0.0);
        let on = greedy_online(&ArrivalSequence::shuffled(inst.clone(), seed), &models, Stationary::Monopoly).unwrap();
        on.matching.check_feasible().unwrap();
        let off = solve_selfish(&inst, &models, Stationary::Monopoly).unwrap();
        prop_assert!(on.objective <= off.value + 1e-7);
    }

    #[test]
    fn online_ratio_stays_above_bound_on_sampled_instances(seed in any::<u64>(), order_seed in any::<u64>()) {
        let inst = InstanceSampler::beta(2.0, 2.0, seed).unwrap().sample(5, 5).unwrap();
        let models = alpha_models(5, 0.0);
        let on = greedy_online(&ArrivalSequence::shuffled(inst.clone(), order_seed), &models, Stationary::Monopoly).unwrap();
        prop_assert!(on.value / solve_fair(&inst).value >= 0.1815 - 0.02);
    }

    #[test]
    fn sampled_instances_stay_in_range(m in 1usize..8, n in 1usize..8, seed in any::<u64>(), a in 0.2..5.0f64, b in 0.2..5.0f64) {
        let inst = InstanceSampler::beta(a, b, seed).unwrap().sample(m, n).unwrap();
        prop_assert_eq!((inst.m(), inst.n()), (m, n));
        prop_assert!(inst.weights().iter().all(|w| (0.0..=1.0).contains(w)));
    }
}

#[test]
fn greedy_can_fall_below_the_offline_bound_under_adversarial_order() {
    // The first arrival fills the only slot with its small weight; the user
    // that would carry the fair optimum arrives to nothing.
    let delta = 0.05;
    let inst = make_instance(&[vec![delta], vec![1.0]]).unwrap();
    let models = alpha_models(2, 0.0);
    let on = greedy_online(&ArrivalSequence::in_order(inst.clone()), &models, Stationary::Monopoly).unwrap();
    let ratio = on.value / solve_fair(&inst).value;
    assert_abs_diff_eq!(ratio, delta, epsilon = 1e-12);
    assert!(ratio < theorem1_bound(&models).unwrap().bound);
    let reversed = ArrivalSequence::new(inst.clone(), vec![1, 0]).unwrap();
    let on = greedy_online(&reversed, &models, Stationary::Monopoly).unwrap();
    assert_abs_diff_eq!(on.value, 0.5 + delta * 0.5, epsilon = 1e-12);
}

#[test]
fn competition_solver_tracks_single_user_argmax() {
    let inst = make_instance(&[vec![1.0]]).unwrap();
    let models = alpha_models(1, 0.0);
    for eps in [0.5, 0.1, 0.01] {
        let target = models[0].argmax_pi_competition(eps).unwrap();
        let sol = solve_selfish(&inst, &models, Stationary::Competition { eps }).unwrap();
        assert_eq!(sol.mode, SolveMode::MultistartLocal);
        assert_abs_diff_eq!(sol.matching.u()[0], target, epsilon = 1e-3);
    }
}

#[test]
fn grid_models_drive_the_solver() {
    let inst = InstanceSampler::beta(2.0, 2.0, 4).unwrap().sample(3, 3).unwrap();
    let grid = ReturnModel::concave_prior_grid();
    let models = vec![grid; 3];
    let sol = solve_selfish(&inst, &models, Stationary::Monopoly).unwrap();
    sol.matching.check_feasible().unwrap();
    assert!(sol.value > 0.0);
}
