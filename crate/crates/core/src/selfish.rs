//! Solver for the selfish program: maximize the expected number of users in
//! the system, `sum_i pi_i(u_i)`, over the bipartite matching polytope.
//!
//! The feasible set is the matching polytope and every linear subproblem over
//! it is an assignment problem, so the solver is a conditional-gradient
//! (Frank-Wolfe) method whose linear oracle is [`max_weight_matching`]. Away
//! steps over the active set of matchings keep convergence fast when the
//! optimum lies inside a face. The duals returned by the final oracle call are
//! the KKT multipliers of the solution.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::fair::{max_weight_matching, solve_fair, Assignment};
use crate::market::{FractionalMatching, MarketError, MarketInstance};
use crate::models::{ModelError, ReturnModel, Stationary};
use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelfishError {
    #[error("expected one return model per side-M user ({expected}), got {got}")]
    ModelCount { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("solution carries no KKT multipliers")]
    MissingMultipliers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfishOptions {
    /// Stop once the Frank-Wolfe gap is at most `gap_tol_per_user * m`.
    pub gap_tol_per_user: f64,
    pub max_iter: usize,
    /// Random starting vertices used when the objective is not concave.
    pub restarts: usize,
    pub line_search_iters: usize,
    /// Seed for the random restarts.
    pub seed: u64,
}

impl Default for SelfishOptions {
    fn default() -> Self {
        Self { gap_tol_per_user: 1e-7, max_iter: 10_000, restarts: 16, line_search_iters: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// Concave objective; the gap certifies global optimality.
    ConcaveExact,
    /// Best of several local searches; no optimality certificate.
    MultistartLocal,
    /// Optimum over integral matchings only.
    IntegralExact,
}

/// `beta` for rows, `sigma` for columns, `mu` for the nonnegativity of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfishSolution {
    pub matching: FractionalMatching,
    pub value: f64,
    pub fw_gap: f64,
    pub iterations: usize,
    pub multipliers: Option<Multipliers>,
    pub mode: SolveMode,
    pub stationary: Stationary,
}

/// Maximum violations of the KKT system of the selfish program.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub complementary_slackness: f64,
    pub dual_feasibility: f64,
    pub primal_feasibility: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.complementary_slackness).max(self.dual_feasibility).max(self.primal_feasibility)
    }
}

struct Objective<'a> {
    inst: &'a MarketInstance,
    models: &'a [ReturnModel],
    stationary: Stationary,
}

impl Objective<'_> {
    fn value(&self, u: &[f64]) -> f64 {
        self.models.iter().zip(u).map(|(m, &ui)| self.stationary.value(m, ui)).sum()
    }

    fn edge_gradient(&self, u: &[f64]) -> Array2<f64> {
        let d: Vec<f64> = self.models.iter().zip(u).map(|(m, &ui)| self.stationary.derivative(m, ui)).collect();
        let w = self.inst.weights();
        Array2::from_shape_fn(w.dim(), |(i, j)| d[i] * w[[i, j]])
    }

    fn vertex_utilities(&self, v: &Vertex) -> Vec<f64> {
        v.iter().enumerate().map(|(i, c)| c.map_or(0.0, |j| self.inst.weight(i, j))).collect()
    }
}

type Vertex = Vec<Option<usize>>;

fn vertex_dot(g: ArrayView2<'_, f64>, v: &Vertex) -> f64 {
    v.iter().enumerate().filter_map(|(i, c)| c.map(|j| g[[i, j]])).sum()
}

fn check_models(inst: &MarketInstance, models: &[ReturnModel], stationary: Stationary) -> Result<(), SelfishError> {
    if models.len() != inst.m() {
        return Err(SelfishError::ModelCount { expected: inst.m(), got: models.len() });
    }
    stationary.validate()?;
    Ok(())
}

fn is_concave_problem(models: &[ReturnModel], stationary: Stationary) -> bool {
    if stationary != Stationary::Monopoly {
        return false;
    }
    let mut last: Option<(&ReturnModel, bool)> = None;
    for model in models {
        let ok = match last {
            Some((prev, ok)) if prev == model => ok,
            _ => model
                .check_assumptions(101)
                .map(|r| r.a1_ok && r.a2_ok && r.a3_ok && r.observation1_ok)
                .unwrap_or(false),
        };
        if !ok {
            return false;
        }
        last = Some((model, ok));
    }
    true
}

/// Objective value `sum_i pi_i(u_i)` at `x`.
pub fn objective(
    inst: &MarketInstance,
    models: &[ReturnModel],
    stationary: Stationary,
    x: ArrayView2<'_, f64>,
) -> Result<f64, SelfishError> {
    check_models(inst, models, stationary)?;
    let u = crate::market::utilities(inst, x)?;
    Ok(Objective { inst, models, stationary }.value(u.as_slice().expect("contiguous")))
}

/// Per-edge gradient `pi_i'(u_i) w_ij` of the objective at `x`.
pub fn edge_gradient(
    inst: &MarketInstance,
    models: &[ReturnModel],
    stationary: Stationary,
    x: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, SelfishError> {
    check_models(inst, models, stationary)?;
    let u = crate::market::utilities(inst, x)?;
    Ok(Objective { inst, models, stationary }.edge_gradient(u.as_slice().expect("contiguous")))
}

pub fn solve_selfish(
    inst: &MarketInstance,
    models: &[ReturnModel],
    stationary: Stationary,
) -> Result<SelfishSolution, SelfishError> {
    solve_selfish_with(inst, models, stationary, &SelfishOptions::default())
}

/// Solves the selfish program. Concave problems (monopoly chain, every model
/// strictly concave) run one conditional-gradient descent from the empty
/// matching. Otherwise the best of `restarts` random vertices plus the fair
/// optimum is returned, labelled [`SolveMode::MultistartLocal`].
pub fn solve_selfish_with(
    inst: &MarketInstance,
    models: &[ReturnModel],
    stationary: Stationary,
    opts: &SelfishOptions,
) -> Result<SelfishSolution, SelfishError> {
    check_models(inst, models, stationary)?;
    let obj = Objective { inst, models, stationary };

    if is_concave_problem(models, stationary) {
        let run = local_search(&obj, vec![None; inst.m()], opts);
        return Ok(run.into_solution(inst, SolveMode::ConcaveExact, stationary));
    }

    let mut starts: Vec<Vertex> = vec![solve_fair(inst).assignment.row_to_col];
    for r in 0..opts.restarts {
        let mut rng = rng::stream(opts.seed, Domain::Restarts, r as u64);
        let mut slots: Vec<usize> = (0..inst.n() + inst.m()).collect();
        slots.shuffle(&mut rng);
        starts.push(slots[..inst.m()].iter().map(|&j| (j < inst.n()).then_some(j)).collect());
    }
    let mut best: Option<LocalRun> = None;
    for start in starts {
        let run = local_search(&obj, start, opts);
        let better = match &best {
            None => true,
            Some(b) => {
                run.value > b.value
                    || (run.value == b.value
                        && run.x.iter().zip(b.x.iter()).find(|(a, b)| a != b).is_some_and(|(a, b)| a < b))
            }
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start").into_solution(inst, SolveMode::MultistartLocal, stationary))
}

struct LocalRun {
    x: Array2<f64>,
    value: f64,
    gap: f64,
    iterations: usize,
    oracle: Assignment,
    gradient: Array2<f64>,
}

impl LocalRun {
    fn into_solution(self, inst: &MarketInstance, mode: SolveMode, stationary: Stationary) -> SelfishSolution {
        let Assignment { row_duals, col_duals, .. } = self.oracle;
        let mu = Array2::from_shape_fn(self.gradient.dim(), |(i, j)| {
            (row_duals[i] + col_duals[j] - self.gradient[[i, j]]).max(0.0)
        });
        SelfishSolution {
            matching: FractionalMatching::new(inst, self.x).expect("shape matches instance"),
            value: self.value,
            fw_gap: self.gap.max(0.0),
            iterations: self.iterations,
            multipliers: Some(Multipliers { beta: row_duals, sigma: col_duals, mu }),
            mode,
            stationary,
        }
    }
}

/// Maximizes the concave (or unimodal) slice `gamma -> f(gamma)` on `[0, max]`
/// by ternary section, then compares against the far endpoint. Returns the
/// step and its value.
fn line_search(f: impl Fn(f64) -> f64, max: f64, iters: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, max);
    for _ in 0..iters {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let mid = 0.5 * (lo + hi);
    let (f_mid, f_max) = (f(mid), f(max));
    if f_max > f_mid {
        (max, f_max)
    } else {
        (mid, f_mid)
    }
}

fn local_search(obj: &Objective<'_>, start: Vertex, opts: &SelfishOptions) -> LocalRun {
    let inst = obj.inst;
    let (m, n) = (inst.m(), inst.n());
    let tol = opts.gap_tol_per_user * m as f64;

    let mut active: Vec<(Vertex, f64)> = vec![(start, 1.0)];
    let mut index: HashMap<Vertex, usize> = HashMap::new();
    index.insert(active[0].0.clone(), 0);
    let mut vertex_u: Vec<Vec<f64>> = vec![obj.vertex_utilities(&active[0].0)];

    let mut iterations = 0;
    let mut stalled = false;
    loop {
        let mut x = Array2::<f64>::zeros((m, n));
        let mut u = vec![0.0; m];
        for ((v, a), vu) in active.iter().zip(&vertex_u) {
            for (i, c) in v.iter().enumerate() {
                if let Some(j) = *c {
                    x[[i, j]] += a;
                }
                u[i] += a * vu[i];
            }
        }
        let value = obj.value(&u);
        let gradient = obj.edge_gradient(&u);
        let oracle = max_weight_matching(gradient.view());
        let gx: f64 = (&gradient * &x).sum();
        let gap = oracle.value - gx;

        if gap <= tol || iterations >= opts.max_iter || stalled {
            return LocalRun { x, value, gap, iterations, oracle, gradient };
        }
        iterations += 1;

        let (away_idx, away_dot) = active
            .iter()
            .enumerate()
            .map(|(k, (v, _))| (k, vertex_dot(gradient.view(), v)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let away_gap = gx - away_dot;

        let fw_target = obj.vertex_utilities(&oracle.row_to_col);
        let try_fw = |u: &[f64]| {
            let du: Vec<f64> = fw_target.iter().zip(u).map(|(s, x)| s - x).collect();
            line_search(
                |g| obj.value(&u.iter().zip(&du).map(|(x, d)| x + g * d).collect::<Vec<_>>()),
                1.0,
                opts.line_search_iters,
            )
        };

        let mut took_step = false;
        if away_gap > gap && active.len() > 1 {
            let weight = active[away_idx].1;
            let gamma_max = weight / (1.0 - weight);
            let away_u = &vertex_u[away_idx];
            let du: Vec<f64> = u.iter().zip(away_u).map(|(x, v)| x - v).collect();
            let (gamma, new_value) = line_search(
                |g| obj.value(&u.iter().zip(&du).map(|(x, d)| x + g * d).collect::<Vec<_>>()),
                gamma_max,
                opts.line_search_iters,
            );
            if gamma > 0.0 && new_value > value {
                for (_, a) in active.iter_mut() {
                    *a *= 1.0 + gamma;
                }
                if gamma >= gamma_max {
                    let (v, _) = active.remove(away_idx);
                    vertex_u.remove(away_idx);
                    index.remove(&v);
                    for (k, (v, _)) in active.iter().enumerate() {
                        index.insert(v.clone(), k);
                    }
                } else {
                    active[away_idx].1 -= gamma;
                }
                took_step = true;
            }
        }
        if !took_step {
            let (gamma, new_value) = try_fw(&u);
            if gamma > 0.0 && new_value > value {
                for (_, a) in active.iter_mut() {
                    *a *= 1.0 - gamma;
                }
                let s = oracle.row_to_col.clone();
                if gamma >= 1.0 {
                    active.clear();
                    vertex_u.clear();
                    index.clear();
                }
                match index.get(&s) {
                    Some(&k) => active[k].1 += gamma,
                    None => {
                        index.insert(s.clone(), active.len());
                        active.push((s, gamma));
                        vertex_u.push(fw_target.clone());
                    }
                }
                took_step = true;
            }
        }
        stalled = !took_step;
    }
}

/// Violations of stationarity, complementary slackness, dual and primal
/// feasibility for the multipliers stored in `sol`.
pub fn kkt_residual(
    inst: &MarketInstance,
    models: &[ReturnModel],
    sol: &SelfishSolution,
) -> Result<KktReport, SelfishError> {
    check_models(inst, models, sol.stationary)?;
    let mult = sol.multipliers.as_ref().ok_or(SelfishError::MissingMultipliers)?;
    let x = sol.matching.x();
    let (m, n) = x.dim();
    if mult.beta.len() != m || mult.sigma.len() != n || mult.mu.dim() != (m, n) {
        return Err(SelfishError::MissingMultipliers);
    }
    let obj = Objective { inst, models, stationary: sol.stationary };
    let g = obj.edge_gradient(sol.matching.u().as_slice().expect("contiguous"));

    let mut stationarity = 0.0f64;
    let mut slackness = 0.0f64;
    let mut dual = 0.0f64;
    let mut primal = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let r = -g[[i, j]] + mult.beta[i] + mult.sigma[j] - mult.mu[[i, j]];
            stationarity = stationarity.max(r.abs());
            slackness = slackness.max((mult.mu[[i, j]] * x[[i, j]]).abs());
            dual = dual.max(-mult.mu[[i, j]]);
            primal = primal.max(-x[[i, j]]);
        }
    }
    for (i, s) in sol.matching.row_sums().iter().enumerate() {
        slackness = slackness.max((mult.beta[i] * (s - 1.0)).abs());
        dual = dual.max(-mult.beta[i]);
        primal = primal.max(s - 1.0);
    }
    for (j, s) in sol.matching.col_sums().iter().enumerate() {
        slackness = slackness.max((mult.sigma[j] * (s - 1.0)).abs());
        dual = dual.max(-mult.sigma[j]);
        primal = primal.max(s - 1.0);
    }
    Ok(KktReport {
        stationarity,
        complementary_slackness: slackness,
        dual_feasibility: dual.max(0.0),
        primal_feasibility: primal.max(0.0),
    })
}

/// Selfish optimum over integral matchings. With integral `x` each user's
/// utility is the weight of its single edge, so the objective separates per
/// edge and the problem is a maximum-weight matching on `pi_i(w_ij)`.
pub fn solve_selfish_integral(
    inst: &MarketInstance,
    models: &[ReturnModel],
    stationary: Stationary,
) -> Result<SelfishSolution, SelfishError> {
    check_models(inst, models, stationary)?;
    let w = inst.weights();
    let transformed = Array2::from_shape_fn(w.dim(), |(i, j)| stationary.value(&models[i], w[[i, j]]));
    let assignment = max_weight_matching(transformed.view());
    Ok(SelfishSolution {
        matching: FractionalMatching::from_assignment(inst, &assignment.row_to_col),
        value: assignment.value,
        fw_gap: 0.0,
        iterations: 0,
        multipliers: None,
        mode: SolveMode::IntegralExact,
        stationary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::make_instance;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn alpha0(m: usize) -> Vec<ReturnModel> {
        vec![ReturnModel::parametric(0.0).unwrap(); m]
    }

    #[test]
    fn single_edge_optimum_is_half_utility() {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        let sol = solve_selfish(&inst, &alpha0(1), Stationary::Monopoly).unwrap();
        assert_eq!(sol.mode, SolveMode::ConcaveExact);
        assert_abs_diff_eq!(sol.matching.u()[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.value, 0.2, epsilon = 1e-9);
        assert!(sol.fw_gap <= 1e-7);
        let kkt = kkt_residual(&inst, &alpha0(1), &sol).unwrap();
        assert!(kkt.max() <= 1e-6, "{kkt:?}");
    }

    #[test]
    fn one_by_two_reaches_half_utility() {
        let inst = make_instance(&[vec![0.4, 1.0]]).unwrap();
        let sol = solve_selfish(&inst, &alpha0(1), Stationary::Monopoly).unwrap();
        assert_abs_diff_eq!(sol.matching.u()[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.value, 0.2, epsilon = 1e-9);
        sol.matching.check_feasible().unwrap();
    }

    #[test]
    fn zero_weights_give_zero() {
        let inst = make_instance(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let sol = solve_selfish(&inst, &alpha0(2), Stationary::Monopoly).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.matching.u().iter().all(|&u| u == 0.0));
        let kkt = kkt_residual(&inst, &alpha0(2), &sol).unwrap();
        assert_eq!(kkt.max(), 0.0);
        let mult = sol.multipliers.unwrap();
        assert!(mult.beta.iter().chain(&mult.sigma).chain(mult.mu.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn model_count_mismatch_is_an_error() {
        let inst = make_instance(&[vec![1.0], vec![0.5]]).unwrap();
        assert_eq!(
            solve_selfish(&inst, &alpha0(1), Stationary::Monopoly).unwrap_err(),
            SelfishError::ModelCount { expected: 2, got: 1 }
        );
    }

    fn hand_built(x: f64) -> SelfishSolution {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        SelfishSolution {
            matching: FractionalMatching::new(&inst, array![[x]]).unwrap(),
            value: 0.0,
            fw_gap: 0.0,
            iterations: 0,
            multipliers: Some(Multipliers { beta: vec![0.0], sigma: vec![0.0], mu: array![[0.0]] }),
            mode: SolveMode::ConcaveExact,
            stationary: Stationary::Monopoly,
        }
    }

    #[test]
    fn kkt_of_hand_built_optimum_is_zero() {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        let kkt = kkt_residual(&inst, &alpha0(1), &hand_built(0.5)).unwrap();
        assert_eq!(kkt.max(), 0.0);
    }

    #[test]
    fn kkt_detects_perturbed_point() {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        let kkt = kkt_residual(&inst, &alpha0(1), &hand_built(0.6)).unwrap();
        // pi'(0.6) = (1 - 1.2) / (1 + 0.24)^2
        let expected = 0.2 / (1.24f64 * 1.24);
        assert_abs_diff_eq!(kkt.stationarity, expected, epsilon = 1e-12);
        assert!(kkt.stationarity > 0.0);
    }

    #[test]
    fn kkt_requires_multipliers() {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        let mut sol = hand_built(0.5);
        sol.multipliers = None;
        assert_eq!(kkt_residual(&inst, &alpha0(1), &sol).unwrap_err(), SelfishError::MissingMultipliers);
    }

    #[test]
    fn integral_examples() {
        let inst = make_instance(&[vec![0.4, 1.0]]).unwrap();
        let sol = solve_selfish_integral(&inst, &alpha0(1), Stationary::Monopoly).unwrap();
        assert_eq!(sol.matching.x(), array![[1.0, 0.0]].view());
        assert_abs_diff_eq!(sol.value, 0.24 / 1.24, epsilon = 1e-12);

        let inst = make_instance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sol = solve_selfish_integral(&inst, &alpha0(2), Stationary::Monopoly).unwrap();
        assert_eq!(sol.value, 0.0);
        assert_eq!(sol.mode, SolveMode::IntegralExact);

        let inst = make_instance(&[vec![0.5]]).unwrap();
        let sol = solve_selfish_integral(&inst, &alpha0(1), Stationary::Monopoly).unwrap();
        assert_abs_diff_eq!(sol.value, 0.2, epsilon = 1e-12);
        assert_eq!(sol.matching.x()[[0, 0]], 1.0);
    }

    #[test]
    fn competition_uses_multistart() {
        let inst = make_instance(&[vec![1.0]]).unwrap();
        let sol = solve_selfish(&inst, &alpha0(1), Stationary::Competition { eps: 1e-4 }).unwrap();
        assert_eq!(sol.mode, SolveMode::MultistartLocal);
        assert!(sol.matching.u()[0] >= 0.99, "u = {}", sol.matching.u()[0]);
    }

    #[test]
    fn line_search_handles_endpoints() {
        let (g, v) = line_search(|g| g, 2.0, 50);
        assert_eq!((g, v), (2.0, 2.0));
        let (g, _) = line_search(|g| -(g - 0.3) * (g - 0.3), 1.0, 50);
        assert_abs_diff_eq!(g, 0.3, epsilon = 1e-8);
    }
}
