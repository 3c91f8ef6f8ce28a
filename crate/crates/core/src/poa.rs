//! Price of anarchy: the analytic lower bound for concave return models and
//! Monte-Carlo estimates of the realized ratio `f(u_selfish) / f(u_fair)`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fair::solve_fair;
use crate::market::{InstanceSampler, MarketError};
use crate::models::{AssumptionReport, ModelError, ReturnModel, Stationary};
use crate::selfish::{solve_selfish_with, SelfishError, SelfishOptions, SolveMode};

/// Fair optima at or below this value make the ratio undefined.
pub const DEGENERATE_FAIR_VALUE: f64 = 1e-12;

const OUTER_MAX_ITER: usize = 200;
const OUTER_EDGE: f64 = 1e-12;
const INNER_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoaError {
    #[error("no return models given")]
    NoModels,
    #[error("return model {index} violates the assumptions: {report:?}")]
    Assumptions { index: usize, report: AssumptionReport },
    #[error("max_i q_i'(0) = {0} is not positive")]
    NonPositiveSlope(f64),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("all {0} trials had a zero fair optimum")]
    AllDegenerate(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Selfish(#[from] SelfishError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoABoundReport {
    /// `H = max_i q_i'(0)`.
    pub h_max: f64,
    /// `h = min_i q_i'(0)`; the root `c` lies in `(0, h)`.
    pub h_min: f64,
    pub c: f64,
    /// `L = min_i u_bar_i(c)`.
    pub l: f64,
    /// `L / 2`, the lower bound on the price of anarchy.
    pub bound: f64,
    /// `u_bar_i(c)`: the point where `pi_i'` equals `c`.
    pub u_bars: Vec<f64>,
    /// `c - (H / 2) L` at the returned root.
    pub residual: f64,
    pub iterations: usize,
}

/// Point where the strictly decreasing `pi'` crosses `c`, by bisection on
/// `[0, argmax q]`.
fn u_bar(model: &ReturnModel, c: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, model.peak_utility());
    for _ in 0..INNER_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if model.pi_monopoly_prime(mid) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lower bound `L(q, c) / 2` on the price of anarchy, where `c` solves
/// `c = (H / 2) L(q, c)`. Solved by nested bisection: the residual
/// `c - (H / 2) L(q, c)` is increasing in `c` because every `u_bar_i` is
/// decreasing in `c`.
pub fn theorem1_bound(models: &[ReturnModel]) -> Result<PoABoundReport, PoaError> {
    if models.is_empty() {
        return Err(PoaError::NoModels);
    }
    let mut distinct: Vec<&ReturnModel> = Vec::new();
    for (index, model) in models.iter().enumerate() {
        if distinct.contains(&model) {
            continue;
        }
        let report = model.check_assumptions(101)?;
        if !report.all_ok() {
            return Err(PoaError::Assumptions { index, report });
        }
        distinct.push(model);
    }
    let slopes: Vec<f64> = distinct.iter().map(|m| m.q_prime(0.0)).collect();
    let h_max = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h_min = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    if h_max <= 0.0 || h_min <= 0.0 {
        return Err(PoaError::NonPositiveSlope(h_min.min(h_max)));
    }

    let l_of = |c: f64| distinct.iter().map(|m| u_bar(m, c)).fold(f64::INFINITY, f64::min);
    let residual = |c: f64| c - 0.5 * h_max * l_of(c);

    let (mut lo, mut hi) = (OUTER_EDGE, h_min - OUTER_EDGE);
    let mut iterations = 0;
    while iterations < OUTER_MAX_ITER {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let u_bars: Vec<f64> = models.iter().map(|m| u_bar(m, c)).collect();
    let l = u_bars.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PoABoundReport { h_max, h_min, c, l, bound: 0.5 * l, u_bars, residual: c - 0.5 * h_max * l, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub fair_value: f64,
    /// Total utility `f(u)` of the selfish (or online) matching.
    pub selfish_value: f64,
    /// Selfish objective `sum_i pi_i(u_i)`.
    pub selfish_objective: f64,
    /// `None` when the fair optimum is zero.
    pub ratio: Option<f64>,
    pub mode: Option<SolveMode>,
    /// Seed of the arrival order for online trials.
    pub order_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoaSettings {
    pub m: usize,
    pub n: usize,
    pub sampler: InstanceSampler,
    pub models: Vec<ReturnModel>,
    pub stationary: Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalPoAReport {
    pub trials: usize,
    pub degenerate: usize,
    pub min_ratio: f64,
    pub mean_ratio: f64,
    pub records: Vec<TrialRecord>,
    pub settings: PoaSettings,
}

impl EmpiricalPoAReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.ratio).collect()
    }

    pub(crate) fn from_records(records: Vec<TrialRecord>, settings: PoaSettings) -> Result<Self, PoaError> {
        let ratios: Vec<f64> = records.iter().filter_map(|r| r.ratio).collect();
        if ratios.is_empty() {
            return Err(PoaError::AllDegenerate(records.len()));
        }
        Ok(Self {
            trials: records.len(),
            degenerate: records.len() - ratios.len(),
            min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
            mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
            records,
            settings,
        })
    }
}

pub(crate) fn ratio_of(selfish: f64, fair: f64) -> Option<f64> {
    (fair > DEGENERATE_FAIR_VALUE).then(|| selfish / fair)
}

/// Seed for the multistart restarts of one trial.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    seed ^ trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn empirical_poa(
    models: &[ReturnModel],
    sampler: &InstanceSampler,
    m: usize,
    n: usize,
    trials: usize,
    stationary: Stationary,
) -> Result<EmpiricalPoAReport, PoaError> {
    empirical_poa_with(models, sampler, m, n, trials, stationary, &SelfishOptions::default())
}

/// Samples `trials` instances (trial `t` from stream `t` of the sampler) and
/// records the utility ratio of the selfish optimum to the fair optimum.
pub fn empirical_poa_with(
    models: &[ReturnModel],
    sampler: &InstanceSampler,
    m: usize,
    n: usize,
    trials: usize,
    stationary: Stationary,
    opts: &SelfishOptions,
) -> Result<EmpiricalPoAReport, PoaError> {
    if trials == 0 {
        return Err(PoaError::NoTrials);
    }
    sampler.validate()?;
    stationary.validate()?;
    let records = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let inst = sampler.sample_trial(trial, m, n)?;
            let fair = solve_fair(&inst);
            let trial_opts = SelfishOptions { seed: trial_seed(sampler.seed, trial), ..opts.clone() };
            let selfish = solve_selfish_with(&inst, models, stationary, &trial_opts)?;
            let selfish_value = selfish.matching.total_utility();
            Ok(TrialRecord {
                trial,
                fair_value: fair.value,
                selfish_value,
                selfish_objective: selfish.value,
                ratio: ratio_of(selfish_value, fair.value),
                mode: Some(selfish.mode),
                order_seed: None,
            })
        })
        .collect::<Result<Vec<_>, PoaError>>()?;
    let settings = PoaSettings { m, n, sampler: sampler.clone(), models: models.to_vec(), stationary };
    EmpiricalPoAReport::from_records(records, settings)
}

/// [`empirical_poa`] under the competition chain for each `eps`, on the same
/// sampled instances.
pub fn competition_sweep(
    models: &[ReturnModel],
    sampler: &InstanceSampler,
    m: usize,
    n: usize,
    trials: usize,
    eps_list: &[f64],
) -> Result<Vec<(f64, EmpiricalPoAReport)>, PoaError> {
    for &eps in eps_list {
        Stationary::Competition { eps }.validate()?;
    }
    eps_list
        .iter()
        .map(|&eps| Ok((eps, empirical_poa(models, sampler, m, n, trials, Stationary::Competition { eps })?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::WeightDistribution;
    use approx::assert_abs_diff_eq;

    fn alpha(a: f64) -> ReturnModel {
        ReturnModel::parametric(a).unwrap()
    }

    #[test]
    fn example_bound_for_alpha_zero() {
        let r = theorem1_bound(&[alpha(0.0)]).unwrap();
        assert_abs_diff_eq!(r.l, 0.363, epsilon = 1e-3);
        assert_abs_diff_eq!(r.bound, 0.1815, epsilon = 1e-3);
        assert_abs_diff_eq!(r.h_max, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.c, r.l / 2.0, epsilon = 1e-8);
    }

    #[test]
    fn report_invariants() {
        for a in [0.0, 0.25, 0.5, 0.75] {
            let models = vec![alpha(a), alpha(0.5 * a)];
            let r = theorem1_bound(&models).unwrap();
            assert!((r.c - 0.5 * r.h_max * r.l).abs() <= 1e-8);
            for (m, &u) in models.iter().zip(&r.u_bars) {
                assert!((m.pi_monopoly_prime(u) - r.c).abs() <= 1e-8);
            }
            assert!(r.bound > 0.0 && r.bound <= 0.5);
        }
    }

    #[test]
    fn bound_is_independent_of_user_count() {
        let one = theorem1_bound(&[alpha(0.25)]).unwrap();
        let many = theorem1_bound(&vec![alpha(0.25); 50]).unwrap();
        assert_eq!(one.bound, many.bound);
        assert_eq!(one.c, many.c);
    }

    #[test]
    fn bound_rejects_bad_models() {
        assert_eq!(theorem1_bound(&[]), Err(PoaError::NoModels));
        let bumpy = ReturnModel::Grid(crate::models::GridModel::from_fn(|u| (0.3 * (1.0 + (12.0 * u).sin())).max(0.0)));
        assert!(matches!(theorem1_bound(&[bumpy]), Err(PoaError::Assumptions { index: 0, .. })));
    }

    #[test]
    fn single_user_ratio_is_one_half() {
        let sampler = InstanceSampler::new(WeightDistribution::Explicit { rows: vec![vec![1.0]] }, 0).unwrap();
        let r = empirical_poa(&[alpha(0.0)], &sampler, 1, 1, 1, Stationary::Monopoly).unwrap();
        assert_abs_diff_eq!(r.min_ratio, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn zero_instances_are_degenerate() {
        let sampler = InstanceSampler::new(WeightDistribution::Explicit { rows: vec![vec![0.0, 0.0]] }, 0).unwrap();
        let err = empirical_poa(&[alpha(0.0)], &sampler, 1, 2, 3, Stationary::Monopoly).unwrap_err();
        assert_eq!(err, PoaError::AllDegenerate(3));
        assert_eq!(ratio_of(0.0, 0.0), None);
    }

    #[test]
    fn empirical_ratios_are_bounded() {
        let sampler = InstanceSampler::beta(2.0, 2.0, 3).unwrap();
        let models = vec![alpha(0.0); 4];
        let bound = theorem1_bound(&models).unwrap().bound;
        let r = empirical_poa(&models, &sampler, 4, 4, 40, Stationary::Monopoly).unwrap();
        for ratio in r.ratios() {
            assert!(ratio >= bound - 1e-6 && ratio <= 1.0 + 1e-7, "{ratio}");
        }
        assert_eq!(r, empirical_poa(&models, &sampler, 4, 4, 40, Stationary::Monopoly).unwrap());
    }
}
