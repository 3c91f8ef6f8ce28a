//! Greedy online selfish matching.
//!
//! Side-M users arrive one at a time. On arrival, user `i` receives the
//! distribution over the still-available capacity of side-W users that
//! maximizes its own stationary probability `pi_i(u_i)`; earlier decisions are
//! never revised.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::fair::solve_fair;
use crate::market::{FractionalMatching, MarketInstance, FEAS_TOL};
use crate::models::{ReturnModel, Stationary};
use crate::poa::{ratio_of, trial_seed, EmpiricalPoAReport, PoaError, PoaSettings, TrialRecord};
use crate::rng::{self, Domain};
use crate::selfish::SelfishError;

/// Points used to maximize a non-unimodal per-user objective on `[0, u_max]`.
const SCAN_POINTS: usize = 10_001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrivalError {
    #[error("arrival order has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("arrival order is not a permutation (user {0} repeated or out of range)")]
    NotPermutation(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSequence {
    order: Vec<usize>,
    instance: MarketInstance,
}

impl ArrivalSequence {
    pub fn new(instance: MarketInstance, order: Vec<usize>) -> Result<Self, ArrivalError> {
        if order.len() != instance.m() {
            return Err(ArrivalError::Length { expected: instance.m(), got: order.len() });
        }
        let mut seen = vec![false; instance.m()];
        for &i in &order {
            if i >= seen.len() || seen[i] {
                return Err(ArrivalError::NotPermutation(i));
            }
            seen[i] = true;
        }
        Ok(Self { order, instance })
    }

    pub fn in_order(instance: MarketInstance) -> Self {
        let order = (0..instance.m()).collect();
        Self { order, instance }
    }

    /// Uniformly random arrival order drawn from `order_seed`.
    pub fn shuffled(instance: MarketInstance, order_seed: u64) -> Self {
        let mut order: Vec<usize> = (0..instance.m()).collect();
        order.shuffle(&mut rng::stream(order_seed, Domain::ArrivalOrder, 0));
        Self { order, instance }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn instance(&self) -> &MarketInstance {
        &self.instance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    pub matching: FractionalMatching,
    /// `sum_i pi_i(u_i)`.
    pub objective: f64,
    /// `sum_i u_i`.
    pub value: f64,
}

fn best_utility(model: &ReturnModel, stationary: Stationary, peak: Option<f64>, u_max: f64) -> f64 {
    if let Some(p) = peak {
        return p.min(u_max);
    }
    let mut best = (0.0, stationary.value(model, 0.0));
    for k in 1..SCAN_POINTS {
        let u = u_max * k as f64 / (SCAN_POINTS - 1) as f64;
        let v = stationary.value(model, u);
        if v > best.1 {
            best = (u, v);
        }
    }
    best.0
}

pub fn greedy_online(
    seq: &ArrivalSequence,
    models: &[ReturnModel],
    stationary: Stationary,
) -> Result<OnlineOutcome, SelfishError> {
    let inst = &seq.instance;
    if models.len() != inst.m() {
        return Err(SelfishError::ModelCount { expected: inst.m(), got: models.len() });
    }
    stationary.validate()?;
    let (m, n) = (inst.m(), inst.n());
    let mut x = Array2::<f64>::zeros((m, n));
    let mut used = vec![0.0f64; n];
    let mut peaks: Vec<(&ReturnModel, Option<f64>)> = Vec::new();

    for &i in &seq.order {
        let model = &models[i];
        let peak = match peaks.iter().find(|(m, _)| *m == model) {
            Some((_, p)) => *p,
            None => {
                let p = stationary.unimodal_peak(model);
                peaks.push((model, p));
                p
            }
        };

        let mut columns: Vec<usize> =
            (0..n).filter(|&j| 1.0 - used[j] >= FEAS_TOL && inst.weight(i, j) > 0.0).collect();
        columns.sort_by(|&a, &b| inst.weight(i, b).total_cmp(&inst.weight(i, a)).then(a.cmp(&b)));

        let mut budget = 1.0;
        let mut u_max = 0.0;
        for &j in &columns {
            let take = (1.0 - used[j]).min(budget);
            u_max += inst.weight(i, j) * take;
            budget -= take;
            if budget <= 0.0 {
                break;
            }
        }

        let mut remaining = best_utility(model, stationary, peak, u_max);
        let mut budget = 1.0;
        for &j in &columns {
            if remaining <= 0.0 || budget <= 0.0 {
                break;
            }
            let w = inst.weight(i, j);
            let take = (1.0 - used[j]).min(budget).min(remaining / w);
            x[[i, j]] = take;
            used[j] += take;
            budget -= take;
            remaining -= w * take;
        }
    }

    let matching = FractionalMatching::new(inst, x)?;
    let objective = models.iter().zip(matching.u()).map(|(m, &u)| stationary.value(m, u)).sum();
    let value = matching.total_utility();
    Ok(OnlineOutcome { matching, objective, value })
}

/// Empirical online price of anarchy: every trial samples an instance and a
/// fresh random arrival order, runs the greedy policy and compares total
/// utility against the fair optimum.
pub fn online_poa_empirical(
    models: &[ReturnModel],
    sampler: &crate::market::InstanceSampler,
    m: usize,
    n: usize,
    trials: usize,
    stationary: Stationary,
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
            let order_seed = trial_seed(!sampler.seed, trial);
            let online = greedy_online(&ArrivalSequence::shuffled(inst, order_seed), models, stationary)?;
            Ok(TrialRecord {
                trial,
                fair_value: fair.value,
                selfish_value: online.value,
                selfish_objective: online.objective,
                ratio: ratio_of(online.value, fair.value),
                mode: None,
                order_seed: Some(order_seed),
            })
        })
        .collect::<Result<Vec<_>, PoaError>>()?;
    let settings = PoaSettings { m, n, sampler: sampler.clone(), models: models.to_vec(), stationary };
    EmpiricalPoAReport::from_records(records, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::make_instance;
    use crate::selfish::solve_selfish;
    use approx::assert_abs_diff_eq;

    fn alpha0(m: usize) -> Vec<ReturnModel> {
        vec![ReturnModel::parametric(0.0).unwrap(); m]
    }

    #[test]
    fn two_users_share_one_slot() {
        let inst = make_instance(&[vec![1.0], vec![0.5]]).unwrap();
        let out = greedy_online(&ArrivalSequence::in_order(inst), &alpha0(2), Stationary::Monopoly).unwrap();
        assert_abs_diff_eq!(out.matching.x()[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.matching.u()[1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(out.objective, 0.2 + 0.1875 / 1.1875, epsilon = 1e-12);
        assert_abs_diff_eq!(out.objective, 0.35789, epsilon = 1e-5);
    }

    #[test]
    fn single_user_matches_offline() {
        let inst = make_instance(&[vec![0.4, 1.0, 0.7]]).unwrap();
        let off = solve_selfish(&inst, &alpha0(1), Stationary::Monopoly).unwrap();
        let on = greedy_online(&ArrivalSequence::in_order(inst), &alpha0(1), Stationary::Monopoly).unwrap();
        assert_abs_diff_eq!(on.objective, off.value, epsilon = 1e-9);
        // realized on the highest-weight column only
        assert_abs_diff_eq!(on.matching.x()[[0, 1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_objective() {
        let inst = make_instance(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let out = greedy_online(&ArrivalSequence::in_order(inst), &alpha0(2), Stationary::Monopoly).unwrap();
        assert_eq!(out.objective, 0.0);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn arrival_order_validation() {
        let inst = make_instance(&[vec![0.5], vec![0.5]]).unwrap();
        assert!(ArrivalSequence::new(inst.clone(), vec![0]).is_err());
        assert_eq!(ArrivalSequence::new(inst.clone(), vec![1, 1]), Err(ArrivalError::NotPermutation(1)));
        assert!(ArrivalSequence::new(inst.clone(), vec![0, 2]).is_err());
        assert!(ArrivalSequence::new(inst, vec![1, 0]).is_ok());
    }

    #[test]
    fn capacity_is_respected_with_many_users() {
        let inst = make_instance(&[vec![1.0, 0.2], vec![1.0, 0.2], vec![1.0, 0.2]]).unwrap();
        let out = greedy_online(&ArrivalSequence::in_order(inst), &alpha0(3), Stationary::Monopoly).unwrap();
        out.matching.check_feasible().unwrap();
        // third user only finds the 0.2 column left
        assert_abs_diff_eq!(out.matching.u()[2], 0.2, epsilon = 1e-12);
    }
}
