//! Centralized two-sided matching under a fair and an engagement-maximizing
//! (selfish) objective.
//!
//! The crate is organised bottom-up:
//!
//! * [`market`]: instances, fractional matchings, seeded instance samplers.
//! * [`models`]: return-probability functions `q(u)` and the stationary
//!   probabilities of the monopoly and competition Markov chains.
//! * [`fair`]: exact maximum-weight bipartite matching (the fair program).
//! * [`selfish`]: conditional-gradient solver for the selfish program with
//!   KKT certificates.
//! * [`poa`]: the analytic price-of-anarchy lower bound and Monte-Carlo
//!   estimates of the empirical ratio.
//! * [`online`]: the greedy online selfish policy.
//! * [`sim`]: a round-based slot-machine market with synthetic agents that
//!   compares a fair and a selfish central designer.

pub mod fair;
pub mod market;
pub mod models;
pub mod online;
pub mod poa;
pub mod rng;
pub mod selfish;
pub mod sim;

pub use fair::{brute_force_fair, max_weight_matching, solve_fair, Assignment, FairSolution};
pub use market::{
    make_instance, utilities, FractionalMatching, InstanceSampler, MarketError, MarketInstance, WeightDistribution,
    FEAS_TOL,
};
pub use models::{AssumptionReport, GridModel, ModelError, ReturnModel, Stationary};
pub use online::{greedy_online, online_poa_empirical, ArrivalError, ArrivalSequence, OnlineOutcome};
pub use poa::{
    competition_sweep, empirical_poa, empirical_poa_with, theorem1_bound, trial_seed, EmpiricalPoAReport,
    PoABoundReport, PoaError, TrialRecord,
};
pub use selfish::{
    kkt_residual, solve_selfish, solve_selfish_integral, solve_selfish_with, KktReport, Multipliers, SelfishError,
    SelfishOptions, SelfishSolution, SolveMode,
};
pub use sim::{
    generate_market, q_update, run_batch, run_study, summarize, Action, BehaviorModel, Condition, PairOutcome,
    SelfishObjective, SimError, StudyConfig, StudyKind, StudySummary,
};
