//! Study simulator.
//!
//! A round-based slot-machine market played by synthetic agents. Two
//! conditions run side by side on identical slot means, player offsets,
//! payoff noise and behavioral randomness; they differ only in the central
//! designer: `Fair` maximizes total mean payoff, `Selfish` maximizes the
//! number of returning players under a return function `q` learned from the
//! observed switching behavior.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fair::{max_weight_matching, solve_fair};
use crate::market::{MarketError, MarketInstance};
use crate::models::{GridModel, ModelError, ReturnModel, Stationary, GRID_NODES};
use crate::rng::{self, Domain};
use crate::selfish::{solve_selfish_integral, SelfishError};

/// Number of payoff bins used for the switch fractions and histograms.
pub const PAYOFF_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("invalid behavior model: {0}")]
    Behavior(String),
    #[error("grid with {nodes} nodes cannot be aligned with {bins} bins")]
    Misaligned { nodes: usize, bins: usize },
    #[error("no pairs to simulate")]
    NoPairs,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Selfish(#[from] SelfishError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StudyKind {
    A,
    B,
    C,
}

impl StudyKind {
    pub const ALL: [StudyKind; 3] = [StudyKind::A, StudyKind::B, StudyKind::C];

    /// Beta parameters of the slot means.
    pub fn beta_params(self) -> (f64, f64) {
        match self {
            StudyKind::A => (1.0, 2.0),
            StudyKind::B => (2.0, 2.0),
            StudyKind::C => (2.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::A => "A",
            StudyKind::B => "B",
            StudyKind::C => "C",
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(StudyKind::A),
            "B" | "b" => Ok(StudyKind::B),
            "C" | "c" => Ok(StudyKind::C),
            other => Err(SimError::Config(format!("unknown study {other:?}, expected A, B or C"))),
        }
    }
}

/// What the selfish designer maximizes each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfishObjective {
    /// Stationary return probability `q / (1 + q)`.
    #[default]
    Stationary,
    /// Immediate return probability `q`.
    RawQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub players: usize,
    pub slots: usize,
    pub rounds: usize,
    /// Cents paid per unplayed round after exiting.
    pub outside_per_round: f64,
    /// Largest mean slot payoff in cents.
    pub payoff_scale: f64,
    /// Standard deviation (cents) of both the player offsets and the per-round noise.
    pub noise_sd: f64,
    pub alpha_learn: f64,
    pub seed: u64,
    pub selfish_objective: SelfishObjective,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            study: StudyKind::A,
            players: 3,
            slots: 13,
            rounds: 10,
            outside_per_round: 6.0,
            payoff_scale: 20.0,
            noise_sd: 3f64.sqrt(),
            alpha_learn: 0.7,
            seed: 0,
            selfish_objective: SelfishObjective::Stationary,
        }
    }
}

impl StudyConfig {
    pub fn for_study(study: StudyKind, seed: u64) -> Self {
        Self { study, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.players == 0 {
            return bad("players must be at least 1".into());
        }
        if self.slots < self.players {
            return bad(format!("slots ({}) must be at least players ({})", self.slots, self.players));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.payoff_scale.is_finite() && self.payoff_scale > 0.0) {
            return bad(format!("payoff_scale must be positive, got {}", self.payoff_scale));
        }
        if !(self.outside_per_round.is_finite() && self.outside_per_round >= 0.0) {
            return bad(format!("outside_per_round must be nonnegative, got {}", self.outside_per_round));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd must be nonnegative, got {}", self.noise_sd));
        }
        if !(0.0..=1.0).contains(&self.alpha_learn) {
            return bad(format!("alpha_learn must lie in [0, 1], got {}", self.alpha_learn));
        }
        Ok(())
    }

    fn bin_of(&self, payoff: f64) -> usize {
        let width = self.payoff_scale / PAYOFF_BINS as f64;
        ((payoff / width).floor().max(0.0) as usize).min(PAYOFF_BINS - 1)
    }

    fn normalize(&self, cents: f64) -> f64 {
        (cents / self.payoff_scale).clamp(0.0, 1.0)
    }
}

/// Synthetic player behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorModel {
    /// `switch(p) = clamp(intercept - slope * p, min, max)` for a payoff `p` in cents.
    pub switch_intercept: f64,
    pub switch_slope: f64,
    pub switch_min: f64,
    pub switch_max: f64,
    /// Switching is multiplied by `risk_decay^round`.
    pub risk_decay: f64,
    pub drop_base: f64,
    /// Added to `drop_base` while the running mean payoff is below the outside option.
    pub drop_low_mean: f64,
}

impl Default for BehaviorModel {
    fn default() -> Self {
        Self {
            switch_intercept: 0.9,
            switch_slope: 0.04,
            switch_min: 0.05,
            switch_max: 0.9,
            risk_decay: 0.93,
            drop_base: 0.02,
            drop_low_mean: 0.10,
        }
    }
}

impl BehaviorModel {
    /// Players never switch and never leave.
    pub fn inert() -> Self {
        Self {
            switch_intercept: 0.0,
            switch_slope: 0.0,
            switch_min: 0.0,
            switch_max: 0.0,
            risk_decay: 1.0,
            drop_base: 0.0,
            drop_low_mean: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("switch_intercept", self.switch_intercept),
            ("switch_slope", self.switch_slope),
            ("switch_min", self.switch_min),
            ("switch_max", self.switch_max),
            ("risk_decay", self.risk_decay),
            ("drop_base", self.drop_base),
            ("drop_low_mean", self.drop_low_mean),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SimError::Behavior(format!("{name} must be finite, got {v}")));
        }
        if self.switch_slope < 0.0 {
            return Err(SimError::Behavior("switch_slope must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_min) || !(0.0..=1.0).contains(&self.switch_max) {
            return Err(SimError::Behavior("switch_min and switch_max must lie in [0, 1]".into()));
        }
        if self.switch_min > self.switch_max {
            return Err(SimError::Behavior("switch_min exceeds switch_max".into()));
        }
        if !(0.0..=1.0).contains(&self.risk_decay) {
            return Err(SimError::Behavior("risk_decay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn switch_curve(&self, payoff: f64) -> f64 {
        (self.switch_intercept - self.switch_slope * payoff).clamp(self.switch_min, self.switch_max)
    }

    pub fn rematch_probability(&self, payoff: f64, round: usize) -> f64 {
        (self.switch_curve(payoff) * self.risk_decay.powi(round as i32)).clamp(0.0, 1.0)
    }

    pub fn drop_probability(&self, running_mean: Option<f64>, outside: f64) -> f64 {
        let low = running_mean.is_some_and(|m| m < outside);
        (self.drop_base + if low { self.drop_low_mean } else { 0.0 }).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Fair,
    Selfish,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Fair => "fair",
            Condition::Selfish => "selfish",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Continue,
    Rematch,
    Exit,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Action::Continue => "continue",
            Action::Rematch => "rematch",
            Action::Exit => "exit",
        }
    }
}

/// Slot means and player offsets shared by both conditions, in cents.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyMarket {
    pub slot_means: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl StudyMarket {
    pub fn mean_payoff(&self, player: usize, slot: usize) -> f64 {
        self.slot_means[slot] + self.offsets[player]
    }
}

pub fn generate_market(config: &StudyConfig) -> Result<StudyMarket, SimError> {
    config.validate()?;
    let (a, b) = config.study.beta_params();
    let beta = Beta::new(a, b).expect("study parameters are valid");
    let mut rng = rng::stream(config.seed, Domain::Market, 0);
    let slot_means = (0..config.slots).map(|_| beta.sample(&mut rng) * config.payoff_scale).collect();
    let mut rng = rng::stream(config.seed, Domain::Market, 1);
    let offsets = (0..config.players).map(|_| config.noise_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(StudyMarket { slot_means, offsets })
}

/// Mixes the learned return function with the observed switch fractions,
/// node by node. `fractions[b]` is `None` for a bin without observations;
/// nodes in such bins keep their value.
pub fn q_update(q: &GridModel, fractions: &[Option<f64>], alpha_learn: f64) -> Result<GridModel, SimError> {
    let intervals = GRID_NODES - 1;
    if fractions.is_empty() || !intervals.is_multiple_of(fractions.len()) {
        return Err(SimError::Misaligned { nodes: GRID_NODES, bins: fractions.len() });
    }
    if !(0.0..=1.0).contains(&alpha_learn) {
        return Err(SimError::Config(format!("alpha_learn must lie in [0, 1], got {alpha_learn}")));
    }
    let per_bin = intervals / fractions.len();
    let nodes = q
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, &old)| match fractions[(k / per_bin).min(fractions.len() - 1)] {
            Some(f) => (alpha_learn * old + (1.0 - alpha_learn) * f).clamp(0.0, 1.0),
            None => old,
        })
        .collect();
    Ok(GridModel::new(nodes)?)
}

/// One player's record for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerRound {
    pub round: usize,
    pub player: usize,
    /// Decision taken at the start of the round.
    pub action: Action,
    pub slot: Option<usize>,
    /// Realized payoff in cents; 0 when unmatched or exiting.
    pub payoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    /// Players deciding this round.
    pub active: usize,
    pub continues: usize,
    pub rematches: usize,
    pub exits: usize,
    /// Share of deciding players that asked for a new match (0 in round 1).
    pub engagement: f64,
    pub unmatched: usize,
    /// Total payment of all players this round, outside payments included.
    pub welfare: f64,
    /// Learned `q` used for this round's assignment (selfish condition only).
    pub q_snapshot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionOutcome {
    pub condition: Condition,
    pub log: Vec<PlayerRound>,
    pub rounds: Vec<RoundSummary>,
    /// Total payment per player in cents, outside payments included.
    pub payments: Vec<f64>,
    pub matched_payoffs: Vec<f64>,
    pub exited: usize,
}

impl ConditionOutcome {
    pub fn mean_utility(&self) -> f64 {
        mean(&self.payments)
    }

    /// Rematch requests over all decisions from round 2 onward.
    pub fn engagement(&self) -> f64 {
        let (req, total) = self.rounds.iter().skip(1).fold((0, 0), |(r, t), s| (r + s.rematches, t + s.active));
        if total == 0 {
            0.0
        } else {
            req as f64 / total as f64
        }
    }

    pub fn drop_rate(&self) -> f64 {
        self.exited as f64 / self.payments.len() as f64
    }

    pub fn realized_mean(&self) -> Option<f64> {
        (!self.matched_payoffs.is_empty()).then(|| mean(&self.matched_payoffs))
    }

    pub fn mean_utility_per_round(&self) -> Vec<f64> {
        let n = self.payments.len() as f64;
        self.rounds.iter().map(|r| r.welfare / n).collect()
    }
}

/// Round-by-round welfare ratio `selfish / fair`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoaTrace {
    pub per_round: Vec<Option<f64>>,
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub rounds_above_one: usize,
}

impl PoaTrace {
    fn new(fair: &ConditionOutcome, selfish: &ConditionOutcome) -> Self {
        let per_round: Vec<Option<f64>> = fair
            .rounds
            .iter()
            .zip(&selfish.rounds)
            .map(|(f, s)| (f.welfare > 0.0).then(|| s.welfare / f.welfare))
            .collect();
        let values: Vec<f64> = per_round.iter().flatten().copied().collect();
        let min = values.iter().copied().reduce(f64::min);
        let max = values.iter().copied().reduce(f64::max);
        let mean = (!values.is_empty()).then(|| mean(&values));
        let rounds_above_one = values.iter().filter(|&&r| r > 1.0).count();
        Self { per_round, min, mean, max, rounds_above_one }
    }
}

/// Both conditions of one seed plus the random-assignment baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub seed: u64,
    pub market: StudyMarket,
    pub fair: ConditionOutcome,
    pub selfish: ConditionOutcome,
    pub universal_payoffs: Vec<f64>,
    pub poa: PoaTrace,
}

impl PairOutcome {
    pub fn universal_mean(&self) -> f64 {
        mean(&self.universal_payoffs)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Random draws shared by both conditions of a pair.
struct SharedDraws {
    /// `noise[i][r]`: standard normal draw for player `i` in round `r`.
    noise: Vec<Vec<f64>>,
    /// `decision[i][r]`: uniform draw for player `i`'s decision in round `r`.
    decision: Vec<Vec<f64>>,
}

impl SharedDraws {
    fn new(config: &StudyConfig) -> Self {
        let noise = (0..config.players as u64)
            .map(|i| {
                let mut rng = rng::stream(config.seed, Domain::Payoff, i);
                (0..config.rounds).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect();
        let decision = (0..config.players as u64)
            .map(|i| {
                let mut rng = rng::stream(config.seed, Domain::Behavior, i);
                (0..config.rounds).map(|_| rng.random::<f64>()).collect()
            })
            .collect();
        Self { noise, decision }
    }

    fn payoff(&self, config: &StudyConfig, market: &StudyMarket, player: usize, slot: usize, round: usize) -> f64 {
        (market.mean_payoff(player, slot) + config.noise_sd * self.noise[player][round]).max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
struct PlayerState {
    exited: bool,
    slot: Option<usize>,
    abandoned: Vec<usize>,
    last_payoff: f64,
    /// Whether the player held a slot in the previous round.
    was_matched: bool,
    played: Vec<f64>,
    payment: f64,
}

/// Scores each requester against each free slot, assigns with the designer's
/// objective and then gives any requester left out the best remaining slot it
/// may still use.
pub fn assign_round(
    condition: Condition,
    config: &StudyConfig,
    market: &StudyMarket,
    requesters: &[usize],
    free_slots: &[usize],
    forbidden: impl Fn(usize, usize) -> bool,
    learned_q: &ReturnModel,
) -> Result<Vec<Option<usize>>, SimError> {
    if requesters.is_empty() {
        return Ok(vec![]);
    }
    if free_slots.is_empty() {
        return Ok(vec![None; requesters.len()]);
    }
    let utility = |r: usize, c: usize| {
        if forbidden(requesters[r], free_slots[c]) {
            0.0
        } else {
            config.normalize(market.mean_payoff(requesters[r], free_slots[c]))
        }
    };
    let rows: Vec<Vec<f64>> =
        (0..requesters.len()).map(|r| (0..free_slots.len()).map(|c| utility(r, c)).collect()).collect();
    let inst = MarketInstance::from_rows(&rows)?;
    let score = |u: f64| match condition {
        Condition::Fair => u,
        Condition::Selfish => match config.selfish_objective {
            SelfishObjective::Stationary => learned_q.pi_monopoly(u),
            SelfishObjective::RawQ => learned_q.q(u),
        },
    };
    let row_to_col = match (condition, config.selfish_objective) {
        (Condition::Fair, _) => solve_fair(&inst).assignment.row_to_col,
        (Condition::Selfish, SelfishObjective::Stationary) => {
            let models = vec![learned_q.clone(); requesters.len()];
            let sol = solve_selfish_integral(&inst, &models, Stationary::Monopoly)?;
            (0..requesters.len()).map(|r| (0..free_slots.len()).find(|&c| sol.matching.x()[[r, c]] > 0.5)).collect()
        }
        (Condition::Selfish, SelfishObjective::RawQ) => {
            let g = inst.weights().mapv(score);
            max_weight_matching(g.view()).row_to_col
        }
    };

    let mut taken = vec![false; free_slots.len()];
    for c in row_to_col.iter().flatten() {
        taken[*c] = true;
    }
    let mut out = Vec::with_capacity(requesters.len());
    for (r, assigned) in row_to_col.into_iter().enumerate() {
        let col = assigned.or_else(|| {
            let best = (0..free_slots.len())
                .filter(|&c| !taken[c] && !forbidden(requesters[r], free_slots[c]))
                .max_by(|&a, &b| score(utility(r, a)).total_cmp(&score(utility(r, b))).then(b.cmp(&a)));
            if let Some(c) = best {
                taken[c] = true;
            }
            best
        });
        out.push(col.map(|c| free_slots[c]));
    }
    Ok(out)
}

/// Samples one decision from a single uniform draw.
pub fn agent_step(
    last_payoff: f64,
    running_mean: Option<f64>,
    round: usize,
    outside: f64,
    behavior: &BehaviorModel,
    draw: f64,
) -> Action {
    let drop = behavior.drop_probability(running_mean, outside);
    if draw < drop {
        return Action::Exit;
    }
    if round > 1 {
        let rematch = behavior.rematch_probability(last_payoff, round);
        if draw < drop + (1.0 - drop) * rematch {
            return Action::Rematch;
        }
    }
    Action::Continue
}

fn run_condition(
    condition: Condition,
    config: &StudyConfig,
    behavior: &BehaviorModel,
    market: &StudyMarket,
    draws: &SharedDraws,
) -> Result<ConditionOutcome, SimError> {
    let (n, m) = (config.players, config.slots);
    let mut players = vec![PlayerState::default(); n];
    let mut log = Vec::new();
    let mut rounds = Vec::new();
    let mut matched_payoffs = Vec::new();
    let mut q = match ReturnModel::concave_prior_grid() {
        ReturnModel::Grid(g) => g,
        ReturnModel::Parametric { .. } => unreachable!("prior is a grid"),
    };

    for round in 1..=config.rounds {
        let r = round - 1;
        let mut actions = vec![None; n];
        let mut counts = (0, 0, 0);
        let mut bins = [(0usize, 0usize); PAYOFF_BINS];
        let mut round_welfare = 0.0;

        for (i, p) in players.iter_mut().enumerate() {
            if p.exited {
                round_welfare += config.outside_per_round;
                continue;
            }
            let running = (!p.played.is_empty()).then(|| mean(&p.played));
            let action =
                agent_step(p.last_payoff, running, round, config.outside_per_round, behavior, draws.decision[i][r]);
            match action {
                Action::Continue => counts.0 += 1,
                Action::Rematch => counts.1 += 1,
                Action::Exit => counts.2 += 1,
            }
            if round > 1 && p.was_matched {
                let b = &mut bins[config.bin_of(p.last_payoff)];
                b.1 += 1;
                if action == Action::Rematch {
                    b.0 += 1;
                }
            }
            actions[i] = Some(action);
        }

        let q_snapshot = if condition == Condition::Selfish {
            if round > 1 {
                let fractions: Vec<Option<f64>> =
                    bins.iter().map(|&(k, t)| (t > 0).then(|| k as f64 / t as f64)).collect();
                q = q_update(&q, &fractions, config.alpha_learn)?;
            }
            Some(q.nodes().to_vec())
        } else {
            None
        };

        let mut requesters = Vec::new();
        for (i, action) in actions.iter().enumerate() {
            let p = &mut players[i];
            match action {
                None => {}
                Some(Action::Exit) => {
                    p.exited = true;
                    let unplayed = (config.rounds - round + 1) as f64;
                    p.payment += config.outside_per_round * unplayed;
                    round_welfare += config.outside_per_round;
                    p.slot = None;
                }
                Some(Action::Rematch) => {
                    if let Some(s) = p.slot.take() {
                        p.abandoned.push(s);
                    }
                    requesters.push(i);
                }
                Some(Action::Continue) if round == 1 => requesters.push(i),
                Some(Action::Continue) => {}
            }
        }

        let mut held = vec![false; m];
        for p in &players {
            if let Some(s) = p.slot {
                held[s] = true;
            }
        }
        let free: Vec<usize> = (0..m).filter(|&j| !held[j]).collect();
        let learned = ReturnModel::Grid(q.clone());
        let assigned = assign_round(
            condition,
            config,
            market,
            &requesters,
            &free,
            |i, j| players[i].abandoned.contains(&j),
            &learned,
        )?;
        for (&i, slot) in requesters.iter().zip(assigned) {
            players[i].slot = slot;
        }

        let mut unmatched = 0;
        for (i, action) in actions.iter().enumerate() {
            let Some(action) = *action else { continue };
            let p = &mut players[i];
            let payoff = match (action, p.slot) {
                (Action::Exit, _) => 0.0,
                (_, Some(s)) => draws.payoff(config, market, i, s, r),
                (_, None) => {
                    unmatched += 1;
                    0.0
                }
            };
            if action != Action::Exit {
                p.was_matched = p.slot.is_some();
                if p.was_matched {
                    matched_payoffs.push(payoff);
                }
                p.last_payoff = payoff;
                p.played.push(payoff);
                p.payment += payoff;
                round_welfare += payoff;
            }
            log.push(PlayerRound { round, player: i, action, slot: p.slot, payoff });
        }

        let active = counts.0 + counts.1 + counts.2;
        rounds.push(RoundSummary {
            round,
            active,
            continues: counts.0,
            rematches: counts.1,
            exits: counts.2,
            engagement: if round > 1 && active > 0 { counts.1 as f64 / active as f64 } else { 0.0 },
            unmatched,
            welfare: round_welfare,
            q_snapshot,
        });
    }

    let exited = players.iter().filter(|p| p.exited).count();
    let payments = players.iter().map(|p| p.payment).collect();
    Ok(ConditionOutcome { condition, log, rounds, payments, matched_payoffs, exited })
}

fn universal_baseline(config: &StudyConfig, market: &StudyMarket, draws: &SharedDraws) -> Vec<f64> {
    let mut rng = rng::stream(config.seed, Domain::Universal, 0);
    let mut slots: Vec<usize> = (0..config.slots).collect();
    let mut out = Vec::with_capacity(config.rounds * config.players);
    for r in 0..config.rounds {
        slots.shuffle(&mut rng);
        for (i, &slot) in slots.iter().take(config.players).enumerate() {
            out.push(draws.payoff(config, market, i, slot, r));
        }
    }
    out
}

/// Simulates both conditions of one seed.
pub fn run_study(config: &StudyConfig, behavior: &BehaviorModel) -> Result<PairOutcome, SimError> {
    config.validate()?;
    behavior.validate()?;
    let market = generate_market(config)?;
    let draws = SharedDraws::new(config);
    let fair = run_condition(Condition::Fair, config, behavior, &market, &draws)?;
    let selfish = run_condition(Condition::Selfish, config, behavior, &market, &draws)?;
    let universal_payoffs = universal_baseline(config, &market, &draws);
    let poa = PoaTrace::new(&fair, &selfish);
    Ok(PairOutcome { seed: config.seed, market, fair, selfish, universal_payoffs, poa })
}

/// Runs `pairs` seeds `config.seed, config.seed + 1, ...` in parallel.
pub fn run_batch(config: &StudyConfig, behavior: &BehaviorModel, pairs: usize) -> Result<Vec<PairOutcome>, SimError> {
    if pairs == 0 {
        return Err(SimError::NoPairs);
    }
    config.validate()?;
    behavior.validate()?;
    (0..pairs as u64)
        .into_par_iter()
        .map(|k| run_study(&StudyConfig { seed: config.seed.wrapping_add(k), ..config.clone() }, behavior))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffHistogram {
    /// Bin edges in cents; the last bin also holds payoffs above the scale.
    pub edges: Vec<f64>,
    pub fair: Vec<usize>,
    pub selfish: Vec<usize>,
    pub universal: Vec<usize>,
    pub fair_mean: f64,
    pub selfish_mean: f64,
    pub universal_mean: f64,
}

pub fn realized_payoff_histogram(config: &StudyConfig, pairs: &[PairOutcome]) -> Result<PayoffHistogram, SimError> {
    if pairs.is_empty() {
        return Err(SimError::NoPairs);
    }
    let width = config.payoff_scale / PAYOFF_BINS as f64;
    let edges = (0..=PAYOFF_BINS).map(|b| b as f64 * width).collect();
    let hist = |values: &mut dyn Iterator<Item = f64>| {
        let mut counts = vec![0usize; PAYOFF_BINS];
        let (mut sum, mut k) = (0.0, 0usize);
        for v in values {
            counts[config.bin_of(v)] += 1;
            sum += v;
            k += 1;
        }
        (counts, if k == 0 { 0.0 } else { sum / k as f64 })
    };
    let (fair, fair_mean) = hist(&mut pairs.iter().flat_map(|p| p.fair.matched_payoffs.iter().copied()));
    let (selfish, selfish_mean) = hist(&mut pairs.iter().flat_map(|p| p.selfish.matched_payoffs.iter().copied()));
    let (universal, universal_mean) = hist(&mut pairs.iter().flat_map(|p| p.universal_payoffs.iter().copied()));
    Ok(PayoffHistogram { edges, fair, selfish, universal, fair_mean, selfish_mean, universal_mean })
}

/// Aggregates over a batch of pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub study: StudyKind,
    pub pairs: usize,
    pub fair_mean_utility: f64,
    pub selfish_mean_utility: f64,
    /// `1 - selfish / fair` on the mean utilities.
    pub utility_gap: f64,
    pub fair_engagement: f64,
    pub selfish_engagement: f64,
    pub fair_drop_rate: f64,
    pub selfish_drop_rate: f64,
    /// Pairs where the fair drop rate is higher, lower or equal.
    pub drop_diff_positive: usize,
    pub drop_diff_negative: usize,
    pub drop_diff_zero: usize,
    pub fair_realized_mean: f64,
    pub selfish_realized_mean: f64,
    pub universal_mean: f64,
    pub poa_min: Option<f64>,
    pub poa_mean: Option<f64>,
    pub poa_max: Option<f64>,
    pub pairs_with_poa_above_one: usize,
}

pub fn summarize(config: &StudyConfig, pairs: &[PairOutcome]) -> Result<StudySummary, SimError> {
    let hist = realized_payoff_histogram(config, pairs)?;
    let avg = |f: &dyn Fn(&PairOutcome) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let fair_mean_utility = avg(&|p| p.fair.mean_utility());
    let selfish_mean_utility = avg(&|p| p.selfish.mean_utility());
    let diffs: Vec<f64> = pairs.iter().map(|p| p.fair.drop_rate() - p.selfish.drop_rate()).collect();
    let poa_values: Vec<f64> = pairs.iter().filter_map(|p| p.poa.mean).collect();
    Ok(StudySummary {
        study: config.study,
        pairs: pairs.len(),
        fair_mean_utility,
        selfish_mean_utility,
        utility_gap: 1.0 - selfish_mean_utility / fair_mean_utility,
        fair_engagement: avg(&|p| p.fair.engagement()),
        selfish_engagement: avg(&|p| p.selfish.engagement()),
        fair_drop_rate: avg(&|p| p.fair.drop_rate()),
        selfish_drop_rate: avg(&|p| p.selfish.drop_rate()),
        drop_diff_positive: diffs.iter().filter(|&&d| d > 0.0).count(),
        drop_diff_negative: diffs.iter().filter(|&&d| d < 0.0).count(),
        drop_diff_zero: diffs.iter().filter(|&&d| d == 0.0).count(),
        fair_realized_mean: hist.fair_mean,
        selfish_realized_mean: hist.selfish_mean,
        universal_mean: hist.universal_mean,
        poa_min: pairs.iter().filter_map(|p| p.poa.min).reduce(f64::min),
        poa_mean: (!poa_values.is_empty()).then(|| mean(&poa_values)),
        poa_max: pairs.iter().filter_map(|p| p.poa.max).reduce(f64::max),
        pairs_with_poa_above_one: pairs.iter().filter(|p| p.poa.rounds_above_one > 0).count(),
    })
}
