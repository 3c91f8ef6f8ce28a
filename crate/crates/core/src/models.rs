//! Return-probability functions `q(u)` and the stationary probability of
//! being in the system under the monopoly (two-state) and competition
//! (three-state) Markov chains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of nodes of a grid (learned) return model on `[0, 1]`.
pub const GRID_NODES: usize = 21;

/// Step of the central difference used as `q'` for grid models.
pub const GRID_DERIVATIVE_STEP: f64 = 1e-4;

/// Bisection tolerance for the competition first-order condition.
pub const COMPETITION_ROOT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("alpha exponent {0} is outside [0, 1)")]
    InvalidAlpha(f64),
    #[error("utility {0} is outside [0, 1]")]
    UtilityOutOfRange(f64),
    #[error("grid model needs {expected} node values, got {got}")]
    GridLength { expected: usize, got: usize },
    #[error("grid node {index} has value {value} outside [0, 1]")]
    GridValue { index: usize, value: f64 },
    #[error("eps = {0} is outside (0, 1]")]
    InvalidEps(f64),
    #[error("return model is not strictly concave (max sampled second difference {0:e})")]
    NotConcave(f64),
    #[error("assumption check needs at least 11 sample points, got {0}")]
    GridTooSmall(usize),
}

/// Piecewise-linear return model on `GRID_NODES` uniform nodes. The two
/// endpoint values are always pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GridModel {
    nodes: Vec<f64>,
}

impl GridModel {
    pub fn new(mut nodes: Vec<f64>) -> Result<Self, ModelError> {
        if nodes.len() != GRID_NODES {
            return Err(ModelError::GridLength { expected: GRID_NODES, got: nodes.len() });
        }
        for (index, &value) in nodes.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ModelError::GridValue { index, value });
            }
        }
        nodes[0] = 0.0;
        nodes[GRID_NODES - 1] = 0.0;
        Ok(Self { nodes })
    }

    /// Samples `f` at the nodes (clamping into `[0, 1]`).
    pub fn from_fn(f: impl Fn(f64) -> f64) -> Self {
        let nodes = (0..GRID_NODES).map(|k| f(Self::node_utility(k)).clamp(0.0, 1.0)).collect();
        Self::new(nodes).expect("values clamped into range")
    }

    pub fn node_utility(k: usize) -> f64 {
        k as f64 / (GRID_NODES - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn value(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let pos = u * (GRID_NODES - 1) as f64;
        let k = (pos.floor() as usize).min(GRID_NODES - 2);
        let t = pos - k as f64;
        self.nodes[k] * (1.0 - t) + self.nodes[k + 1] * t
    }
}

impl TryFrom<Vec<f64>> for GridModel {
    type Error = ModelError;

    fn try_from(nodes: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(nodes)
    }
}

impl From<GridModel> for Vec<f64> {
    fn from(g: GridModel) -> Self {
        g.nodes
    }
}

/// The probability `q(u)` that a user who received utility `u` comes back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub enum ReturnModel {
    /// `q(u) = u (1 - u)^(1 - alpha_exponent)` with `alpha_exponent` in `[0, 1)`.
    Parametric {
        alpha_exponent: f64,
    },
    Grid(GridModel),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawModel {
    Parametric { alpha: f64 },
    Grid(Vec<f64>),
}

impl TryFrom<RawModel> for ReturnModel {
    type Error = ModelError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        match raw {
            RawModel::Parametric { alpha } => Self::parametric(alpha),
            RawModel::Grid(nodes) => Ok(Self::Grid(GridModel::new(nodes)?)),
        }
    }
}

impl From<ReturnModel> for RawModel {
    fn from(model: ReturnModel) -> Self {
        match model {
            ReturnModel::Parametric { alpha_exponent } => RawModel::Parametric { alpha: alpha_exponent },
            ReturnModel::Grid(g) => RawModel::Grid(g.nodes),
        }
    }
}

/// Numerical verdict on the return-model assumptions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// `q(0) = q(1) = 0` and `0 <= q <= 1` on the samples.
    pub a1_ok: bool,
    /// Sampled values, derivatives and second differences are finite.
    pub a2_ok: bool,
    /// Every sampled second difference of `q` is negative.
    pub a3_ok: bool,
    /// Every sampled second difference of `q / (1 + q)` is negative.
    pub observation1_ok: bool,
    pub max_second_diff: f64,
    pub max_pi_second_diff: f64,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.a1_ok && self.a2_ok && self.a3_ok && self.observation1_ok
    }
}

impl ReturnModel {
    pub fn parametric(alpha_exponent: f64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&alpha_exponent) {
            return Err(ModelError::InvalidAlpha(alpha_exponent));
        }
        Ok(Self::Parametric { alpha_exponent })
    }

    /// The prior `q(u) = u (1 - u)` sampled on the grid.
    pub fn concave_prior_grid() -> Self {
        Self::Grid(GridModel::from_fn(|u| u * (1.0 - u)))
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, Self::Grid(_))
    }

    /// `q(u)`; `u` is clamped into `[0, 1]`.
    pub fn q(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Parametric { alpha_exponent } => {
                if *alpha_exponent == 0.0 {
                    u * (1.0 - u)
                } else {
                    u * (1.0 - u).powf(1.0 - alpha_exponent)
                }
            }
            Self::Grid(g) => g.value(u),
        }
    }

    pub fn eval_q(&self, u: f64) -> Result<f64, ModelError> {
        check_utility(u)?;
        Ok(self.q(u))
    }

    /// `q'(u)`. Analytic for the parametric family (`-inf` at `u = 1` when the
    /// exponent is positive); central difference with step
    /// [`GRID_DERIVATIVE_STEP`] for grid models, one-sided at the ends.
    pub fn q_prime(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Parametric { alpha_exponent } => {
                let a = *alpha_exponent;
                if a == 0.0 {
                    1.0 - 2.0 * u
                } else if u >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    (1.0 - u).powf(1.0 - a) - (1.0 - a) * u * (1.0 - u).powf(-a)
                }
            }
            Self::Grid(g) => {
                let lo = (u - GRID_DERIVATIVE_STEP).max(0.0);
                let hi = (u + GRID_DERIVATIVE_STEP).min(1.0);
                (g.value(hi) - g.value(lo)) / (hi - lo)
            }
        }
    }

    pub fn eval_q_prime(&self, u: f64) -> Result<f64, ModelError> {
        check_utility(u)?;
        Ok(self.q_prime(u))
    }

    /// Stationary probability of the in-system state without competition,
    /// `q / (1 + q)`.
    pub fn pi_monopoly(&self, u: f64) -> f64 {
        let q = self.q(u);
        q / (1.0 + q)
    }

    /// `q' / (1 + q)^2`.
    pub fn pi_monopoly_prime(&self, u: f64) -> f64 {
        let q = self.q(u);
        self.q_prime(u) / ((1.0 + q) * (1.0 + q))
    }

    /// Stationary probability of the in-system state when dissatisfied users
    /// leak to a competitor and come back with probability `eps`.
    pub fn pi_competition(&self, u: f64, eps: f64) -> f64 {
        let q = self.q(u);
        if q == 0.0 {
            return 0.0;
        }
        q / (1.0 + q + q / eps * (1.0 - u.clamp(0.0, 1.0)))
    }

    pub fn pi_competition_prime(&self, u: f64, eps: f64) -> f64 {
        let q = self.q(u);
        let denom = 1.0 + q + q / eps * (1.0 - u.clamp(0.0, 1.0));
        (self.q_prime(u) + q * q / eps) / (denom * denom)
    }

    /// Utility maximizing `q` (and hence the monopoly stationary probability).
    pub fn peak_utility(&self) -> f64 {
        match self {
            Self::Parametric { alpha_exponent } => 1.0 / (2.0 - alpha_exponent),
            Self::Grid(g) => {
                let mut best = 0;
                for (k, &v) in g.nodes.iter().enumerate() {
                    if v > g.nodes[best] {
                        best = k;
                    }
                }
                GridModel::node_utility(best)
            }
        }
    }

    /// Samples `grid_size` uniform points on `[0, 1]` and checks the
    /// assumptions. Grid models are judged on their own nodes, since a
    /// piecewise-linear function has zero curvature between nodes.
    pub fn check_assumptions(&self, grid_size: usize) -> Result<AssumptionReport, ModelError> {
        if grid_size < 11 {
            return Err(ModelError::GridTooSmall(grid_size));
        }
        let points: Vec<f64> = match self {
            Self::Parametric { .. } => (0..grid_size).map(|k| k as f64 / (grid_size - 1) as f64).collect(),
            Self::Grid(_) => (0..GRID_NODES).map(GridModel::node_utility).collect(),
        };
        let qs: Vec<f64> = points.iter().map(|&u| self.q(u)).collect();
        let pis: Vec<f64> = qs.iter().map(|q| q / (1.0 + q)).collect();

        let a1_ok =
            self.q(0.0).abs() <= 1e-12 && self.q(1.0).abs() <= 1e-12 && qs.iter().all(|q| (0.0..=1.0).contains(q));

        let second = |v: &[f64]| -> Vec<f64> { v.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect() };
        let q2 = second(&qs);
        let pi2 = second(&pis);
        let max_second_diff = q2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_pi_second_diff = pi2.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let interior = &points[1..points.len() - 1];
        let a2_ok = qs.iter().all(|q| q.is_finite())
            && q2.iter().all(|d| d.is_finite())
            && interior.iter().all(|&u| self.q_prime(u).is_finite());

        Ok(AssumptionReport {
            a1_ok,
            a2_ok,
            a3_ok: max_second_diff < 0.0,
            observation1_ok: max_pi_second_diff < 0.0,
            max_second_diff,
            max_pi_second_diff,
        })
    }

    pub fn is_strictly_concave(&self) -> bool {
        self.check_assumptions(101).map(|r| r.a3_ok).unwrap_or(false)
    }

    /// Maximizer of the competition stationary probability: the root of
    /// `eps = -q(u)^2 / q'(u)` on `[u', 1]`, where `q'(u') = 0`, found by
    /// bisection. Returns 1 when there is no interior root.
    pub fn argmax_pi_competition(&self, eps: f64) -> Result<f64, ModelError> {
        check_eps(eps)?;
        let report = self.check_assumptions(101)?;
        if !report.a3_ok {
            return Err(ModelError::NotConcave(report.max_second_diff));
        }
        let phi = |u: f64| {
            let d = self.q_prime(u);
            if d >= 0.0 {
                f64::INFINITY
            } else {
                let q = self.q(u);
                q * q / -d
            }
        };
        let mut lo = self.peak_utility();
        let mut hi = 1.0;
        if lo >= hi {
            return Ok(1.0);
        }
        while hi - lo > COMPETITION_ROOT_TOL {
            let mid = 0.5 * (lo + hi);
            if phi(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Which Markov chain turns utility into the probability of being in the
/// system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stationary {
    Monopoly,
    Competition { eps: f64 },
}

impl Stationary {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::Monopoly => Ok(()),
            Self::Competition { eps } => check_eps(*eps),
        }
    }

    pub fn value(&self, model: &ReturnModel, u: f64) -> f64 {
        match *self {
            Self::Monopoly => model.pi_monopoly(u),
            Self::Competition { eps } => model.pi_competition(u, eps),
        }
    }

    pub fn derivative(&self, model: &ReturnModel, u: f64) -> f64 {
        match *self {
            Self::Monopoly => model.pi_monopoly_prime(u),
            Self::Competition { eps } => model.pi_competition_prime(u, eps),
        }
    }

    /// Unconstrained maximizer of the stationary probability over `[0, 1]`,
    /// if the objective is known to be unimodal for this model.
    pub fn unimodal_peak(&self, model: &ReturnModel) -> Option<f64> {
        match *self {
            Self::Monopoly => match model {
                ReturnModel::Parametric { .. } => Some(model.peak_utility()),
                ReturnModel::Grid(_) => model.is_strictly_concave().then(|| model.peak_utility()),
            },
            Self::Competition { eps } => model.argmax_pi_competition(eps).ok(),
        }
    }
}

fn check_utility(u: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(ModelError::UtilityOutOfRange(u))
    }
}

fn check_eps(eps: f64) -> Result<(), ModelError> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidEps(eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alpha(a: f64) -> ReturnModel {
        ReturnModel::parametric(a).unwrap()
    }

    #[test]
    fn eval_q_examples() {
        assert_eq!(alpha(0.0).eval_q(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(alpha(0.0).eval_q(0.5).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(alpha(0.5).eval_q(0.5).unwrap(), 0.35355, epsilon = 1e-5);
        assert!(matches!(alpha(0.0).eval_q(1.5), Err(ModelError::UtilityOutOfRange(_))));
        assert!(matches!(alpha(0.0).eval_q(-0.1), Err(ModelError::UtilityOutOfRange(_))));
    }

    #[test]
    fn eval_q_prime_examples() {
        let m = alpha(0.0);
        assert_eq!(m.eval_q_prime(0.0).unwrap(), 1.0);
        assert_eq!(m.eval_q_prime(0.5).unwrap(), 0.0);
        assert_eq!(m.eval_q_prime(0.25).unwrap(), 0.5);
    }

    #[test]
    fn invalid_alpha_rejected() {
        assert_eq!(ReturnModel::parametric(1.5), Err(ModelError::InvalidAlpha(1.5)));
        assert_eq!(ReturnModel::parametric(1.0), Err(ModelError::InvalidAlpha(1.0)));
        assert!(ReturnModel::parametric(-0.1).is_err());
    }

    #[test]
    fn pi_monopoly_examples() {
        let m = alpha(0.0);
        assert_eq!(m.pi_monopoly(0.0), 0.0);
        assert_abs_diff_eq!(m.pi_monopoly(0.5), 0.2, epsilon = 1e-15);
        assert_eq!(m.pi_monopoly(1.0), 0.0);
        for a in [0.25, 0.5, 0.9] {
            assert_eq!(alpha(a).pi_monopoly(0.0), 0.0);
        }
    }

    #[test]
    fn pi_competition_examples() {
        let m = alpha(0.0);
        for eps in [1.0, 0.1, 0.001] {
            assert_eq!(m.pi_competition(0.0, eps), 0.0);
        }
        assert_abs_diff_eq!(m.pi_competition(0.5, 1.0), 0.18182, epsilon = 1e-5);
        assert_eq!(m.pi_competition(1.0, 0.1), 0.0);
        assert!(Stationary::Competition { eps: 0.0 }.validate().is_err());
        assert!(Stationary::Competition { eps: 1.5 }.validate().is_err());
    }

    #[test]
    fn assumptions_hold_for_parametric_family() {
        for a in [0.0, 0.25, 0.5, 0.75, 0.9] {
            let r = alpha(a).check_assumptions(101).unwrap();
            assert!(r.all_ok(), "alpha={a}: {r:?}");
            assert!(r.max_second_diff < 0.0);
        }
        assert!(alpha(0.0).check_assumptions(5).is_err());
    }

    #[test]
    fn non_concave_grid_is_flagged_not_rejected() {
        // Two humps: fails strict concavity on its nodes.
        let model = ReturnModel::Grid(GridModel::from_fn(|u| (0.3 * (1.0 + (12.0 * u).sin())).max(0.0)));
        let r = model.check_assumptions(21).unwrap();
        assert!(r.a1_ok);
        assert!(!r.a3_ok);
        assert!(r.max_second_diff > 0.0);
    }

    #[test]
    fn grid_interpolates_and_pins_endpoints() {
        let mut nodes = vec![0.5; GRID_NODES];
        nodes[10] = 0.7;
        let g = GridModel::new(nodes).unwrap();
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.nodes()[GRID_NODES - 1], 0.0);
        assert_abs_diff_eq!(g.value(0.525), 0.6, epsilon = 1e-12);
        assert!(GridModel::new(vec![0.1; 5]).is_err());
        assert!(GridModel::new(vec![1.1; GRID_NODES]).is_err());
    }

    #[test]
    fn serde_forms() {
        let p: ReturnModel = serde_json::from_str(r#"{"alpha": 0.25}"#).unwrap();
        assert_eq!(p, alpha(0.25));
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"alpha":0.25}"#);
        let g = ReturnModel::concave_prior_grid();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.starts_with('['));
        assert_eq!(serde_json::from_str::<ReturnModel>(&text).unwrap(), g);
        assert!(serde_json::from_str::<ReturnModel>(r#"{"alpha": 2.0}"#).is_err());
        assert!(serde_json::from_str::<ReturnModel>("[0.1, 0.2]").is_err());
    }

    #[test]
    fn competition_argmax_examples() {
        let m = alpha(0.0);
        let u = m.argmax_pi_competition(0.0256 / 0.6).unwrap();
        assert_abs_diff_eq!(u, 0.8, epsilon = 1e-4);
        let u1 = m.argmax_pi_competition(0.1).unwrap();
        let u2 = m.argmax_pi_competition(0.01).unwrap();
        let u3 = m.argmax_pi_competition(0.001).unwrap();
        assert!(u1 < u2 && u2 < u3 && u3 < 1.0);
        assert!(m.argmax_pi_competition(1e-8).unwrap() > 0.999);
        assert!(m.argmax_pi_competition(0.0).is_err());
    }

    #[test]
    fn competition_argmax_is_the_grid_maximizer() {
        let m = alpha(0.0);
        for eps in [1.0, 0.3, 0.05] {
            let star = m.argmax_pi_competition(eps).unwrap();
            let grid_best = (0..=100_000)
                .map(|k| k as f64 / 100_000.0)
                .max_by(|a, b| m.pi_competition(*a, eps).total_cmp(&m.pi_competition(*b, eps)))
                .unwrap();
            assert_abs_diff_eq!(star, grid_best, epsilon = 2e-5);
        }
    }

    #[test]
    fn non_concave_model_rejected_by_competition_argmax() {
        let model = ReturnModel::Grid(GridModel::from_fn(|u| (0.3 * (1.0 + (12.0 * u).sin())).max(0.0)));
        assert!(matches!(model.argmax_pi_competition(0.1), Err(ModelError::NotConcave(_))));
    }

    #[test]
    fn peak_utility_matches_derivative_root() {
        for a in [0.0, 0.5, 0.75] {
            let m = alpha(a);
            assert_abs_diff_eq!(m.q_prime(m.peak_utility()), 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(ReturnModel::concave_prior_grid().peak_utility(), 0.5, epsilon = 1e-12);
    }
}
