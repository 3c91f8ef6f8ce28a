//! Market instances, fractional matchings and seeded instance samplers.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};

/// Absolute feasibility tolerance for row/column sums and utilities.
pub const FEAS_TOL: f64 = 1e-9;

/// Lower tolerance on individual assignment probabilities.
pub const NONNEG_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("weight matrix is empty")]
    Empty,
    #[error("weight matrix rows have different lengths (row {row} has {len}, expected {expected})")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("weight w[{i}][{j}] is NaN")]
    NotANumber { i: usize, j: usize },
    #[error("weight w[{i}][{j}] = {value} is outside [0, 1]")]
    OutOfRange { i: usize, j: usize, value: f64 },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid Beta parameters a={a}, b={b} (both must be positive)")]
    InvalidBeta { a: f64, b: f64 },
    #[error("matching is infeasible: {0}")]
    Infeasible(String),
}

/// Match qualities `w[i][j]` in `[0, 1]` between `m` side-M users (rows) and
/// `n` side-W users (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    w: Array2<f64>,
}

impl MarketInstance {
    pub fn new(w: Array2<f64>) -> Result<Self, MarketError> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(MarketError::Empty);
        }
        for ((i, j), &value) in w.indexed_iter() {
            if value.is_nan() {
                return Err(MarketError::NotANumber { i, j });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(MarketError::OutOfRange { i, j, value });
            }
        }
        Ok(Self { w })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MarketError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 {
            return Err(MarketError::Empty);
        }
        for (row, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(MarketError::Ragged { row, len: r.len(), expected: n });
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let w = Array2::from_shape_vec((m, n), flat).expect("shape checked above");
        Self::new(w)
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn n(&self) -> usize {
        self.w.ncols()
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[[i, j]]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.w.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Instance with rows and columns reordered: row `k` of the result is row
    /// `row_perm[k]` of `self`, likewise for columns.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let w = Array2::from_shape_fn((self.m(), self.n()), |(i, j)| self.w[[row_perm[i], col_perm[j]]]);
        Self { w }
    }
}

/// Validated instance from a row-major nested vector.
pub fn make_instance(rows: &[Vec<f64>]) -> Result<MarketInstance, MarketError> {
    MarketInstance::from_rows(rows)
}

/// A doubly-substochastic assignment `x` together with the utilities
/// `u_i = sum_j w_ij x_ij` it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalMatching {
    x: Array2<f64>,
    u: Array1<f64>,
}

impl FractionalMatching {
    pub fn new(inst: &MarketInstance, x: Array2<f64>) -> Result<Self, MarketError> {
        let u = utilities(inst, x.view())?;
        Ok(Self { x, u })
    }

    pub fn empty(inst: &MarketInstance) -> Self {
        Self { x: Array2::zeros((inst.m(), inst.n())), u: Array1::zeros(inst.m()) }
    }

    /// Integral matching from a row-to-column map.
    pub fn from_assignment(inst: &MarketInstance, row_to_col: &[Option<usize>]) -> Self {
        let mut x = Array2::zeros((inst.m(), inst.n()));
        for (i, col) in row_to_col.iter().enumerate() {
            if let Some(j) = *col {
                x[[i, j]] = 1.0;
            }
        }
        let u = utilities(inst, x.view()).expect("shape matches instance");
        Self { x, u }
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn u(&self) -> &Array1<f64> {
        &self.u
    }

    /// Sum of utilities, the fair objective `f(u)`.
    pub fn total_utility(&self) -> f64 {
        self.u.sum()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.x.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.x.sum_axis(ndarray::Axis(0))
    }

    /// Checks row sums, column sums, nonnegativity and the utility range.
    pub fn check_feasible(&self) -> Result<(), MarketError> {
        for (i, s) in self.row_sums().iter().enumerate() {
            if *s > 1.0 + FEAS_TOL {
                return Err(MarketError::Infeasible(format!("row {i} sums to {s}")));
            }
        }
        for (j, s) in self.col_sums().iter().enumerate() {
            if *s > 1.0 + FEAS_TOL {
                return Err(MarketError::Infeasible(format!("column {j} sums to {s}")));
            }
        }
        for ((i, j), &v) in self.x.indexed_iter() {
            if v < -NONNEG_TOL {
                return Err(MarketError::Infeasible(format!("x[{i}][{j}] = {v} is negative")));
            }
        }
        for (i, &u) in self.u.iter().enumerate() {
            if !(-NONNEG_TOL..=1.0 + FEAS_TOL).contains(&u) {
                return Err(MarketError::Infeasible(format!("u[{i}] = {u} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `u_i = sum_j w_ij x_ij` for every side-M user.
pub fn utilities(inst: &MarketInstance, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, MarketError> {
    if x.dim() != inst.w.dim() {
        return Err(MarketError::DimensionMismatch { expected: inst.w.dim(), got: x.dim() });
    }
    Ok((&inst.w * &x).sum_axis(ndarray::Axis(1)))
}

/// Distribution of the i.i.d. weight entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDistribution {
    Beta {
        a: f64,
        b: f64,
    },
    Uniform,
    /// Always returns the same matrix; `m` and `n` must match it.
    Explicit {
        rows: Vec<Vec<f64>>,
    },
}

impl WeightDistribution {
    pub fn describe(&self) -> String {
        match self {
            Self::Beta { a, b } => format!("beta({a},{b})"),
            Self::Uniform => "uniform".to_string(),
            Self::Explicit { rows } => format!("explicit({}x{})", rows.len(), rows.first().map_or(0, Vec::len)),
        }
    }
}

/// Seeded generator of random instances. Trial `t` draws from its own stream,
/// so `sample_trial` is a pure function of `(self, t, m, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSampler {
    pub distribution: WeightDistribution,
    pub seed: u64,
}

impl InstanceSampler {
    pub fn new(distribution: WeightDistribution, seed: u64) -> Result<Self, MarketError> {
        let sampler = Self { distribution, seed };
        sampler.validate()?;
        Ok(sampler)
    }

    pub fn beta(a: f64, b: f64, seed: u64) -> Result<Self, MarketError> {
        Self::new(WeightDistribution::Beta { a, b }, seed)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        match &self.distribution {
            WeightDistribution::Beta { a, b } => {
                if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(MarketError::InvalidBeta { a: *a, b: *b });
                }
            }
            WeightDistribution::Uniform => {}
            WeightDistribution::Explicit { rows } => {
                MarketInstance::from_rows(rows)?;
            }
        }
        Ok(())
    }

    pub fn sample(&self, m: usize, n: usize) -> Result<MarketInstance, MarketError> {
        self.sample_trial(0, m, n)
    }

    pub fn sample_trial(&self, trial: u64, m: usize, n: usize) -> Result<MarketInstance, MarketError> {
        self.validate()?;
        if m == 0 || n == 0 {
            return Err(MarketError::Empty);
        }
        let mut rng = rng::stream(self.seed, Domain::Instance, trial);
        let w = match &self.distribution {
            WeightDistribution::Beta { a, b } => {
                let beta = Beta::new(*a, *b).map_err(|_| MarketError::InvalidBeta { a: *a, b: *b })?;
                Array2::from_shape_simple_fn((m, n), || beta.sample(&mut rng))
            }
            WeightDistribution::Uniform => Array2::from_shape_simple_fn((m, n), || rng.random::<f64>()),
            WeightDistribution::Explicit { rows } => {
                let inst = MarketInstance::from_rows(rows)?;
                if inst.w.dim() != (m, n) {
                    return Err(MarketError::DimensionMismatch { expected: (m, n), got: inst.w.dim() });
                }
                return Ok(inst);
            }
        };
        MarketInstance::new(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn make_instance_accepts_valid_matrices() {
        let inst = make_instance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!((inst.m(), inst.n()), (2, 2));
        let single = make_instance(&[vec![0.5]]).unwrap();
        assert_eq!((single.m(), single.n()), (1, 1));
    }

    #[test]
    fn make_instance_rejects_bad_input() {
        assert!(matches!(make_instance(&[vec![1.2, 0.0]]), Err(MarketError::OutOfRange { i: 0, j: 0, .. })));
        assert!(matches!(make_instance(&[vec![f64::NAN]]), Err(MarketError::NotANumber { .. })));
        assert_eq!(make_instance(&[]), Err(MarketError::Empty));
        assert_eq!(make_instance(&[vec![]]), Err(MarketError::Empty));
        assert!(matches!(make_instance(&[vec![0.1, 0.2], vec![0.3]]), Err(MarketError::Ragged { row: 1, .. })));
    }

    #[test]
    fn sampler_is_deterministic() {
        let s = InstanceSampler::beta(2.0, 2.0, 7).unwrap();
        assert_eq!(s.sample(3, 3).unwrap(), s.sample(3, 3).unwrap());
        assert_ne!(s.sample_trial(1, 3, 3).unwrap(), s.sample_trial(2, 3, 3).unwrap());
    }

    #[test]
    fn sampler_means_match_beta_mean() {
        for (a, b) in [(2.0, 2.0), (1.0, 2.0)] {
            let s = InstanceSampler::beta(a, b, 3).unwrap();
            let inst = s.sample(1, 100_000).unwrap();
            let mean = inst.weights().mean().unwrap();
            assert_abs_diff_eq!(mean, a / (a + b), epsilon = 0.01);
        }
    }

    #[test]
    fn sampler_rejects_bad_beta() {
        assert!(matches!(InstanceSampler::beta(0.0, 2.0, 1), Err(MarketError::InvalidBeta { .. })));
        assert!(matches!(InstanceSampler::beta(1.0, -1.0, 1), Err(MarketError::InvalidBeta { .. })));
    }

    #[test]
    fn explicit_sampler_checks_dimensions() {
        let s = InstanceSampler::new(WeightDistribution::Explicit { rows: vec![vec![0.2, 0.4]] }, 0).unwrap();
        assert_eq!(s.sample(1, 2).unwrap().weight(0, 1), 0.4);
        assert!(s.sample(2, 2).is_err());
    }

    #[test]
    fn utilities_examples() {
        let inst = make_instance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let u = utilities(&inst, Array2::zeros((2, 2)).view()).unwrap();
        assert_eq!(u, array![0.0, 0.0]);
        let u = utilities(&inst, Array2::eye(2).view()).unwrap();
        assert_eq!(u, array![1.0, 1.0]);

        let inst = make_instance(&[vec![0.8, 0.7]]).unwrap();
        let u = utilities(&inst, array![[0.5, 0.5]].view()).unwrap();
        assert_abs_diff_eq!(u[0], 0.75, epsilon = 1e-15);

        assert!(matches!(utilities(&inst, Array2::zeros((2, 2)).view()), Err(MarketError::DimensionMismatch { .. })));
    }

    #[test]
    fn feasibility_check_flags_violations() {
        let inst = make_instance(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let ok = FractionalMatching::new(&inst, array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(ok.check_feasible().is_ok());
        let bad_row = FractionalMatching::new(&inst, array![[0.7, 0.7], [0.0, 0.0]]).unwrap();
        assert!(bad_row.check_feasible().is_err());
        let bad_col = FractionalMatching::new(&inst, array![[0.7, 0.0], [0.7, 0.0]]).unwrap();
        assert!(bad_col.check_feasible().is_err());
        let negative = FractionalMatching::new(&inst, array![[-0.1, 0.0], [0.0, 0.0]]).unwrap();
        assert!(negative.check_feasible().is_err());
    }
}
