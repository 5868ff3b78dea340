//! Black-Scholes model data and closed-form mathematics.
//!
//! Everything that does not touch FEM assembly or time stepping lives here:
//! parameter validation (correlation structure, the matrix `Xi` and its
//! smallest eigenvalue), the change of variables `psi` onto the unit cube,
//! the transformed PDE coefficient fields `A`, `a_tilde`, `a`, the IMEX
//! stability bound, analytic prices (1-D put, geometric basket put), the
//! joint lognormal transition density, and pricing by greedy decomposition
//! of payoff times density.

use crate::error::{Error, Result};
use crate::fem1d::{build_mesh, Mesh1D};
use crate::greedy_l2::slice::{GAUSS8_W, GAUSS8_X};
use crate::greedy_l2::{
    decompose, DecomposeReport, DenseGridTarget, GreedyConfig, TargetFunction,
    WeightedAffineTarget,
};
use crate::tensor;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest dimension the density-decomposition pricer accepts.
pub const MAX_DENSITY_DIM: usize = 7;
/// Largest dimension for the dense-grid variant of the density pricer
/// (correlated assets need the full joint density on the grid).
pub const MAX_DENSE_DENSITY_DIM: usize = 4;

/// Correlation input: a single off-diagonal constant or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rho {
    Constant { constant: f64 },
    Matrix { matrix: Vec<Vec<f64>> },
}

/// Market and contract parameters.
///
/// JSON layout: `{"d":2, "r":0.05, "sigma":[0.2,0.3],
/// "rho":{"constant":0.5}, "K":1.0, "T":1.0}` (a full matrix is accepted
/// under `"rho":{"matrix":[[...],...]}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Number of assets.
    pub d: usize,
    /// Risk-free rate.
    pub r: f64,
    /// Per-asset volatilities.
    pub sigma: Vec<f64>,
    /// Correlation structure.
    pub rho: Rho,
    /// Strike.
    #[serde(rename = "K")]
    pub strike: f64,
    /// Maturity.
    #[serde(rename = "T")]
    pub maturity: f64,
}

/// Payoff selector shared by the solver and the pricing front ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    /// `(K - mean(S))_+`
    BasketPut,
    /// `(K - prod(S))_+`
    GeometricPut,
}

/// Parameters together with the derived quantities every consumer needs:
/// the dense correlation matrix, `Xi` with `Xi_ij = rho_ij sigma_i sigma_j`,
/// its smallest eigenvalue `alpha`, and the lower Cholesky factor `H` of the
/// correlation matrix (`H H^T = rho`).
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    params: ModelParams,
    rho: DMatrix<f64>,
    xi: DMatrix<f64>,
    alpha: f64,
    chol_h: DMatrix<f64>,
}

/// Checks parameter invariants and precomputes the spectral/Cholesky data.
///
/// Rejects non-positive volatilities, strike, or maturity, malformed or
/// non-positive-definite correlation structures (the error names the
/// offending eigenvalue), and dimension mismatches.
pub fn validate(params: &ModelParams) -> Result<ValidatedModel> {
    let d = params.d;
    if d == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    if params.sigma.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} volatilities for dimension {d}",
            params.sigma.len()
        )));
    }
    for (i, s) in params.sigma.iter().enumerate() {
        if !s.is_finite() || *s <= 0.0 {
            return Err(Error::ModelRejection(format!(
                "sigma[{i}] = {s} must be positive and finite"
            )));
        }
    }
    if !params.r.is_finite() {
        return Err(Error::ModelRejection("rate must be finite".into()));
    }
    if !params.strike.is_finite() || params.strike <= 0.0 {
        return Err(Error::ModelRejection("strike must be positive".into()));
    }
    if !params.maturity.is_finite() || params.maturity <= 0.0 {
        return Err(Error::ModelRejection("maturity must be positive".into()));
    }
    let rho = match &params.rho {
        Rho::Constant { constant } => {
            if !constant.is_finite() || constant.abs() > 1.0 {
                return Err(Error::ModelRejection(format!(
                    "constant correlation {constant} must lie in [-1, 1]"
                )));
            }
            DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { *constant })
        }
        Rho::Matrix { matrix } => {
            if matrix.len() != d || matrix.iter().any(|row| row.len() != d) {
                return Err(Error::ShapeMismatch(format!(
                    "correlation matrix must be {d}x{d}"
                )));
            }
            for (i, row) in matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if !v.is_finite() || v.abs() > 1.0 + 1e-12 {
                        return Err(Error::ModelRejection(format!(
                            "rho[{i}][{j}] = {v} must lie in [-1, 1]"
                        )));
                    }
                    if (v - matrix[j][i]).abs() > 1e-12 {
                        return Err(Error::ModelRejection(format!(
                            "correlation matrix is not symmetric at ({i},{j})"
                        )));
                    }
                }
                if (row[i] - 1.0).abs() > 1e-12 {
                    return Err(Error::ModelRejection(format!(
                        "rho[{i}][{i}] = {} must be 1",
                        row[i]
                    )));
                }
            }
            // Symmetrize exactly so downstream algebra sees rho_ij == rho_ji.
            DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.5 * (matrix[i][j] + matrix[j][i])
                }
            })
        }
    };
    let sig = &params.sigma;
    let xi = DMatrix::from_fn(d, d, |i, j| rho[(i, j)] * sig[i] * sig[j]);
    let eig = xi.clone().symmetric_eigen();
    let alpha = eig.eigenvalues.min();
    if !(alpha > 0.0) {
        return Err(Error::ModelRejection(format!(
            "Xi is not positive-definite: minimum eigenvalue {alpha:.6e}"
        )));
    }
    let chol = Cholesky::new(rho.clone()).ok_or_else(|| {
        Error::ModelRejection("correlation matrix is not positive-definite".into())
    })?;
    Ok(ValidatedModel {
        params: params.clone(),
        rho,
        xi,
        alpha,
        chol_h: chol.l(),
    })
}

/// Standard normal CDF.
pub(crate) fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard 1-D Black-Scholes put value.
pub fn bs_put_1d(s0: f64, strike: f64, r: f64, sigma: f64, maturity: f64) -> f64 {
    let st = sigma * maturity.max(0.0).sqrt();
    if st <= 0.0 {
        return (strike * (-r * maturity).exp() - s0).max(0.0);
    }
    let d1 = ((s0 / strike).ln() + (r + 0.5 * sigma * sigma) * maturity) / st;
    let d2 = d1 - st;
    strike * (-r * maturity).exp() * norm_cdf(-d2) - s0 * norm_cdf(-d1)
}

/// Price of a European put on one lognormal variable with log-mean `mu` and
/// log-standard-deviation `s`, discounted by `disc`:
/// `disc * E[(K - e^X)_+]`, `X ~ N(mu, s^2)`.
fn lognormal_put(strike: f64, mu: f64, s: f64, disc: f64) -> f64 {
    if s <= 0.0 {
        return disc * (strike - mu.exp()).max(0.0);
    }
    let k = strike.ln();
    disc * (strike * norm_cdf((k - mu) / s)
        - (mu + 0.5 * s * s).exp() * norm_cdf((k - mu - s * s) / s))
}

/// `E[(Y - K)_+]` for `Y` lognormal with log-mean `mu`, log-sd `s`.
fn lognormal_call_expectation(strike: f64, mu: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return (mu.exp() - strike).max(0.0);
    }
    let k = strike.ln();
    (mu + 0.5 * s * s).exp() * norm_cdf((mu + s * s - k) / s) - strike * norm_cdf((mu - k) / s)
}

/// Result of pricing by greedy decomposition of payoff times density.
#[derive(Debug, Clone)]
pub struct DensityPriceResult {
    /// Discounted integral of the full decomposition.
    pub price: f64,
    /// Discounted integral after each rank (cumulative; last entry = price).
    pub by_rank: Vec<f64>,
    /// Certified upper bound on the price deficit committed by the separable
    /// fast path, which drops the positive part of the deep-in-the-money
    /// payoff: the true price lies in `[price, price + clip_bound]` up to the
    /// decomposition residual. Zero when the positive part is kept (grid
    /// path) or the payoff is deterministic.
    pub clip_bound: f64,
    /// Greedy residual history.
    pub report: DecomposeReport,
}

impl ValidatedModel {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.d
    }

    /// Entry of the correlation matrix.
    pub fn rho_entry(&self, i: usize, j: usize) -> f64 {
        self.rho[(i, j)]
    }

    /// Smallest eigenvalue of `Xi`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Lower-triangular `H` with `H H^T = rho`.
    pub fn chol_h(&self) -> &DMatrix<f64> {
        &self.chol_h
    }

    fn check_cube_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.params.d {
            return Err(Error::ShapeMismatch(format!(
                "point of dimension {} in a {}-dimensional model",
                x.len(),
                self.params.d
            )));
        }
        for v in x {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(Error::OutOfDomain(format!(
                    "cube coordinate {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn check_spot_point(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.params.d {
            return Err(Error::ShapeMismatch(format!(
                "spot vector of dimension {} in а {}-dimensional model",
                s.len(),
                self.params.d
            )));
        }
        for v in s {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::OutOfDomain(format!(
                    "spot value {v} must be nonnegative and finite"
                )));
            }
        }
        Ok(())
    }

    /// Scale of the change of variables: `K/d`.
    pub fn psi_scale(&self) -> f64 {
        self.params.strike / self.params.d as f64
    }

    /// Maps a spot value to the unit interval: `psi(s) = s / (s + K/d)`.
    pub fn psi(&self, s: f64) -> Result<f64> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::OutOfDomain(format!(
                "psi needs a nonnegative finite argument, got {s}"
            )));
        }
        Ok(s / (s + self.psi_scale()))
    }

    /// Inverse map: `psi_inv(x) = (K/d) x / (1 - x)` for `x` in `[0, 1)`.
    pub fn psi_inv(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || !(0.0..1.0).contains(&x) {
            return Err(Error::OutOfDomain(format!(
                "psi_inv needs an argument in [0, 1), got {x}"
            )));
        }
        Ok(self.psi_scale() * x / (1.0 - x))
    }

    /// Diffusion matrix of the transformed PDE:
    /// `A_ij(x) = (rho_ij sigma_i sigma_j / 2) x_i(1-x_i) x_j(1-x_j)`.
    pub fn a_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_cube_point(x)?;
        let d = self.params.d;
        let w: Vec<f64> = x.iter().map(|v| v * (1.0 - v)).collect();
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = 0.5 * self.xi[(i, j)] * w[i] * w[j];
            }
        }
        Ok(a)
    }

    fn a_tilde_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let d = self.params.d;
        let sig = &self.params.sigma;
        let r = self.params.r;
        (0..d)
            .map(|i| {
                let mut v = r + sig[i] * sig[i] * x[i] - sig[i] * sig[i];
                for j in 0..d {
                    if j != i {
                        v += 0.5 * sig[i] * self.rho[(i, j)] * sig[j] * (2.0 * x[j] - 1.0);
                    }
                }
                v
            })
            .collect()
    }

    /// Reduced drift field `a_tilde` of the transformed PDE.
    pub fn a_tilde(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_cube_point(x)?;
        Ok(self.a_tilde_unchecked(x))
    }

    /// Full drift field `a_i(x) = x_i (1 - x_i) a_tilde_i(x)`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_cube_point(x)?;
        let at = self.a_tilde_unchecked(x);
        Ok(x.iter()
            .zip(&at)
            .map(|(v, a)| v * (1.0 - v) * a)
            .collect())
    }

    fn div_drift_unchecked(&self, x: &[f64]) -> f64 {
        let at = self.a_tilde_unchecked(x);
        let sig = &self.params.sigma;
        x.iter()
            .zip(&at)
            .zip(sig)
            .map(|((v, a), s)| (1.0 - 2.0 * v) * a + v * (1.0 - v) * s * s)
            .sum()
    }

    /// Divergence of the drift field at `x`.
    pub fn div_drift(&self, x: &[f64]) -> Result<f64> {
        self.check_cube_point(x)?;
        Ok(self.div_drift_unchecked(x))
    }

    /// Exact `max_i sup_{x in [0,1]^d} |a_tilde_i(x)|`.
    ///
    /// Each component is affine in every coordinate, so its extrema are the
    /// constant term plus the positive (resp. negative) parts of the
    /// per-coordinate slopes; cost is `O(d^2)`, no vertex enumeration.
    pub fn sup_a_tilde(&self) -> f64 {
        let d = self.params.d;
        let sig = &self.params.sigma;
        let r = self.params.r;
        let mut best: f64 = 0.0;
        for i in 0..d {
            let mut c0 = r - sig[i] * sig[i];
            let mut hi = 0.0;
            let mut lo = 0.0;
            let own = sig[i] * sig[i];
            hi += own.max(0.0);
            lo += own.min(0.0);
            for j in 0..d {
                if j != i {
                    let c = sig[i] * self.rho[(i, j)] * sig[j];
                    c0 -= 0.5 * c;
                    hi += c.max(0.0);
                    lo += c.min(0.0);
                }
            }
            best = best.max((c0 + hi).abs()).max((c0 + lo).abs());
        }
        best
    }

    /// `sup_{x in [0,1]^d} |div a(x)|` by exact coordinatewise maximization.
    ///
    /// The divergence is quadratic in each coordinate separately, so a cyclic
    /// sweep maximizes exactly over `{0, 1, interior vertex}` per coordinate;
    /// multiple deterministic starts (cube vertices up to d = 12, the center,
    /// seeded random points) guard against non-global stationary points.
    pub fn sup_div_drift(&self) -> f64 {
        let d = self.params.d;
        let mut starts: Vec<Vec<f64>> = vec![
            vec![0.5; d],
            vec![0.0; d],
            vec![1.0; d],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5d1f);
        for _ in 0..24 {
            starts.push((0..d).map(|_| rng.random_range(0.0..=1.0)).collect());
        }
        let mut best: f64 = 0.0;
        if d <= 12 {
            // All vertices: cheap exhaustive lower bound and good starts.
            let mut best_pos = (f64::NEG_INFINITY, vec![0.0; d]);
            let mut best_neg = (f64::NEG_INFINITY, vec![0.0; d]);
            let mut x = vec![0.0; d];
            for mask in 0usize..(1 << d) {
                for (k, v) in x.iter_mut().enumerate() {
                    *v = ((mask >> k) & 1) as f64;
                }
                let g = self.div_drift_unchecked(&x);
                best = best.max(g.abs());
                if g > best_pos.0 {
                    best_pos = (g, x.clone());
                }
                if -g > best_neg.0 {
                    best_neg = (-g, x.clone());
                }
            }
            starts.push(best_pos.1);
            starts.push(best_neg.1);
        }
        for start in &starts {
            for sign in [1.0, -1.0] {
                best = best.max(self.coordinate_ascent(start.clone(), sign));
            }
        }
        best
    }

    /// Maximizes `sign * div a` from `x` by exact per-coordinate quadratic
    /// line searches; returns the value reached.
    fn coordinate_ascent(&self, mut x: Vec<f64>, sign: f64) -> f64 {
        let d = x.len();
        let eval = |x: &[f64]| sign * self.div_drift_unchecked(x);
        let mut best = eval(&x);
        for _sweep in 0..100 {
            let mut improved = false;
            for k in 0..d {
                let old = x[k];
                x[k] = 0.0;
                let g0 = eval(&x);
                x[k] = 1.0;
                let g1 = eval(&x);
                x[k] = 0.5;
                let gh = eval(&x);
                // The slice is exactly quadratic: fit through 0, 1/2, 1.
                let qa = 2.0 * (g0 + g1) - 4.0 * gh;
                let qb = g1 - g0 - qa;
                let mut t_best = 0.0;
                let mut g_best = g0;
                if g1 > g_best {
                    t_best = 1.0;
                    g_best = g1;
                }
                if qa < 0.0 {
                    let tv = -qb / (2.0 * qa);
                    if tv > 0.0 && tv < 1.0 {
                        x[k] = tv;
                        let gv = eval(&x);
                        if gv > g_best {
                            t_best = tv;
                            g_best = gv;
                        }
                    }
                }
                x[k] = t_best;
                if g_best > best + 1e-14 * (1.0 + best.abs()) {
                    improved = true;
                }
                if g_best >= best {
                    best = g_best;
                } else {
                    x[k] = old;
                }
            }
            if !improved {
                break;
            }
        }
        best
    }

    /// Largest time step for which the IMEX scheme is provably L2-stable:
    /// `1 / (2 (4 (|a_tilde| + |div a|) / alpha + alpha / 2))`.
    ///
    /// The underlying estimate is proved for `r = 0`; for `r > 0` the same
    /// formula is applied as a heuristic.
    pub fn stability_dt_bound(&self) -> f64 {
        let na = self.sup_a_tilde();
        let nd = self.sup_div_drift();
        1.0 / (2.0 * (4.0 * (na + nd) / self.alpha + 0.5 * self.alpha))
    }

    /// Growth constant `C` of the discrete stability estimate
    /// (`|u^i| <= e^{2 C T} |u^0|` for steps below the bound), with
    /// `C = 2 ((|a_tilde| + |div a|) / eps + eps / 2)`, `eps = alpha / 2`.
    pub fn growth_constant(&self) -> f64 {
        let na = self.sup_a_tilde();
        let nd = self.sup_div_drift();
        let eps = 0.5 * self.alpha;
        2.0 * ((na + nd) / eps + 0.5 * eps)
    }

    /// Closed-form price of the geometric basket put `(K - prod S_i(T))_+`.
    pub fn geometric_put_price(&self, s0: &[f64]) -> Result<f64> {
        self.geometric_put_price_with_maturity(s0, self.params.maturity)
    }

    /// Same closed form with an arbitrary time to maturity (used to compare
    /// intermediate solver slices against the analytic solution).
    pub fn geometric_put_price_with_maturity(&self, s0: &[f64], tau: f64) -> Result<f64> {
        self.check_spot_point(s0)?;
        if s0.iter().any(|v| *v <= 0.0) {
            return Err(Error::OutOfDomain(
                "geometric price needs strictly positive spots".into(),
            ));
        }
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::OutOfDomain(format!(
                "time to maturity {tau} must be nonnegative"
            )));
        }
        let k = self.params.strike;
        let r = self.params.r;
        let p0: f64 = s0.iter().product();
        let disc = (-r * tau).exp();
        if tau == 0.0 {
            return Ok((k - p0).max(0.0));
        }
        // Y = sum_i log(S_i(tau)/S_i(0)) is normal.
        let mu_y: f64 = self
            .params
            .sigma
            .iter()
            .map(|s| (r - 0.5 * s * s) * tau)
            .sum();
        let var_y = self.xi.sum() * tau;
        if var_y <= 0.0 {
            return Ok(disc * (k - p0 * mu_y.exp()).max(0.0));
        }
        // (K - p0 e^Y)_+ is a put on the lognormal p0 e^Y.
        Ok(lognormal_put(k, p0.ln() + mu_y, var_y.sqrt(), disc))
    }

    /// Joint transition density of `S(t_final)` at `y`, given `S(t) = s_t`.
    pub fn lognormal_joint_density(
        &self,
        t_final: f64,
        y: &[f64],
        t: f64,
        s_t: &[f64],
    ) -> Result<f64> {
        let d = self.params.d;
        if y.len() != d || s_t.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "density arguments must have dimension {d}"
            )));
        }
        let tau = t_final - t;
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::OutOfDomain(format!(
                "density needs t < t_final, got a lag of {tau}"
            )));
        }
        for v in y.iter().chain(s_t) {
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::OutOfDomain(
                    "density arguments must be strictly positive".into(),
                ));
            }
        }
        let cov = &self.xi * tau;
        let chol = Cholesky::new(cov).ok_or_else(|| {
            Error::ModelRejection("log-return covariance is singular".into())
        })?;
        let z = DVector::from_fn(d, |i, _| {
            y[i].ln() - (s_t[i].ln() + (self.params.r - 0.5 * self.params.sigma[i].powi(2)) * tau)
        });
        let w = chol
            .l()
            .solve_lower_triangular(&z)
            .ok_or_else(|| Error::ModelRejection("log-return covariance is singular".into()))?;
        let quad = w.norm_squared();
        let log_det: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_jac: f64 = y.iter().map(|v| v.ln()).sum();
        let ln_pdf = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
            - log_jac;
        Ok(ln_pdf.exp())
    }

    /// Payoff in spot coordinates.
    pub fn payoff_spot(&self, s: &[f64], kind: PayoffKind) -> Result<f64> {
        self.check_spot_point(s)?;
        let k = self.params.strike;
        Ok(match kind {
            PayoffKind::BasketPut => {
                let mean: f64 = s.iter().sum::<f64>() / self.params.d as f64;
                (k - mean).max(0.0)
            }
            PayoffKind::GeometricPut => {
                let prod: f64 = s.iter().product();
                (k - prod).max(0.0)
            }
        })
    }

    /// Payoff in mapped cube coordinates; forced to zero whenever some
    /// `x_i = 1` (the image of `S_i = infinity`, where both puts vanish).
    pub fn payoff_cube(&self, x: &[f64], kind: PayoffKind) -> Result<f64> {
        self.check_cube_point(x)?;
        if x.iter().any(|v| *v >= 1.0) {
            return Ok(0.0);
        }
        let s: Vec<f64> = x
            .iter()
            .map(|v| self.psi_scale() * v / (1.0 - v))
            .collect();
        self.payoff_spot(&s, kind)
    }

    /// Tabulates the mapped payoff at every node of the meshes, row-major
    /// with the last dimension fastest (the layout dense-grid targets use).
    pub fn mapped_payoff_values(
        &self,
        meshes: &[Mesh1D],
        kind: PayoffKind,
    ) -> Result<Vec<f64>> {
        if meshes.len() != self.params.d {
            return Err(Error::ShapeMismatch(format!(
                "{} meshes for dimension {}",
                meshes.len(),
                self.params.d
            )));
        }
        let dims: Vec<usize> = meshes.iter().map(|m| m.n_nodes()).collect();
        let mut values = Vec::with_capacity(dims.iter().product());
        let mut point = vec![0.0; meshes.len()];
        let mut first_err = None;
        tensor::for_each_multi_index(&dims, |idx| {
            for (l, &j) in idx.iter().enumerate() {
                point[l] = meshes[l].nodes()[j];
            }
            match self.payoff_cube(&point, kind) {
                Ok(v) => values.push(v),
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                    values.push(0.0);
                }
            }
        });
        match first_err {
            Some(e) => Err(e),
            None => Ok(values),
        }
    }

    /// Marginal log-parameters of `S_l(t + tau)` given `S_l(t) = s0_l`.
    fn marginal_log_params(&self, s0: &[f64], tau: f64) -> Vec<(f64, f64)> {
        s0.iter()
            .zip(&self.params.sigma)
            .map(|(s, sig)| {
                (
                    s.ln() + (self.params.r - 0.5 * sig * sig) * tau,
                    sig * tau.sqrt(),
                )
            })
            .collect()
    }

    /// Mapped marginal density of dimension `l` against the hat basis:
    /// builds the moment blocks of `w(x) = g(psi_inv(x)) * psi_inv'(x)`.
    fn weighted_affine_target(
        &self,
        s0: &[f64],
        tau: f64,
        meshes: &[Mesh1D],
    ) -> WeightedAffineTarget {
        let d = self.params.d;
        let c = self.psi_scale();
        let logs = self.marginal_log_params(s0, tau);
        let mut a0 = Vec::with_capacity(d);
        let mut a1 = Vec::with_capacity(d);
        let mut b0 = Vec::with_capacity(d);
        let mut b1 = Vec::with_capacity(d);
        let mut b2 = Vec::with_capacity(d);
        // Log-space evaluation: the Jacobian blows up while the density
        // decays super-polynomially near x = 1; their product underflows
        // cleanly instead of producing inf * 0.
        let w_at = |x: f64, mu: f64, s: f64| -> f64 {
            if x <= 0.0 || x >= 1.0 {
                return 0.0;
            }
            let yv = c * x / (1.0 - x);
            let ln_y = yv.ln();
            let z = (ln_y - mu) / s;
            let ln_pdf =
                -0.5 * z * z - ln_y - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let ln_jac = c.ln() - 2.0 * (1.0 - x).ln();
            let lw = ln_pdf + ln_jac;
            if lw < -700.0 {
                0.0
            } else {
                lw.exp()
            }
        };
        const SUBPANELS: usize = 4;
        for (l, mesh) in meshes.iter().enumerate() {
            let (mu, s) = logs[l];
            let n = mesh.n_intervals();
            let nodes = mesh.nodes();
            let mut m0 = vec![0.0; mesh.n_nodes()];
            let mut m1 = vec![0.0; mesh.n_nodes()];
            let (mut q0, mut q1, mut q2) = (0.0, 0.0, 0.0);
            for e in 0..n {
                let (xa, xb) = (nodes[e], nodes[e + 1]);
                let h = xb - xa;
                for p in 0..SUBPANELS {
                    let lo = xa + h * p as f64 / SUBPANELS as f64;
                    let hi = lo + h / SUBPANELS as f64;
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    for (gx, gw) in GAUSS8_X.iter().zip(GAUSS8_W) {
                        let x = mid + half * gx;
                        let wt = half * gw;
                        let wv = w_at(x, mu, s);
                        if wv == 0.0 {
                            continue;
                        }
                        let yv = c * x / (1.0 - x);
                        let phi_l = (xb - x) / h;
                        let phi_r = (x - xa) / h;
                        m0[e] += wt * wv * phi_l;
                        m0[e + 1] += wt * wv * phi_r;
                        m1[e] += wt * wv * yv * phi_l;
                        m1[e + 1] += wt * wv * yv * phi_r;
                        q0 += wt * wv * wv;
                        q1 += wt * wv * wv * yv;
                        q2 += wt * wv * wv * yv * yv;
                    }
                }
            }
            a0.push(m0);
            a1.push(m1);
            b0.push(q0);
            b1.push(q1);
            b2.push(q2);
        }
        WeightedAffineTarget {
            c0: self.params.strike,
            c1: vec![-1.0 / d as f64; d],
            a0,
            a1,
            b0,
            b1,
            b2,
        }
    }

    /// Certified bound on `E[(mean(S_T) - K)_+]`, the part the separable
    /// pricing path drops: by convexity it is at most the average of the
    /// marginal call expectations, each univariate lognormal (no
    /// correlation enters). Discounted.
    fn clip_bound(&self, s0: &[f64], tau: f64) -> f64 {
        let d = self.params.d as f64;
        let disc = (-self.params.r * tau).exp();
        let total: f64 = self
            .marginal_log_params(s0, tau)
            .iter()
            .map(|&(mu, s)| lognormal_call_expectation(self.params.strike, mu, s))
            .sum();
        disc * total / d
    }

    /// Prices the basket put at valuation time `t` by greedy rank-one
    /// decomposition of payoff times transition density in mapped
    /// coordinates, integrating each term dimension by dimension.
    ///
    /// Independent assets use exact per-dimension density moments with the
    /// payoff kink dropped (deep in the money this is certified by
    /// `clip_bound`); correlated assets up to dimension 4 tabulate the full
    /// product on the grid. Higher correlated dimensions are unsupported.
    pub fn price_by_density_decomposition(
        &self,
        s0: &[f64],
        t: f64,
        n_intervals: usize,
        cfg: &GreedyConfig,
    ) -> Result<DensityPriceResult> {
        let d = self.params.d;
        if d > MAX_DENSITY_DIM {
            return Err(Error::UnsupportedDimension {
                dim: d,
                max: MAX_DENSITY_DIM,
                context: "density-decomposition pricing",
            });
        }
        self.check_spot_point(s0)?;
        if s0.iter().any(|v| *v <= 0.0) {
            return Err(Error::OutOfDomain(
                "density pricing needs strictly positive spots".into(),
            ));
        }
        let tau = self.params.maturity - t;
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Config(format!(
                "valuation time {t} must precede maturity {}",
                self.params.maturity
            )));
        }
        let disc = (-self.params.r * tau).exp();
        let k = self.params.strike;
        // Effectively deterministic terminal values: price the limit payoff.
        let max_var = self
            .params
            .sigma
            .iter()
            .map(|s| s * s * tau)
            .fold(0.0f64, f64::max);
        if max_var < 1e-12 {
            let mean: f64 =
                s0.iter().map(|s| s * (self.params.r * tau).exp()).sum::<f64>() / d as f64;
            let price = disc * (k - mean).max(0.0);
            return Ok(DensityPriceResult {
                price,
                by_rank: vec![price],
                clip_bound: 0.0,
                report: DecomposeReport::default(),
            });
        }
        let mesh = build_mesh(n_intervals)?;
        let meshes = vec![mesh; d];
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || self.rho[(i, j)] == 0.0));
        let (target, clip) = if diagonal {
            (
                TargetFunction::WeightedAffine(self.weighted_affine_target(s0, tau, &meshes)),
                self.clip_bound(s0, tau),
            )
        } else {
            if d > MAX_DENSE_DENSITY_DIM {
                return Err(Error::UnsupportedDimension {
                    dim: d,
                    max: MAX_DENSE_DENSITY_DIM,
                    context: "dense-grid density pricing with correlated assets",
                });
            }
            let c = self.psi_scale();
            let grid = DenseGridTarget::from_fn(&meshes, |x| {
                if x.iter().any(|v| *v <= 0.0 || *v >= 1.0) {
                    return 0.0;
                }
                let y: Vec<f64> = x.iter().map(|v| c * v / (1.0 - v)).collect();
                let mean: f64 = y.iter().sum::<f64>() / d as f64;
                let payoff = (k - mean).max(0.0);
                if payoff == 0.0 {
                    return 0.0;
                }
                let g = self
                    .lognormal_joint_density(self.params.maturity, &y, t, s0)
                    .unwrap_or(0.0);
                let jac: f64 = x.iter().map(|v| c / ((1.0 - v) * (1.0 - v))).product();
                payoff * g * jac
            })?;
            (TargetFunction::DenseGrid(grid), 0.0)
        };
        let (u, report) = decompose(&target, &meshes, cfg)?;
        let mass = tensor::mass_matrices(&meshes);
        let m_one: Vec<Vec<f64>> = mass
            .iter()
            .zip(&meshes)
            .map(|(m, mesh)| m.apply(&vec![1.0; mesh.n_nodes()]))
            .collect::<Result<_>>()?;
        let mut by_rank = Vec::with_capacity(u.rank());
        let mut acc = 0.0;
        for term in u.terms() {
            let mut p = 1.0;
            for (f, w) in term.factors.iter().zip(&m_one) {
                p *= f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
            acc += p;
            by_rank.push(disc * acc);
        }
        let price = by_rank.last().copied().unwrap_or(0.0);
        Ok(DensityPriceResult {
            price,
            by_rank,
            clip_bound: clip,
            report,
        })
    }
}
