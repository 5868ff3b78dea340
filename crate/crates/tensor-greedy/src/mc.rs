//! Correlated geometric-Brownian-motion simulation and Monte-Carlo pricing,
//! plain and with the PDE-solution control variate.
//!
//! Paths follow the exact log-scheme
//! `log S^i_{k+1} = log S^i_k + (r - sigma_i^2/2) dt + sigma_i sum_j H_ij dW^j_k`
//! with `H` the Cholesky factor of the correlation matrix, so the transition
//! law is exact and the only discretization enters through the control
//! variate's stochastic integral.
//!
//! The control variate subtracts the discrete martingale
//! `Y* = sum_k e^{-r t_k} (H^T F(S_{t_k}) grad_S P(t_k, S_{t_k})) . dW_k`
//! with `F = diag(sigma_i S_i)` and `grad_S P` obtained from the separated
//! PDE solution by the chain rule through the spot map. Left-endpoint (Ito)
//! evaluation keeps `E[Y*] = 0` for any imperfect `P`, so the estimator
//! stays unbiased and only its variance depends on the solution quality.
//!
//! Randomness is drawn from per-chunk counter-based streams in a fixed
//! order, so results are bit-identical for a given seed regardless of the
//! number of worker threads.

use crate::bs_model::{validate, PayoffKind, ValidatedModel};
use crate::error::{Error, Result};
use crate::pde_greedy::PdeSolution;
use crate::tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Paths per random substream; chunks are processed independently and
/// combined in index order.
const CHUNK: usize = 4096;

/// Simulation size and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub rng_seed: u64,
    /// Mirror every odd path's increments from its even partner.
    #[serde(default)]
    pub antithetic: bool,
}

impl McConfig {
    fn check(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::Config("n_paths must be at least 2".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if self.antithetic && (self.n_paths % 2 != 0 || self.n_paths < 4) {
            return Err(Error::Config(
                "antithetic sampling needs an even n_paths of at least 4".into(),
            ));
        }
        Ok(())
    }
}

/// Simulated spots and the Brownian increments that produced them, on the
/// uniform grid `t_k = k T / n_steps`. Layout is path-major: a path's whole
/// trajectory is contiguous.
#[derive(Debug, Clone)]
pub struct PathBatch {
    d: usize,
    n_paths: usize,
    n_steps: usize,
    maturity: f64,
    antithetic: bool,
    /// `s[(p (n_steps+1) + k) d + i]` is asset `i` of path `p` at `t_k`.
    s: Vec<f64>,
    /// `dw[(p n_steps + k) d + j]` is `W^j_{t_{k+1}} - W^j_{t_k}` on path `p`.
    dw: Vec<f64>,
}

impl PathBatch {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    /// Spot vector of `path` at time index `step` (0 ..= n_steps).
    pub fn spot(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.n_steps + 1) + step) * self.d;
        &self.s[off..off + self.d]
    }

    /// Brownian increment of `path` over `[t_step, t_{step+1}]`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.n_steps + step) * self.d;
        &self.dw[off..off + self.d]
    }
}

/// A Monte-Carlo estimate with its sampling uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub estimate: f64,
    /// Sample variance of the per-unit estimator values (a unit is a path,
    /// or a mirrored pair under antithetic sampling).
    pub variance: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_paths: usize,
    pub elapsed_s: f64,
}

/// Streaming mean/variance accumulator that merges exactly (Welford).
#[derive(Debug, Clone, Default)]
struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d1 = x - self.mean;
        self.mean += d1 / self.n as f64;
        self.m2 += d1 * (x - self.mean);
    }

    fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let n1 = self.n as f64;
        let n2 = other.n as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * n2 / (n1 + n2);
        self.m2 += other.m2 + delta * delta * n1 * n2 / (n1 + n2);
        self.n += other.n;
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n as f64 - 1.0)).max(0.0)
        }
    }
}

fn make_result(stats: &RunningStats, n_paths: usize, started: Instant) -> McResult {
    let variance = stats.variance();
    let stderr = (variance / stats.n.max(1) as f64).sqrt();
    McResult {
        estimate: stats.mean,
        variance,
        stderr,
        ci_low: stats.mean - 1.96 * stderr,
        ci_high: stats.mean + 1.96 * stderr,
        n_paths,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

/// Draws the full path batch for `model` started at `s0`.
pub fn simulate(model: &ValidatedModel, s0: &[f64], cfg: &McConfig) -> Result<PathBatch> {
    cfg.check()?;
    let d = model.dim();
    if s0.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "initial spot vector of dimension {} in a {d}-dimensional model",
            s0.len()
        )));
    }
    for v in s0 {
        if !v.is_finite() || *v <= 0.0 {
            return Err(Error::OutOfDomain(format!(
                "initial spot {v} must be positive and finite"
            )));
        }
    }
    let p = model.params();
    let n_steps = cfg.n_steps;
    let n_paths = cfg.n_paths;
    let dt = p.maturity / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let h = model.chol_h().clone();
    let log_s0: Vec<f64> = s0.iter().map(|v| v.ln()).collect();
    let drift: Vec<f64> = p
        .sigma
        .iter()
        .map(|sig| (p.r - 0.5 * sig * sig) * dt)
        .collect();

    let s_stride = (n_steps + 1) * d;
    let dw_stride = n_steps * d;
    let mut s = vec![0.0; n_paths * s_stride];
    let mut dw = vec![0.0; n_paths * dw_stride];

    s.par_chunks_mut(CHUNK * s_stride)
        .zip(dw.par_chunks_mut(CHUNK * dw_stride))
        .enumerate()
        .for_each(|(chunk, (sc, dwc))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(chunk as u64);
            let in_chunk = sc.len() / s_stride;
            let mut logs = vec![0.0; d];
            for q in 0..in_chunk {
                let path = chunk * CHUNK + q;
                let sp = &mut sc[q * s_stride..(q + 1) * s_stride];
                let dwp = &mut dwc[q * dw_stride..(q + 1) * dw_stride];
                // CHUNK is even, so antithetic partners share a chunk.
                if cfg.antithetic && path % 2 == 1 {
                    let (prev, cur) = dwc.split_at_mut(q * dw_stride);
                    let prev = &prev[(q - 1) * dw_stride..];
                    for (w, v) in cur[..dw_stride].iter_mut().zip(prev) {
                        *w = -v;
                    }
                } else {
                    for w in dwp.iter_mut() {
                        *w = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let dwp = &dwc[q * dw_stride..(q + 1) * dw_stride];
                logs.copy_from_slice(&log_s0);
                sp[..d].copy_from_slice(&log_s0);
                for v in sp[..d].iter_mut() {
                    *v = v.exp();
                }
                for k in 0..n_steps {
                    let wk = &dwp[k * d..(k + 1) * d];
                    for i in 0..d {
                        let mut noise = 0.0;
                        for (j, w) in wk.iter().enumerate().take(i + 1) {
                            noise += h[(i, j)] * w;
                        }
                        logs[i] += drift[i] + p.sigma[i] * noise;
                    }
                    let out = &mut sc[(q * (n_steps + 1) + k + 1) * d..];
                    for i in 0..d {
                        out[i] = logs[i].exp();
                    }
                }
            }
        });

    Ok(PathBatch {
        d,
        n_paths,
        n_steps,
        maturity: p.maturity,
        antithetic: cfg.antithetic,
        s,
        dw,
    })
}

fn check_batch(batch: &PathBatch, model: &ValidatedModel) -> Result<()> {
    if batch.d != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}-dimensional paths in a {}-dimensional model",
            batch.d,
            model.dim()
        )));
    }
    if batch.maturity != model.params().maturity {
        return Err(Error::Config(format!(
            "paths were simulated to maturity {}, model has {}",
            batch.maturity,
            model.params().maturity
        )));
    }
    Ok(())
}

/// Applies `f` to every estimation unit (path, or antithetic pair average)
/// and accumulates mean and variance deterministically.
fn unit_stats<F>(batch: &PathBatch, f: F) -> Result<RunningStats>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let pairwise = batch.antithetic;
    let units = if pairwise {
        batch.n_paths / 2
    } else {
        batch.n_paths
    };
    let n_chunks = units.div_ceil(CHUNK);
    let partials: Vec<Result<RunningStats>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut stats = RunningStats::default();
            for u in c * CHUNK..(units.min((c + 1) * CHUNK)) {
                let v = if pairwise {
                    0.5 * (f(2 * u)? + f(2 * u + 1)?)
                } else {
                    f(u)?
                };
                stats.push(v);
            }
            Ok(stats)
        })
        .collect();
    let mut total = RunningStats::default();
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

/// Discounted sample mean of the payoff over the batch.
pub fn price_plain(
    batch: &PathBatch,
    model: &ValidatedModel,
    payoff: PayoffKind,
) -> Result<McResult> {
    let started = Instant::now();
    check_batch(batch, model)?;
    let disc = (-model.params().r * batch.maturity).exp();
    let stats = unit_stats(batch, |p| {
        Ok(disc * model.payoff_spot(batch.spot(p, batch.n_steps), payoff)?)
    })?;
    Ok(make_result(&stats, batch.n_paths, started))
}

fn check_pde(model: &ValidatedModel, pde: &PdeSolution) -> Result<()> {
    pde.check()?;
    let a = model.params();
    let b = &pde.params;
    let same = a.d == b.d
        && a.r == b.r
        && a.strike == b.strike
        && a.maturity == b.maturity
        && a.sigma == b.sigma;
    if !same {
        return Err(Error::Config(
            "control-variate solution was computed for different model parameters".into(),
        ));
    }
    let vb = validate(b)?;
    for i in 0..a.d {
        for j in 0..a.d {
            if model.rho_entry(i, j) != vb.rho_entry(i, j) {
                return Err(Error::Config(
                    "control-variate solution was computed for a different correlation".into(),
                ));
            }
        }
    }
    Ok(())
}

/// The discrete stochastic integral `Y*` along one path.
fn control_term(
    batch: &PathBatch,
    model: &ValidatedModel,
    pde: &PdeSolution,
    path: usize,
) -> Result<f64> {
    let d = batch.d;
    let p = model.params();
    let scale = model.psi_scale();
    let h = model.chol_h();
    let dt = batch.dt();
    let mut x = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut y = 0.0;
    for k in 0..batch.n_steps {
        let t_k = k as f64 * dt;
        let tau = batch.maturity - t_k;
        let idx = ((tau / pde.dt).round() as usize).min(pde.m);
        let slice = &pde.slices[idx];
        if slice.rank() == 0 {
            continue;
        }
        let spot = batch.spot(path, k);
        for i in 0..d {
            // psi(s) < 1 for finite s; the min guards rounding saturation,
            // where the last mesh cell's slope is used.
            x[i] = (spot[i] / (spot[i] + scale)).min(1.0);
        }
        let grad = tensor::gradient_eval(slice, &x)?;
        for i in 0..d {
            let dpsi = scale / ((spot[i] + scale) * (spot[i] + scale));
            w[i] = grad[i] * dpsi * p.sigma[i] * spot[i];
        }
        let dwk = batch.increment(path, k);
        let df = (-p.r * t_k).exp();
        for j in 0..d {
            let mut acc = 0.0;
            for i in j..d {
                acc += w[i] * h[(i, j)];
            }
            y += df * acc * dwk[j];
        }
    }
    Ok(y)
}

/// Control-variate estimator: discounted payoff minus the martingale `Y*`
/// built from the PDE solution's spot gradient.
pub fn price_cv(
    batch: &PathBatch,
    model: &ValidatedModel,
    payoff: PayoffKind,
    pde: &PdeSolution,
) -> Result<McResult> {
    let started = Instant::now();
    check_batch(batch, model)?;
    check_pde(model, pde)?;
    let disc = (-model.params().r * batch.maturity).exp();
    let stats = unit_stats(batch, |p| {
        let plain = disc * model.payoff_spot(batch.spot(p, batch.n_steps), payoff)?;
        Ok(plain - control_term(batch, model, pde, p)?)
    })?;
    Ok(make_result(&stats, batch.n_paths, started))
}

/// Sample statistics of the martingale term `Y*` alone; its mean must be
/// statistically indistinguishable from zero.
pub fn control_variate_stats(
    batch: &PathBatch,
    model: &ValidatedModel,
    pde: &PdeSolution,
) -> Result<McResult> {
    let started = Instant::now();
    check_batch(batch, model)?;
    check_pde(model, pde)?;
    let stats = unit_stats(batch, |p| control_term(batch, model, pde, p))?;
    Ok(make_result(&stats, batch.n_paths, started))
}

/// One pricing problem for the variance table.
pub struct VarianceRun<'a> {
    pub model: &'a ValidatedModel,
    pub s0: Vec<f64>,
    pub pde: &'a PdeSolution,
}

/// One row of the variance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub dim: usize,
    pub rho: f64,
    pub var_plain: f64,
    pub var_cv: f64,
}

impl VarianceRow {
    pub fn ratio(&self) -> f64 {
        self.var_plain / self.var_cv
    }
}

/// Plain and control-variate estimator variances on shared paths, one row
/// per run. The reported `rho` is the (0,1) correlation entry (0 for d=1).
pub fn variance_report(
    runs: &[VarianceRun<'_>],
    payoff: PayoffKind,
    cfg: &McConfig,
) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let batch = simulate(run.model, &run.s0, cfg)?;
        let plain = price_plain(&batch, run.model, payoff)?;
        let cv = price_cv(&batch, run.model, payoff, run.pde)?;
        let d = run.model.dim();
        rows.push(VarianceRow {
            dim: d,
            rho: if d > 1 { run.model.rho_entry(0, 1) } else { 0.0 },
            var_plain: plain.variance,
            var_cv: cv.variance,
        });
    }
    Ok(rows)
}
