//! Run configuration: one JSON file per reproducible run, with a handful of
//! command-line overrides for scalar knobs.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use tensor_greedy::bs_model::{validate, ModelParams, PayoffKind, ValidatedModel};
use tensor_greedy::greedy_l2::GreedyConfig;
use tensor_greedy::mc::McConfig;

/// Greedy knobs as they appear in config files; unspecified fields fall back
/// to the library defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyKnobs {
    pub max_terms: Option<usize>,
    pub target_rel_error: Option<f64>,
    pub fp_max_iters: Option<usize>,
    pub fp_tol: Option<f64>,
    pub rng_seed: Option<u64>,
}

impl GreedyKnobs {
    pub fn to_config(&self) -> GreedyConfig {
        self.to_config_from(GreedyConfig::default())
    }

    pub fn to_config_from(&self, base: GreedyConfig) -> GreedyConfig {
        GreedyConfig {
            max_terms: self.max_terms.unwrap_or(base.max_terms),
            target_rel_error: self.target_rel_error.unwrap_or(base.target_rel_error),
            fp_max_iters: self.fp_max_iters.unwrap_or(base.fp_max_iters),
            fp_tol: self.fp_tol.unwrap_or(base.fp_tol),
            rng_seed: self.rng_seed.unwrap_or(base.rng_seed),
        }
    }
}

/// Per-time-step enrichment defaults: looser than the payoff-study defaults
/// because every step re-decomposes and the scheme's own error is O(dt).
pub fn step_defaults() -> GreedyConfig {
    GreedyConfig {
        max_terms: 30,
        target_rel_error: 1e-4,
        ..GreedyConfig::default()
    }
}

/// The `varred` command's sweep over dimensions and correlations.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarredSection {
    pub dims: Vec<usize>,
    pub rhos: Vec<f64>,
    /// Spatial intervals per dimension count, e.g. `[[4, 16], [5, 8]]`.
    pub n_by_dim: Vec<(usize, usize)>,
    /// Time steps of the control-variate PDE solves.
    pub time_steps: usize,
    /// Common per-asset starting spot (defaults to the strike).
    pub s0: Option<f64>,
    /// Per-step greedy knobs for the PDE solves (defaults to `step_greedy`).
    pub greedy: Option<GreedyKnobs>,
    /// Greedy knobs for the payoff interpolation (defaults to the per-step
    /// knobs; high dimensions often want a looser target here).
    pub ic_greedy: Option<GreedyKnobs>,
}

impl VarredSection {
    pub fn n_for(&self, dim: usize) -> Result<usize> {
        self.n_by_dim
            .iter()
            .find(|(d, _)| *d == dim)
            .map(|(_, n)| *n)
            .with_context(|| format!("varred.n_by_dim has no entry for dimension {dim}"))
    }
}

fn default_payoff() -> PayoffKind {
    PayoffKind::BasketPut
}

fn default_time_steps() -> usize {
    100
}

fn default_curve_samples() -> usize {
    101
}

/// One archivable run: market model reference, resolution, and knobs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model parameter JSON, relative to this config file.
    pub model: PathBuf,
    #[serde(default = "default_payoff")]
    pub payoff: PayoffKind,
    /// Output directory, relative to this config file.
    pub output_dir: PathBuf,
    /// Spatial intervals per dimension.
    pub n_intervals: usize,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default)]
    pub greedy: GreedyKnobs,
    /// Per-time-step enrichment knobs for the PDE solver.
    pub step_greedy: Option<GreedyKnobs>,
    pub mc: Option<McConfig>,
    /// Starting spots (solve summary, varred default, price default).
    pub s0: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_unstable: bool,
    /// Time to maturity for `price` lookups (defaults to the full horizon).
    pub tau: Option<f64>,
    #[serde(default = "default_curve_samples")]
    pub curve_samples: usize,
    /// Spot vectors for `price` when not given on the command line.
    pub spots: Option<Vec<Vec<f64>>>,
    pub varred: Option<VarredSection>,
}

/// A loaded config with its paths resolved and the model validated.
pub struct Run {
    pub config: RunConfig,
    pub params: ModelParams,
    pub model: ValidatedModel,
    pub output_dir: PathBuf,
}

impl Run {
    pub fn load(config_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(config_path)
            .with_context(|| format!("cannot read config {}", config_path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("malformed config {}", config_path.display()))?;
        if config.n_intervals < 2 {
            bail!("n_intervals must be at least 2");
        }
        if config.time_steps < 1 {
            bail!("time_steps must be at least 1");
        }
        if config.curve_samples < 2 {
            bail!("curve_samples must be at least 2");
        }
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        let model_path = base.join(&config.model);
        let model_text = fs::read_to_string(&model_path)
            .with_context(|| format!("cannot read model file {}", model_path.display()))?;
        let params: ModelParams = serde_json::from_str(&model_text)
            .with_context(|| format!("malformed model file {}", model_path.display()))?;
        let model = validate(&params)?;
        let output_dir = base.join(&config.output_dir);
        Ok(Self {
            config,
            params,
            model,
            output_dir,
        })
    }

    /// Starting spots: configured, or at-the-money (strike per asset).
    pub fn s0(&self) -> Result<Vec<f64>> {
        match &self.config.s0 {
            Some(v) => {
                if v.len() != self.params.d {
                    bail!(
                        "s0 has {} entries for a {}-dimensional model",
                        v.len(),
                        self.params.d
                    );
                }
                Ok(v.clone())
            }
            None => Ok(vec![self.params.strike; self.params.d]),
        }
    }
}
