//! Subcommand implementations: wiring configs to the library and emitting
//! CSV tables plus JSON artifacts.

use crate::config::Run;
use anyhow::{bail, Context, Result};
use std::fs::{self, File};
use std::path::Path;
use tensor_greedy::bs_model::{validate, ModelParams, PayoffKind, Rho, ValidatedModel};
use tensor_greedy::fem1d::{build_mesh, Mesh1D};
use tensor_greedy::greedy_l2::{
    decompose, DecomposeReport, DenseGridTarget, GreedyConfig, TargetFunction,
};
use tensor_greedy::mc::{variance_report, VarianceRun};
use tensor_greedy::pde_greedy::{solve, PdeSolution, TimeGrid};
use tensor_greedy::tensor::SeparatedFunction;

fn meshes_for(model: &ValidatedModel, n_intervals: usize) -> Result<Vec<Mesh1D>> {
    let mesh = build_mesh(n_intervals)?;
    Ok(vec![mesh; model.dim()])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file =
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file =
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer(file, value)?;
    Ok(())
}

fn write_residuals(path: &Path, report: &DecomposeReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["n", "residual", "metric", "fp_sweeps"])?;
    for rec in &report.records {
        w.write_record(&[
            rec.n.to_string(),
            rec.residual.to_string(),
            rec.metric.to_string(),
            rec.fp_sweeps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Greedy decomposition of the unit-cube basket put, the payoff-study
/// experiment: emits the separated function and its residual curve.
pub fn cmd_decompose(run: &Run, cfg: &GreedyConfig) -> Result<()> {
    if run.config.payoff != PayoffKind::BasketPut {
        bail!("decompose studies the basket put payoff; got another payoff kind");
    }
    let meshes = meshes_for(&run.model, run.config.n_intervals)?;
    let target = TargetFunction::BasketPut {
        strike: run.params.strike,
    };
    let (u, report) = decompose(&target, &meshes, cfg)?;
    fs::create_dir_all(&run.output_dir)?;
    write_json(&run.output_dir.join("payoff.json"), &u)?;
    write_residuals(&run.output_dir.join("residuals.csv"), &report)?;
    let last = report.records.last().map_or(0.0, |r| r.residual);
    println!(
        "decomposed d={} basket put into {} terms (converged: {}, last residual {:e})",
        run.params.d,
        u.rank(),
        report.converged,
        last
    );
    Ok(())
}

/// Initial condition of the pricing PDE: the mapped payoff interpolant,
/// compressed to a separated representation.
fn initial_condition(
    model: &ValidatedModel,
    payoff: PayoffKind,
    meshes: &[Mesh1D],
    cfg: &GreedyConfig,
) -> Result<(SeparatedFunction, DecomposeReport)> {
    let target = TargetFunction::DenseGrid(DenseGridTarget::from_fn(meshes, |x| {
        model
            .payoff_cube(x, payoff)
            .expect("node coordinates stay inside the cube")
    })?);
    Ok(decompose(&target, meshes, cfg)?)
}

/// Diagonal spots `s`, `price_at(tau, (s, ..., s))` for the price curve.
fn write_curve(path: &Path, sol: &PdeSolution, tau: f64, samples: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["s", "price"])?;
    let d = sol.params.d;
    let s_max = 2.0 * sol.params.strike;
    for k in 0..samples {
        let s = s_max * k as f64 / (samples - 1) as f64;
        let price = sol.price_at(tau, &vec![s; d])?;
        w.write_record(&[s.to_string(), price.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_norms(path: &Path, sol: &PdeSolution) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "tau", "norm"])?;
    for (i, n) in sol.l2_norm_history()?.iter().enumerate() {
        w.write_record(&[
            i.to_string(),
            (i as f64 * sol.dt).to_string(),
            n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Relative l2 distance between a solution slice and the analytic geometric
/// put over all grid nodes with every coordinate strictly inside the cube's
/// right face (the image of finite spots).
fn geometric_slice_error(
    model: &ValidatedModel,
    sol: &PdeSolution,
    slice: usize,
) -> Result<f64> {
    let d = model.dim();
    if d > 4 {
        bail!("analytic comparison enumerates the full grid; supported for d <= 4");
    }
    let u = &sol.slices[slice];
    let tau = slice as f64 * sol.dt;
    let disc = (-model.params().r * tau).exp();
    let n = u.meshes()[0].n_nodes();
    let scale = model.psi_scale();
    let mut idx = vec![0usize; d];
    let mut num = 0.0;
    let mut den = 0.0;
    loop {
        // Skip nodes on the right face: they map to infinite spots.
        if idx.iter().all(|&j| j + 1 < n) {
            let spot: Vec<f64> = idx
                .iter()
                .map(|&j| {
                    let x = u.meshes()[0].nodes()[j];
                    scale * x / (1.0 - x)
                })
                .collect();
            let analytic = if spot.iter().any(|v| *v == 0.0) {
                // An asset at zero stays there, so the product does too.
                disc * model.params().strike
            } else {
                model.geometric_put_price_with_maturity(&spot, tau)?
            };
            let diff = u.node_value(&idx) - analytic;
            num += diff * diff;
            den += analytic * analytic;
        }
        // Advance the multi-index, last coordinate fastest.
        let mut dim = d;
        loop {
            if dim == 0 {
                return if den > 0.0 {
                    Ok((num / den).sqrt())
                } else {
                    bail!("analytic reference vanishes on the whole grid")
                };
            }
            dim -= 1;
            idx[dim] += 1;
            if idx[dim] < n {
                break;
            }
            idx[dim] = 0;
        }
    }
}

#[derive(serde::Serialize)]
struct SolveSummary {
    time_steps: usize,
    dt: f64,
    dt_bound: f64,
    stability_warning: bool,
    ic_rank: usize,
    ic_converged: bool,
    max_rank: usize,
    price_at_s0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    geometric_rel_error: Option<f64>,
}

/// Full pipeline: payoff decomposition, IMEX greedy time stepping, price
/// curve and norm history, plus an analytic check for geometric configs.
pub fn cmd_solve(
    run: &Run,
    cfg: &GreedyConfig,
    step_cfg: &GreedyConfig,
    allow_unstable: bool,
) -> Result<()> {
    let meshes = meshes_for(&run.model, run.config.n_intervals)?;
    let (u0, ic_report) = initial_condition(&run.model, run.config.payoff, &meshes, cfg)?;
    let grid = TimeGrid::new(run.params.maturity, run.config.time_steps)?;
    let sol = solve(
        &run.model,
        &u0,
        &grid,
        step_cfg,
        allow_unstable || run.config.allow_unstable,
    )?;
    fs::create_dir_all(&run.output_dir)?;
    write_json(&run.output_dir.join("solution.json"), &sol)?;
    write_norms(&run.output_dir.join("norms.csv"), &sol)?;
    let horizon = sol.m as f64 * sol.dt;
    write_curve(
        &run.output_dir.join("curve.csv"),
        &sol,
        horizon,
        run.config.curve_samples,
    )?;
    let s0 = run.s0()?;
    let geometric_rel_error = if run.config.payoff == PayoffKind::GeometricPut {
        Some(geometric_slice_error(&run.model, &sol, sol.m)?)
    } else {
        None
    };
    let summary = SolveSummary {
        time_steps: sol.m,
        dt: sol.dt,
        dt_bound: run.model.stability_dt_bound(),
        stability_warning: sol.stability_warning,
        ic_rank: u0.rank(),
        ic_converged: ic_report.converged,
        max_rank: sol.slices.iter().map(|s| s.rank()).max().unwrap_or(0),
        price_at_s0: sol.price_at(horizon, &s0)?,
        geometric_rel_error,
    };
    write_json(&run.output_dir.join("summary.json"), &summary)?;
    println!(
        "solved {} steps of dt = {:e} (bound {:e}); price at s0 = {}",
        summary.time_steps, summary.dt, summary.dt_bound, summary.price_at_s0
    );
    if let Some(e) = summary.geometric_rel_error {
        println!("geometric analytic relative error at the horizon: {e:e}");
    }
    if summary.stability_warning {
        eprintln!("warning: time step exceeds the stability bound");
    }
    Ok(())
}

fn load_solution(run: &Run) -> Result<PdeSolution> {
    let path = run.output_dir.join("solution.json");
    let text = fs::read_to_string(&path).with_context(|| {
        format!("cannot read {} (run `tg solve` first)", path.display())
    })?;
    let sol: PdeSolution = serde_json::from_str(&text)
        .with_context(|| format!("malformed solution file {}", path.display()))?;
    sol.check()?;
    if sol.params != run.params {
        bail!("solution file was produced for different model parameters");
    }
    Ok(sol)
}

/// Prices a stored solution at the requested spots.
pub fn cmd_price(run: &Run, tau: Option<f64>, spot_args: &[String]) -> Result<()> {
    let sol = load_solution(run)?;
    let d = run.params.d;
    let mut spots: Vec<Vec<f64>> = Vec::new();
    for arg in spot_args {
        let parsed: std::result::Result<Vec<f64>, _> =
            arg.split(',').map(|t| t.trim().parse::<f64>()).collect();
        spots.push(parsed.with_context(|| format!("malformed spot vector {arg:?}"))?);
    }
    if spots.is_empty() {
        spots = match &run.config.spots {
            Some(s) => s.clone(),
            None => vec![run.s0()?],
        };
    }
    for s in &spots {
        if s.len() != d {
            bail!("spot vector {s:?} does not have dimension {d}");
        }
    }
    let tau = tau
        .or(run.config.tau)
        .unwrap_or(sol.m as f64 * sol.dt);
    fs::create_dir_all(&run.output_dir)?;
    let mut w = csv_writer(&run.output_dir.join("prices.csv"))?;
    let mut header: Vec<String> = (1..=d).map(|i| format!("s{i}")).collect();
    header.push("price".into());
    w.write_record(&header)?;
    for s in &spots {
        let price = sol.price_at(tau, s)?;
        let mut rec: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        rec.push(price.to_string());
        w.write_record(&rec)?;
        println!("tau = {tau}: price{s:?} = {price}");
    }
    w.flush()?;
    Ok(())
}

/// Compares every slice of a stored geometric-put solution against the
/// closed form.
pub fn cmd_error(run: &Run) -> Result<()> {
    if run.config.payoff != PayoffKind::GeometricPut {
        bail!("analytic error reporting needs the geometric put payoff");
    }
    let sol = load_solution(run)?;
    fs::create_dir_all(&run.output_dir)?;
    let mut w = csv_writer(&run.output_dir.join("error.csv"))?;
    w.write_record(["tau", "rel_error"])?;
    let mut last = 0.0;
    for i in 0..=sol.m {
        last = geometric_slice_error(&run.model, &sol, i)?;
        w.write_record(&[(i as f64 * sol.dt).to_string(), last.to_string()])?;
    }
    w.flush()?;
    println!("final-time relative grid error vs analytic: {last:e}");
    Ok(())
}

/// Variance tables: plain versus control-variate estimator variance across
/// dimensions and correlation levels, sharing paths within each row.
pub fn cmd_varred(run: &Run, step_cfg: &GreedyConfig, paths: Option<usize>) -> Result<()> {
    let section = run
        .config
        .varred
        .as_ref()
        .context("config has no varred section")?;
    let mut mc_cfg = run
        .config
        .mc
        .clone()
        .context("config has no mc section")?;
    if let Some(p) = paths {
        mc_cfg.n_paths = p;
    }
    if section.dims.is_empty() || section.rhos.is_empty() {
        bail!("varred needs at least one dimension and one correlation");
    }
    let pde_cfg = section
        .greedy
        .as_ref()
        .map_or_else(|| step_cfg.clone(), |k| k.to_config_from(step_cfg.clone()));
    let ic_cfg = section
        .ic_greedy
        .as_ref()
        .map_or_else(|| pde_cfg.clone(), |k| k.to_config_from(pde_cfg.clone()));
    let base = &run.params;
    fs::create_dir_all(&run.output_dir)?;
    let mut w = csv_writer(&run.output_dir.join("varred.csv"))?;
    w.write_record(["dim", "rho", "var_plain", "var_cv", "ratio"])?;
    for &rho in &section.rhos {
        for &dim in &section.dims {
            let params = ModelParams {
                d: dim,
                r: base.r,
                sigma: vec![base.sigma[0]; dim],
                rho: Rho::Constant { constant: rho },
                strike: base.strike,
                maturity: base.maturity,
            };
            let model = validate(&params)?;
            let meshes = meshes_for(&model, section.n_for(dim)?)?;
            let (u0, _) = initial_condition(&model, run.config.payoff, &meshes, &ic_cfg)?;
            let grid = TimeGrid::new(params.maturity, section.time_steps)?;
            let sol = solve(
                &model,
                &u0,
                &grid,
                &pde_cfg,
                run.config.allow_unstable,
            )?;
            let s0 = vec![section.s0.unwrap_or(base.strike); dim];
            let rows = variance_report(
                &[VarianceRun {
                    model: &model,
                    s0,
                    pde: &sol,
                }],
                run.config.payoff,
                &mc_cfg,
            )?;
            let row = &rows[0];
            w.write_record(&[
                row.dim.to_string(),
                row.rho.to_string(),
                row.var_plain.to_string(),
                row.var_cv.to_string(),
                row.ratio().to_string(),
            ])?;
            println!(
                "d = {}, rho = {}: var_plain = {:e}, var_cv = {:e}, ratio = {:.2}",
                row.dim,
                row.rho,
                row.var_plain,
                row.var_cv,
                row.ratio()
            );
        }
    }
    w.flush()?;
    Ok(())
}
