//! Command dispatch: each command builds its inputs from the config, runs the
//! library, and writes a versioned `summary.json` plus plot-ready CSV.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use orthant_control::discounted::{
    extract_policy, representation_check, solve_discounted, verify_bounds, write_field_csv, write_policy_csv,
};
use orthant_control::domain::{canonical_1d, canonical_2d, ModelSpec};
use orthant_control::ergodic::{check_near_monotone, vanishing_discount_run, ErgodicOptions, RhoEstimate};
use orthant_control::policy::Policy;
use orthant_control::recurrence::{classify_recurrence, hitting_time_mc, TargetBall, Verdict};
use orthant_control::sde::{simulate_batch, write_paths_csv, ControlPolicy};
use orthant_control::verify::{default_catalog, end_to_end_suite, martingale_residual, MartingaleTestSpec, Status};
use serde::Serialize;
use serde_json::json;

use crate::config::{Command, ConfigError, RunConfig};
use crate::output::{write_atomic, write_json, Summary, SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Library(orthant_control::Error),
    Io(io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => e.fmt(f),
            RunError::Library(e) => e.fmt(f),
            RunError::Io(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<orthant_control::Error> for RunError {
    fn from(e: orthant_control::Error) -> Self {
        RunError::Library(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "validation",
            RunError::Library(e) if is_validation(e) => "validation",
            RunError::Library(_) => "solver",
            RunError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind() == "validation" {
            EXIT_VALIDATION
        } else {
            EXIT_SOLVER
        }
    }
}

fn is_validation(e: &orthant_control::Error) -> bool {
    use orthant_control::Error as E;
    match e {
        E::Validation { .. } | E::OutsideDomain { .. } | E::Config(_) => true,
        E::BatchPath { source, .. } | E::Ladder { source, .. } => is_validation(source),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub outputs: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    command: Command,
    outputs: Vec<String>,
}

impl Ctx<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.into());
        self.out.join(name)
    }

    fn summary<T: Serialize>(&mut self, name: &str, results: T) -> io::Result<()> {
        let p = self.path(name);
        write_json(
            &p,
            &Summary {
                schema_version: SCHEMA_VERSION,
                command: self.command.as_str(),
                seed: self.cfg.run.seed,
                results,
            },
        )
    }

    fn csv<F>(&mut self, name: &str, fill: F) -> io::Result<()>
    where
        F: FnOnce(&mut dyn Write) -> io::Result<()>,
    {
        let p = self.path(name);
        write_atomic(&p, fill)
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }
}

/// Runs `command`, writing artifacts under `out`, and finally a manifest.
/// On error an `error.json` is written next to the manifest.
pub fn run(cfg: &RunConfig, command: Command, out: &Path) -> Outcome {
    let started = Instant::now();
    let mut ctx = Ctx {
        cfg,
        out,
        command,
        outputs: Vec::new(),
    };
    let result = dispatch(&mut ctx);
    let (exit_code, status) = match &result {
        Ok(code) if *code == EXIT_OK => (EXIT_OK, "ok".to_string()),
        Ok(code) => (*code, "verification_failed".to_string()),
        Err(e) => {
            let err = json!({
                "schema_version": SCHEMA_VERSION,
                "command": command.as_str(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            let p = ctx.path("error.json");
            if let Err(io) = write_json(&p, &err) {
                eprintln!("could not write {}: {io}", p.display());
            }
            (e.exit_code(), format!("error: {e}"))
        }
    };
    if let Err(e) = write_manifest(&mut ctx, exit_code, &status, started.elapsed().as_secs_f64()) {
        eprintln!("could not write the manifest: {e}");
        return Outcome {
            exit_code: EXIT_SOLVER,
            outputs: ctx.outputs,
        };
    }
    if let Err(e) = &result {
        eprintln!("{}: {e}", command.as_str());
    }
    Outcome {
        exit_code,
        outputs: ctx.outputs,
    }
}

fn write_manifest(ctx: &mut Ctx<'_>, exit_code: i32, status: &str, wall: f64) -> io::Result<()> {
    let mut echo = ctx.cfg.clone();
    echo.run.command = Some(ctx.command);
    let text = toml::to_string(&echo).map_err(io::Error::other)?;
    let p = ctx.path("config.toml");
    write_atomic(&p, |w| w.write_all(text.as_bytes()))?;
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "command": ctx.command.as_str(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "seed": ctx.cfg.run.seed,
        "config": echo,
        "config_file": "config.toml",
        "wall_time_seconds": wall,
        "status": status,
        "exit_code": exit_code,
        "outputs": ctx.outputs.clone(),
    });
    let p = ctx.out.join("manifest.json");
    write_json(&p, &manifest)
}

fn dispatch(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    match ctx.command {
        Command::Simulate => simulate(ctx),
        Command::SolveDiscounted => solve_discounted_cmd(ctx),
        Command::SolveErgodic => solve_ergodic(ctx),
        Command::ProbeRecurrence => probe_recurrence(ctx),
        Command::Verify => verify(ctx),
        Command::Suite => suite(ctx),
    }
}

fn start_point(model: &ModelSpec, start: &Option<Vec<f64>>) -> Vec<f64> {
    start.clone().unwrap_or_else(|| model.domain.coords(model.reference_node))
}

fn simulate(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let s = &ctx.cfg.simulate;
    let model = ctx.cfg.build_model()?;
    let start = start_point(&model, &s.start);
    let policy = ControlPolicy::dirac(model.n_actions(), s.action);
    let paths = simulate_batch(&model, &policy, &start, s.horizon, s.dt, s.n_paths, ctx.seed())?;
    ctx.csv("paths.csv", |w| write_paths_csv(&paths, w))?;
    let d = model.dim();
    let n = paths.len() as f64;
    let mean_final: Vec<f64> = (0..d).map(|j| paths.iter().map(|p| p.final_state()[j]).sum::<f64>() / n).collect();
    let mean_xi = paths.iter().map(|p| *p.xi.last().unwrap()).sum::<f64>() / n;
    let outer = paths.iter().filter(|p| p.touched_outer).count() as f64 / n;
    ctx.summary(
        "summary.json",
        json!({
            "n_paths": paths.len(),
            "steps": paths[0].steps(),
            "dt": paths[0].dt,
            "horizon": s.horizon,
            "start": start,
            "action": s.action,
            "mean_final_state": mean_final,
            "mean_local_time": mean_xi,
            "touched_outer_fraction": outer,
        }),
    )?;
    Ok(EXIT_OK)
}

fn solve_discounted_cmd(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let model = ctx.cfg.build_model()?;
    let opts = ctx.cfg.solver_options();
    let field = solve_discounted(&model, &opts)?;
    let policy = extract_policy(&field, model.theta)?;
    let bounds = verify_bounds(&field);
    ctx.csv("value_field.csv", |w| write_field_csv(&field, w))?;
    ctx.csv("policy.csv", |w| write_policy_csv(&policy, w))?;
    let x0 = model.domain.coords(model.reference_node);
    let mut code = if bounds.pass { EXIT_OK } else { EXIT_VERIFICATION };
    let n = &ctx.cfg.numerics;
    let representation = if n.representation_paths > 0 {
        let r = representation_check(&field, &x0, n.representation_paths, n.representation_dt, ctx.seed())?;
        if r.error_bars > 4.0 {
            code = EXIT_VERIFICATION;
        }
        Some(r)
    } else {
        None
    };
    let log_u = field.log_value_at(model.theta, &x0)?;
    ctx.summary(
        "summary.json",
        json!({
            "alpha": model.alpha,
            "theta": model.theta,
            "kappa": model.kappa,
            "dtau": field.dtau,
            "steps": field.steps,
            "stored_slices": field.n_slices(),
            "reference_point": x0,
            "log_u_reference": log_u,
            "j_reference": log_u / model.theta,
            "bounds": bounds,
            "action_shares": policy.action_shares(),
            "representation": representation,
        }),
    )?;
    Ok(code)
}

fn default_ks(model: &ModelSpec, ks: &[f64]) -> Vec<f64> {
    if ks.is_empty() {
        let side = model.domain.side();
        vec![side / 2.0, 0.75 * side]
    } else {
        ks.to_vec()
    }
}

fn write_rho_table(est: &RhoEstimate, w: &mut dyn Write) -> io::Result<()> {
    writeln!(w, "k,alpha,rho_candidate,g_variation,bound_lhs,bound_rhs,bound_pass,harnack_ratio")?;
    for e in &est.table {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
            e.k, e.alpha, e.rho_candidate, e.g_variation, e.bound_lhs, e.bound_rhs, e.bound_pass, e.harnack_ratio
        )?;
    }
    Ok(())
}

fn write_nodal(model: &ModelSpec, name: &str, values: &[f64], w: &mut dyn Write) -> io::Result<()> {
    let d = model.dim();
    let cols: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    writeln!(w, "node,{},{name}", cols.join(","))?;
    let mut x = vec![0.0; d];
    for (i, v) in values.iter().enumerate() {
        model.domain.coords_into(i, &mut x);
        let xs: Vec<String> = x.iter().map(|c| format!("{c:.16e}")).collect();
        writeln!(w, "{i},{},{v:.16e}", xs.join(","))?;
    }
    Ok(())
}

fn solve_ergodic(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let model = ctx.cfg.build_model()?;
    let ks = default_ks(&model, &ctx.cfg.numerics.ks);
    let opts = ErgodicOptions {
        solver: ctx.cfg.solver_options(),
        ..ErgodicOptions::default()
    };
    let est = vanishing_discount_run(&model, &ctx.cfg.numerics.alphas, &ks, &opts)?;
    let nm = check_near_monotone(&model.coeffs, est.rho, &model.domain, model.n_actions());
    ctx.csv("rho_table.csv", |w| write_rho_table(&est, w))?;
    ctx.csv("u_hat.csv", |w| write_nodal(&model, "u_hat", &est.u_hat, w))?;
    ctx.csv("policy.csv", |w| write_policy_csv(&est.policy, w))?;
    ctx.summary(
        "summary.json",
        json!({
            "rho": est.rho,
            "rho_k": est.rho_k,
            "alphas": ctx.cfg.numerics.alphas,
            "ks": ks,
            "table": est.table,
            "residual": est.residual,
            "near_monotone": nm,
            "warnings": est.warnings,
            "action_shares": est.policy.action_shares(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn audited_policy(ctx: &Ctx<'_>, model: &ModelSpec) -> Result<(Policy, String), RunError> {
    match ctx.cfg.recurrence.action {
        Some(a) => Ok((
            Policy::uniform_action(model.domain.clone(), model.theta, model.n_actions(), a)?,
            format!("constant action {a}"),
        )),
        None => {
            let field = solve_discounted(model, &ctx.cfg.solver_options())?;
            Ok((extract_policy(&field, model.theta)?, "discounted optimum at theta".into()))
        }
    }
}

fn probe_recurrence(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let r = ctx.cfg.recurrence.clone();
    let model = ctx.cfg.build_model()?;
    let side = model.domain.side();
    let (policy, label) = audited_policy(ctx, &model)?;
    let ball = match (&r.ball_center, r.ball_radius) {
        (None, None) => TargetBall::default_for(&model.domain),
        (c, rad) => {
            let def = TargetBall::default_for(&model.domain);
            TargetBall::new(c.clone().unwrap_or(def.center), rad.unwrap_or(def.radius))?
        }
    };
    let query = r.query.clone().unwrap_or_else(|| vec![0.75 * side; model.dim()]);
    let radii = if r.radii.is_empty() { vec![1.5 * side, 2.0 * side, 3.0 * side] } else { r.radii.clone() };
    let mut report = classify_recurrence(&model, &policy, &ball, &query, &radii, r.eps)?;
    if r.mc_paths > 0 {
        let cp = ControlPolicy::stationary(policy.clone());
        report.mc = Some(hitting_time_mc(&model, &cp, &query, &ball, r.t_cap, r.dt, r.mc_paths, ctx.seed())?);
    }
    let rows = report.csv_rows();
    ctx.csv("recurrence.csv", |w| {
        writeln!(w, "radius,phi")?;
        for (rad, phi) in &rows {
            writeln!(w, "{rad:.16e},{phi:.16e}")?;
        }
        Ok(())
    })?;
    ctx.summary(
        "summary.json",
        json!({
            "policy": label,
            "ball": report.ball,
            "query": report.query,
            "phi_at_query": report.phi_at_query,
            "limit_estimate": report.limit_estimate,
            "last_increment": report.last_increment,
            "eps": report.eps,
            "verdict": report.verdict,
            "mc": report.mc,
            "sweeps": report.fields.iter().map(|f| f.sweeps).collect::<Vec<_>>(),
            "note": report.note,
        }),
    )?;
    Ok(if report.verdict == Verdict::Transient { EXIT_VERIFICATION } else { EXIT_OK })
}

fn verify(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let v = ctx.cfg.verify.clone();
    let model = ctx.cfg.build_model()?;
    let start = start_point(&model, &v.start);
    let spec = MartingaleTestSpec::new(&model, default_catalog(&model), v.checkpoints.clone(), start, v.dt)?;
    let policy = ControlPolicy::dirac(model.n_actions(), v.action);
    let report = martingale_residual(&model, &policy, &spec, v.n_paths, ctx.seed())?;
    let pass = report.pass;
    ctx.summary("summary.json", json!({ "spec": spec, "martingale": report }))?;
    Ok(if pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn suite(ctx: &mut Ctx<'_>) -> Result<i32, RunError> {
    let s = &ctx.cfg.suite;
    let alpha = ctx.cfg.model.alpha;
    let mut models = Vec::new();
    for name in &s.models {
        let m = match name.as_str() {
            "canonical_1d" => canonical_1d(s.spacing_1d, alpha)?,
            "canonical_2d" => canonical_2d(s.spacing_2d, alpha)?,
            _ => ctx.cfg.build_model()?,
        };
        models.push((name.clone(), m));
    }
    let report = end_to_end_suite(&models, &ctx.cfg.suite_settings());
    let code = if report.verdict == Status::Fail { EXIT_VERIFICATION } else { EXIT_OK };
    ctx.summary("verdict.json", &report)?;
    Ok(code)
}
