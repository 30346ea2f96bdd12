//! Explicit monotone θ-marching for the discounted risk-sensitive HJB
//! equation
//!
//! ```text
//! αθ ∂u/∂θ = min_s [ b̄(x,s)·∇u + θ r̄(x,s) u ] + ½ tr(a ∇²u),   u(κ, ·) = e^{κ‖r‖∞/α}
//! ```
//!
//! on the truncated orthant, with the oblique relation `∇u·γ = 0` on the
//! reflecting faces and homogeneous Neumann data on the outer faces. The
//! march runs in `τ = ln θ`, where the equation reads `α ∂u/∂τ = H(θ, u)`.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ModelSpec, OrthantDomain};
use crate::grid::{interp_weights, Discretization};
use crate::policy::Policy;
use crate::sde::{check_start, drive_path, par_paths, step_count, ControlPolicy};
use crate::stats::log_mean_exp_with_error;
use crate::{Error, Result};

/// Nodes above which a θ-step is split across threads.
const PARALLEL_NODES: usize = 4096;
const MAX_STEPS: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaStepRule {
    /// Largest step allowed by monotonicity, capped so that `Δθ ≤ max_dtheta`.
    Auto { max_dtheta: f64 },
    /// Steps with `Δθ = dtheta` at θ = 1; rejected if not monotone.
    Fixed { dtheta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub step: ThetaStepRule,
    /// Upper bound on stored values (slices × nodes). The last three slices
    /// are always kept.
    pub value_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            step: ThetaStepRule::Auto { max_dtheta: 1e-3 },
            value_budget: 4_000_000,
        }
    }
}

/// Tabulated `u(θ, x)` on stored θ-slices. True values are
/// `values · e^{log_scale}` slice by slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub model: ModelSpec,
    pub options: SolverOptions,
    /// Uniform step in `ln θ`.
    pub dtau: f64,
    pub steps: usize,
    pub thetas: Vec<f64>,
    pub log_scale: Vec<f64>,
    /// `thetas.len() · node_count` values, slice-major.
    pub values: Vec<f64>,
}

impl ValueField {
    pub fn domain(&self) -> &OrthantDomain {
        &self.model.domain
    }

    pub fn node_count(&self) -> usize {
        self.model.domain.node_count()
    }

    pub fn n_slices(&self) -> usize {
        self.thetas.len()
    }

    pub fn last(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.node_count();
        &self.values[j * n..(j + 1) * n]
    }

    /// `ln u(θ_j, node)`.
    pub fn log_u(&self, j: usize, node: usize) -> f64 {
        self.slice(j)[node].ln() + self.log_scale[j]
    }

    pub fn alpha(&self) -> f64 {
        self.model.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.model.kappa
    }

    /// Cost truncation level, if any.
    pub fn truncation(&self) -> Option<f64> {
        self.model.coeffs.cutoffs.last().copied()
    }

    /// `ln u` at the initial slice (the extension below κ).
    pub fn initial_log_value(&self) -> f64 {
        self.model.kappa * self.model.cost_sup / self.model.alpha
    }

    /// Index of the stored slice closest to `theta`.
    pub fn nearest_slice(&self, theta: f64) -> Result<usize> {
        let (lo, hi) = (self.thetas[0], self.thetas[self.last()]);
        if !(theta >= lo * (1.0 - 1e-12) && theta <= hi * (1.0 + 1e-12)) {
            return Err(Error::Interpolation(format!(
                "theta = {theta} outside the field range [{lo}, {hi}]"
            )));
        }
        let j = self.thetas.partition_point(|t| *t < theta);
        Ok(if j == 0 {
            0
        } else if j >= self.thetas.len() {
            self.last()
        } else if theta - self.thetas[j - 1] <= self.thetas[j] - theta {
            j - 1
        } else {
            j
        })
    }

    /// `ln u(θ, x)`: multilinear in `x`, linear in θ between stored slices.
    pub fn log_value_at(&self, theta: f64, x: &[f64]) -> Result<f64> {
        let (lo, hi) = (self.thetas[0], self.thetas[self.last()]);
        if !(theta >= lo * (1.0 - 1e-12) && theta <= hi * (1.0 + 1e-12)) {
            return Err(Error::Interpolation(format!(
                "theta = {theta} outside the field range [{lo}, {hi}]; extend the theta grid"
            )));
        }
        if x.len() != self.model.dim() || x.iter().any(|v| *v < 0.0) {
            return Err(Error::OutsideDomain { point: x.to_vec() });
        }
        let w = interp_weights(self.domain(), x);
        let at = |j: usize| -> f64 {
            let s = self.slice(j);
            w.iter().map(|(i, c)| c * s[*i]).sum::<f64>().ln() + self.log_scale[j]
        };
        let j = self.thetas.partition_point(|t| *t < theta);
        if j == 0 {
            return Ok(at(0));
        }
        if j >= self.thetas.len() {
            return Ok(at(self.last()));
        }
        let (t0, t1) = (self.thetas[j - 1], self.thetas[j]);
        let lam = (theta - t0) / (t1 - t0);
        let (l0, l1) = (at(j - 1), at(j));
        let m = l0.max(l1);
        Ok(m + ((1.0 - lam) * (l0 - m).exp() + lam * (l1 - m).exp()).ln())
    }

    /// As [`Self::log_value_at`], with the constant extension
    /// `u = e^{κ‖r‖∞/α}` for θ ≤ κ.
    pub fn log_value_extended(&self, theta: f64, x: &[f64]) -> Result<f64> {
        if theta <= self.thetas[0] {
            Ok(self.initial_log_value())
        } else {
            self.log_value_at(theta, x)
        }
    }

    /// Time-dependent minimizing selector: at time `t` the policy extracted
    /// from the slice nearest `θ e^{-αt}`, sampled on at most `max_pieces`
    /// slices.
    pub fn selector_schedule(&self, max_pieces: usize) -> Result<ControlPolicy> {
        let disc = Discretization::new(&self.model)?;
        let count = self.n_slices().min(max_pieces.max(1));
        let last = self.last();
        let mut picks: Vec<usize> = (0..count)
            .map(|i| {
                if count == 1 {
                    last
                } else {
                    last - ((i as f64) * last as f64 / (count - 1) as f64).round() as usize
                }
            })
            .collect();
        picks.dedup();
        let theta = self.thetas[last];
        let alpha = self.alpha();
        // pick i is meant for times near ln(θ/θ_j)/α; switch at midpoints
        let centers: Vec<f64> = picks.iter().map(|&j| (theta / self.thetas[j]).ln() / alpha).collect();
        let switches: Vec<f64> = (0..centers.len())
            .map(|i| if i == 0 { 0.0 } else { 0.5 * (centers[i - 1] + centers[i]) })
            .collect();
        let policies = picks
            .iter()
            .map(|&j| policy_from_slice(&disc, self, j))
            .collect::<Result<Vec<_>>>()?;
        ControlPolicy::markov(switches, policies)
    }
}

/// Solves the discounted HJB from `θ = κ` up to `θ = model.theta`.
pub fn solve_discounted(model: &ModelSpec, options: &SolverOptions) -> Result<ValueField> {
    let disc = Discretization::new(model)?;
    let alpha = model.alpha;
    let span = (model.theta / model.kappa).ln();
    let cfl = disc.monotone_step(alpha, model.drift_sup, model.cost_sup);
    let steps = match options.step {
        ThetaStepRule::Auto { max_dtheta } => {
            if !(max_dtheta > 0.0) {
                return Err(Error::Config(format!("max dtheta {max_dtheta} must be positive")));
            }
            let cap = cfl.min(max_dtheta.ln_1p());
            (span / cap).ceil()
        }
        ThetaStepRule::Fixed { dtheta } => {
            if !(dtheta > 0.0) {
                return Err(Error::Config(format!("dtheta {dtheta} must be positive")));
            }
            let want = dtheta.ln_1p();
            if want > cfl * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "dtheta = {dtheta} breaks monotonicity; the scheme needs dtheta <= {:.6e}",
                    cfl.exp_m1()
                )));
            }
            (span / want).ceil()
        }
    };
    if !(steps >= 1.0) || steps > MAX_STEPS as f64 {
        return Err(Error::Config(format!("{steps} theta-steps is out of range")));
    }
    let steps = steps as usize;
    let dtau = span / steps as f64;
    let nodes = model.domain.node_count();
    let stride = ((steps + 1) as f64 * nodes as f64 / options.value_budget.max(1) as f64)
        .ceil()
        .max(1.0) as usize;
    let keep = |n: usize| n % stride == 0 || n + 3 > steps;

    let log_kappa = model.kappa.ln();
    let mut v = vec![1.0; nodes];
    let mut next = vec![0.0; nodes];
    let mut ls = model.kappa * model.cost_sup / alpha;
    let mut thetas = vec![model.kappa];
    let mut log_scale = vec![ls];
    let mut values = v.clone();
    let c = dtau / alpha;
    for n in 0..steps {
        let theta = (log_kappa + n as f64 * dtau).exp();
        let update = |idx: usize, out: &mut f64, v: &[f64]| {
            if disc.is_interior(idx) {
                let (ctrl, _) = disc.control_min(v, idx, theta);
                *out = v[idx] + c * (disc.diffusion_term(v, idx) + ctrl);
            }
        };
        if nodes >= PARALLEL_NODES {
            next.par_iter_mut().enumerate().for_each(|(i, o)| update(i, o, &v));
        } else {
            next.iter_mut().enumerate().for_each(|(i, o)| update(i, o, &v));
        }
        disc.boundary.apply(&mut next)?;
        let mut max = 0.0f64;
        for &u in &next {
            if !(u > 0.0 && u.is_finite()) {
                return Err(Error::Solver(format!(
                    "non-positive or non-finite value at theta = {theta:.6e} (step {n})"
                )));
            }
            max = max.max(u);
        }
        next.iter_mut().for_each(|u| *u /= max);
        ls += max.ln();
        std::mem::swap(&mut v, &mut next);
        if keep(n + 1) {
            let th = if n + 1 == steps {
                model.theta
            } else {
                (log_kappa + (n + 1) as f64 * dtau).exp()
            };
            thetas.push(th);
            log_scale.push(ls);
            values.extend_from_slice(&v);
        }
    }
    Ok(ValueField {
        model: model.clone(),
        options: *options,
        dtau,
        steps,
        thetas,
        log_scale,
        values,
    })
}

fn policy_from_slice(disc: &Discretization, field: &ValueField, j: usize) -> Result<Policy> {
    let u = field.slice(j);
    let theta = field.thetas[j];
    let actions = (0..field.node_count()).map(|i| disc.control_min(u, i, theta).1).collect();
    Policy::new(field.domain().clone(), theta, field.model.n_actions(), actions)
}

/// Minimizing selector at the stored slice nearest `theta`.
pub fn extract_policy(field: &ValueField, theta: f64) -> Result<Policy> {
    let j = field.nearest_slice(theta)?;
    let disc = Discretization::new(&field.model)?;
    policy_from_slice(&disc, field, j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    /// `min (θ‖r‖∞/α − ln u)`.
    pub upper_slack: f64,
    /// `min ln u`.
    pub lower_slack: f64,
    /// `min ln(bound / |Δu/Δθ|)` over consecutive stored slices.
    pub derivative_slack: f64,
    /// `min (ln u(θ_{j+1}) − ln u(θ_j))`.
    pub monotone_slack: f64,
    pub pass: bool,
}

/// Checks `1 ≤ u ≤ e^{θ‖r‖∞/α}`, monotonicity in θ and the difference
/// quotient bound `|Δu/Δθ| ≤ 3 e^{(θ+3)‖r‖∞/α} ‖r‖∞/α`, all on the log scale.
pub fn verify_bounds(field: &ValueField) -> BoundsReport {
    let r = field.model.cost_sup;
    let alpha = field.alpha();
    let nodes = field.node_count();
    let mut upper = f64::INFINITY;
    let mut lower = f64::INFINITY;
    let mut deriv = f64::INFINITY;
    let mut mono = f64::INFINITY;
    for j in 0..field.n_slices() {
        let theta = field.thetas[j];
        for i in 0..nodes {
            let l = field.log_u(j, i);
            upper = upper.min(theta * r / alpha - l);
            lower = lower.min(l);
            if j + 1 < field.n_slices() {
                let l1 = field.log_u(j + 1, i);
                mono = mono.min(l1 - l);
                let (hi, lo) = if l1 >= l { (l1, l) } else { (l, l1) };
                let dtheta = field.thetas[j + 1] - theta;
                let log_diff = if hi == lo {
                    f64::NEG_INFINITY
                } else {
                    hi + (-(lo - hi).exp_m1()).ln()
                };
                let log_quot = log_diff - dtheta.ln();
                let theta1 = field.thetas[j + 1];
                let log_bound = if r == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    3f64.ln() + (theta1 + 3.0) * r / alpha + (r / alpha).ln()
                };
                let s = if log_quot == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    log_bound - log_quot
                };
                deriv = deriv.min(s);
            }
        }
    }
    let pass = upper >= -1e-6f64.ln_1p() && lower >= -1e-12 && deriv >= 0.0 && mono >= -1e-12;
    BoundsReport {
        upper_slack: upper,
        lower_slack: lower,
        derivative_slack: deriv,
        monotone_slack: mono,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    /// `T_κ = ln(θ/κ)/α`.
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub log_mc: f64,
    pub std_error: f64,
    pub log_pde: f64,
    /// `|ln u_h − ln u_{2h}|` at the start point, if the coarse grid exists.
    pub pde_discretization: Option<f64>,
    /// `|ln Ĵ_dt − ln Ĵ_{2dt}|` with common random numbers.
    pub mc_discretization: f64,
    pub combined_error: f64,
    /// `ln(MC) − ln(u)`.
    pub log_gap: f64,
    /// `MC/u − 1`.
    pub relative_gap: f64,
    pub error_bars: f64,
    pub contaminated_fraction: f64,
}

/// Monte Carlo evaluation of the finite-horizon representation
/// `E[e^{κ‖r‖∞/α} e^{∫₀^{T_κ} θ e^{−αs} r ds}]` under the time-dependent
/// minimizing selector, compared with `u(θ, start)`.
pub fn representation_check(
    field: &ValueField,
    start: &[f64],
    n_paths: usize,
    dt: f64,
    base_seed: u64,
) -> Result<RepresentationReport> {
    let model = &field.model;
    check_start(model, start)?;
    let theta = field.thetas[field.last()];
    let horizon = (theta / model.kappa).ln() / model.alpha;
    let policy = field.selector_schedule(256)?;
    let run = |dt: f64| -> Result<(Vec<f64>, f64, f64)> {
        let (steps, dt) = step_count(horizon, dt)?;
        let offset = field.initial_log_value();
        let alpha = model.alpha;
        let weight = -(-alpha * dt).exp_m1() / alpha;
        let out = par_paths(n_paths, base_seed, |_, seed| {
            let mut a = 0.0;
            let mut outer = false;
            drive_path(model, &policy, start, dt, steps, seed, |tr| {
                a += (-alpha * tr.t).exp() * weight * model.coeffs.cost_weighted(tr.x, tr.weights);
                outer |= tr.outer;
                true
            })?;
            Ok((offset + theta * a, outer))
        })?;
        let contaminated = out.iter().filter(|o| o.1).count() as f64 / n_paths as f64;
        Ok((out.into_iter().map(|o| o.0).collect(), dt, contaminated))
    };
    let (samples, dt_used, contaminated) = run(dt)?;
    let (log_mc, se) = log_mean_exp_with_error(&samples)?;
    let (coarse_samples, _, _) = run(2.0 * dt_used)?;
    let (log_mc_coarse, _) = log_mean_exp_with_error(&coarse_samples)?;
    let mc_disc = (log_mc - log_mc_coarse).abs();

    let log_pde = field.log_value_at(theta, start)?;
    let dom = field.domain();
    let pde_disc = match OrthantDomain::new(dom.dim(), dom.side(), 2.0 * dom.spacing()) {
        Ok(coarse_dom) => {
            let coarse_model = model.with_domain(coarse_dom)?;
            let coarse = solve_discounted(&coarse_model, &field.options)?;
            Some((coarse.log_value_at(theta, start)? - log_pde).abs())
        }
        Err(_) => None,
    };
    let combined = (se * se + pde_disc.unwrap_or(0.0).powi(2) + mc_disc * mc_disc).sqrt();
    let log_gap = log_mc - log_pde;
    Ok(RepresentationReport {
        horizon,
        dt: dt_used,
        n_paths,
        log_mc,
        std_error: se,
        log_pde,
        pde_discretization: pde_disc,
        mc_discretization: mc_disc,
        combined_error: combined,
        log_gap,
        relative_gap: log_gap.exp_m1(),
        error_bars: if combined > 0.0 { log_gap.abs() / combined } else if log_gap == 0.0 { 0.0 } else { f64::INFINITY },
        contaminated_fraction: contaminated,
    })
}

/// Fields that can be written to and read back from CSV.
pub fn write_field_csv<W: Write>(field: &ValueField, mut out: W) -> std::io::Result<()> {
    let dom = field.domain();
    let k = field.truncation().map_or("none".to_string(), |k| format!("{k:.16e}"));
    writeln!(
        out,
        "# d={} L={:.16e} h={:.16e} alpha={:.16e} kappa={:.16e} k={} dtau={:.16e} steps={} slices={}",
        dom.dim(),
        dom.side(),
        dom.spacing(),
        field.alpha(),
        field.kappa(),
        k,
        field.dtau,
        field.steps,
        field.n_slices()
    )?;
    write!(out, "theta,log_scale")?;
    for i in 0..field.node_count() {
        write!(out, ",u_{i}")?;
    }
    writeln!(out)?;
    for j in 0..field.n_slices() {
        write!(out, "{:.16e},{:.16e}", field.thetas[j], field.log_scale[j])?;
        for v in field.slice(j) {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a field written by [`write_field_csv`] for `model`.
pub fn read_field_csv<R: BufRead>(model: &ModelSpec, options: SolverOptions, input: R) -> Result<ValueField> {
    let bad = |m: String| Error::validation("field csv", m);
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?.map_err(|e| bad(e.to_string()))?;
    let mut dtau = None;
    let mut steps = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        if let Some((key, val)) = tok.split_once('=') {
            match key {
                "dtau" => dtau = val.parse::<f64>().ok(),
                "steps" => steps = val.parse::<usize>().ok(),
                "d" if val.parse::<usize>().ok() != Some(model.dim()) => {
                    return Err(bad(format!("dimension {val} does not match the model")))
                }
                _ => {}
            }
        }
    }
    let nodes = model.domain.node_count();
    lines.next();
    let mut thetas = Vec::new();
    let mut log_scale = Vec::new();
    let mut values = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", n + 3)))?;
        if nums.len() != nodes + 2 {
            return Err(bad(format!("row {} has {} columns, expected {}", n + 3, nums.len(), nodes + 2)));
        }
        thetas.push(nums[0]);
        log_scale.push(nums[1]);
        values.extend_from_slice(&nums[2..]);
    }
    if thetas.is_empty() {
        return Err(bad("no slices".into()));
    }
    Ok(ValueField {
        model: model.clone(),
        options,
        dtau: dtau.ok_or_else(|| bad("missing dtau".into()))?,
        steps: steps.ok_or_else(|| bad("missing steps".into()))?,
        thetas,
        log_scale,
        values,
    })
}

pub fn write_policy_csv<W: Write>(policy: &Policy, mut out: W) -> std::io::Result<()> {
    let d = policy.domain.dim();
    write!(out, "node")?;
    for j in 1..=d {
        write!(out, ",x_{j}")?;
    }
    writeln!(out, ",action")?;
    let mut x = vec![0.0; d];
    for (i, a) in policy.actions.iter().enumerate() {
        policy.domain.coords_into(i, &mut x);
        write!(out, "{i}")?;
        for v in &x {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out, ",{a}")?;
    }
    Ok(())
}

pub fn read_policy_csv<R: BufRead>(domain: &OrthantDomain, n_actions: usize, theta: f64, input: R) -> Result<Policy> {
    let bad = |m: String| Error::validation("policy csv", m);
    let mut actions = Vec::new();
    for (n, line) in input.lines().enumerate().skip(1) {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let last = line.rsplit(',').next().unwrap_or("");
        actions.push(last.trim().parse::<usize>().map_err(|e| bad(format!("row {}: {e}", n + 1)))?);
    }
    Policy::new(domain.clone(), theta, n_actions, actions)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::domain::{ActionSpace, CoefficientField, Cost, Diffusion, Drift, Reflection};
    use proptest::prelude::*;

    pub(crate) fn canonical_1d(alpha: f64, h: f64, cost: Cost) -> ModelSpec {
        ModelSpec::new(
            OrthantDomain::new(1, 8.0, h).unwrap(),
            ActionSpace::new(vec!["down".into(), "up".into()]).unwrap(),
            CoefficientField {
                drift: Drift::Constant {
                    vectors: vec![vec![-1.0], vec![1.0]],
                },
                diffusion: Diffusion::identity(1),
                reflection: Reflection::Normal,
                cost,
                cutoffs: vec![],
                ellipticity: 1.0,
                reflection_margin: 1.0,
            },
            1.0,
            alpha,
            0.05,
            7,
            Some(&[2.0]),
        )
        .unwrap()
    }

    pub(crate) fn ramp() -> Cost {
        Cost::Ramp { slope: 1.0, cap: 2.0 }
    }

    #[test]
    fn zero_cost_gives_unit_field() {
        let m = canonical_1d(1.0, 0.25, Cost::Constant { value: 0.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        for j in 0..f.n_slices() {
            for i in 0..f.node_count() {
                assert!(f.log_u(j, i).abs() < 1e-14);
            }
        }
        let b = verify_bounds(&f);
        assert!(b.pass);
        assert!(b.upper_slack.abs() < 1e-14 && b.lower_slack.abs() < 1e-14);
    }

    #[test]
    fn constant_cost_follows_the_exponential() {
        let m = canonical_1d(0.5, 0.25, Cost::Constant { value: 1.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let expect = std::f64::consts::E.powi(2);
        for i in 0..f.node_count() {
            let u = f.log_u(f.last(), i).exp();
            assert!((u / expect - 1.0).abs() < 0.01, "{u}");
        }
        let b = verify_bounds(&f);
        assert!(b.pass && b.upper_slack >= 0.0 && b.upper_slack < 0.01);
    }

    #[test]
    fn fixed_step_above_the_bound_is_rejected() {
        let m = canonical_1d(0.5, 0.125, ramp());
        let opts = SolverOptions {
            step: ThetaStepRule::Fixed { dtheta: 0.1 },
            ..Default::default()
        };
        match solve_discounted(&m, &opts) {
            Err(Error::Config(msg)) => assert!(msg.contains("dtheta <=")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bounds_hold_on_the_canonical_model() {
        let m = canonical_1d(1.0, 1.0 / 16.0, ramp());
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let b = verify_bounds(&f);
        assert!(b.pass, "{b:?}");
        assert!(b.upper_slack >= 0.0 && b.derivative_slack >= 0.0);
    }

    #[test]
    fn policy_is_action_zero_without_preference() {
        let mut m = canonical_1d(1.0, 0.25, ramp());
        m.coeffs.drift = Drift::Constant {
            vectors: vec![vec![0.5], vec![0.5]],
        };
        let m = m.with_coefficients(m.coeffs.clone()).unwrap();
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let p = extract_policy(&f, 1.0).unwrap();
        assert!(p.actions.iter().all(|a| *a == 0));
    }

    #[test]
    fn selector_pushes_toward_the_origin() {
        let m = canonical_1d(1.0, 0.125, ramp());
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let p = extract_policy(&f, 1.0).unwrap();
        for i in 1..f.node_count() - 1 {
            let x = m.domain.coords(i)[0];
            if x > 0.5 && x < 7.0 {
                assert_eq!(p.actions[i], 0, "x = {x}");
            }
        }
        assert!(extract_policy(&f, 0.01).is_err());
    }

    #[test]
    fn policy_is_invariant_under_scaling() {
        let m = canonical_1d(1.0, 0.125, ramp());
        let mut f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let p = extract_policy(&f, 1.0).unwrap();
        for c in [2.0, 3.0, 0.1] {
            let last = f.last();
            let n = f.node_count();
            let mut g = f.clone();
            g.values[last * n..].iter_mut().for_each(|v| *v *= c);
            assert_eq!(extract_policy(&g, 1.0).unwrap(), p);
        }
        f.log_scale.iter_mut().for_each(|s| *s += 5.0);
        assert_eq!(extract_policy(&f, 1.0).unwrap(), p);
    }

    #[test]
    fn grid_refinement_contracts() {
        let interior = |f: &ValueField, x: f64| f.log_value_at(1.0, &[x]).unwrap().exp();
        let fields: Vec<ValueField> = [0.25, 0.125, 0.0625]
            .iter()
            .map(|h| solve_discounted(&canonical_1d(1.0, *h, ramp()), &SolverOptions::default()).unwrap())
            .collect();
        let diff = |a: &ValueField, b: &ValueField| {
            (0..=32)
                .map(|k| 1.0 + k as f64 * 0.125)
                .map(|x| (interior(a, x) - interior(b, x)).abs())
                .fold(0.0, f64::max)
        };
        let d1 = diff(&fields[0], &fields[1]);
        let d2 = diff(&fields[1], &fields[2]);
        assert!(d1 / d2 >= 1.5, "{d1} {d2}");
    }

    #[test]
    fn boundary_derivative_vanishes_under_refinement() {
        let mut errs = Vec::new();
        for h in [0.25, 0.125, 0.0625] {
            let m = canonical_1d(1.0, h, ramp());
            let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
            // one-sided derivative at the origin along γ = +1, from nodes 1 and 2
            let s = f.slice(f.last());
            let d = (-3.0 * s[0] + 4.0 * s[1] - s[2]) / (2.0 * h) / s[0];
            errs.push(d.abs());
        }
        assert!(errs[0] / errs[1] >= 1.8 && errs[1] / errs[2] >= 1.8, "{errs:?}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = canonical_1d(1.0, 0.5, ramp());
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_field_csv(&f, &mut buf).unwrap();
        let g = read_field_csv(&m, f.options, &buf[..]).unwrap();
        assert_eq!(f, g);

        let p = extract_policy(&f, 1.0).unwrap();
        let mut buf = Vec::new();
        write_policy_csv(&p, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), m.domain.node_count() + 1);
        assert_eq!(read_policy_csv(&m.domain, 2, 1.0, &buf[..]).unwrap(), p);
    }

    #[test]
    fn representation_trivial_cases() {
        let m = canonical_1d(1.0, 0.5, Cost::Constant { value: 0.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let r = representation_check(&f, &[1.0], 64, 0.01, 3).unwrap();
        assert_eq!(r.log_mc, 0.0);
        assert!(r.log_pde.abs() < 1e-14);
        assert!((r.horizon - 20f64.ln()).abs() < 1e-12);

        // κ = e^{-α}, θ = 1 gives unit horizon
        let mut m2 = canonical_1d(0.5, 0.5, Cost::Constant { value: 0.0 });
        m2.kappa = (-0.5f64).exp();
        let f2 = solve_discounted(&m2, &SolverOptions::default()).unwrap();
        let r2 = representation_check(&f2, &[1.0], 8, 0.01, 3).unwrap();
        assert!((r2.horizon - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn discrete_comparison(c1 in 0.0f64..1.5, extra in 0.0f64..1.0, slope in 0.0f64..1.0) {
            let lo = canonical_1d(1.0, 0.5, Cost::Ramp { slope, cap: c1 });
            let hi = canonical_1d(1.0, 0.5, Cost::RampPlusAction { slope, cap: c1, extra: vec![extra, extra] });
            let opts = SolverOptions { step: ThetaStepRule::Fixed { dtheta: 1e-2 }, ..Default::default() };
            let f_lo = solve_discounted(&lo, &opts).unwrap();
            let f_hi = solve_discounted(&hi, &opts).unwrap();
            let j_lo = f_lo.last();
            let j_hi = f_hi.last();
            for i in 0..f_lo.node_count() {
                prop_assert!(f_hi.log_u(j_hi, i) >= f_lo.log_u(j_lo, i) - 1e-12);
            }
        }
    }
}
