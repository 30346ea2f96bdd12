//! Monte Carlo estimators of the discounted and ergodic risk-sensitive
//! costs and of the multiplicative dynamic-programming residual.
//!
//! Exponential moments are always handled on the log scale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::discounted::ValueField;
use crate::domain::ModelSpec;
use crate::sde::{check_start, drive_path, par_paths, step_count, validate_policy, ControlPolicy};
use crate::stats::{log_mean_exp_with_error, mean, std_error};
use crate::{Error, Result};

/// Tail cutoff rule for the discounted integral: simulate at least `10/α`.
pub const TAIL_FACTOR: f64 = 10.0;
/// Relative change over the last two horizons above which the ergodic
/// ladder is reported as unsettled.
pub const SETTLING_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonValue {
    pub horizon: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// J-form: `(1/θ) ln E[e^{θ·cost}]` (discounted) or the per-unit-time
    /// rate at the largest horizon (ergodic).
    pub value: f64,
    /// `ln E[e^{θ·cost}]`, the logarithm of the u-form.
    pub log_mean: f64,
    /// Standard error of `value`.
    pub std_error: f64,
    /// Standard error of `log_mean`.
    pub log_std_error: f64,
    pub n_paths: usize,
    pub horizon_used: f64,
    pub contaminated_fraction: f64,
    /// Bound on the neglected tail `θ‖r‖∞ e^{−αT}/α` (discounted only).
    pub tail_bound: Option<f64>,
    /// Per-horizon values (ergodic only).
    pub per_horizon: Vec<HorizonValue>,
    pub warning: Option<String>,
}

impl CostEstimate {
    /// u-form `E[e^{θ·cost}]`.
    pub fn u_value(&self) -> f64 {
        self.log_mean.exp()
    }
}

/// Estimates `J = (1/θ) ln E[e^{θ ∫₀^∞ e^{−αt} r dt}]` with the integral cut
/// at `t_sim`. Each step carries the exact discount weight
/// `e^{−αt_k}(1 − e^{−α dt})/α`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_discounted_value(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    t_sim: f64,
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<CostEstimate> {
    check_start(model, start)?;
    validate_policy(model, policy)?;
    if n_paths < 2 {
        return Err(Error::Estimation("at least 2 paths are needed for an error bar".into()));
    }
    let alpha = model.alpha;
    let theta = model.theta;
    if t_sim < TAIL_FACTOR / alpha * (1.0 - 1e-12) {
        return Err(Error::validation(
            "t_sim",
            format!("{t_sim} is below the tail cutoff 10/alpha = {}", TAIL_FACTOR / alpha),
        ));
    }
    let (steps, dt) = step_count(t_sim, dt)?;
    let weight = -(-alpha * dt).exp_m1() / alpha;
    let out = par_paths(n_paths, base_seed, |_, seed| {
        let mut a = 0.0;
        let mut outer = false;
        drive_path(model, policy, start, dt, steps, seed, |tr| {
            a += (-alpha * tr.t).exp() * weight * model.coeffs.cost_weighted(tr.x, tr.weights);
            outer |= tr.outer;
            true
        })?;
        Ok((theta * a, outer))
    })?;
    let samples: Vec<f64> = out.iter().map(|o| o.0).collect();
    let (log_mean, se) = log_mean_exp_with_error(&samples)?;
    Ok(CostEstimate {
        value: log_mean / theta,
        log_mean,
        std_error: se / theta,
        log_std_error: se,
        n_paths,
        horizon_used: t_sim,
        contaminated_fraction: out.iter().filter(|o| o.1).count() as f64 / n_paths as f64,
        tail_bound: Some(theta * model.cost_sup * (-alpha * t_sim).exp() / alpha),
        per_horizon: Vec::new(),
        warning: None,
    })
}

/// Estimates the ergodic rate `(1/(θT)) ln E[e^{θ ∫₀^T r dt}]` along an
/// increasing horizon ladder; the largest horizon gives the estimate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ergodic_value(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    horizons: &[f64],
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<CostEstimate> {
    check_start(model, start)?;
    validate_policy(model, policy)?;
    if n_paths < 2 {
        return Err(Error::Estimation("at least 2 paths are needed for an error bar".into()));
    }
    if horizons.len() < 3 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("horizons", "need at least 3 increasing horizons"));
    }
    let theta = model.theta;
    let counts: Vec<usize> = horizons
        .iter()
        .map(|t| step_count(*t, dt).map(|(n, _)| n))
        .collect::<Result<_>>()?;
    let total = *counts.last().unwrap();
    let out = par_paths(n_paths, base_seed, |_, seed| {
        let mut a = 0.0;
        let mut outer = false;
        let mut marks = Vec::with_capacity(counts.len());
        let mut next = 0;
        drive_path(model, policy, start, dt, total, seed, |tr| {
            a += dt * model.coeffs.cost_weighted(tr.x, tr.weights);
            outer |= tr.outer;
            while next < counts.len() && tr.step + 1 == counts[next] {
                marks.push(theta * a);
                next += 1;
            }
            true
        })?;
        Ok((marks, outer))
    })?;
    let mut per_horizon = Vec::with_capacity(counts.len());
    let mut log_last = (0.0, 0.0);
    for (h, n) in counts.iter().enumerate() {
        let samples: Vec<f64> = out.iter().map(|o| o.0[h]).collect();
        let (lm, se) = log_mean_exp_with_error(&samples)?;
        let t = *n as f64 * dt;
        per_horizon.push(HorizonValue {
            horizon: t,
            value: lm / (theta * t),
            std_error: se / (theta * t),
        });
        log_last = (lm, se);
    }
    let k = per_horizon.len();
    let (last, prev) = (per_horizon[k - 1].value, per_horizon[k - 2].value);
    let change = (last - prev).abs() / last.abs().max(1e-300);
    let warning = (change > SETTLING_TOL && (last - prev).abs() > 1e-12).then(|| {
        format!(
            "ergodic ladder not settled: relative change {change:.3} over the last two horizons"
        )
    });
    let best = &per_horizon[k - 1];
    Ok(CostEstimate {
        value: best.value,
        log_mean: log_last.0,
        std_error: best.std_error,
        log_std_error: log_last.1,
        n_paths,
        horizon_used: best.horizon,
        contaminated_fraction: out.iter().filter(|o| o.1).count() as f64 / n_paths as f64,
        tail_bound: None,
        per_horizon,
        warning,
    })
}

/// CSV rows `quantity,value,std_error,n_paths,horizon,contaminated_fraction`.
pub fn write_cost_csv<W: Write>(rows: &[(&str, &CostEstimate)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "quantity,value,std_error,n_paths,horizon,contaminated_fraction")?;
    for (name, e) in rows {
        writeln!(
            out,
            "{name},{:.16e},{:.16e},{},{:.16e},{:.16e}",
            e.value, e.std_error, e.n_paths, e.horizon_used, e.contaminated_fraction
        )?;
        for h in &e.per_horizon {
            writeln!(
                out,
                "{name}@T,{:.16e},{:.16e},{},{:.16e},{:.16e}",
                h.value, h.std_error, e.n_paths, h.horizon, e.contaminated_fraction
            )?;
        }
    }
    Ok(())
}

/// Stopping rule `τ = min(first exit from [0, upper]^d, t_cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub upper: f64,
    pub t_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    /// `R / u(θ, x)`.
    pub relative_residual: f64,
    pub relative_std_error: f64,
    pub residual: f64,
    pub std_error: f64,
    pub u_start: f64,
    pub mean_tau: f64,
    pub exit_fraction: f64,
    pub n_paths: usize,
}

/// Estimates `R = E[e^{θ∫₀^τ e^{−αt} r dt} u(θe^{−ατ}, X_τ)] − u(θ, x)`.
#[allow(clippy::too_many_arguments)]
pub fn dpp_residual(
    field: &ValueField,
    policy: &ControlPolicy,
    start: &[f64],
    rule: StoppingRule,
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<DppReport> {
    let model = &field.model;
    check_start(model, start)?;
    validate_policy(model, policy)?;
    if n_paths < 2 {
        return Err(Error::Estimation("dpp residual needs at least 2 paths".into()));
    }
    if !(rule.upper > 0.0 && rule.t_cap >= 0.0) {
        return Err(Error::validation("stopping rule", "needs upper > 0 and t_cap >= 0"));
    }
    let theta = field.thetas[field.last()];
    let alpha = model.alpha;
    let log_start = field.log_value_at(theta, start)?;
    let outside = |x: &[f64]| x.iter().any(|v| *v > rule.upper);
    if rule.t_cap == 0.0 || outside(start) {
        return Ok(DppReport {
            relative_residual: 0.0,
            relative_std_error: 0.0,
            residual: 0.0,
            std_error: 0.0,
            u_start: log_start.exp(),
            mean_tau: 0.0,
            exit_fraction: if outside(start) { 1.0 } else { 0.0 },
            n_paths,
        });
    }
    let (steps, dt) = step_count(rule.t_cap, dt)?;
    let weight = -(-alpha * dt).exp_m1() / alpha;
    let out = par_paths(n_paths, base_seed, |_, seed| {
        let mut a = 0.0;
        let mut tau = rule.t_cap;
        let mut exited = false;
        let mut end = start.to_vec();
        drive_path(model, policy, start, dt, steps, seed, |tr| {
            a += (-alpha * tr.t).exp() * weight * model.coeffs.cost_weighted(tr.x, tr.weights);
            end.copy_from_slice(tr.y);
            if outside(tr.y) {
                exited = true;
                tau = (tr.step + 1) as f64 * dt;
                return false;
            }
            if tr.step + 1 == steps {
                tau = rule.t_cap;
            }
            true
        })?;
        let log_end = field.log_value_at(theta * (-alpha * tau).exp(), &end)?;
        Ok(((theta * a + log_end - log_start).exp_m1(), tau, exited))
    })?;
    let rel: Vec<f64> = out.iter().map(|o| o.0).collect();
    let r = mean(&rel);
    let se = std_error(&rel);
    let u = log_start.exp();
    Ok(DppReport {
        relative_residual: r,
        relative_std_error: se,
        residual: r * u,
        std_error: se * u,
        u_start: u,
        mean_tau: mean(&out.iter().map(|o| o.1).collect::<Vec<_>>()),
        exit_fraction: out.iter().filter(|o| o.2).count() as f64 / n_paths as f64,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discounted::tests::{canonical_1d, ramp};
    use crate::discounted::{solve_discounted, SolverOptions};
    use crate::domain::Cost;

    #[test]
    fn constant_cost_discounted_value() {
        let mut m = canonical_1d(0.5, 0.25, Cost::Constant { value: 1.0 });
        m.theta = 1.0;
        let pol = ControlPolicy::dirac(2, 0);
        let e = estimate_discounted_value(&m, &pol, &[1.0], 20.0, 0.01, 16, 4).unwrap();
        let tail = e.tail_bound.unwrap();
        assert!((e.value - 2.0).abs() <= tail + 1e-12, "{e:?}");
        assert!((e.u_value() - 2f64.exp()).abs() <= 2f64.exp() * (tail.exp() - 1.0) + 1e-9);
        assert!(e.std_error < 1e-12);
        assert!(estimate_discounted_value(&m, &pol, &[1.0], 5.0, 0.01, 16, 4).is_err());
        assert!(estimate_discounted_value(&m, &pol, &[1.0], 20.0, 0.01, 1, 4).is_err());
    }

    #[test]
    fn zero_cost_values() {
        let m = canonical_1d(0.5, 0.25, Cost::Constant { value: 0.0 });
        let pol = ControlPolicy::dirac(2, 1);
        let e = estimate_discounted_value(&m, &pol, &[1.0], 20.0, 0.05, 8, 4).unwrap();
        assert_eq!((e.value, e.u_value()), (0.0, 1.0));
        let g = estimate_ergodic_value(&m, &pol, &[1.0], &[1.0, 2.0, 4.0], 0.05, 8, 4).unwrap();
        assert_eq!(g.value, 0.0);
        assert!(g.warning.is_none());
    }

    #[test]
    fn constant_cost_ergodic_value() {
        let m = canonical_1d(0.5, 0.25, Cost::Constant { value: 1.5 });
        let pol = ControlPolicy::dirac(2, 0);
        let g = estimate_ergodic_value(&m, &pol, &[1.0], &[1.0, 2.0, 4.0], 0.01, 8, 4).unwrap();
        for h in &g.per_horizon {
            assert!((h.value - 1.5).abs() < 1e-12);
        }
        assert!(estimate_ergodic_value(&m, &pol, &[1.0], &[1.0, 2.0], 0.01, 8, 4).is_err());
    }

    #[test]
    fn u_form_is_at_least_one() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let pol = ControlPolicy::dirac(2, 1);
        let e = estimate_discounted_value(&m, &pol, &[0.0], 10.0, 0.01, 32, 9).unwrap();
        assert!(e.log_mean >= 0.0);
        assert!(e.value <= m.cost_sup / m.alpha + 1e-12);
    }

    #[test]
    fn estimates_are_reproducible() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let pol = ControlPolicy::dirac(2, 0);
        let a = estimate_discounted_value(&m, &pol, &[1.0], 10.0, 0.01, 64, 9).unwrap();
        let b = estimate_discounted_value(&m, &pol, &[1.0], 10.0, 0.01, 64, 9).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_cost_csv(&[("discounted", &a)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn dpp_trivial_cases() {
        let m = canonical_1d(1.0, 0.25, Cost::Constant { value: 1.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let pol = ControlPolicy::dirac(2, 1);
        let zero = dpp_residual(&f, &pol, &[0.5], StoppingRule { upper: 1.0, t_cap: 0.0 }, 0.01, 10, 1).unwrap();
        assert_eq!(zero.residual, 0.0);
        // constant cost, deterministic τ = t_cap: the exponent telescopes
        let r = dpp_residual(&f, &pol, &[0.5], StoppingRule { upper: 100.0, t_cap: 0.5 }, 0.01, 50, 1).unwrap();
        assert!(r.relative_residual.abs() < 2e-3, "{r:?}");
        assert!(r.relative_std_error < 1e-12);
    }

}
