//! Vanishing-discount construction of the ergodic risk-sensitive value.
//!
//! For each truncation level `k` and discount `α` the cost is cut off
//! (`r_k = r χ_k`), the discounted problem is solved, and the transform
//! `φ = (1/θ) ln u`, `g = αφ + αθ ∂φ/∂θ = α ∂(ln u)/∂θ` is read off at θ = 1.
//! `g` flattens to a constant `ρ_k` as `α ↓ 0`; `ρ` is `ρ_k` at the largest `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discounted::{extract_policy, solve_discounted, SolverOptions, ValueField};
use crate::domain::{norm, CoefficientField, ModelSpec, OrthantDomain};
use crate::grid::Discretization;
use crate::policy::Policy;
use crate::{Error, Result};

/// Returns the coefficient set with running cost `r̄ · χ_k(|x|)`.
pub fn truncate_cost(coeffs: &CoefficientField, k: f64) -> CoefficientField {
    coeffs.truncated(k)
}

/// Nodes whose coordinates all lie in the central `fraction` of `[0, L]`.
pub fn probe_nodes(domain: &OrthantDomain, fraction: f64) -> Vec<usize> {
    let lo = domain.side() * (0.5 - fraction / 2.0);
    let hi = domain.side() * (0.5 + fraction / 2.0);
    let eps = 1e-9 * domain.spacing();
    let mut x = vec![0.0; domain.dim()];
    (0..domain.node_count())
        .filter(|&i| {
            domain.coords_into(i, &mut x);
            x.iter().all(|v| *v >= lo - eps && *v <= hi + eps)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiG {
    pub thetas: Vec<f64>,
    /// `φ = (1/θ) ln u`, slice-major.
    pub phi: Vec<f64>,
    /// `g = α ∂(ln u)/∂θ`, slice-major.
    pub g: Vec<f64>,
    /// `‖αφ‖∞ + ‖αθ ∂φ/∂θ‖∞`.
    pub bound_lhs: f64,
    /// `3 ‖r_k‖∞`.
    pub bound_rhs: f64,
    pub bound_pass: bool,
}

impl PhiG {
    pub fn g_slice(&self, j: usize) -> &[f64] {
        let n = self.g.len() / self.thetas.len();
        &self.g[j * n..(j + 1) * n]
    }

    pub fn last(&self) -> usize {
        self.thetas.len() - 1
    }
}

/// Derivative at `t[j]` of the quadratic through three neighbouring samples.
fn lagrange_derivative(t: &[f64; 3], y: &[f64; 3], at: usize) -> f64 {
    let x = t[at];
    let mut d = 0.0;
    for i in 0..3 {
        // derivative of the i-th Lagrange basis polynomial at x
        let others: Vec<usize> = (0..3).filter(|m| *m != i).collect();
        let denom: f64 = others.iter().map(|&m| t[i] - t[m]).product();
        let num = (x - t[others[0]]) + (x - t[others[1]]);
        d += y[i] * num / denom;
    }
    d
}

/// Computes φ and g on every stored slice and checks
/// `‖αφ‖∞ + ‖αθ ∂φ/∂θ‖∞ ≤ 3‖r_k‖∞`.
pub fn compute_phi_g(field: &ValueField) -> Result<PhiG> {
    let s = field.n_slices();
    if s < 3 {
        return Err(Error::validation("value field", format!("{s} slices; at least 3 are needed")));
    }
    let n = field.node_count();
    let alpha = field.alpha();
    let mut phi = vec![0.0; s * n];
    let mut g = vec![0.0; s * n];
    let mut max_aphi: f64 = 0.0;
    let mut max_dphi: f64 = 0.0;
    for j in 0..s {
        let base = if j == 0 { 0 } else if j + 1 == s { s - 3 } else { j - 1 };
        let t = [field.thetas[base], field.thetas[base + 1], field.thetas[base + 2]];
        let theta = field.thetas[j];
        for i in 0..n {
            let y = [field.log_u(base, i), field.log_u(base + 1, i), field.log_u(base + 2, i)];
            let lu = field.log_u(j, i);
            let dl = lagrange_derivative(&t, &y, j - base);
            let ph = lu / theta;
            let gg = alpha * dl;
            phi[j * n + i] = ph;
            g[j * n + i] = gg;
            max_aphi = max_aphi.max((alpha * ph).abs());
            max_dphi = max_dphi.max((gg - alpha * ph).abs());
        }
    }
    let rhs = 3.0 * field.model.cost_sup;
    let lhs = max_aphi + max_dphi;
    Ok(PhiG {
        thetas: field.thetas.clone(),
        phi,
        g,
        bound_lhs: lhs,
        bound_rhs: rhs,
        bound_pass: lhs <= rhs * (1.0 + 1e-6) + 1e-300,
    })
}

/// `ū(θ, x) = u(θ, x)/u(θ, x₀)` slice by slice.
pub fn normalize_at(field: &ValueField, x0: usize) -> Result<ValueField> {
    if !field.domain().is_interior(x0) {
        return Err(Error::validation("normalization node", "must be an interior node"));
    }
    let n = field.node_count();
    let mut out = field.clone();
    for j in 0..field.n_slices() {
        let pivot = field.slice(j)[x0];
        if !(pivot > 0.0) {
            return Err(Error::Solver(format!("u(theta_{j}, x0) is not positive")));
        }
        for v in &mut out.values[j * n..(j + 1) * n] {
            *v /= pivot;
        }
        out.log_scale[j] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicResidual {
    /// Max over the probe box of `|θρû − min_s[b̄·∇û + θr̄û] − ½tr(a∇²û)|`.
    pub interior_max: f64,
    /// Same, over every interior node.
    pub interior_max_all: f64,
    /// Probe-box residual with the policy's action in place of the minimum.
    pub policy_max: f64,
    /// Max over boundary nodes of the discrete oblique derivative.
    pub boundary_max: f64,
    /// Node attaining `interior_max`.
    pub worst_node: usize,
}

/// Discrete residual of the ergodic equation
/// `θρû = min_s[b̄·∇û + θr̄û] + ½tr(a∇²û)` with `∇û·γ = 0`.
pub fn ergodic_residual(model: &ModelSpec, rho: f64, u_hat: &[f64], policy: &Policy) -> Result<ErgodicResidual> {
    let n = model.domain.node_count();
    if u_hat.len() != n || policy.actions.len() != n {
        return Err(Error::validation("ergodic residual", "field or policy does not match the grid"));
    }
    let disc = Discretization::new(model)?;
    let theta = model.theta;
    let probe: std::collections::HashSet<usize> = probe_nodes(&model.domain, 0.5).into_iter().collect();
    let mut interior_max: f64 = 0.0;
    let mut interior_all: f64 = 0.0;
    let mut policy_max: f64 = 0.0;
    let mut worst = model.reference_node;
    for i in (0..n).filter(|i| disc.is_interior(*i)) {
        let diff = disc.diffusion_term(u_hat, i);
        let (ctrl, _) = disc.control_min(u_hat, i, theta);
        let r = (theta * rho * u_hat[i] - ctrl - diff).abs();
        interior_all = interior_all.max(r);
        if probe.contains(&i) {
            if r > interior_max {
                interior_max = r;
                worst = i;
            }
            let pc = disc.control_term(u_hat, i, theta, policy.actions[i]);
            policy_max = policy_max.max((theta * rho * u_hat[i] - pc - diff).abs());
        }
    }
    Ok(ErgodicResidual {
        interior_max,
        interior_max_all: interior_all,
        policy_max,
        boundary_max: disc.boundary.residual(u_hat, model.domain.spacing()),
        worst_node: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NearMonotoneCase {
    /// The minimum of the cost on the shell exceeds ρ.
    ShellAboveRho,
    /// Action-independent cost strictly below its far-field limit everywhere.
    ActionFreeBelowLimit,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearMonotoneReport {
    pub shell_min: f64,
    pub rho: f64,
    pub pass: bool,
    pub case: NearMonotoneCase,
}

/// Compares `min_s r̄` over the outer shell `|x| ≥ 0.8 L` with ρ.
pub fn check_near_monotone(coeffs: &CoefficientField, rho: f64, domain: &OrthantDomain, n_actions: usize) -> NearMonotoneReport {
    let mut x = vec![0.0; domain.dim()];
    let shell = 0.8 * domain.side();
    let mut shell_min = f64::INFINITY;
    let mut below_limit = !coeffs.cost.depends_on_action();
    let limit = coeffs.cost.far_field_min();
    for i in 0..domain.node_count() {
        domain.coords_into(i, &mut x);
        let rmin = (0..n_actions).map(|s| coeffs.cost(&x, s)).fold(f64::INFINITY, f64::min);
        if norm(&x) >= shell - 1e-12 {
            shell_min = shell_min.min(rmin);
        }
        below_limit &= rmin < limit;
    }
    let pass = shell_min > rho;
    let case = if below_limit && coeffs.cutoffs.is_empty() {
        NearMonotoneCase::ActionFreeBelowLimit
    } else if pass {
        NearMonotoneCase::ShellAboveRho
    } else {
        NearMonotoneCase::Violated
    };
    NearMonotoneReport {
        shell_min,
        rho,
        pass,
        case,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEntry {
    pub k: f64,
    pub alpha: f64,
    /// Mean of `g(1, ·)` over the probe box.
    pub rho_candidate: f64,
    /// `max − min` of `g(1, ·)` over the probe box.
    pub g_variation: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub bound_pass: bool,
    /// `max/min` of `ū(1, ·)` over the probe box.
    pub harnack_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub table: Vec<RhoEntry>,
    /// `(k, ρ_k)` for each truncation level.
    pub rho_k: Vec<(f64, f64)>,
    pub rho: f64,
    /// `ū(1, ·)` at the largest `k` and smallest `α`.
    pub u_hat: Vec<f64>,
    pub policy: Policy,
    pub residual: ErgodicResidual,
    pub warnings: Vec<String>,
}

impl RhoEstimate {
    pub fn entries_for(&self, k: f64) -> Vec<&RhoEntry> {
        self.table.iter().filter(|e| e.k == k).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicOptions {
    pub solver: SolverOptions,
    /// Central fraction of each axis forming the probe box.
    pub probe_fraction: f64,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            probe_fraction: 0.5,
        }
    }
}

/// Geometric α schedule `start, start·ratio, ..` with `terms` entries.
pub fn geometric_schedule(start: f64, ratio: f64, terms: usize) -> Vec<f64> {
    (0..terms).map(|i| start * ratio.powi(i as i32)).collect()
}

struct Solved {
    entry: RhoEntry,
    field: Option<ValueField>,
}

/// Runs the vanishing-discount ladder over `alphas × ks`.
pub fn vanishing_discount_run(
    model: &ModelSpec,
    alphas: &[f64],
    ks: &[f64],
    options: &ErgodicOptions,
) -> Result<RhoEstimate> {
    if alphas.is_empty() || ks.is_empty() {
        return Err(Error::validation("schedules", "alpha and k schedules must be nonempty"));
    }
    if alphas.windows(2).any(|w| w[1] >= w[0]) || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::validation("alpha schedule", "must be positive and decreasing"));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) || ks.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::validation("k schedule", "must be positive and increasing"));
    }
    let reach = model.domain.side() * (model.dim() as f64).sqrt();
    if let Some(k) = ks.iter().find(|k| **k > reach) {
        return Err(Error::validation("k schedule", format!("k = {k} lies outside the truncation box")));
    }
    let probe = probe_nodes(&model.domain, options.probe_fraction);
    if probe.is_empty() {
        return Err(Error::validation("probe box", "contains no grid nodes"));
    }
    let x0 = model.reference_node;
    let kmax = *ks.last().unwrap();
    let amin = *alphas.last().unwrap();
    let jobs: Vec<(f64, f64)> = ks.iter().flat_map(|k| alphas.iter().map(move |a| (*k, *a))).collect();
    let solved: Vec<Result<Solved>> = jobs
        .par_iter()
        .map(|&(k, alpha)| {
            let wrap = |e: Error| Error::Ladder {
                k,
                alpha,
                source: Box::new(e),
            };
            let m = model
                .with_coefficients(truncate_cost(&model.coeffs, k))
                .and_then(|m| m.with_alpha(alpha))
                .map_err(wrap)?;
            let field = solve_discounted(&m, &options.solver).map_err(wrap)?;
            let pg = compute_phi_g(&field).map_err(wrap)?;
            let g1 = pg.g_slice(pg.last());
            let vals: Vec<f64> = probe.iter().map(|&i| g1[i]).collect();
            let gmax = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let last = field.slice(field.last());
            let pivot = last[x0];
            let (umax, umin) = probe.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &i| {
                (hi.max(last[i] / pivot), lo.min(last[i] / pivot))
            });
            let entry = RhoEntry {
                k,
                alpha,
                rho_candidate: vals.iter().sum::<f64>() / vals.len() as f64,
                g_variation: gmax - gmin,
                bound_lhs: pg.bound_lhs,
                bound_rhs: pg.bound_rhs,
                bound_pass: pg.bound_pass,
                harnack_ratio: umax / umin,
            };
            let keep = k == kmax && alpha == amin;
            Ok(Solved {
                entry,
                field: keep.then_some(field),
            })
        })
        .collect();
    let mut table = Vec::with_capacity(jobs.len());
    let mut final_field = None;
    for s in solved {
        let s = s?;
        table.push(s.entry);
        if s.field.is_some() {
            final_field = s.field;
        }
    }
    let final_field = final_field.expect("largest k and smallest alpha are in the job list");

    let mut warnings = Vec::new();
    let mut rho_k = Vec::new();
    for &k in ks {
        let rows: Vec<&RhoEntry> = table.iter().filter(|e| e.k == k).collect();
        if rows.windows(2).any(|w| w[1].g_variation >= w[0].g_variation && w[0].g_variation > 1e-12) {
            warnings.push(format!("k = {k}: spatial variation of g does not shrink along the alpha ladder"));
        }
        if rows.iter().any(|e| !e.bound_pass) {
            warnings.push(format!("k = {k}: bound on alpha*phi and alpha*theta*dphi/dtheta exceeded"));
        }
        let (first, last) = (rows[0].harnack_ratio, rows[rows.len() - 1].harnack_ratio);
        if last > 10.0 * first {
            warnings.push(format!("k = {k}: normalized value ratio grows from {first:.3e} to {last:.3e}"));
        }
        rho_k.push((k, rows[rows.len() - 1].rho_candidate));
    }
    let rho = rho_k.last().unwrap().1;
    let theta = final_field.thetas[final_field.last()];
    let policy = extract_policy(&final_field, theta)?;
    let normalized = normalize_at(&final_field, x0)?;
    let u_hat = normalized.slice(normalized.last()).to_vec();
    let residual = ergodic_residual(&final_field.model, rho, &u_hat, &policy)?;
    Ok(RhoEstimate {
        table,
        rho_k,
        rho,
        u_hat,
        policy,
        residual,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discounted::tests::{canonical_1d, ramp};
    use crate::domain::Cost;

    #[test]
    fn truncation_profile() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let c = truncate_cost(&m.coeffs, 1.0);
        assert_eq!(c.cost(&[0.8], 0), m.coeffs.cost(&[0.8], 0));
        assert_eq!(c.cost(&[2.0], 1), 0.0);
        assert_eq!(c.cost(&[7.0], 1), 0.0);
        assert!((c.cost(&[1.5], 0) - 0.5 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_cost_phi_g() {
        let m = canonical_1d(0.5, 0.25, Cost::Constant { value: 1.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let pg = compute_phi_g(&f).unwrap();
        let j = pg.last();
        for i in 0..f.node_count() {
            assert!((pg.phi[j * f.node_count() + i] - 2.0).abs() < 0.01);
            assert!((pg.g_slice(j)[i] - 1.0).abs() < 0.01);
        }
        assert!(pg.bound_pass);
    }

    #[test]
    fn zero_cost_phi_g() {
        let m = canonical_1d(0.5, 0.25, Cost::Constant { value: 0.0 });
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let pg = compute_phi_g(&f).unwrap();
        assert!(pg.phi.iter().chain(pg.g.iter()).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn g_variation_shrinks_with_discount() {
        let probe = probe_nodes(&canonical_1d(1.0, 0.125, ramp()).domain, 0.5);
        let variation = |alpha: f64| {
            let m = canonical_1d(alpha, 0.125, ramp());
            let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
            let pg = compute_phi_g(&f).unwrap();
            let g = pg.g_slice(pg.last());
            let hi = probe.iter().map(|i| g[*i]).fold(f64::NEG_INFINITY, f64::max);
            let lo = probe.iter().map(|i| g[*i]).fold(f64::INFINITY, f64::min);
            hi - lo
        };
        let (v1, v2, v3) = (variation(1.0), variation(0.5), variation(0.25));
        assert!(v1 > v2 && v2 > v3, "{v1} {v2} {v3}");
    }

    #[test]
    fn lagrange_is_exact_on_quadratics() {
        let t = [0.9, 0.95, 1.0];
        let q = |x: f64| 3.0 * x * x - x + 2.0;
        let y = [q(t[0]), q(t[1]), q(t[2])];
        for at in 0..3 {
            assert!((lagrange_derivative(&t, &y, at) - (6.0 * t[at] - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let f = solve_discounted(&m, &SolverOptions::default()).unwrap();
        let x0 = m.reference_node;
        let u = normalize_at(&f, x0).unwrap();
        for j in 0..u.n_slices() {
            assert_eq!(u.slice(j)[x0], 1.0);
        }
        assert_eq!(normalize_at(&u, x0).unwrap(), u);
        let c = solve_discounted(&canonical_1d(1.0, 0.25, Cost::Constant { value: 1.0 }), &SolverOptions::default()).unwrap();
        let cu = normalize_at(&c, x0).unwrap();
        assert!(cu.values.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(normalize_at(&f, 0).is_err());
    }

    #[test]
    fn constant_cost_ladder() {
        let m = canonical_1d(1.0, 0.25, Cost::Constant { value: 0.7 });
        // the cutoff lets the controller park near the far wall, so ρ_k < 0.7
        let est = vanishing_discount_run(&m, &[1.0, 0.5], &[5.0, 7.0], &ErgodicOptions::default()).unwrap();
        assert_eq!(est.table.len(), 4);
        let (r5, r7) = (est.rho_k[0].1, est.rho_k[1].1);
        assert!(0.0 < r5 && r5 <= r7 && r7 < 0.7, "{r5} {r7}");
        assert_eq!(est.rho, r7);
        let z = canonical_1d(1.0, 0.25, Cost::Constant { value: 0.0 });
        let est = vanishing_discount_run(&z, &[1.0, 0.5], &[7.0], &ErgodicOptions::default()).unwrap();
        assert_eq!(est.rho, 0.0);
        assert!(est.u_hat.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn residual_is_exact_for_constants_and_detects_bumps() {
        let m = canonical_1d(1.0, 0.25, Cost::Constant { value: 0.7 });
        let pol = Policy::uniform_action(m.domain.clone(), 1.0, 2, 0).unwrap();
        let mut u = vec![1.0; m.domain.node_count()];
        let r = ergodic_residual(&m, 0.7, &u, &pol).unwrap();
        assert_eq!((r.interior_max, r.boundary_max), (0.0, 0.0));
        let bump = m.domain.nearest_node(&[4.0]);
        u[bump] *= 1.1;
        let r = ergodic_residual(&m, 0.7, &u, &pol).unwrap();
        assert!(r.interior_max > 0.0);
        assert!((r.worst_node as isize - bump as isize).abs() <= 1);
    }

    #[test]
    fn near_monotone_cases() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let r = check_near_monotone(&m.coeffs, 1.0, &m.domain, 2);
        assert!(r.pass && r.shell_min == 2.0);
        let c = canonical_1d(1.0, 0.25, Cost::Constant { value: 1.0 });
        let r = check_near_monotone(&c.coeffs, 1.0, &c.domain, 2);
        assert!(!r.pass);
        assert_eq!(r.case, NearMonotoneCase::Violated);
    }

    #[test]
    fn ladder_rejects_bad_schedules() {
        let m = canonical_1d(1.0, 0.25, ramp());
        let o = ErgodicOptions::default();
        assert!(vanishing_discount_run(&m, &[0.5, 1.0], &[4.0], &o).is_err());
        assert!(vanishing_discount_run(&m, &[1.0], &[], &o).is_err());
        assert!(vanishing_discount_run(&m, &[1.0], &[40.0], &o).is_err());
    }
}
