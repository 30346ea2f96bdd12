//! Recurrence audit for a frozen stationary policy.
//!
//! `φ_R` solves the policy-frozen elliptic problem `Lφ = 0` on the truncated
//! orthant outside the target ball, with `φ = 1` on the ball, `∇φ·γ = 0` on
//! the reflecting faces and `φ = 0` on `|x| = R`. It increases with `R`
//! towards the probability of ever reaching the ball.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{norm, ModelSpec, OrthantDomain};
use crate::grid::{interpolate, Discretization};
use crate::policy::Policy;
use crate::sde::{check_start, drive_path, par_paths, step_count, validate_policy, ControlPolicy};
use crate::stats::wilson_interval;
use crate::{Error, Result};

pub const SOLVE_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl TargetBall {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::validation("target ball", "center must lie in the orthant"));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::validation("target ball", "radius must be positive"));
        }
        Ok(Self { center, radius })
    }

    /// Radius `L/10` around `(L/4, .., L/4)`.
    pub fn default_for(domain: &OrthantDomain) -> Self {
        Self {
            center: vec![domain.side() / 4.0; domain.dim()],
            radius: domain.side() / 10.0,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let d2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        d2 <= self.radius * self.radius * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingField {
    pub radius: f64,
    pub domain: OrthantDomain,
    pub phi: Vec<f64>,
    pub sweeps: usize,
    pub omega: f64,
    pub residual: f64,
}

impl HittingField {
    /// Multilinear interpolation of `φ_R` (zero beyond the truncation).
    pub fn value_at(&self, x: &[f64]) -> f64 {
        if norm(x) >= self.radius {
            return 0.0;
        }
        interpolate(&self.domain, &self.phi, x)
    }
}

#[derive(Clone, Copy)]
enum Row {
    One,
    Zero,
    Interior { action: usize, diag: f64 },
    Boundary(usize),
}

/// Solves for `φ_R` on the grid of spacing `h` covering `[0, R]^d`.
///
/// The policy is read at the nearest node of its own grid, so beyond the
/// policy box the action of the closest face node is used.
pub fn hitting_probability_pde(model: &ModelSpec, policy: &Policy, ball: &TargetBall, radius: f64) -> Result<HittingField> {
    let d = model.dim();
    let h = model.domain.spacing();
    if ball.center.len() != d {
        return Err(Error::validation("target ball", "dimension mismatch"));
    }
    if policy.n_actions != model.n_actions() {
        return Err(Error::validation("policy", "action count does not match the model"));
    }
    if !(radius > norm(&ball.center) + ball.radius) {
        return Err(Error::validation(
            "truncation radius",
            format!("R = {radius} does not enclose the target ball"),
        ));
    }
    let cells = ((radius / h) * (1.0 - 1e-12)).ceil().max(4.0) as usize;
    let domain = OrthantDomain::new(d, cells as f64 * h, h)?;
    let big = ModelSpec::new(
        domain.clone(),
        model.actions.clone(),
        model.coeffs.clone(),
        model.theta,
        model.alpha,
        model.kappa,
        model.seed,
        None,
    )?;
    let disc = Discretization::new(&big)?;
    let n = domain.node_count();
    let mut boundary_row = vec![usize::MAX; n];
    for (k, i) in disc.boundary.nodes().iter().enumerate() {
        boundary_row[*i] = k;
    }
    let mut x = vec![0.0; d];
    let mut rows = Vec::with_capacity(n);
    let mut hits = 0usize;
    for i in 0..n {
        domain.coords_into(i, &mut x);
        let row = if ball.contains(&x) {
            hits += 1;
            Row::One
        } else if norm(&x) >= radius - 1e-9 * h {
            Row::Zero
        } else if disc.is_interior(i) {
            let action = policy.action_at(&x);
            let b = disc.drift(i, action);
            let diag = -disc.diffusion_center() - b.iter().map(|v| v.abs()).sum::<f64>() / h;
            Row::Interior { action, diag }
        } else {
            Row::Boundary(boundary_row[i])
        };
        rows.push(row);
    }
    if hits == 0 {
        return Err(Error::validation("target ball", "contains no grid node"));
    }
    let init = |u: &mut Vec<f64>| {
        u.clear();
        u.extend(rows.iter().map(|r| if matches!(r, Row::One) { 1.0 } else { 0.0 }));
    };
    let m = domain.nodes_per_axis() as f64;
    let fast = (2.0 / (1.0 + (std::f64::consts::PI / m).sin())).min(1.95);
    let mut u = Vec::with_capacity(n);
    for omega in [fast, 1.0] {
        init(&mut u);
        let first = sor(&disc, &rows, &mut u, omega);
        match first {
            Some((sweeps, residual)) => {
                return Ok(HittingField {
                    radius,
                    domain,
                    phi: u,
                    sweeps,
                    omega,
                    residual,
                })
            }
            None if omega == 1.0 => break,
            None => continue,
        }
    }
    Err(Error::Solver(format!(
        "hitting-probability solve at R = {radius} did not reach {SOLVE_TOL:e} in {MAX_SWEEPS} sweeps"
    )))
}

/// Lexicographic over-relaxed sweeps. Returns `None` on divergence or when
/// the sweep limit is hit.
fn sor(disc: &Discretization, rows: &[Row], u: &mut [f64], omega: f64) -> Option<(usize, f64)> {
    for sweep in 1..=MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for i in 0..rows.len() {
            let target = match rows[i] {
                Row::One | Row::Zero => continue,
                Row::Interior { action, diag } => {
                    let lhs = disc.diffusion_term(u, i) + disc.drift_term(u, i, action);
                    u[i] - lhs / diag
                }
                Row::Boundary(k) => disc.boundary.implied(k, u),
            };
            let delta = target - u[i];
            change = change.max(delta.abs());
            u[i] += omega * delta;
        }
        if !change.is_finite() || change > 1e6 {
            return None;
        }
        if change < SOLVE_TOL {
            return Some((sweep, change));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Recurrent,
    Transient,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitReport {
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean hitting time among paths that hit.
    pub mean_time: Option<f64>,
    pub n_paths: usize,
    pub t_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceReport {
    pub ball: TargetBall,
    pub query: Vec<f64>,
    pub fields: Vec<HittingField>,
    /// `(R, φ_R(x))` for each truncation.
    pub phi_at_query: Vec<(f64, f64)>,
    pub limit_estimate: f64,
    pub last_increment: f64,
    pub eps: f64,
    pub verdict: Verdict,
    pub mc: Option<HitReport>,
    /// Only the supplied policy is audited.
    pub note: String,
}

impl RecurrenceReport {
    /// `(R, φ_R(x))` rows for CSV output.
    pub fn csv_rows(&self) -> Vec<(f64, f64)> {
        self.phi_at_query.clone()
    }
}

/// Solves `φ_R` along an increasing radius schedule and classifies the
/// policy at `query`.
pub fn classify_recurrence(
    model: &ModelSpec,
    policy: &Policy,
    ball: &TargetBall,
    query: &[f64],
    radii: &[f64],
    eps: f64,
) -> Result<RecurrenceReport> {
    if radii.len() < 3 {
        return Err(Error::validation("radius schedule", "at least 3 radii are needed"));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("radius schedule", "must be increasing"));
    }
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::validation("eps", format!("{eps} is not in (0, 0.1)")));
    }
    if query.len() != model.dim() || query.iter().any(|v| *v < 0.0) {
        return Err(Error::validation("query point", "must lie in the orthant"));
    }
    if norm(query) >= radii[0] {
        return Err(Error::validation("query point", "lies beyond the smallest truncation"));
    }
    let fields: Vec<HittingField> = radii
        .par_iter()
        .map(|r| hitting_probability_pde(model, policy, ball, *r))
        .collect::<Result<_>>()?;
    let phi_at_query: Vec<(f64, f64)> = fields
        .iter()
        .map(|f| (f.radius, if ball.contains(query) { 1.0 } else { f.value_at(query) }))
        .collect();
    let k = phi_at_query.len();
    let limit = phi_at_query[k - 1].1;
    let last_increment = limit - phi_at_query[k - 2].1;
    let stable = last_increment.abs() < eps / 4.0;
    let verdict = if limit >= 1.0 - eps && stable {
        Verdict::Recurrent
    } else if limit <= 1.0 - 10.0 * eps && stable {
        Verdict::Transient
    } else {
        Verdict::Inconclusive
    };
    Ok(RecurrenceReport {
        ball: ball.clone(),
        query: query.to_vec(),
        fields,
        phi_at_query,
        limit_estimate: limit,
        last_increment,
        eps,
        verdict,
        mc: None,
        note: "recurrence is audited for the supplied stationary policy only".into(),
    })
}

/// Fraction of paths from `start` entering the ball before `t_cap`, with a
/// 95% Wilson interval.
#[allow(clippy::too_many_arguments)]
pub fn hitting_time_mc(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    ball: &TargetBall,
    t_cap: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<HitReport> {
    if !(t_cap > 0.0) {
        return Err(Error::validation("t_cap", "must be positive"));
    }
    if n_paths == 0 {
        return Err(Error::validation("n_paths", "must be positive"));
    }
    check_start(model, start)?;
    validate_policy(model, policy)?;
    let (steps, dt) = step_count(t_cap, dt.min(t_cap))?;
    let times: Vec<Option<f64>> = if ball.contains(start) {
        vec![Some(0.0); n_paths]
    } else {
        par_paths(n_paths, seed, |_, s| {
            let mut hit = None;
            drive_path(model, policy, start, dt, steps, s, |tr| {
                if ball.contains(tr.y) {
                    hit = Some(tr.t + tr.dt);
                    return false;
                }
                true
            })?;
            Ok(hit)
        })?
    };
    let hits: Vec<f64> = times.iter().flatten().cloned().collect();
    let (lo, hi) = wilson_interval(hits.len(), n_paths, 1.96);
    Ok(HitReport {
        fraction: hits.len() as f64 / n_paths as f64,
        ci_low: lo,
        ci_high: hi,
        mean_time: (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64),
        n_paths,
        t_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionSpace, CoefficientField, Cost, Diffusion, Drift, Reflection};
    use proptest::prelude::*;

    fn model(mu: f64, sigma: f64, side: f64, h: f64) -> ModelSpec {
        let coeffs = CoefficientField {
            drift: Drift::Constant { vectors: vec![vec![mu]] },
            diffusion: Diffusion::diagonal(&[sigma]).unwrap(),
            reflection: Reflection::Normal,
            cost: Cost::Constant { value: 0.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        };
        ModelSpec::new(
            OrthantDomain::new(1, side, h).unwrap(),
            ActionSpace::numbered(1).unwrap(),
            coeffs,
            1.0,
            1.0,
            0.05,
            0,
            None,
        )
        .unwrap()
    }

    fn frozen(m: &ModelSpec) -> Policy {
        Policy::uniform_action(m.domain.clone(), 1.0, 1, 0).unwrap()
    }

    fn lower(b: f64) -> TargetBall {
        TargetBall::new(vec![0.0], b).unwrap()
    }

    #[test]
    fn ball_nodes_are_one() {
        let m = model(0.5, 1.0, 8.0, 0.125);
        let f = hitting_probability_pde(&m, &frozen(&m), &lower(0.5), 6.0).unwrap();
        assert_eq!(f.value_at(&[0.5]), 1.0);
        assert_eq!(f.value_at(&[0.25]), 1.0);
        assert_eq!(f.value_at(&[6.0]), 0.0);
    }

    #[test]
    fn outward_drift_matches_scale_function() {
        let (mu, b) = (0.5, 0.5);
        let m = model(mu, 1.0, 8.0, 1.0 / 32.0);
        let f = hitting_probability_pde(&m, &frozen(&m), &lower(b), b + 12.0).unwrap();
        let phi = f.value_at(&[b + 1.0]);
        let oracle = (-2.0 * mu * 1.0f64).exp();
        assert!((phi - oracle).abs() < 1e-2, "{phi} vs {oracle}");
    }

    #[test]
    fn inward_drift_hits_almost_surely() {
        let b = 0.5;
        let m = model(-1.0, 1.0, 8.0, 1.0 / 32.0);
        let f = hitting_probability_pde(&m, &frozen(&m), &lower(b), b + 8.0).unwrap();
        assert!(f.value_at(&[b + 1.0]) >= 0.99);
    }

    #[test]
    fn driftless_solution_is_linear() {
        let (b, r) = (0.5, 10.0);
        let m = model(0.0, 1.0, 8.0, 0.125);
        let f = hitting_probability_pde(&m, &frozen(&m), &lower(b), r).unwrap();
        for x in [1.0, 3.0, 7.5] {
            assert!((f.value_at(&[x]) - (r - x) / (r - b)).abs() < 1e-8);
        }
    }

    #[test]
    fn classification() {
        let ball = lower(0.5);
        let q = [1.0];
        let radii = [50.0, 100.0, 200.0, 400.0];
        let m = model(0.0, 1.0, 8.0, 0.25);
        let r = classify_recurrence(&m, &frozen(&m), &ball, &q, &radii, DEFAULT_EPS).unwrap();
        assert_eq!(r.verdict, Verdict::Recurrent, "{:?}", r.phi_at_query);
        let m = model(1.0, 1.0, 8.0, 0.125);
        let r = classify_recurrence(&m, &frozen(&m), &ball, &q, &[8.0, 12.0, 16.0], DEFAULT_EPS).unwrap();
        assert_eq!(r.verdict, Verdict::Transient);
        let r = classify_recurrence(&m, &frozen(&m), &ball, &[0.25], &[8.0, 12.0, 16.0], DEFAULT_EPS).unwrap();
        assert_eq!(r.verdict, Verdict::Recurrent);
        assert!(classify_recurrence(&m, &frozen(&m), &ball, &q, &[8.0, 12.0], DEFAULT_EPS).is_err());
    }

    #[test]
    fn two_dimensional_bounds() {
        let coeffs = CoefficientField {
            drift: Drift::Constant { vectors: vec![vec![0.3, -0.2]] },
            diffusion: Diffusion::identity(2),
            reflection: Reflection::Oblique {
                directions: vec![vec![1.0, 0.3], vec![-0.2, 1.0]],
            },
            cost: Cost::Constant { value: 0.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 0.5,
        };
        let m = ModelSpec::new(
            OrthantDomain::new(2, 6.0, 0.25).unwrap(),
            ActionSpace::numbered(1).unwrap(),
            coeffs,
            1.0,
            1.0,
            0.05,
            0,
            None,
        )
        .unwrap();
        let ball = TargetBall::default_for(&m.domain);
        let p = frozen(&m);
        let a = hitting_probability_pde(&m, &p, &ball, 5.0).unwrap();
        let b = hitting_probability_pde(&m, &p, &ball, 7.0).unwrap();
        assert!(a.phi.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
        let mut x = vec![0.0; 2];
        for i in 0..a.domain.node_count() {
            a.domain.coords_into(i, &mut x);
            assert!(b.value_at(&x) >= a.phi[i] - 1e-8);
        }
    }

    #[test]
    fn mc_trivial_cases() {
        let m = model(0.0, 1.0, 8.0, 0.125);
        let pol = ControlPolicy::dirac(1, 0);
        let ball = lower(0.5);
        let r = hitting_time_mc(&m, &pol, &[0.25], &ball, 0.01, 0.01, 50, 1).unwrap();
        assert_eq!(r.fraction, 1.0);
        let still = model(0.0, 0.0, 8.0, 0.125);
        let r = hitting_time_mc(&still, &pol, &[2.0], &ball, 5.0, 0.01, 50, 1).unwrap();
        assert_eq!(r.fraction, 0.0);
        assert_eq!(r.mean_time, None);
    }

    #[test]
    fn driftless_paths_hit_on_a_small_box() {
        // On [0, 2] the survival probability past t = 50 is below 1e-10.
        let m = model(0.0, 1.0, 2.0, 0.125);
        let r = hitting_time_mc(&m, &ControlPolicy::dirac(1, 0), &[1.0], &lower(0.5), 50.0, 1e-3, 1000, 3).unwrap();
        assert!(r.fraction >= 0.99, "{}", r.fraction);
    }

    #[test]
    fn pde_and_mc_agree_for_outward_drift() {
        let (mu, b) = (0.5, 0.5);
        let m = model(mu, 1.0, 12.0, 1.0 / 32.0);
        let pde = hitting_probability_pde(&m, &frozen(&m), &lower(b), b + 12.0).unwrap().value_at(&[b + 1.0]);
        let n = 4000;
        let mc = hitting_time_mc(&m, &ControlPolicy::dirac(1, 0), &[b + 1.0], &lower(b), 20.0, 1e-3, n, 11).unwrap();
        let se = (pde * (1.0 - pde) / n as f64).sqrt();
        assert!((mc.fraction - pde).abs() <= 3.0 * se, "{} vs {pde}", mc.fraction);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn maximum_principle_and_radius_monotonicity(mu in -1.5f64..1.5, b in 0.25f64..1.0) {
            let m = model(mu, 1.0, 8.0, 0.125);
            let p = frozen(&m);
            let ball = lower(b);
            let small = hitting_probability_pde(&m, &p, &ball, 4.0).unwrap();
            let large = hitting_probability_pde(&m, &p, &ball, 6.0).unwrap();
            prop_assert!(small.phi.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
            for i in 0..small.domain.node_count() {
                prop_assert!(large.phi[i] >= small.phi[i] - 1e-8);
            }
        }
    }
}
