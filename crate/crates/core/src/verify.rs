//! Martingale-identity tests and the end-to-end suite.
//!
//! For a smooth test function `f` the simulator's discrete analogue of
//! `M_f(t) = f(X_t) − ∫₀ᵗ Lf(X_s, v_s) ds − ∫₀ᵗ ∇f·γ dξ_s`
//! should have increments with mean zero that are uncorrelated with the
//! state at the earlier checkpoint. The push term uses the gradient at the
//! midpoint of the projection segment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::discounted::{representation_check, solve_discounted, verify_bounds, SolverOptions};
use crate::domain::{check_ellipticity, check_reflection_angle, CoefficientField, ModelSpec};
use crate::ergodic::{check_near_monotone, vanishing_discount_run, ErgodicOptions};
use crate::recurrence::{classify_recurrence, TargetBall, Verdict, DEFAULT_EPS};
use crate::sde::{check_start, drive_path, par_paths, validate_policy, ControlPolicy};
use crate::stats::{mean, ols_slope, std_error};
use crate::{Error, Result};

/// Product taper `Π τ(x_j)` with `τ = 1` below `start`, `0` above `end` and
/// a quintic (C²) blend between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Taper {
    pub start: f64,
    pub end: f64,
}

impl Taper {
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        if x <= self.start {
            return (1.0, 0.0, 0.0);
        }
        if x >= self.end {
            return (0.0, 0.0, 0.0);
        }
        let w = self.end - self.start;
        let t = (x - self.start) / w;
        let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let s1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        let s2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        (1.0 - s, -s1 / w, -s2 / (w * w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Constant,
    Linear { coeffs: Vec<f64> },
    /// `|x|²`.
    Quadratic,
    /// `Π cos(x_j)`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub shape: Shape,
    pub taper: Option<Taper>,
}

/// Work buffers for [`TestFunction::eval_into`].
#[derive(Debug, Clone)]
pub struct Scratch {
    tau: Vec<(f64, f64, f64)>,
    gg: Vec<f64>,
    gh: Vec<f64>,
}

impl Scratch {
    pub fn new(dim: usize) -> Self {
        Self {
            tau: vec![(1.0, 0.0, 0.0); dim],
            gg: vec![0.0; dim],
            gh: vec![0.0; dim * dim],
        }
    }
}

impl TestFunction {
    pub fn new(name: &str, shape: Shape, taper: Option<Taper>) -> Result<Self> {
        if let Some(t) = taper {
            if !(t.start >= 0.0 && t.end > t.start) {
                return Err(Error::validation("taper", "need 0 <= start < end"));
            }
        }
        Ok(Self {
            name: name.into(),
            shape,
            taper,
        })
    }

    fn shape_into(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = x.len();
        grad.fill(0.0);
        hess.fill(0.0);
        match &self.shape {
            Shape::Constant => 1.0,
            Shape::Linear { coeffs } => {
                grad.copy_from_slice(coeffs);
                coeffs.iter().zip(x).map(|(c, v)| c * v).sum()
            }
            Shape::Quadratic => {
                for j in 0..d {
                    grad[j] = 2.0 * x[j];
                    hess[j * d + j] = 2.0;
                }
                x.iter().map(|v| v * v).sum()
            }
            Shape::Cosine => {
                let g: f64 = x.iter().map(|v| v.cos()).product();
                for j in 0..d {
                    let others: f64 = (0..d).filter(|k| *k != j).map(|k| x[k].cos()).product();
                    grad[j] = -x[j].sin() * others;
                    for k in 0..d {
                        hess[j * d + k] = if j == k {
                            -g
                        } else {
                            let rest: f64 = (0..d).filter(|m| *m != j && *m != k).map(|m| x[m].cos()).product();
                            x[j].sin() * x[k].sin() * rest
                        };
                    }
                }
                g
            }
        }
    }

    /// Value, gradient and row-major Hessian at `x`.
    pub fn eval_into(&self, x: &[f64], sc: &mut Scratch, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = x.len();
        let Some(taper) = self.taper else {
            return self.shape_into(x, grad, hess);
        };
        let mut gg = std::mem::take(&mut sc.gg);
        let mut gh = std::mem::take(&mut sc.gh);
        let g = self.shape_into(x, &mut gg, &mut gh);
        for j in 0..d {
            sc.tau[j] = taper.eval(x[j]);
        }
        let prod_except = |skip: &[usize]| -> f64 {
            (0..d).filter(|k| !skip.contains(k)).map(|k| sc.tau[k].0).product()
        };
        let t = prod_except(&[]);
        let mut dt = vec![0.0; d];
        for j in 0..d {
            dt[j] = sc.tau[j].1 * prod_except(&[j]);
        }
        for j in 0..d {
            grad[j] = g * dt[j] + t * gg[j];
            for k in 0..d {
                let ttk = if j == k {
                    sc.tau[j].2 * prod_except(&[j])
                } else {
                    sc.tau[j].1 * sc.tau[k].1 * prod_except(&[j, k])
                };
                hess[j * d + k] = g * ttk + gg[j] * dt[k] + dt[j] * gg[k] + t * gh[j * d + k];
            }
        }
        sc.gg = gg;
        sc.gh = gh;
        g * t
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let d = x.len();
        self.eval_into(x, &mut Scratch::new(d), &mut vec![0.0; d], &mut vec![0.0; d * d])
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut g = vec![0.0; d];
        self.eval_into(x, &mut Scratch::new(d), &mut g, &mut vec![0.0; d * d]);
        g
    }
}

/// `b̄(x, v)·∇f(x) + ½ tr(a ∇²f(x))` with analytic derivatives.
pub fn apply_generator(coeffs: &CoefficientField, f: &TestFunction, x: &[f64], weights: &[f64]) -> f64 {
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    f.eval_into(x, &mut Scratch::new(d), &mut grad, &mut hess);
    coeffs.drift_relaxed_into(x, weights, &mut b, &mut scratch);
    generator_from(coeffs, &b, &grad, &hess)
}

fn generator_from(coeffs: &CoefficientField, b: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
    let d = b.len();
    let a = coeffs.diffusion.a();
    let mut acc: f64 = b.iter().zip(grad).map(|(p, q)| p * q).sum();
    for i in 0..d {
        for j in 0..d {
            acc += 0.5 * a[i * d + j] * hess[i * d + j];
        }
    }
    acc
}

/// Checks `∇f·γ ≥ 0` on every face of every boundary node.
pub fn check_boundary_condition(model: &ModelSpec, f: &TestFunction) -> Result<()> {
    let domain = &model.domain;
    let d = domain.dim();
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    for idx in 0..domain.node_count() {
        let faces = domain.zero_faces(idx);
        if faces == 0 {
            continue;
        }
        domain.coords_into(idx, &mut x);
        let grad = f.gradient(&x);
        for face in (0..d).filter(|i| faces & (1 << i) != 0) {
            model.coeffs.reflection.direction_into(face, &x, &mut g);
            let dot: f64 = grad.iter().zip(&g).map(|(p, q)| p * q).sum();
            if dot < -1e-12 {
                return Err(Error::validation(
                    "test function",
                    format!("{}: grad f . gamma = {dot:.3e} < 0 at {x:?} on face {face}", f.name),
                ));
            }
        }
    }
    Ok(())
}

/// Four tapered functions (constant, linear, quadratic, cosine) that are
/// flat below `0.6 L` and vanish above `0.9 L` in every coordinate.
pub fn default_catalog(model: &ModelSpec) -> Vec<TestFunction> {
    let side = model.domain.side();
    let taper = Some(Taper {
        start: 0.6 * side,
        end: 0.9 * side,
    });
    let d = model.dim();
    vec![
        TestFunction::new("constant", Shape::Constant, taper),
        TestFunction::new("linear", Shape::Linear { coeffs: vec![1.0; d] }, taper),
        TestFunction::new("quadratic", Shape::Quadratic, taper),
        TestFunction::new("cosine", Shape::Cosine, taper),
    ]
    .into_iter()
    .map(|f| f.expect("catalog tapers are valid"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTestSpec {
    pub functions: Vec<TestFunction>,
    /// Increasing times; increments are taken between neighbours.
    pub checkpoints: Vec<f64>,
    pub start: Vec<f64>,
    pub dt: f64,
}

impl MartingaleTestSpec {
    /// Validates the checkpoints and the boundary sign condition of every function.
    pub fn new(model: &ModelSpec, functions: Vec<TestFunction>, checkpoints: Vec<f64>, start: Vec<f64>, dt: f64) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::validation("test functions", "catalog is empty"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::validation("dt", "must be positive"));
        }
        if checkpoints.len() < 2 || checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints[0] < 0.0 {
            return Err(Error::validation("checkpoints", "need at least 2 increasing nonnegative times"));
        }
        for c in &checkpoints {
            let k = (c / dt).round();
            if (k * dt - c).abs() > 1e-9 * c.max(1.0) {
                return Err(Error::validation("checkpoints", format!("{c} is not a multiple of dt = {dt}")));
            }
        }
        check_start(model, &start)?;
        for f in &functions {
            if let Shape::Linear { coeffs } = &f.shape {
                if coeffs.len() != model.dim() {
                    return Err(Error::validation("test function", format!("{}: wrong coefficient count", f.name)));
                }
            }
            check_boundary_condition(model, f)?;
        }
        Ok(Self {
            functions,
            checkpoints,
            start,
            dt,
        })
    }

    pub fn horizon(&self) -> f64 {
        *self.checkpoints.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeStat {
    pub coordinate: usize,
    pub slope: f64,
    pub std_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementStat {
    pub s: f64,
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub z: f64,
    /// Regression of `M_f(t) − M_f(s)` on each coordinate of `X_s`.
    pub slopes: Vec<SlopeStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionReport {
    pub name: String,
    pub increments: Vec<IncrementStat>,
    pub max_z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub functions: Vec<FunctionReport>,
    pub max_z: f64,
    pub pass: bool,
    pub n_paths: usize,
    pub dt: f64,
    pub contaminated_fraction: f64,
}

pub const Z_FAIL: f64 = 4.0;

fn z_score(value: f64, se: f64) -> f64 {
    if se > 0.0 {
        (value / se).abs()
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

struct PathRecord {
    /// `m[f][c]`.
    m: Vec<Vec<f64>>,
    /// `x[c]`.
    x: Vec<Vec<f64>>,
    outer: bool,
}

/// Simulates `n_paths` paths and tests the increments of `M_f`.
pub fn martingale_residual(
    model: &ModelSpec,
    policy: &ControlPolicy,
    spec: &MartingaleTestSpec,
    n_paths: usize,
    base_seed: u64,
) -> Result<MartingaleReport> {
    validate_policy(model, policy)?;
    if n_paths < 3 {
        return Err(Error::Estimation("martingale test needs at least 3 paths".into()));
    }
    let d = model.dim();
    let nf = spec.functions.len();
    let dt = spec.dt;
    let marks: Vec<usize> = spec.checkpoints.iter().map(|c| (c / dt).round() as usize).collect();
    let steps = *marks.last().unwrap();
    let coeffs = &model.coeffs;
    let records = par_paths(n_paths, base_seed, |_, seed| {
        let mut sc = Scratch::new(d);
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut mid = vec![0.0; d];
        let mut comp = vec![0.0; nf];
        let mut rec = PathRecord {
            m: vec![Vec::with_capacity(marks.len()); nf],
            x: Vec::with_capacity(marks.len()),
            outer: false,
        };
        let mut next = 0;
        let mut record = |y: &[f64], comp: &[f64], rec: &mut PathRecord, sc: &mut Scratch| {
            for (i, f) in spec.functions.iter().enumerate() {
                let v = f.eval_into(y, sc, &mut tmp, &mut vec![0.0; d * d]);
                rec.m[i].push(v - comp[i]);
            }
            rec.x.push(y.to_vec());
        };
        while next < marks.len() && marks[next] == 0 {
            record(&spec.start, &comp, &mut rec, &mut sc);
            next += 1;
        }
        drive_path(model, policy, &spec.start, dt, steps, seed, |tr| {
            coeffs.drift_relaxed_into(tr.x, tr.weights, &mut b, &mut mid);
            let pushed = tr.y != tr.pre;
            if pushed {
                for j in 0..d {
                    mid[j] = 0.5 * (tr.pre[j] + tr.y[j]);
                }
            }
            for (i, f) in spec.functions.iter().enumerate() {
                f.eval_into(tr.x, &mut sc, &mut grad, &mut hess);
                comp[i] += generator_from(coeffs, &b, &grad, &hess) * tr.dt;
                if pushed {
                    f.eval_into(&mid, &mut sc, &mut grad, &mut hess);
                    comp[i] += (0..d).map(|j| grad[j] * (tr.y[j] - tr.pre[j])).sum::<f64>();
                }
            }
            rec.outer |= tr.outer;
            while next < marks.len() && tr.step + 1 == marks[next] {
                record(tr.y, &comp, &mut rec, &mut sc);
                next += 1;
            }
            true
        })?;
        Ok(rec)
    })?;

    let mut functions = Vec::with_capacity(nf);
    for (i, f) in spec.functions.iter().enumerate() {
        let mut increments = Vec::new();
        for c in 1..marks.len() {
            let inc: Vec<f64> = records.iter().map(|r| r.m[i][c] - r.m[i][c - 1]).collect();
            let m = mean(&inc);
            let se = std_error(&inc);
            let mut slopes = Vec::new();
            for j in 0..d {
                let xs: Vec<f64> = records.iter().map(|r| r.x[c - 1][j]).collect();
                if let Some((slope, sse)) = ols_slope(&xs, &inc) {
                    slopes.push(SlopeStat {
                        coordinate: j,
                        slope,
                        std_error: sse,
                        z: z_score(slope, sse),
                    });
                }
            }
            increments.push(IncrementStat {
                s: spec.checkpoints[c - 1],
                t: spec.checkpoints[c],
                mean: m,
                std_error: se,
                z: z_score(m, se),
                slopes,
            });
        }
        let max_z = increments
            .iter()
            .flat_map(|s| std::iter::once(s.z).chain(s.slopes.iter().map(|p| p.z)))
            .fold(0.0, f64::max);
        functions.push(FunctionReport {
            name: f.name.clone(),
            increments,
            max_z,
            pass: max_z <= Z_FAIL,
        });
    }
    let max_z = functions.iter().map(|f| f.max_z).fold(0.0, f64::max);
    Ok(MartingaleReport {
        pass: functions.iter().all(|f| f.pass),
        functions,
        max_z,
        n_paths,
        dt,
        contaminated_fraction: records.iter().filter(|r| r.outer).count() as f64 / n_paths as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Warn,
    Inconclusive,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub model: String,
    pub check: String,
    pub status: Status,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSettings {
    pub solver: SolverOptions,
    /// Empty means `{1, 1/2, 1/4}`.
    pub alphas: Vec<f64>,
    /// Empty means `{L/2, 3L/4}`.
    pub ks: Vec<f64>,
    pub representation_paths: usize,
    pub representation_dt: f64,
    pub martingale_paths: usize,
    pub martingale_dt: f64,
    pub checkpoints: Vec<f64>,
    /// Empty means `{1.5 L, 2 L, 3 L}`.
    pub radii: Vec<f64>,
    pub ellipticity_samples: usize,
    pub seed: u64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            alphas: Vec::new(),
            ks: Vec::new(),
            representation_paths: 2000,
            representation_dt: 1e-2,
            martingale_paths: 2000,
            martingale_dt: 1e-2,
            checkpoints: vec![0.5, 1.0],
            radii: Vec::new(),
            ellipticity_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub verdict: Status,
    pub rho: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
}

struct Recorder<'a> {
    model: &'a str,
    checks: Vec<CheckResult>,
}

impl Recorder<'_> {
    fn push(&mut self, check: &str, status: Status, detail: String, metrics: &[(&str, f64)]) {
        self.checks.push(CheckResult {
            model: self.model.into(),
            check: check.into(),
            status,
            detail,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
    }

    fn error(&mut self, check: &str, e: &Error) {
        self.push(check, Status::Fail, e.to_string(), &[]);
    }
}

const DOWNSTREAM: [&str; 5] = ["discounted_bounds", "representation", "ergodic", "recurrence", "martingale"];

fn run_model(name: &str, model: &ModelSpec, s: &SuiteSettings) -> (Vec<CheckResult>, Option<f64>) {
    let mut rec = Recorder {
        model: name,
        checks: Vec::new(),
    };
    let ell = check_ellipticity(&model.coeffs, &model.domain, s.ellipticity_samples, s.seed);
    rec.push(
        "ellipticity",
        if ell.pass { Status::Pass } else { Status::Fail },
        format!("min z'az = {:.6} vs delta = {:.6}", ell.min_quadratic_form, ell.threshold),
        &[("min_quadratic_form", ell.min_quadratic_form)],
    );
    let refl = check_reflection_angle(&model.coeffs, &model.domain);
    rec.push(
        "reflection_angle",
        if refl.pass { Status::Pass } else { Status::Fail },
        format!("min gamma.n = {:.6} vs eta = {:.6}", refl.min_dot, refl.threshold),
        &[("min_dot", refl.min_dot)],
    );
    if !(ell.pass && refl.pass) {
        for c in DOWNSTREAM {
            rec.push(c, Status::Inconclusive, "skipped after a failed assumption audit".into(), &[]);
        }
        return (rec.checks, None);
    }

    let x0 = model.domain.coords(model.reference_node);
    let side = model.domain.side();
    match solve_discounted(model, &s.solver) {
        Ok(field) => {
            let b = verify_bounds(&field);
            rec.push(
                "discounted_bounds",
                if b.pass { Status::Pass } else { Status::Fail },
                format!("alpha = {}, {} theta steps", model.alpha, field.steps),
                &[
                    ("upper_slack", b.upper_slack),
                    ("lower_slack", b.lower_slack),
                    ("derivative_slack", b.derivative_slack),
                    ("monotone_slack", b.monotone_slack),
                ],
            );
            match representation_check(&field, &x0, s.representation_paths, s.representation_dt, s.seed) {
                Ok(r) => {
                    let status = if r.error_bars <= 3.0 {
                        Status::Pass
                    } else if r.error_bars <= Z_FAIL {
                        Status::Warn
                    } else {
                        Status::Fail
                    };
                    rec.push(
                        "representation",
                        status,
                        format!("log gap {:.3e} = {:.2} combined error bars", r.log_gap, r.error_bars),
                        &[("log_gap", r.log_gap), ("combined_error", r.combined_error), ("error_bars", r.error_bars)],
                    );
                }
                Err(e) => rec.error("representation", &e),
            }
        }
        Err(e) => {
            rec.error("discounted_bounds", &e);
            rec.push("representation", Status::Inconclusive, "skipped: no value field".into(), &[]);
        }
    }

    let alphas = if s.alphas.is_empty() { vec![1.0, 0.5, 0.25] } else { s.alphas.clone() };
    let ks = if s.ks.is_empty() { vec![side / 2.0, 0.75 * side] } else { s.ks.clone() };
    let opts = ErgodicOptions {
        solver: s.solver,
        ..ErgodicOptions::default()
    };
    let mut rho = None;
    match vanishing_discount_run(model, &alphas, &ks, &opts) {
        Ok(est) => {
            rho = Some(est.rho);
            let nm = check_near_monotone(&model.coeffs, est.rho, &model.domain, model.n_actions());
            let mut notes = est.warnings.clone();
            if !nm.pass {
                notes.push(format!("shell cost minimum {:.4} does not exceed rho", nm.shell_min));
            }
            rec.push(
                "ergodic",
                if notes.is_empty() { Status::Pass } else { Status::Warn },
                if notes.is_empty() { format!("rho = {:.6}", est.rho) } else { notes.join("; ") },
                &[
                    ("rho", est.rho),
                    ("residual_interior", est.residual.interior_max),
                    ("shell_min", nm.shell_min),
                ],
            );
            let radii = if s.radii.is_empty() { vec![1.5 * side, 2.0 * side, 3.0 * side] } else { s.radii.clone() };
            let ball = TargetBall::default_for(&model.domain);
            let query = vec![0.75 * side; model.dim()];
            match classify_recurrence(model, &est.policy, &ball, &query, &radii, DEFAULT_EPS) {
                Ok(r) => {
                    let status = match r.verdict {
                        Verdict::Recurrent => Status::Pass,
                        Verdict::Transient => Status::Fail,
                        Verdict::Inconclusive => Status::Inconclusive,
                    };
                    rec.push(
                        "recurrence",
                        status,
                        format!("{:?} under the extracted policy; {}", r.verdict, r.note),
                        &[("limit_estimate", r.limit_estimate), ("last_increment", r.last_increment)],
                    );
                }
                Err(e) => rec.error("recurrence", &e),
            }
            let policy = ControlPolicy::stationary(est.policy);
            let spec = MartingaleTestSpec::new(model, default_catalog(model), s.checkpoints.clone(), x0, s.martingale_dt);
            match spec.and_then(|spec| martingale_residual(model, &policy, &spec, s.martingale_paths, s.seed)) {
                Ok(m) => rec.push(
                    "martingale",
                    if m.pass { Status::Pass } else { Status::Fail },
                    format!("max z = {:.3}", m.max_z),
                    &[("max_z", m.max_z)],
                ),
                Err(e) => rec.error("martingale", &e),
            }
        }
        Err(e) => {
            rec.error("ergodic", &e);
            rec.push("recurrence", Status::Inconclusive, "skipped: no extracted policy".into(), &[]);
            rec.push("martingale", Status::Inconclusive, "skipped: no extracted policy".into(), &[]);
        }
    }
    (rec.checks, rho)
}

/// Runs every model through the audits, the discounted solver, the
/// representation check, the ergodic ladder, the recurrence probe and the
/// martingale test. Any failed check fails the suite.
pub fn end_to_end_suite(models: &[(String, ModelSpec)], settings: &SuiteSettings) -> SuiteReport {
    let mut checks = Vec::new();
    let mut rho = BTreeMap::new();
    for (name, model) in models {
        let (c, r) = run_model(name, model, settings);
        checks.extend(c);
        if let Some(r) = r {
            rho.insert(name.clone(), r);
        }
    }
    let verdict = if checks.iter().any(|c| c.status == Status::Fail) {
        Status::Fail
    } else {
        Status::Pass
    };
    SuiteReport { verdict, rho, checks }
}
