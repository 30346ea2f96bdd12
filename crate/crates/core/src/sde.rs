//! Euler–Maruyama simulation of the controlled reflected diffusion with an
//! oblique Skorokhod projection at every step.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{check_in_orthant, check_weights, ModelSpec, Reflection, RelaxedControl};
use crate::policy::Policy;
use crate::rng::{split_seed, stream};
use crate::{Error, Result};

/// Iteration cap of the per-face projection loop.
pub const SKOROKHOD_MAX_ITER: usize = 64;

type FeedbackFn = dyn Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync;

/// How the control is chosen along a path.
#[derive(Clone)]
pub enum ControlPolicy {
    Constant(RelaxedControl),
    /// Nearest-node lookup in a tabulated policy.
    Stationary(Arc<Policy>),
    /// Time-dependent Markov control: `policies[j]` is used on
    /// `[switch_times[j], switch_times[j + 1])`.
    Markov {
        switch_times: Vec<f64>,
        policies: Vec<Arc<Policy>>,
    },
    /// Deterministic rule `(t, X_t, ξ_t) ↦ weights`.
    Feedback(Arc<FeedbackFn>),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::Constant(w) => f.debug_tuple("Constant").field(w).finish(),
            ControlPolicy::Stationary(p) => write!(f, "Stationary(theta={})", p.theta),
            ControlPolicy::Markov { switch_times, .. } => {
                write!(f, "Markov({} pieces)", switch_times.len())
            }
            ControlPolicy::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl ControlPolicy {
    pub fn dirac(n_actions: usize, action: usize) -> Self {
        ControlPolicy::Constant(RelaxedControl::dirac(n_actions, action))
    }

    pub fn stationary(policy: Policy) -> Self {
        ControlPolicy::Stationary(Arc::new(policy))
    }

    pub fn markov(switch_times: Vec<f64>, policies: Vec<Policy>) -> Result<Self> {
        if switch_times.is_empty() || switch_times.len() != policies.len() {
            return Err(Error::validation("markov policy", "need one switch time per policy"));
        }
        if switch_times[0] != 0.0 || switch_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "markov policy",
                "switch times must start at 0 and increase",
            ));
        }
        Ok(ControlPolicy::Markov {
            switch_times,
            policies: policies.into_iter().map(Arc::new).collect(),
        })
    }

    /// Writes the weights applied at `(t, x, xi)` into `out`.
    pub fn control_into(&self, t: f64, x: &[f64], xi: f64, out: &mut [f64]) -> Result<()> {
        match self {
            ControlPolicy::Constant(w) => out.copy_from_slice(w.weights()),
            ControlPolicy::Stationary(p) => p.weights_at(x, out),
            ControlPolicy::Markov {
                switch_times,
                policies,
            } => {
                let j = switch_times.partition_point(|s| *s <= t).saturating_sub(1);
                policies[j].weights_at(x, out);
            }
            ControlPolicy::Feedback(f) => {
                let w = f(t, x, xi);
                if w.len() != out.len() {
                    return Err(Error::Simulation(format!(
                        "feedback returned {} weights for {} actions",
                        w.len(),
                        out.len()
                    )));
                }
                check_weights(&w)?;
                out.copy_from_slice(&w);
            }
        }
        Ok(())
    }

    fn check_actions(&self, n: usize) -> Result<()> {
        let bad = match self {
            ControlPolicy::Constant(w) => w.weights().len() != n,
            ControlPolicy::Stationary(p) => p.n_actions != n,
            ControlPolicy::Markov { policies, .. } => policies.iter().any(|p| p.n_actions != n),
            ControlPolicy::Feedback(_) => false,
        };
        if bad {
            return Err(Error::validation("policy", format!("does not match {n} actions")));
        }
        Ok(())
    }
}

/// Projects `y` onto the closed orthant along the oblique directions,
/// face by face (most violated first). Returns the added local time.
///
/// `foot` and `gamma` are scratch buffers of length d.
fn project(
    y: &mut [f64],
    reflection: &Reflection,
    foot: &mut [f64],
    gamma: &mut [f64],
) -> std::result::Result<f64, ()> {
    let mut dxi = 0.0;
    for _ in 0..SKOROKHOD_MAX_ITER {
        let mut face = usize::MAX;
        let mut worst = 0.0;
        for (i, &v) in y.iter().enumerate() {
            if v < worst {
                worst = v;
                face = i;
            }
        }
        if face == usize::MAX {
            return Ok(dxi);
        }
        foot.copy_from_slice(y);
        foot[face] = 0.0;
        reflection.direction_into(face, foot, gamma);
        if !(gamma[face] > 0.0) {
            return Err(());
        }
        let inc = -y[face] / gamma[face];
        for (yj, gj) in y.iter_mut().zip(gamma.iter()) {
            *yj += gj * inc;
        }
        y[face] = 0.0;
        dxi += inc;
    }
    if y.iter().all(|v| *v >= 0.0) {
        Ok(dxi)
    } else {
        Err(())
    }
}

/// One reflected step: `y = x + displacement + γ Δξ` with the minimal push
/// keeping `y` in the closed orthant.
pub fn skorokhod_step(x: &[f64], displacement: &[f64], reflection: &Reflection) -> Result<(Vec<f64>, f64)> {
    check_in_orthant(x)?;
    if displacement.len() != x.len() {
        return Err(Error::validation("displacement", "length differs from the point"));
    }
    let d = x.len();
    let mut y: Vec<f64> = x.iter().zip(displacement).map(|(a, b)| a + b).collect();
    let mut foot = vec![0.0; d];
    let mut gamma = vec![0.0; d];
    match project(&mut y, reflection, &mut foot, &mut gamma) {
        Ok(dxi) => Ok((y, dxi)),
        Err(()) => Err(Error::Skorokhod {
            point: x.to_vec(),
            displacement: displacement.to_vec(),
        }),
    }
}

/// Everything known about one Euler step, handed to path visitors.
#[derive(Debug)]
pub struct Transition<'a> {
    pub step: usize,
    /// Time at the start of the step.
    pub t: f64,
    pub dt: f64,
    /// State before the step.
    pub x: &'a [f64],
    /// Cumulative local time before the step.
    pub xi: f64,
    pub weights: &'a [f64],
    /// Brownian increment `√dt · Z`.
    pub dw: &'a [f64],
    /// Unconstrained Euler point `x + displacement`.
    pub pre: &'a [f64],
    /// State after projection.
    pub y: &'a [f64],
    pub dxi: f64,
    /// The step was clamped at an outer face `{x_j = L}`.
    pub outer: bool,
}

/// Runs one path of `steps` Euler steps from `start`, calling `visit` after
/// every step. The visitor returns `false` to stop early.
///
/// Returns the number of steps taken.
pub fn drive_path<F>(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    mut visit: F,
) -> Result<usize>
where
    F: FnMut(&Transition<'_>) -> bool,
{
    let d = model.dim();
    let n = model.n_actions();
    let coeffs = &model.coeffs;
    let side = model.domain.side();
    let sqdt = dt.sqrt();
    let mut rng = stream(seed);
    let mut x = start.to_vec();
    let mut y = vec![0.0; d];
    let mut pre = vec![0.0; d];
    let mut w = vec![0.0; n];
    let mut b = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut foot = vec![0.0; d];
    let mut gamma = vec![0.0; d];
    let mut xi = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        policy.control_into(t, &x, xi, &mut w)?;
        coeffs.drift_relaxed_into(&x, &w, &mut b, &mut scratch);
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        coeffs.diffusion.apply_into(&z, &mut dw);
        for j in 0..d {
            dw[j] *= sqdt;
            pre[j] = x[j] + b[j] * dt + dw[j];
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation(format!("non-finite state at step {k} from {x:?}")));
        }
        y.copy_from_slice(&pre);
        let dxi = project(&mut y, &coeffs.reflection, &mut foot, &mut gamma).map_err(|()| {
            let disp: Vec<f64> = pre.iter().zip(&x).map(|(p, q)| p - q).collect();
            Error::Skorokhod {
                point: x.clone(),
                displacement: disp,
            }
        })?;
        let mut outer = false;
        for v in y.iter_mut() {
            if *v > side {
                *v = side;
                outer = true;
            }
        }
        let tr = Transition {
            step: k,
            t,
            dt,
            x: &x,
            xi,
            weights: &w,
            dw: &dw,
            pre: &pre,
            y: &y,
            dxi,
            outer,
        };
        let go_on = visit(&tr);
        xi += dxi;
        std::mem::swap(&mut x, &mut y);
        if !go_on {
            return Ok(k + 1);
        }
    }
    Ok(steps)
}

/// Number of steps and the effective step for horizon `horizon` at nominal `dt`.
pub fn step_count(horizon: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation("dt", format!("{dt} must be positive")));
    }
    if !(horizon.is_finite() && horizon >= dt * (1.0 - 1e-12)) {
        return Err(Error::validation("horizon", format!("T = {horizon} is below dt = {dt}")));
    }
    let steps = ((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((steps, horizon / steps as f64))
}

pub(crate) fn check_start(model: &ModelSpec, start: &[f64]) -> Result<()> {
    if start.len() != model.dim() {
        return Err(Error::validation("start point", format!("length {} in dimension {}", start.len(), model.dim())));
    }
    if !model.domain.contains(start) {
        return Err(Error::OutsideDomain { point: start.to_vec() });
    }
    Ok(())
}

/// A fully recorded path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBundle {
    pub dt: f64,
    pub horizon: f64,
    pub dim: usize,
    pub n_actions: usize,
    pub seed: u64,
    /// `(steps + 1) · d` states, row per time point.
    pub states: Vec<f64>,
    /// Cumulative local time at each time point, `xi[0] = 0`.
    pub xi: Vec<f64>,
    /// `steps · d` Brownian increments.
    pub dw: Vec<f64>,
    /// `steps · n_actions` applied weights.
    pub controls: Vec<f64>,
    pub touched_outer: bool,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.n_actions..(k + 1) * self.n_actions]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.steps())
    }
}

pub fn simulate_path(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<PathBundle> {
    check_start(model, start)?;
    policy.check_actions(model.n_actions())?;
    let (steps, dt) = step_count(horizon, dt)?;
    let d = model.dim();
    let n = model.n_actions();
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(start);
    let mut xi = Vec::with_capacity(steps + 1);
    xi.push(0.0);
    let mut dw = Vec::with_capacity(steps * d);
    let mut controls = Vec::with_capacity(steps * n);
    let mut touched_outer = false;
    drive_path(model, policy, start, dt, steps, seed, |tr| {
        states.extend_from_slice(tr.y);
        xi.push(tr.xi + tr.dxi);
        dw.extend_from_slice(tr.dw);
        controls.extend_from_slice(tr.weights);
        touched_outer |= tr.outer;
        true
    })?;
    Ok(PathBundle {
        dt,
        horizon,
        dim: d,
        n_actions: n,
        seed,
        states,
        xi,
        dw,
        controls,
        touched_outer,
    })
}

/// Runs `n` independent paths; path `i` uses `split_seed(base_seed, i)`.
/// The first failing path (lowest index) aborts the batch.
pub fn par_paths<T, F>(n: usize, base_seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync + Send,
{
    if n == 0 {
        return Err(Error::validation("n_paths", "must be at least 1"));
    }
    let out: Vec<Result<T>> = (0..n)
        .into_par_iter()
        .map(|i| f(i, split_seed(base_seed, i as u64)))
        .collect();
    out.into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::BatchPath {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn simulate_batch(
    model: &ModelSpec,
    policy: &ControlPolicy,
    start: &[f64],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<Vec<PathBundle>> {
    check_start(model, start)?;
    policy.check_actions(model.n_actions())?;
    step_count(horizon, dt)?;
    par_paths(n_paths, base_seed, |_, seed| simulate_path(model, policy, start, horizon, dt, seed))
}

pub(crate) fn validate_policy(model: &ModelSpec, policy: &ControlPolicy) -> Result<()> {
    policy.check_actions(model.n_actions())
}

/// CSV dump: `path_id,step,t,x_1..x_d,xi,w_1..w_n`. The weight columns hold
/// the control applied on the step leaving that row; the last row repeats
/// the final control.
pub fn write_paths_csv<W: Write>(paths: &[PathBundle], mut out: W) -> std::io::Result<()> {
    let Some(first) = paths.first() else {
        return Ok(());
    };
    let mut header = vec!["path_id".to_string(), "step".into(), "t".into()];
    header.extend((1..=first.dim).map(|j| format!("x_{j}")));
    header.push("xi".into());
    header.extend((1..=first.n_actions).map(|j| format!("w_{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (id, p) in paths.iter().enumerate() {
        let steps = p.steps();
        for k in 0..=steps {
            write!(out, "{id},{k},{:.16e}", k as f64 * p.dt)?;
            for v in p.state(k) {
                write!(out, ",{v:.16e}")?;
            }
            write!(out, ",{:.16e}", p.xi[k])?;
            let c = if steps == 0 { &[][..] } else { p.control(k.min(steps - 1)) };
            for v in c {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionSpace, CoefficientField, Cost, Diffusion, Drift, OrthantDomain};
    use proptest::prelude::*;

    pub(crate) fn model_1d(drift: f64, sigma: f64) -> ModelSpec {
        let coeffs = CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![drift]],
            },
            diffusion: Diffusion::diagonal(&[sigma]).unwrap(),
            reflection: Reflection::Normal,
            cost: Cost::Constant { value: 0.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        };
        ModelSpec::new(
            OrthantDomain::new(1, 8.0, 0.125).unwrap(),
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

    #[test]
    fn one_dimensional_map() {
        let (y, dxi) = skorokhod_step(&[0.5], &[-0.8], &Reflection::Normal).unwrap();
        assert_eq!(y, vec![0.0]);
        assert!((dxi - 0.3).abs() < 1e-15);
        let (y, dxi) = skorokhod_step(&[1.0], &[0.2], &Reflection::Normal).unwrap();
        assert_eq!((y, dxi), (vec![1.2], 0.0));
    }

    /// Penalized oracle: push the point back along γ in increments of at
    /// most 1e-5 until it re-enters the orthant; the total push is the local time.
    fn penalized(x: &[f64], disp: &[f64], gamma: &[f64]) -> (Vec<f64>, f64) {
        let mut y: Vec<f64> = x.iter().zip(disp).map(|(a, b)| a + b).collect();
        let ds = 1e-5;
        let mut xi = 0.0;
        while y[0] < 0.0 {
            let push = (-y[0]).min(ds * gamma[0]) / gamma[0];
            for j in 0..y.len() {
                y[j] += gamma[j] * push;
            }
            xi += push;
        }
        (y, xi)
    }

    #[test]
    fn oblique_step_matches_penalized_oracle() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let refl = Reflection::Oblique {
            directions: vec![vec![s, s], vec![0.0, 1.0]],
        };
        let (y, dxi) = skorokhod_step(&[0.1, 1.0], &[-0.3, 0.0], &refl).unwrap();
        let (yo, xio) = penalized(&[0.1, 1.0], &[-0.3, 0.0], &[s, s]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 1.2).abs() < 1e-12);
        assert!((dxi - 0.2 * 2f64.sqrt()).abs() < 1e-12);
        assert!((y[1] - yo[1]).abs() < 1e-3 && (dxi - xio).abs() < 1e-3);
    }

    #[test]
    fn tangential_reflection_is_an_error() {
        let refl = Reflection::Oblique {
            directions: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        };
        let err = skorokhod_step(&[0.1, 1.0], &[-0.3, 0.0], &refl).unwrap_err();
        assert!(matches!(err, Error::Skorokhod { .. }));
    }

    #[test]
    fn corner_projection_uses_both_faces() {
        let refl = Reflection::Oblique {
            directions: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        };
        let (y, dxi) = skorokhod_step(&[0.05, 0.05], &[-0.2, -0.3], &refl).unwrap();
        assert!(y.iter().all(|v| *v >= 0.0));
        assert!(dxi > 0.0);
        assert!(y.iter().any(|v| *v == 0.0));
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let m = model_1d(0.0, 0.0);
        let p = simulate_path(&m, &ControlPolicy::dirac(1, 0), &[1.0], 1.0, 0.01, 3).unwrap();
        assert!(p.states.iter().all(|v| *v == 1.0));
        assert!(p.xi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_drift_into_the_wall() {
        let m = model_1d(-1.0, 0.0);
        let p = simulate_path(&m, &ControlPolicy::dirac(1, 0), &[0.5], 1.0, 0.1, 3).unwrap();
        assert_eq!(p.steps(), 10);
        for k in 5..=10 {
            assert!(p.state(k)[0].abs() < 1e-12);
        }
        assert!((p.state(3)[0] - 0.2).abs() < 1e-12);
        assert!((p.xi[10] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_is_deterministic_and_split() {
        let m = model_1d(0.0, 1.0);
        let pol = ControlPolicy::dirac(1, 0);
        let a = simulate_batch(&m, &pol, &[0.0], 0.5, 0.01, 8, 11).unwrap();
        let b = simulate_batch(&m, &pol, &[0.0], 0.5, 0.01, 8, 11).unwrap();
        assert_eq!(a, b);
        let one = simulate_batch(&m, &pol, &[0.0], 0.5, 0.01, 1, 11).unwrap();
        let direct = simulate_path(&m, &pol, &[0.0], 0.5, 0.01, split_seed(11, 0)).unwrap();
        assert_eq!(one[0], direct);
        assert_ne!(a[0].states, a[1].states);
    }

    #[test]
    fn frozen_batch_paths_are_identical() {
        let m = model_1d(0.0, 0.0);
        let pol = ControlPolicy::dirac(1, 0);
        let batch = simulate_batch(&m, &pol, &[2.0], 0.1, 0.01, 10_000, 5).unwrap();
        assert!(batch.iter().all(|p| p.states == batch[0].states));
    }

    #[test]
    fn batch_errors_carry_the_path_index() {
        let m = model_1d(0.0, 1.0);
        let pol = ControlPolicy::Feedback(Arc::new(|t, _x, _xi| if t > 0.05 { vec![2.0] } else { vec![1.0] }));
        let err = simulate_batch(&m, &pol, &[0.0], 0.1, 0.01, 4, 1).unwrap_err();
        assert!(matches!(err, Error::BatchPath { index: 0, .. }));
    }

    #[test]
    fn rbm_second_moment() {
        // E|W_1|^2 = 1 for the reflected Brownian motion started at 0.
        let m = model_1d(0.0, 1.0);
        let pol = ControlPolicy::dirac(1, 0);
        let n = 10_000;
        let finals = par_paths(n, 99, |_, seed| {
            let mut last = 0.0;
            drive_path(&m, &pol, &[0.0], 1e-4, 10_000, seed, |tr| {
                last = tr.y[0];
                true
            })?;
            Ok(last * last)
        })
        .unwrap();
        let mean = crate::stats::mean(&finals);
        let se = crate::stats::std_error(&finals);
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn csv_dump_has_one_block_per_path() {
        let m = model_1d(0.0, 1.0);
        let pol = ControlPolicy::dirac(1, 0);
        let batch = simulate_batch(&m, &pol, &[0.0], 0.05, 0.01, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&batch, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,step,t,x_1,xi,w_1");
        assert_eq!(lines.len(), 1 + 3 * 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn confinement_and_complementarity(
            drift in -2.0f64..2.0,
            start in 0.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let m = model_1d(drift, 1.0);
            let p = simulate_path(&m, &ControlPolicy::dirac(1, 0), &[start], 2.0, 0.01, seed).unwrap();
            let h_refl = m.domain.spacing() / 2.0;
            for k in 1..=p.steps() {
                prop_assert!(p.state(k)[0] >= 0.0);
                let dxi = p.xi[k] - p.xi[k - 1];
                prop_assert!(dxi >= 0.0);
                if p.state(k)[0] > h_refl {
                    prop_assert_eq!(dxi, 0.0);
                }
            }
        }

        #[test]
        fn larger_drift_dominates_pathwise(
            drift in -2.0f64..1.0,
            bump in 0.01f64..1.0,
            start in 0.0f64..2.0,
            seed in any::<u64>(),
        ) {
            let lo = simulate_path(&model_1d(drift, 1.0), &ControlPolicy::dirac(1, 0), &[start], 1.0, 0.01, seed).unwrap();
            let hi = simulate_path(&model_1d(drift + bump, 1.0), &ControlPolicy::dirac(1, 0), &[start], 1.0, 0.01, seed).unwrap();
            for k in 0..=lo.steps() {
                prop_assert!(hi.state(k)[0] >= lo.state(k)[0] - 1e-12);
            }
        }
    }
}
