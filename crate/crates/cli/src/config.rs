//! Run configuration: a flat `key = value` file with section headers.

use std::fmt;
use std::path::{Path, PathBuf};

use orthant_control::discounted::{SolverOptions, ThetaStepRule};
use orthant_control::domain::{
    canonical_1d, canonical_2d, ActionSpace, CoefficientField, Cost, Diffusion, Drift, ModelSpec, OrthantDomain,
    Reflection,
};
use orthant_control::verify::SuiteSettings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveDiscounted,
    SolveErgodic,
    ProbeRecurrence,
    Verify,
    Suite,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveDiscounted => "solve-discounted",
            Command::SolveErgodic => "solve-ergodic",
            Command::ProbeRecurrence => "probe-recurrence",
            Command::Verify => "verify",
            Command::Suite => "suite",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, source: std::io::Error },
    Parse(String),
    Range { key: String, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            ConfigError::Parse(msg) => write!(f, "parse error: {msg}"),
            ConfigError::Range { key, reason } => write!(f, "{key}: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub command: Option<Command>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `canonical_1d`, `canonical_2d` or `custom`.
    pub catalog: String,
    pub dim: Option<usize>,
    pub side: Option<f64>,
    pub spacing: Option<f64>,
    pub action_labels: Option<Vec<String>>,
    /// Row-major `n_actions × d`.
    pub drifts: Option<Vec<f64>>,
    /// Row-major `n_actions × d`; makes the drift affine, `drifts + gains ∘ x`.
    pub drift_gains: Option<Vec<f64>>,
    /// Row-major `d × d`.
    pub sigma: Option<Vec<f64>>,
    /// `normal` or `oblique`.
    pub reflection: Option<String>,
    /// Row-major `d × d`; row `i` is γ on face `{x_i = 0}`.
    pub gamma: Option<Vec<f64>>,
    /// `constant`, `per_action`, `ramp` or `ramp_plus_action`.
    pub cost: Option<String>,
    pub cost_value: Option<f64>,
    pub cost_values: Option<Vec<f64>>,
    pub cost_slope: Option<f64>,
    pub cost_cap: Option<f64>,
    pub theta: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub ellipticity: Option<f64>,
    pub reflection_margin: Option<f64>,
    pub reference: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            catalog: "canonical_1d".into(),
            dim: None,
            side: None,
            spacing: None,
            action_labels: None,
            drifts: None,
            drift_gains: None,
            sigma: None,
            reflection: None,
            gamma: None,
            cost: None,
            cost_value: None,
            cost_values: None,
            cost_slope: None,
            cost_cap: None,
            theta: 1.0,
            alpha: 1.0,
            kappa: 0.05,
            ellipticity: None,
            reflection_margin: None,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    /// `auto` or `fixed`.
    pub theta_step: String,
    pub dtheta: f64,
    pub value_budget: usize,
    pub alphas: Vec<f64>,
    /// Empty means `{L/2, 3L/4}`.
    pub ks: Vec<f64>,
    /// Paths for the representation check after `solve-discounted`; 0 skips it.
    pub representation_paths: usize,
    pub representation_dt: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            theta_step: "auto".into(),
            dtheta: 1e-3,
            value_budget: 4_000_000,
            alphas: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            ks: Vec::new(),
            representation_paths: 0,
            representation_dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub action: usize,
    pub start: Option<Vec<f64>>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_paths: 100,
            horizon: 1.0,
            dt: 1e-2,
            action: 0,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrenceSection {
    /// Constant action to audit; absent means the policy extracted at θ.
    pub action: Option<usize>,
    /// Empty means `{1.5 L, 2 L, 3 L}`.
    pub radii: Vec<f64>,
    pub ball_center: Option<Vec<f64>>,
    pub ball_radius: Option<f64>,
    /// Absent means `(3L/4, .., 3L/4)`.
    pub query: Option<Vec<f64>>,
    pub eps: f64,
    /// Paths for the Monte Carlo hitting estimate; 0 skips it.
    pub mc_paths: usize,
    pub t_cap: f64,
    pub dt: f64,
}

impl Default for RecurrenceSection {
    fn default() -> Self {
        Self {
            action: None,
            radii: Vec::new(),
            ball_center: None,
            ball_radius: None,
            query: None,
            eps: 0.01,
            mc_paths: 0,
            t_cap: 50.0,
            dt: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub n_paths: usize,
    pub dt: f64,
    pub checkpoints: Vec<f64>,
    pub start: Option<Vec<f64>>,
    pub action: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            dt: 1e-3,
            checkpoints: vec![0.5, 1.0],
            start: None,
            action: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    /// Any of `canonical_1d`, `canonical_2d`, `configured` (the `[model]` section).
    pub models: Vec<String>,
    pub spacing_1d: f64,
    pub spacing_2d: f64,
    pub alphas: Vec<f64>,
    pub ks: Vec<f64>,
    pub radii: Vec<f64>,
    pub representation_paths: usize,
    pub representation_dt: f64,
    pub martingale_paths: usize,
    pub martingale_dt: f64,
    pub checkpoints: Vec<f64>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let s = SuiteSettings::default();
        Self {
            models: vec!["canonical_1d".into(), "canonical_2d".into()],
            spacing_1d: 0.125,
            spacing_2d: 0.25,
            alphas: s.alphas,
            ks: s.ks,
            radii: s.radii,
            representation_paths: s.representation_paths,
            representation_dt: s.representation_dt,
            martingale_paths: s.martingale_paths,
            martingale_dt: s.martingale_dt,
            checkpoints: s.checkpoints,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub numerics: NumericsSection,
    pub simulate: SimulateSection,
    pub recurrence: RecurrenceSection,
    pub verify: VerifySection,
    pub suite: SuiteSection,
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(range(key, format!("{v} must be positive")))
    }
}

fn nonempty_positive(key: &str, v: &[f64]) -> Result<(), ConfigError> {
    v.iter().try_for_each(|x| positive(key, *x))
}

impl RunConfig {
    /// Checks every numeric range and builds the model once, so that bad
    /// input fails before any computation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.theta > 0.0 && m.theta <= 1.0) {
            return Err(range("model.theta", format!("{} is not in (0, 1]", m.theta)));
        }
        positive("model.alpha", m.alpha)?;
        positive("model.kappa", m.kappa)?;
        if m.kappa >= m.theta {
            return Err(range("model.kappa", format!("kappa < theta violated ({} vs {})", m.kappa, m.theta)));
        }
        let n = &self.numerics;
        if !matches!(n.theta_step.as_str(), "auto" | "fixed") {
            return Err(range("numerics.theta_step", "must be `auto` or `fixed`"));
        }
        positive("numerics.dtheta", n.dtheta)?;
        if n.value_budget < 3 {
            return Err(range("numerics.value_budget", "must be at least 3"));
        }
        if n.alphas.is_empty() {
            return Err(range("numerics.alphas", "must be nonempty"));
        }
        nonempty_positive("numerics.alphas", &n.alphas)?;
        if n.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(range("numerics.alphas", "must be decreasing"));
        }
        nonempty_positive("numerics.ks", &n.ks)?;
        if n.ks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(range("numerics.ks", "must be increasing"));
        }
        positive("numerics.representation_dt", n.representation_dt)?;
        let s = &self.simulate;
        if s.n_paths == 0 {
            return Err(range("simulate.n_paths", "must be positive"));
        }
        positive("simulate.horizon", s.horizon)?;
        positive("simulate.dt", s.dt)?;
        let r = &self.recurrence;
        if !(r.eps > 0.0 && r.eps < 0.1) {
            return Err(range("recurrence.eps", "must lie in (0, 0.1)"));
        }
        nonempty_positive("recurrence.radii", &r.radii)?;
        positive("recurrence.t_cap", r.t_cap)?;
        positive("recurrence.dt", r.dt)?;
        if let Some(b) = r.ball_radius {
            positive("recurrence.ball_radius", b)?;
        }
        let v = &self.verify;
        if v.n_paths < 3 {
            return Err(range("verify.n_paths", "must be at least 3"));
        }
        positive("verify.dt", v.dt)?;
        let su = &self.suite;
        for name in &su.models {
            if !matches!(name.as_str(), "canonical_1d" | "canonical_2d" | "configured") {
                return Err(range("suite.models", format!("unknown model `{name}`")));
            }
        }
        positive("suite.spacing_1d", su.spacing_1d)?;
        positive("suite.spacing_2d", su.spacing_2d)?;
        let model = self.build_model()?;
        let nact = model.n_actions();
        if s.action >= nact {
            return Err(range("simulate.action", format!("{} out of range for {nact} actions", s.action)));
        }
        if v.action >= nact {
            return Err(range("verify.action", format!("{} out of range for {nact} actions", v.action)));
        }
        if let Some(a) = r.action {
            if a >= nact {
                return Err(range("recurrence.action", format!("{a} out of range for {nact} actions")));
            }
        }
        let d = model.dim();
        for (key, p) in [
            ("simulate.start", &s.start),
            ("verify.start", &v.start),
            ("recurrence.query", &r.query),
            ("recurrence.ball_center", &r.ball_center),
        ] {
            if let Some(p) = p {
                if p.len() != d || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(range(key, format!("must be {d} nonnegative coordinates")));
                }
            }
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        let step = match self.numerics.theta_step.as_str() {
            "fixed" => ThetaStepRule::Fixed {
                dtheta: self.numerics.dtheta,
            },
            _ => ThetaStepRule::Auto {
                max_dtheta: self.numerics.dtheta,
            },
        };
        SolverOptions {
            step,
            value_budget: self.numerics.value_budget,
        }
    }

    pub fn suite_settings(&self) -> SuiteSettings {
        let s = &self.suite;
        SuiteSettings {
            solver: self.solver_options(),
            alphas: s.alphas.clone(),
            ks: s.ks.clone(),
            representation_paths: s.representation_paths,
            representation_dt: s.representation_dt,
            martingale_paths: s.martingale_paths,
            martingale_dt: s.martingale_dt,
            checkpoints: s.checkpoints.clone(),
            radii: s.radii.clone(),
            ellipticity_samples: 64,
            seed: self.run.seed,
        }
    }

    /// Builds the `[model]` section: a catalog base with any listed key
    /// overriding it.
    pub fn build_model(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let wrap = |key: &'static str| move |e: orthant_control::Error| range(key, e.to_string());
        let (dim, side, spacing, base) = match m.catalog.as_str() {
            "canonical_1d" | "canonical_2d" => {
                let two = m.catalog == "canonical_2d";
                let h = m.spacing.unwrap_or(if two { 0.25 } else { 0.125 });
                positive("model.spacing", h)?;
                let base = if two { canonical_2d(h, m.alpha) } else { canonical_1d(h, m.alpha) }.map_err(wrap("model"))?;
                if m.dim.is_some_and(|d| d != base.dim()) {
                    return Err(range("model.dim", "fixed by the catalog model"));
                }
                (base.dim(), m.side.unwrap_or(base.domain.side()), h, Some(base))
            }
            "custom" => {
                let dim = m.dim.ok_or_else(|| range("model.dim", "required for a custom model"))?;
                let side = m.side.ok_or_else(|| range("model.side", "required for a custom model"))?;
                let h = m.spacing.ok_or_else(|| range("model.spacing", "required for a custom model"))?;
                (dim, side, h, None)
            }
            other => return Err(range("model.catalog", format!("unknown catalog model `{other}`"))),
        };
        if !(1..=3).contains(&dim) {
            return Err(range("model.dim", "must be 1, 2 or 3"));
        }
        positive("model.side", side)?;
        let domain = OrthantDomain::new(dim, side, spacing).map_err(wrap("model.spacing"))?;
        let rows = |key: &str, v: &[f64], width: usize| -> Result<Vec<Vec<f64>>, ConfigError> {
            if v.is_empty() || v.len() % width != 0 {
                return Err(range(key, format!("length {} is not a multiple of {width}", v.len())));
            }
            Ok(v.chunks(width).map(|c| c.to_vec()).collect())
        };
        let drift = match (&m.drifts, &m.drift_gains, &base) {
            (Some(o), None, _) => Drift::Constant {
                vectors: rows("model.drifts", o, dim)?,
            },
            (Some(o), Some(g), _) => Drift::Linear {
                offsets: rows("model.drifts", o, dim)?,
                gains: rows("model.drift_gains", g, dim)?,
            },
            (None, Some(_), _) => return Err(range("model.drift_gains", "needs model.drifts")),
            (None, None, Some(b)) => b.coeffs.drift.clone(),
            (None, None, None) => return Err(range("model.drifts", "required for a custom model")),
        };
        let n_actions = match &drift {
            Drift::Constant { vectors } => vectors.len(),
            Drift::Linear { offsets, .. } => offsets.len(),
        };
        let diffusion = match &m.sigma {
            Some(s) => {
                if s.len() != dim * dim {
                    return Err(range("model.sigma", format!("need {} entries", dim * dim)));
                }
                Diffusion::matrix(rows("model.sigma", s, dim)?).map_err(wrap("model.sigma"))?
            }
            None => base.as_ref().map(|b| b.coeffs.diffusion.clone()).unwrap_or_else(|| Diffusion::identity(dim)),
        };
        let reflection = match m.reflection.as_deref() {
            Some("normal") => Reflection::Normal,
            Some("oblique") => {
                let g = m.gamma.as_ref().ok_or_else(|| range("model.gamma", "required for oblique reflection"))?;
                if g.len() != dim * dim {
                    return Err(range("model.gamma", format!("need {} entries", dim * dim)));
                }
                Reflection::Oblique {
                    directions: rows("model.gamma", g, dim)?,
                }
            }
            Some(other) => return Err(range("model.reflection", format!("unknown reflection `{other}`"))),
            None => base.as_ref().map(|b| b.coeffs.reflection.clone()).unwrap_or(Reflection::Normal),
        };
        let need = |key: &'static str, v: Option<f64>| v.ok_or_else(|| range(key, "required by the chosen cost"));
        let cost = match m.cost.as_deref() {
            Some("constant") => Cost::Constant {
                value: need("model.cost_value", m.cost_value)?,
            },
            Some("per_action") => Cost::PerAction {
                values: m.cost_values.clone().ok_or_else(|| range("model.cost_values", "required by the chosen cost"))?,
            },
            Some("ramp") => Cost::Ramp {
                slope: need("model.cost_slope", m.cost_slope)?,
                cap: need("model.cost_cap", m.cost_cap)?,
            },
            Some("ramp_plus_action") => Cost::RampPlusAction {
                slope: need("model.cost_slope", m.cost_slope)?,
                cap: need("model.cost_cap", m.cost_cap)?,
                extra: m.cost_values.clone().ok_or_else(|| range("model.cost_values", "required by the chosen cost"))?,
            },
            Some(other) => return Err(range("model.cost", format!("unknown cost `{other}`"))),
            None => match &base {
                Some(b) => b.coeffs.cost.clone(),
                None => return Err(range("model.cost", "required for a custom model")),
            },
        };
        let ellipticity = m
            .ellipticity
            .or(base.as_ref().map(|b| b.coeffs.ellipticity))
            .unwrap_or(1.0);
        let reflection_margin = m
            .reflection_margin
            .or(base.as_ref().map(|b| b.coeffs.reflection_margin))
            .unwrap_or(1.0);
        let actions = match &m.action_labels {
            Some(l) => ActionSpace::new(l.clone()).map_err(wrap("model.action_labels"))?,
            None => match &base {
                Some(b) if b.n_actions() == n_actions => b.actions.clone(),
                _ => ActionSpace::numbered(n_actions).map_err(wrap("model.drifts"))?,
            },
        };
        let coeffs = CoefficientField {
            drift,
            diffusion,
            reflection,
            cost,
            cutoffs: Vec::new(),
            ellipticity,
            reflection_margin,
        };
        ModelSpec::new(
            domain,
            actions,
            coeffs,
            m.theta,
            m.alpha,
            m.kappa,
            self.run.seed,
            m.reference.as_deref(),
        )
        .map_err(|e| {
            let key = match &e {
                orthant_control::Error::Validation { what, .. } => match what.as_str() {
                    "kappa" => "model.kappa",
                    "theta" => "model.theta",
                    "alpha" => "model.alpha",
                    "reference point" => "model.reference",
                    "drift" => "model.drifts",
                    "cost" => "model.cost",
                    "reflection" => "model.gamma",
                    _ => "model",
                },
                _ => "model",
            };
            range(key, e.to_string())
        })
    }
}
