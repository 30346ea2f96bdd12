//! Orthant geometry, the finite action set, the coefficient catalog and
//! the assumption audits (ellipticity, reflection angle, cost sign).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for probability vectors.
pub const WEIGHT_TOL: f64 = 1e-12;

/// The truncated orthant `[0, L]^d` with a uniform tensor grid of spacing `h`.
///
/// Nodes are numbered lexicographically with axis 0 varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthantDomain {
    dim: usize,
    side: f64,
    spacing: f64,
    cells: usize,
}

impl OrthantDomain {
    pub fn new(dim: usize, side: f64, spacing: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dimension", "must be at least 1"));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::validation("box side", format!("{side} is not positive")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::validation("grid spacing", format!("{spacing} is not positive")));
        }
        let ratio = side / spacing;
        let cells = ratio.round();
        if (ratio - cells).abs() > 1e-9 * cells.max(1.0) {
            return Err(Error::validation(
                "grid spacing",
                format!("L/h = {ratio} is not an integer"),
            ));
        }
        if cells < 4.0 {
            return Err(Error::validation("grid spacing", format!("L/h = {cells} is below 4")));
        }
        let cells = cells as usize;
        let total = (cells + 1).checked_pow(dim as u32).unwrap_or(usize::MAX);
        if total > 50_000_000 {
            return Err(Error::validation("grid", format!("{total} nodes is too many")));
        }
        Ok(Self {
            dim,
            side,
            spacing: side / cells as f64,
            cells,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of cells along each axis (L/h).
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.cells + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    /// Offset in the flat index when moving one node along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.nodes_per_axis().pow(axis as u32)
    }

    pub fn multi_index(&self, idx: usize, out: &mut [usize]) {
        let n = self.nodes_per_axis();
        let mut rest = idx;
        for slot in out.iter_mut().take(self.dim) {
            *slot = rest % n;
            rest /= n;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let n = self.nodes_per_axis();
        multi.iter().rev().fold(0, |acc, &i| acc * n + i)
    }

    pub fn coords_into(&self, idx: usize, out: &mut [f64]) {
        let n = self.nodes_per_axis();
        let mut rest = idx;
        for slot in out.iter_mut().take(self.dim) {
            *slot = (rest % n) as f64 * self.spacing;
            rest /= n;
        }
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.coords_into(idx, &mut x);
        x
    }

    /// Bit `i` set iff the node lies on the reflecting face `{x_i = 0}`.
    pub fn zero_faces(&self, idx: usize) -> u64 {
        let n = self.nodes_per_axis();
        let mut rest = idx;
        let mut mask = 0;
        for axis in 0..self.dim {
            if rest % n == 0 {
                mask |= 1 << axis;
            }
            rest /= n;
        }
        mask
    }

    /// Bit `i` set iff the node lies on the artificial outer face `{x_i = L}`.
    pub fn outer_faces(&self, idx: usize) -> u64 {
        let n = self.nodes_per_axis();
        let mut rest = idx;
        let mut mask = 0;
        for axis in 0..self.dim {
            if rest % n == self.cells {
                mask |= 1 << axis;
            }
            rest /= n;
        }
        mask
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.zero_faces(idx) == 0 && self.outer_faces(idx) == 0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|&v| v >= 0.0 && v <= self.side)
    }

    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let n = self.nodes_per_axis();
        let mut idx = 0;
        for axis in (0..self.dim).rev() {
            let i = (x[axis] / self.spacing).round().clamp(0.0, self.cells as f64) as usize;
            idx = idx * n + i;
        }
        idx
    }
}

/// Returns an error unless `x` lies in the closed (untruncated) orthant.
pub fn check_in_orthant(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| *v >= 0.0) {
        Ok(())
    } else {
        Err(Error::OutsideDomain { point: x.to_vec() })
    }
}

/// The finite action set `S = {s_1, .., s_n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    labels: Vec<String>,
}

impl ActionSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("action set", "must contain at least one action"));
        }
        Ok(Self { labels })
    }

    /// Actions labelled `s1, s2, ..`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| format!("s{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// A probability vector over the action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedControl(Vec<f64>);

impl RelaxedControl {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        Ok(Self(weights))
    }

    pub fn dirac(n: usize, action: usize) -> Self {
        let mut w = vec![0.0; n];
        w[action] = 1.0;
        Self(w)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

pub fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::validation("relaxed control", "empty weight vector"));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= -WEIGHT_TOL)) {
        return Err(Error::validation("relaxed control", format!("weight {bad} is negative")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::validation(
            "relaxed control",
            format!("weights sum to {total}, not 1"),
        ));
    }
    Ok(())
}

/// Drift catalog `b̄(x, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// `b̄(x, s_i) = vectors[i]`.
    Constant { vectors: Vec<Vec<f64>> },
    /// `b̄_j(x, s_i) = offsets[i][j] + gains[i][j] * x_j`.
    Linear {
        offsets: Vec<Vec<f64>>,
        gains: Vec<Vec<f64>>,
    },
}

impl Drift {
    /// One scalar drift per action in 1-D, or the same vector repeated per action.
    pub fn constant_per_action(vectors: Vec<Vec<f64>>) -> Self {
        Drift::Constant { vectors }
    }

    fn actions(&self) -> usize {
        match self {
            Drift::Constant { vectors } => vectors.len(),
            Drift::Linear { offsets, .. } => offsets.len(),
        }
    }

    fn validate(&self, dim: usize, n: usize) -> Result<()> {
        let rows: Vec<&Vec<f64>> = match self {
            Drift::Constant { vectors } => vectors.iter().collect(),
            Drift::Linear { offsets, gains } => {
                if gains.len() != offsets.len() {
                    return Err(Error::validation("drift", "gains and offsets differ in length"));
                }
                offsets.iter().chain(gains.iter()).collect()
            }
        };
        if self.actions() != n {
            return Err(Error::validation(
                "drift",
                format!("{} action rows for {n} actions", self.actions()),
            ));
        }
        for row in rows {
            if row.len() != dim {
                return Err(Error::validation("drift", format!("row of length {} in dimension {dim}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("drift", "non-finite coefficient"));
            }
        }
        Ok(())
    }

    pub fn eval_into(&self, x: &[f64], action: usize, out: &mut [f64]) {
        match self {
            Drift::Constant { vectors } => out.copy_from_slice(&vectors[action]),
            Drift::Linear { offsets, gains } => {
                for j in 0..out.len() {
                    out[j] = offsets[action][j] + gains[action][j] * x[j];
                }
            }
        }
    }
}

/// Constant diffusion matrix σ (row-major, d×d), with `a = σσᵀ` precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiffusionRepr", into = "DiffusionRepr")]
pub struct Diffusion {
    dim: usize,
    sigma: Vec<f64>,
    a: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DiffusionRepr {
    sigma: Vec<Vec<f64>>,
}

impl TryFrom<DiffusionRepr> for Diffusion {
    type Error = Error;
    fn try_from(r: DiffusionRepr) -> Result<Self> {
        Diffusion::matrix(r.sigma)
    }
}

impl From<Diffusion> for DiffusionRepr {
    fn from(d: Diffusion) -> Self {
        DiffusionRepr {
            sigma: d.sigma.chunks(d.dim).map(|r| r.to_vec()).collect(),
        }
    }
}

impl Diffusion {
    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("diffusion", "sigma must be a square matrix"));
        }
        let sigma: Vec<f64> = rows.into_iter().flatten().collect();
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("diffusion", "non-finite entry"));
        }
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] = (0..dim).map(|k| sigma[i * dim + k] * sigma[j * dim + k]).sum();
            }
        }
        Ok(Self { dim, sigma, a })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let d = diag.len();
        Self::matrix(
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `a = σσᵀ`, row-major.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn a_entry(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.dim + j]
    }

    /// `σ z` written into `out`.
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = (0..d).map(|k| self.sigma[i * d + k] * z[k]).sum();
        }
    }
}

/// Reflection direction γ on each face `{x_i = 0}`, pointing into the orthant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reflection {
    Normal,
    /// `directions[i]` is used on face `{x_i = 0}`.
    Oblique { directions: Vec<Vec<f64>> },
}

impl Reflection {
    fn validate(&self, dim: usize) -> Result<()> {
        if let Reflection::Oblique { directions } = self {
            if directions.len() != dim || directions.iter().any(|g| g.len() != dim) {
                return Err(Error::validation(
                    "reflection",
                    format!("need {dim} direction vectors of length {dim}"),
                ));
            }
            if directions.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::validation("reflection", "non-finite component"));
            }
        }
        Ok(())
    }

    /// γ on face `{x_face = 0}` at the foot-point `x` (constant per face in this catalog).
    pub fn direction_into(&self, face: usize, _x: &[f64], out: &mut [f64]) {
        match self {
            Reflection::Normal => {
                out.fill(0.0);
                out[face] = 1.0;
            }
            Reflection::Oblique { directions } => out.copy_from_slice(&directions[face]),
        }
    }

    pub fn direction(&self, face: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.direction_into(face, x, &mut g);
        g
    }
}

/// Running-cost catalog `r̄(x, s)`; `|x|` is the Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cost {
    Constant { value: f64 },
    PerAction { values: Vec<f64> },
    /// `min(slope·|x|, cap)`.
    Ramp { slope: f64, cap: f64 },
    /// `min(slope·|x|, cap) + extra[s]`.
    RampPlusAction { slope: f64, cap: f64, extra: Vec<f64> },
}

impl Cost {
    fn validate(&self, n: usize) -> Result<()> {
        let nonneg = |v: f64, what: &str| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::validation("cost", format!("{what} = {v} must be finite and nonnegative")))
            }
        };
        match self {
            Cost::Constant { value } => nonneg(*value, "value"),
            Cost::PerAction { values } => {
                if values.len() != n {
                    return Err(Error::validation("cost", format!("{} values for {n} actions", values.len())));
                }
                values.iter().try_for_each(|v| nonneg(*v, "per-action value"))
            }
            Cost::Ramp { slope, cap } => {
                nonneg(*slope, "slope")?;
                nonneg(*cap, "cap")
            }
            Cost::RampPlusAction { slope, cap, extra } => {
                nonneg(*slope, "slope")?;
                nonneg(*cap, "cap")?;
                if extra.len() != n {
                    return Err(Error::validation("cost", format!("{} extras for {n} actions", extra.len())));
                }
                extra.iter().try_for_each(|v| nonneg(*v, "per-action extra"))
            }
        }
    }

    pub fn eval(&self, x: &[f64], action: usize) -> f64 {
        match self {
            Cost::Constant { value } => *value,
            Cost::PerAction { values } => values[action],
            Cost::Ramp { slope, cap } => (slope * norm(x)).min(*cap),
            Cost::RampPlusAction { slope, cap, extra } => (slope * norm(x)).min(*cap) + extra[action],
        }
    }

    pub fn depends_on_action(&self) -> bool {
        match self {
            Cost::Constant { .. } | Cost::Ramp { .. } => false,
            Cost::PerAction { values } => values.iter().any(|v| *v != values[0]),
            Cost::RampPlusAction { extra, .. } => extra.iter().any(|v| *v != extra[0]),
        }
    }

    /// Limit of `min_s r̄(x, s)` as `|x| → ∞`, if the cost saturates.
    pub fn far_field_min(&self) -> f64 {
        match self {
            Cost::Constant { value } => *value,
            Cost::PerAction { values } => values.iter().cloned().fold(f64::INFINITY, f64::min),
            Cost::Ramp { slope, cap } => {
                if *slope > 0.0 {
                    *cap
                } else {
                    0.0
                }
            }
            Cost::RampPlusAction { slope, cap, extra } => {
                let base = if *slope > 0.0 { *cap } else { 0.0 };
                base + extra.iter().cloned().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cubic smoothstep cutoff: 1 on `[0, k]`, 0 on `[k + 1, ∞)`.
pub fn cutoff(k: f64, radius: f64) -> f64 {
    let s = (radius - k).clamp(0.0, 1.0);
    1.0 - s * s * (3.0 - 2.0 * s)
}

/// The coefficient set `(b̄, σ, γ, r̄)` together with the audit thresholds δ and η.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub reflection: Reflection,
    pub cost: Cost,
    /// Truncation levels `k`; the cost is multiplied by `χ_k(|x|)` for each.
    #[serde(default)]
    pub cutoffs: Vec<f64>,
    pub ellipticity: f64,
    pub reflection_margin: f64,
}

impl CoefficientField {
    pub fn validate(&self, dim: usize, actions: usize) -> Result<()> {
        if self.diffusion.dim() != dim {
            return Err(Error::validation(
                "diffusion",
                format!("sigma is {0}x{0} in dimension {dim}", self.diffusion.dim()),
            ));
        }
        self.drift.validate(dim, actions)?;
        self.reflection.validate(dim)?;
        self.cost.validate(actions)?;
        if let Some(k) = self.cutoffs.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(Error::validation("cost truncation", format!("k = {k} must be positive")));
        }
        if !(self.ellipticity.is_finite() && self.ellipticity > 0.0) {
            return Err(Error::validation("ellipticity", "delta must be positive"));
        }
        if !(self.reflection_margin.is_finite() && self.reflection_margin > 0.0) {
            return Err(Error::validation("reflection margin", "eta must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.diffusion.dim()
    }

    pub fn drift_into(&self, x: &[f64], action: usize, out: &mut [f64]) {
        self.drift.eval_into(x, action, out);
    }

    pub fn cost(&self, x: &[f64], action: usize) -> f64 {
        let base = self.cost.eval(x, action);
        if self.cutoffs.is_empty() || base == 0.0 {
            return base;
        }
        let r = norm(x);
        self.cutoffs.iter().fold(base, |acc, &k| acc * cutoff(k, r))
    }

    /// `Σ_i w_i b̄(x, s_i)` written into `out`, without validation.
    pub fn drift_relaxed_into(&self, x: &[f64], weights: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        for (s, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.drift_into(x, s, scratch);
            for (o, b) in out.iter_mut().zip(scratch.iter()) {
                *o += w * b;
            }
        }
    }

    /// `Σ_i w_i r̄(x, s_i)`, without validation.
    pub fn cost_weighted(&self, x: &[f64], weights: &[f64]) -> f64 {
        weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(s, w)| w * self.cost(x, s))
            .sum()
    }

    pub fn drift_relaxed(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, v)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        self.drift_relaxed_into(x, v, &mut out, &mut scratch);
        Ok(out)
    }

    pub fn cost_relaxed(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.check_args(x, v)?;
        Ok(self.cost_weighted(x, v).max(0.0))
    }

    fn check_args(&self, x: &[f64], v: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::validation("point", format!("length {} in dimension {}", x.len(), self.dim())));
        }
        check_in_orthant(x)?;
        if v.len() != self.drift.actions() {
            return Err(Error::validation(
                "relaxed control",
                format!("{} weights for {} actions", v.len(), self.drift.actions()),
            ));
        }
        check_weights(v)
    }

    /// Copy with the cost multiplied by the cutoff `χ_k`.
    pub fn truncated(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.cutoffs.push(k);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub min_quadratic_form: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Minimum of `zᵀ a(y) z` over sampled grid points `y` and unit vectors `z`.
///
/// The coordinate axes are always among the probed directions.
pub fn check_ellipticity(
    coeffs: &CoefficientField,
    domain: &OrthantDomain,
    sample_count: usize,
    seed: u64,
) -> EllipticityReport {
    let d = coeffs.dim();
    let a = coeffs.diffusion.a();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quad = |z: &[f64]| -> f64 {
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += z[i] * a[i * d + j] * z[j];
            }
        }
        q
    };
    let mut min = f64::INFINITY;
    let mut z = vec![0.0; d];
    let samples = sample_count.max(1);
    for _ in 0..samples {
        // a is constant in the catalog; the point draw keeps the sampling
        // protocol fixed should state dependence be added.
        let _node = rng.random_range(0..domain.node_count());
        for i in 0..d {
            z.fill(0.0);
            z[i] = 1.0;
            min = min.min(quad(&z));
        }
        loop {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let n = norm(&z);
            if n > 1e-12 {
                z.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        min = min.min(quad(&z));
    }
    let threshold = coeffs.ellipticity;
    EllipticityReport {
        min_quadratic_form: min,
        threshold,
        pass: min >= threshold * (1.0 - 1e-9),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub min_dot: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Node and face attaining the minimum.
    pub worst: Option<(usize, usize)>,
}

/// Minimum over boundary nodes and their faces `{x_i = 0}` of `γ · e_i`.
pub fn check_reflection_angle(coeffs: &CoefficientField, domain: &OrthantDomain) -> ReflectionReport {
    let d = domain.dim();
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut min = f64::INFINITY;
    let mut worst = None;
    for idx in 0..domain.node_count() {
        let faces = domain.zero_faces(idx);
        if faces == 0 {
            continue;
        }
        domain.coords_into(idx, &mut x);
        for face in (0..d).filter(|i| faces & (1 << i) != 0) {
            coeffs.reflection.direction_into(face, &x, &mut g);
            if g[face] < min {
                min = g[face];
                worst = Some((idx, face));
            }
        }
    }
    let threshold = coeffs.reflection_margin;
    ReflectionReport {
        min_dot: min,
        threshold,
        pass: min >= threshold,
        worst,
    }
}

/// A complete, validated model: geometry, actions, coefficients and the
/// parameters θ, α, κ, seed and the normalization node `x₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub domain: OrthantDomain,
    pub actions: ActionSpace,
    pub coeffs: CoefficientField,
    pub theta: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Flat index of the normalization node `x₀`.
    pub reference_node: usize,
    /// `‖r‖∞` over grid nodes and actions.
    pub cost_sup: f64,
    /// `max |b̄_j|` over grid nodes, actions and components.
    pub drift_sup: f64,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: OrthantDomain,
        actions: ActionSpace,
        coeffs: CoefficientField,
        theta: f64,
        alpha: f64,
        kappa: f64,
        seed: u64,
        reference: Option<&[f64]>,
    ) -> Result<Self> {
        if coeffs.dim() != domain.dim() {
            return Err(Error::validation("coefficients", "dimension does not match the domain"));
        }
        coeffs.validate(domain.dim(), actions.len())?;
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::validation("theta", format!("{theta} is not in (0, 1]")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::validation("alpha", format!("{alpha} must be positive")));
        }
        if !(kappa > 0.0 && kappa < theta) {
            return Err(Error::validation("kappa", format!("kappa < theta violated ({kappa} vs {theta})")));
        }
        let reference_node = match reference {
            Some(x) => {
                if !domain.contains(x) {
                    return Err(Error::validation("reference point", format!("{x:?} is outside the box")));
                }
                domain.nearest_node(x)
            }
            None => {
                let mid = vec![domain.side() / 4.0; domain.dim()];
                domain.nearest_node(&mid)
            }
        };
        if !domain.is_interior(reference_node) {
            return Err(Error::validation("reference point", "must be an interior grid node"));
        }
        let (cost_sup, drift_sup) = coefficient_suprema(&coeffs, &domain, actions.len());
        Ok(Self {
            domain,
            actions,
            coeffs,
            theta,
            alpha,
            kappa,
            seed,
            reference_node,
            cost_sup,
            drift_sup,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let x0 = self.domain.coords(self.reference_node);
        Self::new(
            self.domain.clone(),
            self.actions.clone(),
            self.coeffs.clone(),
            self.theta,
            alpha,
            self.kappa,
            self.seed,
            Some(&x0),
        )
    }

    pub fn with_coefficients(&self, coeffs: CoefficientField) -> Result<Self> {
        let x0 = self.domain.coords(self.reference_node);
        Self::new(
            self.domain.clone(),
            self.actions.clone(),
            coeffs,
            self.theta,
            self.alpha,
            self.kappa,
            self.seed,
            Some(&x0),
        )
    }

    pub fn with_domain(&self, domain: OrthantDomain) -> Result<Self> {
        let x0 = self.domain.coords(self.reference_node);
        Self::new(
            domain,
            self.actions.clone(),
            self.coeffs.clone(),
            self.theta,
            self.alpha,
            self.kappa,
            self.seed,
            Some(&x0),
        )
    }
}

/// The 1-D test model: `L = 8`, actions `∓1` as drifts, `σ = 1`, normal
/// reflection, `r(x) = min(|x|, 2)`, `θ = 1`, `κ = 0.05`.
pub fn canonical_1d(spacing: f64, alpha: f64) -> Result<ModelSpec> {
    ModelSpec::new(
        OrthantDomain::new(1, 8.0, spacing)?,
        ActionSpace::new(vec!["down".into(), "up".into()])?,
        CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![-1.0], vec![1.0]],
            },
            diffusion: Diffusion::identity(1),
            reflection: Reflection::Normal,
            cost: Cost::Ramp { slope: 1.0, cap: 2.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        },
        1.0,
        alpha,
        0.05,
        0,
        None,
    )
}

/// The 2-D test model: `L = 6`, actions `∓(1, 1)` as drifts, `σ = I`, normal
/// reflection, `r(x) = min(|x|, 2)`, `θ = 1`, `κ = 0.05`.
pub fn canonical_2d(spacing: f64, alpha: f64) -> Result<ModelSpec> {
    ModelSpec::new(
        OrthantDomain::new(2, 6.0, spacing)?,
        ActionSpace::new(vec!["down".into(), "up".into()])?,
        CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
            },
            diffusion: Diffusion::identity(2),
            reflection: Reflection::Normal,
            cost: Cost::Ramp { slope: 1.0, cap: 2.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        },
        1.0,
        alpha,
        0.05,
        0,
        None,
    )
}

fn coefficient_suprema(coeffs: &CoefficientField, domain: &OrthantDomain, n: usize) -> (f64, f64) {
    let d = domain.dim();
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut r_sup: f64 = 0.0;
    let mut b_sup: f64 = 0.0;
    for idx in 0..domain.node_count() {
        domain.coords_into(idx, &mut x);
        for s in 0..n {
            r_sup = r_sup.max(coeffs.cost(&x, s));
            coeffs.drift_into(&x, s, &mut b);
            b_sup = b.iter().fold(b_sup, |m, v| m.max(v.abs()));
        }
    }
    (r_sup, b_sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_drift_1d() -> CoefficientField {
        CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![1.0], vec![-1.0]],
            },
            diffusion: Diffusion::identity(1),
            reflection: Reflection::Normal,
            cost: Cost::PerAction { values: vec![1.0, 3.0] },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        }
    }

    #[test]
    fn grid_bookkeeping() {
        let dom = OrthantDomain::new(2, 1.0, 0.25).unwrap();
        assert_eq!(dom.nodes_per_axis(), 5);
        assert_eq!(dom.node_count(), 25);
        assert_eq!(dom.coords(7), vec![0.5, 0.25]);
        assert_eq!(dom.zero_faces(0), 0b11);
        assert_eq!(dom.outer_faces(24), 0b11);
        assert_eq!(dom.zero_faces(4), 0b10);
        assert_eq!(dom.outer_faces(4), 0b01);
        assert!(dom.is_interior(6));
        assert_eq!(dom.nearest_node(&[0.49, 0.26]), 7);
        let mut m = [0; 2];
        dom.multi_index(7, &mut m);
        assert_eq!(dom.flat_index(&m), 7);
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(OrthantDomain::new(1, 1.0, 0.3).is_err());
        assert!(OrthantDomain::new(1, 1.0, 0.5).is_err());
        assert!(OrthantDomain::new(0, 1.0, 0.25).is_err());
    }

    #[test]
    fn drift_relaxed_examples() {
        let c = two_drift_1d();
        assert_eq!(c.drift_relaxed(&[1.0], &[0.5, 0.5]).unwrap(), vec![0.0]);
        assert_eq!(c.drift_relaxed(&[1.0], &[1.0, 0.0]).unwrap(), vec![1.0]);

        let mut lin = two_drift_1d();
        lin.drift = Drift::Linear {
            offsets: vec![vec![0.0], vec![0.0]],
            gains: vec![vec![1.0], vec![2.0]],
        };
        let got = lin.drift_relaxed(&[2.0], &[0.25, 0.75]).unwrap()[0];
        let oracle = [(0.25, 1.0 * 2.0), (0.75, 2.0 * 2.0)].iter().map(|(w, b)| w * b).sum::<f64>();
        assert_eq!(got, oracle);
        assert_eq!(got, 3.5);
    }

    #[test]
    fn relaxed_argument_errors() {
        let c = two_drift_1d();
        assert!(matches!(c.drift_relaxed(&[1.0], &[0.5, 0.6]), Err(Error::Validation { .. })));
        assert!(matches!(c.drift_relaxed(&[-0.1], &[0.5, 0.5]), Err(Error::OutsideDomain { .. })));
        assert!(matches!(c.cost_relaxed(&[1.0], &[0.7, 0.7]), Err(Error::Validation { .. })));
    }

    #[test]
    fn cost_relaxed_examples() {
        let mut c = two_drift_1d();
        assert_eq!(c.cost_relaxed(&[0.3], &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(c.cost_relaxed(&[0.3], &[1.0, 0.0]).unwrap(), 1.0);
        c.cost = Cost::Constant { value: 0.7 };
        for v in [[1.0, 0.0], [0.2, 0.8], [0.0, 1.0]] {
            assert_eq!(c.cost_relaxed(&[4.0], &v).unwrap(), 0.7);
        }
    }

    #[test]
    fn cutoff_profile() {
        assert_eq!(cutoff(4.0, 3.0), 1.0);
        assert_eq!(cutoff(4.0, 4.0), 1.0);
        assert_eq!(cutoff(4.0, 5.0), 0.0);
        assert_eq!(cutoff(4.0, 9.0), 0.0);
        assert!((cutoff(4.0, 4.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ellipticity_examples() {
        let dom = OrthantDomain::new(2, 2.0, 0.5).unwrap();
        let mut c = CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![0.0, 0.0]],
            },
            diffusion: Diffusion::identity(2),
            reflection: Reflection::Normal,
            cost: Cost::Constant { value: 0.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        };
        let r = check_ellipticity(&c, &dom, 20, 1);
        assert!((r.min_quadratic_form - 1.0).abs() < 1e-12 && r.pass);

        c.diffusion = Diffusion::diagonal(&[0.0, 0.0]).unwrap();
        let r = check_ellipticity(&c, &dom, 20, 1);
        assert_eq!(r.min_quadratic_form, 0.0);
        assert!(!r.pass);

        // min eigenvalue of diag(1, 4)
        c.diffusion = Diffusion::diagonal(&[1.0, 2.0]).unwrap();
        let r = check_ellipticity(&c, &dom, 50, 3);
        assert_eq!(r.min_quadratic_form, 1.0);
        assert!(r.pass);
        assert_eq!(r, check_ellipticity(&c, &dom, 50, 3));
    }

    #[test]
    fn reflection_angle_examples() {
        let dom = OrthantDomain::new(2, 2.0, 0.5).unwrap();
        let mut c = CoefficientField {
            drift: Drift::Constant {
                vectors: vec![vec![0.0, 0.0]],
            },
            diffusion: Diffusion::identity(2),
            reflection: Reflection::Normal,
            cost: Cost::Constant { value: 0.0 },
            cutoffs: vec![],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        };
        let r = check_reflection_angle(&c, &dom);
        assert_eq!(r.min_dot, 1.0);
        assert!(r.pass);

        c.reflection = Reflection::Oblique {
            directions: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        };
        let r = check_reflection_angle(&c, &dom);
        assert_eq!(r.min_dot, 0.0);
        assert!(!r.pass);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        c.reflection = Reflection::Oblique {
            directions: vec![vec![s, s], vec![0.0, 1.0]],
        };
        c.reflection_margin = 0.7;
        let r = check_reflection_angle(&c, &dom);
        assert!((r.min_dot - 0.7071067811865476).abs() < 1e-15);
        assert!(r.pass);
    }

    #[test]
    fn model_parameter_ranges() {
        let dom = OrthantDomain::new(1, 8.0, 0.5).unwrap();
        let acts = ActionSpace::numbered(2).unwrap();
        let c = two_drift_1d();
        let ok = ModelSpec::new(dom.clone(), acts.clone(), c.clone(), 1.0, 0.5, 0.05, 0, None).unwrap();
        assert_eq!(ok.cost_sup, 3.0);
        assert_eq!(ok.drift_sup, 1.0);
        let err = ModelSpec::new(dom.clone(), acts.clone(), c.clone(), 0.5, 0.5, 0.5, 0, None).unwrap_err();
        assert!(err.to_string().contains("kappa < theta"));
        assert!(ModelSpec::new(dom.clone(), acts.clone(), c.clone(), 1.0, -1.0, 0.05, 0, None).is_err());
        assert!(ModelSpec::new(dom, acts, c, 1.0, 1.0, 0.05, 0, Some(&[0.0])).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("degenerate", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-3).then(|| w.iter().map(|v| v / s).collect())
        })
    }

    fn three_action_field() -> CoefficientField {
        CoefficientField {
            drift: Drift::Linear {
                offsets: vec![vec![1.0, -0.5], vec![-1.0, 0.25], vec![0.3, 2.0]],
                gains: vec![vec![-0.2, 0.1], vec![0.5, -1.0], vec![0.0, 0.3]],
            },
            diffusion: Diffusion::identity(2),
            reflection: Reflection::Normal,
            cost: Cost::RampPlusAction {
                slope: 1.0,
                cap: 2.0,
                extra: vec![0.5, 0.1, 0.9],
            },
            cutoffs: vec![3.0],
            ellipticity: 1.0,
            reflection_margin: 1.0,
        }
    }

    proptest! {
        #[test]
        fn relaxed_maps_are_linear(
            x in prop::collection::vec(0.0f64..5.0, 2),
            v in simplex(3),
            w in simplex(3),
            lam in 0.0f64..1.0,
        ) {
            let c = three_action_field();
            let mix: Vec<f64> = v.iter().zip(&w).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let total: f64 = mix.iter().sum();
            let mix: Vec<f64> = mix.iter().map(|m| m / total).collect();
            let bv = c.drift_relaxed(&x, &v).unwrap();
            let bw = c.drift_relaxed(&x, &w).unwrap();
            let bm = c.drift_relaxed(&x, &mix).unwrap();
            for j in 0..2 {
                prop_assert!((bm[j] - (lam * bv[j] + (1.0 - lam) * bw[j])).abs() < 1e-12);
            }
            let rv = c.cost_relaxed(&x, &v).unwrap();
            let rw = c.cost_relaxed(&x, &w).unwrap();
            let rm = c.cost_relaxed(&x, &mix).unwrap();
            prop_assert!((rm - (lam * rv + (1.0 - lam) * rw)).abs() < 1e-12);
        }

        #[test]
        fn relaxed_minimum_is_at_a_vertex(
            x in prop::collection::vec(0.0f64..5.0, 2),
            v in simplex(3),
        ) {
            let c = three_action_field();
            let vertex_min = (0..3)
                .map(|s| c.cost_relaxed(&x, &RelaxedControl::dirac(3, s).0).unwrap())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(c.cost_relaxed(&x, &v).unwrap() >= vertex_min - 1e-12);
        }
    }
}
