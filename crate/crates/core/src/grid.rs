//! Finite-difference building blocks shared by the HJB solvers, the
//! ergodic residual and the hitting-probability solve: the positive
//! diffusion stencil, upwind drift differences, the oblique boundary
//! relation and multilinear interpolation.

use crate::domain::{ModelSpec, OrthantDomain};
use crate::{Error, Result};

/// Relative tolerance used when comparing Hamiltonian candidates; ties go
/// to the lowest action index.
pub const TIE_TOL: f64 = 1e-10;

/// Multilinear interpolation weights of the grid at `p` (clamped to the box).
/// Corners with zero weight are omitted.
pub fn interp_weights(domain: &OrthantDomain, p: &[f64]) -> Vec<(usize, f64)> {
    let d = domain.dim();
    let h = domain.spacing();
    let cells = domain.cells();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for j in 0..d {
        let s = (p[j] / h).clamp(0.0, cells as f64);
        let i = (s.floor() as usize).min(cells - 1);
        base[j] = i;
        frac[j] = s - i as f64;
    }
    let mut out = Vec::with_capacity(1 << d);
    let mut corner = vec![0usize; d];
    for mask in 0..(1usize << d) {
        let mut w = 1.0;
        for j in 0..d {
            let up = mask & (1 << j) != 0;
            corner[j] = base[j] + up as usize;
            w *= if up { frac[j] } else { 1.0 - frac[j] };
        }
        if w != 0.0 {
            out.push((domain.flat_index(&corner), w));
        }
    }
    out
}

/// Multilinear interpolation of nodal values `u` at `p`.
pub fn interpolate(domain: &OrthantDomain, u: &[f64], p: &[f64]) -> f64 {
    interp_weights(domain, p).iter().map(|(i, w)| w * u[*i]).sum()
}

/// The algebraic boundary relation: every non-interior node takes the value
/// of the grid function at a point displaced along the reflection direction
/// (reflecting faces) or one cell inward (outer faces).
#[derive(Debug, Clone)]
pub struct BoundaryOperator {
    nodes: Vec<usize>,
    /// Foot of the relation for each boundary node.
    targets: Vec<Vec<f64>>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    /// Multiplier `1 / (1 - w_self)`.
    scale: Vec<f64>,
}

pub const BOUNDARY_MAX_PASSES: usize = 64;

impl BoundaryOperator {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let domain = &model.domain;
        let d = domain.dim();
        let h = domain.spacing();
        let side = domain.side();
        let mut nodes = Vec::new();
        let mut targets = Vec::new();
        let mut row_start = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut scale = Vec::new();
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        for idx in 0..domain.node_count() {
            let zero = domain.zero_faces(idx);
            let outer = domain.outer_faces(idx);
            if zero == 0 && outer == 0 {
                continue;
            }
            domain.coords_into(idx, &mut x);
            let mut p = x.clone();
            for face in (0..d).filter(|i| zero & (1 << i) != 0) {
                model.coeffs.reflection.direction_into(face, &x, &mut g);
                if !(g[face] > 0.0) {
                    return Err(Error::Config(format!(
                        "reflection on face {face} has no inward component at node {idx}"
                    )));
                }
                for j in 0..d {
                    p[j] += h * g[j] / g[face];
                }
            }
            for j in (0..d).filter(|j| outer & (1 << j) != 0) {
                p[j] = side - h;
            }
            for v in p.iter_mut() {
                *v = v.clamp(0.0, side);
            }
            let mut w_self = 0.0;
            for (c, w) in interp_weights(domain, &p) {
                if c == idx {
                    w_self += w;
                } else {
                    cols.push(c);
                    weights.push(w);
                }
            }
            if w_self >= 1.0 - 1e-12 {
                return Err(Error::Config(format!(
                    "boundary relation at node {idx} refers only to itself"
                )));
            }
            nodes.push(idx);
            targets.push(p);
            row_start.push(cols.len());
            scale.push(1.0 / (1.0 - w_self));
        }
        Ok(Self {
            nodes,
            targets,
            row_start,
            cols,
            weights,
            scale,
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Point at which boundary node number `k` (in [`Self::nodes`] order) is read.
    pub fn target(&self, k: usize) -> &[f64] {
        &self.targets[k]
    }

    /// Value implied by the relation for boundary row `k`.
    pub fn implied(&self, k: usize, u: &[f64]) -> f64 {
        let r = self.row_start[k]..self.row_start[k + 1];
        let s: f64 = self.cols[r.clone()].iter().zip(&self.weights[r]).map(|(c, w)| w * u[*c]).sum();
        s * self.scale[k]
    }

    /// Gauss–Seidel passes over the boundary rows until the relation holds.
    pub fn apply(&self, u: &mut [f64]) -> Result<()> {
        for _ in 0..BOUNDARY_MAX_PASSES {
            let mut change: f64 = 0.0;
            let mut size: f64 = 0.0;
            for k in 0..self.nodes.len() {
                let v = self.implied(k, u);
                let i = self.nodes[k];
                change = change.max((v - u[i]).abs());
                size = size.max(v.abs());
                u[i] = v;
            }
            if change <= 1e-14 * size.max(1e-300) {
                return Ok(());
            }
        }
        Err(Error::Solver(format!(
            "boundary relation did not settle in {BOUNDARY_MAX_PASSES} passes"
        )))
    }

    /// Max over boundary rows of `|implied − u| / h`.
    pub fn residual(&self, u: &[f64], h: f64) -> f64 {
        (0..self.nodes.len())
            .map(|k| (self.implied(k, u) - u[self.nodes[k]]).abs() / h)
            .fold(0.0, f64::max)
    }
}

/// Precomputed stencils and coefficient tables for one model on its grid.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub domain: OrthantDomain,
    dim: usize,
    n_actions: usize,
    h: f64,
    strides: Vec<usize>,
    /// Diffusion stencil neighbours as signed flat offsets, and weights.
    diff_offsets: Vec<isize>,
    diff_weights: Vec<f64>,
    diff_center: f64,
    interior: Vec<bool>,
    /// `node · n_actions · d` drift table.
    drift: Vec<f64>,
    /// `node · n_actions` cost table.
    cost: Vec<f64>,
    pub boundary: BoundaryOperator,
}

impl Discretization {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let domain = model.domain.clone();
        let d = domain.dim();
        let n = model.n_actions();
        let h = domain.spacing();
        let h2 = h * h;
        let strides: Vec<usize> = (0..d).map(|j| domain.stride(j)).collect();
        let a = &model.coeffs.diffusion;
        for j in 0..d {
            let off: f64 = (0..d).filter(|k| *k != j).map(|k| a.a_entry(j, k).abs()).sum();
            if off > a.a_entry(j, j) * (1.0 + 1e-12) + 1e-15 {
                return Err(Error::Config(format!(
                    "diffusion matrix a is not diagonally dominant in row {j}; the positive stencil needs a_jj >= sum |a_jk|"
                )));
            }
        }
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        let mut center = 0.0;
        for j in 0..d {
            let off: f64 = (0..d).filter(|k| *k != j).map(|k| a.a_entry(j, k).abs()).sum();
            let w = 0.5 * a.a_entry(j, j) / h2 - 0.5 * off / h2;
            let s = strides[j] as isize;
            offsets.extend([s, -s]);
            weights.extend([w, w]);
            center -= a.a_entry(j, j) / h2;
        }
        for j in 0..d {
            for k in (j + 1)..d {
                let ajk = a.a_entry(j, k);
                if ajk == 0.0 {
                    continue;
                }
                let (sj, sk) = (strides[j] as isize, strides[k] as isize);
                let w = 0.5 * ajk.abs() / h2;
                if ajk > 0.0 {
                    offsets.extend([sj + sk, -sj - sk]);
                } else {
                    offsets.extend([sj - sk, sk - sj]);
                }
                weights.extend([w, w]);
                center += ajk.abs() / h2;
            }
        }
        let nodes = domain.node_count();
        let mut drift = vec![0.0; nodes * n * d];
        let mut cost = vec![0.0; nodes * n];
        let mut interior = vec![false; nodes];
        let mut x = vec![0.0; d];
        for idx in 0..nodes {
            interior[idx] = domain.is_interior(idx);
            domain.coords_into(idx, &mut x);
            for s in 0..n {
                let at = (idx * n + s) * d;
                model.coeffs.drift_into(&x, s, &mut drift[at..at + d]);
                cost[idx * n + s] = model.coeffs.cost(&x, s);
            }
        }
        let boundary = BoundaryOperator::new(model)?;
        Ok(Self {
            domain,
            dim: d,
            n_actions: n,
            h,
            strides,
            diff_offsets: offsets,
            diff_weights: weights,
            diff_center: center,
            interior,
            drift,
            cost,
            boundary,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.interior[idx]
    }

    /// Magnitude of the diagonal entry of the diffusion stencil.
    pub fn diffusion_center(&self) -> f64 {
        -self.diff_center
    }

    pub fn cost(&self, idx: usize, s: usize) -> f64 {
        self.cost[idx * self.n_actions + s]
    }

    pub fn drift(&self, idx: usize, s: usize) -> &[f64] {
        let at = (idx * self.n_actions + s) * self.dim;
        &self.drift[at..at + self.dim]
    }

    /// `½ tr(a ∇²u)` at an interior node.
    pub fn diffusion_term(&self, u: &[f64], idx: usize) -> f64 {
        let mut acc = self.diff_center * u[idx];
        for (o, w) in self.diff_offsets.iter().zip(&self.diff_weights) {
            acc += w * u[(idx as isize + o) as usize];
        }
        acc
    }

    /// Upwind `b̄(x, s) · ∇u` at an interior node.
    pub fn drift_term(&self, u: &[f64], idx: usize, s: usize) -> f64 {
        let b = self.drift(idx, s);
        let c = u[idx];
        let mut acc = 0.0;
        for j in 0..self.dim {
            let bj = b[j];
            if bj > 0.0 {
                acc += bj * (u[idx + self.strides[j]] - c);
            } else if bj < 0.0 {
                acc += bj * (c - u[idx - self.strides[j]]);
            }
        }
        acc / self.h
    }

    /// Upwind drift term at any node; a missing upwind neighbour contributes
    /// a zero difference.
    pub fn drift_term_any(&self, u: &[f64], idx: usize, s: usize) -> f64 {
        if self.interior[idx] {
            return self.drift_term(u, idx, s);
        }
        let zero = self.domain.zero_faces(idx);
        let outer = self.domain.outer_faces(idx);
        let b = self.drift(idx, s);
        let c = u[idx];
        let mut acc = 0.0;
        for j in 0..self.dim {
            let bj = b[j];
            if bj > 0.0 && outer & (1 << j) == 0 {
                acc += bj * (u[idx + self.strides[j]] - c);
            } else if bj < 0.0 && zero & (1 << j) == 0 {
                acc += bj * (c - u[idx - self.strides[j]]);
            }
        }
        acc / self.h
    }

    /// `min_s [b̄·∇u + θ r̄ u]` and its argmin (lowest index on ties).
    pub fn control_min(&self, u: &[f64], idx: usize, theta: f64) -> (f64, usize) {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for s in 0..self.n_actions {
            let v = self.drift_term_any(u, idx, s) + theta * self.cost(idx, s) * u[idx];
            if s == 0 || v < best - TIE_TOL * best.abs().max(v.abs()) {
                best = v;
                arg = s;
            }
        }
        (best, arg)
    }

    /// Control term under a fixed action.
    pub fn control_term(&self, u: &[f64], idx: usize, theta: f64, s: usize) -> f64 {
        self.drift_term_any(u, idx, s) + theta * self.cost(idx, s) * u[idx]
    }

    /// Largest τ-step (τ = ln θ) keeping the explicit scheme monotone.
    pub fn monotone_step(&self, alpha: f64, drift_sup: f64, cost_sup: f64) -> f64 {
        let rate = self.diffusion_center() + drift_sup * self.dim as f64 / self.h + cost_sup;
        if rate <= 0.0 {
            f64::INFINITY
        } else {
            alpha / rate
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionSpace, CoefficientField, Cost, Diffusion, Drift, Reflection};

    fn model(d: usize, reflection: Reflection, sigma: Vec<Vec<f64>>) -> ModelSpec {
        ModelSpec::new(
            OrthantDomain::new(d, 2.0, 0.25).unwrap(),
            ActionSpace::numbered(1).unwrap(),
            CoefficientField {
                drift: Drift::Constant {
                    vectors: vec![vec![0.0; d]],
                },
                diffusion: Diffusion::matrix(sigma).unwrap(),
                reflection,
                cost: Cost::Constant { value: 0.0 },
                cutoffs: vec![],
                ellipticity: 0.1,
                reflection_margin: 0.1,
            },
            1.0,
            1.0,
            0.1,
            0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn interpolation_reproduces_multilinear_functions() {
        let dom = OrthantDomain::new(2, 2.0, 0.25).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let u: Vec<f64> = (0..dom.node_count()).map(|i| f(&dom.coords(i))).collect();
        let p = [0.61, 1.37];
        assert!((interpolate(&dom, &u, &p) - f(&p)).abs() < 1e-13);
        let w = interp_weights(&dom, &[0.5, 0.25]);
        assert_eq!(w, vec![(dom.nearest_node(&[0.5, 0.25]), 1.0)]);
    }

    #[test]
    fn diffusion_stencil_is_exact_on_quadratics() {
        // a = [[2, 1], [1, 2]] is diagonally dominant.
        let s = (3.0f64).sqrt();
        let sigma = vec![vec![s / 2.0 + 0.5, s / 2.0 - 0.5], vec![s / 2.0 - 0.5, s / 2.0 + 0.5]];
        let m = model(2, Reflection::Normal, sigma);
        let a = m.coeffs.diffusion.a().to_vec();
        assert!((a[0] - 2.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
        let disc = Discretization::new(&m).unwrap();
        let dom = &m.domain;
        let u: Vec<f64> = (0..dom.node_count())
            .map(|i| {
                let x = dom.coords(i);
                x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1]
            })
            .collect();
        // ½ tr(a ∇²u) with ∇²u = [[2, 3], [3, -2]]
        let exact = 0.5 * (a[0] * 2.0 + 2.0 * a[1] * 3.0 + a[3] * -2.0);
        let idx = dom.nearest_node(&[1.0, 1.0]);
        assert!((disc.diffusion_term(&u, idx) - exact).abs() < 1e-10);
        assert!(disc.diff_weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn non_dominant_diffusion_is_rejected() {
        let m = model(2, Reflection::Normal, vec![vec![1.0, 1.0], vec![0.0, 0.2]]);
        assert!(matches!(Discretization::new(&m), Err(Error::Config(_))));
    }

    #[test]
    fn boundary_relation_normal_reflection() {
        let m = model(2, Reflection::Normal, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let disc = Discretization::new(&m).unwrap();
        let dom = &m.domain;
        let mut u: Vec<f64> = (0..dom.node_count()).map(|i| i as f64).collect();
        disc.boundary.apply(&mut u).unwrap();
        let corner = dom.nearest_node(&[0.0, 0.0]);
        assert_eq!(u[corner], u[dom.nearest_node(&[0.25, 0.25])]);
        let outer = dom.nearest_node(&[2.0, 1.0]);
        assert_eq!(u[outer], u[dom.nearest_node(&[1.75, 1.0])]);
        assert!(disc.boundary.residual(&u, dom.spacing()) < 1e-12);
    }

    #[test]
    fn boundary_relation_oblique_reads_off_grid() {
        let refl = Reflection::Oblique {
            directions: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
        };
        let m = model(2, refl, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let disc = Discretization::new(&m).unwrap();
        let k = disc
            .boundary
            .nodes()
            .iter()
            .position(|&i| i == m.domain.nearest_node(&[0.0, 1.0]))
            .unwrap();
        assert_eq!(disc.boundary.target(k), &[0.25, 1.125]);
    }
}
