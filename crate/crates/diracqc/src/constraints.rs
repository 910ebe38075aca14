//! Holonomic constraints and every matrix derived from them.
//!
//! A constraint is a configuration-space condition `sigma(R) = 0`; its time
//! derivative `sigma_dot = grad sigma . P/M = 0` constrains momenta. The pair
//! `(sigma, sigma_dot)` forms the full constraint vector `xi` of length `2l`.
//! This module owns the mass-weighted Gram matrix `Z`, the momentum-coupling
//! matrix `Gamma`, the bracket matrix `C` of all constraint pairs with its
//! block inverse, and the exact Lagrange multipliers of the constrained flow.
//!
//! Convention: brackets and derivatives are always evaluated first, and the
//! constraints are imposed only through initial conditions and multiplier
//! forces; nothing here substitutes `sigma = 0` into derivative expressions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::phase::{fd_step, PhasePoint};

/// Reciprocal-condition-number floor below which `Z` is treated as singular.
pub const Z_RCOND_FLOOR: f64 = 1e-12;

type SigmaFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type SigmaGradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type SigmaHessFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// One holonomic constraint `sigma(R) = 0` with analytic first and second
/// derivatives. Gallery constraints supply exact Hessians; user models may
/// fall back to a finite-difference Hessian built from the gradient, at the
/// cost of roughly square-root-of-epsilon accuracy in the multipliers.
#[derive(Clone)]
pub struct HolonomicConstraint {
    name: String,
    sigma: Arc<SigmaFn>,
    grad: Arc<SigmaGradFn>,
    hessian: Arc<SigmaHessFn>,
}

impl HolonomicConstraint {
    pub fn new(
        name: impl Into<String>,
        sigma: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        hessian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            sigma: Arc::new(sigma),
            grad: Arc::new(grad),
            hessian: Arc::new(hessian),
        }
    }

    /// Constraint with the Hessian obtained by central differences of the
    /// analytic gradient.
    pub fn with_fd_hessian(
        name: impl Into<String>,
        sigma: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        let grad_for_hess: Arc<SigmaGradFn> = Arc::new(grad);
        let g = grad_for_hess.clone();
        let hessian = move |r: &DVector<f64>| {
            let n = r.len();
            let mut h = DMatrix::zeros(n, n);
            for j in 0..n {
                let step = fd_step(r[j]);
                let mut rp = r.clone();
                rp[j] += step;
                let mut rm = r.clone();
                rm[j] -= step;
                let col = (g(&rp) - g(&rm)) / (2.0 * step);
                h.set_column(j, &col);
            }
            // Symmetrize away the finite-difference asymmetry.
            0.5 * (&h + h.transpose())
        };
        Self {
            name: name.into(),
            sigma: Arc::new(sigma),
            grad: grad_for_hess,
            hessian: Arc::new(hessian),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sigma(&self, r: &DVector<f64>) -> f64 {
        (self.sigma)(r)
    }

    pub fn grad(&self, r: &DVector<f64>) -> DVector<f64> {
        (self.grad)(r)
    }

    pub fn hessian(&self, r: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(r)
    }
}

impl std::fmt::Debug for HolonomicConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HolonomicConstraint")
            .field("name", &self.name)
            .finish()
    }
}

/// `sigma_dot = sum_i (d sigma / d R_i) P_i / M_i`.
pub fn sigma_dot(c: &HolonomicConstraint, x: &PhasePoint) -> f64 {
    c.grad(x.r()).dot(&x.velocity())
}

/// An ordered set of `l` holonomic constraints sharing the system masses.
/// `l = 0` is a valid unconstrained set: every derived matrix is empty and
/// downstream dynamics reduce to the plain Hamiltonian flow.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    constraints: Vec<HolonomicConstraint>,
    masses: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<HolonomicConstraint>, masses: DVector<f64>) -> Result<Self> {
        if let Some(i) = masses.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::NonFinite {
                what: "constraint set masses",
                index: i,
            });
        }
        Ok(Self { constraints, masses })
    }

    pub fn unconstrained(masses: DVector<f64>) -> Self {
        Self {
            constraints: Vec::new(),
            masses,
        }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn n_dof(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &DVector<f64> {
        &self.masses
    }

    pub fn constraints(&self) -> &[HolonomicConstraint] {
        &self.constraints
    }

    /// Values `sigma_alpha(R)`, length `l`.
    pub fn sigma_values(&self, x: &PhasePoint) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.constraints.iter().map(|c| c.sigma(x.r())))
    }

    /// Values `sigma_dot_alpha(X)`, length `l`.
    pub fn sigma_dot_values(&self, x: &PhasePoint) -> DVector<f64> {
        let v = x.velocity();
        DVector::from_iterator(
            self.len(),
            self.constraints.iter().map(|c| c.grad(x.r()).dot(&v)),
        )
    }

    /// Largest of `|sigma|` and `|sigma_dot|` over the set.
    pub fn max_violation(&self, x: &PhasePoint) -> f64 {
        let s = self.sigma_values(x).abs().max();
        let sd = self.sigma_dot_values(x).abs().max();
        if self.is_empty() {
            0.0
        } else {
            s.max(sd)
        }
    }

    fn gradients(&self, r: &DVector<f64>) -> Vec<DVector<f64>> {
        self.constraints.iter().map(|c| c.grad(r)).collect()
    }

    /// Jacobian of the full constraint vector `xi = (sigma, sigma_dot)` with
    /// respect to `X = (R, P)`; shape `2l x 2N`.
    pub fn xi_jacobian(&self, x: &PhasePoint) -> DMatrix<f64> {
        let l = self.len();
        let n = self.n_dof();
        let v = x.velocity();
        let mut jac = DMatrix::zeros(2 * l, 2 * n);
        for (a, c) in self.constraints.iter().enumerate() {
            let g = c.grad(x.r());
            let h = c.hessian(x.r());
            let hv = &h * &v;
            for i in 0..n {
                jac[(a, i)] = g[i];
                jac[(l + a, i)] = hv[i];
                jac[(l + a, n + i)] = g[i] / self.masses[i];
            }
        }
        jac
    }
}

/// Holds `Z`, its inverse and determinant, plus `Gamma`, for one phase point.
#[derive(Debug, Clone)]
pub struct ConstraintBlocks {
    pub z: DMatrix<f64>,
    pub z_inv: DMatrix<f64>,
    pub det_z: f64,
    pub gamma: DMatrix<f64>,
}

/// The mass-weighted Gram matrix `Z` and the antisymmetric matrix `Gamma`
/// of Hessian contractions. `Gamma` equals the bracket of the velocity
/// constraints with each other, which the tests verify against a brute-force
/// Poisson-bracket evaluation.
pub fn constraint_blocks(set: &ConstraintSet, x: &PhasePoint) -> Result<ConstraintBlocks> {
    let l = set.len();
    if l == 0 {
        return Ok(ConstraintBlocks {
            z: DMatrix::zeros(0, 0),
            z_inv: DMatrix::zeros(0, 0),
            det_z: 1.0,
            gamma: DMatrix::zeros(0, 0),
        });
    }
    let grads = set.gradients(x.r());
    let inv_m = set.masses().map(|m| 1.0 / m);
    let weighted: Vec<DVector<f64>> = grads.iter().map(|g| g.component_mul(&inv_m)).collect();

    let mut z = DMatrix::zeros(l, l);
    for a in 0..l {
        for b in a..l {
            let v = weighted[a].dot(&grads[b]);
            z[(a, b)] = v;
            z[(b, a)] = v;
        }
    }

    let vel = x.velocity();
    let hess: Vec<DMatrix<f64>> = set.constraints.iter().map(|c| c.hessian(x.r())).collect();
    let hv: Vec<DVector<f64>> = hess.iter().map(|h| h * &vel).collect();
    let mut gamma = DMatrix::zeros(l, l);
    for a in 0..l {
        for b in 0..l {
            gamma[(a, b)] = weighted[b].dot(&hv[a]) - weighted[a].dot(&hv[b]);
        }
    }

    let (z_inv, det_z) = invert_z(&z, set)?;
    Ok(ConstraintBlocks {
        z,
        z_inv,
        det_z,
        gamma,
    })
}

fn invert_z(z: &DMatrix<f64>, set: &ConstraintSet) -> Result<(DMatrix<f64>, f64)> {
    let l = z.nrows();
    let svd = z.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond > Z_RCOND_FLOOR) {
        return Err(Error::DegenerateConstraints {
            detail: worst_pair(z, set),
            rcond,
        });
    }
    let chol = z.clone().cholesky().ok_or_else(|| Error::DegenerateConstraints {
        detail: format!("Z not positive definite ({})", worst_pair(z, set)),
        rcond,
    })?;
    let det = chol.determinant();
    let inv = chol.solve(&DMatrix::identity(l, l));
    Ok((inv, det))
}

/// Names the most collinear constraint pair for degenerate-Z diagnostics.
fn worst_pair(z: &DMatrix<f64>, set: &ConstraintSet) -> String {
    let l = z.nrows();
    if l == 1 {
        return format!("constraint `{}` has vanishing gradient", set.constraints[0].name());
    }
    let mut worst = (0, 1, 0.0);
    for a in 0..l {
        for b in (a + 1)..l {
            let denom = (z[(a, a)] * z[(b, b)]).sqrt();
            let corr = if denom > 0.0 {
                (z[(a, b)] / denom).abs()
            } else {
                1.0
            };
            if corr >= worst.2 {
                worst = (a, b, corr);
            }
        }
    }
    format!(
        "constraints `{}` and `{}` are nearly dependent (correlation {:.6})",
        set.constraints[worst.0].name(),
        set.constraints[worst.1].name(),
        worst.2
    )
}

/// The `2l x 2l` bracket matrix of the constraint vector and its block
/// inverse: `C = [[0, Z], [-Z, Gamma]]`,
/// `C^-1 = [[Z^-1 Gamma Z^-1, -Z^-1], [Z^-1, 0]]`.
pub fn c_matrix_and_inverse(
    set: &ConstraintSet,
    x: &PhasePoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let blocks = constraint_blocks(set, x)?;
    Ok(assemble_c(&blocks))
}

pub(crate) fn assemble_c(blocks: &ConstraintBlocks) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = blocks.z.nrows();
    let mut c = DMatrix::zeros(2 * l, 2 * l);
    let mut cinv = DMatrix::zeros(2 * l, 2 * l);
    let zgz = &blocks.z_inv * &blocks.gamma * &blocks.z_inv;
    for a in 0..l {
        for b in 0..l {
            c[(a, l + b)] = blocks.z[(a, b)];
            c[(l + a, b)] = -blocks.z[(a, b)];
            c[(l + a, l + b)] = blocks.gamma[(a, b)];
            cinv[(a, b)] = zgz[(a, b)];
            cinv[(a, l + b)] = -blocks.z_inv[(a, b)];
            cinv[(l + a, b)] = blocks.z_inv[(a, b)];
        }
    }
    (c, cinv)
}

/// Exact Lagrange multipliers of the constrained flow for forces `F`:
/// `lambda = Z^-1 [ (P/M) . Hess sigma . (P/M) + (F/M) . grad sigma ]`.
/// The multiplier force `-sum_a lambda_a grad sigma_a` keeps the second time
/// derivative of every constraint exactly zero.
pub fn lagrange_multipliers(
    set: &ConstraintSet,
    x: &PhasePoint,
    forces: &DVector<f64>,
) -> Result<DVector<f64>> {
    let l = set.len();
    if l == 0 {
        return Ok(DVector::zeros(0));
    }
    let blocks = constraint_blocks(set, x)?;
    Ok(multipliers_from_blocks(set, x, forces, &blocks))
}

pub(crate) fn multipliers_from_blocks(
    set: &ConstraintSet,
    x: &PhasePoint,
    forces: &DVector<f64>,
    blocks: &ConstraintBlocks,
) -> DVector<f64> {
    let l = set.len();
    let vel = x.velocity();
    let f_over_m = forces.component_div(set.masses());
    let mut b = DVector::zeros(l);
    for (beta, c) in set.constraints.iter().enumerate() {
        let h = c.hessian(x.r());
        let g = c.grad(x.r());
        b[beta] = vel.dot(&(&h * &vel)) + f_over_m.dot(&g);
    }
    &blocks.z_inv * b
}

/// Applies the mass-weighted constraint-gradient projector
/// `P_c v = sum_{mu nu} grad sigma_nu Zinv_{nu mu} (grad sigma_mu / M . v)`.
/// Idempotent; its range is the span of the constraint gradients.
pub fn apply_gradient_projector(
    set: &ConstraintSet,
    x: &PhasePoint,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let l = set.len();
    if l == 0 {
        return Ok(DVector::zeros(v.len()));
    }
    let blocks = constraint_blocks(set, x)?;
    let grads = set.gradients(x.r());
    let inv_m = set.masses().map(|m| 1.0 / m);
    let mut coeff = DVector::zeros(l);
    for (mu, g) in grads.iter().enumerate() {
        coeff[mu] = g.component_mul(&inv_m).dot(v);
    }
    let zc = &blocks.z_inv * coeff;
    let mut out = DVector::zeros(v.len());
    for (nu, g) in grads.iter().enumerate() {
        out += g * zc[nu];
    }
    Ok(out)
}

/// Projects momenta onto the tangent subspace `sigma_dot = 0`, orthogonally
/// in the inverse-mass metric so a Gaussian stays Gaussian on the subspace.
pub fn project_momentum(set: &ConstraintSet, x: &PhasePoint) -> Result<PhasePoint> {
    let l = set.len();
    if l == 0 {
        return Ok(x.clone());
    }
    let blocks = constraint_blocks(set, x)?;
    let sd = set.sigma_dot_values(x);
    let coeff = &blocks.z_inv * sd;
    let mut p = x.p().clone();
    for (mu, c) in set.constraints.iter().enumerate() {
        p -= c.grad(x.r()) * coeff[mu];
    }
    Ok(x.with_p(p))
}

/// Newton projection of a configuration onto `{sigma = 0}` along the span of
/// reference gradient directions (the gradients at a nearby on-manifold
/// point, or at the guess itself).
pub fn project_position(
    set: &ConstraintSet,
    r_guess: &DVector<f64>,
    reference_grads: &[DVector<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let l = set.len();
    if l == 0 {
        return Ok(r_guess.clone());
    }
    let mut r = r_guess.clone();
    for _ in 0..max_iter {
        let s = DVector::from_iterator(l, set.constraints.iter().map(|c| c.sigma(&r)));
        if s.abs().max() <= tol {
            return Ok(r);
        }
        let mut jac = DMatrix::zeros(l, l);
        for (mu, c) in set.constraints.iter().enumerate() {
            let g = c.grad(&r);
            for nu in 0..l {
                jac[(mu, nu)] = g.dot(&reference_grads[nu]);
            }
        }
        let delta = jac.lu().solve(&(-&s)).ok_or(Error::ProjectionFailed {
            iters: max_iter,
            residual: s.abs().max(),
        })?;
        for nu in 0..l {
            r += &reference_grads[nu] * delta[nu];
        }
    }
    let s = DVector::from_iterator(l, set.constraints.iter().map(|c| c.sigma(&r)));
    if s.abs().max() <= tol {
        Ok(r)
    } else {
        Err(Error::ProjectionFailed {
            iters: max_iter,
            residual: s.abs().max(),
        })
    }
}

// ---------------------------------------------------------------------------
// Constraint gallery
// ---------------------------------------------------------------------------

/// Fixed bond length between two particles in `dim` spatial dimensions:
/// `sigma = (|r1 - r2|^2 - a^2) / 2` on `2 dim` degrees of freedom.
pub fn dimer_bond(dim: usize, bond_length: f64) -> HolonomicConstraint {
    let a2 = bond_length * bond_length;
    HolonomicConstraint::new(
        format!("dimer-bond(a={bond_length})"),
        move |r| {
            let mut d2 = 0.0;
            for k in 0..dim {
                let d = r[k] - r[dim + k];
                d2 += d * d;
            }
            0.5 * (d2 - a2)
        },
        move |r| {
            let mut g = DVector::zeros(2 * dim);
            for k in 0..dim {
                let d = r[k] - r[dim + k];
                g[k] = d;
                g[dim + k] = -d;
            }
            g
        },
        move |r| {
            let n = 2 * dim;
            let mut h = DMatrix::zeros(n, n);
            for k in 0..dim {
                h[(k, k)] = 1.0;
                h[(dim + k, dim + k)] = 1.0;
                h[(k, dim + k)] = -1.0;
                h[(dim + k, k)] = -1.0;
            }
            let _ = r;
            h
        },
    )
}

/// A bead confined to the curve `y = c x^2`: `sigma = R_1 - c R_0^2` on two
/// degrees of freedom. Its `Z` varies along the curve, so it exercises the
/// non-flat invariant measure.
pub fn parabola_bead(curvature: f64) -> HolonomicConstraint {
    HolonomicConstraint::new(
        format!("parabola-bead(c={curvature})"),
        move |r| r[1] - curvature * r[0] * r[0],
        move |r| DVector::from_row_slice(&[-2.0 * curvature * r[0], 1.0]),
        move |_| DMatrix::from_row_slice(2, 2, &[-2.0 * curvature, 0.0, 0.0, 0.0]),
    )
}

/// A hyperplane `u . R = offset`; zero Hessian, so the multipliers reduce to
/// the force term alone.
pub fn linear_plane(normal: DVector<f64>, offset: f64) -> HolonomicConstraint {
    let n1 = normal.clone();
    let n2 = normal.clone();
    HolonomicConstraint::new(
        "linear-plane",
        move |r| n1.dot(r) - offset,
        move |_| n2.clone(),
        move |r| DMatrix::zeros(r.len(), r.len()),
    )
}
