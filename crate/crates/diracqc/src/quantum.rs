//! Quantum-subsystem layer: diabatic models, adiabatic frames, nonadiabatic
//! couplings, surface forces and the bare and constrained frequencies.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::bracket::MatrixPhaseFunction;
use crate::constraints::{apply_gradient_projector, constraint_blocks, ConstraintSet};
use crate::error::{Error, Result};
use crate::phase::PhasePoint;

type HFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type GradHFn = dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync;

/// A real symmetric diabatic model `h(R)` for `n` quantum states over `N`
/// classical degrees of freedom, with analytic matrix gradient.
#[derive(Clone)]
pub struct DiabaticModel {
    name: String,
    n_states: usize,
    n_dof: usize,
    h: Arc<HFn>,
    grad_h: Arc<GradHFn>,
}

impl DiabaticModel {
    pub fn new(
        name: impl Into<String>,
        n_states: usize,
        n_dof: usize,
        h: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        grad_h: impl Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n_states,
            n_dof,
            h: Arc::new(h),
            grad_h: Arc::new(grad_h),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn h(&self, r: &DVector<f64>) -> DMatrix<f64> {
        (self.h)(r)
    }

    pub fn grad_h(&self, r: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (self.grad_h)(r)
    }

    /// The full quantum-classical Hamiltonian `P^2/2M + h(R)` as a
    /// matrix-valued phase function with analytic gradient.
    pub fn hamiltonian(&self) -> MatrixPhaseFunction {
        let n = self.n_states;
        let h = self.h.clone();
        let gh = self.grad_h.clone();
        MatrixPhaseFunction::with_gradient(
            n,
            move |x| {
                let mut m = h(x.r()).map(|v| Complex64::new(v, 0.0));
                let ke = Complex64::new(x.kinetic_energy(), 0.0);
                for i in 0..n {
                    m[(i, i)] += ke;
                }
                m
            },
            move |x| {
                let nd = x.n_dof();
                let v = x.velocity();
                let grads = gh(x.r());
                let mut out = Vec::with_capacity(2 * nd);
                for i in 0..nd {
                    out.push(grads[i].map(|g| Complex64::new(g, 0.0)));
                }
                for i in 0..nd {
                    let mut m = DMatrix::zeros(n, n);
                    for k in 0..n {
                        m[(k, k)] = Complex64::new(v[i], 0.0);
                    }
                    out.push(m);
                }
                out
            },
        )
    }
}

impl std::fmt::Debug for DiabaticModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiabaticModel")
            .field("name", &self.name)
            .field("n_states", &self.n_states)
            .field("n_dof", &self.n_dof)
            .finish()
    }
}

/// Everything the adiabatic representation provides at one configuration:
/// energies, eigenvectors, coupling vectors, surface and transition forces,
/// and transition frequencies.
#[derive(Debug, Clone)]
pub struct AdiabaticFrame {
    /// Adiabatic energies, ascending.
    pub energies: DVector<f64>,
    /// Orthonormal eigenvector columns in the diabatic basis.
    pub basis: DMatrix<f64>,
    /// Coupling vectors `d[alpha][beta]`, antisymmetric, zero diagonal.
    pub couplings: Vec<Vec<DVector<f64>>>,
    /// Surface forces `F^alpha = -dE_alpha/dR`, one row per state.
    pub surface_forces: Vec<DVector<f64>>,
    /// Transition-force matrix `F^{alpha beta} = -<alpha| dh/dR |beta>`.
    pub force_matrix: Vec<Vec<DVector<f64>>>,
    /// `omega[alpha][beta] = (E_alpha - E_beta) / hbar`.
    pub omega: DMatrix<f64>,
    pub hbar: f64,
}

impl AdiabaticFrame {
    pub fn n_states(&self) -> usize {
        self.energies.len()
    }

    pub fn gap(&self, alpha: usize, beta: usize) -> f64 {
        (self.energies[alpha] - self.energies[beta]).abs()
    }

    /// Flip eigenvector signs; `signs[k]` is `+1` or `-1` per column. The
    /// couplings and transition forces transform with the product of the two
    /// state signs, everything else is gauge invariant.
    pub fn apply_signs(&mut self, signs: &[f64]) {
        let n = self.n_states();
        for (k, &s) in signs.iter().enumerate() {
            if s < 0.0 {
                let col = self.basis.column(k) * -1.0;
                self.basis.set_column(k, &col);
            }
        }
        for a in 0..n {
            for b in 0..n {
                let s = signs[a] * signs[b];
                if s < 0.0 {
                    self.couplings[a][b] *= -1.0;
                    self.force_matrix[a][b] *= -1.0;
                }
            }
        }
    }
}

/// Options for the diagonalization step.
#[derive(Debug, Clone, Copy)]
pub struct AdiabatizeOptions {
    pub hbar: f64,
    /// Gap below which couplings are treated as undefined.
    pub gap_floor: f64,
}

impl Default for AdiabatizeOptions {
    fn default() -> Self {
        Self {
            hbar: 1.0,
            gap_floor: 1e-10,
        }
    }
}

fn symmetric_eigen_ascending(h: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = h.nrows();
    match n {
        1 => (DVector::from_element(1, h[(0, 0)]), DMatrix::identity(1, 1)),
        2 => {
            // Closed form for the dominant 2x2 case.
            let (a, b, c) = (h[(0, 0)], h[(0, 1)], h[(1, 1)]);
            let mean = 0.5 * (a + c);
            let dev = 0.5 * (a - c);
            let r = (dev * dev + b * b).sqrt();
            let phi = 0.5 * f64::atan2(2.0 * b, a - c);
            let (s, co) = phi.sin_cos();
            let u = DMatrix::from_column_slice(2, 2, &[-s, co, co, s]);
            (DVector::from_column_slice(&[mean - r, mean + r]), u)
        }
        _ => {
            let eig = h.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
            let mut vecs = DMatrix::zeros(n, n);
            for (k, &i) in order.iter().enumerate() {
                vecs.set_column(k, &eig.eigenvectors.column(i));
            }
            (vals, vecs)
        }
    }
}

/// Diagonalize `h(R)` and assemble the adiabatic frame. Eigenvector columns
/// are sign-aligned against `prev` when given, otherwise fixed to a positive
/// leading component.
pub fn adiabatize(
    model: &DiabaticModel,
    r: &DVector<f64>,
    prev: Option<&AdiabaticFrame>,
    opts: &AdiabatizeOptions,
) -> Result<AdiabaticFrame> {
    let n = model.n_states();
    let h = model.h(r);
    let (energies, mut basis) = symmetric_eigen_ascending(&h);

    // Gauge fixing.
    match prev {
        Some(p) => {
            for k in 0..n {
                if p.basis.column(k).dot(&basis.column(k)) < 0.0 {
                    let col = basis.column(k) * -1.0;
                    basis.set_column(k, &col);
                }
            }
        }
        None => {
            for k in 0..n {
                let lead = basis
                    .column(k)
                    .iter()
                    .copied()
                    .find(|v| v.abs() > 1e-14)
                    .unwrap_or(1.0);
                if lead < 0.0 {
                    let col = basis.column(k) * -1.0;
                    basis.set_column(k, &col);
                }
            }
        }
    }

    let grads = model.grad_h(r);
    let nd = model.n_dof();

    // Matrix elements <alpha| dh/dR_i |beta> for all pairs at once.
    let mut dh_elems = vec![vec![DVector::zeros(nd); n]; n];
    for i in 0..nd {
        let m = basis.transpose() * &grads[i] * &basis;
        for a in 0..n {
            for b in 0..n {
                dh_elems[a][b][i] = m[(a, b)];
            }
        }
    }

    let mut couplings = vec![vec![DVector::zeros(nd); n]; n];
    let mut force_matrix = vec![vec![DVector::zeros(nd); n]; n];
    let mut surface_forces = Vec::with_capacity(n);
    let mut omega = DMatrix::zeros(n, n);
    for a in 0..n {
        surface_forces.push(-&dh_elems[a][a]);
        for b in 0..n {
            omega[(a, b)] = (energies[a] - energies[b]) / opts.hbar;
            force_matrix[a][b] = -&dh_elems[a][b];
            if a != b {
                let gap = energies[b] - energies[a];
                if gap.abs() < opts.gap_floor {
                    return Err(Error::Degeneracy {
                        alpha: a,
                        beta: b,
                        gap: gap.abs(),
                        floor: opts.gap_floor,
                    });
                }
                couplings[a][b] = &dh_elems[a][b] / gap;
            }
        }
    }

    Ok(AdiabaticFrame {
        energies,
        basis,
        couplings,
        surface_forces,
        force_matrix,
        omega,
        hbar: opts.hbar,
    })
}

/// Make a sequence of frames along a path sign-consistent: each frame's
/// columns are flipped so the overlap diagonal with its predecessor is
/// positive, and couplings are fixed up accordingly.
pub fn frame_transport(frames: &mut [AdiabaticFrame]) -> Result<()> {
    for k in 1..frames.len() {
        let n = frames[k].n_states();
        let overlap = frames[k - 1].basis.transpose() * &frames[k].basis;
        let mut signs = vec![1.0; n];
        for c in 0..n {
            let o = overlap[(c, c)];
            if o.abs() < 0.5 {
                return Err(Error::PathTooCoarse { overlap: o.abs() });
            }
            if o < 0.0 {
                signs[c] = -1.0;
            }
        }
        frames[k].apply_signs(&signs);
    }
    Ok(())
}

/// Which reading of the constrained transition frequency to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyMode {
    /// The printed scalar form: `omega (1 + sum Zinv-contracted gradient
    /// dot products)`, which evaluates to `omega (1 + l)`.
    Literal,
    /// The vector relation reconstructed from the constrained transition
    /// operator: `omega (1 + P_c) d`, with `P_c` the mass-weighted
    /// constraint-gradient projector.
    Projected,
}

/// Scalar constrained frequency in the literal reading.
pub fn constrained_frequency_literal(
    frame: &AdiabaticFrame,
    alpha: usize,
    beta: usize,
    set: &ConstraintSet,
    x: &PhasePoint,
) -> Result<f64> {
    let omega = frame.omega[(alpha, beta)];
    if set.is_empty() || omega == 0.0 {
        return Ok(omega);
    }
    let blocks = constraint_blocks(set, x)?;
    let l = set.len();
    let grads: Vec<DVector<f64>> = set.constraints().iter().map(|c| c.grad(x.r())).collect();
    let inv_m = set.masses().map(|m| 1.0 / m);
    let mut contraction = 0.0;
    for mu in 0..l {
        let gm = grads[mu].component_mul(&inv_m);
        for nu in 0..l {
            contraction += blocks.z_inv[(mu, nu)] * gm.dot(&grads[nu]);
        }
    }
    Ok(omega * (1.0 + contraction))
}

/// Vector constrained frequency in the projected reading:
/// `omega_{alpha beta} (1 + P_c) d_{alpha beta}`.
pub fn constrained_frequency_projected(
    frame: &AdiabaticFrame,
    alpha: usize,
    beta: usize,
    set: &ConstraintSet,
    x: &PhasePoint,
) -> Result<DVector<f64>> {
    let omega = frame.omega[(alpha, beta)];
    let d = &frame.couplings[alpha][beta];
    if set.is_empty() || omega == 0.0 {
        return Ok(d * omega);
    }
    let pd = apply_gradient_projector(set, x, d)?;
    Ok((d + pd) * omega)
}

// ---------------------------------------------------------------------------
// Model gallery
// ---------------------------------------------------------------------------

/// Two-level model with diabatic gap linear in one bath coordinate:
/// `h = (k_common/2) |R|^2 I + [[slope R_k, coupling], [coupling, -slope R_k]]`.
pub fn two_level_linear(
    n_dof: usize,
    coord: usize,
    slope: f64,
    coupling: f64,
    k_common: f64,
) -> DiabaticModel {
    DiabaticModel::new(
        "two-level-linear",
        2,
        n_dof,
        move |r| {
            let common = 0.5 * k_common * r.dot(r);
            let eps = slope * r[coord];
            DMatrix::from_row_slice(2, 2, &[common + eps, coupling, coupling, common - eps])
        },
        move |r| {
            (0..n_dof)
                .map(|i| {
                    let mut g = DMatrix::from_diagonal(&DVector::from_element(
                        2,
                        k_common * r[i],
                    ));
                    if i == coord {
                        g[(0, 0)] += slope;
                        g[(1, 1)] -= slope;
                    }
                    g
                })
                .collect()
        },
    )
}

/// Two-level model with a constant diabatic matrix (zero couplings, constant
/// gap) plus an optional common harmonic potential.
pub fn two_level_constant(n_dof: usize, eps: f64, coupling: f64, k_common: f64) -> DiabaticModel {
    DiabaticModel::new(
        "two-level-constant",
        2,
        n_dof,
        move |r| {
            let common = 0.5 * k_common * r.dot(r);
            DMatrix::from_row_slice(2, 2, &[common + eps, coupling, coupling, common - eps])
        },
        move |r| {
            (0..n_dof)
                .map(|i| DMatrix::from_diagonal(&DVector::from_element(2, k_common * r[i])))
                .collect()
        },
    )
}

/// Single-surface model (pure classical potential), the `n = 1` corner case.
pub fn single_level(n_dof: usize, k_common: f64) -> DiabaticModel {
    DiabaticModel::new(
        "single-level",
        1,
        n_dof,
        move |r| DMatrix::from_element(1, 1, 0.5 * k_common * r.dot(r)),
        move |r| {
            (0..n_dof)
                .map(|i| DMatrix::from_element(1, 1, k_common * r[i]))
                .collect()
        },
    )
}
