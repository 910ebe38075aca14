//! The constrained bracket engine.
//!
//! The engine owns one [`ConstraintSet`] and evaluates everything the
//! constrained kernel induces: the modified symplectic matrix, scalar
//! constrained brackets in the two equivalent forms, the matrix-valued
//! quantum-classical constrained bracket, the phase-space compressibility
//! and the invariant measure weight.
//!
//! The kernel is
//! `B^D = B^s + (B^s J^T) C^-1 (B^s J^T)^T`
//! with `J` the Jacobian of the full constraint vector and `C` the bracket
//! matrix of constraint pairs. By construction `B^D` annihilates every
//! constraint gradient, which is the mechanism behind exact constraint
//! conservation: any function of the constraints has zero bracket with any
//! Hamiltonian.
//!
//! The formal operator dressings that intertwine the commutator with the
//! constrained bracket are never materialized; only their net action on
//! function pairs is observable, and that is what the engine computes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::constraints::{assemble_c, constraint_blocks, ConstraintSet};
use crate::error::{Error, Result};
use crate::phase::{fd_step, poisson_from_gradients, symplectic_matrix, PhasePoint, ScalarPhaseFunction};

type MatrixEvalFn = dyn Fn(&PhasePoint) -> DMatrix<Complex64> + Send + Sync;
type MatrixGradFn = dyn Fn(&PhasePoint) -> Vec<DMatrix<Complex64>> + Send + Sync;

/// An `n x n` Hermitian-matrix-valued function of phase space. Scalars are
/// the `n = 1` case and behave exactly like [`ScalarPhaseFunction`].
#[derive(Clone)]
pub struct MatrixPhaseFunction {
    n: usize,
    eval: Arc<MatrixEvalFn>,
    grad: Option<Arc<MatrixGradFn>>,
}

impl MatrixPhaseFunction {
    pub fn new(
        n: usize,
        eval: impl Fn(&PhasePoint) -> DMatrix<Complex64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            eval: Arc::new(eval),
            grad: None,
        }
    }

    pub fn with_gradient(
        n: usize,
        eval: impl Fn(&PhasePoint) -> DMatrix<Complex64> + Send + Sync + 'static,
        grad: impl Fn(&PhasePoint) -> Vec<DMatrix<Complex64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            eval: Arc::new(eval),
            grad: Some(Arc::new(grad)),
        }
    }

    /// Embed a scalar function as the `1 x 1` case.
    pub fn from_scalar(f: &ScalarPhaseFunction) -> Self {
        let f1 = f.clone();
        let f2 = f.clone();
        Self::with_gradient(
            1,
            move |x| DMatrix::from_element(1, 1, Complex64::new(f1.evaluate(x), 0.0)),
            move |x| {
                let g = f2
                    .gradient(x)
                    .expect("scalar gradient evaluation failed inside matrix wrapper");
                g.iter()
                    .map(|&v| DMatrix::from_element(1, 1, Complex64::new(v, 0.0)))
                    .collect()
            },
        )
    }

    /// `f(X)` times the `n x n` identity.
    pub fn scalar_times_identity(f: &ScalarPhaseFunction, n: usize) -> Self {
        let f1 = f.clone();
        let f2 = f.clone();
        Self::with_gradient(
            n,
            move |x| DMatrix::identity(n, n) * Complex64::new(f1.evaluate(x), 0.0),
            move |x| {
                let g = f2
                    .gradient(x)
                    .expect("scalar gradient evaluation failed inside matrix wrapper");
                g.iter()
                    .map(|&v| DMatrix::identity(n, n) * Complex64::new(v, 0.0))
                    .collect()
            },
        )
    }

    pub fn constant(m: DMatrix<Complex64>) -> Self {
        let n = m.nrows();
        let m2 = m.clone();
        Self::with_gradient(
            n,
            move |_| m.clone(),
            move |x| vec![DMatrix::zeros(m2.nrows(), m2.ncols()); 2 * x.n_dof()],
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn evaluate(&self, x: &PhasePoint) -> DMatrix<Complex64> {
        (self.eval)(x)
    }

    /// Analytic gradient when present, otherwise entrywise central
    /// differences with the shared step policy.
    pub fn gradient(&self, x: &PhasePoint) -> Result<Vec<DMatrix<Complex64>>> {
        if let Some(g) = &self.grad {
            return Ok(g(x));
        }
        let dim = 2 * x.n_dof();
        let mut out = Vec::with_capacity(dim);
        for i in 0..dim {
            let xi = x.x(i);
            let h = fd_step(xi);
            let fp = (self.eval)(&x.with_x(i, xi + h));
            let fm = (self.eval)(&x.with_x(i, xi - h));
            if fp.iter().chain(fm.iter()).any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::NonFinite {
                    what: "matrix fd stencil",
                    index: i,
                });
            }
            out.push((fp - fm) / Complex64::new(2.0 * h, 0.0));
        }
        Ok(out)
    }
}

impl std::fmt::Debug for MatrixPhaseFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MatrixPhaseFunction")
            .field("n", &self.n)
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

/// Largest deviation from Hermiticity, for validation.
pub fn hermiticity_defect(m: &DMatrix<Complex64>) -> f64 {
    (m - m.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Bracket engine bound to one constraint set.
#[derive(Debug, Clone)]
pub struct DiracEngine {
    set: ConstraintSet,
}

impl DiracEngine {
    pub fn new(set: ConstraintSet) -> Self {
        Self { set }
    }

    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    /// The constrained kernel `B^D(X)`, antisymmetric, equal to the plain
    /// symplectic matrix when there are no constraints.
    pub fn b_dirac_matrix(&self, x: &PhasePoint) -> Result<DMatrix<f64>> {
        let n = x.n_dof();
        let bs = symplectic_matrix(n)?;
        if self.set.is_empty() {
            return Ok(bs);
        }
        let blocks = constraint_blocks(&self.set, x)?;
        let (_, cinv) = assemble_c(&blocks);
        let jac = self.set.xi_jacobian(x);
        // Columns of `u` are B^s grad(xi_a); the kernel correction is
        // u C^-1 u^T, antisymmetric because C^-1 is.
        let u = &bs * jac.transpose();
        Ok(&bs + &u * cinv * u.transpose())
    }

    /// Constrained bracket from the kernel: `grad(a)^T B^D grad(b)`.
    pub fn dirac_bracket(
        &self,
        a: &ScalarPhaseFunction,
        b: &ScalarPhaseFunction,
        x: &PhasePoint,
    ) -> Result<f64> {
        let ga = a.gradient(x)?;
        let gb = b.gradient(x)?;
        let bd = self.b_dirac_matrix(x)?;
        Ok((bd * &gb).dot(&ga))
    }

    /// The equivalent pair-subtraction form:
    /// `{a,b} - sum_{ab} {a, xi_a} Cinv_{ab} {xi_b, b}`.
    /// Agreement with [`Self::dirac_bracket`] is one of the standing oracles.
    pub fn dirac_bracket_equiv(
        &self,
        a: &ScalarPhaseFunction,
        b: &ScalarPhaseFunction,
        x: &PhasePoint,
    ) -> Result<f64> {
        let n = x.n_dof();
        let ga = a.gradient(x)?;
        let gb = b.gradient(x)?;
        let plain = poisson_from_gradients(&ga, &gb, n)?;
        if self.set.is_empty() {
            return Ok(plain);
        }
        let blocks = constraint_blocks(&self.set, x)?;
        let (_, cinv) = assemble_c(&blocks);
        let jac = self.set.xi_jacobian(x);
        let l2 = jac.nrows();
        let mut a_xi = DVector::zeros(l2);
        let mut xi_b = DVector::zeros(l2);
        for alpha in 0..l2 {
            let gxi = jac.row(alpha).transpose();
            a_xi[alpha] = poisson_from_gradients(&ga, &gxi, n)?;
            xi_b[alpha] = poisson_from_gradients(&gxi, &gb, n)?;
        }
        Ok(plain - (cinv * xi_b).dot(&a_xi))
    }

    /// Matrix-valued constrained bracket of two Hermitian operator functions:
    /// commutator part plus the antisymmetrized constrained bracket of the
    /// matrix gradients. For scalars and no constraints this reduces to the
    /// plain bracket `{chi, h}`.
    pub fn matrix_dirac_bracket(
        &self,
        h: &MatrixPhaseFunction,
        chi: &MatrixPhaseFunction,
        x: &PhasePoint,
        hbar: f64,
    ) -> Result<DMatrix<Complex64>> {
        if h.dim() != chi.dim() {
            return Err(Error::DimensionMismatch {
                what: "matrix bracket operands",
                got: chi.dim(),
                expected: h.dim(),
            });
        }
        let hm = h.evaluate(x);
        let cm = chi.evaluate(x);
        let commutator = (&hm * &cm) - (&cm * &hm);
        let gh = h.gradient(x)?;
        let gc = chi.gradient(x)?;
        let bd = self.b_dirac_matrix(x)?;
        let dim = 2 * x.n_dof();
        let nq = h.dim();
        let mut hc = DMatrix::<Complex64>::zeros(nq, nq);
        let mut ch = DMatrix::<Complex64>::zeros(nq, nq);
        for i in 0..dim {
            for j in 0..dim {
                let w = bd[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let wc = Complex64::new(w, 0.0);
                hc += (&gh[i] * &gc[j]) * wc;
                ch += (&gc[i] * &gh[j]) * wc;
            }
        }
        let i_over_hbar = Complex64::new(0.0, 1.0 / hbar);
        Ok(commutator * i_over_hbar - (hc - ch) * Complex64::new(0.5, 0.0))
    }

    /// Divergence of the constrained kernel, `v_j = sum_i d B^D_ij / d X_i`,
    /// by central differences on the assembled kernel.
    pub fn bd_divergence(&self, x: &PhasePoint) -> Result<DVector<f64>> {
        let dim = 2 * x.n_dof();
        let mut v = DVector::zeros(dim);
        for k in 0..dim {
            let xk = x.x(k);
            let h = fd_step(xk);
            let bp = self.b_dirac_matrix(&x.with_x(k, xk + h))?;
            let bm = self.b_dirac_matrix(&x.with_x(k, xk - h))?;
            let dk = (bp - bm) / (2.0 * h);
            // Row k of the derivative enters the divergence sum.
            for j in 0..dim {
                let val = dk[(k, j)];
                if !val.is_finite() {
                    return Err(Error::NonFinite {
                        what: "kernel divergence",
                        index: k,
                    });
                }
                v[j] += val;
            }
        }
        Ok(v)
    }

    /// Phase-space compressibility of the constrained flow generated by a
    /// scalar Hamiltonian: `kappa_0 = sum_j v_j dH/dX_j`. Along the
    /// constrained flow this equals `-d/dt ln det Z`, which the check suite
    /// verifies as a dual-formula oracle.
    pub fn compressibility_kappa0(
        &self,
        hamiltonian: &ScalarPhaseFunction,
        x: &PhasePoint,
    ) -> Result<f64> {
        if self.set.is_empty() {
            return Ok(0.0);
        }
        let v = self.bd_divergence(x)?;
        let gh = hamiltonian.gradient(x)?;
        Ok(v.dot(&gh))
    }

    /// Operator-valued compressibility for a matrix Hamiltonian.
    pub fn compressibility_kappa0_operator(
        &self,
        hamiltonian: &MatrixPhaseFunction,
        x: &PhasePoint,
    ) -> Result<DMatrix<Complex64>> {
        let nq = hamiltonian.dim();
        if self.set.is_empty() {
            return Ok(DMatrix::zeros(nq, nq));
        }
        let v = self.bd_divergence(x)?;
        let gh = hamiltonian.gradient(x)?;
        let mut out = DMatrix::<Complex64>::zeros(nq, nq);
        for (j, gj) in gh.iter().enumerate() {
            out += gj * Complex64::new(v[j], 0.0);
        }
        Ok(out)
    }

    /// Gradient of `ln det Z` with respect to positions, via the analytic
    /// trace identity on finite-difference derivatives of `Z`.
    pub fn grad_ln_det_z(&self, x: &PhasePoint) -> Result<DVector<f64>> {
        let n = x.n_dof();
        let mut g = DVector::zeros(n);
        if self.set.is_empty() {
            return Ok(g);
        }
        let blocks = constraint_blocks(&self.set, x)?;
        for k in 0..n {
            let xk = x.r()[k];
            let h = fd_step(xk);
            let mut rp = x.r().clone();
            rp[k] = xk + h;
            let mut rm = x.r().clone();
            rm[k] = xk - h;
            let zp = constraint_blocks(&self.set, &x.with_r(rp))?.z;
            let zm = constraint_blocks(&self.set, &x.with_r(rm))?.z;
            let dz = (zp - zm) / (2.0 * h);
            g[k] = (&blocks.z_inv * dz).trace();
        }
        Ok(g)
    }

    /// Invariant measure weight `det Z(X)`; strictly positive on admissible
    /// points, `1` for the unconstrained case.
    pub fn measure_weight(&self, x: &PhasePoint) -> Result<f64> {
        let blocks = constraint_blocks(&self.set, x)?;
        if blocks.det_z <= 0.0 {
            return Err(Error::DegenerateConstraints {
                detail: format!("non-positive measure weight det Z = {}", blocks.det_z),
                rcond: 0.0,
            });
        }
        Ok(blocks.det_z)
    }

    /// `w_D = -ln det Z`, so that the measure weight is `exp(-w_D) = det Z`.
    pub fn log_weight(&self, x: &PhasePoint) -> Result<f64> {
        Ok(-self.measure_weight(x)?.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::PhasePolynomial;
    use crate::constraints::{dimer_bond, parabola_bead, sigma_dot, ConstraintSet};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn dimer_engine() -> (DiracEngine, PhasePoint) {
        let set = ConstraintSet::new(vec![dimer_bond(2, 1.0)], DVector::from_element(4, 1.0))
            .unwrap();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[0.5, 0.0, -0.5, 0.0]),
            DVector::from_row_slice(&[0.0, 0.5, 0.0, -0.5]),
            1.0,
        )
        .unwrap();
        (DiracEngine::new(set), x)
    }

    fn bead_engine() -> (DiracEngine, PhasePoint) {
        let set =
            ConstraintSet::new(vec![parabola_bead(1.0)], DVector::from_element(2, 1.0)).unwrap();
        // On the curve y = x^2 at x = 0.7 with tangent momentum.
        let xpos = 0.7;
        let tangent = DVector::from_row_slice(&[1.0, 2.0 * xpos]).normalize();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[xpos, xpos * xpos]),
            tangent * 0.8,
            1.0,
        )
        .unwrap();
        (DiracEngine::new(set), x)
    }

    fn free_hamiltonian() -> ScalarPhaseFunction {
        ScalarPhaseFunction::with_gradient(
            |x| x.kinetic_energy(),
            |x| {
                let n = x.n_dof();
                let mut g = DVector::zeros(2 * n);
                let v = x.velocity();
                for i in 0..n {
                    g[n + i] = v[i];
                }
                g
            },
        )
    }

    #[test]
    fn unconstrained_kernel_is_symplectic_matrix() {
        let set = ConstraintSet::unconstrained(DVector::from_element(2, 1.0));
        let engine = DiracEngine::new(set);
        let x = PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[0.2, 0.4]),
            DVector::from_row_slice(&[-0.1, 0.6]),
            1.0,
        )
        .unwrap();
        let bd = engine.b_dirac_matrix(&x).unwrap();
        assert_eq!(bd, symplectic_matrix(2).unwrap());
    }

    #[test]
    fn kernel_is_antisymmetric() {
        let (engine, x) = dimer_engine();
        let bd = engine.b_dirac_matrix(&x).unwrap();
        let defect = (&bd + bd.transpose()).abs().max();
        assert!(defect < 1e-10, "antisymmetry defect {defect}");
    }

    #[test]
    fn kernel_annihilates_constraint_gradients() {
        let (engine, x) = dimer_engine();
        let bd = engine.b_dirac_matrix(&x).unwrap();
        let jac = engine.set().xi_jacobian(&x);
        let product = &bd * jac.transpose();
        let worst = product.abs().max();
        assert!(worst < 1e-9, "kernel fails to annihilate gradients: {worst}");
    }

    #[test]
    fn dirac_bracket_conserves_functions_of_constraints() {
        let (engine, x) = dimer_engine();
        let c = engine.set().constraints()[0].clone();
        let f = ScalarPhaseFunction::new(move |x: &PhasePoint| {
            let s = c.sigma(x.r());
            let sd = sigma_dot(&c, x);
            s * s + 0.3 * sd + s * sd + sd.sin()
        });
        let h = free_hamiltonian();
        let v = engine.dirac_bracket(&f, &h, &x).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-9);
        let v2 = engine.dirac_bracket_equiv(&f, &h, &x).unwrap();
        assert_relative_eq!(v2, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn without_constraints_bracket_reduces_to_poisson() {
        let set = ConstraintSet::unconstrained(DVector::from_element(2, 1.0));
        let engine = DiracEngine::new(set);
        let x = PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[1.3, -0.2]),
            DVector::from_row_slice(&[0.5, 0.9]),
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = PhasePolynomial::random(&mut rng, 2, 3, 4).as_phase_function();
            let b = PhasePolynomial::random(&mut rng, 2, 3, 4).as_phase_function();
            let plain = crate::phase::poisson_bracket(&a, &b, &x).unwrap();
            assert_relative_eq!(engine.dirac_bracket(&a, &b, &x).unwrap(), plain, epsilon = 1e-12);
            assert_relative_eq!(
                engine.dirac_bracket_equiv(&a, &b, &x).unwrap(),
                plain,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn dual_forms_agree_on_random_polynomials() {
        let (engine, x0) = dimer_engine();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a = PhasePolynomial::random(&mut rng, 4, 3, 5).as_phase_function();
            let b = PhasePolynomial::random(&mut rng, 4, 3, 5).as_phase_function();
            // Random admissible-ish point: the identity is pointwise, so any
            // phase point with invertible Z is a valid probe.
            let mut r = x0.r().clone();
            let mut p = x0.p().clone();
            for i in 0..4 {
                r[i] += rng.gen_range(-0.3..0.3);
                p[i] = rng.gen_range(-1.0..1.0);
            }
            let x = PhasePoint::with_uniform_mass(r, p, 1.0).unwrap();
            let v1 = engine.dirac_bracket(&a, &b, &x).unwrap();
            let v2 = engine.dirac_bracket_equiv(&a, &b, &x).unwrap();
            assert!(
                (v1 - v2).abs() <= 1e-9 * (1.0 + v1.abs()),
                "dual forms disagree: {v1} vs {v2}"
            );
            // Antisymmetry under swap.
            let v3 = engine.dirac_bracket_equiv(&b, &a, &x).unwrap();
            assert!((v2 + v3).abs() <= 1e-9 * (1.0 + v2.abs()));
        }
    }

    #[test]
    fn first_class_annihilation() {
        let (engine, x) = dimer_engine();
        let c = engine.set().constraints()[0].clone();
        let sigma_fn = ScalarPhaseFunction::new(move |x: &PhasePoint| c.sigma(x.r()));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = PhasePolynomial::random(&mut rng, 4, 3, 5).as_phase_function();
            let v = engine.dirac_bracket_equiv(&sigma_fn, &b, &x).unwrap();
            assert_relative_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn dirac_bracket_jacobi_identity_on_manifold() {
        let (engine, x) = dimer_engine();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..5 {
            let polys: Vec<_> = (0..3)
                .map(|_| PhasePolynomial::random(&mut rng, 4, 2, 4).as_phase_function())
                .collect();
            let nested = |f: &ScalarPhaseFunction, g: &ScalarPhaseFunction| {
                let engine = engine.clone();
                let f = f.clone();
                let g = g.clone();
                ScalarPhaseFunction::new(move |y: &PhasePoint| {
                    engine.dirac_bracket(&f, &g, y).unwrap()
                })
            };
            let ab = nested(&polys[0], &polys[1]);
            let bc = nested(&polys[1], &polys[2]);
            let ca = nested(&polys[2], &polys[0]);
            let total = engine.dirac_bracket(&polys[0], &bc, &x).unwrap()
                + engine.dirac_bracket(&polys[1], &ca, &x).unwrap()
                + engine.dirac_bracket(&polys[2], &ab, &x).unwrap();
            assert!(total.abs() < 1e-7, "Jacobi identity violated: {total}");
        }
    }

    fn two_level_matrix_h() -> MatrixPhaseFunction {
        // (P^2/2M + R_0^2/2) I + [[0.3 R_0, 0.2], [0.2, -0.3 R_0]]
        MatrixPhaseFunction::new(4, |x| {
            let scalar = x.kinetic_energy() + 0.5 * x.r()[0] * x.r()[0];
            let a = 0.3 * x.r()[0];
            let mut m = DMatrix::identity(4, 4) * Complex64::new(scalar, 0.0);
            m[(0, 0)] += Complex64::new(a, 0.0);
            m[(1, 1)] -= Complex64::new(a, 0.0);
            m[(0, 1)] += Complex64::new(0.2, 0.0);
            m[(1, 0)] += Complex64::new(0.2, 0.0);
            m
        })
    }

    #[test]
    fn matrix_bracket_leaves_constraint_functions_invariant() {
        let (engine, x) = dimer_engine();
        let c = engine.set().constraints()[0].clone();
        let f = ScalarPhaseFunction::new(move |x: &PhasePoint| {
            let s = c.sigma(x.r());
            let sd = sigma_dot(&c, x);
            1.5 * s + s * s - 0.7 * sd + 0.25 * sd * sd
        });
        let chi = MatrixPhaseFunction::scalar_times_identity(&f, 4);
        let h = two_level_matrix_h();
        let out = engine.matrix_dirac_bracket(&h, &chi, &x, 1.0).unwrap();
        let worst = out.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "constraint function not invariant: {worst}");
    }

    #[test]
    fn matrix_bracket_of_constant_diagonals_vanishes() {
        let (engine, x) = dimer_engine();
        let h = MatrixPhaseFunction::constant(DMatrix::from_diagonal(
            &DVector::from_row_slice(&[1.0, 2.0]).map(|v| Complex64::new(v, 0.0)),
        ));
        let chi = MatrixPhaseFunction::constant(DMatrix::from_diagonal(
            &DVector::from_row_slice(&[-0.4, 0.9]).map(|v| Complex64::new(v, 0.0)),
        ));
        let out = engine.matrix_dirac_bracket(&h, &chi, &x, 1.0).unwrap();
        assert_eq!(out, DMatrix::zeros(2, 2));
    }

    #[test]
    fn matrix_bracket_scalar_reduction_matches_poisson() {
        let set = ConstraintSet::unconstrained(DVector::from_element(2, 1.0));
        let engine = DiracEngine::new(set);
        let x = PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[0.8, -0.3]),
            DVector::from_row_slice(&[0.4, 1.1]),
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for _ in 0..10 {
            let hs = PhasePolynomial::random(&mut rng, 2, 3, 4).as_phase_function();
            let cs = PhasePolynomial::random(&mut rng, 2, 3, 4).as_phase_function();
            let h = MatrixPhaseFunction::from_scalar(&hs);
            let chi = MatrixPhaseFunction::from_scalar(&cs);
            let out = engine.matrix_dirac_bracket(&h, &chi, &x, 1.0).unwrap();
            // For scalars the bracket is the classical evolution rate of chi
            // under h: {chi, h}.
            let expected = crate::phase::poisson_bracket(&cs, &hs, &x).unwrap();
            assert_relative_eq!(out[(0, 0)].re, expected, epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(out[(0, 0)].im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matrix_bracket_rejects_dimension_mismatch() {
        let (engine, x) = dimer_engine();
        let h = MatrixPhaseFunction::constant(DMatrix::identity(2, 2));
        let chi = MatrixPhaseFunction::constant(DMatrix::identity(3, 3));
        assert!(matches!(
            engine.matrix_dirac_bracket(&h, &chi, &x, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_bracket_swap_structure_on_random_hermitian_pairs() {
        // Swapping the operands negates the adjoint of the bracket:
        // (h, chi) = -(chi, h)^dagger for Hermitian-valued pairs.
        let (engine, x) = dimer_engine();
        let h = two_level_matrix_h();
        let chi = MatrixPhaseFunction::new(4, |x| {
            let mut m = DMatrix::zeros(4, 4);
            m[(0, 0)] = Complex64::new(x.p()[1] * x.p()[1], 0.0);
            m[(1, 1)] = Complex64::new(-0.3 * x.r()[2], 0.0);
            m[(0, 1)] = Complex64::new(0.1 * x.r()[0], 0.4 * x.p()[0]);
            m[(1, 0)] = m[(0, 1)].conj();
            m
        });
        let ab = engine.matrix_dirac_bracket(&h, &chi, &x, 1.0).unwrap();
        let ba = engine.matrix_dirac_bracket(&chi, &h, &x, 1.0).unwrap();
        let defect = (&ab + ba.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(defect < 1e-9, "swap structure defect {defect}");
    }

    #[test]
    fn kappa0_vanishes_for_dimer_and_unconstrained() {
        let (engine, x) = dimer_engine();
        let h = free_hamiltonian();
        let k = engine.compressibility_kappa0(&h, &x).unwrap();
        assert!(k.abs() < 1e-8, "dimer kappa0 = {k}");

        let free_engine = DiracEngine::new(ConstraintSet::unconstrained(
            DVector::from_element(4, 1.0),
        ));
        assert_eq!(free_engine.compressibility_kappa0(&h, &x).unwrap(), 0.0);
    }

    #[test]
    fn kappa0_matches_log_det_z_rate_on_parabola() {
        let (engine, x) = bead_engine();
        let h = free_hamiltonian();
        let kappa = engine.compressibility_kappa0(&h, &x).unwrap();
        // det Z depends only on positions, so its flow derivative is
        // grad ln det Z . P/M pointwise on the manifold.
        let expected = -engine.grad_ln_det_z(&x).unwrap().dot(&x.velocity());
        assert_relative_eq!(kappa, expected, epsilon = 1e-6, max_relative = 1e-5);
        assert!(kappa.abs() > 1e-3, "test point should have nonzero kappa");
    }

    #[test]
    fn measure_weight_values() {
        let (engine, x) = dimer_engine();
        assert_relative_eq!(engine.measure_weight(&x).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(engine.log_weight(&x).unwrap(), -(2.0f64.ln()), epsilon = 1e-12);
        let free_engine = DiracEngine::new(ConstraintSet::unconstrained(
            DVector::from_element(4, 1.0),
        ));
        assert_eq!(free_engine.measure_weight(&x).unwrap(), 1.0);
    }
}
