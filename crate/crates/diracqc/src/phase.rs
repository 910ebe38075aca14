//! Phase-space primitives: points, scalar phase functions with
//! analytic-or-numeric differentiation, and the plain Poisson bracket.
//!
//! Phase space is ordered as `X = (R_0..R_{N-1}, P_0..P_{N-1})`; every
//! gradient in the crate follows this layout.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A point in classical phase space together with the per-degree-of-freedom
/// masses. Immutable after construction; all invariants are checked once.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    r: DVector<f64>,
    p: DVector<f64>,
    masses: DVector<f64>,
}

impl PhasePoint {
    pub fn new(r: DVector<f64>, p: DVector<f64>, masses: DVector<f64>) -> Result<Self> {
        let n = r.len();
        if n == 0 {
            return Err(Error::InvalidDimension {
                what: "phase point",
                value: 0,
            });
        }
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                what: "momenta",
                got: p.len(),
                expected: n,
            });
        }
        if masses.len() != n {
            return Err(Error::DimensionMismatch {
                what: "masses",
                got: masses.len(),
                expected: n,
            });
        }
        if let Some(i) = masses.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::NonFinite {
                what: "masses",
                index: i,
            });
        }
        Ok(Self { r, p, masses })
    }

    /// Uniform mass for all degrees of freedom.
    pub fn with_uniform_mass(r: DVector<f64>, p: DVector<f64>, mass: f64) -> Result<Self> {
        let n = r.len();
        Self::new(r, p, DVector::from_element(n, mass))
    }

    pub fn n_dof(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }

    pub fn masses(&self) -> &DVector<f64> {
        &self.masses
    }

    /// Phase-space component `X_i` in the `(R, P)` layout.
    pub fn x(&self, i: usize) -> f64 {
        let n = self.n_dof();
        if i < n {
            self.r[i]
        } else {
            self.p[i - n]
        }
    }

    /// Copy with component `X_i` replaced; used by finite-difference stencils.
    pub fn with_x(&self, i: usize, value: f64) -> Self {
        let mut out = self.clone();
        let n = out.n_dof();
        if i < n {
            out.r[i] = value;
        } else {
            out.p[i - n] = value;
        }
        out
    }

    pub fn with_r(&self, r: DVector<f64>) -> Self {
        Self {
            r,
            p: self.p.clone(),
            masses: self.masses.clone(),
        }
    }

    pub fn with_p(&self, p: DVector<f64>) -> Self {
        Self {
            r: self.r.clone(),
            p,
            masses: self.masses.clone(),
        }
    }

    /// `P_i / M_i` componentwise.
    pub fn velocity(&self) -> DVector<f64> {
        self.p.component_div(&self.masses)
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.p.component_div(&self.masses).dot(&self.p)
    }
}

/// Run-wide physical constants in reduced units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub beta: f64,
}

impl PhysicalConstants {
    pub fn new(hbar: f64, beta: f64) -> Result<Self> {
        if !(hbar > 0.0) {
            return Err(Error::config("constants.hbar", "must be > 0"));
        }
        if !(beta > 0.0) {
            return Err(Error::config("constants.beta", "must be > 0"));
        }
        Ok(Self { hbar, beta })
    }
}

type EvalFn = dyn Fn(&PhasePoint) -> f64 + Send + Sync;
type GradFn = dyn Fn(&PhasePoint) -> DVector<f64> + Send + Sync;

/// A scalar function of phase space, `a(X)`, with an optional analytic
/// gradient. When no gradient is supplied, [`fd_gradient`] is the fallback.
#[derive(Clone)]
pub struct ScalarPhaseFunction {
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
}

impl ScalarPhaseFunction {
    pub fn new(eval: impl Fn(&PhasePoint) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            grad: None,
        }
    }

    pub fn with_gradient(
        eval: impl Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&PhasePoint) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            grad: Some(Arc::new(grad)),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::with_gradient(move |_| c, |x| DVector::zeros(2 * x.n_dof()))
    }

    /// The coordinate function `R_i`.
    pub fn position(i: usize) -> Self {
        Self::with_gradient(
            move |x| x.r()[i],
            move |x| {
                let mut g = DVector::zeros(2 * x.n_dof());
                g[i] = 1.0;
                g
            },
        )
    }

    /// The momentum function `P_i`.
    pub fn momentum(i: usize) -> Self {
        Self::with_gradient(
            move |x| x.p()[i],
            move |x| {
                let n = x.n_dof();
                let mut g = DVector::zeros(2 * n);
                g[n + i] = 1.0;
                g
            },
        )
    }

    pub fn evaluate(&self, x: &PhasePoint) -> f64 {
        (self.eval)(x)
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Analytic gradient when present, otherwise central finite differences.
    pub fn gradient(&self, x: &PhasePoint) -> Result<DVector<f64>> {
        match &self.grad {
            Some(g) => {
                let v = g(x);
                if let Some(i) = v.iter().position(|c| !c.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "analytic gradient",
                        index: i,
                    });
                }
                Ok(v)
            }
            None => fd_gradient_auto(self, x),
        }
    }

    /// Pointwise product, with the product-rule gradient when both factors
    /// carry analytic gradients.
    pub fn product(&self, other: &Self) -> Self {
        let fa = self.clone();
        let fb = other.clone();
        match (self.grad.clone(), other.grad.clone()) {
            (Some(ga), Some(gb)) => {
                let ea = self.eval.clone();
                let eb = other.eval.clone();
                Self::with_gradient(
                    move |x| (fa.eval)(x) * (fb.eval)(x),
                    move |x| ga(x) * eb(x) + gb(x) * ea(x),
                )
            }
            _ => Self::new(move |x| (fa.eval)(x) * (fb.eval)(x)),
        }
    }

    /// Pointwise sum; gradient present when both terms have one.
    pub fn sum(&self, other: &Self) -> Self {
        let fa = self.clone();
        let fb = other.clone();
        match (self.grad.clone(), other.grad.clone()) {
            (Some(ga), Some(gb)) => Self::with_gradient(
                move |x| (fa.eval)(x) + (fb.eval)(x),
                move |x| ga(x) + gb(x),
            ),
            _ => Self::new(move |x| (fa.eval)(x) + (fb.eval)(x)),
        }
    }
}

impl std::fmt::Debug for ScalarPhaseFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarPhaseFunction")
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

/// The `2N x 2N` symplectic matrix `[[0, I], [-I, 0]]`.
pub fn symplectic_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidDimension {
            what: "symplectic matrix",
            value: 0,
        });
    }
    let mut b = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        b[(i, n + i)] = 1.0;
        b[(n + i, i)] = -1.0;
    }
    Ok(b)
}

/// Per-component central-difference step: `eps^(1/3) * max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central-difference gradient with a fixed step `h` for every component.
pub fn fd_gradient(f: &ScalarPhaseFunction, x: &PhasePoint, h: f64) -> Result<DVector<f64>> {
    fd_gradient_impl(f, x, |_| h)
}

/// Central-difference gradient with the per-component step policy.
pub fn fd_gradient_auto(f: &ScalarPhaseFunction, x: &PhasePoint) -> Result<DVector<f64>> {
    fd_gradient_impl(f, x, |xi| fd_step(xi))
}

fn fd_gradient_impl(
    f: &ScalarPhaseFunction,
    x: &PhasePoint,
    step: impl Fn(f64) -> f64,
) -> Result<DVector<f64>> {
    let dim = 2 * x.n_dof();
    let mut g = DVector::zeros(dim);
    for i in 0..dim {
        let xi = x.x(i);
        let h = step(xi);
        let fp = f.evaluate(&x.with_x(i, xi + h));
        let fm = f.evaluate(&x.with_x(i, xi - h));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "fd stencil value",
                index: i,
            });
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Poisson bracket `{a, b} = da/dR . db/dP - da/dP . db/dR`.
pub fn poisson_bracket(
    a: &ScalarPhaseFunction,
    b: &ScalarPhaseFunction,
    x: &PhasePoint,
) -> Result<f64> {
    let ga = a.gradient(x)?;
    let gb = b.gradient(x)?;
    poisson_from_gradients(&ga, &gb, x.n_dof())
}

/// Bracket value from precomputed gradients in the `(R, P)` layout.
pub fn poisson_from_gradients(ga: &DVector<f64>, gb: &DVector<f64>, n: usize) -> Result<f64> {
    if let Some(i) = ga.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            what: "bracket gradient (left)",
            index: i,
        });
    }
    if let Some(i) = gb.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            what: "bracket gradient (right)",
            index: i,
        });
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += ga[i] * gb[n + i] - ga[n + i] * gb[i];
    }
    Ok(acc)
}
