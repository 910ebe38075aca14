//! Time evolution: exact-multiplier constrained classical flow, adiabatic
//! surface-pair segments, the constrained momentum jump, hop sampling, and
//! parallel ensemble propagation.
//!
//! The sampling scheme is a sequential short-time splitting: within each
//! `dt` the trajectory first evolves diagonally (mean surface forces plus
//! multiplier forces, accumulating the transition phase), then the
//! off-diagonal transition operator acts as an importance-weighted binary
//! hop per density-matrix index. Branch weights are chosen so the branch
//! average reproduces the short-time action of the transition operator.
//!
//! Frustrated jumps are vetoed: the momenta stay untouched and the
//! trajectory continues on the no-hop branch with the no-hop weight. Whether
//! the jump preserves the momentum constraints is not assumed anywhere; the
//! per-trajectory records track the constraint violation after every jump,
//! and an optional post-jump momentum projection can be switched on.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bracket::MatrixPhaseFunction;
use crate::constraints::{
    constraint_blocks, lagrange_multipliers, multipliers_from_blocks, project_momentum,
    project_position, ConstraintSet,
};
use crate::error::{Error, Result};
use crate::phase::{PhasePoint, PhysicalConstants};
use crate::quantum::{
    adiabatize, constrained_frequency_projected, AdiabaticFrame, AdiabatizeOptions, DiabaticModel,
    FrequencyMode,
};
use crate::rng::{stream_rng, Stream};

/// One member of a trajectory ensemble: a phase point, the adiabatic index
/// pair it carries, the accumulated complex weight, and its RNG stream.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub x: PhasePoint,
    pub pair: (usize, usize),
    pub weight: Complex64,
    pub time: f64,
    pub rng_stream: u32,
}

impl TrajectoryState {
    pub fn new(x: PhasePoint, pair: (usize, usize), rng_stream: u32) -> Self {
        Self {
            x,
            pair,
            weight: Complex64::new(1.0, 0.0),
            time: 0.0,
            rng_stream,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorScheme {
    Rk4,
    VelocityVerletProjected,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: IntegratorScheme,
    /// Constraint drift above which a step is still accepted but flagged;
    /// ten times this rejects the step.
    pub constraint_tol: f64,
    pub max_hops: usize,
    pub frequency_mode: FrequencyMode,
    /// Project momenta back onto the constraint surface after accepted
    /// jumps. Off by default: the jump direction is dictated by the
    /// transition operator, and the residual violation is a reported
    /// observable, not something to hide.
    pub project_after_jump: bool,
    pub gap_floor: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            scheme: IntegratorScheme::Rk4,
            constraint_tol: 1e-8,
            max_hops: 10_000,
            frequency_mode: FrequencyMode::Projected,
            project_after_jump: false,
            gap_floor: 1e-10,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("integrator.dt", "must be > 0"));
        }
        if !(self.constraint_tol > 0.0) {
            return Err(Error::config("integrator.constraint_tol", "must be > 0"));
        }
        Ok(())
    }
}

fn constrained_rates(
    x: &PhasePoint,
    set: &ConstraintSet,
    forces: &dyn Fn(&PhasePoint) -> DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = forces(x);
    let lambda = lagrange_multipliers(set, x, &f)?;
    let mut pdot = f;
    for (a, c) in set.constraints().iter().enumerate() {
        pdot -= c.grad(x.r()) * lambda[a];
    }
    Ok((x.velocity(), pdot))
}

fn advance(x: &PhasePoint, dr: &DVector<f64>, dp: &DVector<f64>, s: f64) -> PhasePoint {
    x.with_r(x.r() + dr * s).with_p(x.p() + dp * s)
}

/// One integration step of the constrained classical flow
/// `Rdot = P/M`, `Pdot = F - sum_a lambda_a grad sigma_a`
/// with the exact multipliers evaluated inside every stage. The exact path
/// applies no projection; post-step drift is an integrator-quality
/// diagnostic and rejects the step when it exceeds ten times the tolerance.
pub fn constrained_classical_step(
    x: &PhasePoint,
    set: &ConstraintSet,
    forces: &dyn Fn(&PhasePoint) -> DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<PhasePoint> {
    let new = match cfg.scheme {
        IntegratorScheme::Rk4 => rk4_step(x, set, forces, cfg.dt)?,
        IntegratorScheme::VelocityVerletProjected => vv_projected_step(x, set, forces, cfg.dt)?,
    };
    let drift = set.max_violation(&new);
    if drift > 10.0 * cfg.constraint_tol {
        return Err(Error::StepRejected {
            drift,
            tol: cfg.constraint_tol,
        });
    }
    Ok(new)
}

fn rk4_step(
    x: &PhasePoint,
    set: &ConstraintSet,
    forces: &dyn Fn(&PhasePoint) -> DVector<f64>,
    dt: f64,
) -> Result<PhasePoint> {
    let (r1, p1) = constrained_rates(x, set, forces)?;
    let x2 = advance(x, &r1, &p1, 0.5 * dt);
    let (r2, p2) = constrained_rates(&x2, set, forces)?;
    let x3 = advance(x, &r2, &p2, 0.5 * dt);
    let (r3, p3) = constrained_rates(&x3, set, forces)?;
    let x4 = advance(x, &r3, &p3, dt);
    let (r4, p4) = constrained_rates(&x4, set, forces)?;
    let dr = (r1 + &r2 * 2.0 + &r3 * 2.0 + r4) * (dt / 6.0);
    let dp = (p1 + &p2 * 2.0 + &p3 * 2.0 + p4) * (dt / 6.0);
    Ok(x.with_r(x.r() + dr).with_p(x.p() + dp))
}

/// Velocity Verlet with multiplier forces plus position and momentum
/// projection after the step; the comparison path next to the exact one.
fn vv_projected_step(
    x: &PhasePoint,
    set: &ConstraintSet,
    forces: &dyn Fn(&PhasePoint) -> DVector<f64>,
    dt: f64,
) -> Result<PhasePoint> {
    let (_, pdot0) = constrained_rates(x, set, forces)?;
    let p_half = x.p() + pdot0 * (0.5 * dt);
    let x_half = x.with_p(p_half);
    let mut r_new = x.r() + x_half.velocity() * dt;
    if !set.is_empty() {
        let grads: Vec<DVector<f64>> =
            set.constraints().iter().map(|c| c.grad(x.r())).collect();
        r_new = project_position(set, &r_new, &grads, 1e-12, 50)?;
    }
    let x_drift = x_half.with_r(r_new);
    let (_, pdot1) = constrained_rates(&x_drift, set, forces)?;
    let x_new = x_drift.with_p(x_drift.p() + pdot1 * (0.5 * dt));
    if set.is_empty() {
        Ok(x_new)
    } else {
        project_momentum(set, &x_new)
    }
}

/// Helmholtz-free bookkeeping for one diagonal stretch of evolution.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub state: TrajectoryState,
    pub frame: AdiabaticFrame,
}

/// Evolve a trajectory diagonally on the surface pair for `duration`: the
/// bath moves under the mean of the two surface forces with the
/// pair-dependent multipliers, and the weight accumulates the transition
/// phase `exp(i integral omega_pair dt)`.
pub fn adiabatic_segment(
    state: &TrajectoryState,
    model: &DiabaticModel,
    set: &ConstraintSet,
    constants: &PhysicalConstants,
    cfg: &IntegratorConfig,
    duration: f64,
    frame_in: Option<&AdiabaticFrame>,
) -> Result<SegmentOutcome> {
    let opts = AdiabatizeOptions {
        hbar: constants.hbar,
        gap_floor: cfg.gap_floor,
    };
    let mut frame = match frame_in {
        Some(f) => f.clone(),
        None => adiabatize(model, state.x.r(), None, &opts)?,
    };
    let (alpha, alpha_p) = state.pair;
    let mut x = state.x.clone();
    let mut phase = 0.0;
    let mut remaining = duration;
    while remaining > 1e-15 {
        let dt = cfg.dt.min(remaining);
        let (x_new, dphase, frame_new) = match cfg.scheme {
            IntegratorScheme::Rk4 => {
                segment_rk4(&x, model, set, &frame, (alpha, alpha_p), dt, &opts)?
            }
            IntegratorScheme::VelocityVerletProjected => {
                segment_vv(&x, model, set, &frame, (alpha, alpha_p), dt, &opts)?
            }
        };
        let drift = set.max_violation(&x_new);
        if drift > 10.0 * cfg.constraint_tol {
            return Err(Error::StepRejected {
                drift,
                tol: cfg.constraint_tol,
            });
        }
        x = x_new;
        frame = frame_new;
        phase += dphase;
        remaining -= dt;
    }
    let mut out = state.clone();
    out.x = x;
    out.time += duration;
    out.weight *= Complex64::from_polar(1.0, phase);
    if !out.weight.is_finite() {
        return Err(Error::NonFinite {
            what: "trajectory weight",
            index: 0,
        });
    }
    Ok(SegmentOutcome { state: out, frame })
}

/// Rates for the pair flow at one stage point; returns `(rdot, pdot, omega)`.
fn pair_rates(
    x: &PhasePoint,
    model: &DiabaticModel,
    set: &ConstraintSet,
    ref_frame: &AdiabaticFrame,
    pair: (usize, usize),
    opts: &AdiabatizeOptions,
) -> Result<(DVector<f64>, DVector<f64>, f64, AdiabaticFrame)> {
    let frame = adiabatize(model, x.r(), Some(ref_frame), opts)?;
    let fbar = (&frame.surface_forces[pair.0] + &frame.surface_forces[pair.1]) * 0.5;
    let mut pdot = fbar.clone();
    if !set.is_empty() {
        let blocks = constraint_blocks(set, x)?;
        let lambda = multipliers_from_blocks(set, x, &fbar, &blocks);
        for (a, c) in set.constraints().iter().enumerate() {
            pdot -= c.grad(x.r()) * lambda[a];
        }
    }
    let omega = frame.omega[(pair.0, pair.1)];
    Ok((x.velocity(), pdot, omega, frame))
}

fn segment_rk4(
    x: &PhasePoint,
    model: &DiabaticModel,
    set: &ConstraintSet,
    frame: &AdiabaticFrame,
    pair: (usize, usize),
    dt: f64,
    opts: &AdiabatizeOptions,
) -> Result<(PhasePoint, f64, AdiabaticFrame)> {
    let (r1, p1, w1, _) = pair_rates(x, model, set, frame, pair, opts)?;
    let x2 = advance(x, &r1, &p1, 0.5 * dt);
    let (r2, p2, w2, _) = pair_rates(&x2, model, set, frame, pair, opts)?;
    let x3 = advance(x, &r2, &p2, 0.5 * dt);
    let (r3, p3, w3, _) = pair_rates(&x3, model, set, frame, pair, opts)?;
    let x4 = advance(x, &r3, &p3, dt);
    let (r4, p4, w4, _) = pair_rates(&x4, model, set, frame, pair, opts)?;
    let dr = (r1 + &r2 * 2.0 + &r3 * 2.0 + r4) * (dt / 6.0);
    let dp = (p1 + &p2 * 2.0 + &p3 * 2.0 + p4) * (dt / 6.0);
    let dphase = dt / 6.0 * (w1 + 2.0 * w2 + 2.0 * w3 + w4);
    let x_new = x.with_r(x.r() + dr).with_p(x.p() + dp);
    let frame_new = adiabatize(model, x_new.r(), Some(frame), opts)?;
    Ok((x_new, dphase, frame_new))
}

fn segment_vv(
    x: &PhasePoint,
    model: &DiabaticModel,
    set: &ConstraintSet,
    frame: &AdiabaticFrame,
    pair: (usize, usize),
    dt: f64,
    opts: &AdiabatizeOptions,
) -> Result<(PhasePoint, f64, AdiabaticFrame)> {
    let (_, pdot0, w0, _) = pair_rates(x, model, set, frame, pair, opts)?;
    let x_half = x.with_p(x.p() + pdot0 * (0.5 * dt));
    let mut r_new = x.r() + x_half.velocity() * dt;
    if !set.is_empty() {
        let grads: Vec<DVector<f64>> =
            set.constraints().iter().map(|c| c.grad(x.r())).collect();
        r_new = project_position(set, &r_new, &grads, 1e-12, 50)?;
    }
    let x_drift = x_half.with_r(r_new);
    let (_, pdot1, w1, frame_new) = pair_rates(&x_drift, model, set, frame, pair, opts)?;
    let mut x_new = x_drift.with_p(x_drift.p() + pdot1 * (0.5 * dt));
    if !set.is_empty() {
        x_new = project_momentum(set, &x_new)?;
    }
    Ok((x_new, 0.5 * dt * (w0 + w1), frame_new))
}

/// Translate momenta along a unit direction so the squared projection
/// changes by exactly `shift = hbar M omega^D`:
/// `P' . dhat = sign(P . dhat) sqrt((P . dhat)^2 + shift)`.
/// A negative argument is a frustrated jump and leaves the caller to veto
/// the transition.
pub fn momentum_jump(
    x: &PhasePoint,
    d_hat: &DVector<f64>,
    hbar_m_omega_d: f64,
) -> Result<PhasePoint> {
    let norm = d_hat.norm();
    if norm == 0.0 {
        return Err(Error::NonFinite {
            what: "jump direction",
            index: 0,
        });
    }
    let unit = d_hat / norm;
    let along = x.p().dot(&unit);
    let arg = along * along + hbar_m_omega_d;
    if arg < 0.0 {
        return Err(Error::FrustratedHop { value: arg });
    }
    let delta = along.signum() * arg.sqrt() - along;
    Ok(x.with_p(x.p() + unit * delta))
}

/// What one transition-sampling call did to the trajectory.
#[derive(Debug, Clone)]
pub struct HopOutcome {
    pub state: TrajectoryState,
    pub hops: usize,
    pub frustrated: usize,
}

/// Importance-sampled action of the transition operator over one `dt`.
///
/// Each density-matrix index is offered a switch with probability
/// `pi = |tau dt| / (1 + |tau dt|)`, `tau = (P/M) . d`. On a hop the index
/// switches, the momenta jump with the constrained frequency in the
/// configured mode, and the weight gains `tau dt / pi`; on no hop it gains
/// `1/(1 - pi)`; the branch average is unbiased. Frustrated jumps veto the
/// transition and keep the no-hop weight.
pub fn hop_decision(
    state: &TrajectoryState,
    frame: &AdiabaticFrame,
    set: &ConstraintSet,
    constants: &PhysicalConstants,
    cfg: &IntegratorConfig,
    dt: f64,
    rng: &mut impl rand::Rng,
) -> Result<HopOutcome> {
    let n = frame.n_states();
    let mut out = state.clone();
    let mut hops = 0;
    let mut frustrated = 0;

    for channel in 0..2 {
        let from = if channel == 0 { out.pair.0 } else { out.pair.1 };
        // Candidate switches for this index with their sampling rates.
        let mut taus = Vec::with_capacity(n - 1);
        let mut total = 0.0;
        let vel = out.x.velocity();
        for beta in 0..n {
            if beta == from {
                continue;
            }
            let tau = vel.dot(&frame.couplings[from][beta]);
            if tau != 0.0 {
                taus.push((beta, tau));
                total += tau.abs();
            }
        }
        if total * dt <= 0.0 {
            continue;
        }
        let pi = (total * dt) / (1.0 + total * dt);
        if rng.gen::<f64>() < pi {
            // Pick the target within the channel by relative rate.
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = taus[0];
            for &(beta, tau) in &taus {
                pick -= tau.abs();
                chosen = (beta, tau);
                if pick <= 0.0 {
                    break;
                }
            }
            let (beta, tau) = chosen;
            match apply_jump(&out.x, frame, set, cfg, constants, from, beta) {
                Ok(x_new) => {
                    let branch_prob = pi * tau.abs() / total;
                    out.weight *= Complex64::new(tau * dt / branch_prob, 0.0);
                    out.x = x_new;
                    if channel == 0 {
                        out.pair.0 = beta;
                    } else {
                        out.pair.1 = beta;
                    }
                    hops += 1;
                }
                Err(Error::FrustratedHop { .. }) => {
                    out.weight *= Complex64::new(1.0 / (1.0 - pi), 0.0);
                    frustrated += 1;
                }
                Err(e) => return Err(e),
            }
        } else {
            out.weight *= Complex64::new(1.0 / (1.0 - pi), 0.0);
        }
    }
    if !out.weight.is_finite() {
        return Err(Error::NonFinite {
            what: "trajectory weight",
            index: 0,
        });
    }
    Ok(HopOutcome {
        state: out,
        hops,
        frustrated,
    })
}

/// Builds the jump direction and shift for a `from -> to` switch and applies
/// the momentum translation.
fn apply_jump(
    x: &PhasePoint,
    frame: &AdiabaticFrame,
    set: &ConstraintSet,
    cfg: &IntegratorConfig,
    constants: &PhysicalConstants,
    from: usize,
    to: usize,
) -> Result<PhasePoint> {
    let d = &frame.couplings[from][to];
    let omega = frame.omega[(from, to)];
    let v = match cfg.frequency_mode {
        FrequencyMode::Literal => d * (1.0 + set.len() as f64),
        FrequencyMode::Projected => {
            constrained_frequency_projected(frame, from, to, set, x)? / non_zero(omega)?
        }
    };
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Err(Error::FrustratedHop { value: 0.0 });
    }
    let e_hat = v / vnorm;
    let along = x.p().dot(&e_hat);
    let rate = x.velocity().dot(d);
    if rate.abs() < 1e-300 {
        return Err(Error::FrustratedHop { value: f64::NEG_INFINITY });
    }
    // Shift chosen so the translated operator reproduces the first-order
    // action of the transition term; for uniform masses and the literal
    // mode this is exactly hbar M omega (1 + l).
    let shift = constants.hbar * omega * vnorm * along / rate;
    let jumped = momentum_jump(x, &e_hat, shift)?;
    if cfg.project_after_jump && !set.is_empty() {
        project_momentum(set, &jumped)
    } else {
        Ok(jumped)
    }
}

fn non_zero(omega: f64) -> Result<f64> {
    if omega == 0.0 {
        Err(Error::FrustratedHop { value: 0.0 })
    } else {
        Ok(omega)
    }
}

/// Matrix element of an observable between adiabatic states at a phase
/// point: `(U^T chi(X) U)[pair]`.
pub fn observable_element(
    obs: &MatrixPhaseFunction,
    x: &PhasePoint,
    frame: &AdiabaticFrame,
    pair: (usize, usize),
) -> Complex64 {
    let m = obs.evaluate(x);
    let ua = frame.basis.column(pair.0);
    let ub = frame.basis.column(pair.1);
    let mut acc = Complex64::new(0.0, 0.0);
    for p in 0..m.nrows() {
        for q in 0..m.ncols() {
            acc += Complex64::new(ua[p] * ub[q], 0.0) * m[(p, q)];
        }
    }
    acc
}

/// Full per-trajectory record on the requested time grid.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// `values[time][observable]`, already weight-multiplied.
    pub values: Vec<Vec<Complex64>>,
    pub hops: Vec<usize>,
    pub max_violation: Vec<f64>,
    /// Index of the first grid time the trajectory could not reach.
    pub truncated_at: Option<usize>,
}

/// Evolve a single trajectory through the time grid, recording weighted
/// observable matrix elements at every grid point. The trajectory draws from
/// the stream addressed by `(seed, rng_stream)` and nothing else.
pub fn run_trajectory(
    initial: &TrajectoryState,
    seed: u64,
    model: &DiabaticModel,
    set: &ConstraintSet,
    constants: &PhysicalConstants,
    cfg: &IntegratorConfig,
    observables: &[MatrixPhaseFunction],
    times: &[f64],
) -> TrajectoryRecord {
    let n_t = times.len();
    let mut record = TrajectoryRecord {
        values: Vec::with_capacity(n_t),
        hops: Vec::with_capacity(n_t),
        max_violation: Vec::with_capacity(n_t),
        truncated_at: None,
    };
    let opts = AdiabatizeOptions {
        hbar: constants.hbar,
        gap_floor: cfg.gap_floor,
    };
    let mut rng = stream_rng(seed, Stream::Trajectory(initial.rng_stream));
    let mut state = initial.clone();
    let mut frame = match adiabatize(model, state.x.r(), None, &opts) {
        Ok(f) => f,
        Err(_) => {
            record.truncated_at = Some(0);
            return record;
        }
    };
    let mut total_hops = 0usize;
    let mut worst = set.max_violation(&state.x);

    for (t_idx, &target) in times.iter().enumerate() {
        while state.time < target - 1e-12 {
            let chunk = cfg.dt.min(target - state.time);
            let seg = match adiabatic_segment(&state, model, set, constants, cfg, chunk, Some(&frame))
            {
                Ok(s) => s,
                Err(_) => {
                    record.truncated_at = Some(t_idx);
                    return record;
                }
            };
            state = seg.state;
            frame = seg.frame;
            let hop = match hop_decision(&state, &frame, set, constants, cfg, chunk, &mut rng) {
                Ok(h) => h,
                Err(_) => {
                    record.truncated_at = Some(t_idx);
                    return record;
                }
            };
            total_hops += hop.hops;
            state = hop.state;
            if total_hops > cfg.max_hops {
                record.truncated_at = Some(t_idx);
                return record;
            }
            worst = worst.max(set.max_violation(&state.x));
        }
        let row: Vec<Complex64> = observables
            .iter()
            .map(|o| state.weight * observable_element(o, &state.x, &frame, state.pair))
            .collect();
        record.values.push(row);
        record.hops.push(total_hops);
        record.max_violation.push(worst);
    }
    record
}

/// Ensemble averages with standard errors on a time grid.
#[derive(Debug, Clone)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    /// `mean[time][observable]`.
    pub mean: Vec<Vec<Complex64>>,
    /// Standard errors of the real and imaginary parts.
    pub stderr_re: Vec<Vec<f64>>,
    pub stderr_im: Vec<Vec<f64>>,
    pub mean_hops: Vec<f64>,
    pub max_violation: Vec<f64>,
    pub alive: Vec<usize>,
    pub truncated: usize,
}

/// Deterministic pairwise-tree sum; the reduction order depends only on the
/// slice order, never on worker count.
pub fn pairwise_sum<T>(v: &[T]) -> T
where
    T: Copy + std::ops::Add<Output = T> + Default,
{
    match v.len() {
        0 => T::default(),
        1 => v[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Propagate an ensemble of trajectories in parallel and average the
/// weighted observable elements at each requested time. The reduction is a
/// fixed pairwise tree over trajectory index, so the result is bitwise
/// independent of the worker count.
pub fn propagate_ensemble(
    initial: &[TrajectoryState],
    seed: u64,
    model: &DiabaticModel,
    set: &ConstraintSet,
    constants: &PhysicalConstants,
    cfg: &IntegratorConfig,
    observables: &[MatrixPhaseFunction],
    times: &[f64],
) -> Result<EnsembleSeries> {
    cfg.validate()?;
    let records: Vec<TrajectoryRecord> = initial
        .par_iter()
        .map(|s| run_trajectory(s, seed, model, set, constants, cfg, observables, times))
        .collect();

    let n_t = times.len();
    let n_o = observables.len();
    let mut series = EnsembleSeries {
        times: times.to_vec(),
        mean: vec![vec![Complex64::default(); n_o]; n_t],
        stderr_re: vec![vec![0.0; n_o]; n_t],
        stderr_im: vec![vec![0.0; n_o]; n_t],
        mean_hops: vec![0.0; n_t],
        max_violation: vec![0.0; n_t],
        alive: vec![0; n_t],
        truncated: records.iter().filter(|r| r.truncated_at.is_some()).count(),
    };

    for t_idx in 0..n_t {
        let alive: Vec<&TrajectoryRecord> = records
            .iter()
            .filter(|r| r.values.len() > t_idx)
            .collect();
        let k = alive.len();
        series.alive[t_idx] = k;
        if k == 0 {
            if t_idx == 0 {
                return Err(Error::AllTrajectoriesTruncated {
                    count: records.len(),
                });
            }
            continue;
        }
        let kf = k as f64;
        for o in 0..n_o {
            let vals: Vec<Complex64> = alive.iter().map(|r| r.values[t_idx][o]).collect();
            let mean = pairwise_sum(&vals) / kf;
            series.mean[t_idx][o] = mean;
            if k > 1 {
                let dev_re: Vec<f64> = vals.iter().map(|v| (v.re - mean.re).powi(2)).collect();
                let dev_im: Vec<f64> = vals.iter().map(|v| (v.im - mean.im).powi(2)).collect();
                series.stderr_re[t_idx][o] =
                    (pairwise_sum(&dev_re) / (kf * (kf - 1.0))).sqrt();
                series.stderr_im[t_idx][o] =
                    (pairwise_sum(&dev_im) / (kf * (kf - 1.0))).sqrt();
            }
        }
        let hops: Vec<f64> = alive.iter().map(|r| r.hops[t_idx] as f64).collect();
        series.mean_hops[t_idx] = pairwise_sum(&hops) / kf;
        series.max_violation[t_idx] = alive
            .iter()
            .map(|r| r.max_violation[t_idx])
            .fold(0.0, f64::max);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::dimer_bond;
    use crate::quantum::{two_level_constant, two_level_linear};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn dimer_set() -> ConstraintSet {
        ConstraintSet::new(vec![dimer_bond(2, 1.0)], DVector::from_element(4, 1.0)).unwrap()
    }

    fn rotor_point() -> PhasePoint {
        PhasePoint::with_uniform_mass(
            DVector::from_row_slice(&[0.5, 0.0, -0.5, 0.0]),
            DVector::from_row_slice(&[0.0, 0.5, 0.0, -0.5]),
            1.0,
        )
        .unwrap()
    }

    fn constants() -> PhysicalConstants {
        PhysicalConstants::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn free_rigid_dimer_is_a_rigid_rotor() {
        let set = dimer_set();
        let cfg = IntegratorConfig::default();
        let forces = |x: &PhasePoint| DVector::zeros(x.n_dof());
        let mut x = rotor_point();
        let ke0 = x.kinetic_energy();
        let steps = 5000;
        for _ in 0..steps {
            x = constrained_classical_step(&x, &set, &forces, &cfg).unwrap();
        }
        let t = steps as f64 * cfg.dt;
        // Relative coordinate rotates at angular velocity |v_rel| / a = 1.
        let angle = t;
        let expected_r1 = DVector::from_row_slice(&[0.5 * angle.cos(), 0.5 * angle.sin()]);
        assert_relative_eq!(x.r()[0], expected_r1[0], epsilon = 1e-8);
        assert_relative_eq!(x.r()[1], expected_r1[1], epsilon = 1e-8);
        assert!(set.max_violation(&x) < 1e-10);
        assert_relative_eq!(x.kinetic_energy(), ke0, epsilon = 1e-10);
    }

    #[test]
    fn rest_point_is_fixed() {
        let set = dimer_set();
        let cfg = IntegratorConfig::default();
        let forces = |x: &PhasePoint| DVector::zeros(x.n_dof());
        let x0 = rotor_point().with_p(DVector::zeros(4));
        let x1 = constrained_classical_step(&x0, &set, &forces, &cfg).unwrap();
        assert_eq!(x0.r(), x1.r());
        assert_eq!(x0.p(), x1.p());
    }

    #[test]
    fn unconstrained_step_matches_plain_rk4() {
        // l = 0 takes the same code path with empty multipliers; the result
        // must agree with a hand-rolled plain RK4 on the oscillator.
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let cfg = IntegratorConfig::default();
        let forces = |x: &PhasePoint| -x.r().clone();
        let x0 = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
            1.0,
        )
        .unwrap();
        let lib = constrained_classical_step(&x0, &set, &forces, &cfg).unwrap();

        let f = |r: f64, p: f64| (p, -r);
        let dt = cfg.dt;
        let (r0, p0) = (1.0, 0.0);
        let (k1r, k1p) = f(r0, p0);
        let (k2r, k2p) = f(r0 + 0.5 * dt * k1r, p0 + 0.5 * dt * k1p);
        let (k3r, k3p) = f(r0 + 0.5 * dt * k2r, p0 + 0.5 * dt * k2p);
        let (k4r, k4p) = f(r0 + dt * k3r, p0 + dt * k3p);
        let r1 = r0 + dt / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        let p1 = p0 + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        assert_relative_eq!(lib.r()[0], r1, epsilon = 1e-15);
        assert_relative_eq!(lib.p()[0], p1, epsilon = 1e-15);
    }

    #[test]
    fn vv_projected_stays_on_manifold() {
        let set = dimer_set();
        let cfg = IntegratorConfig {
            scheme: IntegratorScheme::VelocityVerletProjected,
            dt: 1e-2,
            ..Default::default()
        };
        let forces = |x: &PhasePoint| DVector::zeros(x.n_dof());
        let mut x = rotor_point();
        for _ in 0..500 {
            x = constrained_classical_step(&x, &set, &forces, &cfg).unwrap();
        }
        assert!(set.max_violation(&x) < 1e-10);
    }

    #[test]
    fn diagonal_segment_accumulates_no_phase() {
        let set = dimer_set();
        let model = two_level_linear(4, 0, 0.4, 0.3, 0.0);
        let cfg = IntegratorConfig::default();
        let state = TrajectoryState::new(rotor_point(), (0, 0), 0);
        let out = adiabatic_segment(&state, &model, &set, &constants(), &cfg, 0.25, None).unwrap();
        assert_relative_eq!(out.state.weight.re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.state.weight.im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_gap_segment_phase_is_exact() {
        // Constant diabatic matrix: gap 2 sqrt(eps^2 + delta^2), no forces.
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let model = two_level_constant(1, 0.3, 0.4, 0.0);
        let cfg = IntegratorConfig::default();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 0.2),
            DVector::from_element(1, 0.1),
            1.0,
        )
        .unwrap();
        let state = TrajectoryState::new(x, (1, 0), 0);
        let t = 0.7;
        let out = adiabatic_segment(&state, &model, &set, &constants(), &cfg, t, None).unwrap();
        let gap = 2.0 * (0.3f64 * 0.3 + 0.4 * 0.4).sqrt();
        let expected = Complex64::from_polar(1.0, gap * t);
        assert_relative_eq!(out.state.weight.re, expected.re, epsilon = 1e-12);
        assert_relative_eq!(out.state.weight.im, expected.im, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_pair_multipliers_match_classical() {
        let set = dimer_set();
        let model = two_level_linear(4, 0, 0.4, 0.3, 0.1);
        let x = rotor_point();
        let frame =
            adiabatize(&model, x.r(), None, &AdiabatizeOptions::default()).unwrap();
        let alpha = 0usize;
        let f_alpha = frame.surface_forces[alpha].clone();
        let classical = lagrange_multipliers(&set, &x, &f_alpha).unwrap();
        // Pair (alpha, alpha) mean force is F^alpha itself.
        let blocks = constraint_blocks(&set, &x).unwrap();
        let pair_lambda = multipliers_from_blocks(&set, &x, &f_alpha, &blocks);
        assert_relative_eq!(classical[0], pair_lambda[0], epsilon = 1e-13);
    }

    #[test]
    fn momentum_jump_examples() {
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 3.0),
            1.0,
        )
        .unwrap();
        let d = DVector::from_element(1, 1.0);
        // Zero shift leaves momenta untouched.
        let same = momentum_jump(&x, &d, 0.0).unwrap();
        assert_eq!(same.p()[0], 3.0);
        // (3)^2 + 7 = 16 -> P' . d = 4.
        let up = momentum_jump(&x, &d, 7.0).unwrap();
        assert_relative_eq!(up.p()[0], 4.0, epsilon = 1e-14);
        // 9 - 16 < 0 is frustrated.
        assert!(matches!(
            momentum_jump(&x, &d, -16.0),
            Err(Error::FrustratedHop { .. })
        ));
    }

    #[test]
    fn momentum_jump_exactness_property() {
        use rand::Rng;
        let mut rng = stream_rng(99, Stream::Check(0));
        for _ in 0..10_000 {
            let n = 4;
            let p = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let x = PhasePoint::with_uniform_mass(DVector::zeros(n), p, 1.0).unwrap();
            let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let shift = rng.gen_range(-4.0..4.0);
            let along = x.p().dot(&d);
            match momentum_jump(&x, &d, shift) {
                Ok(xp) => {
                    let after = xp.p().dot(&d);
                    let defect = (after * after - along * along - shift).abs();
                    assert!(defect <= 1e-12, "jump exactness defect {defect}");
                }
                Err(Error::FrustratedHop { .. }) => {
                    assert!(along * along + shift < 0.0);
                }
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
    }

    #[test]
    fn no_hops_without_coupling() {
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let model = two_level_constant(1, 0.5, 0.2, 1.0);
        let cfg = IntegratorConfig::default();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.3),
            1.0,
        )
        .unwrap();
        let state = TrajectoryState::new(x, (0, 0), 7);
        let frame =
            adiabatize(&model, state.x.r(), None, &AdiabatizeOptions::default()).unwrap();
        let mut rng = stream_rng(1, Stream::Trajectory(7));
        for _ in 0..1000 {
            let out = hop_decision(&state, &frame, &set, &constants(), &cfg, cfg.dt, &mut rng)
                .unwrap();
            assert_eq!(out.hops, 0);
            assert_eq!(out.state.pair, (0, 0));
            assert_eq!(out.state.weight, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn hop_sampling_is_unbiased_against_operator_action() {
        // One splitting step: the branch average of the sampled transition
        // must match the deterministic short-time action of the transition
        // operator (in the jump approximation) on a test observable.
        use rand::Rng;
        let set = dimer_set();
        let model = two_level_linear(4, 0, 0.8, 0.4, 0.0);
        let cfg = IntegratorConfig::default();
        let cs = constants();
        // Large momenta with a surviving component along the coupling
        // direction avoid frustration, so every branch is realizable.
        let x = rotor_point().with_p(DVector::from_row_slice(&[3.0, 1.5, 3.0, 2.5]));
        let x = project_momentum(&set, &x).unwrap();
        let state = TrajectoryState::new(x.clone(), (0, 0), 0);
        let frame =
            adiabatize(&model, state.x.r(), None, &AdiabatizeOptions::default()).unwrap();
        let dt = 0.02;

        // Observable with off-diagonal structure in the adiabatic basis.
        let obs = MatrixPhaseFunction::new(2, |x: &PhasePoint| {
            let mut m = DMatrix::zeros(2, 2);
            m[(0, 0)] = Complex64::new(x.r()[0] + 0.3 * x.p()[1], 0.0);
            m[(1, 1)] = Complex64::new(1.0 - x.r()[2], 0.0);
            m[(0, 1)] = Complex64::new(0.7, 0.0);
            m[(1, 0)] = Complex64::new(0.7, 0.0);
            m
        });

        // Deterministic short-time action.
        let vel = state.x.velocity();
        let mut expected = observable_element(&obs, &state.x, &frame, (0, 0));
        for target_pair in [(1usize, 0usize), (0, 1)] {
            // Both channels start from state 0 of the diagonal pair.
            let tau = vel.dot(&frame.couplings[0][1]);
            let xj = apply_jump(&state.x, &frame, &set, &cfg, &cs, 0, 1).unwrap();
            expected += Complex64::new(tau * dt, 0.0)
                * observable_element(&obs, &xj, &frame, target_pair);
        }

        let n_samples = 1_000_000;
        let mut acc = Complex64::default();
        let mut acc2 = 0.0;
        let mut rng = stream_rng(12345, Stream::Check(1));
        for _ in 0..n_samples {
            let out =
                hop_decision(&state, &frame, &set, &cs, &cfg, dt, &mut rng).unwrap();
            let v = out.state.weight
                * observable_element(&obs, &out.state.x, &frame, out.state.pair);
            acc += v;
            acc2 += v.re * v.re;
        }
        let mean = acc / n_samples as f64;
        let var = (acc2 / n_samples as f64 - mean.re * mean.re).max(0.0);
        let se = (var / n_samples as f64).sqrt();
        let dev = (mean.re - expected.re).abs();
        assert!(
            dev <= 3.0 * se + 1e-4,
            "MC mean {} vs operator action {} (3se = {})",
            mean.re,
            expected.re,
            3.0 * se
        );
    }

    #[test]
    fn ensemble_identity_observable_is_unity() {
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let model = two_level_linear(1, 0, 0.5, 0.3, 0.5);
        let cfg = IntegratorConfig {
            dt: 5e-3,
            ..Default::default()
        };
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 0.4),
            DVector::from_element(1, 1.2),
            1.0,
        )
        .unwrap();
        let initial: Vec<TrajectoryState> = (0..64)
            .map(|i| TrajectoryState::new(x.clone(), (0, 0), i))
            .collect();
        let identity = MatrixPhaseFunction::constant(DMatrix::identity(2, 2));
        let times = [0.0, 0.5, 1.0];
        let series = propagate_ensemble(
            &initial,
            42,
            &model,
            &set,
            &constants(),
            &cfg,
            &[identity],
            &times,
        )
        .unwrap();
        for (t_idx, _) in times.iter().enumerate() {
            let m = series.mean[t_idx][0];
            let se = series.stderr_re[t_idx][0].max(1e-12);
            assert!(
                (m.re - 1.0).abs() <= 4.0 * se + 1e-9,
                "identity mean {} at t index {t_idx} (se {se})",
                m.re
            );
        }
    }

    #[test]
    fn zero_coupling_population_stays_put() {
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let model = two_level_constant(1, 0.5, 0.2, 1.0);
        let cfg = IntegratorConfig::default();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
            1.0,
        )
        .unwrap();
        let initial: Vec<TrajectoryState> =
            (0..8).map(|i| TrajectoryState::new(x.clone(), (0, 0), i)).collect();
        // Population of adiabatic state 0 as a fixed-basis projector.
        let model_for_obs = model.clone();
        let pop0 = MatrixPhaseFunction::new(2, move |x: &PhasePoint| {
            let f = adiabatize(&model_for_obs, x.r(), None, &AdiabatizeOptions::default())
                .unwrap();
            let u0 = f.basis.column(0);
            DMatrix::from_fn(2, 2, |p, q| Complex64::new(u0[p] * u0[q], 0.0))
        });
        let times = [0.0, 1.0, 2.0];
        let series =
            propagate_ensemble(&initial, 42, &model, &set, &constants(), &cfg, &[pop0], &times)
                .unwrap();
        for t_idx in 0..times.len() {
            assert_relative_eq!(series.mean[t_idx][0].re, 1.0, epsilon = 1e-10);
            assert_eq!(series.mean_hops[t_idx], 0.0);
        }
    }

    #[test]
    fn single_surface_oscillator_matches_analytic_mean() {
        let set = ConstraintSet::unconstrained(DVector::from_element(1, 1.0));
        let model = two_level_constant(1, 0.5, 0.2, 1.0);
        let cfg = IntegratorConfig::default();
        let x = PhasePoint::with_uniform_mass(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
            1.0,
        )
        .unwrap();
        let initial = vec![TrajectoryState::new(x, (0, 0), 0)];
        let pos = MatrixPhaseFunction::scalar_times_identity(
            &crate::phase::ScalarPhaseFunction::position(0),
            2,
        );
        let times: Vec<f64> = (0..=10).map(|k| 0.3 * k as f64).collect();
        let series =
            propagate_ensemble(&initial, 42, &model, &set, &constants(), &cfg, &[pos], &times)
                .unwrap();
        for (t_idx, &t) in times.iter().enumerate() {
            assert_relative_eq!(series.mean[t_idx][0].re, t.cos(), epsilon = 1e-4);
        }
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let v: Vec<f64> = (0..101).map(|i| (i as f64) * 0.37 - 11.0).collect();
        let seq: f64 = v.iter().sum();
        assert_relative_eq!(pairwise_sum(&v), seq, epsilon = 1e-9);
    }
}
