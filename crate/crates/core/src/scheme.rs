//! Numerical schemes for the modified Cahn-Hilliard system: the TFPM
//! Laplacian, the v-step / forward-Euler u-step pair, the step-count
//! evolution driver, and the stability-estimate diagnostic.
//!
//! The coupled form advanced here is
//!   v^n     = eps1 * Lap(u^n) - W'(u^n) / eps2
//!   u^{n+1} = u^n - tau * Lap(v^n) - tau * F
//! where `Lap(u)` is either the tailored-finite-point stencil or the 5-point
//! kernel, and `Lap(v)` is always the 5-point kernel.

use crate::error::{Error, Result};
use crate::field::{
    double_well_prime, double_well_second, laplacian_fdm, pad, ScalarField,
};
use serde::{Deserialize, Serialize};

/// Which Laplacian approximation the v-step uses for u.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Tailored finite point stencil built from local exponential solutions.
    Tfpm,
    /// Plain 5-point central difference.
    Fdm,
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemeKind::Tfpm => write!(f, "tfpm"),
            SchemeKind::Fdm => write!(f, "fdm"),
        }
    }
}

/// Scalar coefficients of the modified Cahn-Hilliard model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CHParams {
    /// Interface coefficient eps1 > 0.
    pub eps1: f64,
    /// Well scale eps2 > 0.
    pub eps2: f64,
    /// Arctan width eps3 > 0 of the force weighting.
    pub eps3: f64,
    /// Foreground fidelity weight, >= 0.
    pub lambda1: f64,
    /// Background fidelity weight, >= 0.
    pub lambda2: f64,
    /// Time step tau > 0.
    pub tau: f64,
    /// Grid spacing h > 0.
    pub h: f64,
    /// Number of steps / blocks, >= 1.
    pub m: usize,
}

impl CHParams {
    pub fn new(
        eps1: f64,
        eps2: f64,
        eps3: f64,
        lambda1: f64,
        lambda2: f64,
        tau: f64,
        h: f64,
        m: usize,
    ) -> Result<Self> {
        let p = CHParams { eps1, eps2, eps3, lambda1, lambda2, tau, h, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("eps3", self.eps3),
            ("tau", self.tau),
            ("h", self.h),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.m < 1 {
            return Err(Error::InvalidParam("m must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for CHParams {
    /// Classical-solver defaults; tau = 0.01 sits inside the explicit
    /// biharmonic stability bound h^4 / (32 eps1) at h = 1.
    fn default() -> Self {
        CHParams {
            eps1: 1.0,
            eps2: 1.0,
            eps3: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.01,
            h: 1.0,
            m: 20,
        }
    }
}

/// Closed-form TFPM constants for a center value u:
/// lambda = sqrt((4u^2 + 2) / (eps1 eps2)), c0 = 6u^2 / (4u^2 + 2).
#[inline]
pub fn tfpm_lambda_c0(u: f64, eps1: f64, eps2: f64) -> (f64, f64) {
    let g = 4.0 * u * u + 2.0;
    let lambda = (g / (eps1 * eps2)).sqrt();
    let c0 = 6.0 * u * u / g;
    (lambda, c0)
}

/// Tailored-finite-point Laplacian: per cell, constants from the center value,
/// four neighbors gathered under the field's bc, stencil
/// lambda^2 (sum(neighbors) - 4 c0) / (4 cosh^2(lambda h / 2)).
pub fn tfpm_laplacian(u: &ScalarField, eps1: f64, eps2: f64, h: f64) -> ScalarField {
    assert!(eps1 > 0.0 && eps2 > 0.0 && h > 0.0);
    let p = pad(u, 1);
    ScalarField::from_fn(u.height(), u.width(), u.bc(), |i, j| {
        let c = p.get(i + 1, j + 1);
        let (lambda, c0) = tfpm_lambda_c0(c, eps1, eps2);
        let n = p.get(i, j + 1) + p.get(i + 2, j + 1) + p.get(i + 1, j) + p.get(i + 1, j + 2);
        let ch = (lambda * h / 2.0).cosh();
        lambda * lambda * (n - 4.0 * c0) / (4.0 * ch * ch)
    })
}

/// v^n = eps1 * Lap(u^n) - W'(u^n) / eps2; TFPM replaces only the Laplacian.
pub fn v_step(u: &ScalarField, p: &CHParams, scheme: SchemeKind) -> ScalarField {
    let lap = match scheme {
        SchemeKind::Tfpm => tfpm_laplacian(u, p.eps1, p.eps2, p.h),
        SchemeKind::Fdm => laplacian_fdm(u, p.h),
    };
    lap.zip_map(u, |l, uv| p.eps1 * l - double_well_prime(uv) / p.eps2)
}

/// One forward-Euler step: u - tau * Lap(v) - tau * F. The Laplacian of v is
/// always the 5-point kernel.
pub fn u_step(
    u: &ScalarField,
    v: &ScalarField,
    force: &ScalarField,
    p: &CHParams,
) -> Result<ScalarField> {
    if (u.height(), u.width()) != (v.height(), v.width())
        || (u.height(), u.width()) != (force.height(), force.width())
    {
        return Err(Error::ShapeMismatch(format!(
            "u {}x{}, v {}x{}, F {}x{}",
            u.height(),
            u.width(),
            v.height(),
            v.width(),
            force.height(),
            force.width()
        )));
    }
    let lap_v = laplacian_fdm(v, p.h);
    let mut out = u.clone();
    let (o, lv, fv) = (out.values_mut(), lap_v.values(), force.values());
    for k in 0..o.len() {
        o[k] -= p.tau * (lv[k] + fv[k]);
    }
    Ok(out)
}

/// Divergence guard applied after every u-step.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Raw per-step norms recorded while evolving; feeds [`stability_constants`].
#[derive(Debug, Clone)]
pub struct EvolveTrace {
    /// ||u^n||^2 for n = 0..=M (discrete L2, h^2-weighted).
    pub state_norm_sq: Vec<f64>,
    /// ||Lap u^n||^2 for n = 0..=M.
    pub state_lap_norm_sq: Vec<f64>,
    /// ||F^n||^2 per step.
    pub force_norm_sq: Vec<f64>,
    /// ||Lap u^{n+1} - Lap u^n||^2 per step.
    pub lap_diff_sq: Vec<f64>,
    /// Observed value range of u across all recorded states.
    pub u_min: f64,
    pub u_max: f64,
    pub h: f64,
}

impl EvolveTrace {
    fn new(h: f64) -> Self {
        EvolveTrace {
            state_norm_sq: Vec::new(),
            state_lap_norm_sq: Vec::new(),
            force_norm_sq: Vec::new(),
            lap_diff_sq: Vec::new(),
            u_min: f64::INFINITY,
            u_max: f64::NEG_INFINITY,
            h,
        }
    }

    fn record_state(&mut self, u: &ScalarField, lap: &ScalarField) {
        self.state_norm_sq.push(u.norm_sq(self.h));
        self.state_lap_norm_sq.push(lap.norm_sq(self.h));
        let (lo, hi) = u.min_max();
        self.u_min = self.u_min.min(lo);
        self.u_max = self.u_max.max(hi);
    }

    pub fn steps(&self) -> usize {
        self.force_norm_sq.len()
    }
}

/// One row of the stability-inequality check for the transition n -> n+1.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// ||u^{n+1}||^2
    pub norm_u_sq: f64,
    /// ||Lap u^{n+1}||^2
    pub norm_lap_u_sq: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Constants and per-step records of the discrete stability estimate
/// A||u^{n+1}||^2 + B||Lap u^{n+1}||^2 <= D(||u^n||^2 + ||Lap u^n||^2) + C.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Empirical Lipschitz bound L of W' over the observed u range.
    pub lipschitz: f64,
    /// M_F = max over steps of ||F^n||.
    pub max_force_norm: f64,
    /// C_Delta = max over steps of ||Lap u^{n+1} - Lap u^n||^2.
    pub c_delta: f64,
    pub steps: Vec<StepRecord>,
    pub all_hold: bool,
}

impl StabilityReport {
    /// CSV serialization: step, norm_u, norm_lap_u, lhs, rhs, holds.
    /// Norm columns carry the squared discrete L2 norms used in the inequality.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,norm_u,norm_lap_u,lhs,rhs,holds\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.norm_u_sq, r.norm_lap_u_sq, r.lhs, r.rhs, r.holds
            ));
        }
        s
    }
}

/// Max of |W''| over [lo, hi]; W'' is quadratic so the extrema are the
/// endpoints plus the vertex at u = 1/2.
pub fn lipschitz_bound(lo: f64, hi: f64) -> f64 {
    let mut m = double_well_second(lo).abs().max(double_well_second(hi).abs());
    if (lo..=hi).contains(&0.5) {
        m = m.max(double_well_second(0.5).abs());
    }
    m
}

/// The closed-form constants of the stability estimate.
pub fn stability_abcd(
    p: &CHParams,
    lipschitz: f64,
    delta: f64,
    gamma: f64,
    c_delta: f64,
    max_force_norm: f64,
) -> (f64, f64, f64, f64) {
    let a = 0.5 - p.tau / (2.0 * delta);
    let b = p.tau * p.eps1 / 2.0 - p.tau * lipschitz / (2.0 * p.eps2 * gamma);
    let d = 0.5 + p.tau * lipschitz * gamma / (2.0 * p.eps2);
    let c = p.tau * lipschitz * gamma / (2.0 * p.eps2)
        + p.tau * p.eps1 * c_delta / 2.0
        + p.tau * delta * max_force_norm * max_force_norm / 2.0;
    (a, b, c, d)
}

/// Fill a [`StabilityReport`] from a recorded trace and chosen multipliers.
///
/// Requires delta > tau and gamma > L / (eps1 eps2), which force A > 0, B > 0.
pub fn stability_constants(
    trace: &EvolveTrace,
    p: &CHParams,
    delta: f64,
    gamma: f64,
) -> Result<StabilityReport> {
    let lipschitz = lipschitz_bound(trace.u_min, trace.u_max);
    if delta <= p.tau {
        return Err(Error::BadMultipliers(format!("delta = {delta} must exceed tau = {}", p.tau)));
    }
    if gamma <= lipschitz / (p.eps1 * p.eps2) {
        return Err(Error::BadMultipliers(format!(
            "gamma = {gamma} must exceed L/(eps1*eps2) = {}",
            lipschitz / (p.eps1 * p.eps2)
        )));
    }
    let max_force_norm = trace.force_norm_sq.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
    let c_delta = trace.lap_diff_sq.iter().fold(0.0f64, |m, &v| m.max(v));
    let (a, b, c, d) = stability_abcd(p, lipschitz, delta, gamma, c_delta, max_force_norm);
    let mut steps = Vec::with_capacity(trace.steps());
    let mut all_hold = true;
    for n in 0..trace.steps() {
        let norm_u_sq = trace.state_norm_sq[n + 1];
        let norm_lap_u_sq = trace.state_lap_norm_sq[n + 1];
        let lhs = a * norm_u_sq + b * norm_lap_u_sq;
        let rhs = d * (trace.state_norm_sq[n] + trace.state_lap_norm_sq[n]) + c;
        let holds = lhs <= rhs;
        all_hold &= holds;
        steps.push(StepRecord { step: n, norm_u_sq, norm_lap_u_sq, lhs, rhs, holds });
    }
    Ok(StabilityReport {
        a,
        b,
        c,
        d,
        delta,
        gamma,
        lipschitz,
        max_force_norm,
        c_delta,
        steps,
        all_hold,
    })
}

/// Result of an [`evolve`] run.
#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub field: ScalarField,
    pub report: StabilityReport,
    pub trace: EvolveTrace,
    /// Steps actually taken (< m only when an early-exit tolerance fired).
    pub steps_taken: usize,
    /// Max-norm of the last u update.
    pub last_delta: f64,
}

/// Iterate v-step then u-step `p.m` times with a per-step force provider.
///
/// The provider receives the step index and the current state. Returns the
/// final field plus the stability report with default multipliers
/// delta = 2 tau, gamma = 2 L / (eps1 eps2).
pub fn evolve(
    u0: &ScalarField,
    mut force: impl FnMut(usize, &ScalarField) -> ScalarField,
    p: &CHParams,
    scheme: SchemeKind,
) -> Result<(ScalarField, StabilityReport)> {
    let out = evolve_until(u0, &mut force, p, scheme, None)?;
    Ok((out.field, out.report))
}

/// [`evolve`] with an optional early exit when the max-norm update drops
/// below `stop_tol`.
pub fn evolve_until(
    u0: &ScalarField,
    force: &mut dyn FnMut(usize, &ScalarField) -> ScalarField,
    p: &CHParams,
    scheme: SchemeKind,
    stop_tol: Option<f64>,
) -> Result<EvolveOutcome> {
    p.validate()?;
    let mut trace = EvolveTrace::new(p.h);
    let mut u = u0.clone();
    let mut lap = laplacian_fdm(&u, p.h);
    trace.record_state(&u, &lap);
    let mut last_delta = f64::INFINITY;
    let mut steps_taken = 0;
    for n in 0..p.m {
        let v = v_step(&u, p, scheme);
        let f = force(n, &u);
        let next = u_step(&u, &v, &f, p)?;
        let max_abs = next.max_abs();
        if !max_abs.is_finite() || max_abs > DIVERGENCE_GUARD {
            return Err(Error::Diverged { step: n, max_abs });
        }
        let next_lap = laplacian_fdm(&next, p.h);
        trace.force_norm_sq.push(f.norm_sq(p.h));
        trace.lap_diff_sq.push(next_lap.zip_map(&lap, |a, b| a - b).norm_sq(p.h));
        last_delta = next.max_abs_diff(&u);
        u = next;
        lap = next_lap;
        trace.record_state(&u, &lap);
        steps_taken = n + 1;
        if let Some(tol) = stop_tol {
            if last_delta < tol {
                break;
            }
        }
    }
    let lipschitz = lipschitz_bound(trace.u_min, trace.u_max);
    let delta = 2.0 * p.tau;
    let gamma = (2.0 * lipschitz / (p.eps1 * p.eps2)).max(1e-9);
    let report = stability_constants(&trace, p, delta, gamma)?;
    Ok(EvolveOutcome { field: u, report, trace, steps_taken, last_delta })
}
