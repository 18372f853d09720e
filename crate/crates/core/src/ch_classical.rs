//! Classical (non-learned) modified Cahn-Hilliard segmentation: explicit
//! force term with arctan weighting, alternating with c1/c2 updates until a
//! near-steady state.

use crate::error::{Error, Result};
use crate::field::{gl_energy, BoundaryCondition, ImageTensor, ScalarField};
use crate::scheme::{evolve_until, CHParams, SchemeKind};
use serde::{Deserialize, Serialize};

/// Region intensity estimates (c1, c2) driving the force term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceState {
    pub c1: f64,
    pub c2: f64,
}

/// Phase-field initialization for the classical solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum ChInit {
    /// u0 = f (grayscale); the default.
    FromImage,
    /// Binary disk indicator.
    Circle { cy: f64, cx: f64, r: f64 },
    /// (1 + sin(pi x / 5) sin(pi y / 5)) / 2.
    Checkerboard,
}

impl ChInit {
    pub fn build(&self, f: &ScalarField) -> ScalarField {
        match *self {
            ChInit::FromImage => f.clone(),
            ChInit::Circle { cy, cx, r } => {
                ScalarField::from_fn(f.height(), f.width(), f.bc(), |i, j| {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    if dy * dy + dx * dx <= r * r {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            ChInit::Checkerboard => {
                ScalarField::from_fn(f.height(), f.width(), f.bc(), |i, j| {
                    0.5 * (1.0
                        + (std::f64::consts::PI * j as f64 / 5.0).sin()
                            * (std::f64::consts::PI * i as f64 / 5.0).sin())
                })
            }
        }
    }
}

/// Fidelity force
/// F = [l1 (f - c1)^2 - l2 (f - c2)^2] * eps3 / (pi [eps3^2 + (u - 1/2)^2]).
pub fn ch_force(f: &ImageTensor, u: &ScalarField, s: ForceState, p: &CHParams) -> Result<ScalarField> {
    if f.channels() != 1 {
        return Err(Error::InvalidParam("ch_force expects a grayscale image".into()));
    }
    if (f.height(), f.width()) != (u.height(), u.width()) {
        return Err(Error::ShapeMismatch("image and u differ in shape".into()));
    }
    let e3 = p.eps3;
    let mut out = u.clone();
    for i in 0..u.height() {
        for j in 0..u.width() {
            let fv = f.get(i, j, 0);
            let r1 = fv - s.c1;
            let r2 = fv - s.c2;
            let bracket = p.lambda1 * r1 * r1 - p.lambda2 * r2 * r2;
            let du = u.get(i, j) - 0.5;
            let lorentz = e3 / (std::f64::consts::PI * (e3 * e3 + du * du));
            out.set(i, j, bracket * lorentz);
        }
    }
    Ok(out)
}

/// Arctan-weighted region means:
/// c1 = sum(w1 f) / sum(w1), c2 = sum(w2 f) / sum(w2) with
/// w1 = 1/2 + atan((u - 1/2)/eps3)/pi and w2 = 1 - w1.
pub fn update_c(f: &ImageTensor, u: &ScalarField, eps3: f64) -> Result<ForceState> {
    if f.channels() != 1 {
        return Err(Error::InvalidParam("update_c expects a grayscale image".into()));
    }
    let (mut n1, mut d1, mut n2, mut d2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..u.height() {
        for j in 0..u.width() {
            let w1 = 0.5 + ((u.get(i, j) - 0.5) / eps3).atan() / std::f64::consts::PI;
            let w2 = 1.0 - w1;
            let fv = f.get(i, j, 0);
            n1 += w1 * fv;
            d1 += w1;
            n2 += w2 * fv;
            d2 += w2;
        }
    }
    if d1 < 1e-12 || d2 < 1e-12 {
        return Err(Error::EmptyRegion(format!(
            "arctan weights vanished (w1 = {d1:.3e}, w2 = {d2:.3e})"
        )));
    }
    Ok(ForceState { c1: n1 / d1, c2: n2 / d2 })
}

/// Energy of the modified model: Ginzburg-Landau part plus sharp-region
/// fidelity terms split at u >= 1/2.
pub fn ch_energy(f: &ImageTensor, u: &ScalarField, s: ForceState, p: &CHParams) -> f64 {
    let mut fidelity = 0.0;
    for i in 0..u.height() {
        for j in 0..u.width() {
            let fv = f.get(i, j, 0);
            if u.get(i, j) >= 0.5 {
                let r = fv - s.c1;
                fidelity += p.lambda1 * r * r;
            } else {
                let r = fv - s.c2;
                fidelity += p.lambda2 * r * r;
            }
        }
    }
    gl_energy(u, p.eps1, p.eps2, p.h) + fidelity * p.h * p.h
}

/// One row of the classical-solver trace; CSV columns
/// outer_iter, c1, c2, energy, max_delta_u.
#[derive(Debug, Clone)]
pub struct ChTraceRow {
    pub outer_iter: usize,
    pub c1: f64,
    pub c2: f64,
    pub energy: f64,
    pub max_delta_u: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ChTrace {
    pub rows: Vec<ChTraceRow>,
}

impl ChTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("outer_iter,c1,c2,energy,max_delta_u\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.outer_iter, r.c1, r.c2, r.energy, r.max_delta_u
            ));
        }
        s
    }
}

/// Inner-evolution early exit: stop when the max-norm update falls below this.
pub const STEADY_STATE_TOL: f64 = 1e-6;

/// Classical segmentation: alternate `p.m` inner (v-step, u-step) iterations
/// with force recomputed from the current u, then update (c1, c2); repeat
/// `outer_iters` times. Starts from c1 = 1, c2 = 0. Returns the thresholded
/// mask (u >= 1/2) and the per-outer-iteration trace.
pub fn ch_segment(
    f: &ImageTensor,
    p: &CHParams,
    init: ChInit,
    outer_iters: usize,
    scheme: SchemeKind,
    bc: BoundaryCondition,
) -> Result<(ScalarField, ChTrace)> {
    p.validate()?;
    if outer_iters < 1 {
        return Err(Error::InvalidParam("outer_iters must be >= 1".into()));
    }
    let gray = if f.channels() == 1 {
        f.clone()
    } else {
        ImageTensor::from_field_clamped(&f.luminance())
    };
    let base = gray.luminance().with_bc(bc);
    let mut u = init.build(&base);
    let mut state = ForceState { c1: 1.0, c2: 0.0 };
    let mut trace = ChTrace::default();
    for outer in 0..outer_iters {
        let mut force = |_: usize, cur: &ScalarField| {
            ch_force(&gray, cur, state, p).expect("shape checked above")
        };
        let out = evolve_until(&u, &mut force, p, scheme, Some(STEADY_STATE_TOL))?;
        u = out.field;
        state = update_c(&gray, &u, p.eps3)?;
        trace.rows.push(ChTraceRow {
            outer_iter: outer,
            c1: state.c1,
            c2: state.c2,
            energy: ch_energy(&gray, &u, state, p),
            max_delta_u: out.last_delta,
        });
    }
    let mask = u.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Ok((mask, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gray(h: usize, w: usize, vals: Vec<f64>) -> ImageTensor {
        ImageTensor::new(h, w, 1, vals).unwrap()
    }

    fn random_pair(h: usize, w: usize, seed: u64) -> (ImageTensor, ScalarField) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = gray(h, w, (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect());
        let u = ScalarField::from_fn(h, w, BoundaryCondition::NeumannZeroFlux, |_, _| {
            r.gen_range(-0.5..1.5)
        });
        (img, u)
    }

    #[test]
    fn force_zero_when_residuals_match() {
        let p = CHParams::default();
        let f = gray(5, 5, vec![0.4; 25]);
        let u = ScalarField::filled(5, 5, 0.2, BoundaryCondition::NeumannZeroFlux);
        let s = ForceState { c1: 0.4, c2: 0.4 };
        let out = ch_force(&f, &u, s, &p).unwrap();
        assert!(out.max_abs() < 1e-15);
    }

    #[test]
    fn force_direct_substitution() {
        // u = 0.5, eps3 = 1, l1 = 1, l2 = 0, f - c1 = 1 -> F = 1/pi
        let p = CHParams { eps3: 1.0, lambda1: 1.0, lambda2: 0.0, ..CHParams::default() };
        let f = gray(4, 4, vec![1.0; 16]);
        let u = ScalarField::filled(4, 4, 0.5, BoundaryCondition::NeumannZeroFlux);
        let s = ForceState { c1: 0.0, c2: 0.0 };
        let out = ch_force(&f, &u, s, &p).unwrap();
        for &v in out.values() {
            assert!((v - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        }
    }

    #[test]
    fn force_matches_bruteforce() {
        let p = CHParams { eps3: 0.3, lambda1: 0.7, lambda2: 1.3, ..CHParams::default() };
        let (f, u) = random_pair(8, 8, 21);
        let s = ForceState { c1: 0.8, c2: 0.2 };
        let out = ch_force(&f, &u, s, &p).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let fv = f.get(i, j, 0);
                let want = (0.7 * (fv - 0.8) * (fv - 0.8) - 1.3 * (fv - 0.2) * (fv - 0.2)) * 0.3
                    / (std::f64::consts::PI * (0.09 + (u.get(i, j) - 0.5).powi(2)));
                assert!((out.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn force_antisymmetric_under_lambda_c_swap() {
        let p = CHParams { lambda1: 0.7, lambda2: 1.3, ..CHParams::default() };
        let swapped = CHParams { lambda1: 1.3, lambda2: 0.7, ..p };
        let (f, u) = random_pair(6, 6, 3);
        let s = ForceState { c1: 0.9, c2: 0.1 };
        let sw = ForceState { c1: 0.1, c2: 0.9 };
        let a = ch_force(&f, &u, s, &p).unwrap();
        let b = ch_force(&f, &u, sw, &swapped).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn force_respects_analytic_bound() {
        let p = CHParams { eps3: 0.2, lambda1: 1.1, lambda2: 0.4, ..CHParams::default() };
        let (f, u) = random_pair(8, 8, 5);
        let s = ForceState { c1: 0.75, c2: 0.25 };
        let out = ch_force(&f, &u, s, &p).unwrap();
        // |F| <= max(l1, l2) * max residual^2 / (pi eps3)
        let max_res_sq = f
            .values()
            .iter()
            .map(|&v| (v - s.c1).abs().max((v - s.c2).abs()).powi(2))
            .fold(0.0f64, f64::max);
        let bound = p.lambda1.max(p.lambda2) * max_res_sq / (std::f64::consts::PI * p.eps3);
        assert!(out.max_abs() <= bound + 1e-12);
    }

    #[test]
    fn update_c_uniform_weights() {
        // u = 0.5 everywhere -> both weights 1/2 -> c1 = c2 = mean(f)
        let (f, _) = random_pair(6, 6, 8);
        let u = ScalarField::filled(6, 6, 0.5, BoundaryCondition::NeumannZeroFlux);
        let s = update_c(&f, &u, 0.1).unwrap();
        let mean = f.values().iter().sum::<f64>() / 36.0;
        assert!((s.c1 - mean).abs() < 1e-12);
        assert!((s.c2 - mean).abs() < 1e-12);
    }

    #[test]
    fn update_c_constant_image() {
        let f = gray(5, 5, vec![0.8; 25]);
        let u = ScalarField::filled(5, 5, 1.0, BoundaryCondition::NeumannZeroFlux);
        let s = update_c(&f, &u, 0.1).unwrap();
        assert!((s.c1 - 0.8).abs() < 1e-12);
        assert!((s.c2 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn update_c_binary_indicator() {
        // binary image, u matching its indicator, small eps3: region means recovered
        let vals: Vec<f64> = (0..64).map(|k| if k % 8 < 3 { 0.9 } else { 0.15 }).collect();
        let f = gray(8, 8, vals.clone());
        let u = ScalarField::from_values(
            8,
            8,
            vals.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
            BoundaryCondition::NeumannZeroFlux,
        )
        .unwrap();
        let s = update_c(&f, &u, 0.01).unwrap();
        assert!((s.c1 - 0.9).abs() < 0.02, "c1 = {}", s.c1);
        assert!((s.c2 - 0.15).abs() < 0.02, "c2 = {}", s.c2);
    }

    #[test]
    fn update_weights_sum_to_one() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let u: f64 = r.gen_range(-2.0..3.0);
            let eps3: f64 = r.gen_range(0.01..1.0);
            let w1 = 0.5 + ((u - 0.5) / eps3).atan() / std::f64::consts::PI;
            let w2 = 0.5 - ((u - 0.5) / eps3).atan() / std::f64::consts::PI;
            assert!((w1 + w2 - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn binary_image_is_a_fixed_point() {
        // f already binary, u init = f: c1 -> 1, c2 -> 0 and the mask equals f
        // after one outer iteration.
        let vals: Vec<f64> = (0..256)
            .map(|k| {
                let (i, j) = (k / 16, k % 16);
                let d = (i as f64 - 7.5).powi(2) + (j as f64 - 7.5).powi(2);
                if d <= 30.25 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let f = gray(16, 16, vals.clone());
        // sharp arctan weighting so the region means are recovered cleanly
        let p = CHParams { eps3: 0.01, m: 5, ..CHParams::default() };
        let (mask, trace) = ch_segment(
            &f,
            &p,
            ChInit::FromImage,
            1,
            SchemeKind::Tfpm,
            BoundaryCondition::NeumannZeroFlux,
        )
        .unwrap();
        assert_eq!(mask.values(), vals.as_slice());
        let last = trace.rows.last().unwrap();
        assert!((last.c1 - 1.0).abs() < 0.05, "c1 = {}", last.c1);
        assert!(last.c2.abs() < 0.05, "c2 = {}", last.c2);
    }

    #[test]
    fn zero_lambdas_conserve_mean_under_periodic() {
        // l1 = l2 = 0 reduces to pure Cahn-Hilliard smoothing.
        let p = CHParams { lambda1: 0.0, lambda2: 0.0, m: 10, ..CHParams::default() };
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let f = gray(8, 8, (0..64).map(|_| r.gen_range(0.0..1.0)).collect());
        let u0 = f.luminance().with_bc(BoundaryCondition::Periodic);
        let s = ForceState { c1: 1.0, c2: 0.0 };
        let force = ch_force(&f, &u0, s, &p).unwrap();
        assert!(force.max_abs() < 1e-15);
        let mut force_fn = |_: usize, cur: &ScalarField| ch_force(&f, cur, s, &p).unwrap();
        let out = evolve_until(&u0, &mut force_fn, &p, SchemeKind::Fdm, None).unwrap();
        assert!((out.field.mean() - u0.mean()).abs() < 1e-10);
    }
}
