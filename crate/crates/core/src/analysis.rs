//! Noise amplification of the three-point solve, its sensitivity matrix, and
//! local-convergence maps of the SOC/SOH fixed point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocv_model::{CellSpec, OcvSurface};
use crate::relax_estimator::{iterate_detailed, EstimatorConfig, IterInputs, IterOutcome, ParamEstimate};

/// `expm1(u) - u` without cancellation near zero.
fn expm1_minus_id(u: f64) -> f64 {
    if u.abs() < 0.1 {
        let mut term = u * u / 2.0;
        let mut sum = term;
        for k in 3..20 {
            term *= u / k as f64;
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        u.exp_m1() - u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTerms {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// R2 I0, volts.
    pub a: f64,
    /// -1 / (R2 C), 1/s.
    pub b: f64,
    /// exp(x_d / tau) for the midpoint layout.
    pub m: f64,
}

impl SensitivityTerms {
    pub fn new(x1: f64, x2: f64, x3: f64, tau: f64, r2: f64, i0: f64) -> Result<Self> {
        check_layout(x1, x2, x3, tau)?;
        let (d1, d2) = (x2 - x1, x3 - x2);
        Ok(Self {
            a1: d1 * (d2 / tau).exp(),
            a2: d2 * (-d1 / tau).exp(),
            a3: x3 - x1,
            a: r2 * i0,
            b: -1.0 / tau,
            m: (d2 / tau).exp(),
        })
    }
}

fn check_layout(x1: f64, x2: f64, x3: f64, tau: f64) -> Result<()> {
    if !(x1 < x2 && x2 < x3) {
        return Err(Error::Precondition(format!("need x1 < x2 < x3, got {x1}, {x2}, {x3}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Precondition(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// `(A1, A2, A3, A1 + A2 - A3)` scaled by `exp(-(x3 - x2)/tau)` so that long
/// spans do not overflow; the ratio f is scale free.
fn scaled_terms(x1: f64, x2: f64, x3: f64, tau: f64) -> (f64, f64, f64, f64) {
    let (u1, u2) = ((x2 - x1) / tau, (x3 - x2) / tau);
    let (d1, d2) = (x2 - x1, x3 - x2);
    let s = (-u2).exp();
    // A1 + A2 - A3 = d1 (e^{u2} - 1 - u2) + d2 (e^{-u1} - 1 + u1)
    let denom = d1 * expm1_minus_id(u2) * s + d2 * expm1_minus_id(-u1) * s;
    (d1, d2 * (-u1 - u2).exp(), (x3 - x1) * s, denom)
}

/// Variance ratio sigma_OCV^2 / sigma_y^2 of the three-point OCV estimate.
pub fn noise_amplification_f(x1: f64, x2: f64, x3: f64, tau: f64) -> Result<f64> {
    check_layout(x1, x2, x3, tau)?;
    let (a1, a2, a3, den) = scaled_terms(x1, x2, x3, tau);
    if den == 0.0 || !den.is_finite() {
        return Err(Error::SingularGeometry);
    }
    Ok((a1 * a1 + a2 * a2 + a3 * a3) / (den * den))
}

/// Closed form of f for x2 at the midpoint, with q = exp(-x_d/tau).
pub fn f_symmetric(x_d: f64, tau: f64) -> f64 {
    let u = x_d / tau;
    let q = (-u).exp();
    let one_minus_q = -(-u).exp_m1();
    let q2 = q * q;
    (1.0 + 4.0 * q2 + q2 * q2) / one_minus_q.powi(4)
}

/// Rows d(R2)/R2, dC/C, dOCV/OCV per unit change of (y1, y2, y3).
pub fn sensitivity_matrix(
    x1: f64,
    x2: f64,
    x3: f64,
    params: &ParamEstimate,
    i0: f64,
) -> Result<[[f64; 3]; 3]> {
    let t = SensitivityTerms::new(x1, x2, x3, params.tau, params.r2, i0)?;
    let (b, a) = (t.b, t.a);
    let den = t.a1 + t.a2 - t.a3;
    if den == 0.0 || !den.is_finite() {
        return Err(Error::SingularGeometry);
    }
    // e^{b x_j} carried with the common factor -e^{-b(x1 + x3)}
    let e = |x: f64| (b * (x - x1 - x3)).exp();
    let (e1, e2, e3) = (e(x1), e(x2), e(x3));
    let k = -1.0 / (a * den);
    let r2_row = [
        k * (x3 * e3 - x2 * e2),
        k * (x1 * e1 - x3 * e3),
        k * (x2 * e2 - x1 * e1),
    ];
    let g = |x: f64, ex: f64| (b * x - 1.0) * ex;
    let kc = k / b;
    let c_row = [
        kc * (g(x2, e2) - g(x3, e3)),
        kc * (g(x3, e3) - g(x1, e1)),
        kc * (g(x1, e1) - g(x2, e2)),
    ];
    let ko = 1.0 / (den * params.ocv);
    let ocv_row = [ko * t.a2, -ko * t.a3, ko * t.a1];
    Ok([r2_row, c_row, ocv_row])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub x2_star: f64,
    pub f_star: f64,
    pub f_mid: f64,
    pub grid_step: f64,
}

/// Grid search (1000 interior points) for the x2 that minimises f, polished
/// by golden section inside the best cell.
pub fn optimal_x2_gap(x1: f64, x3: f64, tau: f64) -> Result<GapResult> {
    if !(x1 < x3) {
        return Err(Error::Precondition("need x1 < x3".into()));
    }
    let n = 1000;
    let step = (x3 - x1) / (n + 1) as f64;
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 1..=n {
        let x2 = x1 + step * k as f64;
        if let Ok(f) = noise_amplification_f(x1, x2, x3, tau) {
            if f < best.1 {
                best = (x2, f);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::SingularGeometry);
    }
    // golden-section polish inside the winning grid cell
    let f = |x: f64| noise_amplification_f(x1, x, x3, tau).unwrap_or(f64::INFINITY);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((best.0 - step).max(x1 + 0.5 * step), (best.0 + step).min(x3 - 0.5 * step));
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    if fx < best.1 {
        best = (x, fx);
    }
    let f_mid = noise_amplification_f(x1, 0.5 * (x1 + x3), x3, tau)?;
    Ok(GapResult { x2_star: best.0, f_star: best.1, f_mid, grid_step: step })
}

/// Derivative of the SOH iteration map at the true point.
pub fn local_convergence_l(surface: &OcvSurface, soc_true: f64, soh_true: f64, fd_step: f64) -> Result<f64> {
    let h = fd_step;
    let f1 = surface.docv_dsoc(soc_true, soh_true)?;
    if f1.abs() < 1e-9 {
        return Err(Error::FlatCurve(f1));
    }
    let ocv = surface.ocv(soc_true, soh_true)?;
    let band = ((soc_true - 0.05).max(0.0), (soc_true + 0.05).min(1.0));
    let sp = surface.invert(ocv, soh_true + h, band)?;
    let sm = surface.invert(ocv, soh_true - h, band)?;
    let dsoc_dsoh = (sp - sm) / (2.0 * h);
    let mixed = (surface.docv_dsoc(soc_true, soh_true + h)? - surface.docv_dsoc(soc_true, soh_true - h)?) / (2.0 * h);
    let f2 = surface.d2ocv_dsoc2(soc_true, soh_true)?;
    Ok(soh_true * (f2 * dsoc_dsoh + mixed) / f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCell {
    pub soc_true: f64,
    pub soh_true: f64,
    /// |L| clipped at 1.
    pub l_abs: f64,
    /// RMSE over the SOH column this cell belongs to.
    pub soc_rmse: f64,
    pub soh_rmse: f64,
    /// This cell's own errors, from the final (or last in-band) iterate.
    pub soc_error: f64,
    pub soh_error: f64,
    pub converged: bool,
}

/// Errors of the iteration started at SOH = 1 on inputs manufactured from
/// `(soc, soh)`. A diverging run reports its last in-band iterate.
pub fn manufactured_errors(
    surface: &OcvSurface,
    spec: &CellSpec,
    cfg: &EstimatorConfig,
    soc: f64,
    soh: f64,
) -> Result<(f64, f64, bool)> {
    let i = spec.q0_ah;
    let ocv = surface.ocv(soc, soh)?;
    let docv_dt = i / (spec.q0_as() * soh) * surface.docv_dsoc(soc, soh)?;
    let cfg = EstimatorConfig { lag_correction: false, ..*cfg };
    Ok(match iterate_detailed(ocv, docv_dt, i, spec, surface, &cfg, &IterInputs::default()) {
        IterOutcome::Done(e) => (e.soc - soc, e.soh - soh, e.converged),
        IterOutcome::Diverged { last: Some(e), .. } => (e.soc - soc, e.soh - soh, false),
        IterOutcome::Diverged { last: None, .. } => (f64::NAN, f64::NAN, false),
    })
}

/// |L| and iteration errors over a SOC x SOH grid; rows are ordered SOC-major.
pub fn convergence_map(
    surface: &OcvSurface,
    spec: &CellSpec,
    soc_grid: &[f64],
    soh_grid: &[f64],
) -> Vec<ConvergenceCell> {
    let cfg = EstimatorConfig::default();
    soc_grid
        .par_iter()
        .flat_map_iter(|&soc| {
            let mut col: Vec<ConvergenceCell> = soh_grid
                .iter()
                .map(|&soh| {
                    let l_abs = local_convergence_l(surface, soc, soh, 1e-4).map_or(1.0, |l| l.abs().min(1.0));
                    let (soc_error, soh_error, converged) =
                        manufactured_errors(surface, spec, &cfg, soc, soh).unwrap_or((f64::NAN, f64::NAN, false));
                    ConvergenceCell {
                        soc_true: soc,
                        soh_true: soh,
                        l_abs,
                        soc_rmse: 0.0,
                        soh_rmse: 0.0,
                        soc_error,
                        soh_error,
                        converged,
                    }
                })
                .collect();
            let n = col.len() as f64;
            let soc_rmse = (col.iter().map(|c| c.soc_error.powi(2)).sum::<f64>() / n).sqrt();
            let soh_rmse = (col.iter().map(|c| c.soh_error.powi(2)).sum::<f64>() / n).sqrt();
            for c in &mut col {
                c.soc_rmse = soc_rmse;
                c.soh_rmse = soh_rmse;
            }
            col
        })
        .collect()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Default map resolution: 101 SOC points by 21 SOH points (0.8 to 1.0).
pub fn default_map(surface: &OcvSurface, spec: &CellSpec) -> Vec<ConvergenceCell> {
    convergence_map(surface, spec, &linspace(0.0, 1.0, 101), &linspace(0.8, 1.0, 21))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub tau: f64,
    pub f: f64,
}

/// f at the midpoint for each x3, holding x1 and tau.
pub fn sensitivity_sweep(x1: f64, tau: f64, x3s: &[f64]) -> Result<Vec<SweepRow>> {
    x3s.iter()
        .map(|&x3| {
            let x2 = 0.5 * (x1 + x3);
            Ok(SweepRow { x1, x2, x3, tau, f: noise_amplification_f(x1, x2, x3, tau)? })
        })
        .collect()
}
