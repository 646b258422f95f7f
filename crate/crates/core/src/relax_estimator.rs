//! ECM identification from one relaxation and the iterative SOC/SOH solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocv_model::{CellSpec, OcvSurface};

pub const MEDIAN_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestMode {
    AfterCc,
    AfterCv,
}

/// One rest period plus the data just before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationWindow {
    /// Rest onset, seconds.
    pub t0: f64,
    /// `(seconds since t0, volts)`, first entry at 0.
    pub samples: Vec<(f64, f64)>,
    /// Current before the rest, amperes (+ charge).
    pub i0: f64,
    /// Voltage step at the onset, volts.
    pub delta_u: f64,
    /// `(t, v)` rows immediately before `t0`.
    pub pre_tail: Vec<(f64, f64)>,
    pub mode: RestMode,
    /// Current slope at the end of a CV phase, A/s.
    pub di_dt: f64,
    /// Capacitor voltage aligned with `pre_tail`, when it is known.
    pub pre_tail_uc: Option<Vec<f64>>,
}

impl RelaxationWindow {
    pub fn sample_dt(&self) -> Result<f64> {
        let n = self.samples.len();
        if n < 2 {
            return Err(Error::Window("window has fewer than two samples".into()));
        }
        Ok((self.samples[n - 1].0 - self.samples[0].0) / (n - 1) as f64)
    }

    /// Keep only the last `n` rows of the pre-rest tail.
    pub fn with_tail_len(mut self, n: usize) -> Self {
        self.trim_tail(n);
        self
    }

    pub fn trim_tail(&mut self, n: usize) {
        let len = self.pre_tail.len();
        if n < len {
            self.pre_tail.drain(..len - n);
            if let Some(uc) = self.pre_tail_uc.as_mut() {
                uc.drain(..len - n);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub r1: f64,
    pub r2: f64,
    pub c: f64,
    pub tau: f64,
    pub ocv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocSohEstimate {
    pub soc: f64,
    pub soh: f64,
    pub iterations: usize,
    pub converged: bool,
    pub docv_dt: f64,
    /// Last |SOH_{k+1} - SOH_k|.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub x1: f64,
    pub x3: f64,
    /// Rows of the pre-rest tail used for dV/dt and the onset step.
    pub tail_points: usize,
    pub soh_tol: f64,
    pub max_iter: usize,
    pub soh_band: (f64, f64),
    /// Half-width of the SOC search band after the first iteration.
    pub soc_search_half_width: f64,
    /// Evaluate dOCV/dSOC at the SOC of the regression-window centre.
    pub lag_correction: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            x1: 10.0,
            x3: 120.0,
            tail_points: 50,
            soh_tol: 1e-6,
            max_iter: 100,
            soh_band: (0.5, 1.2),
            soc_search_half_width: 0.05,
            lag_correction: true,
        }
    }
}

/// Median of the 15 samples centred on `idx`, shifted inward at the edges.
pub fn median_filter_point(samples: &[(f64, f64)], idx: usize) -> Result<f64> {
    let n = samples.len();
    if n < MEDIAN_WINDOW {
        return Err(Error::Window(format!("median filter needs {MEDIAN_WINDOW} samples, got {n}")));
    }
    if idx >= n {
        return Err(Error::Window(format!("index {idx} beyond {n} samples")));
    }
    let half = MEDIAN_WINDOW / 2;
    let start = idx.saturating_sub(half).min(n - MEDIAN_WINDOW);
    let mut buf = [0.0; MEDIAN_WINDOW];
    for (b, s) in buf.iter_mut().zip(&samples[start..start + MEDIAN_WINDOW]) {
        *b = s.1;
    }
    let (_, m, _) = buf.select_nth_unstable_by(half, f64::total_cmp);
    Ok(*m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreePoints {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    /// Snapped sample times, seconds after onset.
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x_d: f64,
}

fn nearest_index(samples: &[(f64, f64)], x: f64) -> usize {
    let p = samples.partition_point(|s| s.0 < x);
    if p == 0 {
        0
    } else if p == samples.len() {
        p - 1
    } else if (samples[p].0 - x).abs() < (x - samples[p - 1].0).abs() {
        p
    } else {
        p - 1
    }
}

/// Median-filtered voltages at x1, the midpoint, and x3 (snapped to samples).
pub fn pick_three_points(window: &RelaxationWindow, x1: f64, x3: f64) -> Result<ThreePoints> {
    if !(x1 >= 0.0 && x3 > x1) {
        return Err(Error::Window(format!("need 0 <= x1 < x3, got x1={x1}, x3={x3}")));
    }
    let s = &window.samples;
    if s.len() < MEDIAN_WINDOW {
        return Err(Error::Window("window shorter than the median filter".into()));
    }
    let dt = window.sample_dt()?;
    let last = s[s.len() - 1].0;
    if x3 + (MEDIAN_WINDOW / 2) as f64 * dt > last + 1e-9 * dt {
        return Err(Error::Window(format!("window ends at {last} s, needs {x3} s plus filter margin")));
    }
    let i1 = nearest_index(s, x1);
    let i2 = nearest_index(s, 0.5 * (x1 + x3));
    let (t1, t2) = (s[i1].0, s[i2].0);
    let x_d = t2 - t1;
    let i3 = nearest_index(s, t2 + x_d);
    let t3 = s[i3].0;
    if !(x_d > 0.0) || ((t3 - t2) - x_d).abs() > 1e-6 * dt {
        return Err(Error::Window("samples too irregular for equally spaced points".into()));
    }
    Ok(ThreePoints {
        y1: median_filter_point(s, i1)?,
        y2: median_filter_point(s, i2)?,
        y3: median_filter_point(s, i3)?,
        x1: t1,
        x2: t2,
        x3: t3,
        x_d,
    })
}

/// R1 from the onset step.
pub fn estimate_r1(delta_u: f64, i0: f64) -> Result<f64> {
    if i0 == 0.0 {
        return Err(Error::Division("pre-rest current is zero".into()));
    }
    Ok(-delta_u / i0)
}

/// Closed-form R2, C, OCV, tau from three equally spaced relaxation samples.
///
/// `x1` is the first sample time after onset; the amplitude is referred back
/// to the onset so R2 is the steady-state branch resistance.
pub fn solve_three_point(y1: f64, y2: f64, y3: f64, x_d: f64, x1: f64, i0: f64) -> Result<ParamEstimate> {
    if !(x_d > 0.0) {
        return Err(Error::Precondition(format!("x_d must be positive, got {x_d}")));
    }
    if i0 == 0.0 {
        return Err(Error::Division("pre-rest current is zero".into()));
    }
    let (d12, d23) = (y1 - y2, y2 - y3);
    if !(d12 * i0 > 0.0 && d23 * i0 > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "voltage differences ({d12:.3e}, {d23:.3e}) inconsistent with current sign"
        )));
    }
    let ratio = d12 / d23;
    if !(ratio > 1.0) || !ratio.is_finite() {
        return Err(Error::DegenerateGeometry(format!("(y1-y2)/(y2-y3) = {ratio}")));
    }
    let ln_m = ratio.ln();
    let tau = x_d / ln_m;
    // m / (m - 1) = 1 / (1 - 1/m), well conditioned for large m
    let gain = 1.0 / -(-ln_m).exp_m1();
    let amp = d12 * gain;
    let ocv = y1 - amp;
    let r2 = amp * (x1 / tau).exp() / i0;
    if !(r2 > 0.0 && tau.is_finite()) {
        return Err(Error::DegenerateGeometry("non-positive R2".into()));
    }
    Ok(ParamEstimate { r1: 0.0, r2, c: tau / r2, tau, ocv })
}

/// Ordinary least-squares line through `points`: `(slope, value at t)`.
fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Regression("need at least two points".into()));
    }
    let nf = n as f64;
    let tm = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let vm = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, v) in points {
        sxx += (t - tm) * (t - tm);
        sxy += (t - tm) * (v - vm);
    }
    if !(sxx > 0.0) {
        return Err(Error::Regression("all time stamps equal".into()));
    }
    Ok((sxy / sxx, tm, vm))
}

/// Slope of v against t by least squares.
pub fn fit_dv_dt(pre_tail: &[(f64, f64)]) -> Result<f64> {
    ols(pre_tail).map(|(slope, _, _)| slope)
}

/// Onset voltage step: first rest sample minus the tail regression line
/// extrapolated to `t0`.
pub fn onset_step(pre_tail: &[(f64, f64)], t0: f64, v0: f64) -> Result<f64> {
    let (slope, tm, vm) = ols(pre_tail)?;
    Ok(v0 - (vm + slope * (t0 - tm)))
}

/// Under CC, dOCV/dt is approximated by the terminal-voltage slope.
pub fn docv_dt_cc(dv_dt: f64) -> f64 {
    dv_dt
}

/// Under CV, dOCV/dt = -dI/dt (R1 + R2).
pub fn docv_dt_cv(di_dt: f64, r1: f64, r2: f64) -> f64 {
    -di_dt * (r1 + r2)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum IterOutcome {
    Done(SocSohEstimate),
    Diverged { last: Option<SocSohEstimate>, err: Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterInputs {
    /// Charge passed between the slope's reference instant and the OCV
    /// instant, ampere-seconds; shifts the SOC at which dOCV/dSOC is taken.
    pub lag_charge_as: f64,
    /// Bypass the OCV inversion with a known SOC.
    pub known_soc: Option<f64>,
}

pub(crate) fn iterate_detailed(
    ocv: f64,
    docv_dt: f64,
    i: f64,
    spec: &CellSpec,
    surface: &OcvSurface,
    cfg: &EstimatorConfig,
    extra: &IterInputs,
) -> IterOutcome {
    let fail = |last, err| IterOutcome::Diverged { last, err };
    if docv_dt == 0.0 || !docv_dt.is_finite() {
        return fail(None, Error::Precondition("dOCV/dt must be non-zero".into()));
    }
    if i == 0.0 {
        return fail(None, Error::Precondition("current must be non-zero".into()));
    }
    let q0 = spec.q0_as();
    let mut soh: f64 = 1.0;
    let mut soc_prev: Option<f64> = None;
    let mut last: Option<SocSohEstimate> = None;
    let (soh_lo, soh_hi) = surface.soh_band();
    for k in 0..cfg.max_iter {
        // coefficients are flat beyond the grid, so the band edge stands in for
        // iterates past it
        let soh_eval = soh.clamp(soh_lo, soh_hi);
        let soc = match extra.known_soc {
            Some(s) => s,
            None => {
                let inv = match soc_prev {
                    Some(p) => {
                        let w = cfg.soc_search_half_width;
                        surface
                            .invert(ocv, soh_eval, ((p - w).max(0.0), (p + w).min(1.0)))
                            .or_else(|_| surface.invert(ocv, soh_eval, (0.0, 1.0)))
                    }
                    None => surface.invert(ocv, soh_eval, (0.0, 1.0)),
                };
                match inv {
                    Ok(s) => s,
                    Err(e) => return fail(last, e),
                }
            }
        };
        soc_prev = Some(soc);
        let soc_slope = if cfg.lag_correction {
            (soc - extra.lag_charge_as / (q0 * soh)).clamp(0.0, 1.0)
        } else {
            soc
        };
        let slope = match surface.docv_dsoc(soc_slope, soh_eval) {
            Ok(d) => d,
            Err(e) => return fail(last, e),
        };
        let next = i / q0 * slope / docv_dt;
        let residual = (next - soh).abs();
        let est = SocSohEstimate { soc, soh: next, iterations: k + 1, converged: false, docv_dt, residual };
        if !(next >= cfg.soh_band.0 && next <= cfg.soh_band.1) {
            return fail(Some(SocSohEstimate { soh, ..est }), Error::Divergence { iteration: k + 1, soh: next });
        }
        if residual <= cfg.soh_tol {
            return IterOutcome::Done(SocSohEstimate { converged: true, ..est });
        }
        last = Some(est);
        soh = next;
    }
    IterOutcome::Done(last.expect("max_iter >= 1"))
}

/// Fixed-point solve for (SOC, SOH) from one OCV and its time derivative.
pub fn iterate_soc_soh(
    ocv: f64,
    docv_dt: f64,
    i: f64,
    spec: &CellSpec,
    surface: &OcvSurface,
) -> Result<SocSohEstimate> {
    iterate_soc_soh_with(ocv, docv_dt, i, spec, surface, &EstimatorConfig::default(), &IterInputs::default())
}

pub fn iterate_soc_soh_with(
    ocv: f64,
    docv_dt: f64,
    i: f64,
    spec: &CellSpec,
    surface: &OcvSurface,
    cfg: &EstimatorConfig,
    extra: &IterInputs,
) -> Result<SocSohEstimate> {
    if cfg.max_iter == 0 {
        return Err(Error::Precondition("max_iter must be at least 1".into()));
    }
    match iterate_detailed(ocv, docv_dt, i, spec, surface, cfg, extra) {
        IterOutcome::Done(e) => Ok(e),
        IterOutcome::Diverged { err, .. } => Err(err),
    }
}

/// Per-window intermediate results shared by the plain and compensated paths.
#[derive(Debug, Clone, Copy, PartialEq)]
struct WindowFit {
    params: ParamEstimate,
    dv_dt: f64,
    lag_charge_as: f64,
    i: f64,
}

fn fit_window(window: &RelaxationWindow, spec: &CellSpec, cfg: &EstimatorConfig) -> Result<WindowFit> {
    let tp = pick_three_points(window, cfg.x1, cfg.x3)?;
    let mut params = solve_three_point(tp.y1, tp.y2, tp.y3, tp.x_d, tp.x1, window.i0)?;
    if !(params.ocv >= spec.v_min && params.ocv <= spec.v_max) {
        return Err(Error::Implausible(format!(
            "OCV {:.4} V outside [{}, {}] V",
            params.ocv, spec.v_min, spec.v_max
        )));
    }
    params.r1 = estimate_r1(window.delta_u, window.i0)?;
    match window.mode {
        RestMode::AfterCc => {
            let n = window.pre_tail.len().min(cfg.tail_points);
            let tail = &window.pre_tail[window.pre_tail.len() - n..];
            let (dv_dt, tm) = match &window.pre_tail_uc {
                Some(uc) => {
                    if uc.len() != window.pre_tail.len() {
                        return Err(Error::Window("capacitor channel length differs from tail".into()));
                    }
                    let uc = &uc[uc.len() - n..];
                    let pts: Vec<(f64, f64)> = tail.iter().zip(uc).map(|(p, u)| (p.0, p.1 - u)).collect();
                    let (s, tm, _) = ols(&pts)?;
                    (s, tm)
                }
                None => {
                    let (s, tm, _) = ols(tail)?;
                    (s, tm)
                }
            };
            Ok(WindowFit {
                params,
                dv_dt: docv_dt_cc(dv_dt),
                lag_charge_as: window.i0 * (window.t0 - tm),
                i: window.i0,
            })
        }
        RestMode::AfterCv => Ok(WindowFit {
            params,
            dv_dt: docv_dt_cv(window.di_dt, params.r1, params.r2),
            lag_charge_as: 0.0,
            i: window.i0,
        }),
    }
}

/// Plain estimate from one relaxation.
pub fn estimate_from_relaxation(
    window: &RelaxationWindow,
    spec: &CellSpec,
    surface: &OcvSurface,
    cfg: &EstimatorConfig,
    known_soc: Option<f64>,
) -> Result<(SocSohEstimate, ParamEstimate)> {
    let fit = fit_window(window, spec, cfg)?;
    let extra = IterInputs { lag_charge_as: fit.lag_charge_as, known_soc };
    let est = iterate_soc_soh_with(fit.params.ocv, fit.dv_dt, fit.i, spec, surface, cfg, &extra)?;
    Ok((est, fit.params))
}

/// Charge moved between two relaxations and the CC current that moved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcGap {
    pub net_charge_as: f64,
    pub i_cc: f64,
}

impl CcGap {
    /// Duration of pure CC charging that would move the same net charge.
    pub fn effective_duration(&self) -> f64 {
        self.net_charge_as / self.i_cc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    pub estimate: SocSohEstimate,
    pub windows: [(SocSohEstimate, ParamEstimate); 2],
    /// d(R1 + R2)/dt applied to both slopes, ohm/s.
    pub dr_dt: f64,
}

/// Two-relaxation estimate with the resistance drift removed from dV/dt.
pub fn estimate_with_dr_compensation(
    window1: &RelaxationWindow,
    window2: &RelaxationWindow,
    gap: &CcGap,
    spec: &CellSpec,
    surface: &OcvSurface,
    cfg: &EstimatorConfig,
    known_soc: Option<(f64, f64)>,
) -> Result<DrEstimate> {
    if !(window2.t0 > window1.t0) {
        return Err(Error::Precondition("second window must start after the first".into()));
    }
    if !(gap.i_cc != 0.0 && gap.effective_duration() > 0.0) {
        return Err(Error::Precondition("CC gap must move charge in the CC direction".into()));
    }
    let tag = |w: usize| move |e: Error| Error::InWindow { window: w, source: Box::new(e) };
    let f1 = fit_window(window1, spec, cfg).map_err(tag(1))?;
    let f2 = fit_window(window2, spec, cfg).map_err(tag(2))?;
    // with a known capacitor voltage the slopes already exclude Uc, so only R1 drifts
    let known_uc = window1.pre_tail_uc.is_some() && window2.pre_tail_uc.is_some();
    let dr = if known_uc {
        f2.params.r1 - f1.params.r1
    } else {
        (f2.params.r1 + f2.params.r2) - (f1.params.r1 + f1.params.r2)
    };
    let dr_dt = dr / gap.effective_duration();
    let run = |f: &WindowFit, ks: Option<f64>| {
        let docv = f.dv_dt - f.i * dr_dt;
        let extra = IterInputs { lag_charge_as: f.lag_charge_as, known_soc: ks };
        iterate_soc_soh_with(f.params.ocv, docv, f.i, spec, surface, cfg, &extra)
    };
    let e1 = run(&f1, known_soc.map(|k| k.0)).map_err(tag(1))?;
    let e2 = run(&f2, known_soc.map(|k| k.1)).map_err(tag(2))?;
    let soh = 0.5 * (e1.soh + e2.soh);
    let soc2_back = e2.soc - gap.net_charge_as / (spec.q0_as() * soh);
    let estimate = SocSohEstimate {
        soc: 0.5 * (e1.soc + soc2_back),
        soh,
        iterations: e1.iterations + e2.iterations,
        converged: e1.converged && e2.converged,
        docv_dt: 0.5 * (e1.docv_dt + e2.docv_dt),
        residual: e1.residual.max(e2.residual),
    };
    Ok(DrEstimate { estimate, windows: [(e1, f1.params), (e2, f2.params)], dr_dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocv_model::{PolyCoeffs, SohLevel};
    use crate::synthetic;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn exp_window(ocv: f64, amp: f64, tau: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|k| (k as f64, ocv + amp * (-(k as f64) / tau).exp())).collect()
    }

    fn window_from(samples: Vec<(f64, f64)>, i0: f64) -> RelaxationWindow {
        RelaxationWindow {
            t0: 1000.0,
            samples,
            i0,
            delta_u: 0.0,
            pre_tail: (0..50).map(|k| (950.0 + k as f64, 3.8 + 1e-4 * k as f64)).collect(),
            mode: RestMode::AfterCc,
            di_dt: 0.0,
            pre_tail_uc: None,
        }
    }

    #[test]
    fn median_of_constant_and_outlier() {
        let s: Vec<_> = (0..15).map(|k| (k as f64, 3.9)).collect();
        assert_eq!(median_filter_point(&s, 7).unwrap(), 3.9);
        let mut o = s.clone();
        o[4].1 = 4.9;
        assert_eq!(median_filter_point(&o, 7).unwrap(), 3.9);
        assert_eq!(median_filter_point(&o, 0).unwrap(), 3.9);
        assert!(median_filter_point(&s[..14], 7).is_err());
    }

    #[test]
    fn median_window_shifts_inward_at_edges() {
        let s: Vec<_> = (0..40).map(|k| (k as f64, k as f64)).collect();
        assert_eq!(median_filter_point(&s, 0).unwrap(), 7.0);
        assert_eq!(median_filter_point(&s, 20).unwrap(), 20.0);
        assert_eq!(median_filter_point(&s, 39).unwrap(), 32.0);
    }

    #[test]
    fn median_reduces_variance() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let (mut raw, mut med) = (0.0, 0.0);
        for _ in 0..n {
            let s: Vec<_> = (0..15).map(|k| (k as f64, normal.sample(&mut rng))).collect();
            raw += s[7].1 * s[7].1;
            let m = median_filter_point(&s, 7).unwrap();
            med += m * m;
        }
        assert!(med / n as f64 <= raw / n as f64);
    }

    #[test]
    fn three_points_at_default_layout() {
        let w = window_from(exp_window(3.9, 0.02, 60.0, 200), 1.0);
        let tp = pick_three_points(&w, 10.0, 120.0).unwrap();
        assert_eq!((tp.x1, tp.x2, tp.x3, tp.x_d), (10.0, 65.0, 120.0, 55.0));
        // noiseless monotone data: the median is the centre sample
        assert_eq!(tp.y1, w.samples[10].1);
        assert_eq!(tp.y2, w.samples[65].1);
        assert_eq!(tp.y3, w.samples[120].1);
        assert!(pick_three_points(&w, 120.0, 10.0).is_err());
        let short = window_from(exp_window(3.9, 0.02, 60.0, 125), 1.0);
        assert!(matches!(pick_three_points(&short, 10.0, 120.0), Err(Error::Window(_))));
    }

    #[test]
    fn r1_from_step() {
        assert!((estimate_r1(-0.05, 1.1).unwrap() - 0.045_454_545_454_545_45).abs() < 1e-15);
        assert_eq!(estimate_r1(0.0, 1.1).unwrap(), 0.0);
        assert!(estimate_r1(-0.05, 0.0).is_err());
    }

    #[test]
    fn closed_form_recovers_generating_parameters() {
        let (r2, c, ocv, i0) = (0.05, 1200.0, 3.95, 1.1);
        let tau: f64 = r2 * c;
        let y = |x: f64| ocv + i0 * r2 * (-x / tau).exp();
        let p = solve_three_point(y(10.0), y(65.0), y(120.0), 55.0, 10.0, i0).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(p.r2, r2) < 1e-9);
        assert!(rel(p.c, c) < 1e-9);
        assert!(rel(p.tau, tau) < 1e-9);
        assert!(rel(p.ocv, ocv) < 1e-9);
        assert!(rel(p.tau, p.r2 * p.c) < 1e-12);
        // x1 = 0 reduces to the onset-referenced form
        let p0 = solve_three_point(y(0.0), y(55.0), y(110.0), 55.0, 0.0, i0).unwrap();
        assert!(rel(p0.r2, r2) < 1e-9);
    }

    #[test]
    fn closed_form_degenerate_inputs() {
        assert!(matches!(solve_three_point(3.9, 3.9, 3.8, 55.0, 10.0, 1.0), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(solve_three_point(3.90, 3.89, 3.88, 55.0, 10.0, 1.0), Err(Error::DegenerateGeometry(_))));
        // discharge-signed current with charge-ordered voltages
        assert!(matches!(solve_three_point(3.92, 3.91, 3.905, 55.0, 10.0, -1.0), Err(Error::DegenerateGeometry(_))));
        assert!(solve_three_point(3.92, 3.91, 3.905, 0.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn slope_regression() {
        let tail: Vec<_> = (0..50).map(|k| (k as f64, 3.7 + 1e-4 * k as f64)).collect();
        assert!((fit_dv_dt(&tail).unwrap() - 1e-4).abs() < 1e-15);
        assert!((fit_dv_dt(&[(0.0, 1.0), (2.0, 1.5)]).unwrap() - 0.25).abs() < 1e-15);
        assert!(fit_dv_dt(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(fit_dv_dt(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn slope_regression_noise_within_standard_error() {
        let sigma = 0.15e-3;
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 50.0f64;
        let se = sigma / (n * (n * n - 1.0) / 12.0).sqrt();
        for _ in 0..200 {
            let tail: Vec<_> = (0..50).map(|k| (k as f64, 3.7 + 1e-4 * k as f64 + normal.sample(&mut rng))).collect();
            assert!((fit_dv_dt(&tail).unwrap() - 1e-4).abs() < 4.0 * se);
        }
    }

    #[test]
    fn cv_slope_arithmetic() {
        assert!((docv_dt_cv(-1e-3, 0.05, 0.03) - 8e-5).abs() < 1e-18);
        assert_eq!(docv_dt_cv(0.0, 0.05, 0.03), 0.0);
        assert_eq!(docv_dt_cc(1e-4), 1e-4);
    }

    // identical levels spanning the whole divergence band
    fn flat_soh_surface() -> OcvSurface {
        let coeffs = PolyCoeffs::new([3.3, 1.2, -0.9, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        OcvSurface::new(25.0, vec![SohLevel { soh: 0.55, coeffs }, SohLevel { soh: 1.0, coeffs }]).unwrap()
    }

    #[test]
    fn fixed_point_on_soh_independent_surface() {
        let s = flat_soh_surface();
        let spec = synthetic::default_cell();
        let (soc, soh, i) = (0.65, 0.85, 1.1);
        let ocv = s.ocv(soc, 1.0).unwrap();
        let d = i / (spec.q0_as() * soh) * s.docv_dsoc(soc, 1.0).unwrap();
        let e = iterate_soc_soh(ocv, d, i, &spec, &s).unwrap();
        assert!(e.converged);
        assert!((e.soc - soc).abs() < 1e-6 && (e.soh - soh).abs() < 1e-6);
        // doubling the slope halves the answer
        let d11 = d * soh / 1.04;
        let e1 = iterate_soc_soh(ocv, d11, i, &spec, &s).unwrap();
        let e2 = iterate_soc_soh(ocv, 2.0 * d11, i, &spec, &s).unwrap();
        assert!((e1.soh - 1.04).abs() < 1e-6);
        assert!((e2.soh - 0.52).abs() < 1e-6);
        assert!(iterate_soc_soh(ocv, 0.0, i, &spec, &s).is_err());
        assert!(iterate_soc_soh(ocv, d, 0.0, &spec, &s).is_err());
        assert!(matches!(iterate_soc_soh(ocv, d / 3.0, i, &spec, &s), Err(Error::Divergence { .. })));
    }

    #[test]
    fn mid_soc_on_reference_surface_fails_to_settle() {
        let s = synthetic::reference_surface();
        let spec = synthetic::default_cell();
        let i = 1.1;
        let mut bad = 0;
        for k in 0..=20 {
            let soh = 0.8 + 0.01 * k as f64;
            let ocv = s.ocv(0.5, soh).unwrap();
            let d = i / (spec.q0_as() * soh) * s.docv_dsoc(0.5, soh).unwrap();
            match iterate_soc_soh(ocv, d, i, &spec, &s) {
                Ok(e) if e.converged && (e.soh - soh).abs() < 0.01 => {}
                _ => bad += 1,
            }
        }
        assert!(bad >= 5, "only {bad} of 21 failed");
    }

    proptest! {
        #[test]
        fn fixed_point_in_convergent_band(soc in 0.57f64..0.77, soh in 0.8f64..1.0) {
            let s = synthetic::reference_surface();
            let spec = synthetic::default_cell();
            let i = 1.1;
            let ocv = s.ocv(soc, soh).unwrap();
            let d = i / (spec.q0_as() * soh) * s.docv_dsoc(soc, soh).unwrap();
            let e = iterate_soc_soh(ocv, d, i, &spec, &s).unwrap();
            prop_assert!(e.converged);
            prop_assert!((e.soc - soc).abs() < 1e-5 && (e.soh - soh).abs() < 1e-5);
        }

        #[test]
        fn three_point_roundtrip(r2 in 0.005f64..0.1, tau in 20.0f64..300.0, ocv in 3.3f64..4.1, i0 in 0.2f64..3.0) {
            let y = |x: f64| ocv + i0 * r2 * (-x / tau).exp();
            let p = solve_three_point(y(10.0), y(65.0), y(120.0), 55.0, 10.0, i0).unwrap();
            prop_assert!(((p.tau - tau) / tau).abs() < 1e-6);
            prop_assert!((p.ocv - ocv).abs() < 1e-9);
            prop_assert!(((p.r2 - r2) / r2).abs() < 1e-6);
        }
    }

    #[test]
    fn dr_requires_time_order() {
        let w = window_from(exp_window(3.9, 0.02, 60.0, 200), 1.0);
        let gap = CcGap { net_charge_as: 396.0, i_cc: 1.1 };
        let r = estimate_with_dr_compensation(
            &w,
            &w,
            &gap,
            &synthetic::default_cell(),
            &synthetic::reference_surface(),
            &EstimatorConfig::default(),
            None,
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
