//! Two-state EKF on one reference cell plus series-pack SOC propagation.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::ecm_sim::{CellTrace, Sample};
use crate::error::{Error, Result};
use crate::ocv_model::{CellSpec, OcvSurface};
use crate::relax_estimator::ParamEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// Process noise density, per second, for (soc, uc).
    pub q_process: [f64; 2],
    /// Measurement variance, V^2.
    pub r_meas: f64,
    /// Initial covariance diagonal.
    pub p0: [f64; 2],
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            q_process: [1e-10, 1e-8],
            r_meas: 0.15e-3f64.powi(2) + 1e-3f64.powi(2),
            p0: [1e-2, 1e-4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    /// (soc, uc)
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    /// Per-second process noise.
    pub q_process: Matrix2<f64>,
    pub r_meas: f64,
    t_prev: Option<f64>,
    i_prev: f64,
    /// Innovation and its variance from the latest update.
    pub innovation: Option<(f64, f64)>,
}

impl EkfState {
    pub fn new(soc: f64, uc: f64, cfg: &EkfConfig) -> Result<Self> {
        if !(cfg.r_meas > 0.0) {
            return Err(Error::Filter("measurement variance must be positive".into()));
        }
        if cfg.q_process.iter().chain(&cfg.p0).any(|&v| !(v >= 0.0)) {
            return Err(Error::Filter("noise and covariance diagonals must be non-negative".into()));
        }
        Ok(Self {
            x: Vector2::new(soc, uc),
            p: Matrix2::from_diagonal(&Vector2::from(cfg.p0)),
            q_process: Matrix2::from_diagonal(&Vector2::from(cfg.q_process)),
            r_meas: cfg.r_meas,
            t_prev: None,
            i_prev: 0.0,
            innovation: None,
        })
    }

    pub fn soc(&self) -> f64 {
        self.x[0]
    }

    pub fn uc(&self) -> f64 {
        self.x[1]
    }

    /// Normalised innovation squared of the latest update.
    pub fn nis(&self) -> Option<f64> {
        self.innovation.map(|(y, s)| y * y / s)
    }
}

fn min_eig_sym2(p: &Matrix2<f64>) -> f64 {
    let half_tr = 0.5 * (p[(0, 0)] + p[(1, 1)]);
    let det = p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)];
    half_tr - (half_tr * half_tr - det).max(0.0).sqrt()
}

/// One predict/update cycle. The first call only updates.
pub fn ekf_step(
    state: &EkfState,
    meas: &Sample,
    params: &ParamEstimate,
    soh_i: f64,
    spec: &CellSpec,
    surface: &OcvSurface,
) -> Result<EkfState> {
    if ![meas.t, meas.i, meas.v].iter().all(|v| v.is_finite()) {
        return Err(Error::Measurement(format!("non-finite sample at t = {}", meas.t)));
    }
    if !(soh_i > 0.0) {
        return Err(Error::Domain(format!("SOH must be positive, got {soh_i}")));
    }
    let mut s = *state;
    if let Some(t_prev) = state.t_prev {
        let dt = meas.t - t_prev;
        if !(dt > 0.0) {
            return Err(Error::Measurement(format!("time must increase, got dt = {dt}")));
        }
        let a = (-dt / params.tau).exp();
        let f = Matrix2::new(1.0, 0.0, 0.0, a);
        let i = state.i_prev;
        s.x = Vector2::new(
            state.x[0] + i * dt / (spec.q0_as() * soh_i),
            a * state.x[1] + params.r2 * (1.0 - a) * i,
        );
        s.p = f * state.p * f.transpose() + state.q_process * dt;
    }
    let soc_eval = s.x[0].clamp(0.0, 1.0);
    let slope = surface.docv_dsoc(soc_eval, soh_i)?;
    // linear extension past the ends keeps h consistent with v_hat
    let ocv = surface.ocv(soc_eval, soh_i)? + slope * (s.x[0] - soc_eval);
    let v_hat = ocv + s.x[1] + params.r1 * meas.i;
    let h = RowVector2::new(slope, 1.0);
    let y = meas.v - v_hat;
    let sv = (h * s.p * h.transpose())[(0, 0)] + s.r_meas;
    let k = s.p * h.transpose() / sv;
    s.x += k * y;
    s.p = (Matrix2::identity() - k * h) * s.p;
    s.p = 0.5 * (s.p + s.p.transpose());
    if min_eig_sym2(&s.p) < -1e-12 {
        return Err(Error::FilterHealth(format!("covariance lost positive semidefiniteness at t = {}", meas.t)));
    }
    s.t_prev = Some(meas.t);
    s.i_prev = meas.i;
    s.innovation = Some((y, sv));
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub t: f64,
    pub soc: f64,
    pub uc: f64,
    pub soc_std: f64,
    pub nis: f64,
}

/// Run the filter over a whole trace.
#[allow(clippy::too_many_arguments)]
pub fn track_trace(
    trace: &CellTrace,
    params: &ParamEstimate,
    soh_i: f64,
    soc_init: f64,
    spec: &CellSpec,
    surface: &OcvSurface,
    cfg: &EkfConfig,
) -> Result<Vec<TrackRow>> {
    let mut st = EkfState::new(soc_init, 0.0, cfg)?;
    let mut rows = Vec::with_capacity(trace.samples.len());
    for m in &trace.samples {
        st = ekf_step(&st, m, params, soh_i, spec, surface)?;
        rows.push(TrackRow {
            t: m.t,
            soc: st.soc(),
            uc: st.uc(),
            soc_std: st.p[(0, 0)].max(0.0).sqrt(),
            nis: st.nis().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackSnapshot {
    pub soc0: Vec<f64>,
    pub soh: Vec<f64>,
    pub reference: usize,
}

impl PackSnapshot {
    pub fn new(soc0: Vec<f64>, soh: Vec<f64>, reference: usize) -> Result<Self> {
        if soc0.len() != soh.len() || soc0.is_empty() {
            return Err(Error::InvalidParams("soc0 and soh must be equal, non-zero length".into()));
        }
        if reference >= soc0.len() {
            return Err(Error::InvalidParams(format!("reference index {reference} out of range")));
        }
        if let Some(bad) = soh.iter().find(|&&h| !(h > 0.0 && h <= 1.2)) {
            return Err(Error::Domain(format!("SOH {bad} outside (0, 1.2]")));
        }
        Ok(Self { soc0, soh, reference })
    }
}

/// Every cell moves by the reference cell's SOC change scaled by SOH ratio.
pub fn propagate_pack(snapshot: &PackSnapshot, soc_i_now: f64) -> Result<Vec<f64>> {
    if let Some(bad) = snapshot.soh.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::Domain(format!("SOH must be positive, got {bad}")));
    }
    let i = snapshot.reference;
    let d = soc_i_now - snapshot.soc0[i];
    let h_i = snapshot.soh[i];
    Ok(snapshot.soc0.iter().zip(&snapshot.soh).map(|(&s0, &h)| s0 + d * h_i / h).collect())
}
