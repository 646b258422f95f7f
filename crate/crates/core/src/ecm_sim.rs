//! First- and second-order RC cell simulator with exact exponential
//! discretization and measurement noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocv_model::{CellSpec, OcvSurface};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    pub r1: f64,
    pub r2: f64,
    pub c: f64,
}

impl EcmParams {
    pub fn new(r1: f64, r2: f64, c: f64) -> Result<Self> {
        let p = Self { r1, r2, c };
        p.validate()?;
        Ok(p)
    }

    pub fn tau(&self) -> f64 {
        self.r2 * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r1 >= 0.0 && self.r2 > 0.0 && self.c > 0.0 && self.tau().is_finite()) {
            return Err(Error::InvalidParams(format!(
                "need r1 >= 0, r2 > 0, c > 0 (got {}, {}, {})",
                self.r1, self.r2, self.c
            )));
        }
        Ok(())
    }
}

/// Per-unit-SOC change of each ECM parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSlope {
    pub r1: f64,
    pub r2: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Constant,
    SocLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    pub mode: ScheduleMode,
    pub base: EcmParams,
    pub slope_per_soc: ParamSlope,
}

impl ParamSchedule {
    pub fn constant(base: EcmParams) -> Result<Self> {
        base.validate()?;
        Ok(Self { mode: ScheduleMode::Constant, base, slope_per_soc: ParamSlope::default() })
    }

    /// `base` holds the values at SOC = 0.
    pub fn soc_linear(base: EcmParams, slope: ParamSlope) -> Result<Self> {
        let s = Self { mode: ScheduleMode::SocLinear, base, slope_per_soc: slope };
        s.at(0.0).validate()?;
        s.at(1.0).validate()?;
        Ok(s)
    }

    pub fn at(&self, soc: f64) -> EcmParams {
        match self.mode {
            ScheduleMode::Constant => self.base,
            ScheduleMode::SocLinear => {
                let s = soc.clamp(0.0, 1.0);
                EcmParams {
                    r1: self.base.r1 + self.slope_per_soc.r1 * s,
                    r2: self.base.r2 + self.slope_per_soc.r2 * s,
                    c: self.base.c + self.slope_per_soc.c * s,
                }
            }
        }
    }
}

/// How the RC branch is realised in the simulated cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RcStructure {
    Single,
    /// Fixed second pair in series with the scheduled one.
    Explicit { r: f64, c: f64 },
    /// Scheduled r2 and tau shared between two pairs, `share` going to the first.
    Split { share: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    pub schedule: ParamSchedule,
    pub rc: RcStructure,
}

impl CellModel {
    pub fn one_rc(schedule: ParamSchedule) -> Self {
        Self { schedule, rc: RcStructure::Single }
    }

    /// Two pairs with r2 and tau split 70/30.
    pub fn two_rc(schedule: ParamSchedule) -> Self {
        Self { schedule, rc: RcStructure::Split { share: 0.7 } }
    }

    /// `(r1, [(r, tau); 2])` at `soc`; an absent pair has r = 0.
    fn branches(&self, soc: f64) -> (f64, [(f64, f64); 2]) {
        let p = self.schedule.at(soc);
        match self.rc {
            RcStructure::Single => (p.r1, [(p.r2, p.tau()), (0.0, 1.0)]),
            RcStructure::Explicit { r, c } => (p.r1, [(p.r2, p.tau()), (r, r * c)]),
            RcStructure::Split { share } => {
                let o = 1.0 - share;
                (p.r1, [(share * p.r2, share * p.tau()), (o * p.r2, o * p.tau())])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellState {
    pub soc: f64,
    pub uc: f64,
    #[serde(default)]
    pub uc2: f64,
}

impl CellState {
    pub fn new(soc: f64) -> Self {
        Self { soc, uc: 0.0, uc2: 0.0 }
    }

    pub fn uc_total(&self) -> f64 {
        self.uc + self.uc2
    }

    pub fn soc_in_range(&self) -> bool {
        (-0.01..=1.01).contains(&self.soc)
    }
}

fn relax(uc: f64, r: f64, tau: f64, i: f64, dt: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    let decay = (-dt / tau).exp();
    uc * decay + r * (1.0 - decay) * i
}

/// One step of the 1RC model under constant current `i` over `dt` seconds.
/// `q_ah` is the present capacity.
pub fn step(state: CellState, params: &EcmParams, i: f64, dt: f64, q_ah: f64) -> CellState {
    CellState {
        soc: state.soc + i * dt / (q_ah * 3600.0),
        uc: relax(state.uc, params.r2, params.tau(), i, dt),
        uc2: state.uc2,
    }
}

fn step_model(state: CellState, model: &CellModel, i: f64, dt: f64, q_ah: f64) -> CellState {
    let (_, pairs) = model.branches(state.soc);
    CellState {
        soc: state.soc + i * dt / (q_ah * 3600.0),
        uc: relax(state.uc, pairs[0].0, pairs[0].1, i, dt),
        uc2: relax(state.uc2, pairs[1].0, pairs[1].1, i, dt),
    }
}

/// Terminal voltage OCV + Uc (+ Uc2) + R1 I.
pub fn terminal_voltage(
    state: &CellState,
    params: &EcmParams,
    i: f64,
    surface: &OcvSurface,
    soh: f64,
) -> Result<f64> {
    Ok(surface.ocv_relaxed(state.soc, soh)? + state.uc_total() + params.r1 * i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Rest { duration: f64 },
    /// Constant current; on reaching `v_limit` the profile jumps to the next CV segment.
    Cc { duration: f64, current: f64, v_limit: Option<f64> },
    /// Constant voltage; ends early once the current falls below `i_cutoff`.
    Cv { duration: f64, voltage: f64, i_max: f64, i_cutoff: f64 },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Rest { duration } | Segment::Cc { duration, .. } | Segment::Cv { duration, .. } => duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_v: f64,
    pub sigma_i: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    /// 0.15 mV / 0.1 mA, the cycler's measurement RMS.
    pub fn cycler(seed: u64) -> Self {
        Self { sigma_v: 0.15e-3, sigma_i: 0.1e-3, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub i: f64,
    pub v: f64,
    pub temp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub t: f64,
    pub soc: f64,
    pub uc: f64,
    pub soh: f64,
}

/// Measured channels plus (optional) ground truth. Row `k` holds the current
/// applied over `[t_k, t_{k+1})` and the terminal voltage at `t_k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellTrace {
    pub samples: Vec<Sample>,
    pub truth: Vec<Truth>,
    /// Set when the simulated SOC left [0, 1].
    pub soc_excursion: bool,
}

impl CellTrace {
    pub fn validate(&self) -> Result<()> {
        if self.samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Input("trace times must be strictly increasing".into()));
        }
        if !self.truth.is_empty() && self.truth.len() != self.samples.len() {
            return Err(Error::Input("truth and measurement row counts differ".into()));
        }
        Ok(())
    }

    pub fn sample_dt(&self) -> Option<f64> {
        if self.samples.len() < 2 {
            return None;
        }
        Some((self.samples[self.samples.len() - 1].t - self.samples[0].t) / (self.samples.len() - 1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub sample_dt: f64,
    pub initial: CellState,
    pub temperature_c: f64,
    pub t_start: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { sample_dt: 1.0, initial: CellState::default(), temperature_c: 25.0, t_start: 0.0 }
    }
}

/// Simulate `profile` on a cell of capacity `spec.q0_ah * soh_true`.
pub fn simulate_profile(
    profile: &[Segment],
    spec: &CellSpec,
    model: &CellModel,
    surface: &OcvSurface,
    soh_true: f64,
    noise: &NoiseModel,
    opts: &SimOptions,
) -> Result<CellTrace> {
    if !(opts.sample_dt > 0.0) {
        return Err(Error::Simulation("sample_dt must be positive".into()));
    }
    if profile.is_empty() {
        return Err(Error::Simulation("empty profile".into()));
    }
    if !(noise.sigma_v >= 0.0 && noise.sigma_i >= 0.0) {
        return Err(Error::Simulation("noise sigmas must be non-negative".into()));
    }
    let q = spec.q0_ah * soh_true;
    let dt = opts.sample_dt;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let nv = Normal::new(0.0, noise.sigma_v).map_err(|e| Error::Simulation(e.to_string()))?;
    let ni = Normal::new(0.0, noise.sigma_i).map_err(|e| Error::Simulation(e.to_string()))?;

    let total: f64 = profile.iter().map(Segment::duration).sum();
    let cap = (total / dt).ceil() as usize + 1;
    let mut trace = CellTrace {
        samples: Vec::with_capacity(cap),
        truth: Vec::with_capacity(cap),
        soc_excursion: false,
    };
    let mut state = opts.initial;
    let mut k: u64 = 0;
    let mut seg_idx = 0;
    while seg_idx < profile.len() {
        let seg = profile[seg_idx];
        let n = (seg.duration() / dt).round() as u64;
        let mut jump_to_cv = false;
        for _ in 0..n {
            let (r1, _) = model.branches(state.soc);
            let ocv = surface.ocv_relaxed(state.soc, soh_true)?;
            let i = match seg {
                Segment::Rest { .. } => 0.0,
                Segment::Cc { current, v_limit, .. } => {
                    let v = ocv + state.uc_total() + r1 * current;
                    if v_limit.is_some_and(|lim| v >= lim) {
                        jump_to_cv = true;
                        break;
                    }
                    current
                }
                Segment::Cv { voltage, i_max, i_cutoff, .. } => {
                    if r1 <= 0.0 {
                        return Err(Error::Simulation("CV regulation needs r1 > 0".into()));
                    }
                    let i = (voltage - ocv - state.uc_total()) / r1;
                    if i > i_max * (1.0 + 1e-9) {
                        return Err(Error::Simulation(format!(
                            "CV setpoint {voltage} V needs {i:.4} A, above the {i_max} A limit"
                        )));
                    }
                    if i < i_cutoff {
                        break;
                    }
                    i
                }
            };
            let t = opts.t_start + k as f64 * dt;
            let v_true = ocv + state.uc_total() + r1 * i;
            let (ev, ei) = (
                if noise.sigma_v > 0.0 { nv.sample(&mut rng) } else { 0.0 },
                if noise.sigma_i > 0.0 { ni.sample(&mut rng) } else { 0.0 },
            );
            trace.samples.push(Sample { t, i: i + ei, v: v_true + ev, temp: opts.temperature_c });
            trace.truth.push(Truth { t, soc: state.soc, uc: state.uc_total(), soh: soh_true });
            state = step_model(state, model, i, dt, q);
            if !(0.0..=1.0).contains(&state.soc) {
                trace.soc_excursion = true;
            }
            k += 1;
        }
        seg_idx += 1;
        if jump_to_cv {
            match profile[seg_idx..].iter().position(|s| matches!(s, Segment::Cv { .. })) {
                Some(off) => seg_idx += off,
                None => break,
            }
        }
    }
    // closing zero-current row carrying the final state
    let t = opts.t_start + k as f64 * dt;
    let ocv = surface.ocv_relaxed(state.soc, soh_true)?;
    let ev = if noise.sigma_v > 0.0 { nv.sample(&mut rng) } else { 0.0 };
    trace.samples.push(Sample { t, i: 0.0, v: ocv + state.uc_total() + ev, temp: opts.temperature_c });
    trace.truth.push(Truth { t, soc: state.soc, uc: state.uc_total(), soh: soh_true });
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementalProfile {
    pub c_rate: f64,
    pub rest_s: f64,
    /// Pulse current (negative: discharge) and duration.
    pub pulse: (f64, f64),
    pub soc_step: f64,
}

/// Charge from empty in `soc_step` increments (at nominal capacity), each
/// followed by rest, a short discharge pulse and another rest; ends in CV at
/// `spec.v_max`.
pub fn build_incremental_capacity_profile(
    c_rate: f64,
    spec: &CellSpec,
    rest_s: f64,
    pulse: (f64, f64),
    soc_step: f64,
) -> Result<Vec<Segment>> {
    if !(c_rate > 0.0) {
        return Err(Error::InvalidParams("c_rate must be positive".into()));
    }
    if !(soc_step > 0.0 && soc_step <= 1.0) {
        return Err(Error::InvalidParams("soc_step must be in (0, 1]".into()));
    }
    let i_cc = c_rate * spec.q0_ah;
    let cc_s = soc_step * 3600.0 / c_rate;
    // pulses give back a little charge each cycle; overshoot the count and let
    // the voltage limit hand over to CV
    let cycles = (1.2 / soc_step).ceil() as usize;
    let mut out = Vec::with_capacity(4 * cycles + 1);
    for _ in 0..cycles {
        out.push(Segment::Cc { duration: cc_s, current: i_cc, v_limit: Some(spec.v_max) });
        out.push(Segment::Rest { duration: rest_s });
        out.push(Segment::Cc { duration: pulse.1, current: pulse.0, v_limit: None });
        out.push(Segment::Rest { duration: rest_s });
    }
    out.push(Segment::Cv {
        duration: 4.0 * 3600.0,
        voltage: spec.v_max,
        i_max: i_cc.max(spec.q0_ah),
        i_cutoff: 0.05 * spec.q0_ah,
    });
    Ok(out)
}

/// Incremental profile with the default 3-minute rests and 10 s, 1 C pulse.
pub fn incremental_profile(c_rate: f64, spec: &CellSpec) -> Result<Vec<Segment>> {
    build_incremental_capacity_profile(c_rate, spec, 180.0, (-spec.q0_ah, 10.0), 0.05)
}
