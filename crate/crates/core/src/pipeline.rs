//! Relaxation detection, simulated scenario runs and timing harness.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm_sim::{
    self, CellModel, CellState, CellTrace, EcmParams, NoiseModel, ParamSchedule, ParamSlope, SimOptions,
};
use crate::error::{Error, Result};
use crate::ocv_model::{CellSpec, OcvSurface};
use crate::relax_estimator::{
    estimate_from_relaxation, estimate_with_dr_compensation, onset_step, CcGap, EstimatorConfig, ParamEstimate,
    RelaxationWindow, RestMode, SocSohEstimate,
};
use crate::synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Minimum voltage at the first rest sample.
    pub v_threshold: f64,
    /// |i| at or below this counts as rest.
    pub i_zero_band: f64,
    /// Rest must cover this many seconds plus 15 samples.
    pub x3: f64,
    /// Loaded samples required before the rest.
    pub min_loaded_samples: usize,
    /// Rows kept in the window's pre-rest tail.
    pub tail_points: usize,
    /// Max (max - min) / |mean| of the loaded current for a CC classification.
    pub cc_rel_spread: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            v_threshold: 3.9,
            i_zero_band: 0.01,
            x3: 120.0,
            min_loaded_samples: 50,
            tail_points: 50,
            cc_rel_spread: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedRelaxation {
    pub window: RelaxationWindow,
    /// Index of the first rest sample.
    pub onset: usize,
    /// One past the last rest sample.
    pub end: usize,
}

fn ols_slope(pts: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = pts.fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mx) * (p.1 - my), a.1 + (p.0 - mx).powi(2)));
    sxy / sxx
}

/// Rest periods that qualify for estimation, in time order.
pub fn detect_relaxations(trace: &CellTrace, cfg: &DetectConfig) -> Result<Vec<DetectedRelaxation>> {
    let s = &trace.samples;
    if s.is_empty() {
        return Err(Error::Detection("empty trace".into()));
    }
    let dt = trace
        .sample_dt()
        .ok_or_else(|| Error::Detection("trace needs at least two samples".into()))?;
    let min_rest = (cfg.x3 / dt - 1e-9).ceil() as usize + 15;
    let loaded_n = cfg.min_loaded_samples.max(cfg.tail_points).max(2);
    let resting = |k: usize| s[k].i.abs() <= cfg.i_zero_band;
    let mut out = Vec::new();
    let mut k = 0;
    while k < s.len() {
        if !resting(k) {
            k += 1;
            continue;
        }
        let start = k;
        while k < s.len() && resting(k) {
            k += 1;
        }
        let end = k;
        if end - start < min_rest || start < loaded_n || s[start].v <= cfg.v_threshold {
            continue;
        }
        let loaded = &s[start - loaded_n..start];
        let sign = s[start - 1].i.signum();
        if loaded.iter().any(|r| r.i.abs() <= cfg.i_zero_band || r.i.signum() != sign) {
            continue;
        }
        let (lo, hi) = loaded.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, r| (a.0.min(r.i), a.1.max(r.i)));
        let mean_i = loaded.iter().map(|r| r.i).sum::<f64>() / loaded_n as f64;
        let tail = &s[start - cfg.tail_points..start];
        let di_dt = ols_slope(tail.iter().map(|r| (r.t, r.i)));
        let mode = if hi - lo <= cfg.cc_rel_spread * mean_i.abs() {
            RestMode::AfterCc
        } else if sign > 0.0 && di_dt < 0.0 {
            RestMode::AfterCv
        } else {
            continue;
        };
        let t0 = s[start].t;
        let pre_tail: Vec<(f64, f64)> = tail.iter().map(|r| (r.t, r.v)).collect();
        let delta_u = onset_step(&pre_tail, t0, s[start].v)?;
        let window = RelaxationWindow {
            t0,
            samples: s[start..end].iter().map(|r| (r.t - t0, r.v)).collect(),
            i0: match mode {
                RestMode::AfterCc => tail.iter().map(|r| r.i).sum::<f64>() / tail.len() as f64,
                RestMode::AfterCv => s[start - 1].i,
            },
            delta_u,
            pre_tail,
            mode,
            di_dt: if mode == RestMode::AfterCv { di_dt } else { 0.0 },
            pre_tail_uc: None,
        };
        out.push(DetectedRelaxation { window, onset: start, end });
    }
    if out.is_empty() {
        return Err(Error::Detection(format!(
            "no rest of {min_rest}+ samples after load with onset above {} V",
            cfg.v_threshold
        )));
    }
    Ok(out)
}

/// Charge moved over `[t_a, t_b)` by the recorded currents.
pub fn net_charge(trace: &CellTrace, a: usize, b: usize) -> f64 {
    trace.samples[a..b.min(trace.samples.len() - 1)]
        .iter()
        .zip(&trace.samples[a + 1..])
        .map(|(r, n)| r.i * (n.t - r.t))
        .sum()
}

/// The first two charge-side CC windows and the gap between them.
pub fn pair_for_dr(trace: &CellTrace, found: &[DetectedRelaxation]) -> Result<(usize, usize, CcGap)> {
    let mut it = found
        .iter()
        .enumerate()
        .filter(|(_, d)| d.window.mode == RestMode::AfterCc && d.window.i0 > 0.0)
        .map(|(k, _)| k);
    match (it.next(), it.next()) {
        (Some(a), Some(b)) => {
            let gap = CcGap {
                net_charge_as: net_charge(trace, found[a].onset, found[b].onset),
                i_cc: found[b].window.i0,
            };
            Ok((a, b, gap))
        }
        _ => Err(Error::Detection("fewer than two charge-side CC windows".into())),
    }
}

/// Attach the true capacitor voltage to the pre-rest tail and re-derive the
/// onset step from the capacitor-free voltage.
pub fn attach_true_uc(det: &mut DetectedRelaxation, trace: &CellTrace) -> Result<()> {
    let n = det.window.pre_tail.len();
    if trace.truth.len() != trace.samples.len() || det.onset < n {
        return Err(Error::Input("capacitor voltage needs an aligned truth channel".into()));
    }
    let uc: Vec<f64> = trace.truth[det.onset - n..det.onset].iter().map(|t| t.uc).collect();
    let corrected: Vec<(f64, f64)> = det.window.pre_tail.iter().zip(&uc).map(|(p, u)| (p.0, p.1 - u)).collect();
    let v0 = trace.samples[det.onset].v - trace.truth[det.onset].uc;
    det.window.delta_u = onset_step(&corrected, det.window.t0, v0)?;
    det.window.pre_tail_uc = Some(uc);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Sim1rc,
    Sim2rc,
    ExperimentCsv { trace: PathBuf, truth: Option<PathBuf> },
}

impl DataSource {
    pub fn is_sim(&self) -> bool {
        !matches!(self, DataSource::ExperimentCsv { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub known_capacitor_voltage: bool,
    pub no_voltage_noise: bool,
    pub fixed_rc_parameters: bool,
    pub accurate_dv_dt: bool,
    pub fixed_ocv_curve: bool,
    pub known_soc: bool,
}

impl Toggles {
    /// Cumulative simplification ladder: row `k` enables the first `k`.
    pub fn ladder(k: usize) -> Self {
        let on = |j: usize| k > j;
        Self {
            known_capacitor_voltage: on(0),
            no_voltage_noise: on(1),
            fixed_rc_parameters: on(2),
            accurate_dv_dt: on(3),
            fixed_ocv_curve: on(4),
            known_soc: on(5),
        }
    }

    pub const LADDER_NAMES: [&'static str; 7] = [
        "Default",
        "Known capacitor voltage",
        "No voltage noise",
        "Fixed RC parameters",
        "More accurate dV/dt",
        "Fixed OCV curve",
        "Known SOC",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub data_source: DataSource,
    pub c_rate: f64,
    pub temperature_c: f64,
    pub toggles: Toggles,
    pub seed: u64,
    pub dr_compensation: bool,
    pub estimator: EstimatorConfig,
    pub detect: DetectConfig,
}

impl ScenarioSpec {
    pub fn sim(data_source: DataSource, c_rate: f64, toggles: Toggles, seed: u64) -> Self {
        Self {
            data_source,
            c_rate,
            temperature_c: synthetic::TEMPERATURE_C,
            toggles,
            seed,
            dr_compensation: true,
            estimator: EstimatorConfig::default(),
            detect: DetectConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_rate > 0.0) {
            return Err(Error::InvalidParams(format!("c_rate must be positive, got {}", self.c_rate)));
        }
        let t = &self.toggles;
        if !self.data_source.is_sim()
            && (t.known_capacitor_voltage || t.no_voltage_noise || t.fixed_rc_parameters || t.accurate_dv_dt)
        {
            return Err(Error::InvalidParams("simulation toggles set on an experiment source".into()));
        }
        Ok(())
    }
}

/// SOC at which constant-parameter runs take their values.
pub const FIXED_RC_SOC: f64 = 0.65;

/// Default SOC-linear ECM schedule for cell `cell` of `n_cells`; cells
/// differ by a spread of resistance and capacitance multipliers.
pub fn sim_schedule(cell: usize, n_cells: usize, fixed: bool) -> Result<ParamSchedule> {
    let u = if n_cells > 1 { 2.0 * cell as f64 / (n_cells - 1) as f64 - 1.0 } else { 0.0 };
    let (mr, mc) = (1.0 + 0.15 * u, 1.0 - 0.1 * u);
    let base = EcmParams::new(0.025 * mr, 0.006 * mr, 7000.0 * mc)?;
    let slope = ParamSlope { r1: 0.02 * mr, r2: 0.012 * mr, c: 0.0 };
    let sched = ParamSchedule::soc_linear(base, slope)?;
    if fixed {
        ParamSchedule::constant(sched.at(FIXED_RC_SOC))
    } else {
        Ok(sched)
    }
}

/// Measurement noise of simulated runs. The current is an exact input there.
pub fn sim_noise(seed: u64, no_voltage_noise: bool) -> NoiseModel {
    NoiseModel { sigma_v: if no_voltage_noise { 0.0 } else { 0.15e-3 }, sigma_i: 0.0, seed }
}

/// Surface the estimator sees: the full one, or the true-SOH curve alone.
pub fn estimator_surface(surface: &OcvSurface, soh_true: f64, fixed: bool) -> Result<OcvSurface> {
    if fixed {
        OcvSurface::single(surface.temperature_c(), soh_true.min(1.0), surface.coeffs_at(soh_true)?)
    } else {
        Ok(surface.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub cell_id: usize,
    pub t0_s: f64,
    pub soc: f64,
    pub soh: f64,
    pub r1_ohm: f64,
    pub r2_ohm: f64,
    pub c_f: f64,
    pub ocv_v: f64,
    pub docv_dt_vps: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plain,
    DrComp,
    Ukf,
}

impl EstimateRecord {
    pub fn new(cell_id: usize, t0_s: f64, est: &SocSohEstimate, p: &ParamEstimate, method: Method) -> Self {
        Self {
            cell_id,
            t0_s,
            soc: est.soc,
            soh: est.soh,
            r1_ohm: p.r1,
            r2_ohm: p.r2,
            c_f: p.c,
            ocv_v: p.ocv,
            docv_dt_vps: est.docv_dt,
            iterations: est.iterations,
            converged: est.converged,
            method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: usize,
    pub soh_true: f64,
    pub soc_true: Option<f64>,
    pub estimate: Option<EstimateRecord>,
    pub error: Option<String>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: ScenarioSpec,
    pub records: Vec<RunRecord>,
    pub soc_rmse: f64,
    pub soh_rmse: f64,
    pub n_failed: usize,
    pub mean_runtime_ms: f64,
}

/// Estimate on one trace with the scenario's toggles; returns the record and
/// the SOC truth it should be compared with.
pub fn estimate_trace(
    trace: &CellTrace,
    cell: usize,
    spec: &CellSpec,
    surface: &OcvSurface,
    sc: &ScenarioSpec,
) -> Result<(EstimateRecord, Option<f64>)> {
    let mut found = detect_relaxations(trace, &sc.detect)?;
    let truth_at = |k: usize| trace.truth.get(k).map(|t| t.soc);
    let soh_truth = trace.truth.first().map(|t| t.soh);
    let surf = match (sc.toggles.fixed_ocv_curve, soh_truth) {
        (true, Some(h)) => estimator_surface(surface, h, true)?,
        (true, None) => return Err(Error::Input("fixed OCV curve needs a truth channel".into())),
        (false, _) => surface.clone(),
    };
    let tail = if sc.toggles.accurate_dv_dt { 2 } else { sc.estimator.tail_points };
    let cfg = EstimatorConfig { tail_points: tail, ..sc.estimator };
    // trim first so the onset step sees the same tail as dV/dt
    let prep = |d: &mut DetectedRelaxation| -> Result<()> {
        d.window.trim_tail(tail);
        if sc.toggles.known_capacitor_voltage {
            attach_true_uc(d, trace)?;
        }
        Ok(())
    };
    let known = |k: usize| -> Result<Option<f64>> {
        if sc.toggles.known_soc {
            truth_at(k).map(Some).ok_or_else(|| Error::Input("known SOC needs a truth channel".into()))
        } else {
            Ok(None)
        }
    };
    if sc.dr_compensation {
        let (a, b, gap) = pair_for_dr(trace, &found)?;
        prep(&mut found[a])?;
        prep(&mut found[b])?;
        let (wa, wb) = (found[a].window.clone(), found[b].window.clone());
        let ks = match (known(found[a].onset)?, known(found[b].onset)?) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        };
        let dr = estimate_with_dr_compensation(&wa, &wb, &gap, spec, &surf, &cfg, ks)?;
        let rec = EstimateRecord::new(cell, wa.t0, &dr.estimate, &dr.windows[0].1, Method::DrComp);
        Ok((rec, truth_at(found[a].onset)))
    } else {
        let k = found
            .iter()
            .position(|d| d.window.i0 > 0.0)
            .ok_or_else(|| Error::Detection("no charge-side window".into()))?;
        prep(&mut found[k])?;
        let w = found[k].window.clone();
        let (est, p) = estimate_from_relaxation(&w, spec, &surf, &cfg, known(found[k].onset)?)?;
        Ok((EstimateRecord::new(cell, w.t0, &est, &p, Method::Plain), truth_at(found[k].onset)))
    }
}

/// Per-run noise seed.
fn run_seed(seed: u64, cell: usize, level: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((cell as u64) << 32) ^ level as u64
}

/// Simulated trace for one (cell, SOH) run of a scenario.
pub fn scenario_trace(sc: &ScenarioSpec, cell: usize, n_cells: usize, level: usize, soh: f64) -> Result<CellTrace> {
    let spec = synthetic::default_cell();
    let surface = synthetic::reference_surface();
    let sched = sim_schedule(cell, n_cells, sc.toggles.fixed_rc_parameters)?;
    let model = match sc.data_source {
        DataSource::Sim1rc => CellModel::one_rc(sched),
        DataSource::Sim2rc => CellModel::two_rc(sched),
        DataSource::ExperimentCsv { .. } => return Err(Error::InvalidParams("not a simulated source".into())),
    };
    let profile = ecm_sim::incremental_profile(sc.c_rate, &spec)?;
    let noise = sim_noise(run_seed(sc.seed, cell, level), sc.toggles.no_voltage_noise);
    let opts = SimOptions { initial: CellState::new(0.0), temperature_c: sc.temperature_c, ..SimOptions::default() };
    ecm_sim::simulate_profile(&profile, &spec, &model, &surface, soh, &noise, &opts)
}

/// SOH levels of a scenario run, evenly spaced over [0.8, 1.0].
pub fn soh_levels(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.9],
        _ => (0..n).map(|k| 0.8 + 0.2 * k as f64 / (n - 1) as f64).collect(),
    }
}

fn rmse(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |a, x| (a.0 + x * x, a.1 + 1));
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

/// Run every (cell, SOH level) combination of a scenario.
pub fn run_scenario(sc: &ScenarioSpec, n_cells: usize, n_soh_levels: usize) -> Result<RunReport> {
    sc.validate()?;
    let scen_err = |e: Error| Error::Scenario { name: format!("{:?} {} C", sc.data_source, sc.c_rate), source: Box::new(e) };
    let spec = synthetic::default_cell();
    let surface = synthetic::reference_surface();
    let records: Vec<RunRecord> = match &sc.data_source {
        DataSource::ExperimentCsv { trace, truth } => {
            let tr = crate::io::read_trace(trace, truth.as_deref()).map_err(scen_err)?;
            let soh_true = tr.truth.first().map_or(f64::NAN, |t| t.soh);
            vec![one_run(&tr, 0, soh_true, &spec, &surface, sc)]
        }
        _ => {
            let levels = soh_levels(n_soh_levels);
            let jobs: Vec<(usize, usize, f64)> = (0..n_cells)
                .flat_map(|c| levels.iter().enumerate().map(move |(l, &h)| (c, l, h)))
                .collect();
            jobs.par_iter()
                .map(|&(c, l, h)| match scenario_trace(sc, c, n_cells, l, h) {
                    Ok(tr) => one_run(&tr, c, h, &spec, &surface, sc),
                    Err(e) => RunRecord {
                        cell: c,
                        soh_true: h,
                        soc_true: None,
                        estimate: None,
                        error: Some(scen_err(e).to_string()),
                        runtime_ms: 0.0,
                    },
                })
                .collect()
        }
    };
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.estimate.is_some()).collect();
    let soc_rmse = rmse(ok.iter().filter_map(|r| Some(r.estimate?.soc - r.soc_true?)));
    let soh_rmse = rmse(ok.iter().map(|r| r.estimate.map_or(f64::NAN, |e| e.soh) - r.soh_true));
    let mean_runtime_ms = ok.iter().map(|r| r.runtime_ms).sum::<f64>() / ok.len().max(1) as f64;
    Ok(RunReport {
        spec: sc.clone(),
        n_failed: records.len() - ok.len(),
        records,
        soc_rmse,
        soh_rmse,
        mean_runtime_ms,
    })
}

fn one_run(tr: &CellTrace, cell: usize, soh_true: f64, spec: &CellSpec, surface: &OcvSurface, sc: &ScenarioSpec) -> RunRecord {
    let t = Instant::now();
    let res = estimate_trace(tr, cell, spec, surface, sc);
    let runtime_ms = t.elapsed().as_secs_f64() * 1e3;
    match res {
        Ok((rec, soc_true)) => RunRecord { cell, soh_true, soc_true, estimate: Some(rec), error: None, runtime_ms },
        Err(e) => RunRecord { cell, soh_true, soc_true: None, estimate: None, error: Some(e.to_string()), runtime_ms },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub c_rate: f64,
    pub rung: usize,
    pub soc_rmse: f64,
    pub soh_rmse: f64,
    pub n_failed: usize,
}

/// The cumulative simplification table for one simulated source.
pub fn scenario_ladder(source: &DataSource, c_rates: &[f64], n_cells: usize, n_soh: usize, seed: u64) -> Result<Vec<LadderRow>> {
    let mut rows = Vec::new();
    for rung in 0..Toggles::LADDER_NAMES.len() {
        for &c in c_rates {
            let sc = ScenarioSpec::sim(source.clone(), c, Toggles::ladder(rung), seed);
            let r = run_scenario(&sc, n_cells, n_soh)?;
            rows.push(LadderRow { c_rate: c, rung, soc_rmse: r.soc_rmse, soh_rmse: r.soh_rmse, n_failed: r.n_failed });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    /// UKF process-noise multiplier; 1 for the other methods.
    pub q_scale: f64,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub samples: usize,
    /// Median relative to the plain estimator (or to the first method when
    /// plain is absent).
    pub ratio: f64,
}

struct Prepared {
    w1: RelaxationWindow,
    w2: RelaxationWindow,
    gap: CcGap,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Wall-clock medians per method over `reps` repetitions on every trace;
/// the first `warmup` repetitions are discarded.
pub fn benchmark(
    methods: &[(Method, f64)],
    traces: &[CellTrace],
    spec: &CellSpec,
    surface: &OcvSurface,
    reps: usize,
    warmup: usize,
) -> Result<Vec<BenchRow>> {
    if reps < 100 {
        return Err(Error::InvalidParams(format!("need at least 100 repetitions, got {reps}")));
    }
    let detect = DetectConfig::default();
    let cfg = EstimatorConfig::default();
    let prepared = traces
        .iter()
        .map(|tr| {
            let found = detect_relaxations(tr, &detect)?;
            let (a, b, gap) = pair_for_dr(tr, &found)?;
            Ok(Prepared { w1: found[a].window.clone(), w2: found[b].window.clone(), gap })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(methods.len());
    for &(method, q_scale) in methods {
        let ukf_cfg = crate::baseline_ukf::UkfConfig { q_scale, ..Default::default() };
        let mut times = Vec::with_capacity(reps * traces.len());
        for rep in 0..reps + warmup {
            for (tr, p) in traces.iter().zip(&prepared) {
                let ms = match method {
                    Method::Plain => {
                        let t = Instant::now();
                        let r = estimate_from_relaxation(&p.w1, spec, surface, &cfg, None);
                        let e = t.elapsed();
                        std::hint::black_box(r)?;
                        e.as_secs_f64() * 1e3
                    }
                    Method::DrComp => {
                        let t = Instant::now();
                        let r = estimate_with_dr_compensation(&p.w1, &p.w2, &p.gap, spec, surface, &cfg, None);
                        let e = t.elapsed();
                        std::hint::black_box(r)?;
                        e.as_secs_f64() * 1e3
                    }
                    Method::Ukf => {
                        let r = crate::baseline_ukf::run_ukf_protocol(tr, spec, surface, &ukf_cfg, &detect)?;
                        std::hint::black_box(r.soh);
                        r.runtime.as_secs_f64() * 1e3
                    }
                };
                if rep >= warmup {
                    times.push(ms);
                }
            }
        }
        let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
        let samples = times.len();
        rows.push(BenchRow { method, q_scale, median_ms: median(&mut times), mean_ms, samples, ratio: 1.0 });
    }
    let base = rows
        .iter()
        .find(|r| r.method == Method::Plain)
        .or(rows.first())
        .map_or(f64::NAN, |r| r.median_ms);
    for r in &mut rows {
        r.ratio = r.median_ms / base;
    }
    Ok(rows)
}
