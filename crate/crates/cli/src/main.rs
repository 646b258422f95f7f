use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relaxest::analysis::{self, linspace};
use relaxest::baseline_ukf::{run_ukf_protocol, UkfConfig};
use relaxest::ecm_sim::CellTrace;
use relaxest::io;
use relaxest::ocv_model::{CellSpec, OcvSurface};
use relaxest::pipeline::{
    self, DataSource, DetectConfig, EstimateRecord, Method, ScenarioSpec, Toggles,
};
use relaxest::relax_estimator::EstimatorConfig;
use relaxest::synthetic;
use relaxest::tracking::{track_trace, EkfConfig};

#[derive(Parser)]
#[command(name = "relaxest", version, about = "SOC/SOH estimation from charge-side relaxations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate an incremental-capacity charge profile on an ECM cell.
    Simulate(SimulateArgs),
    /// List the qualifying rest windows of a trace.
    Detect(DetectArgs),
    /// SOC/SOH from the first rest (or the first two with --dr-comp).
    Estimate(EstimateArgs),
    /// EKF SOC tracking with parameters identified from the trace.
    Track(TrackArgs),
    /// Relaxation estimates next to the UKF baseline on one trace.
    CompareUkf(CompareArgs),
    /// Simplification ladder over simulated cells, or one scenario from JSON.
    Scenarios(ScenarioArgs),
    /// Noise amplification f over a range of x3.
    Sensitivity(SensitivityArgs),
    /// |L| and iteration errors over a SOC x SOH grid.
    ConvergenceMap(MapArgs),
    /// Run-time medians of the estimators.
    Benchmark(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Sim1rc,
    Sim2rc,
}

impl From<Source> for DataSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Sim1rc => DataSource::Sim1rc,
            Source::Sim2rc => DataSource::Sim2rc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    #[value(name = "1rc")]
    OneRc,
    #[value(name = "2rc")]
    TwoRc,
}

#[derive(Args)]
struct CellArgs {
    /// Capacity of a new cell, Ah.
    #[arg(long, default_value_t = synthetic::default_cell().q0_ah)]
    q0_ah: f64,
}

impl CellArgs {
    fn spec(&self) -> Result<CellSpec> {
        let d = synthetic::default_cell();
        Ok(CellSpec::new(self.q0_ah, d.v_min, d.v_max)?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "sim1rc")]
    source: Source,
    #[arg(long, default_value_t = 0.5)]
    c_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    soh: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Cell index within a batch of --n-cells (sets the parameter spread).
    #[arg(long, default_value_t = 0)]
    cell: usize,
    #[arg(long, default_value_t = 1)]
    n_cells: usize,
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    fixed_rc: bool,
    #[arg(long)]
    out: PathBuf,
    /// Truth channels (SOC, capacitor voltage, SOH).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the OCV surface used by the simulator.
    #[arg(long)]
    surface_out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 3.9)]
    v_threshold: f64,
    #[arg(long, default_value_t = 0.01)]
    i_zero_band: f64,
    #[arg(long, default_value_t = 120.0)]
    x3: f64,
    /// JSON output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// OCV surface JSON; the built-in reference surface when absent.
    #[arg(long)]
    surface: Option<PathBuf>,
    /// Estimator settings JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    x3: Option<f64>,
    #[arg(long)]
    dr_comp: bool,
    /// Use the truth SOC instead of inverting the OCV curve.
    #[arg(long)]
    known_soc: bool,
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    surface: Option<PathBuf>,
    /// Initial SOC; defaults to inverting the first voltage sample.
    #[arg(long)]
    soc_init: Option<f64>,
    /// EKF settings JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Identify SOH with dR compensation over the first two rests.
    #[arg(long)]
    dr_comp: bool,
    #[command(flatten)]
    cell: CellArgs,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    surface: Option<PathBuf>,
    /// UKF process-noise multiplier.
    #[arg(long, default_value_t = 1.0)]
    q_scale: f64,
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, value_enum, conflicts_with = "config")]
    group: Option<Group>,
    /// One ScenarioSpec as JSON; writes the full run report.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.5, 1.0])]
    c_rates: Vec<f64>,
    #[arg(long, default_value_t = 6)]
    n_cells: usize,
    #[arg(long, default_value_t = 5)]
    n_soh: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long, default_value_t = 10.0)]
    x1: f64,
    #[arg(long, default_value_t = 60.0)]
    tau: f64,
    #[arg(long, default_value_t = 30.0)]
    x3_min: f64,
    #[arg(long, default_value_t = 600.0)]
    x3_max: f64,
    #[arg(long, default_value_t = 58)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    surface: Option<PathBuf>,
    #[arg(long, default_value_t = 101)]
    soc_n: usize,
    #[arg(long, default_value_t = 0.8)]
    soh_min: f64,
    #[arg(long, default_value_t = 1.0)]
    soh_max: f64,
    #[arg(long, default_value_t = 21)]
    soh_n: usize,
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "sim1rc")]
    source: Source,
    #[arg(long, default_value_t = 0.5)]
    c_rate: f64,
    #[arg(long, default_value_t = 5)]
    n_traces: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// UKF process-noise multipliers, one row each.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 10.0])]
    q_scales: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_surface(path: Option<&Path>) -> Result<OcvSurface> {
    match path {
        Some(p) => Ok(io::read_surface(p)?),
        None => Ok(synthetic::reference_surface()),
    }
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    match out {
        Some(p) => io::write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if a.cell >= a.n_cells {
        bail!("--cell {} out of range for --n-cells {}", a.cell, a.n_cells);
    }
    let toggles = Toggles { no_voltage_noise: a.no_noise, fixed_rc_parameters: a.fixed_rc, ..Toggles::default() };
    let sc = ScenarioSpec::sim(a.source.into(), a.c_rate, toggles, a.seed);
    let tr = pipeline::scenario_trace(&sc, a.cell, a.n_cells, 0, a.soh)?;
    io::write_trace(&tr, &a.out, a.truth.as_deref())?;
    if let Some(p) = &a.surface_out {
        io::write_json(p, &synthetic::reference_surface())?;
    }
    eprintln!("wrote {} samples to {}", tr.samples.len(), a.out.display());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let tr = io::read_trace(&a.trace, None)?;
    let cfg = DetectConfig { v_threshold: a.v_threshold, i_zero_band: a.i_zero_band, x3: a.x3, ..DetectConfig::default() };
    let found = pipeline::detect_relaxations(&tr, &cfg)?;
    emit_json(a.out.as_deref(), &serde_json::to_value(&found)?)
}

fn estimator_config(path: Option<&Path>, x3: Option<f64>) -> Result<EstimatorConfig> {
    let mut cfg: EstimatorConfig = match path {
        Some(p) => io::read_json(p)?,
        None => EstimatorConfig::default(),
    };
    if let Some(x3) = x3 {
        cfg.x3 = x3;
    }
    Ok(cfg)
}

/// Scenario wrapper around an on-disk trace.
fn csv_scenario(trace: &Path, truth: Option<&Path>, est: EstimatorConfig, dr: bool, known_soc: bool) -> ScenarioSpec {
    let source = DataSource::ExperimentCsv { trace: trace.to_path_buf(), truth: truth.map(Path::to_path_buf) };
    let mut sc = ScenarioSpec::sim(source, 1.0, Toggles { known_soc, ..Toggles::default() }, 0);
    sc.dr_compensation = dr;
    sc.detect.x3 = est.x3;
    sc.estimator = est;
    sc
}

fn estimate_on(tr: &CellTrace, spec: &CellSpec, surface: &OcvSurface, sc: &ScenarioSpec) -> Result<(EstimateRecord, Option<f64>)> {
    Ok(pipeline::estimate_trace(tr, 0, spec, surface, sc)?)
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let spec = a.cell.spec()?;
    let surface = load_surface(a.surface.as_deref())?;
    let cfg = estimator_config(a.config.as_deref(), a.x3)?;
    let sc = csv_scenario(&a.trace, a.truth.as_deref(), cfg, a.dr_comp, a.known_soc);
    sc.validate()?;
    let tr = io::read_trace(&a.trace, a.truth.as_deref())?;
    let (rec, soc_truth) = estimate_on(&tr, &spec, &surface, &sc)?;
    let mut v = serde_json::to_value(rec)?;
    if let Some(s) = soc_truth {
        v["soc_truth"] = s.into();
    }
    if let Some(t) = tr.truth.first() {
        v["soh_truth"] = t.soh.into();
    }
    emit_json(a.out.as_deref(), &v)
}

fn track(a: TrackArgs) -> Result<()> {
    let spec = a.cell.spec()?;
    let surface = load_surface(a.surface.as_deref())?;
    let cfg: EkfConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => EkfConfig::default(),
    };
    let tr = io::read_trace(&a.trace, None)?;
    let sc = csv_scenario(&a.trace, None, EstimatorConfig::default(), a.dr_comp, false);
    let (rec, _) = estimate_on(&tr, &spec, &surface, &sc).context("identifying parameters for the filter")?;
    let params = relaxest::relax_estimator::ParamEstimate {
        r1: rec.r1_ohm,
        r2: rec.r2_ohm,
        c: rec.c_f,
        tau: rec.r2_ohm * rec.c_f,
        ocv: rec.ocv_v,
    };
    let soh = rec.soh.clamp(surface.soh_band().0, surface.soh_band().1);
    let soc0 = match a.soc_init {
        Some(s) => s,
        None => {
            let first = tr.samples.first().context("empty trace")?;
            let v = first.v - params.r1 * first.i;
            match surface.invert(v, soh, (0.0, 1.0)) {
                Ok(s) => s,
                // outside the curve's range: start at the nearer end
                Err(_) if v < surface.ocv(0.5, soh)? => 0.0,
                Err(_) => 1.0,
            }
        }
    };
    let rows = track_trace(&tr, &params, soh, soc0, &spec, &surface, &cfg)?;
    io::write_csv(&a.out, &rows)?;
    eprintln!("tracked {} samples with SOH {:.4}", rows.len(), soh);
    Ok(())
}

fn compare_ukf(a: CompareArgs) -> Result<()> {
    let spec = a.cell.spec()?;
    let surface = load_surface(a.surface.as_deref())?;
    let tr = io::read_trace(&a.trace, a.truth.as_deref())?;
    let cfg = EstimatorConfig::default();
    let plain = estimate_on(&tr, &spec, &surface, &csv_scenario(&a.trace, None, cfg, false, false))?;
    let dr = estimate_on(&tr, &spec, &surface, &csv_scenario(&a.trace, None, cfg, true, false))?;
    let ukf_cfg = UkfConfig { q_scale: a.q_scale, ..UkfConfig::default() };
    let ukf = run_ukf_protocol(&tr, &spec, &surface, &ukf_cfg, &DetectConfig::default())?;
    let truth_soc = |t: f64| tr.truth.iter().find(|r| r.t >= t).map(|r| r.soc);
    let v = serde_json::json!({
        "plain": plain.0,
        "dr_comp": dr.0,
        "ukf": {
            "soc": ukf.soc,
            "soh": ukf.soh,
            "t_end_s": ukf.t_end,
            "runtime_ms": ukf.runtime.as_secs_f64() * 1e3,
            "q_scale": a.q_scale,
        },
        "truth": {
            "soh": tr.truth.first().map(|t| t.soh),
            "soc_plain": truth_soc(plain.0.t0_s),
            "soc_dr_comp": truth_soc(dr.0.t0_s),
            "soc_ukf": truth_soc(ukf.t_end),
        },
    });
    emit_json(a.out.as_deref(), &v)
}

fn scenarios(a: ScenarioArgs) -> Result<()> {
    if let Some(p) = &a.config {
        let sc: ScenarioSpec = io::read_json(p)?;
        let report = pipeline::run_scenario(&sc, a.n_cells, a.n_soh)?;
        io::write_json(&a.out, &report)?;
        eprintln!("SOC RMSE {:.2}%  SOH RMSE {:.2}%", 100.0 * report.soc_rmse, 100.0 * report.soh_rmse);
        return Ok(());
    }
    let source = match a.group {
        Some(Group::OneRc) => DataSource::Sim1rc,
        Some(Group::TwoRc) => DataSource::Sim2rc,
        None => bail!("pass --group or --config"),
    };
    let rows = pipeline::scenario_ladder(&source, &a.c_rates, a.n_cells, a.n_soh, a.seed)?;
    // one line per ladder rung, SOC/SOH RMSE (%) per C-rate
    let mut text = String::from("scenario");
    for c in &a.c_rates {
        write!(text, ",soc_rmse_pct_{c}C,soh_rmse_pct_{c}C")?;
    }
    text.push('\n');
    for (rung, name) in Toggles::LADDER_NAMES.iter().enumerate() {
        text.push_str(name);
        for c in &a.c_rates {
            let r = rows.iter().find(|r| r.rung == rung && r.c_rate == *c).context("missing ladder row")?;
            write!(text, ",{:.2},{:.2}", 100.0 * r.soc_rmse, 100.0 * r.soh_rmse)?;
        }
        text.push('\n');
    }
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    let failed: usize = rows.iter().map(|r| r.n_failed).sum();
    if failed > 0 {
        eprintln!("{failed} runs failed and are excluded from the RMSE");
    }
    Ok(())
}

fn sensitivity(a: SensitivityArgs) -> Result<()> {
    if !(a.x3_min > a.x1 && a.x3_max >= a.x3_min) {
        bail!("need x1 < x3-min <= x3-max");
    }
    let rows = analysis::sensitivity_sweep(a.x1, a.tau, &linspace(a.x3_min, a.x3_max, a.n))?;
    io::write_csv(&a.out, &rows)?;
    Ok(())
}

fn convergence_map(a: MapArgs) -> Result<()> {
    let spec = a.cell.spec()?;
    let surface = load_surface(a.surface.as_deref())?;
    let cells = analysis::convergence_map(
        &surface,
        &spec,
        &linspace(0.0, 1.0, a.soc_n),
        &linspace(a.soh_min, a.soh_max, a.soh_n),
    );
    io::write_csv(&a.out, &cells)?;
    Ok(())
}

fn benchmark(a: BenchArgs) -> Result<()> {
    let spec = synthetic::default_cell();
    let surface = synthetic::reference_surface();
    let sc = ScenarioSpec::sim(a.source.into(), a.c_rate, Toggles::default(), a.seed);
    let levels = pipeline::soh_levels(a.n_traces);
    let traces = levels
        .iter()
        .enumerate()
        .map(|(k, &h)| pipeline::scenario_trace(&sc, k, a.n_traces, k, h))
        .collect::<relaxest::Result<Vec<_>>>()?;
    let mut methods = vec![(Method::Plain, 1.0), (Method::DrComp, 1.0)];
    methods.extend(a.q_scales.iter().map(|&q| (Method::Ukf, q)));
    let rows = pipeline::benchmark(&methods, &traces, &spec, &surface, a.reps, a.warmup)?;
    io::write_csv(&a.out, &rows)?;
    Ok(())
}

fn main() -> ExitCode {
    let res = match Cli::parse().cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Detect(a) => detect(a),
        Cmd::Estimate(a) => estimate(a),
        Cmd::Track(a) => track(a),
        Cmd::CompareUkf(a) => compare_ukf(a),
        Cmd::Scenarios(a) => scenarios(a),
        Cmd::Sensitivity(a) => sensitivity(a),
        Cmd::ConvergenceMap(a) => convergence_map(a),
        Cmd::Benchmark(a) => benchmark(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
