//! End-to-end acceptance criteria. Each prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::time::{Duration, Instant};

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use relaxest::analysis::{
    convergence_map, f_symmetric, linspace, manufactured_errors, noise_amplification_f, optimal_x2_gap,
};
use relaxest::ecm_sim::{self, CellModel, CellState, EcmParams, NoiseModel, ParamSchedule, Segment, SimOptions};
use relaxest::pipeline::{self, DataSource, Method, ScenarioSpec, Toggles};
use relaxest::relax_estimator::{solve_three_point, EstimatorConfig, ParamEstimate};
use relaxest::synthetic;
use relaxest::tracking::{ekf_step, EkfConfig, EkfState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rmse(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

fn exact_recovery() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for c in [0.2, 0.5, 1.0] {
        let sc = ScenarioSpec::sim(DataSource::Sim1rc, c, Toggles::ladder(6), 1);
        let r = pipeline::run_scenario(&sc, 6, 5).expect("scenario runs");
        let bad = r.n_failed > 0 || !r.soc_rmse.is_finite() || !r.soh_rmse.is_finite();
        worst = worst.max(if bad { f64::INFINITY } else { r.soc_rmse.max(r.soh_rmse) });
        notes.push(format!("{c} C: SOC {:.1e} SOH {:.1e}", r.soc_rmse, r.soh_rmse));
    }
    outcome(worst <= 1e-6, format!("{}; limit 1e-6", notes.join(", ")))
}

fn noise_propagation() -> Outcome {
    let (r2, c, i0) = (0.03, 2000.0, 2.2);
    let tau = r2 * c;
    let x1 = 10.0;
    let sigma_y = 0.15e-3;
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise = Normal::new(0.0, sigma_y).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for ratio in [0.3, 0.6, 1.0, 2.0, 3.0] {
        let x_d = ratio * tau;
        let y = |x: f64| 3.9 + i0 * r2 * (-x / tau).exp();
        let clean = [y(x1), y(x1 + x_d), y(x1 + 2.0 * x_d)];
        let mut ocvs = Vec::with_capacity(n);
        for _ in 0..n {
            let v: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
            if let Ok(p) = solve_three_point(v[0], v[1], v[2], x_d, x1, i0) {
                ocvs.push(p.ocv);
            }
        }
        let mean = ocvs.iter().sum::<f64>() / ocvs.len() as f64;
        let sd = (ocvs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (ocvs.len() - 1) as f64).sqrt();
        let want = noise_amplification_f(x1, x1 + x_d, x1 + 2.0 * x_d, tau).unwrap().sqrt() * sigma_y;
        let rel = sd / want - 1.0;
        pass &= ocvs.len() == n && rel.abs() <= 0.15;
        notes.push(format!("x_d/tau {ratio}: {:+.1}%", 100.0 * rel));
    }
    outcome(pass, notes.join(", "))
}

fn theorem_suite() -> Outcome {
    let tau = 60.0;
    let f_far = noise_amplification_f(0.0, 50.0 * tau, 100.0 * tau, tau).unwrap();
    let f_near = noise_amplification_f(0.0, 1e-6 * tau, 2e-6 * tau, tau).unwrap();
    let grid: Vec<f64> = linspace(0.01, 10.0, 200).iter().map(|&u| f_symmetric(u * tau, tau)).collect();
    let decreasing = grid.windows(2).all(|w| w[1] < w[0]);
    let (mut worst_gap, mut worst_x3) = (0.0, 0.0);
    for x3 in linspace(0.1 * tau, 5.0 * tau, 50) {
        let g = optimal_x2_gap(0.0, x3, tau).unwrap();
        let ratio = g.f_mid / g.f_star;
        if ratio > worst_gap {
            (worst_gap, worst_x3) = (ratio, x3 / tau);
        }
    }
    let checks = [
        (f_far - 1.0).abs() <= 1e-10,
        f_near > 1e6,
        decreasing,
        worst_gap <= 1.05,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "|f(50 tau) - 1| = {:.1e}, f(1e-6 tau) = {:.1e}, decreasing {decreasing}, max f_mid/f_star {worst_gap:.3} at x3 = {worst_x3:.2} tau (limit 1.05)",
            (f_far - 1.0).abs(),
            f_near
        ),
    )
}

fn fixed_point() -> Outcome {
    let surface = synthetic::reference_surface();
    let spec = synthetic::default_cell();
    let cfg = EstimatorConfig::default();
    let (mut soc_max, mut soh_max): (f64, f64) = (0.0, 0.0);
    let mut unconverged = 0;
    for soc in linspace(0.57, 0.77, 10) {
        for soh in linspace(0.8, 1.0, 10) {
            let (es, eh, ok) = manufactured_errors(&surface, &spec, &cfg, soc, soh).unwrap();
            unconverged += usize::from(!ok);
            soc_max = soc_max.max(es.abs());
            soh_max = soh_max.max(eh.abs());
        }
    }
    outcome(
        unconverged == 0 && soc_max <= 0.005 && soh_max <= 0.005,
        format!("max |SOC err| {soc_max:.1e}, max |SOH err| {soh_max:.1e}, unconverged {unconverged}/100"),
    )
}

fn convergence_property() -> Outcome {
    let surface = synthetic::fitted_surface(&synthetic::SOH_LEVELS, 201).unwrap();
    let spec = synthetic::default_cell();
    let cells = convergence_map(&surface, &spec, &linspace(0.0, 1.0, 101), &linspace(0.8, 1.0, 21));
    let max_soc = cells.iter().map(|c| c.soc_rmse).fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    let column = |lo: f64, hi: f64| {
        let v: Vec<f64> = cells
            .iter()
            .filter(|c| c.soh_true == 0.8 && (lo - 1e-9..=hi + 1e-9).contains(&c.soc_true))
            .map(|c| c.soh_rmse)
            .collect();
        rmse(&v)
    };
    let (near_half, band) = (column(0.48, 0.52), column(0.57, 0.77));
    let ratio = near_half / band;
    outcome(
        max_soc <= 0.005 && ratio >= 5.0,
        format!("max SOC RMSE {:.3}%, SOH RMSE near 0.5 {near_half:.2e} vs band {band:.2e} (x{ratio:.0})", 100.0 * max_soc),
    )
}

fn scenario_ordering() -> Outcome {
    let reference = [2.57, 6.11, 11.41];
    let mut soh = Vec::new();
    let mut failed = 0;
    for c in [0.2, 0.5, 1.0] {
        let r = pipeline::run_scenario(&ScenarioSpec::sim(DataSource::Sim1rc, c, Toggles::default(), 1), 6, 5).unwrap();
        failed += r.n_failed;
        soh.push(100.0 * r.soh_rmse);
    }
    let monotone = soh.windows(2).all(|w| w[1] > w[0]);
    let in_band = soh.iter().zip(reference).all(|(&s, r)| s >= r / 3.0 && s <= r * 3.0);
    let two_rc = |t: Toggles| pipeline::run_scenario(&ScenarioSpec::sim(DataSource::Sim2rc, 1.0, t, 1), 6, 5).unwrap();
    let (d, k) = (two_rc(Toggles::default()), two_rc(Toggles::ladder(1)));
    failed += d.n_failed + k.n_failed;
    let known_helps = k.soh_rmse < d.soh_rmse;
    outcome(
        failed == 0 && monotone && in_band && known_helps,
        format!(
            "1RC SOH RMSE {:.2}/{:.2}/{:.2}% at 0.2/0.5/1 C; 2RC 1 C default {:.2}% vs known Uc {:.2}%; failed runs {failed}",
            soh[0],
            soh[1],
            soh[2],
            100.0 * d.soh_rmse,
            100.0 * k.soh_rmse
        ),
    )
}

fn dr_benefit() -> Outcome {
    let mut sc = ScenarioSpec::sim(DataSource::Sim1rc, 1.0, Toggles { no_voltage_noise: true, ..Toggles::default() }, 5);
    let with = pipeline::run_scenario(&sc, 4, 5).unwrap();
    sc.dr_compensation = false;
    let without = pipeline::run_scenario(&sc, 4, 5).unwrap();
    let err = |r: &pipeline::RunRecord| r.estimate.map(|e| e.soh - r.soh_true);
    let pairs: Vec<(f64, f64)> =
        with.records.iter().zip(&without.records).filter_map(|(a, b)| Some((err(a)?, err(b)?))).collect();
    let wins = pairs.iter().filter(|(a, b)| a.abs() < b.abs()).count();
    let (ra, rb) = (
        rmse(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
        rmse(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
    );
    outcome(
        pairs.len() == 20 && ra < rb,
        format!("{} paired runs, SOH RMSE {:.2}% with vs {:.2}% without, {wins} wins", pairs.len(), 100.0 * ra, 100.0 * rb),
    )
}

fn ekf_tracking() -> Outcome {
    let spec = synthetic::default_cell();
    let surface = synthetic::reference_surface();
    let e = EcmParams::new(0.03, 0.015, 6000.0).unwrap();
    let params = ParamEstimate { r1: e.r1, r2: e.r2, c: e.c, tau: e.tau(), ocv: 0.0 };
    let soh = 0.9;
    let model = CellModel::one_rc(ParamSchedule::constant(e).unwrap());
    let profile = [
        Segment::Cc { duration: 1200.0, current: 0.5 * spec.q0_ah, v_limit: None },
        Segment::Rest { duration: 200.0 },
    ];
    let opts = SimOptions { initial: CellState::new(0.4), ..SimOptions::default() };
    let tr = ecm_sim::simulate_profile(&profile, &spec, &model, &surface, soh, &NoiseModel::cycler(3), &opts).unwrap();
    let mut st = EkfState::new(0.5, 0.0, &EkfConfig::default()).unwrap();
    let t0 = tr.samples[0].t;
    let (mut worst_late, mut psd, mut settled_at) = (0.0f64, true, None);
    for (m, t) in tr.samples.iter().zip(&tr.truth) {
        st = match ekf_step(&st, m, &params, soh, &spec, &surface) {
            Ok(s) => s,
            Err(_) => return outcome(false, format!("filter error at t = {}", m.t)),
        };
        let sym = (st.p - st.p.transpose()).amax() <= 1e-12;
        psd &= sym && SymmetricEigen::new(st.p).eigenvalues.min() >= -1e-12;
        let err = (st.soc() - t.soc).abs();
        if settled_at.is_none() && err < 0.01 {
            settled_at = Some(m.t - t0);
        }
        if m.t - t0 >= 600.0 {
            worst_late = worst_late.max(err);
        }
    }
    outcome(
        worst_late < 0.01 && psd,
        format!(
            "first |err| < 1% at {:.0} s, max |err| after 600 s {:.2}%, symmetric PSD {psd}",
            settled_at.unwrap_or(f64::NAN),
            100.0 * worst_late
        ),
    )
}

fn benchmark() -> Outcome {
    let sc = ScenarioSpec::sim(DataSource::Sim1rc, 0.5, Toggles::default(), 1);
    let levels = pipeline::soh_levels(5);
    let traces: Vec<_> =
        levels.iter().enumerate().map(|(k, &h)| pipeline::scenario_trace(&sc, k, 5, k, h).unwrap()).collect();
    let methods = [(Method::Plain, 1.0), (Method::DrComp, 1.0), (Method::Ukf, 0.1), (Method::Ukf, 1.0), (Method::Ukf, 10.0)];
    let rows = pipeline::benchmark(
        &methods,
        &traces,
        &synthetic::default_cell(),
        &synthetic::reference_surface(),
        100,
        10,
    )
    .unwrap();
    let dr = rows[1].ratio;
    let ukf_min = rows[2..].iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    outcome(
        ukf_min >= 50.0 && (1.2..=2.5).contains(&dr),
        format!(
            "plain {:.1} us, dR/plain {dr:.2}, UKF/plain {} (q scale 0.1/1/10)",
            1e3 * rows[0].median_ms,
            rows[2..].iter().map(|r| format!("{:.0}", r.ratio)).collect::<Vec<_>>().join("/")
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("exact recovery", exact_recovery, Duration::from_secs(10)),
        ("noise propagation", noise_propagation, Duration::from_secs(30)),
        ("theorem suite", theorem_suite, Duration::from_secs(5)),
        ("fixed point", fixed_point, Duration::from_secs(10)),
        ("convergence map", convergence_property, Duration::from_secs(60)),
        ("scenario ordering", scenario_ordering, Duration::from_secs(300)),
        ("dR compensation", dr_benefit, Duration::from_secs(60)),
        ("EKF tracking", ekf_tracking, Duration::from_secs(30)),
        ("benchmark", benchmark, Duration::from_secs(120)),
    ];
    let mut failed = Vec::new();
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        let took = t.elapsed();
        let pass = o.pass && took <= *limit;
        println!(
            "{} criterion {} ({name}): {} [{:.2} s of {} s]",
            if pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
