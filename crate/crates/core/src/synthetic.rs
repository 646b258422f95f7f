//! Synthetic NMC-like OCV surface used by the simulation harness, tests and
//! the CLI defaults.

use crate::error::Result;
use crate::ocv_model::{fit_ocv_poly, CellSpec, OcvSurface, PolyCoeffs, SohLevel};

/// Fresh-cell curve, ascending powers of SOC.
const FRESH: [f64; 10] = [
    3.21,
    3.765_417_372_342_643_6,
    -12.163_256_260_426_513,
    -18.061_356_820_245_717,
    387.129_302_477_888_8,
    -1_580.062_789_624_347,
    3_132.995_792_060_529,
    -3_345.536_555_673_224_6,
    1_847.724_497_756_627_7,
    -414.790_531_095_299_34,
];

/// Aging shift amplitude, volts per unit SOH loss.
const AGING_GAIN: f64 = 0.3;

pub const SOH_LEVELS: [f64; 6] = [0.75, 0.8, 0.85, 0.9, 0.95, 1.0];
pub const TEMPERATURE_C: f64 = 25.0;

/// Generating function of the synthetic surface.
///
/// Aging lowers the curve above mid-SOC and raises it below, with the shift
/// vanishing at both ends of the SOC range.
pub fn reference_ocv(soc: f64, soh: f64) -> f64 {
    let fresh = PolyCoeffs::new(FRESH).expect("finite constants").eval(soc);
    let w = 4.0 * soc * (1.0 - soc);
    fresh + (1.0 - soh) * AGING_GAIN * (0.5 - soc) * w * w
}

/// Surface fitted level-by-level from samples of [`reference_ocv`].
pub fn reference_surface() -> OcvSurface {
    fitted_surface(&SOH_LEVELS, 201).expect("reference surface fit")
}

pub fn fitted_surface(levels: &[f64], n_samples: usize) -> Result<OcvSurface> {
    let grid = levels
        .iter()
        .map(|&soh| {
            let samples: Vec<(f64, f64)> = (0..n_samples)
                .map(|k| {
                    let s = k as f64 / (n_samples - 1) as f64;
                    (s, reference_ocv(s, soh))
                })
                .collect();
            Ok(SohLevel { soh, coeffs: fit_ocv_poly(&samples)?.coeffs })
        })
        .collect::<Result<Vec<_>>>()?;
    OcvSurface::new(TEMPERATURE_C, grid)
}

/// The reference curve at a single SOH, with no SOH dependence.
pub fn fixed_surface(soh: f64) -> OcvSurface {
    let coeffs = reference_surface().coeffs_at(soh).expect("soh inside reference band");
    OcvSurface::single(TEMPERATURE_C, soh.min(1.0), coeffs).expect("valid single-level surface")
}

/// 18650-class NMC cell, 2.2 Ah.
pub fn default_cell() -> CellSpec {
    CellSpec { q0_ah: 2.2, v_min: 2.75, v_max: 4.2 }
}
