//! OCV surface: a family of degree-9 SOC polynomials indexed by SOH level,
//! one surface per temperature.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_COEFFS: usize = 10;
/// Allowed SOH extrapolation beyond the outermost grid levels.
pub const SOH_MARGIN: f64 = 0.05;
const SCAN_STEPS: usize = 1000;
const EDGE_TOL_V: f64 = 1e-9;

/// Polynomial coefficients a0..a9 in ascending powers of SOC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PolyCoeffs([f64; N_COEFFS]);

impl PolyCoeffs {
    pub fn new(a: [f64; N_COEFFS]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite polynomial coefficient".into()));
        }
        Ok(Self(a))
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; N_COEFFS] = a.try_into().map_err(|_| {
            Error::InvalidParams(format!("expected {N_COEFFS} coefficients, got {}", a.len()))
        })?;
        Self::new(arr)
    }

    pub fn as_array(&self) -> &[f64; N_COEFFS] {
        &self.0
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for i in (1..N_COEFFS).rev() {
            acc = acc * x + i as f64 * self.0[i];
        }
        acc
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for i in (2..N_COEFFS).rev() {
            acc = acc * x + (i * (i - 1)) as f64 * self.0[i];
        }
        acc
    }

    /// `(1 - t) * self + t * other`, coefficient by coefficient.
    pub fn lerp(&self, other: &PolyCoeffs, t: f64) -> PolyCoeffs {
        let mut out = [0.0; N_COEFFS];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a + t * (b - a);
        }
        PolyCoeffs(out)
    }
}

impl TryFrom<Vec<f64>> for PolyCoeffs {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<PolyCoeffs> for Vec<f64> {
    fn from(p: PolyCoeffs) -> Self {
        p.0.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyFit {
    pub coeffs: PolyCoeffs,
    pub residual_rms: f64,
}

/// Least-squares degree-9 fit of `(soc, ocv)` samples.
pub fn fit_ocv_poly(samples: &[(f64, f64)]) -> Result<PolyFit> {
    if samples.len() < 20 {
        return Err(Error::Fit(format!("need at least 20 samples, got {}", samples.len())));
    }
    if samples.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
        return Err(Error::Fit("non-finite sample".into()));
    }
    let mut socs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    socs.sort_by(f64::total_cmp);
    if socs[socs.len() - 1] - socs[0] < 0.5 {
        return Err(Error::Fit("samples span less than half of the SOC range".into()));
    }
    if socs.windows(2).any(|w| w[1] - w[0] <= 1e-9) {
        return Err(Error::Fit("duplicate SOC samples".into()));
    }

    let n = samples.len();
    let vander = DMatrix::from_fn(n, N_COEFFS, |r, c| samples[r].0.powi(c as i32));
    let rhs = DVector::from_iterator(n, samples.iter().map(|s| s.1));
    let svd = vander.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-13) {
        return Err(Error::Fit("rank-deficient design matrix".into()));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Fit(e.to_string()))?;
    let resid = &vander * &sol - &rhs;
    let residual_rms = (resid.norm_squared() / n as f64).sqrt();
    Ok(PolyFit { coeffs: PolyCoeffs::from_slice(sol.as_slice())?, residual_rms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SohLevel {
    pub soh: f64,
    pub coeffs: PolyCoeffs,
}

#[derive(Serialize, Deserialize)]
struct SurfaceFile {
    temperature_c: f64,
    grid: Vec<SohLevel>,
}

/// OCV = f(SOC, SOH) at one temperature. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SurfaceFile", into = "SurfaceFile")]
pub struct OcvSurface {
    temperature_c: f64,
    grid: Vec<SohLevel>,
    // per-level values on the 1e-3 SOC scan grid, used by `invert_ocv`
    scan: Vec<Vec<f64>>,
    // rows whose scan values strictly increase
    monotone: Vec<bool>,
}

impl TryFrom<SurfaceFile> for OcvSurface {
    type Error = Error;
    fn try_from(f: SurfaceFile) -> Result<Self> {
        OcvSurface::new(f.temperature_c, f.grid)
    }
}

impl From<OcvSurface> for SurfaceFile {
    fn from(s: OcvSurface) -> Self {
        SurfaceFile { temperature_c: s.temperature_c, grid: s.grid }
    }
}

impl PartialEq for OcvSurface {
    fn eq(&self, other: &Self) -> bool {
        self.temperature_c == other.temperature_c && self.grid == other.grid
    }
}

impl OcvSurface {
    pub fn new(temperature_c: f64, grid: Vec<SohLevel>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidParams("surface needs at least one SOH level".into()));
        }
        if !temperature_c.is_finite() {
            return Err(Error::InvalidParams("non-finite temperature".into()));
        }
        for lvl in &grid {
            if !(lvl.soh > 0.0 && lvl.soh <= 1.0 + 1e-12) {
                return Err(Error::InvalidParams(format!("SOH level {} outside (0, 1]", lvl.soh)));
            }
            PolyCoeffs::new(lvl.coeffs.0)?;
        }
        if grid.windows(2).any(|w| w[1].soh <= w[0].soh) {
            return Err(Error::InvalidParams("SOH levels must be strictly increasing".into()));
        }
        let scan: Vec<Vec<f64>> = grid
            .iter()
            .map(|lvl| {
                (0..=SCAN_STEPS)
                    .map(|k| lvl.coeffs.eval(k as f64 / SCAN_STEPS as f64))
                    .collect()
            })
            .collect();
        let monotone = scan.iter().map(|row| row.windows(2).all(|w| w[1] > w[0])).collect();
        Ok(Self { temperature_c, grid, scan, monotone })
    }

    /// Surface with no SOH dependence.
    pub fn single(temperature_c: f64, soh_level: f64, coeffs: PolyCoeffs) -> Result<Self> {
        Self::new(temperature_c, vec![SohLevel { soh: soh_level, coeffs }])
    }

    pub fn temperature_c(&self) -> f64 {
        self.temperature_c
    }

    pub fn grid(&self) -> &[SohLevel] {
        &self.grid
    }

    /// SOH band accepted by the evaluators. A single-level surface has no SOH
    /// dependence and accepts any positive SOH.
    pub fn soh_band(&self) -> (f64, f64) {
        if self.grid.len() == 1 {
            return (0.0, f64::INFINITY);
        }
        (self.grid[0].soh - SOH_MARGIN, self.grid[self.grid.len() - 1].soh + SOH_MARGIN)
    }

    /// Bracketing level index and interpolation weight for `soh`.
    fn bracket(&self, soh: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.soh_band();
        let inside = if self.grid.len() == 1 { soh > lo && soh < hi } else { soh >= lo && soh <= hi };
        if !inside {
            return Err(Error::Domain(format!("SOH {soh} outside [{lo}, {hi}]")));
        }
        let g = &self.grid;
        if g.len() == 1 || soh <= g[0].soh {
            return Ok((0, 0.0));
        }
        let last = g.len() - 1;
        if soh >= g[last].soh {
            return Ok((last - 1, 1.0));
        }
        let j = g.partition_point(|l| l.soh <= soh) - 1;
        Ok((j, (soh - g[j].soh) / (g[j + 1].soh - g[j].soh)))
    }

    /// Interpolated polynomial at `soh`.
    pub fn coeffs_at(&self, soh: f64) -> Result<PolyCoeffs> {
        let (j, t) = self.bracket(soh)?;
        if self.grid.len() == 1 {
            return Ok(self.grid[0].coeffs);
        }
        Ok(self.grid[j].coeffs.lerp(&self.grid[j + 1].coeffs, t))
    }

    fn check_soc(soc: f64) -> Result<()> {
        if (0.0..=1.0).contains(&soc) {
            Ok(())
        } else {
            Err(Error::Domain(format!("SOC {soc} outside [0, 1]")))
        }
    }

    pub fn ocv(&self, soc: f64, soh: f64) -> Result<f64> {
        Self::check_soc(soc)?;
        Ok(self.coeffs_at(soh)?.eval(soc))
    }

    pub fn docv_dsoc(&self, soc: f64, soh: f64) -> Result<f64> {
        Self::check_soc(soc)?;
        Ok(self.coeffs_at(soh)?.deriv(soc))
    }

    pub fn d2ocv_dsoc2(&self, soc: f64, soh: f64) -> Result<f64> {
        Self::check_soc(soc)?;
        Ok(self.coeffs_at(soh)?.deriv2(soc))
    }

    /// OCV with the small SOC over/undershoot a simulated cell may reach.
    pub(crate) fn ocv_relaxed(&self, soc: f64, soh: f64) -> Result<f64> {
        if !(-0.01..=1.01).contains(&soc) {
            return Err(Error::Domain(format!("SOC {soc} outside [-0.01, 1.01]")));
        }
        Ok(self.coeffs_at(soh)?.eval(soc))
    }

    /// SOC in `band` with OCV(SOC, soh) = `ocv`, preferring increasing-slope
    /// roots and, among those, the one closest to the band center.
    pub fn invert(&self, ocv: f64, soh: f64, band: (f64, f64)) -> Result<f64> {
        let (lo, hi) = band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Domain(format!("SOC band [{lo}, {hi}] not inside [0, 1]")));
        }
        if !ocv.is_finite() {
            return Err(Error::Domain("non-finite OCV".into()));
        }
        let (j, t) = self.bracket(soh)?;
        let poly = self.coeffs_at(soh)?;
        let j2 = (j + 1).min(self.grid.len() - 1);
        let (row_a, row_b) = (&self.scan[j], &self.scan[j2]);

        let steps = SCAN_STEPS as f64;
        let k_lo = ((lo * steps).floor() as usize + 1).min(SCAN_STEPS);
        let k_hi = ((hi * steps).ceil() as usize).saturating_sub(1).min(SCAN_STEPS);

        if self.monotone[j] && self.monotone[j2] {
            return self.invert_monotone(&poly, (row_a, row_b, t), ocv, (lo, hi), (k_lo, k_hi));
        }

        let center = 0.5 * (lo + hi);
        let mut best: Option<f64> = None;
        let mut saw_root = false;
        let mut consider = |x: f64| {
            saw_root = true;
            if poly.deriv(x) > 0.0 && best.is_none_or(|b| (x - center).abs() < (b - center).abs()) {
                best = Some(x);
            }
        };

        // exact band edges plus every table node strictly inside
        let (mut xp, mut gp) = (lo, poly.eval(lo) - ocv);
        let mut step_to = |x: f64, g: f64| {
            if gp == 0.0 {
                consider(xp);
            } else if gp * g < 0.0 {
                consider(polish(&poly, ocv, xp, x, gp));
            }
            xp = x;
            gp = g;
        };
        if k_lo <= k_hi {
            for k in k_lo..=k_hi {
                let g = row_a[k] + t * (row_b[k] - row_a[k]) - ocv;
                step_to(k as f64 / steps, g);
            }
        }
        step_to(hi, poly.eval(hi) - ocv);
        if gp == 0.0 {
            consider(xp);
        }
        if best.is_none() && !saw_root {
            // a root sitting on a band edge can miss by rounding of the level fits
            for x in [lo, hi] {
                if (poly.eval(x) - ocv).abs() <= EDGE_TOL_V && poly.deriv(x) > 0.0 {
                    return Ok(x);
                }
            }
        }
        match best {
            Some(x) => Ok(x),
            None if saw_root => Err(Error::NonPhysicalRoot { ocv }),
            None => Err(Error::NoRoot { ocv, lo, hi }),
        }
    }

    /// Interpolated scan rows are increasing, so at most one node sign change
    /// exists and a binary search finds the same bracket a linear scan would.
    fn invert_monotone(
        &self,
        poly: &PolyCoeffs,
        (row_a, row_b, t): (&[f64], &[f64], f64),
        ocv: f64,
        (lo, hi): (f64, f64),
        (k_lo, k_hi): (usize, usize),
    ) -> Result<f64> {
        let steps = SCAN_STEPS as f64;
        let g_at = |k: usize| row_a[k] + t * (row_b[k] - row_a[k]) - ocv;
        let (g_lo, g_hi) = (poly.eval(lo) - ocv, poly.eval(hi) - ocv);
        let accept = |x: f64| {
            if poly.deriv(x) > 0.0 {
                Ok(x)
            } else {
                Err(Error::NonPhysicalRoot { ocv })
            }
        };
        if g_lo == 0.0 {
            return accept(lo);
        }
        if g_lo > 0.0 || g_hi < 0.0 {
            for x in [lo, hi] {
                if (poly.eval(x) - ocv).abs() <= EDGE_TOL_V && poly.deriv(x) > 0.0 {
                    return Ok(x);
                }
            }
            return Err(Error::NoRoot { ocv, lo, hi });
        }
        let inner = if k_lo <= k_hi { k_hi - k_lo + 1 } else { 0 };
        // first interior node with g >= 0
        let (mut below, mut top) = (0, inner);
        while below < top {
            let mid = (below + top) / 2;
            if g_at(k_lo + mid) < 0.0 {
                below = mid + 1;
            } else {
                top = mid;
            }
        }
        let m = k_lo + below;
        let (a, ga) = if below == 0 { (lo, g_lo) } else { ((m - 1) as f64 / steps, g_at(m - 1)) };
        let (b, gb) = if below == inner { (hi, g_hi) } else { (m as f64 / steps, g_at(m)) };
        if gb == 0.0 {
            return accept(b);
        }
        if ga * gb > 0.0 {
            return Err(Error::NoRoot { ocv, lo, hi });
        }
        accept(polish(poly, ocv, a, b, ga))
    }
}

/// Root of `poly - ocv` in a sign-change bracket: Newton steps kept inside
/// the bracket, bisection when a step would leave it.
fn polish(poly: &PolyCoeffs, ocv: f64, mut a: f64, mut b: f64, fa: f64) -> f64 {
    let neg_at_a = fa < 0.0;
    let mut x = 0.5 * (a + b);
    for _ in 0..100 {
        let g = poly.eval(x) - ocv;
        if g == 0.0 {
            return x;
        }
        if (g < 0.0) == neg_at_a {
            a = x;
        } else {
            b = x;
        }
        if (b - a).abs() < 1e-14 {
            break;
        }
        let d = poly.deriv(x);
        let newton = x - g / d;
        let next = if d != 0.0 && newton > a.min(b) && newton < a.max(b) { newton } else { 0.5 * (a + b) };
        if (next - x).abs() < 1e-15 {
            return next;
        }
        x = next;
    }
    x
}

pub fn eval_ocv(surface: &OcvSurface, soc: f64, soh: f64) -> Result<f64> {
    surface.ocv(soc, soh)
}

pub fn eval_docv_dsoc(surface: &OcvSurface, soc: f64, soh: f64) -> Result<f64> {
    surface.docv_dsoc(soc, soh)
}

pub fn eval_d2ocv_dsoc2(surface: &OcvSurface, soc: f64, soh: f64) -> Result<f64> {
    surface.d2ocv_dsoc2(soc, soh)
}

pub fn invert_ocv(surface: &OcvSurface, ocv: f64, soh: f64, soc_band: (f64, f64)) -> Result<f64> {
    surface.invert(ocv, soh, soc_band)
}

/// Capacity and voltage window of one cell type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Maximum capacity of a new cell, ampere-hours.
    pub q0_ah: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl CellSpec {
    pub fn new(q0_ah: f64, v_min: f64, v_max: f64) -> Result<Self> {
        if !(q0_ah > 0.0 && q0_ah.is_finite()) {
            return Err(Error::InvalidParams(format!("q0 must be positive, got {q0_ah}")));
        }
        if !(v_min < v_max) {
            return Err(Error::InvalidParams("v_min must be below v_max".into()));
        }
        Ok(Self { q0_ah, v_min, v_max })
    }

    /// Capacity in ampere-seconds.
    pub fn q0_as(&self) -> f64 {
        self.q0_ah * 3600.0
    }
}
