//! Pointwise `C^{1,α}` diagnostics: sup-norm affine fits on shrinking
//! balls, the log-log exponent estimate, per-probe maps and an audit of
//! the geometric-iteration constants.

mod chebyshev;

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

pub use chebyshev::{best_affine_fit, chebyshev_fit, AffineFit};

use crate::error::{invalid, Result};
use crate::lattice::Field;

/// Ordinary least squares fit `y ≈ slope·x + intercept`; returns
/// `(slope, intercept, standard error of the slope)`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let se = if x.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, icpt, se)
}

/// Exponents at or above this are reported as capped.
pub const ALPHA_CAP: f64 = 1.0;

/// Width of the confidence band in regression standard errors.
pub const BAND_SE: f64 = 2.0;

#[derive(Clone, Debug, Serialize)]
pub struct ExponentReport {
    pub x0: Vec<f64>,
    pub rho: f64,
    pub radii: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Residuals at or below this are treated as exact fits and left out
    /// of the regression.
    pub floor: f64,
    pub used: usize,
    /// Log-log slope minus one. Meaningful as a lower bound only when
    /// `capped` is set.
    pub alpha: f64,
    pub band: f64,
    pub capped: bool,
    #[serde(skip)]
    pub fits: Vec<AffineFit>,
}

impl ExponentReport {
    pub fn display_alpha(&self) -> String {
        if self.capped {
            format!(">= {ALPHA_CAP}")
        } else {
            format!("{:.4}", self.alpha)
        }
    }
}

/// Fits on the balls of radius `ρ^k`, `k ∈ [k_min, k_max]`, and regresses
/// `log K` on `log r`.
pub fn exponent_estimate(u: &Field, x0: &[f64], rho: f64, k_range: (u32, u32)) -> Result<ExponentReport> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("ratio must lie in (0, 1), got {rho}")));
    }
    let (k_min, k_max) = k_range;
    if k_max < k_min + 1 {
        return Err(invalid("need at least two radii"));
    }
    let h = u.grid().h();
    let smallest = rho.powi(k_max as i32);
    if smallest < 4.0 * h * (1.0 - 1e-9) {
        return Err(invalid(format!(
            "smallest radius {smallest} is below the resolution guard 4h = {}",
            4.0 * h
        )));
    }
    let radii: Vec<f64> = (k_min..=k_max).map(|k| rho.powi(k as i32)).collect();
    let fits = radii
        .iter()
        .map(|&r| best_affine_fit(u, x0, r))
        .collect::<Result<Vec<_>>>()?;
    let residuals: Vec<f64> = fits.iter().map(|f| f.residual).collect();
    let floor = 1e-12 * u.max_abs().max(1.0);
    let (lx, ly): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(&residuals)
        .filter(|(_, &k)| k > floor)
        .map(|(&r, &k)| (r.ln(), k.ln()))
        .unzip();
    let used = lx.len();
    let (alpha, band, capped) = if used < 2 {
        (ALPHA_CAP, 0.0, true)
    } else {
        let (slope, _, se) = least_squares_slope(&lx, &ly);
        let alpha = slope - 1.0;
        let band = BAND_SE * se;
        (alpha, band, alpha + band >= ALPHA_CAP)
    };
    Ok(ExponentReport {
        x0: x0.to_vec(),
        rho,
        radii,
        residuals,
        floor,
        used,
        alpha,
        band,
        capped,
        fits,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeExponent {
    pub point: Vec<f64>,
    pub alpha: Option<f64>,
    pub band: Option<f64>,
    pub capped: Option<bool>,
    pub error: Option<String>,
}

/// Exponent estimates at every probe. Failures are recorded per probe.
pub fn exponent_map(u: &Field, probes: &[Vec<f64>], rho: f64, k_range: (u32, u32)) -> Vec<ProbeExponent> {
    probes
        .par_iter()
        .map(|p| match exponent_estimate(u, p, rho, k_range) {
            Ok(rep) => ProbeExponent {
                point: p.clone(),
                alpha: Some(rep.alpha),
                band: Some(rep.band),
                capped: Some(rep.capped),
                error: None,
            },
            Err(e) => ProbeExponent {
                point: p.clone(),
                alpha: None,
                band: None,
                capped: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// CSV with columns `x1..xd, alpha, band, capped, error`.
pub fn write_exponent_map_csv<W: Write>(map: &[ProbeExponent], out: W) -> Result<()> {
    let d = map.first().map_or(0, |p| p.point.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend(["alpha", "band", "capped", "error"].map(String::from));
    w.write_record(&header)?;
    for p in map {
        let mut row: Vec<String> = p.point.iter().map(|c| format!("{c}")).collect();
        row.push(p.alpha.map_or(String::new(), |v| format!("{v:.10}")));
        row.push(p.band.map_or(String::new(), |v| format!("{v:.10}")));
        row.push(p.capped.map_or(String::new(), |v| v.to_string()));
        row.push(p.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationAudit {
    pub alpha: f64,
    pub rho: f64,
    /// `K_n / r_n^{1+α}` per fit.
    pub residual_constants: Vec<f64>,
    /// `(|a_n − a_{n−1}| + r_n |b_n − b_{n−1}|) / r_{n−1}^{1+α}` for n ≥ 1.
    pub increment_constants: Vec<f64>,
    pub c_residual: f64,
    pub c_increment: f64,
    /// Fitted growth exponent of `C_n` in `r_n^{−1}` and its band.
    pub growth: f64,
    pub band: f64,
    pub blow_up: bool,
}

/// Minimal constants making the residual and increment bounds hold along
/// the fit sequence, and whether they blow up as the radius shrinks.
///
/// The growth is the log-log slope of `C_n` against `1/r_n`, which equals
/// `α − α̂` for the estimate computed from the same fits; blow-up means the
/// growth exceeds its band.
pub fn iteration_audit(fits: &[AffineFit], rho: f64, alpha: f64) -> Result<IterationAudit> {
    if fits.len() < 2 {
        return Err(invalid("need at least two fits"));
    }
    let x0 = &fits[0].x0;
    for (k, f) in fits.iter().enumerate() {
        if &f.x0 != x0 {
            return Err(invalid("fits do not share a base point"));
        }
        if k > 0 {
            let ratio = f.r / fits[k - 1].r;
            if (ratio - rho).abs() > 1e-9 * rho {
                return Err(invalid(format!("radii do not form a geometric sequence with ratio {rho}")));
            }
        }
    }
    let residual_constants: Vec<f64> = fits.iter().map(|f| f.residual / f.r.powf(1.0 + alpha)).collect();
    let increment_constants: Vec<f64> = fits
        .windows(2)
        .map(|w| {
            let db = w[1]
                .b
                .iter()
                .zip(&w[0].b)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            ((w[1].a - w[0].a).abs() + w[1].r * db) / w[0].r.powf(1.0 + alpha)
        })
        .collect();
    let scale = fits.iter().map(|f| f.a.abs()).fold(1.0, f64::max);
    let (lx, ly): (Vec<f64>, Vec<f64>) = fits
        .iter()
        .zip(&residual_constants)
        .filter(|(f, _)| f.residual > 1e-12 * scale)
        .map(|(f, c)| (-f.r.ln(), c.ln()))
        .unzip();
    let (growth, band) = if lx.len() < 2 {
        (-(1.0 + alpha), 0.0)
    } else {
        let (s, _, se) = least_squares_slope(&lx, &ly);
        (s, BAND_SE * se)
    };
    Ok(IterationAudit {
        alpha,
        rho,
        c_residual: residual_constants.iter().copied().fold(0.0, f64::max),
        c_increment: increment_constants.iter().copied().fold(0.0, f64::max),
        residual_constants,
        increment_constants,
        growth,
        band,
        blow_up: growth > band,
    })
}
