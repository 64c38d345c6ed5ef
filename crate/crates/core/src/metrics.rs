//! Full-reference quality indices for reconstructed hyperspectral cubes.
//!
//! Inputs are assumed normalized to a peak of 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::HsiCube;

/// Returned by [`psnr`] for a band reconstructed exactly.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const UIQI_WINDOW: usize = 32;
pub const UIQI_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerBand {
    pub psnr: Vec<f64>,
    pub rmse: Vec<f64>,
    pub ssim: Vec<f64>,
    pub uiqi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    /// Degrees.
    pub sam: f64,
    pub ergas: f64,
    pub ssim: f64,
    pub uiqi: f64,
    /// Pixels left out of the SAM mean because a spectrum had zero norm.
    pub sam_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_band: Option<PerBand>,
}

fn check_pair(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            op,
            format!(
                "reference {}x{}x{} vs estimate {}x{}x{}",
                a.bands(),
                a.height(),
                a.width(),
                b.bands(),
                b.height(),
                b.width()
            ),
        ));
    }
    Ok(())
}

fn band_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

/// Per-band `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_bands(reference: &HsiCube, estimate: &HsiCube) -> Result<Vec<f64>> {
    check_pair("psnr", reference, estimate)?;
    Ok((0..reference.bands())
        .map(|b| {
            let mse = band_mse(reference.band(b), estimate.band(b));
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (-10.0 * mse.log10()).min(PSNR_CAP_DB)
            }
        })
        .collect())
}

/// Mean over bands of the per-band PSNR in dB.
pub fn psnr(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    let v = psnr_bands(reference, estimate)?;
    Ok(mean(v.into_iter()))
}

/// Mean spectral angle in degrees and the number of skipped zero-norm pixels.
pub fn sam_counted(reference: &HsiCube, estimate: &HsiCube) -> Result<(f64, usize)> {
    check_pair("sam", reference, estimate)?;
    let n = reference.pixels();
    let (mut total, mut used) = (0.0, 0usize);
    let bands = reference.bands();
    let (mut u, mut v) = (vec![0.0; bands], vec![0.0; bands]);
    for p in 0..n {
        for b in 0..bands {
            u[b] = reference.band(b)[p];
            v[b] = estimate.band(b)[p];
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        // 2 atan2(|u' - v'|, |u' + v'|) on unit vectors: stable near 0 and 180 degrees
        let (mut d, mut s) = (0.0, 0.0);
        for b in 0..bands {
            let (x, y) = (u[b] / nu, v[b] / nv);
            d += (x - y) * (x - y);
            s += (x + y) * (x + y);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("every pixel has a zero spectrum"));
    }
    Ok(((total / used as f64).to_degrees(), n - used))
}

pub fn sam(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    sam_counted(reference, estimate).map(|(s, _)| s)
}

/// `100 / ratio * sqrt(mean_b (RMSE_b / mean_b)^2)` with reference band means.
pub fn ergas(reference: &HsiCube, estimate: &HsiCube, ratio: f64) -> Result<f64> {
    check_pair("ergas", reference, estimate)?;
    if !(ratio > 0.0) {
        return Err(Error::invalid(format!("ratio must be positive, got {}", ratio)));
    }
    let mut acc = 0.0;
    for b in 0..reference.bands() {
        let r = reference.band(b);
        let mu = mean(r.iter().copied());
        if mu == 0.0 {
            return Err(Error::invalid(format!("reference band {} has zero mean", b)));
        }
        acc += band_mse(r, estimate.band(b)) / (mu * mu);
    }
    Ok(100.0 / ratio * (acc / reference.bands() as f64).sqrt())
}

fn gaussian_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_band(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    total / n as f64
}

/// Per-band Gaussian-window SSIM.
pub fn ssim_bands(reference: &HsiCube, estimate: &HsiCube) -> Result<Vec<f64>> {
    check_pair("ssim", reference, estimate)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {0}x{0} pixels, got {1}x{2}",
            SSIM_WINDOW, h, w
        )));
    }
    let taps = gaussian_taps();
    Ok((0..reference.bands())
        .map(|b| ssim_band(reference.band(b), estimate.band(b), h, w, &taps))
        .collect())
}

pub fn ssim(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    ssim_bands(reference, estimate).map(|v| mean(v.into_iter()))
}

/// Summed-area table with a zero row and column prepended.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_positions(extent: usize, win: usize) -> Vec<usize> {
    (0..=extent - win).step_by(UIQI_STRIDE).collect()
}

/// Mean index over windows of one band; `None` if every window is degenerate.
fn uiqi_band(a: &[f64], b: &[f64], h: usize, w: usize) -> Option<f64> {
    let win = UIQI_WINDOW.min(h).min(w);
    let sq = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let sa = integral(a, h, w);
    let sb = integral(b, h, w);
    let saa = integral(&sq(&|i| a[i] * a[i]), h, w);
    let sbb = integral(&sq(&|i| b[i] * b[i]), h, w);
    let sab = integral(&sq(&|i| a[i] * b[i]), h, w);
    let n = (win * win) as f64;
    let rect = |s: &[f64], y: usize, x: usize| {
        let w1 = w + 1;
        s[(y + win) * w1 + x + win] - s[y * w1 + x + win] - s[(y + win) * w1 + x] + s[y * w1 + x]
    };
    let (mut total, mut count) = (0.0, 0usize);
    for y in window_positions(h, win) {
        for x in window_positions(w, win) {
            let (ma, mb) = (rect(&sa, y, x) / n, rect(&sb, y, x) / n);
            // unbiased (n - 1) normalization; it cancels in the ratio
            let va = (rect(&saa, y, x) - n * ma * ma) / (n - 1.0);
            let vb = (rect(&sbb, y, x) - n * mb * mb) / (n - 1.0);
            let cov = (rect(&sab, y, x) - n * ma * mb) / (n - 1.0);
            let (dv, dm) = (va + vb, ma * ma + mb * mb);
            if dv == 0.0 || dm == 0.0 {
                continue;
            }
            // factored so identical windows give exactly 1
            total += (2.0 * cov / dv) * (2.0 * ma * mb / dm);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Per-band universal image quality index on sliding windows; windows larger
/// than the image shrink to fit. Bands whose windows are all degenerate are
/// reported as `NaN` and left out of [`uiqi`].
pub fn uiqi_bands(reference: &HsiCube, estimate: &HsiCube) -> Result<Vec<f64>> {
    check_pair("uiqi", reference, estimate)?;
    let (h, w) = (reference.height(), reference.width());
    if h < 2 || w < 2 {
        return Err(Error::invalid("UIQI needs at least 2x2 pixels"));
    }
    Ok((0..reference.bands())
        .map(|b| uiqi_band(reference.band(b), estimate.band(b), h, w).unwrap_or(f64::NAN))
        .collect())
}

pub fn uiqi(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    let v: Vec<f64> = uiqi_bands(reference, estimate)?.into_iter().filter(|v| !v.is_nan()).collect();
    if v.is_empty() {
        return Err(Error::invalid("UIQI undefined: every window is constant in both images"));
    }
    Ok(mean(v.into_iter()))
}

/// Per-band root-mean-square error.
pub fn rmse_bands(reference: &HsiCube, estimate: &HsiCube) -> Result<Vec<f64>> {
    check_pair("rmse", reference, estimate)?;
    Ok((0..reference.bands())
        .map(|b| band_mse(reference.band(b), estimate.band(b)).sqrt())
        .collect())
}

/// All five indices plus per-band vectors.
pub fn evaluate(reference: &HsiCube, estimate: &HsiCube, ratio: f64) -> Result<MetricReport> {
    let psnr_b = psnr_bands(reference, estimate)?;
    let (sam_deg, sam_skipped) = sam_counted(reference, estimate)?;
    let ssim_b = ssim_bands(reference, estimate)?;
    let uiqi_b = uiqi_bands(reference, estimate)?;
    Ok(MetricReport {
        psnr: mean(psnr_b.iter().copied()),
        sam: sam_deg,
        ergas: ergas(reference, estimate, ratio)?,
        ssim: mean(ssim_b.iter().copied()),
        uiqi: uiqi(reference, estimate)?,
        sam_skipped,
        per_band: Some(PerBand {
            psnr: psnr_b,
            rmse: rmse_bands(reference, estimate)?,
            ssim: ssim_b,
            uiqi: uiqi_b,
        }),
    })
}
