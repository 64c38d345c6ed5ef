//! Cube files, sensor simulation and synthetic linear-mixture scenes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use crate::error::{Error, Result};
use crate::io::{read_framed, write_framed};
use crate::mixing::{apply_psf, apply_srf, mix, AbundanceMap, EndmemberMatrix, HsiCube, PsfKernel, SrfMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
}

/// Write a band-sequential little-endian `f32` cube file.
pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    let header = CubeHeader {
        bands: cube.bands(),
        height: cube.height(),
        width: cube.width(),
        wavelengths: cube.wavelengths().map(<[f64]>::to_vec),
        dtype: "f32".into(),
        layout: "band-sequential".into(),
        endianness: "little".into(),
    };
    write_framed(path.as_ref(), &header, cube.data().iter().map(|&v| v as f32))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let (header, values) = read_framed::<CubeHeader>(path, |h| {
        if h.dtype != "f32" || h.layout != "band-sequential" || h.endianness != "little" {
            return Err(Error::format(
                path,
                format!("unsupported encoding {}/{}/{}", h.dtype, h.layout, h.endianness),
            ));
        }
        Ok(h.bands * h.height * h.width)
    })?;
    let cube = HsiCube::new(
        header.bands,
        header.height,
        header.width,
        values.into_iter().map(f64::from).collect(),
    )?;
    match header.wavelengths {
        Some(w) => cube.with_wavelengths(w),
        None => Ok(cube),
    }
}

/// Isotropic Gaussian sampled on an `r x r` grid centred on the block,
/// normalized to unit sum.
pub fn gaussian_psf_kernel(ratio: usize, sigma: f64) -> Result<PsfKernel> {
    if ratio == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!("ratio {} / sigma {}", ratio, sigma)));
    }
    let c = (ratio as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(ratio * ratio);
    for i in 0..ratio {
        for j in 0..ratio {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    PsfKernel::normalized(ratio, w)
}

/// Evenly spaced band centres over `[start, end]` nm.
pub fn wavelength_grid(bands: usize, start: f64, end: f64) -> Vec<f64> {
    if bands == 1 {
        return vec![start];
    }
    (0..bands)
        .map(|b| start + (end - start) * b as f64 / (bands - 1) as f64)
        .collect()
}

/// Broad Gaussian responses with centres evenly placed across the grid,
/// standing in for a camera's channel sensitivities.
pub fn synthetic_srf(wavelengths: &[f64], channels: usize) -> Result<SrfMatrix> {
    let (lo, hi) = match wavelengths {
        [first, .., last] => (*first, *last),
        _ => return Err(Error::invalid("need at least two wavelengths")),
    };
    let span = hi - lo;
    let sigma = 0.4 * span / channels as f64;
    let l = wavelengths.len();
    let mut data = vec![0.0; l * channels];
    for j in 0..channels {
        let centre = lo + span * (j as f64 + 0.5) / channels as f64;
        for (b, &wl) in wavelengths.iter().enumerate() {
            data[b * channels + j] = (-(wl - centre).powi(2) / (2.0 * sigma * sigma)).exp();
        }
    }
    SrfMatrix::normalized(l, channels, data)
}

/// Spectral response table: header `wavelength,<channel>,...`, one row per
/// sampled wavelength. Each cube band takes the nearest table row; a band
/// farther than `max_gap_nm` from every row is an error. Columns are
/// normalized to unit sum.
pub fn load_srf_csv(path: impl AsRef<Path>, band_wavelengths: &[f64], max_gap_nm: f64) -> Result<SrfMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let channels = reader.headers()?.len().saturating_sub(1);
    if channels == 0 {
        return Err(Error::format(path, "no response columns"));
    }
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::format(path, format!("'{}': {}", f, e))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != channels + 1 {
            return Err(Error::format(path, format!("row with {} fields, expected {}", vals.len(), channels + 1)));
        }
        rows.push((vals[0], vals[1..].to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let mut data = vec![0.0; band_wavelengths.len() * channels];
    for (b, &wl) in band_wavelengths.iter().enumerate() {
        let (gap, row) = rows
            .iter()
            .map(|(w, r)| ((w - wl).abs(), r))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("rows is non-empty");
        if gap > max_gap_nm {
            return Err(Error::format(
                path,
                format!("no response sample within {} nm of band at {} nm", max_gap_nm, wl),
            ));
        }
        data[b * channels..(b + 1) * channels].copy_from_slice(row);
    }
    SrfMatrix::normalized(band_wavelengths.len(), channels, data)
}

pub fn save_srf_csv(path: impl AsRef<Path>, srf: &SrfMatrix, band_wavelengths: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["wavelength".to_string()];
    header.extend((0..srf.channels()).map(|j| format!("ch{}", j)));
    w.write_record(&header)?;
    for (b, wl) in band_wavelengths.iter().enumerate() {
        let mut rec = vec![wl.to_string()];
        rec.extend((0..srf.channels()).map(|j| srf.get(b, j).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// White Gaussian noise at a target signal-to-noise ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

/// Empirical `10 log10(|signal|^2 / |noisy - signal|^2)`.
pub fn snr_db(clean: &HsiCube, noisy: &HsiCube) -> f64 {
    let s: f64 = clean.data().iter().map(|v| v * v).sum();
    let n: f64 = clean.data().iter().zip(noisy.data()).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (s / n).log10()
}

fn add_noise(cube: &HsiCube, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<HsiCube> {
    let power = cube.data().iter().map(|v| v * v).sum::<f64>() / cube.data().len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut out = cube.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    Ok(out)
}

/// Observations of a latent cube: `(X, Y)` = (spatially degraded, spectrally degraded).
pub fn simulate_pair(
    latent: &HsiCube,
    srf: &SrfMatrix,
    ratio: usize,
    sigma: f64,
    noise: Option<NoiseSpec>,
) -> Result<(HsiCube, HsiCube)> {
    let psf = gaussian_psf_kernel(ratio, sigma)?;
    let x = apply_psf(latent, &psf)?;
    let y = apply_srf(latent, srf)?;
    match noise {
        None => Ok((x, y)),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
            Ok((add_noise(&x, n.snr_db, &mut rng)?, add_noise(&y, n.snr_db, &mut rng)?))
        }
    }
}

/// Parameters of a synthetic linear-mixture scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub endmembers: usize,
    pub hs_bands: usize,
    pub ms_bands: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: usize,
    /// Dirichlet concentration of the per-pixel abundances.
    pub dirichlet: f64,
    /// Correlation length (pixels) of the abundance fields.
    pub smoothing: f64,
    pub psf_sigma: f64,
    pub seed: u64,
    pub noise_snr_db: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            endmembers: 4,
            hs_bands: 31,
            ms_bands: 3,
            height: 64,
            width: 64,
            ratio: 8,
            dirichlet: 0.8,
            smoothing: 2.0,
            psf_sigma: 0.5,
            seed: 0,
            noise_snr_db: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.height % self.ratio != 0 || self.width % self.ratio != 0 {
            return Err(Error::invalid(format!(
                "scene {}x{} is not divisible by ratio {}",
                self.height, self.width, self.ratio
            )));
        }
        if self.endmembers == 0 || self.hs_bands < 2 || self.ms_bands == 0 {
            return Err(Error::invalid("scene needs endmembers, >= 2 HS bands and >= 1 MS band"));
        }
        if !(self.dirichlet > 0.0) || !(self.smoothing >= 0.0) || !(self.psf_sigma > 0.0) {
            return Err(Error::invalid("dirichlet, smoothing and psf_sigma must be positive"));
        }
        Ok(())
    }
}

/// Ground truth and observations of one synthetic scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub latent: HsiCube,
    pub abundances: AbundanceMap,
    pub endmembers: EndmemberMatrix,
    pub srf: SrfMatrix,
    pub psf: PsfKernel,
    pub lr_hsi: HsiCube,
    pub hr_msi: HsiCube,
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        let (latent, abundances, endmembers) = synth_scene(spec)?;
        let wl = latent.wavelengths().expect("synthetic scenes carry wavelengths").to_vec();
        let srf = synthetic_srf(&wl, spec.ms_bands)?;
        let psf = gaussian_psf_kernel(spec.ratio, spec.psf_sigma)?;
        let noise = spec.noise_snr_db.map(|snr_db| NoiseSpec {
            snr_db,
            seed: spec.seed.wrapping_add(0x5eed),
        });
        let (lr_hsi, hr_msi) = simulate_pair(&latent, &srf, spec.ratio, spec.psf_sigma, noise)?;
        Ok(Self {
            latent,
            abundances,
            endmembers,
            srf,
            psf,
            lr_hsi,
            hr_msi,
        })
    }
}

fn smooth_endmember(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps = rng.random_range(2..=4);
    let mut spec = vec![0.02; bands];
    let l = bands as f64;
    for _ in 0..bumps {
        let centre = rng.random_range(-0.1 * l..1.1 * l);
        let width = rng.random_range(l / 12.0..l / 4.0);
        let amp = rng.random_range(0.2..1.0);
        for (b, v) in spec.iter_mut().enumerate() {
            *v += amp * (-(b as f64 - centre).powi(2) / (2.0 * width * width)).exp();
        }
    }
    spec
}

/// Separable Gaussian blur with reflecting borders.
fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, &k)| k * plane[y * w + reflect(x as isize + t as isize - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, &k)| k * tmp[reflect(y as isize + t as isize - radius, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Spatially correlated abundances with Dirichlet marginals: smooth Gaussian
/// fields are pushed through the Gamma quantile function (a Gaussian copula)
/// and normalized per pixel.
fn correlated_dirichlet(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<AbundanceMap> {
    let (h, w, k) = (spec.height, spec.width, spec.endmembers);
    let gamma = Gamma::new(spec.dirichlet, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let normal = Normal::standard();
    let mut fields = Vec::with_capacity(k);
    for _ in 0..k {
        let white: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        let mut field = blur_plane(&white, h, w, spec.smoothing);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
        for v in field.iter_mut() {
            let u = normal.cdf((*v - mean) / sd).clamp(1e-12, 1.0 - 1e-12);
            *v = gamma.inverse_cdf(u).max(1e-12);
        }
        fields.push(field);
    }
    let mut data = vec![0.0; h * w * k];
    for p in 0..h * w {
        let total: f64 = fields.iter().map(|f| f[p]).sum();
        for (j, f) in fields.iter().enumerate() {
            data[p * k + j] = f[p] / total;
        }
    }
    AbundanceMap::new(h, w, k, data)
}

/// Latent cube `Z = S A` of a random scene, scaled so `max Z = 1`
/// (the scale is folded into `A`, so the identity stays exact).
pub fn synth_scene(spec: &SceneSpec) -> Result<(HsiCube, AbundanceMap, EndmemberMatrix)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut a = Vec::with_capacity(spec.endmembers * spec.hs_bands);
    for _ in 0..spec.endmembers {
        a.extend(smooth_endmember(spec.hs_bands, &mut rng));
    }
    let mut endmembers = EndmemberMatrix::new(spec.endmembers, spec.hs_bands, a)?;
    let abundances = correlated_dirichlet(spec, &mut rng)?;
    let peak = mix(&abundances, &endmembers)?.max_value();
    endmembers.data_mut().iter_mut().for_each(|v| *v /= peak);
    let latent = mix(&abundances, &endmembers)?.with_wavelengths(wavelength_grid(spec.hs_bands, 400.0, 700.0))?;
    Ok((latent, abundances, endmembers))
}
