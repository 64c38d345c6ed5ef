//! Coupled nonnegative matrix factorization with known degradation operators.
//!
//! Pixel matrices stack one spectrum per row, so an image factors as
//! `V = S A` with abundances `S` (`pixels x K`) and endmembers `A` (`K x bands`).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{apply_psf, AbundanceMap, EndmemberMatrix, HsiCube, PsfKernel, SrfMatrix};
use crate::tensor::Element;

/// Added to every multiplicative-update denominator.
const DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnmfConfig {
    pub endmembers: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Relative objective change below which a loop stops early.
    pub tol: f64,
    /// Weight of the sum-to-one row appended to both sides of every
    /// abundance fit; 0 leaves the constraint to row renormalization alone.
    pub asc_weight: f64,
}

impl Default for CnmfConfig {
    fn default() -> Self {
        Self {
            endmembers: 4,
            outer_iterations: 4,
            inner_iterations: 200,
            tol: 1e-6,
            asc_weight: 1.0,
        }
    }
}

impl CnmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endmembers < 2 {
            return Err(Error::invalid("CNMF needs at least 2 endmembers"));
        }
        if self.outer_iterations == 0 || self.inner_iterations == 0 {
            return Err(Error::invalid("CNMF iteration counts must be at least 1"));
        }
        if !(self.tol >= 0.0) || !(self.asc_weight >= 0.0) {
            return Err(Error::invalid("CNMF tolerance and ASC weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", format!("{}x{} from {} values", rows, cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `op(self) op(other)` where `op` optionally transposes.
    fn product(&self, ta: bool, other: &Matrix, tb: bool) -> Matrix {
        let (m, k) = if ta { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let n = if tb { other.rows } else { other.cols };
        let mut data = vec![0.0; m * n];
        f64::gemm(m, k, n, &self.data, ta, &other.data, tb, 0.0, &mut data);
        Matrix { rows: m, cols: n, data }
    }
}

/// Which factor of `V ~ W H` a multiplicative step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmfFactor {
    Left,
    Right,
}

/// `||V - W H||_F^2`.
pub fn nmf_objective(v: &Matrix, w: &Matrix, h: &Matrix) -> Result<f64> {
    check_dims(v, w, h)?;
    let wh = w.product(false, h, false);
    Ok(v.data.iter().zip(&wh.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// One Lee-Seung multiplicative step for the Frobenius objective:
/// `W <- W * (V H^T) / (W H H^T)` or `H <- H * (W^T V) / (W^T W H)`.
pub fn nmf_update(v: &Matrix, w: &Matrix, h: &Matrix, factor: NmfFactor) -> Result<Matrix> {
    check_dims(v, w, h)?;
    if v.data.iter().chain(&w.data).chain(&h.data).any(|&x| x < 0.0) {
        return Err(Error::Constraint("NMF factors and data must be nonnegative".into()));
    }
    let (old, num, den) = match factor {
        NmfFactor::Left => (w, v.product(false, h, true), w.product(false, &h.product(false, h, true), false)),
        NmfFactor::Right => (h, w.product(true, v, false), w.product(true, w, false).product(false, h, false)),
    };
    let data = old
        .data
        .iter()
        .zip(num.data.iter().zip(&den.data))
        .map(|(&x, (&n, &d))| x * n / (d + DENOM_FLOOR))
        .collect();
    Matrix::new(old.rows, old.cols, data)
}

fn check_dims(v: &Matrix, w: &Matrix, h: &Matrix) -> Result<()> {
    if w.cols != h.rows || v.rows != w.rows || v.cols != h.cols {
        return Err(Error::shape(
            "nmf",
            format!("V {}x{} vs W {}x{} H {}x{}", v.rows, v.cols, w.rows, w.cols, h.rows, h.cols),
        ));
    }
    Ok(())
}

/// Purest-pixel selection: repeatedly take the pixel whose residual, after
/// projecting out the spectra already chosen, has the largest norm.
pub fn init_endmembers(x: &HsiCube, k: usize) -> Result<EndmemberMatrix> {
    let (n, bands) = (x.pixels(), x.bands());
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot pick {} endmembers from {} pixels", k, n)));
    }
    let pixels = x.to_pixel_matrix();
    let mut residual = pixels.clone();
    let mut out = Vec::with_capacity(k * bands);
    for _ in 0..k {
        let norm2 = |p: usize| residual[p * bands..(p + 1) * bands].iter().map(|v| v * v).sum::<f64>();
        let mut best = 0;
        let mut best_norm = norm2(0);
        for p in 1..n {
            let v = norm2(p);
            if v > best_norm {
                best = p;
                best_norm = v;
            }
        }
        out.extend_from_slice(&pixels[best * bands..(best + 1) * bands]);
        if best_norm <= 0.0 {
            continue;
        }
        let scale = best_norm.sqrt();
        let u: Vec<f64> = residual[best * bands..(best + 1) * bands].iter().map(|v| v / scale).collect();
        for row in residual.chunks_mut(bands) {
            let d: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
            for (r, b) in row.iter_mut().zip(&u) {
                *r -= d * b;
            }
        }
    }
    EndmemberMatrix::new(k, bands, out)
}

#[derive(Clone, Debug)]
pub struct CnmfOutput {
    pub fused: HsiCube,
    pub endmembers: EndmemberMatrix,
    pub abundances: AbundanceMap,
    /// Coupled objective after initialization and after each outer iteration.
    pub objective: Vec<f64>,
    /// False when the outer loop hit its limit before the tolerance.
    pub converged: bool,
}

/// Alternates (a) unmixing `X` for `A` with `C S` fixed and (b) unmixing `Y`
/// for `S` with `A R` fixed, renormalizing the rows of `S` to sum to one.
/// The iterate with the lowest coupled objective is returned.
pub fn cnmf_fuse(x: &HsiCube, y: &HsiCube, psf: &PsfKernel, srf: &SrfMatrix, cfg: &CnmfConfig) -> Result<CnmfOutput> {
    cfg.validate()?;
    let r = psf.ratio();
    if y.height() != x.height() * r || y.width() != x.width() * r {
        return Err(Error::shape(
            "cnmf_fuse",
            format!("MSI {}x{} vs HSI {}x{} at ratio {}", y.height(), y.width(), x.height(), x.width(), r),
        ));
    }
    if srf.bands() != x.bands() || srf.channels() != y.bands() {
        return Err(Error::shape(
            "cnmf_fuse",
            format!("SRF {}x{} vs {} HS and {} MS bands", srf.bands(), srf.channels(), x.bands(), y.bands()),
        ));
    }
    let k = cfg.endmembers;
    let xm = Matrix::new(x.pixels(), x.bands(), x.to_pixel_matrix())?;
    let ym = Matrix::new(y.pixels(), y.bands(), y.to_pixel_matrix())?;
    let rm = Matrix::new(srf.bands(), srf.channels(), srf.data().to_vec())?;
    let degrade = |s: &Matrix| -> Result<Matrix> {
        let map = AbundanceMap::new(y.height(), y.width(), k, s.data.clone())?;
        let low = apply_psf(&map.to_cube()?, psf)?;
        Matrix::new(x.pixels(), k, low.to_pixel_matrix())
    };
    let objective = |s: &Matrix, a: &Matrix| -> Result<f64> {
        Ok(nmf_objective(&xm, &degrade(s)?, a)? + nmf_objective(&ym, s, &a.product(false, &rm, false))?)
    };

    let mut a = Matrix::new(k, x.bands(), init_endmembers(x, k)?.data().to_vec())?;
    // Y alone underdetermines S when l < K; start from the unmixed X instead.
    let s_low = unmix_abundances(&xm, Matrix::filled(x.pixels(), k, 1.0 / k as f64), &a, cfg)?;
    let mut s = upsample_nearest(&s_low, x.width(), r);
    s = unmix_abundances(&ym, s, &a.product(false, &rm, false), cfg)?;
    let mut history = vec![objective(&s, &a)?];
    let mut best = (history[0], s.clone(), a.clone());
    let mut converged = false;
    for _ in 0..cfg.outer_iterations {
        a = unmix_endmembers(&xm, &degrade(&s)?, a, cfg)?;
        s = unmix_abundances(&ym, s, &a.product(false, &rm, false), cfg)?;
        let j = objective(&s, &a)?;
        let prev = *history.last().expect("history starts non-empty");
        history.push(j);
        if j < best.0 {
            best = (j, s.clone(), a.clone());
        }
        if (prev - j).abs() <= cfg.tol * prev.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("CNMF stopped after {} outer iterations without reaching tol {}", cfg.outer_iterations, cfg.tol);
    }
    let (_, s, a) = best;
    let abundances = AbundanceMap::new(y.height(), y.width(), k, s.data.clone())?;
    let fused = s.product(false, &a, false);
    let mut fused = HsiCube::from_pixel_matrix(y.height(), y.width(), x.bands(), &fused.data)?;
    if let Some(wl) = x.wavelengths() {
        fused = fused.with_wavelengths(wl.to_vec())?;
    }
    Ok(CnmfOutput {
        fused,
        endmembers: EndmemberMatrix::new(k, x.bands(), a.data)?,
        abundances,
        objective: history,
        converged,
    })
}

fn append_column(m: &Matrix, value: f64) -> Matrix {
    let mut data = Vec::with_capacity(m.rows * (m.cols + 1));
    for i in 0..m.rows {
        data.extend_from_slice(m.row(i));
        data.push(value);
    }
    Matrix { rows: m.rows, cols: m.cols + 1, data }
}

/// Replicates each low-resolution pixel row over its `r x r` block.
fn upsample_nearest(low: &Matrix, low_width: usize, r: usize) -> Matrix {
    let low_height = low.rows / low_width;
    let (w, k) = (low_width * r, low.cols);
    let mut data = Vec::with_capacity(low.rows * r * r * k);
    for y in 0..low_height * r {
        for x in 0..w {
            data.extend_from_slice(low.row((y / r) * low_width + x / r));
        }
    }
    Matrix {
        rows: low.rows * r * r,
        cols: k,
        data,
    }
}

/// Inner loop on the right factor with the left factor fixed.
fn unmix_endmembers(v: &Matrix, s: &Matrix, mut a: Matrix, cfg: &CnmfConfig) -> Result<Matrix> {
    let mut prev = nmf_objective(v, s, &a)?;
    for _ in 0..cfg.inner_iterations {
        a = nmf_update(v, s, &a, NmfFactor::Right)?;
        let j = nmf_objective(v, s, &a)?;
        if prev - j <= cfg.tol * prev {
            break;
        }
        prev = j;
    }
    Ok(a)
}

/// Inner loop on the left factor with the right factor fixed, then rows
/// rescaled to sum to one. With `l < K` channels the fit alone leaves each
/// row free along the null space of `A`; the appended row pins it.
fn unmix_abundances(v: &Matrix, mut s: Matrix, a: &Matrix, cfg: &CnmfConfig) -> Result<Matrix> {
    let augmented;
    let (v, a) = if cfg.asc_weight > 0.0 {
        augmented = (append_column(v, cfg.asc_weight), append_column(a, cfg.asc_weight));
        (&augmented.0, &augmented.1)
    } else {
        (v, a)
    };
    let mut prev = nmf_objective(v, &s, a)?;
    for _ in 0..cfg.inner_iterations {
        s = nmf_update(v, &s, a, NmfFactor::Left)?;
        let j = nmf_objective(v, &s, a)?;
        if prev - j <= cfg.tol * prev {
            break;
        }
        prev = j;
    }
    let k = s.cols;
    for row in s.data.chunks_mut(k) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(s)
}
