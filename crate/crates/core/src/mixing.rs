//! Linear mixing model and the fixed (non-learned) degradation operators.
//!
//! A cube stores `bands x height x width` values band-sequentially. The
//! matrix view used by the factor types stacks one pixel spectrum per row
//! (`pixels x bands`), with pixels in row-major image order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hyperspectral (or multispectral) radiance cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    wavelengths: Option<Vec<f64>>,
}

impl HsiCube {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::shape(
                "cube",
                format!("{}x{}x{} needs {} values, got {}", bands, height, width, bands * height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "cube" });
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
            wavelengths: None,
        })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        Self {
            bands,
            height,
            width,
            data: vec![0.0; bands * height * width],
            wavelengths: None,
        }
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != self.bands {
            return Err(Error::shape(
                "cube",
                format!("{} wavelengths for {} bands", wavelengths.len(), self.bands),
            ));
        }
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("wavelengths must be strictly increasing"));
        }
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    /// Build from a `pixels x bands` matrix (one spectrum per row).
    pub fn from_pixel_matrix(height: usize, width: usize, bands: usize, rows: &[f64]) -> Result<Self> {
        let n = height * width;
        if rows.len() != n * bands {
            return Err(Error::shape("cube", format!("{} values for {} pixels x {} bands", rows.len(), n, bands)));
        }
        let mut data = vec![0.0; rows.len()];
        for p in 0..n {
            for b in 0..bands {
                data[b * n + p] = rows[p * bands + b];
            }
        }
        Self::new(bands, height, width, data)
    }

    /// `pixels x bands` matrix view.
    pub fn to_pixel_matrix(&self) -> Vec<f64> {
        let n = self.pixels();
        let mut rows = vec![0.0; self.data.len()];
        for b in 0..self.bands {
            for p in 0..n {
                rows[p * self.bands + b] = self.data[b * n + p];
            }
        }
        rows
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> f64 {
        self.data[(band * self.height + y) * self.width + x]
    }

    pub fn spectrum(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, y, x)).collect()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Divide by the global maximum so values land in `[0, 1]`; returns the divisor.
    pub fn normalize_global_max(&mut self) -> Result<f64> {
        let m = self.max_value();
        if !(m > 0.0) {
            return Err(Error::invalid("cannot normalize a cube with non-positive maximum"));
        }
        self.data.iter_mut().for_each(|v| *v /= m);
        Ok(m)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.bands, self.height, self.width], |i| T::from_f64(self.data[i]))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t
            .dims3()
            .ok_or_else(|| Error::shape("cube", format!("tensor {:?} is not [C, H, W]", t.shape())))?;
        Self::new(c, h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn same_shape(&self, other: &HsiCube) -> bool {
        (self.bands, self.height, self.width) == (other.bands, other.height, other.width)
    }
}

/// `K x L` endmember spectra, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndmemberMatrix {
    count: usize,
    bands: usize,
    data: Vec<f64>,
}

impl EndmemberMatrix {
    pub fn new(count: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * bands {
            return Err(Error::shape("endmembers", format!("{}x{} from {} values", count, bands, data.len())));
        }
        Ok(Self { count, bands, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.bands..(k + 1) * self.bands]
    }

    /// Spectrally degraded endmembers `A R` (`K x l`).
    pub fn project(&self, srf: &SrfMatrix) -> Result<EndmemberMatrix> {
        if srf.bands() != self.bands {
            return Err(Error::shape("project", format!("{} bands vs SRF for {}", self.bands, srf.bands())));
        }
        let l = srf.channels();
        let data = matmul(&self.data, self.count, self.bands, srf.data(), l);
        EndmemberMatrix::new(self.count, l, data)
    }
}

/// `pixels x K` fractional abundances on a `height x width` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbundanceMap {
    height: usize,
    width: usize,
    count: usize,
    data: Vec<f64>,
}

impl AbundanceMap {
    pub fn new(height: usize, width: usize, count: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * count {
            return Err(Error::shape(
                "abundances",
                format!("{}x{} pixels x {} from {} values", height, width, count, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            count,
            data,
        })
    }

    /// Abundance planes stored as a `K`-band cube.
    pub fn from_cube(cube: &HsiCube) -> Result<Self> {
        Self::new(cube.height(), cube.width(), cube.bands(), cube.to_pixel_matrix())
    }

    pub fn to_cube(&self) -> Result<HsiCube> {
        HsiCube::from_pixel_matrix(self.height, self.width, self.count, &self.data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.count..(p + 1) * self.count]
    }
}

/// `L x l` spectral response, one normalized column per multispectral channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrfMatrix {
    bands: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SrfMatrix {
    /// Validates nonnegativity and unit column sums (within 1e-6).
    pub fn new(bands: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let srf = Self::unchecked(bands, channels, data)?;
        if srf.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Constraint("SRF has negative entries".into()));
        }
        for j in 0..channels {
            let s = srf.column_sum(j);
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Constraint(format!("SRF column {} sums to {}", j, s)));
            }
        }
        Ok(srf)
    }

    /// Clamps negatives to zero and rescales each column to unit sum.
    pub fn normalized(bands: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * channels {
            return Err(Error::shape("srf", format!("{}x{} from {} values", bands, channels, data.len())));
        }
        data.iter_mut().for_each(|v| *v = v.max(0.0));
        for j in 0..channels {
            let s: f64 = (0..bands).map(|b| data[b * channels + j]).sum();
            if !(s > 0.0) {
                return Err(Error::Constraint(format!("SRF column {} has no positive response", j)));
            }
            (0..bands).for_each(|b| data[b * channels + j] /= s);
        }
        Self::new(bands, channels, data)
    }

    fn unchecked(bands: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * channels {
            return Err(Error::shape("srf", format!("{}x{} from {} values", bands, channels, data.len())));
        }
        Ok(Self { bands, channels, data })
    }

    pub fn identity(bands: usize) -> Self {
        let mut data = vec![0.0; bands * bands];
        (0..bands).for_each(|b| data[b * bands + b] = 1.0);
        Self {
            bands,
            channels: bands,
            data,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, band: usize, channel: usize) -> f64 {
        self.data[band * self.channels + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, channel)).collect()
    }

    fn column_sum(&self, j: usize) -> f64 {
        (0..self.bands).map(|b| self.get(b, j)).sum()
    }
}

/// Square point spread function; side equals the resolution ratio and the
/// kernel tiles the high-resolution grid in disjoint blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfKernel {
    ratio: usize,
    data: Vec<f64>,
}

impl PsfKernel {
    /// Validates nonnegativity and unit sum (within 1e-6).
    pub fn new(ratio: usize, data: Vec<f64>) -> Result<Self> {
        if ratio == 0 || data.len() != ratio * ratio {
            return Err(Error::shape("psf", format!("ratio {} with {} weights", ratio, data.len())));
        }
        if data.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Constraint("PSF has negative entries".into()));
        }
        let s: f64 = data.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Constraint(format!("PSF sums to {}", s)));
        }
        Ok(Self { ratio, data })
    }

    /// Clamps negatives and rescales to unit sum.
    pub fn normalized(ratio: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = data.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Constraint("PSF has no positive weight".into()));
        }
        data.iter_mut().for_each(|v| *v /= s);
        Self::new(ratio, data)
    }

    pub fn uniform(ratio: usize) -> Self {
        let n = ratio * ratio;
        Self {
            ratio,
            data: vec![1.0 / n as f64; n],
        }
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, dy: usize, dx: usize) -> f64 {
        self.data[dy * self.ratio + dx]
    }
}

fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    f64::gemm(m, k, n, a, false, b, false, 0.0, &mut c);
    c
}

/// `Z = S A`, reshaped to a cube on the abundance grid.
pub fn mix(abundances: &AbundanceMap, endmembers: &EndmemberMatrix) -> Result<HsiCube> {
    if abundances.count() != endmembers.count() {
        return Err(Error::shape(
            "mix",
            format!("{} abundance columns vs {} endmembers", abundances.count(), endmembers.count()),
        ));
    }
    let rows = matmul(
        abundances.data(),
        abundances.pixels(),
        abundances.count(),
        endmembers.data(),
        endmembers.bands(),
    );
    HsiCube::from_pixel_matrix(abundances.height(), abundances.width(), endmembers.bands(), &rows)
}

/// Per-pixel spectral resampling `Z R`.
pub fn apply_srf(cube: &HsiCube, srf: &SrfMatrix) -> Result<HsiCube> {
    if cube.bands() != srf.bands() {
        return Err(Error::shape("apply_srf", format!("{} bands vs SRF for {}", cube.bands(), srf.bands())));
    }
    // band-sequential: out[j, p] = sum_b R[b, j] z[b, p]
    let n = cube.pixels();
    let mut out = vec![0.0; srf.channels() * n];
    f64::gemm(srf.channels(), srf.bands(), n, srf.data(), true, cube.data(), false, 0.0, &mut out);
    HsiCube::new(srf.channels(), cube.height(), cube.width(), out)
}

/// Depthwise filtering with stride equal to the kernel side (disjoint blocks).
pub fn apply_psf(cube: &HsiCube, psf: &PsfKernel) -> Result<HsiCube> {
    let r = psf.ratio();
    if cube.height() % r != 0 || cube.width() % r != 0 {
        return Err(Error::shape(
            "apply_psf",
            format!("{}x{} is not divisible by ratio {}", cube.height(), cube.width(), r),
        ));
    }
    let (h, w) = (cube.height() / r, cube.width() / r);
    let mut out = vec![0.0; cube.bands() * h * w];
    for b in 0..cube.bands() {
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                out[(b * h + y / r) * w + x / r] += psf.get(y % r, x % r) * cube.get(b, y, x);
            }
        }
    }
    HsiCube::new(cube.bands(), h, w, out)
}

/// Mean absolute gap between the two routes to the low-resolution
/// multispectral image: `X R` against the spatially degraded `Y`.
pub fn lrmsi_consistency(lr_hsi: &HsiCube, hr_msi: &HsiCube, srf: &SrfMatrix, psf: &PsfKernel) -> Result<f64> {
    let from_hsi = apply_srf(lr_hsi, srf)?;
    let from_msi = apply_psf(hr_msi, psf)?;
    if !from_hsi.same_shape(&from_msi) {
        return Err(Error::shape(
            "lrmsi_consistency",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                from_hsi.bands(),
                from_hsi.height(),
                from_hsi.width(),
                from_msi.bands(),
                from_msi.height(),
                from_msi.width()
            ),
        ));
    }
    Ok(mean_abs_diff(from_hsi.data(), from_msi.data()))
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Physical-constraint diagnostics for an `(S, A)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub anc_ok: bool,
    pub asc_ok: bool,
    pub endmember_nonneg_ok: bool,
    /// Largest negative abundance magnitude.
    pub max_anc_violation: f64,
    /// Largest `|row sum - 1|`.
    pub max_asc_violation: f64,
    /// Largest negative endmember magnitude.
    pub max_endmember_violation: f64,
}

impl ConstraintReport {
    pub fn all_ok(&self) -> bool {
        self.anc_ok && self.asc_ok && self.endmember_nonneg_ok
    }
}

pub fn check_constraints(abundances: &AbundanceMap, endmembers: &EndmemberMatrix, tol: f64) -> ConstraintReport {
    let max_anc_violation = abundances.data().iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    let max_asc_violation = (0..abundances.pixels())
        .map(|p| (abundances.row(p).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let max_endmember_violation = endmembers.data().iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    ConstraintReport {
        anc_ok: max_anc_violation <= tol,
        asc_ok: max_asc_violation <= tol,
        endmember_nonneg_ok: max_endmember_violation <= tol,
        max_anc_violation,
        max_asc_violation,
        max_endmember_violation,
    }
}
