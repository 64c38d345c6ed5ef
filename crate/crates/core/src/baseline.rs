//! Bicubic upsampling of the low-resolution cube, the naive fusion baseline.

use crate::error::{Error, Result};
use crate::mixing::HsiCube;

/// Keys cubic convolution kernel with `a = -0.5`.
fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate. Output pixel centres
/// map to `(i + 0.5) / ratio - 0.5` in input coordinates; taps beyond the
/// edge repeat the border sample.
fn taps(out_len: usize, in_len: usize, ratio: usize) -> Vec<[(usize, f64); 4]> {
    (0..out_len)
        .map(|i| {
            let s = (i as f64 + 0.5) / ratio as f64 - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut t = [(0, 0.0); 4];
            for (j, tap) in t.iter_mut().enumerate() {
                let off = j as isize - 1;
                let src = (base as isize + off).clamp(0, in_len as isize - 1) as usize;
                *tap = (src, keys(frac - off as f64));
            }
            t
        })
        .collect()
}

/// Separable bicubic interpolation by an integer factor.
pub fn bicubic_upsample(cube: &HsiCube, ratio: usize) -> Result<HsiCube> {
    if ratio == 0 {
        return Err(Error::invalid("upsampling ratio must be at least 1"));
    }
    let (h, w) = (cube.height(), cube.width());
    let (oh, ow) = (h * ratio, w * ratio);
    let ty = taps(oh, h, ratio);
    let tx = taps(ow, w, ratio);
    let mut out = Vec::with_capacity(cube.bands() * oh * ow);
    let mut rows = vec![0.0; oh * w];
    for b in 0..cube.bands() {
        let band = cube.band(b);
        for (oy, t) in ty.iter().enumerate() {
            for x in 0..w {
                rows[oy * w + x] = t.iter().map(|&(y, k)| k * band[y * w + x]).sum();
            }
        }
        for oy in 0..oh {
            for t in &tx {
                out.push(t.iter().map(|&(x, k)| k * rows[oy * w + x]).sum());
            }
        }
    }
    let up = HsiCube::new(cube.bands(), oh, ow, out)?;
    match cube.wavelengths() {
        Some(wl) => up.with_wavelengths(wl.to_vec()),
        None => Ok(up),
    }
}
