use super::Element;

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_extent(&self) -> Option<(usize, usize)> {
        let span_h = self.height + 2 * self.padding;
        let span_w = self.width + 2 * self.padding;
        if self.stride == 0 || span_h < self.kernel || span_w < self.kernel {
            return None;
        }
        Some((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold patches into a `[C*k*k, Ho*Wo]` matrix (zero padded).
pub(crate) fn im2col<T: Element>(input: &[T], g: &ConvGeom, out_h: usize, out_w: usize) -> Vec<T> {
    let n = out_h * out_w;
    let k = g.kernel;
    let mut cols = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let shift = kj as isize - g.padding as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.width as isize - shift).min(out_w as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, out_h: usize, out_w: usize, grad: &mut [T]) {
    let n = out_h * out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * out_w..(oy + 1) * out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}
