use crate::error::{Error, Result};
use crate::mixing::{AbundanceMap, EndmemberMatrix, HsiCube, PsfKernel, SrfMatrix};
use crate::tensor::{Axis, Element, Tape, Tensor, Var};

use super::{Layout, ModuleFlags, NetworkConfig, NetworkWeights};

/// Tape handles of every parameter, in layout order.
pub type ParamVars = Vec<Var>;

/// Abundance maps of both branches.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[K, h, w]` from the HSI encoder.
    pub hs: Var,
    /// `[K, H, W]` from the MSI encoder.
    pub ms: Var,
}

/// Every intermediate the losses need.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub x: Var,
    pub y: Var,
    pub abundances: Encoded,
    /// Reconstruction of `X` by the HSI autoencoder.
    pub x_rec: Var,
    /// Reconstruction of `Y` by the MSI autoencoder.
    pub y_rec: Var,
    /// Fused high-resolution HSI.
    pub fused: Var,
    /// Spatially degraded fused image, compared against `X`.
    pub fused_lr: Var,
    /// Spectrally degraded fused image, compared against `Y` (learned SRF only).
    pub fused_ms: Option<Var>,
    /// Low-resolution MSI obtained as `srf(X)` and as `psf(Y)`.
    pub lr_msi_from_x: Option<Var>,
    pub lr_msi_from_y: Option<Var>,
}

/// Cross-attention between an LR feature map `f [C, h, w]` and an HR feature
/// map `g [C, H, W]`; returns `(f', g')` with `2C` channels each.
///
/// The MSI branch is reweighted per channel by a softmax of `f`'s channel
/// responses to the global filter `u [C, h, w]`. The HSI branch is reweighted
/// per pixel by a spatial softmax of `g` filtered with `v [1, C, p, p]`,
/// block-summed down to the LR grid.
pub fn cross_attention<T: Element>(tape: &mut Tape<T>, f: Var, g: Var, u: Var, v: Var, ratio: usize) -> Result<(Var, Var)> {
    let p = tape.value(v).shape()[2];
    let fu = tape.mul(f, u)?;
    let resp = tape.reduce_sum(fu, Axis::Spatial)?;
    let channel_w = tape.softmax(resp, Axis::Channel)?;

    let smap = tape.conv2d(g, v, None, 1, p / 2)?;
    let spatial = tape.softmax(smap, Axis::Spatial)?;
    let pooled = tape.avg_pool(spatial, ratio)?;
    let pixel_w = tape.scale(pooled, (ratio * ratio) as f64)?;

    let f_att = tape.mul(f, pixel_w)?;
    let g_att = tape.mul(g, channel_w)?;
    Ok((tape.concat_channels(f, f_att)?, tape.concat_channels(g, g_att)?))
}

/// Learned spectral response: rows of `raw [l, L]` are normalized to sum to
/// one, then applied per pixel.
pub fn srf_layer<T: Element>(tape: &mut Tape<T>, raw: Var, input: Var) -> Result<Var> {
    let w = tape.normalize_rows(raw)?;
    tape.channel_matmul(w, input)
}

/// Learned point spread function: `raw [r, r]` is normalized to sum to one
/// and applied as a stride-`r` depthwise filter shared by all bands.
pub fn psf_layer<T: Element>(tape: &mut Tape<T>, raw: Var, input: Var) -> Result<Var> {
    let k = tape.normalize_all(raw)?;
    tape.block_filter(input, k)
}

/// `(srf(X), psf(Y), psf(Z_hat), srf(Z_hat))`.
pub fn consistency_outputs<T: Element>(
    tape: &mut Tape<T>,
    srf_raw: Var,
    psf_raw: Var,
    x: Var,
    y: Var,
    fused: Var,
) -> Result<(Var, Var, Var, Var)> {
    let srf_w = tape.normalize_rows(srf_raw)?;
    let psf_k = tape.normalize_all(psf_raw)?;
    let from_x = tape.channel_matmul(srf_w, x)?;
    let from_y = tape.block_filter(y, psf_k)?;
    let fused_lr = tape.block_filter(fused, psf_k)?;
    let fused_ms = tape.channel_matmul(srf_w, fused)?;
    Ok((from_x, from_y, fused_lr, fused_ms))
}

/// Zero-mean, unit-variance copy of each band. Constant bands are only
/// centered.
pub fn standardize_bands<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.dims3().expect("encoder input is [C, H, W]");
    let n = h * w;
    let mut out = t.clone();
    for band in out.data_mut().chunks_mut(n).take(c) {
        let mean = band.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = band.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        band.iter_mut().for_each(|v| *v = T::from_f64((v.as_f64() - mean) * inv));
    }
    out
}

/// Network definition: architecture, ablation switches and parameter layout.
#[derive(Clone, Debug)]
pub struct FusionNet {
    config: NetworkConfig,
    flags: ModuleFlags,
    layout: Layout,
}

impl FusionNet {
    pub fn new(config: NetworkConfig, flags: ModuleFlags) -> Result<Self> {
        let layout = Layout::new(&config, flags)?;
        Ok(Self { config, flags, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn flags(&self) -> ModuleFlags {
        self.flags
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Puts the weights on the tape, as trainable leaves or as constants.
    pub fn register<T: Element>(&self, tape: &mut Tape<T>, weights: &NetworkWeights<T>, trainable: bool) -> Result<ParamVars> {
        weights.check(&self.layout)?;
        weights
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_inputs<T: Element>(&self, tape: &Tape<T>, x: Var, y: Var) -> Result<()> {
        let c = &self.config;
        let want_x = [c.hs_bands, c.lr_height, c.lr_width];
        let want_y = [c.ms_bands, c.hr_height(), c.hr_width()];
        if tape.value(x).shape() != want_x || tape.value(y).shape() != want_y {
            return Err(Error::shape(
                "network input",
                format!(
                    "got X {:?} and Y {:?}, network expects {:?} and {:?}",
                    tape.value(x).shape(),
                    tape.value(y).shape(),
                    want_x,
                    want_y
                ),
            ));
        }
        Ok(())
    }

    fn blocks<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], input: Var, blocks: &[(usize, usize)], kernels: &[usize]) -> Result<Var> {
        let mut h = input;
        for (&(w, b), &k) in blocks.iter().zip(kernels) {
            let z = tape.conv2d(h, p[w], Some(p[b]), 1, k / 2)?;
            h = tape.leaky_relu(z, self.config.leaky_slope)?;
        }
        Ok(h)
    }

    fn project<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], feat: Var, (w, b): (usize, usize)) -> Result<Var> {
        let z = tape.conv2d(feat, p[w], Some(p[b]), 1, 0)?;
        if self.flags.use_clamp {
            tape.clamp01(z)
        } else {
            tape.softmax(z, Axis::Channel)
        }
    }

    /// Runs both encoders on band-standardized copies of the observations.
    /// With cross-attention each branch sees the other, so both observations
    /// are always required.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, y: Var) -> Result<Encoded> {
        self.check_inputs(tape, x, y)?;
        let l = &self.layout;
        let c = &self.config;
        let xs = tape.constant(standardize_bands(tape.value(x)))?;
        let ys = tape.constant(standardize_bands(tape.value(y)))?;
        let mut f = self.blocks(tape, p, xs, &l.hs_encoder, &c.hs_kernels)?;
        let mut g = self.blocks(tape, p, ys, &l.ms_encoder, &c.ms_kernels)?;
        if let Some((u, v)) = l.attention {
            (f, g) = cross_attention(tape, f, g, p[u], p[v], c.ratio)?;
        }
        let hs = self.project(tape, p, f, l.hs_projection)?;
        let ms = self.project(tape, p, g, l.ms_projection)?;
        Ok(Encoded { hs, ms })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, y: Var) -> Result<Forward> {
        let abundances = self.encode(tape, p, x, y)?;
        let l = &self.layout;
        let hs_dec = p[l.hs_decoder];
        let x_rec = tape.channel_matmul(hs_dec, abundances.hs)?;
        let y_rec = tape.channel_matmul(p[l.ms_decoder], abundances.ms)?;
        let fused = tape.channel_matmul(hs_dec, abundances.ms)?;
        let (fused_lr, fused_ms, lr_msi_from_x, lr_msi_from_y) = match (l.srf, l.psf) {
            (Some(s), Some(k)) => {
                let (fx, fy, lr, ms) = consistency_outputs(tape, p[s], p[k], x, y, fused)?;
                (lr, Some(ms), Some(fx), Some(fy))
            }
            _ => (tape.avg_pool(fused, self.config.ratio)?, None, None, None),
        };
        Ok(Forward {
            x,
            y,
            abundances,
            x_rec,
            y_rec,
            fused,
            fused_lr,
            fused_ms,
            lr_msi_from_x,
            lr_msi_from_y,
        })
    }

    fn inference<T: Element, R>(
        &self,
        weights: &NetworkWeights<T>,
        x: &HsiCube,
        y: &HsiCube,
        read: impl FnOnce(&Tape<T>, &Forward) -> Result<R>,
    ) -> Result<R> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, weights, false)?;
        let xv = tape.constant(x.to_tensor())?;
        let yv = tape.constant(y.to_tensor())?;
        let fwd = self.forward(&mut tape, &p, xv, yv)?;
        read(&tape, &fwd)
    }

    /// High-resolution HSI estimate: HSI decoder applied to MSI abundances.
    pub fn fuse<T: Element>(&self, weights: &NetworkWeights<T>, x: &HsiCube, y: &HsiCube) -> Result<HsiCube> {
        let mut out = self.inference(weights, x, y, |tape, f| HsiCube::from_tensor(tape.value(f.fused)))?;
        if let Some(wl) = x.wavelengths() {
            out = out.with_wavelengths(wl.to_vec())?;
        }
        Ok(out)
    }

    /// `(A_hs, A_ms)` abundance maps.
    pub fn abundances<T: Element>(&self, weights: &NetworkWeights<T>, x: &HsiCube, y: &HsiCube) -> Result<(AbundanceMap, AbundanceMap)> {
        self.inference(weights, x, y, |tape, f| {
            let hs = HsiCube::from_tensor(tape.value(f.abundances.hs))?;
            let ms = HsiCube::from_tensor(tape.value(f.abundances.ms))?;
            Ok((AbundanceMap::from_cube(&hs)?, AbundanceMap::from_cube(&ms)?))
        })
    }

    /// Endmembers held by the HSI decoder, one row per endmember.
    pub fn endmembers<T: Element>(&self, weights: &NetworkWeights<T>) -> Result<EndmemberMatrix> {
        let dec = &weights.tensors[self.layout.hs_decoder];
        let (bands, k) = (self.config.hs_bands, self.config.endmembers);
        let mut data = vec![0.0; k * bands];
        for b in 0..bands {
            for e in 0..k {
                data[e * bands + b] = dec.data()[b * k + e].as_f64();
            }
        }
        EndmemberMatrix::new(k, bands, data)
    }

    /// Learned SRF as a column-normalized `L x l` matrix.
    pub fn srf_estimate<T: Element>(&self, weights: &NetworkWeights<T>) -> Result<Option<SrfMatrix>> {
        let Some(i) = self.layout.srf else { return Ok(None) };
        let raw = &weights.tensors[i];
        let (l, bands) = (self.config.ms_bands, self.config.hs_bands);
        let mut data = vec![0.0; bands * l];
        for c in 0..l {
            for b in 0..bands {
                data[b * l + c] = raw.data()[c * bands + b].as_f64();
            }
        }
        SrfMatrix::normalized(bands, l, data).map(Some)
    }

    /// Learned PSF as a normalized `r x r` kernel.
    pub fn psf_estimate<T: Element>(&self, weights: &NetworkWeights<T>) -> Result<Option<PsfKernel>> {
        let Some(i) = self.layout.psf else { return Ok(None) };
        let raw: Vec<f64> = weights.tensors[i].data().iter().map(|v| v.as_f64()).collect();
        PsfKernel::normalized(self.config.ratio, raw).map(Some)
    }

    /// Tensor shapes the network expects for `(X, Y)`.
    pub fn input_shapes(&self) -> ([usize; 3], [usize; 3]) {
        let c = &self.config;
        (
            [c.hs_bands, c.lr_height, c.lr_width],
            [c.ms_bands, c.hr_height(), c.hr_width()],
        )
    }
}

