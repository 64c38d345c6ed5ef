//! Two unmixing autoencoders with cross-attention and learnable
//! spatial/spectral degradation layers.
//!
//! The low-resolution HSI `X` and the high-resolution MSI `Y` each pass
//! through an encoder that ends in a `[0, 1]` clamp, producing abundance
//! maps. Decoders are bias-free 1x1 convolutions whose kernels play the role
//! of endmember matrices. The fused image is the HSI decoder applied to the
//! MSI-branch abundances.

mod checkpoint;
mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingSnapshot};
pub use graph::{consistency_outputs, cross_attention, psf_layer, srf_layer, standardize_bands, FusionNet, Encoded, Forward, ParamVars};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub endmembers: usize,
    pub hs_bands: usize,
    pub ms_bands: usize,
    pub ratio: usize,
    /// Spatial extent of the low-resolution input (the global attention
    /// filter has this size).
    pub lr_height: usize,
    pub lr_width: usize,
    /// Output channels of every Conv+LReLU block; the last equals
    /// `endmembers`. A 1x1 projection to `endmembers` channels follows.
    pub widths: Vec<usize>,
    /// Kernel sizes of the HSI encoder blocks (all 1).
    pub hs_kernels: Vec<usize>,
    /// Kernel sizes of the MSI encoder blocks (odd, non-increasing).
    pub ms_kernels: Vec<usize>,
    pub leaky_slope: f64,
    /// Side of the local attention filter.
    pub attention_kernel: usize,
}

impl NetworkConfig {
    /// Default architecture for a given problem geometry.
    pub fn new(endmembers: usize, hs_bands: usize, ms_bands: usize, ratio: usize, lr_height: usize, lr_width: usize) -> Self {
        Self {
            endmembers,
            hs_bands,
            ms_bands,
            ratio,
            lr_height,
            lr_width,
            widths: vec![64, 32, endmembers],
            hs_kernels: vec![1, 1, 1],
            ms_kernels: vec![7, 5, 3],
            leaky_slope: 0.2,
            attention_kernel: 3,
        }
    }

    pub fn hr_height(&self) -> usize {
        self.lr_height * self.ratio
    }

    pub fn hr_width(&self) -> usize {
        self.lr_width * self.ratio
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        if self.widths.last() != Some(&self.endmembers) {
            return Err(Error::invalid(format!(
                "last encoder width {:?} must equal endmember count {}",
                self.widths.last(),
                self.endmembers
            )));
        }
        if self.widths.contains(&0) || self.endmembers == 0 {
            return Err(Error::invalid("zero-width encoder stage"));
        }
        if self.hs_kernels.len() != n || self.ms_kernels.len() != n {
            return Err(Error::invalid(format!(
                "{} stages but {} HSI / {} MSI kernel sizes",
                n,
                self.hs_kernels.len(),
                self.ms_kernels.len()
            )));
        }
        if self.hs_kernels.iter().any(|&k| k != 1) {
            return Err(Error::invalid("HSI encoder kernels must all be 1x1"));
        }
        if self.ms_kernels.iter().any(|&k| k % 2 == 0) || self.ms_kernels.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid(format!(
                "MSI encoder kernels {:?} must be odd and non-increasing",
                self.ms_kernels
            )));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::invalid("attention kernel must be odd"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1)"));
        }
        if self.ratio == 0 || self.lr_height == 0 || self.lr_width == 0 || self.hs_bands == 0 || self.ms_bands == 0 {
            return Err(Error::invalid("empty problem geometry"));
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleFlags {
    /// Clamp encoder outputs to `[0, 1]`; when off, a per-pixel softmax over
    /// abundance channels is used instead.
    pub use_clamp: bool,
    /// Learnable PSF/SRF layers and the closed-loop consistency terms. When
    /// off, only `avgpool(Z_hat) ~ X` ties the branches together.
    pub use_ssc: bool,
    /// Cross-attention between the two encoders.
    pub use_ca: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self {
            use_clamp: true,
            use_ssc: true,
            use_ca: true,
        }
    }
}

/// What kind of initialization/projection a parameter receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernel: Kaiming-normal init.
    Kernel,
    Bias,
    /// Bias of the abundance projection, started at `1 / K`.
    Projection,
    /// Decoder / degradation weights: nonnegative, projected after each step.
    Nonnegative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Fan-in for Kaiming init (kernels only).
    pub fan_in: usize,
}

/// Positions of every parameter inside [`NetworkWeights::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    /// `(kernel, bias)` of every Conv+LReLU block.
    pub hs_encoder: Vec<(usize, usize)>,
    pub ms_encoder: Vec<(usize, usize)>,
    /// Final 1x1 convolution to `K` channels, followed by the clamp.
    pub hs_projection: (usize, usize),
    pub ms_projection: (usize, usize),
    /// `(u, v)`: global `[K, h, w]` and local `[1, K, p, p]` attention filters.
    pub attention: Option<(usize, usize)>,
    pub hs_decoder: usize,
    pub ms_decoder: usize,
    /// Raw `[l, L]` SRF weights and raw `[r, r]` PSF kernel.
    pub srf: Option<usize>,
    pub psf: Option<usize>,
}

impl Layout {
    pub fn new(cfg: &NetworkConfig, flags: ModuleFlags) -> Result<Self> {
        cfg.validate()?;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize| {
            specs.push(ParamSpec {
                name,
                shape,
                kind,
                fan_in,
            });
            specs.len() - 1
        };
        let attn_channels = cfg.endmembers;
        let proj_in = if flags.use_ca { 2 * attn_channels } else { attn_channels };
        let encoder = |prefix: &str, in_ch: usize, kernels: &[usize], push: &mut dyn FnMut(String, Vec<usize>, ParamKind, usize) -> usize| {
            let mut blocks = Vec::with_capacity(cfg.widths.len());
            let mut c = in_ch;
            for (i, (&out, &k)) in cfg.widths.iter().zip(kernels).enumerate() {
                let w = push(format!("{}.{}.weight", prefix, i), vec![out, c, k, k], ParamKind::Kernel, c * k * k);
                let b = push(format!("{}.{}.bias", prefix, i), vec![out], ParamKind::Bias, 0);
                blocks.push((w, b));
                c = out;
            }
            let w = push(
                format!("{}.projection.weight", prefix),
                vec![cfg.endmembers, proj_in, 1, 1],
                ParamKind::Kernel,
                proj_in,
            );
            let b = push(format!("{}.projection.bias", prefix), vec![cfg.endmembers], ParamKind::Projection, 0);
            (blocks, (w, b))
        };
        let (hs_encoder, hs_projection) = encoder("hs_encoder", cfg.hs_bands, &cfg.hs_kernels, &mut push);
        let (ms_encoder, ms_projection) = encoder("ms_encoder", cfg.ms_bands, &cfg.ms_kernels, &mut push);
        let attention = flags.use_ca.then(|| {
            let u = push(
                "attention.global".into(),
                vec![attn_channels, cfg.lr_height, cfg.lr_width],
                ParamKind::Kernel,
                cfg.lr_height * cfg.lr_width,
            );
            let p = cfg.attention_kernel;
            let v = push(
                "attention.local".into(),
                vec![1, attn_channels, p, p],
                ParamKind::Kernel,
                attn_channels * p * p,
            );
            (u, v)
        });
        let hs_decoder = push(
            "hs_decoder".into(),
            vec![cfg.hs_bands, cfg.endmembers],
            ParamKind::Nonnegative,
            0,
        );
        let ms_decoder = push(
            "ms_decoder".into(),
            vec![cfg.ms_bands, cfg.endmembers],
            ParamKind::Nonnegative,
            0,
        );
        let (srf, psf) = if flags.use_ssc {
            (
                Some(push("srf".into(), vec![cfg.ms_bands, cfg.hs_bands], ParamKind::Nonnegative, 0)),
                Some(push("psf".into(), vec![cfg.ratio, cfg.ratio], ParamKind::Nonnegative, 0)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            specs,
            hs_encoder,
            ms_encoder,
            hs_projection,
            ms_projection,
            attention,
            hs_decoder,
            ms_decoder,
            srf,
            psf,
        })
    }
}

/// Parameter values in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Element> NetworkWeights<T> {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            tensors: layout.specs.iter().map(|s| Tensor::zeros(s.shape.clone())).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn check(&self, layout: &Layout) -> Result<()> {
        if self.tensors.len() != layout.specs.len() {
            return Err(Error::shape(
                "weights",
                format!("{} tensors for {} parameters", self.tensors.len(), layout.specs.len()),
            ));
        }
        for (t, s) in self.tensors.iter().zip(&layout.specs) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape("weights", format!("{} is {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(())
    }

    /// Clamp decoder and degradation weights at zero.
    pub fn project(&mut self, layout: &Layout) {
        for (t, s) in self.tensors.iter_mut().zip(&layout.specs) {
            if s.kind == ParamKind::Nonnegative {
                t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetworkConfig {
        NetworkConfig::new(4, 31, 3, 8, 8, 8)
    }

    #[test]
    fn default_config_is_valid() {
        cfg().validate().unwrap();
        assert_eq!((cfg().hr_height(), cfg().hr_width()), (64, 64));
    }

    #[test]
    fn config_rejections() {
        let mut c = cfg();
        c.widths = vec![64, 32, 5];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.ms_kernels = vec![3, 5, 3];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.hs_kernels = vec![1, 3, 1];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.ms_kernels = vec![7, 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_input_width_follows_attention() {
        let with = Layout::new(&cfg(), ModuleFlags::default()).unwrap();
        let (w, _) = with.ms_encoder[2];
        assert_eq!(with.specs[w].shape, vec![4, 32, 3, 3]);
        assert_eq!(with.specs[with.ms_projection.0].shape, vec![4, 8, 1, 1]);
        assert_eq!(with.specs[with.attention.unwrap().0].shape, vec![4, 8, 8]);
        let without = Layout::new(
            &cfg(),
            ModuleFlags {
                use_ca: false,
                ..ModuleFlags::default()
            },
        )
        .unwrap();
        assert_eq!(without.specs[without.ms_projection.0].shape, vec![4, 4, 1, 1]);
        assert!(without.attention.is_none());
        assert_eq!(with.specs[with.srf.unwrap()].shape, vec![3, 31]);
        assert_eq!(with.specs[with.psf.unwrap()].shape, vec![8, 8]);
    }

    #[test]
    fn projection_clamps_only_nonnegative_params() {
        let layout = Layout::new(&cfg(), ModuleFlags::default()).unwrap();
        let mut w = NetworkWeights::<f32>::zeros(&layout);
        for t in &mut w.tensors {
            t.data_mut().fill(-1.0);
        }
        w.project(&layout);
        for (t, s) in w.tensors.iter().zip(&layout.specs) {
            let expect = if s.kind == ParamKind::Nonnegative { 0.0 } else { -1.0 };
            assert!(t.data().iter().all(|&v| v == expect), "{}", s.name);
        }
    }
}
