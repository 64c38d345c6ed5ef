//! Run configuration: a TOML file whose keys every command-line flag can
//! override.

use std::path::Path;

use anyhow::{Context, Result};
use hsfuse::cnmf::CnmfConfig;
use hsfuse::network::NetworkConfig;
use hsfuse::sim::SceneSpec;
use hsfuse::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Encoder architecture; the problem geometry comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub endmembers: usize,
    /// Hidden block widths; a final block of `endmembers` channels is appended.
    pub hidden_widths: Vec<usize>,
    pub ms_kernels: Vec<usize>,
    pub leaky_slope: f64,
    pub attention_kernel: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let d = NetworkConfig::new(4, 1, 1, 1, 1, 1);
        Self {
            endmembers: d.endmembers,
            hidden_widths: d.widths[..d.widths.len() - 1].to_vec(),
            ms_kernels: d.ms_kernels,
            leaky_slope: d.leaky_slope,
            attention_kernel: d.attention_kernel,
        }
    }
}

impl NetworkSettings {
    pub fn apply(&self, mut cfg: NetworkConfig) -> NetworkConfig {
        cfg.endmembers = self.endmembers;
        cfg.widths = self.hidden_widths.iter().copied().chain([self.endmembers]).collect();
        cfg.hs_kernels = vec![1; cfg.widths.len()];
        cfg.ms_kernels = self.ms_kernels.clone();
        cfg.leaky_slope = self.leaky_slope;
        cfg.attention_kernel = self.attention_kernel;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both the scene and the training run.
    pub seed: u64,
    pub scene: SceneSpec,
    pub network: NetworkSettings,
    pub train: TrainConfig,
    pub cnmf: CnmfConfig,
    pub ablation: AblationSettings,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ratio: Option<usize>,
    pub k: Option<usize>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        if let Some(r) = o.ratio {
            self.scene.ratio = r;
        }
        if let Some(k) = o.k {
            self.scene.endmembers = k;
            self.network.endmembers = k;
            self.cnmf.endmembers = k;
        }
        if let Some(e) = o.epochs {
            self.train.max_epochs = e;
            self.train.patience = self.train.patience.min(e.saturating_sub(1));
        }
        let loss = &mut self.train.loss;
        for (dst, src) in [
            (&mut loss.alpha, o.alpha),
            (&mut loss.beta, o.beta),
            (&mut loss.gamma, o.gamma),
            (&mut loss.epsilon, o.epsilon),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        self.scene.validate()?;
        self.train.validate()?;
        self.cnmf.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Write the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.to_toml()?).with_context(|| format!("writing {}", dir.display()))
    }
}
