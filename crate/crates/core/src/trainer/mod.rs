//! Unsupervised optimization of the coupled network on a single image pair.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossParts, LossWeights, PixelMasks};
use crate::mixing::HsiCube;
use crate::network::{Checkpoint, FusionNet, ModuleFlags, NetworkConfig, NetworkWeights, ParamKind, TrainingSnapshot};
use crate::tensor::{adam_step, without_subnormals, AdamState, Tape, Tensor};

mod studies;

pub use studies::{
    grid_search, median, parallel_map, run_ablation, write_ablation_csv, write_grid_csv, AblationInputs, AblationRow,
    AblationRun, AblationTable, Arm, GridRow, GridSearch, LossGrid, MetricSummary, ARMS,
};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// First epoch of the step decay.
    pub decay_start: usize,
    /// Epoch at which the rate reaches `final_lr_factor * lr`.
    pub decay_end: usize,
    pub decay_step: usize,
    pub final_lr_factor: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub modules: ModuleFlags,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10000,
            lr: 0.005,
            decay_start: 2000,
            decay_end: 10000,
            decay_step: 1000,
            final_lr_factor: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            modules: ModuleFlags::default(),
            patience: 500,
            min_delta: 1e-5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.decay_end <= self.decay_start || self.decay_step == 0 {
            return Err(Error::invalid("decay window must be non-empty with a positive step"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return Err(Error::invalid("learning rate must be positive and the final factor in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: constant before the decay window, then
/// piecewise constant on `decay_step`-epoch steps following the straight line
/// from `lr` at `decay_start` to `final_lr_factor * lr` at `decay_end`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start {
        return cfg.lr;
    }
    let step_start = cfg.decay_start + (epoch - cfg.decay_start) / cfg.decay_step * cfg.decay_step;
    let t = (step_start.min(cfg.decay_end) - cfg.decay_start) as f64 / (cfg.decay_end - cfg.decay_start) as f64;
    cfg.lr * (1.0 - (1.0 - cfg.final_lr_factor) * t)
}

/// Kaiming-normal (fan-in, leaky-ReLU gain) block kernels, zero block
/// biases, zero projection weights with `1 / K` biases, and nonnegative decoder/degradation weights:
/// `U(0, 1)` decoders and flat SRF/PSF.
pub fn init_weights(net: &FusionNet, seed: u64) -> NetworkWeights<f32> {
    let layout = net.layout();
    let a = net.config().leaky_slope;
    let gain = (2.0 / (1.0 + a * a)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = NetworkWeights::zeros(layout);
    let degradation = [layout.srf, layout.psf];
    for (i, (t, s)) in w.tensors.iter_mut().zip(&layout.specs).enumerate() {
        match s.kind {
            ParamKind::Kernel => {
                let std = gain / (s.fan_in as f64).sqrt();
                for v in t.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (std * z) as f32;
                }
            }
            ParamKind::Bias => {}
            ParamKind::Projection => t.data_mut().fill(1.0 / net.config().endmembers as f32),
            ParamKind::Nonnegative if degradation.contains(&Some(i)) => t.data_mut().fill(1.0),
            ParamKind::Nonnegative => {
                for v in t.data_mut() {
                    *v = rng.random::<f32>();
                }
            }
        }
    }
    // Zero projection weights start every abundance at 1/K inside the clamp.
    for (wi, _) in [layout.hs_projection, layout.ms_projection] {
        w.tensors[wi].data_mut().fill(0.0);
    }
    w.project(layout);
    w
}

/// Network geometry for an observed pair.
pub fn network_config_for(x: &HsiCube, y: &HsiCube, endmembers: usize) -> Result<NetworkConfig> {
    if y.height() % x.height() != 0 || y.width() % x.width() != 0 || y.height() / x.height() != y.width() / x.width() {
        return Err(Error::invalid(format!(
            "MSI extent {}x{} is not an integer multiple of HSI extent {}x{}",
            y.height(),
            y.width(),
            x.height(),
            x.width()
        )));
    }
    let ratio = y.height() / x.height();
    Ok(NetworkConfig::new(endmembers, x.bands(), y.bands(), ratio, x.height(), x.width()))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train: LossParts,
    /// Loss on the held-out pixels (equal to `train` without a mask).
    pub validation: LossParts,
    pub lr: f64,
}

/// Resumable optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState<f32>,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best_weights: NetworkWeights<f32>,
    /// Seed of every random draw (initialization and validation mask).
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub weights: NetworkWeights<f32>,
    pub fused: HsiCube,
    pub log: Vec<LogRow>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

struct Masks {
    train_lr: Tensor<f32>,
    train_hr: Tensor<f32>,
    val_lr: Tensor<f32>,
    val_hr: Tensor<f32>,
}

fn pixel_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, fraction: f64) -> (Tensor<f32>, Tensor<f32>) {
    let n = h * w;
    let k = ((n as f64) * fraction).round() as usize;
    let mut val = Tensor::zeros(vec![1, h, w]);
    for i in sample(rng, n, k.min(n)) {
        val.data_mut()[i] = 1.0;
    }
    let train = Tensor::from_fn(vec![1, h, w], |i| 1.0 - val.data()[i]);
    (train, val)
}

fn make_masks(cfg: &NetworkConfig, seed: u64, fraction: f64) -> Masks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let (train_lr, val_lr) = pixel_mask(&mut rng, cfg.lr_height, cfg.lr_width, fraction);
    let (train_hr, val_hr) = pixel_mask(&mut rng, cfg.hr_height(), cfg.hr_width(), fraction);
    Masks {
        train_lr,
        train_hr,
        val_lr,
        val_hr,
    }
}

/// Epoch-by-epoch driver. [`Trainer::step`] advances one full-image epoch;
/// [`Trainer::state`] and [`Trainer::resume`] allow exact continuation.
pub struct Trainer {
    net: FusionNet,
    cfg: TrainConfig,
    x: Tensor<f32>,
    y: Tensor<f32>,
    x_cube: HsiCube,
    y_cube: HsiCube,
    masks: Masks,
    weights: NetworkWeights<f32>,
    state: TrainState,
    last: Option<LogRow>,
    stopped_early: bool,
}

impl Trainer {
    pub fn new(x: &HsiCube, y: &HsiCube, net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = FusionNet::new(net_cfg, cfg.modules)?;
        let (sx, sy) = net.input_shapes();
        if [x.bands(), x.height(), x.width()] != sx || [y.bands(), y.height(), y.width()] != sy {
            return Err(Error::shape(
                "train",
                format!(
                    "X is {}x{}x{} and Y {}x{}x{}, network expects {:?} and {:?}",
                    x.bands(),
                    x.height(),
                    x.width(),
                    y.bands(),
                    y.height(),
                    y.width(),
                    sx,
                    sy
                ),
            ));
        }
        let weights = init_weights(&net, cfg.seed);
        let adam = AdamState::new(&weights.tensors.iter().collect::<Vec<_>>());
        let masks = make_masks(net.config(), cfg.seed, cfg.validation_fraction);
        let state = TrainState {
            epoch: 0,
            adam,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best_weights: weights.clone(),
            seed: cfg.seed,
        };
        Ok(Self {
            x: x.to_tensor(),
            y: y.to_tensor(),
            x_cube: x.clone(),
            y_cube: y.clone(),
            net,
            cfg,
            masks,
            weights,
            state,
            last: None,
            stopped_early: false,
        })
    }

    pub fn network(&self) -> &FusionNet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &NetworkWeights<f32> {
        &self.weights
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Continue from a saved state and the weights that accompany it.
    pub fn resume(&mut self, weights: NetworkWeights<f32>, state: TrainState) -> Result<()> {
        weights.check(self.net.layout())?;
        state.best_weights.check(self.net.layout())?;
        if state.seed != self.cfg.seed {
            return Err(Error::invalid(format!(
                "checkpoint was trained with seed {}, config says {}",
                state.seed, self.cfg.seed
            )));
        }
        self.weights = weights;
        self.state = state;
        self.stopped_early = false;
        Ok(())
    }

    /// Full checkpoint of the current point of the run.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.net.config().clone(),
            flags: self.net.flags(),
            weights: self.weights.clone(),
            training: Some(TrainingSnapshot {
                epoch: self.state.epoch,
                adam: self.state.adam.clone(),
                best_loss: self.state.best_loss,
                best_epoch: self.state.best_epoch,
                best_weights: self.state.best_weights.clone(),
                meta: serde_json::to_value(&self.cfg)?,
            }),
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(x: &HsiCube, y: &HsiCube, ckpt: Checkpoint) -> Result<Self> {
        let snap = ckpt
            .training
            .ok_or_else(|| Error::invalid("checkpoint holds no optimizer state"))?;
        let cfg: TrainConfig = serde_json::from_value(snap.meta)?;
        let mut t = Self::new(x, y, ckpt.config, cfg)?;
        t.resume(
            ckpt.weights,
            TrainState {
                epoch: snap.epoch,
                adam: snap.adam,
                best_loss: snap.best_loss,
                best_epoch: snap.best_epoch,
                best_weights: snap.best_weights,
                seed: t.cfg.seed,
            },
        )?;
        Ok(t)
    }

    pub fn is_done(&self) -> bool {
        self.stopped_early || self.state.epoch >= self.cfg.max_epochs
    }

    fn diverged(&self, detail: impl std::fmt::Display) -> Error {
        let last = match &self.last {
            Some(r) => format!(
                "; previous epoch losses R={:.6e} ASC={:.6e} S={:.6e} C={:.6e}",
                r.train.reconstruction, r.train.asc, r.train.sparsity, r.train.consistency
            ),
            None => String::new(),
        };
        Error::Diverged {
            epoch: self.state.epoch,
            detail: format!("{}{}", detail, last),
        }
    }

    /// Runs one epoch; returns `None` once training has finished.
    pub fn step(&mut self) -> Result<Option<LogRow>> {
        without_subnormals(|| self.step_inner())
    }

    fn step_inner(&mut self) -> Result<Option<LogRow>> {
        if self.is_done() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let mut tape = Tape::<f32>::new();
        let p = self.net.register(&mut tape, &self.weights, true)?;
        let xv = tape.constant(self.x.clone())?;
        let yv = tape.constant(self.y.clone())?;
        let train_masks = PixelMasks {
            lr: tape.constant(self.masks.train_lr.clone())?,
            hr: tape.constant(self.masks.train_hr.clone())?,
        };
        let val_masks = PixelMasks {
            lr: tape.constant(self.masks.val_lr.clone())?,
            hr: tape.constant(self.masks.val_hr.clone())?,
        };
        let nan = |e: Error, this: &Self| match e {
            Error::NonFinite { op } => this.diverged(format!("non-finite value in {}", op)),
            other => other,
        };
        let fwd = self.net.forward(&mut tape, &p, xv, yv).map_err(|e| nan(e, self))?;
        let train = total_loss(&mut tape, &fwd, &self.cfg.loss, Some(train_masks)).map_err(|e| nan(e, self))?;
        let parts = train.values(&tape);
        let validation = if self.cfg.validation_fraction > 0.0 {
            total_loss(&mut tape, &fwd, &self.cfg.loss, Some(val_masks))
                .map_err(|e| nan(e, self))?
                .values(&tape)
        } else {
            parts
        };
        if !parts.total.is_finite() || !validation.total.is_finite() {
            return Err(self.diverged("non-finite loss"));
        }
        if validation.total < self.state.best_loss - self.cfg.min_delta {
            self.state.best_loss = validation.total;
            self.state.best_epoch = epoch;
            self.state.best_weights = self.weights.clone();
        }
        let mut grads = tape.backward(train.total).map_err(|e| nan(e, self))?;
        let grads: Vec<Tensor<f32>> = p
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
            .collect();
        {
            let mut params: Vec<&mut Tensor<f32>> = self.weights.tensors.iter_mut().collect();
            let grefs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam_step(&mut params, &grefs, &mut self.state.adam, lr)?;
        }
        self.weights.project(self.net.layout());
        self.state.epoch += 1;
        if self.state.epoch - 1 - self.state.best_epoch >= self.cfg.patience {
            self.stopped_early = true;
        }
        let row = LogRow {
            epoch,
            train: parts,
            validation,
            lr,
        };
        self.last = Some(row);
        Ok(Some(row))
    }

    /// Train to completion, handing each log row to `on_epoch`.
    pub fn run(mut self, mut on_epoch: impl FnMut(&Trainer, &LogRow) -> Result<()>) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut log = Vec::new();
        while let Some(row) = self.step()? {
            on_epoch(&self, &row)?;
            log.push(row);
        }
        self.finish(log, start.elapsed().as_secs_f64())
    }

    fn finish(self, log: Vec<LogRow>, seconds: f64) -> Result<TrainOutcome> {
        let weights = self.state.best_weights.clone();
        let fused = self.net.fuse(&weights, &self.x_cube, &self.y_cube)?;
        Ok(TrainOutcome {
            weights,
            fused,
            log,
            epochs_run: self.state.epoch,
            best_epoch: self.state.best_epoch,
            best_validation: self.state.best_loss,
            stopped_early: self.stopped_early,
            seconds,
        })
    }
}

/// Trains with default logging and returns the best-validation result.
pub fn train(x: &HsiCube, y: &HsiCube, net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(x, y, net_cfg, cfg)?.run(|_, row| {
        if row.epoch % 500 == 0 {
            log::info!(
                "epoch {} loss {:.6e} val {:.6e} lr {:.2e}",
                row.epoch,
                row.train.total,
                row.validation.total,
                row.lr
            );
        }
        Ok(())
    })
}

/// Writes the training log as CSV.
pub fn write_log_csv<W: std::io::Write>(out: W, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "L_R", "L_ASC", "L_S", "L_C", "total", "lr", "validation"])?;
    for r in log {
        w.write_record(&[
            r.epoch.to_string(),
            r.train.reconstruction.to_string(),
            r.train.asc.to_string(),
            r.train.sparsity.to_string(),
            r.train.consistency.to_string(),
            r.train.total.to_string(),
            r.lr.to_string(),
            r.validation.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
