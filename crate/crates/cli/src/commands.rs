use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsfuse::baseline::bicubic_upsample;
use hsfuse::cnmf::cnmf_fuse;
use hsfuse::metrics::{evaluate, MetricReport};
use hsfuse::mixing::{lrmsi_consistency, EndmemberMatrix, HsiCube, PsfKernel, SrfMatrix};
use hsfuse::network::{load_checkpoint, save_checkpoint, Checkpoint, FusionNet};
use hsfuse::sim::{load_cube, load_srf_csv, save_cube, save_srf_csv, Scene};
use hsfuse::trainer::{network_config_for, run_ablation, write_ablation_csv, write_log_csv, AblationInputs, Trainer};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const Z: &str = "z.cube";
pub const X: &str = "x.cube";
pub const Y: &str = "y.cube";
pub const ABUNDANCES: &str = "abundances.cube";
pub const ENDMEMBERS: &str = "endmembers.cube";
pub const SRF: &str = "srf.csv";
pub const PSF: &str = "psf.csv";

/// Residual maps map absolute error `[0, RESIDUAL_SCALE]` onto `0..=255`.
pub const RESIDUAL_SCALE: f64 = 0.1;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_cube(path: &Path) -> Result<HsiCube> {
    load_cube(path).with_context(|| format!("reading {}", path.display()))
}

fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    save_cube(path, cube).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Prints one JSON document on stdout.
fn emit(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn band_wavelengths(cube: &HsiCube) -> Vec<f64> {
    match cube.wavelengths() {
        Some(w) => w.to_vec(),
        None => (0..cube.bands()).map(|b| b as f64).collect(),
    }
}

fn write_psf_csv(path: &Path, psf: &PsfKernel) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in psf.data().chunks(psf.ratio()) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_psf_csv(path: &Path) -> Result<PsfKernel> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        for f in rec?.iter() {
            data.push(f.parse::<f64>().with_context(|| format!("{}: bad value '{}'", path.display(), f))?);
        }
        rows += 1;
    }
    if data.len() != rows * rows {
        bail!("{}: PSF must be a square table", path.display());
    }
    Ok(PsfKernel::normalized(rows, data)?)
}

/// Endmembers stored as a cube of `L` bands over a `K x 1` grid.
fn endmember_cube(a: &EndmemberMatrix) -> Result<HsiCube> {
    let (k, l) = (a.count(), a.bands());
    let data = (0..l * k).map(|i| a.row(i % k)[i / k]).collect();
    Ok(HsiCube::new(l, k, 1, data)?)
}

/// Low-resolution HSI and high-resolution MSI of a data directory.
pub struct Pair {
    pub x: HsiCube,
    pub y: HsiCube,
    pub reference: Option<HsiCube>,
}

impl Pair {
    pub fn load(data: &Path) -> Result<Self> {
        let x = read_cube(&data.join(X))?;
        let y = read_cube(&data.join(Y))?;
        let z = data.join(Z);
        let reference = if z.exists() { Some(read_cube(&z)?) } else { None };
        Ok(Self { x, y, reference })
    }

    fn ratio(&self) -> usize {
        self.y.height() / self.x.height().max(1)
    }

    fn operators(&self, data: &Path) -> Result<(PsfKernel, SrfMatrix)> {
        let psf = read_psf_csv(&data.join(PSF))?;
        let grid = match (&self.x.wavelengths(), &self.reference) {
            (None, Some(z)) => band_wavelengths(z),
            _ => band_wavelengths(&self.x),
        };
        let srf = load_srf_csv(data.join(SRF), &grid, 1e-6)
            .with_context(|| format!("reading {}", data.join(SRF).display()))?;
        Ok((psf, srf))
    }
}

#[derive(Serialize)]
struct Summary {
    #[serde(flatten)]
    metrics: Option<Metrics>,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
}

#[derive(Clone, Copy, Serialize)]
struct Metrics {
    psnr: f64,
    sam: f64,
    ergas: f64,
    ssim: f64,
    uiqi: f64,
}

impl From<&MetricReport> for Metrics {
    fn from(m: &MetricReport) -> Self {
        Self {
            psnr: m.psnr,
            sam: m.sam,
            ergas: m.ergas,
            ssim: m.ssim,
            uiqi: m.uiqi,
        }
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scene = Scene::generate(&cfg.scene)?;
    create_dir(out)?;
    write_cube(&out.join(Z), &scene.latent)?;
    let wl = band_wavelengths(&scene.latent);
    write_cube(&out.join(X), &scene.lr_hsi.clone().with_wavelengths(wl.clone())?)?;
    write_cube(&out.join(Y), &scene.hr_msi)?;
    write_cube(&out.join(ABUNDANCES), &scene.abundances.to_cube()?)?;
    write_cube(&out.join(ENDMEMBERS), &endmember_cube(&scene.endmembers)?)?;
    save_srf_csv(out.join(SRF), &scene.srf, &wl)?;
    write_psf_csv(&out.join(PSF), &scene.psf)?;
    let consistency = lrmsi_consistency(&scene.lr_hsi, &scene.hr_msi, &scene.srf, &scene.psf)?;
    let manifest = json!({
        "latent": Z,
        "lr_hsi": X,
        "hr_msi": Y,
        "abundances": ABUNDANCES,
        "endmembers": ENDMEMBERS,
        "srf": SRF,
        "psf": PSF,
        "config": "config.toml",
        "lrmsi_consistency": consistency,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    cfg.echo(out)?;
    info!("scene written to {} (LrMSI consistency {:.3e})", out.display(), consistency);
    emit(&manifest)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let pair = Pair::load(data)?;
    let net_cfg = cfg.network.apply(network_config_for(&pair.x, &pair.y, cfg.network.endmembers)?);
    create_dir(out)?;
    cfg.echo(out)?;
    let trainer = Trainer::new(&pair.x, &pair.y, net_cfg.clone(), cfg.train.clone())?;
    let net = trainer.network().clone();
    let every = (cfg.train.max_epochs / 20).max(1);
    let outcome = trainer.run(|_, row| {
        if row.epoch % every == 0 {
            info!(
                "epoch {:>5} loss {:.5e} validation {:.5e} lr {:.2e}",
                row.epoch, row.train.total, row.validation.total, row.lr
            );
        }
        Ok(())
    })?;
    info!(
        "{} epochs in {:.1}s, best epoch {}",
        outcome.epochs_run, outcome.seconds, outcome.best_epoch
    );

    let ckpt = Checkpoint {
        config: net_cfg,
        flags: net.flags(),
        weights: outcome.weights.clone(),
        training: None,
    };
    save_checkpoint(out.join("weights.ckpt"), &ckpt)?;
    write_cube(&out.join("z_hat.cube"), &outcome.fused)?;
    write_log_csv(fs::File::create(out.join("log.csv"))?, &outcome.log)?;
    if let Some(srf) = net.srf_estimate(&outcome.weights)? {
        save_srf_csv(out.join("srf_learned.csv"), &srf, &band_wavelengths(&pair.x))?;
    }
    if let Some(psf) = net.psf_estimate(&outcome.weights)? {
        write_psf_csv(&out.join("psf_learned.csv"), &psf)?;
    }
    let metrics = match &pair.reference {
        Some(z) => Some(Metrics::from(&evaluate(z, &outcome.fused, pair.ratio() as f64)?)),
        None => None,
    };
    let summary = Summary {
        metrics,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut line = serde_json::to_value(&summary)?;
    line["seconds"] = json!(outcome.seconds);
    emit(&line)
}

pub fn fuse(weights: &Path, x: &Path, y: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(weights).with_context(|| format!("reading {}", weights.display()))?;
    let net = FusionNet::new(ckpt.config, ckpt.flags)?;
    let z = net.fuse(&ckpt.weights, &read_cube(x)?, &read_cube(y)?)?;
    write_cube(out, &z)?;
    emit(&json!({ "fused": out, "bands": z.bands(), "height": z.height(), "width": z.width() }))
}

/// 8-bit binary graymap of `values` (row-major) on a fixed `[0, RESIDUAL_SCALE]` scale.
pub fn write_residual_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|v| ((v / RESIDUAL_SCALE).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn evaluate_cmd(reference: &Path, estimate: &Path, ratio: f64, out: Option<&Path>) -> Result<()> {
    let r = read_cube(reference)?;
    let e = read_cube(estimate)?;
    let report = evaluate(&r, &e, ratio)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
        let mut w = csv::Writer::from_path(dir.join("bands.csv"))?;
        w.write_record(["band", "rmse", "psnr", "ssim", "uiqi"])?;
        if let Some(pb) = &report.per_band {
            for b in 0..r.bands() {
                w.write_record(&[
                    b.to_string(),
                    pb.rmse[b].to_string(),
                    pb.psnr[b].to_string(),
                    pb.ssim[b].to_string(),
                    pb.uiqi[b].to_string(),
                ])?;
            }
        }
        w.flush()?;
        let (h, wd) = (r.height(), r.width());
        let mut total = vec![0.0; h * wd];
        for b in 0..r.bands() {
            let err: Vec<f64> = r.band(b).iter().zip(e.band(b)).map(|(p, q)| (p - q).abs()).collect();
            for (t, v) in total.iter_mut().zip(&err) {
                *t += v * v;
            }
            write_residual_pgm(&dir.join(format!("residual_band{:03}.pgm", b)), wd, h, &err)?;
        }
        let rmse: Vec<f64> = total.iter().map(|t| (t / r.bands() as f64).sqrt()).collect();
        write_residual_pgm(&dir.join("residual_rmse.pgm"), wd, h, &rmse)?;
    }
    emit(&Metrics::from(&report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineMethod {
    Cnmf,
    Bicubic,
}

pub fn baseline(cfg: &RunConfig, data: &Path, out: &Path, method: BaselineMethod) -> Result<()> {
    let pair = Pair::load(data)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let fused = match method {
        BaselineMethod::Bicubic => bicubic_upsample(&pair.x, pair.ratio())?,
        BaselineMethod::Cnmf => {
            let (psf, srf) = pair.operators(data)?;
            let res = cnmf_fuse(&pair.x, &pair.y, &psf, &srf, &cfg.cnmf)?;
            let mut w = csv::Writer::from_path(out.join("objective.csv"))?;
            w.write_record(["iteration", "objective"])?;
            for (i, v) in res.objective.iter().enumerate() {
                w.write_record(&[i.to_string(), v.to_string()])?;
            }
            w.flush()?;
            if !res.converged {
                info!("CNMF stopped at the outer iteration limit");
            }
            res.fused
        }
    };
    let name = match method {
        BaselineMethod::Cnmf => "z_cnmf.cube",
        BaselineMethod::Bicubic => "z_bicubic.cube",
    };
    write_cube(&out.join(name), &fused)?;
    let metrics = match &pair.reference {
        Some(z) => Some(Metrics::from(&evaluate(z, &fused, pair.ratio() as f64)?)),
        None => None,
    };
    write_json(&out.join("summary.json"), &metrics)?;
    emit(&metrics)
}

pub fn threads() -> usize {
    std::env::var("HSFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let pair = Pair::load(data)?;
    let Some(reference) = &pair.reference else {
        bail!("ablation needs the reference cube {}", data.join(Z).display());
    };
    let ops = pair.operators(data).ok();
    let net_cfg = cfg.network.apply(network_config_for(&pair.x, &pair.y, cfg.network.endmembers)?);
    create_dir(out)?;
    cfg.echo(out)?;
    let inputs = AblationInputs {
        lr_hsi: &pair.x,
        hr_msi: &pair.y,
        reference,
        operators: ops.as_ref().map(|(p, s)| (p, s)),
    };
    let table = run_ablation(inputs, &net_cfg, &cfg.train, &cfg.ablation.seeds, &cfg.cnmf, threads())?;
    let path: PathBuf = out.join("ablation.csv");
    write_ablation_csv(fs::File::create(&path)?, &table)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&fs::read(&path)?)?;
    Ok(())
}
