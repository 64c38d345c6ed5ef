//! Trains on the standard synthetic scene and prints quality and timing.
//!
//! Usage: `desk_run [key=value ...]` with keys `epochs`, `seed`, `widths`
//! (hidden widths, e.g. `64,32`), `lr`, `clamp`, `ssc`, `ca`, `alpha`,
//! `beta`, `gamma`, `patience`.

use std::time::Instant;

use hsfuse::metrics::evaluate;
use hsfuse::network::FusionNet;
use hsfuse::sim::{Scene, SceneSpec};
use hsfuse::trainer::{network_config_for, TrainConfig, Trainer};

fn main() -> hsfuse::Result<()> {
    let spec = SceneSpec::default();
    let scene = Scene::generate(&spec)?;
    let mut net = network_config_for(&scene.lr_hsi, &scene.hr_msi, spec.endmembers)?;
    let mut cfg = TrainConfig {
        max_epochs: 2000,
        ..TrainConfig::default()
    };
    let mut patience = None;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        let flag = || v == "1" || v == "true";
        match k {
            "epochs" => cfg.max_epochs = v.parse().expect("epochs"),
            "seed" => cfg.seed = v.parse().expect("seed"),
            "widths" => {
                net.widths = v.split(',').map(|s| s.parse().expect("width")).collect();
                net.widths.push(spec.endmembers);
            }
            "lr" => cfg.lr = v.parse().expect("lr"),
            "clamp" => cfg.modules.use_clamp = flag(),
            "ssc" => cfg.modules.use_ssc = flag(),
            "ca" => cfg.modules.use_ca = flag(),
            "alpha" => cfg.loss.alpha = v.parse().expect("alpha"),
            "beta" => cfg.loss.beta = v.parse().expect("beta"),
            "gamma" => cfg.loss.gamma = v.parse().expect("gamma"),
            "patience" => patience = Some(v.parse().expect("patience")),
            _ => panic!("unknown key {}", k),
        }
    }
    cfg.patience = patience.unwrap_or(cfg.max_epochs.saturating_sub(1).min(500));
    let net_cfg = net.clone();
    let modules = cfg.modules;
    let every = (cfg.max_epochs / 8).max(1);
    let start = Instant::now();
    let outcome = Trainer::new(&scene.lr_hsi, &scene.hr_msi, net, cfg)?.run(|t, row| {
        if row.epoch % every == 0 {
            let (a, b) = t.network().abundances(t.weights(), &scene.lr_hsi, &scene.hr_msi)?;
            let sat = |m: &hsfuse::mixing::AbundanceMap| {
                let d = m.data();
                let z = d.iter().filter(|&&v| v <= 0.0 || v >= 1.0).count();
                z as f64 / d.len() as f64
            };
            print!("[sat hs {:.2} ms {:.2}] ", sat(&a), sat(&b));
            println!(
                "epoch {:5} total {:.5e} R {:.4e} ASC {:.3e} C {:.4e} val {:.4e} ({:.1}s)",
                row.epoch,
                row.train.total,
                row.train.reconstruction,
                row.train.asc,
                row.train.consistency,
                row.validation.total,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let m = evaluate(&scene.latent, &outcome.fused, spec.ratio as f64)?;
    println!(
        "epochs {} best {} psnr {:.2} sam {:.2} ergas {:.3} ssim {:.4} uiqi {:.4} in {:.1}s",
        outcome.epochs_run, outcome.best_epoch, m.psnr, m.sam, m.ergas, m.ssim, m.uiqi, outcome.seconds
    );
    let net = FusionNet::new(net_cfg, modules)?;
    let (a_hs, a_ms) = net.abundances(&outcome.weights, &scene.lr_hsi, &scene.hr_msi)?;
    for (name, a) in [("hs", &a_hs), ("ms", &a_ms)] {
        let d = a.data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        let ones = d.iter().filter(|&&v| v == 1.0).count() as f64 / d.len() as f64;
        let sums: Vec<f64> = (0..a.pixels()).map(|p| a.row(p).iter().sum()).collect();
        let mean_sum = sums.iter().sum::<f64>() / sums.len() as f64;
        println!("{} abundances: zero {:.3} one {:.3} mean row sum {:.3}", name, zeros, ones, mean_sum);
    }
    if let (Some(srf), Some(psf)) = (net.srf_estimate(&outcome.weights)?, net.psf_estimate(&outcome.weights)?) {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let srf_cos: Vec<String> = (0..srf.channels())
            .map(|j| format!("{:.3}", cos(&srf.column(j), &scene.srf.column(j))))
            .collect();
        println!(
            "srf cosine [{}] psf cosine {:.3}",
            srf_cos.join(", "),
            cos(psf.data(), scene.psf.data())
        );
    }
    Ok(())
}
