//! Acceptance suite: runs every criterion and prints one PASS/FAIL line each.
//! Exits nonzero if any criterion fails.
//!
//! The desk criteria (4-6) train every ablation arm on three seeds.
//! `HSFUSE_DESK_EPOCHS` sets the epoch budget (default 1500, at most 10000);
//! `HSFUSE_THREADS` caps parallel training runs.

#[path = "support/exact_model.rs"]
mod exact;
#[path = "support/gradient_cases.rs"]
mod gradients;
#[path = "support/metric_oracles.rs"]
mod oracles;

use std::time::Instant;

use hsfuse::baseline::bicubic_upsample;
use hsfuse::cnmf::{cnmf_fuse, CnmfConfig};
use hsfuse::metrics::{ergas, evaluate, psnr, sam, ssim, uiqi, PSNR_CAP_DB};
use hsfuse::network::{save_checkpoint, Checkpoint, FusionNet};
use hsfuse::sim::{save_cube, Scene, SceneSpec};
use hsfuse::trainer::{
    median, network_config_for, run_ablation, train, write_ablation_csv, write_log_csv, AblationInputs, AblationTable,
    TrainConfig,
};

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn env_usize(key: &str) -> Option<usize> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn gradient_correctness() -> Verdict {
    let mut worst = ("", 0.0f64);
    for (name, case) in gradients::op_cases() {
        let err = case();
        if err > worst.1 {
            worst = (name, err);
        }
    }
    for flags in gradients::all_arms() {
        let err = gradients::full_loss(flags);
        if err > worst.1 {
            worst = ("full loss", err);
        }
    }
    verdict(
        worst.1 < gradients::TOL,
        format!("worst relative error {:.2e} ({}) over {} seeds", worst.1, worst.0, gradients::SEEDS),
    )
}

fn exact_model_identities(scene: &Scene) -> Verdict {
    let g = exact::exact_gaps(scene);
    let worst = g.worst_consistency();
    verdict(
        worst <= 1e-6 && g.fused_vs_latent <= 1e-6,
        format!(
            "LrMSI gap {:.1e}, worst consistency term {:.1e}, reconstruction {:.1e}, Z-hat vs Z {:.1e}",
            g.lrmsi, worst, g.loss.reconstruction, g.fused_vs_latent
        ),
    )
}

fn cnmf_quality(scene: &Scene) -> Verdict {
    let out = cnmf_fuse(&scene.lr_hsi, &scene.hr_msi, &scene.psf, &scene.srf, &CnmfConfig::default()).unwrap();
    let m = evaluate(&scene.latent, &out.fused, scene.psf.ratio() as f64).unwrap();
    verdict(
        m.psnr >= 35.0 && m.sam <= 2.0,
        format!("PSNR {:.2} dB (>= 35), SAM {:.3} deg (<= 2)", m.psnr, m.sam),
    )
}

fn metric_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    for seed in 0..20 {
        let (r, e) = oracles::random_pair(seed);
        let ratio = [2.0, 4.0, 8.0][seed as usize % 3];
        worst = worst
            .max(rel(psnr(&r, &e).unwrap(), oracles::oracle_psnr(&r, &e)))
            .max(rel(sam(&r, &e).unwrap(), oracles::oracle_sam(&r, &e)))
            .max(rel(ergas(&r, &e, ratio).unwrap(), oracles::oracle_ergas(&r, &e, ratio)))
            .max(rel(ssim(&r, &e).unwrap(), oracles::oracle_ssim(&r, &e)))
            .max(rel(uiqi(&r, &e).unwrap(), oracles::oracle_uiqi(&r, &e)));
    }
    let ideal = (0..20).all(|seed| {
        let (r, _) = oracles::random_pair(seed);
        let m = evaluate(&r, &r, 4.0).unwrap();
        m.psnr == PSNR_CAP_DB && m.sam == 0.0 && m.ergas == 0.0 && m.ssim == 1.0 && m.uiqi == 1.0
    });
    verdict(
        worst <= 1e-10 && ideal,
        format!("worst relative deviation {:.1e} over 20 pairs, ideal values exact: {}", worst, ideal),
    )
}

/// Byte images of every artifact a short run produces.
fn artifacts(spec: &SceneSpec, epochs: usize) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let scene = Scene::generate(spec).unwrap();
    let mut net_cfg = network_config_for(&scene.lr_hsi, &scene.hr_msi, spec.endmembers).unwrap();
    net_cfg.widths = vec![16, 8, spec.endmembers];
    let cfg = TrainConfig {
        max_epochs: epochs,
        patience: epochs - 1,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train(&scene.lr_hsi, &scene.hr_msi, net_cfg.clone(), cfg.clone()).unwrap();
    let net = FusionNet::new(net_cfg.clone(), cfg.modules).unwrap();
    let ckpt = Checkpoint {
        config: net_cfg.clone(),
        flags: net.flags(),
        weights: out.weights.clone(),
        training: None,
    };
    let cnmf = cnmf_fuse(&scene.lr_hsi, &scene.hr_msi, &scene.psf, &scene.srf, &CnmfConfig::default()).unwrap();
    let ablation = run_ablation(
        AblationInputs {
            lr_hsi: &scene.lr_hsi,
            hr_msi: &scene.hr_msi,
            reference: &scene.latent,
            operators: Some((&scene.psf, &scene.srf)),
        },
        &net_cfg,
        &TrainConfig {
            max_epochs: 4,
            patience: 3,
            ..cfg
        },
        &[0, 1],
        &CnmfConfig::default(),
        2,
    )
    .unwrap();

    let mut files = Vec::new();
    for (name, cube) in [("z", &scene.latent), ("x", &scene.lr_hsi), ("y", &scene.hr_msi), ("zhat", &out.fused), ("cnmf", &cnmf.fused)] {
        let p = dir.path().join(name);
        save_cube(&p, cube).unwrap();
        files.push(std::fs::read(&p).unwrap());
    }
    let p = dir.path().join("w.ckpt");
    save_checkpoint(&p, &ckpt).unwrap();
    files.push(std::fs::read(&p).unwrap());
    let mut log = Vec::new();
    write_log_csv(&mut log, &out.log).unwrap();
    files.push(log);
    let mut table = Vec::new();
    write_ablation_csv(&mut table, &ablation).unwrap();
    files.push(table);
    files
}

fn determinism() -> Verdict {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ratio: 4,
        seed: 5,
        ..SceneSpec::default()
    };
    let a = artifacts(&spec, 40);
    let b = artifacts(&spec, 40);
    let same = a.iter().zip(&b).filter(|(p, q)| p == q).count();
    verdict(
        same == a.len(),
        format!("{} of {} artifacts byte-identical (cubes, checkpoint, log, ablation CSV)", same, a.len()),
    )
}

struct Desk {
    table: AblationTable,
    bicubic_psnr: f64,
    bicubic_sam: f64,
    epochs: usize,
    seconds: Vec<f64>,
    net: FusionNet,
}

fn desk_runs(scene: &Scene) -> Desk {
    let epochs = env_usize("HSFUSE_DESK_EPOCHS").unwrap_or(1500).min(10000);
    let threads = env_usize("HSFUSE_THREADS")
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let net_cfg = network_config_for(&scene.lr_hsi, &scene.hr_msi, 4).unwrap();
    let base = TrainConfig {
        max_epochs: epochs,
        patience: 500.min(epochs - 1),
        ..TrainConfig::default()
    };
    let inputs = AblationInputs {
        lr_hsi: &scene.lr_hsi,
        hr_msi: &scene.hr_msi,
        reference: &scene.latent,
        operators: Some((&scene.psf, &scene.srf)),
    };
    let table = run_ablation(inputs, &net_cfg, &base, &DESK_SEEDS, &CnmfConfig::default(), threads).unwrap();
    let ratio = scene.psf.ratio();
    let bicubic = evaluate(&scene.latent, &bicubic_upsample(&scene.lr_hsi, ratio).unwrap(), ratio as f64).unwrap();
    let full = table.row("full").unwrap();
    let seconds = full.runs.iter().map(|r| r.outcome.seconds).collect();
    let net = FusionNet::new(net_cfg, full.flags.unwrap()).unwrap();
    Desk {
        table,
        bicubic_psnr: bicubic.psnr,
        bicubic_sam: bicubic.sam,
        epochs,
        seconds,
        net,
    }
}

fn desk_quality(d: &Desk) -> Verdict {
    let m = d.table.row("full").unwrap().median;
    let pass = m.sam <= 5.0 && m.psnr >= 30.0 && m.psnr > d.bicubic_psnr && m.sam < d.bicubic_sam;
    verdict(
        pass,
        format!(
            "median PSNR {:.2} dB, SAM {:.3} deg vs bicubic {:.2} dB / {:.3} deg; {} epoch budget, {:.0} s per run",
            m.psnr,
            m.sam,
            d.bicubic_psnr,
            d.bicubic_sam,
            d.epochs,
            median(&d.seconds)
        ),
    )
}

fn ablation_ordering(d: &Desk) -> Verdict {
    let p = |name: &str| d.table.row(name).unwrap().median.psnr;
    let (full, ssc, ca, clamp, off) = (p("full"), p("clamp_ssc"), p("clamp_ca"), p("clamp"), p("clamp_off"));
    let checks = [
        ("full > clamp_ssc", full > ssc),
        ("full > clamp_ca", full > ca),
        ("clamp_ssc > clamp", ssc > clamp),
        ("clamp_ca > clamp", ca > clamp),
        ("clamp > clamp_off", clamp > off),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        failed.is_empty(),
        format!(
            "median PSNR full {:.2}, clamp_ssc {:.2}, clamp_ca {:.2}, clamp {:.2}, clamp_off {:.2}{}",
            full,
            ssc,
            ca,
            clamp,
            off,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; violated: {}", failed.join(", "))
            }
        ),
    )
}

fn operator_recovery(d: &Desk, scene: &Scene) -> Verdict {
    let mut worst_srf = f64::INFINITY;
    let mut worst_psf = f64::INFINITY;
    for run in &d.table.row("full").unwrap().runs {
        let srf = d.net.srf_estimate(&run.outcome.weights).unwrap().unwrap();
        for j in 0..srf.channels() {
            worst_srf = worst_srf.min(cosine(&srf.column(j), &scene.srf.column(j)));
        }
        let psf = d.net.psf_estimate(&run.outcome.weights).unwrap().unwrap();
        worst_psf = worst_psf.min(cosine(psf.data(), scene.psf.data()));
    }
    verdict(
        worst_srf >= 0.95 && worst_psf >= 0.95,
        format!(
            "lowest SRF column cosine {:.4}, lowest PSF cosine {:.4} over {} seeds",
            worst_srf,
            worst_psf,
            DESK_SEEDS.len()
        ),
    )
}

fn report(id: usize, name: &str, started: Instant, v: Verdict, failures: &mut Vec<usize>) {
    if !v.pass {
        failures.push(id);
    }
    println!(
        "criterion {} {:<28} {}  {} [{:.1}s]",
        id,
        name,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() {
    let scene = Scene::generate(&SceneSpec::default()).unwrap();
    let mut failures = Vec::new();

    let t = Instant::now();
    report(1, "gradient correctness", t, gradient_correctness(), &mut failures);
    let t = Instant::now();
    report(2, "exact-model identities", t, exact_model_identities(&scene), &mut failures);
    let t = Instant::now();
    report(3, "CNMF oracle quality", t, cnmf_quality(&scene), &mut failures);
    let t = Instant::now();
    report(7, "metric oracles", t, metric_oracles(), &mut failures);
    let t = Instant::now();
    report(8, "determinism", t, determinism(), &mut failures);

    let t = Instant::now();
    let desk = desk_runs(&scene);
    let mut csv = Vec::new();
    write_ablation_csv(&mut csv, &desk.table).unwrap();
    println!("desk ablation table ({} runs, {:.0}s):", 5 * DESK_SEEDS.len(), t.elapsed().as_secs_f64());
    print!("{}", String::from_utf8(csv).unwrap());
    let t = Instant::now();
    report(4, "desk run quality", t, desk_quality(&desk), &mut failures);
    report(5, "ablation ordering", t, ablation_ordering(&desk), &mut failures);
    report(6, "learned operator recovery", t, operator_recovery(&desk, &scene), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        failures.sort();
        println!("acceptance: failed criteria {:?}", failures);
        std::process::exit(1);
    }
}
