use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[scene]
hs_bands = 8
height = 16
width = 16
ratio = 4

[network]
hidden_widths = [6, 5]

[train]
max_epochs = 30
patience = 20
decay_start = 10
decay_end = 30
decay_step = 5
"#;

fn hsfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hsfuse(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{}", n);
    }
}

#[test]
fn simulate_writes_a_reproducible_experiment_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let manifest = json(&ok(&["simulate", "--out", s(&a), "--seed", "3"]));
    ok(&["simulate", "--out", s(&b), "--seed", "3"]);
    let files = [
        "z.cube",
        "x.cube",
        "y.cube",
        "abundances.cube",
        "endmembers.cube",
        "srf.csv",
        "psf.csv",
        "manifest.json",
        "config.toml",
    ];
    same_files(&a, &b, &files);
    let cubes = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "cube"))
        .count();
    assert_eq!(cubes, 5);
    assert!(manifest["lrmsi_consistency"].as_f64().unwrap() <= 1e-6);
    let echoed = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echoed.starts_with("seed = 3\n"));

    let c = dir.path().join("c");
    ok(&["simulate", "--out", s(&c), "--seed", "4"]);
    assert_ne!(fs::read(a.join("z.cube")).unwrap(), fs::read(c.join("z.cube")).unwrap());
}

#[test]
fn bad_inputs_fail_with_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[train]\nmax_epoch = 10\n").unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--out".into(), s(&dir.path().join("r")).into(), "--ratio".into(), "7".into()],
        vec!["simulate".into(), "--config".into(), s(&cfg).into(), "--out".into(), s(&dir.path().join("t")).into()],
        vec!["train".into(), "--data".into(), s(&dir.path().join("missing")).into(), "--out".into(), s(dir.path()).into()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = hsfuse(&args);
        assert!(!out.status.success());
        assert!(out.stdout.is_empty());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{}", err);
        assert!(err.starts_with("error: "), "{}", err);
    }
}

#[test]
fn evaluate_identical_cubes_gives_ideal_values_and_residual_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = tiny_data(dir.path());
    let z = data.join("z.cube");
    let out = dir.path().join("eval");
    let m = json(&ok(&["evaluate", "--reference", s(&z), "--estimate", s(&z), "--ratio", "4", "--out", s(&out)]));
    assert_eq!(m["psnr"], 100.0);
    assert_eq!(m["sam"], 0.0);
    assert_eq!(m["ergas"], 0.0);
    assert_eq!(m["ssim"], 1.0);
    assert_eq!(m["uiqi"], 1.0);
    let pgm = fs::read(out.join("residual_band000.pgm")).unwrap();
    let header = b"P5\n16 16\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert!(pgm[header.len()..].iter().all(|&v| v == 0));
    assert_eq!(pgm.len(), header.len() + 256);
    assert!(out.join("residual_band007.pgm").exists());
    assert!(out.join("residual_rmse.pgm").exists());
    assert_eq!(fs::read_to_string(out.join("bands.csv")).unwrap().lines().count(), 9);
}

#[test]
fn train_is_deterministic_and_fuse_reproduces_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = json(&ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]));
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&b)]);
    for key in ["psnr", "sam", "ergas", "ssim", "uiqi", "epochs_run", "seconds"] {
        assert!(summary.get(key).is_some(), "{}", key);
    }
    assert_eq!(summary["epochs_run"], 30);
    same_files(
        &a,
        &b,
        &["weights.ckpt", "z_hat.cube", "log.csv", "summary.json", "config.toml", "srf_learned.csv", "psf_learned.csv"],
    );
    assert_eq!(fs::read_to_string(a.join("log.csv")).unwrap().lines().count(), 31);

    let fused = dir.path().join("fused.cube");
    ok(&[
        "fuse",
        "--weights",
        s(&a.join("weights.ckpt")),
        "--x",
        s(&data.join("x.cube")),
        "--y",
        s(&data.join("y.cube")),
        "--out",
        s(&fused),
    ]);
    assert_eq!(fs::read(&fused).unwrap(), fs::read(a.join("z_hat.cube")).unwrap());
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_data(dir.path());
    let out = dir.path().join("t");
    let summary = json(&ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--epochs", "12", "--gamma", "0.5",
    ]));
    assert_eq!(summary["epochs_run"], 12);
    let echoed: toml::Value = toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["max_epochs"].as_integer(), Some(12));
    assert_eq!(echoed["train"]["loss"]["gamma"].as_float(), Some(0.5));
    assert_eq!(echoed["scene"]["height"].as_integer(), Some(16));
}

#[test]
fn baselines_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let m = json(&ok(&["baseline", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]));
    ok(&["baseline", "--config", s(&cfg), "--data", s(&data), "--out", s(&b)]);
    same_files(&a, &b, &["z_cnmf.cube", "objective.csv", "summary.json"]);
    assert!(m["psnr"].as_f64().unwrap() > 25.0);
    let bi = json(&ok(&[
        "baseline", "--config", s(&cfg), "--data", s(&data), "--out", s(&a), "--method", "bicubic",
    ]));
    assert!(bi["psnr"].as_f64().unwrap().is_finite());
    assert!(a.join("z_bicubic.cube").exists());
}

#[test]
fn ablate_emits_cnmf_and_five_arms() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_data(dir.path());
    let out = dir.path().join("abl");
    let text = Command::new(env!("CARGO_BIN_EXE_hsfuse"))
        .args(["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--epochs", "8"])
        .env("RUST_LOG", "warn")
        .env("HSFUSE_THREADS", "2")
        .output()
        .unwrap();
    assert!(text.status.success(), "{}", String::from_utf8_lossy(&text.stderr));
    let stdout = String::from_utf8(text.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("method,clamp,ssc,ca,psnr"));
    assert!(lines[1].starts_with("cnmf,"));
    assert_eq!(stdout.as_bytes(), &fs::read(out.join("ablation.csv")).unwrap()[..]);
}
