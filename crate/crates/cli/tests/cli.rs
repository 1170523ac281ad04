use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn loraki(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loraki")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, methods: &str, extra: &str) -> String {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"seed = 1
output = "{out}"
methods = [{methods}]
{extra}
[phantom]
n1 = 16
n2 = 20
coils = 2

[mask]
style = "uniform"
accel = 2
acs_lines = 10

[loraki]
hidden = 4
iterations = 2
pairs = 2
training = {{ steps = 2 }}
"#,
        out = dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn phantom_mask_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let out = loraki(&["phantom", "--n1", "16", "--n2", "24", "--coils", "2", "-o", &p("g.ksp"), "--pgm", &p("g.pgm")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(p("g.ksp")).unwrap().len(), 16 + 16 * 24 * 2 * 16);
    assert!(fs::read(p("g.pgm")).unwrap().starts_with(b"P5\n24 16\n65535\n"));

    let out = loraki(&["mask", "--n1", "16", "--n2", "24", "--accel", "3", "--acs-lines", "6", "-o", &p("m.msk")]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("effective acceleration"));
    let out = loraki(&["mask", "--n1", "16", "--n2", "24", "--style", "random", "--accel", "2.5", "--acs-size", "6x6", "-o", &p("r.msk")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = loraki(&["metrics", "--recon", &p("g.ksp"), "--gold", &p("g.ksp"), "--esp", &p("esp.csv")]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("nrmse 0.000000") && text.contains("ssim 1.000000"), "{text}");
    assert!(fs::read_to_string(p("esp.csv")).unwrap().starts_with("bin_center,ratio"));
}

#[test]
fn recon_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""zero-fill", "grappa", "loraki""#, "");
    let out = loraki(&["recon", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "manifest.toml", "loraki.ksp", "loraki_error.pgm", "esp_grappa.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let out = loraki(&["report", &run.to_string_lossy()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("grappa"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // method failure: GRAPPA kernel wider than the ACS block
    let cfg = write_config(dir.path(), r#""grappa", "zero-fill""#, "\n[grappa]\nkernel = [15, 15]\n");
    assert_eq!(code(&loraki(&["recon", &cfg])), 1);
    // configuration errors
    let cfg = write_config(dir.path(), "", "");
    assert_eq!(code(&loraki(&["recon", &cfg])), 2);
    assert_eq!(code(&loraki(&["recon", "/nonexistent/exp.toml"])), 2);
    let cfg = write_config(dir.path(), r#""zero-fill""#, "");
    assert_eq!(code(&loraki(&["sweep", &cfg, "--axis", "Q", "--values", "1"])), 2);
    assert_eq!(code(&loraki(&["metrics", "--recon", &cfg, "--gold", &cfg])), 2);
    assert_eq!(code(&loraki(&["bogus"])), 2);
}

#[test]
fn sweep_writes_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""zero-fill", "loraki""#, "");
    let out = loraki(&["sweep", &cfg, "--axis", "K", "--values", "1,2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("run/sweep_K.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

fn shipped_configs() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn shipped_configs_are_valid() {
    let paths = shipped_configs();
    assert!(paths.len() >= 3);
    for p in paths {
        let cfg = loraki::experiment::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let problem = loraki::experiment::prepare(&cfg).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(problem.mask.count() > 0);
    }
}

#[test]
fn quick_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let out = dir.path().join("quick");
    let text = fs::read_to_string(src).unwrap().replace("runs/quick", &out.to_string_lossy());
    let path = dir.path().join("quick.toml");
    fs::write(&path, text).unwrap();
    let run = loraki(&["recon", path.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("metrics.csv").exists());
    assert!(String::from_utf8_lossy(&run.stdout).contains("loraki"));
}
