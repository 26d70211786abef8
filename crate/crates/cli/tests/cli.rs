use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CUSTOM_MODEL: &str = r#"
[model]
preset = "custom"
seed = 3
n_b = 2000

[model.spec]
d_x = 10
d_l = 3
d_r = 10
misalignment = 0.2
snr_task = 1.0
latent_noise = 0.5
sigma_r2 = 0.4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_brainvalue"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("--output-dir").arg(out).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn savings_config() -> String {
    format!("experiment = \"savings_sweep\"\n{CUSTOM_MODEL}\n[axes]\nn_t = [11, 40, 200]\nm = [0.1, 0.4]\n")
}

fn validate_config() -> String {
    format!(
        "experiment = \"validate_empirical\"\n{CUSTOM_MODEL}\n[axes]\nn_t = [40, 100]\ntests = [\"isotropic\", \"off\"]\n\n[mc]\ntrials = 200\nreplicates = 4\nseed = 5\n"
    )
}

#[test]
fn describe_reports_points_and_regime_warnings() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "s.toml", &savings_config());
    let o = bin().arg("describe").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("experiment: savings_sweep"), "{text}");
    assert!(text.contains("d_x=10, d_l=3, d_r=10"), "{text}");
    assert!(text.contains("axes.n_t = 11 <= d_x + 1 = 11: out of regime"), "{text}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn describe_flags_empty_sweeps() {
    let dir = TempDir::new().unwrap();
    let body = format!("experiment = \"validate_empirical\"\n{CUSTOM_MODEL}\n[axes]\nn_t = []\n");
    let cfg = write_config(dir.path(), "e.toml", &body);
    let o = bin().arg("describe").arg(&cfg).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("axes.n_t is empty: zero points"), "{text}");

    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no points"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn savings_run_writes_csvs_errors_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "s.toml", &savings_config());
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut rdr = csv::Reader::from_path(out.join("savings_misalignment.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "axis");
    assert!(headers.iter().any(|h| h == "percent_saved_finite"));
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let asymptotic: f64 = r[7].parse().unwrap();
        assert!(asymptotic > 0.0 && asymptotic < 100.0, "{r:?}");
        // n_T = 11 has no finite task-only risk at d_x = 10.
        if &r[3] == "11.0" {
            assert_eq!(&r[9], "", "{r:?}");
        } else {
            let saved: f64 = r[9].parse().unwrap();
            assert!(saved > 0.0 && saved < 100.0, "{r:?}");
        }
    }

    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert!(errors.starts_with("file,point,source,message"), "{errors}");
    assert!(errors.lines().skip(1).all(|l| l.contains("n_T=11")), "{errors}");
    assert_eq!(errors.lines().count(), 3);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "savings_sweep");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(manifest["model_seed"], 3);
    assert_eq!(manifest["points"], 6);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(files.contains(&"savings_misalignment.csv") && files.contains(&"errors.csv"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "v.toml", &validate_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--threads", "1"]).status.success());
    for name in ["validate_empirical.csv", "errors.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let rows = csv::Reader::from_path(a.join("validate_empirical.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
}

#[test]
fn seed_override_changes_draws_and_is_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "v.toml", &validate_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--seed-override", "99"]).status.success());
    let csv_a = fs::read(a.join("validate_empirical.csv")).unwrap();
    let csv_b = fs::read(b.join("validate_empirical.csv")).unwrap();
    assert_ne!(csv_a, csv_b);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((manifest["model_seed"].as_u64(), manifest["mc_seed"].as_u64()), (Some(99), Some(99)));
}

#[test]
fn malformed_config_fails_without_writing() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "experiment = \"savings_sweep\"\n[model\npreset = \"fmri\"\n");
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_named() {
    let dir = TempDir::new().unwrap();
    let body = savings_config().replace("m = [0.1, 0.4]", "m = [0.1, 0.4]\nn_task = [5]");
    let cfg = write_config(dir.path(), "typo.toml", &body);
    let o = bin().arg("describe").arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_task"), "{}", stderr(&o));

    let body = format!("experiment = \"savings_sweep\"\n{CUSTOM_MODEL}\n[axes]\nn_t = [40]\nsnr_ratio = [0.1]\n");
    let cfg = write_config(dir.path(), "preset.toml", &body);
    let o = bin().arg("describe").arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("axes.snr_ratio"), "{}", stderr(&o));
}

#[test]
fn budget_sweep_on_custom_model() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "experiment = \"budget_sweep\"\n{CUSTOM_MODEL}\n[axes]\ncost_ratio = [0.05, 100]\nbudget = [5, 2000]\n\n[budget]\nc_t = 1.0\n"
    );
    let cfg = write_config(dir.path(), "b.toml", &body);
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("budget.csv")).unwrap();
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    // B = 5 cannot buy d_x + 2 task labels.
    assert_eq!(rows.len(), 4);
    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 5, "{errors}");
    for r in rows.iter().filter(|r| &r[1] == "100.0") {
        assert_eq!(&r[4], "0", "{r:?}");
    }
}
