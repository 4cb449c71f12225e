use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anyhow::{ensure, Context, Result};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_langevin-lab"));
    c.env_remove("LANGEVIN_LAB_OUT_DIR").env_remove("SOURCE_DATE_EPOCH");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(config: &Path, out: &Path, cmd: &str, extra: &[&str]) -> Result<Output> {
    Ok(bin().arg("--config").arg(config).arg("--out-dir").arg(out).args(extra).arg(cmd).output()?)
}

fn json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, text)?;
    Ok(p)
}

const SMALL_SAMPLE: &str = r#"
seed = 5
[dynamics]
variant = "underdamped"
potential = "gaussian"
dim = 1
gamma = 4.0
[integrator]
eta = 0.01
n_steps = 5000
burn_in = 100
n_chains = 2
"#;

const SMALL_BLR: &str = r#"
seed = 1
[data]
source = "synthetic"
n = 200
d = 3
[experiment]
variants = ["overdamped", "hfhr"]
n_steps = 400
eval_every = 100
"#;

#[test]
fn missing_eta_names_the_field() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = write(dir.path(), "c.toml", "[dynamics]\nvariant = \"overdamped\"\npotential = \"gaussian\"\n[integrator]\nn_steps = 10\n")?;
    let o = run(&cfg, &dir.path().join("out"), "sample", &[])?;
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrator.eta"));
    Ok(())
}

#[test]
fn usage_errors_exit_two() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let o = bin().arg("sample").output()?;
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("frobnicate").output()?;
    assert_eq!(o.status.code(), Some(2));
    let cfg = write(dir.path(), "c.toml", SMALL_SAMPLE)?;
    assert_eq!(run(&cfg, &dir.path().join("o"), "sample", &["--threads", "0"])?.status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", "seed = [")?;
    assert_eq!(run(&bad, &dir.path().join("o"), "sample", &[])?.status.code(), Some(2));
    let dim = write(dir.path(), "dim.toml", &SMALL_SAMPLE.replace("dim = 1", "dim = 7"))?;
    assert_eq!(run(&dim, &dir.path().join("o"), "sample", &[])?.status.code(), Some(2));
    assert_eq!(bin().arg("--help").output()?.status.code(), Some(0));
    Ok(())
}

#[test]
fn missing_inputs_exit_four() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let o = run(&dir.path().join("nope.toml"), &dir.path().join("o"), "sample", &[])?;
    assert_eq!(o.status.code(), Some(4));
    let cfg = write(dir.path(), "w.toml", "[data]\nsource = \"wdbc\"\npath = \"missing.data\"\n[experiment]\nn_steps = 100\neval_every = 50\n")?;
    let o = run(&cfg, &dir.path().join("o"), "blr", &[])?;
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.data"));
    Ok(())
}

#[test]
fn divergence_exits_three() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = write(dir.path(), "c.toml", &SMALL_SAMPLE.replace("eta = 0.01", "eta = 3.0"))?;
    let out = dir.path().join("o");
    let o = run(&cfg, &out, "sample", &[])?;
    assert_eq!(o.status.code(), Some(3));
    let m = json(&out.join("manifest.json"))?;
    assert!(!m["deviations"].as_array().context("expected an array")?.is_empty());
    Ok(())
}

#[test]
fn seed_override_is_recorded() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = write(dir.path(), "c.toml", SMALL_SAMPLE)?;
    let out = dir.path().join("o");
    assert!(run(&cfg, &out, "sample", &["--seed", "99"])?.status.success());
    let m = json(&out.join("manifest.json"))?;
    assert_eq!(m["seed"], 99);
    assert_eq!(m["command"], "sample");
    assert!(m["deviations"].as_array().context("expected an array")?.iter().any(|d| d.as_str().is_some_and(|t| t.contains("seed"))));
    for f in m["outputs"].as_array().context("expected an array")? {
        assert!(out.join(f.as_str().context("expected a string")?).exists(), "{f}");
    }
    Ok(())
}

#[test]
fn out_dir_from_environment() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = write(dir.path(), "c.toml", SMALL_SAMPLE)?;
    let out = dir.path().join("env_out");
    let o = bin().env("LANGEVIN_LAB_OUT_DIR", &out).arg("--config").arg(&cfg).arg("sample").output()?;
    assert!(o.status.success());
    assert!(out.join("summary.json").exists());
    Ok(())
}

#[test]
fn digest_tracks_config_content() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let a = write(dir.path(), "a.toml", SMALL_SAMPLE)?;
    let b = write(dir.path(), "b.toml", &SMALL_SAMPLE.replace("n_steps = 5000", "n_steps = 5001"))?;
    assert!(run(&a, &dir.path().join("a"), "sample", &[])?.status.success());
    assert!(run(&b, &dir.path().join("b"), "sample", &[])?.status.success());
    let da = json(&dir.path().join("a/manifest.json"))?["config_digest"].clone();
    let db = json(&dir.path().join("b/manifest.json"))?["config_digest"].clone();
    assert_eq!(da.as_str().context("expected a string")?.len(), 64);
    assert_ne!(da, db);
    Ok(())
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        v.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?));
    }
    v.sort();
    Ok(v)
}

#[test]
fn reproducible_reruns_are_byte_identical() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let sample = write(dir.path(), "s.toml", SMALL_SAMPLE)?;
    let blr = write(dir.path(), "b.toml", SMALL_BLR)?;
    let cases = [
        (sample, "sample"),
        (blr, "blr"),
        (configs().join("rates_hfhr.toml"), "rates"),
        (configs().join("lyapunov_hfhr.toml"), "lyapunov"),
        (configs().join("stationarity.toml"), "check-stationarity"),
    ];
    for (cfg, cmd) in cases {
        let a = dir.path().join(format!("{cmd}_a"));
        let b = dir.path().join(format!("{cmd}_b"));
        assert!(run(&cfg, &a, cmd, &["--reproducible"])?.status.success(), "{cmd}");
        assert!(run(&cfg, &b, cmd, &["--reproducible"])?.status.success(), "{cmd}");
        let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
        ensure!(sa.len() >= 2, "{cmd} wrote too few files");
        assert_eq!(sa, sb, "{cmd}");
    }
    Ok(())
}

#[test]
fn bundled_configs_report_expected_status() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let c = configs();

    let out = dir.path().join("st");
    assert!(run(&c.join("stationarity.toml"), &out, "check-stationarity", &[])?.status.success());
    let s = json(&out.join("stationarity.json"))?;
    assert_eq!(s["all_pass"], true);
    assert_eq!(s["negative_control"]["detected"], true);

    let out = dir.path().join("ly");
    assert!(run(&c.join("lyapunov_hfhr.toml"), &out, "lyapunov", &[])?.status.success());
    assert_eq!(json(&out.join("bound_report.json"))?["pass"], true);

    for (name, status) in [
        ("rates_hfhr.toml", "pass"),
        ("rates_mirror_arctan.toml", "pass"),
        ("rates_underdamped_low_friction.toml", "hypothesis not met"),
    ] {
        let out = dir.path().join(name);
        assert!(run(&c.join(name), &out, "rates", &[])?.status.success(), "{name}");
        assert_eq!(json(&out.join("comparison.json"))?["status"], status, "{name}");
        assert!(out.join("comparison.csv").exists());
    }

    let out = dir.path().join("od");
    assert!(run(&c.join("sample_overdamped.toml"), &out, "sample", &[])?.status.success());
    let s = json(&out.join("summary.json"))?;
    assert!(s["theta_mean"][0].as_f64().context("expected a number")?.abs() <= 0.05);
    assert!((s["theta_covariance"][0][0].as_f64().context("expected a number")? - 1.0).abs() <= 0.1);
    Ok(())
}

#[test]
fn blr_writes_per_variant_files() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = write(dir.path(), "b.toml", SMALL_BLR)?;
    let out = dir.path().join("o");
    assert!(run(&cfg, &out, "blr", &[])?.status.success());
    for v in ["overdamped", "hfhr"] {
        let text = std::fs::read_to_string(out.join(format!("accuracy_{v}.csv")))?;
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,accuracy,wall_ms"));
        assert_eq!(lines.count(), 4);
    }
    let meta = json(&out.join("blr_metadata.json"))?;
    assert!(meta.is_object());
    Ok(())
}
