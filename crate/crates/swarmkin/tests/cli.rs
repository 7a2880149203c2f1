//! Drives the installed binary the way a user would: config in, files out,
//! exit codes and determinism checked on the real process boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn swarmkin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_swarmkin"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        out.insert(name, fs::read(entry.path()).unwrap());
    }
    out
}

const EQUILIBRIUM_CONFIG: &str = r#"
kind = "equilibrium"
seed = 1

[model]
lambda = 0.2
sigma2 = 0.2
delta = 0.5
x0 = [0.0]

[grid]
lo = [-5.0]
hi = [5.0]
nx = [41]

[equilibrium]
inner_mass = 0.8
"#;

const PARTICLES_CONFIG: &str = r#"
kind = "particles"
seed = 42

[model]
lambda = 0.2
sigma2 = 0.2
delta = 0.5
x0 = [0.0]

[kernel]
kind = "uniform"

[initial]
preset = "f0_test1"

[grid]
lo = [-5.0]
hi = [5.0]
nx = [41]

[sde]
n = 500
systems = ["discontinuous"]
dt = 1e-2
t_end = 0.5
record_every = 10
snapshot_times = [0.5]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn equilibrium_run_writes_the_advertised_files() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), EQUILIBRIUM_CONFIG);
    let out_dir = tmp.path().join("out");
    let out = swarmkin(
        &["equilibrium", "--config", &config, "--out", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let files = read_dir_bytes(&out_dir);
    for name in ["equilibrium.csv", "plot.py", "metadata.toml", "manifest.txt"] {
        assert!(files.contains_key(name), "missing {name}, have {:?}", files.keys());
    }

    // the manifest lists exactly what is on disk, one name per line
    let manifest = String::from_utf8(files["manifest.txt"].clone()).unwrap();
    let mut listed: Vec<&str> = manifest.lines().collect();
    listed.push("manifest.txt");
    listed.sort_unstable();
    let on_disk: Vec<&str> = files.keys().map(|s| s.as_str()).collect();
    assert_eq!(listed, on_disk);

    // CSV starts with a header row and uses commas
    let csv = String::from_utf8(files["equilibrium.csv"].clone()).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "x1,f");
    assert_eq!(csv.lines().count(), 42, "header plus one row per node");

    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("wrote 4 files"), "stdout: {stdout}");
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), PARTICLES_CONFIG);
    let out_dir = tmp.path().join("out");
    let out_flag = out_dir.to_str().unwrap();

    let first = swarmkin(&["particles", "--config", &config, "--out", out_flag], &[]);
    assert!(first.status.success(), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let bytes_first = read_dir_bytes(&out_dir);

    let second = swarmkin(&["particles", "--config", &config, "--out", out_flag], &[]);
    assert!(second.status.success());
    let bytes_second = read_dir_bytes(&out_dir);

    assert_eq!(bytes_first, bytes_second, "a rerun must reproduce every byte");
}

#[test]
fn worker_thread_count_does_not_change_the_output() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), PARTICLES_CONFIG);
    let dir_one = tmp.path().join("one");
    let dir_two = tmp.path().join("two");

    let one = swarmkin(
        &["particles", "--config", &config, "--out", dir_one.to_str().unwrap()],
        &[("RAYON_NUM_THREADS", "1")],
    );
    assert!(one.status.success(), "stderr: {}", String::from_utf8_lossy(&one.stderr));
    let two = swarmkin(
        &["particles", "--config", &config, "--out", dir_two.to_str().unwrap()],
        &[("RAYON_NUM_THREADS", "2")],
    );
    assert!(two.status.success());

    let mut bytes_one = read_dir_bytes(&dir_one);
    let mut bytes_two = read_dir_bytes(&dir_two);
    // metadata echoes the resolved output directory, which differs by design
    let strip = |bytes: &mut BTreeMap<String, Vec<u8>>| {
        let meta = String::from_utf8(bytes.remove("metadata.toml").unwrap()).unwrap();
        let kept: Vec<&str> =
            meta.lines().filter(|l| !l.starts_with("output_dir")).collect();
        bytes.insert("metadata.toml".into(), kept.join("\n").into_bytes());
    };
    strip(&mut bytes_one);
    strip(&mut bytes_two);
    assert_eq!(bytes_one, bytes_two, "results must not depend on the worker count");
}

#[test]
fn broken_config_lists_every_problem() {
    let tmp = TempDir::new().unwrap();
    let bad = r#"
kind = "particles"

[model]
lambda = 1.5
sigma2 = -0.2
delta = 0.5
x0 = [0.0]

[initial]
preset = "f0_test1"

[sde]
n = 0
systems = ["discontinuous"]
dt = 0.0
t_end = 1.0
"#;
    let config = write_config(tmp.path(), bad);
    let out = swarmkin(&["particles", "--config", &config], &[]);
    assert!(!out.status.success(), "a broken config must fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    for needle in ["lambda", "sigma2", "dt", "n must be at least 1"] {
        assert!(stderr.contains(needle), "missing complaint about {needle}: {stderr}");
    }
}

#[test]
fn subcommand_must_match_the_file_kind() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), EQUILIBRIUM_CONFIG);
    let out = swarmkin(&["fp", "--config", &config], &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("equilibrium") && stderr.contains("fp"),
        "mismatch message should name both kinds: {stderr}"
    );
}

#[test]
fn cli_flags_override_seed_and_output_dir() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), PARTICLES_CONFIG);
    let out_dir = tmp.path().join("elsewhere");
    let out = swarmkin(
        &[
            "particles",
            "--config",
            &config,
            "--seed",
            "4242",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let meta = fs::read_to_string(out_dir.join("metadata.toml")).unwrap();
    assert!(meta.contains("seed = 4242"), "metadata should echo the override: {meta}");
    assert!(
        fs::metadata(out_dir.join("manifest.txt")).is_ok(),
        "output landed somewhere else"
    );
}
