use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_apcde");

const CONFIG: &str = r#"
seed = 3
data.path = "train.csv"
flow.levels = 1
flow.hidden = [16]
train.epochs = 15
train.batch_size = 50
train.peak_lr = 2e-3
train.warmup_epochs = 1
train.mc_samples = 200

[[heads]]
kind = "categorical"
columns = ["label"]
width = 1
"#;

fn apcde(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    ok(&apcde(dir.path(), &["synth-data", "--n", "400", "--seed", "1", "--out", "train.csv"]));
    ok(&apcde(dir.path(), &["synth-data", "--n", "60", "--seed", "2", "--out", "test.csv"]));
    dir
}

#[test]
fn train_then_evaluate() {
    let dir = workspace();
    let d = dir.path();
    assert!(d.join("train.csv.provenance.json").exists());

    ok(&apcde(d, &["train", "--config", "cfg.toml", "--out", "model.ckpt"]));
    assert!(d.join("model.ckpt").exists());
    let log = fs::read_to_string(d.join("model.ckpt.loss.log")).unwrap();
    assert_eq!(log.lines().count(), 15);
    assert!(log.starts_with("epoch 0 loss "));

    let out = apcde(
        d,
        &["density", "--model", "model.ckpt", "--data", "test.csv", "--out", "report.csv", "--mc-samples", "500"],
    );
    ok(&out);
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "sample_id,log_cond,log_marg,bpd");
    assert_eq!(lines.count(), 60);

    let out = apcde(d, &["classify", "--model", "model.ckpt", "--data", "test.csv"]);
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 61);

    let out = apcde(d, &["embed", "--model", "model.ckpt", "--data", "test.csv"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,zp0_0,zn0");

    let out = apcde(d, &["report", "--model", "model.ckpt"]);
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 16);

    let out = apcde(
        d,
        &["validate-sdr", "--model", "model.ckpt", "--data", "test.csv", "--probe-data", "train.csv", "--j", "3"],
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,observed,pred_0,pred_1,pred_2,agreement");

    let out = apcde(d, &["sample", "--model", "model.ckpt", "--n", "5"]);
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 6);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    ok(&apcde(d, &["train", "--config", "cfg.toml", "--out", "a.ckpt"]));
    ok(&apcde(d, &["train", "--config", "cfg.toml", "--out", "b.ckpt", "--threads", "2"]));
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(
        fs::read(d.join("a.ckpt.loss.log")).unwrap(),
        fs::read(d.join("b.ckpt.loss.log")).unwrap()
    );
    let args = ["density", "--model", "a.ckpt", "--data", "test.csv", "--mc-samples", "300"];
    let first = apcde(d, &args);
    ok(&first);
    assert_eq!(first.stdout, apcde(d, &args).stdout);

    ok(&apcde(d, &["train", "--config", "cfg.toml", "--out", "c.ckpt", "--seed", "4"]));
    assert_ne!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("c.ckpt")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace();
    let d = dir.path();
    ok(&apcde(
        d,
        &["train", "--config", "cfg.toml", "--epochs", "2", "--set", "train.batch_size=100", "--out", "m.ckpt"],
    ));
    let log = fs::read_to_string(d.join("m.ckpt.loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn grid_generation_writes_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&apcde(
        d,
        &[
            "synth-data", "--n", "200", "--dims", "4", "--set", "synth.slope=1.0", "--set", "synth.noise=0.1", "--out",
            "data.csv",
        ],
    ));
    let config = r#"
data.path = "data.csv"
flow.levels = 2
flow.hidden = [8]
train.epochs = 3
train.warmup_epochs = 1
train.mc_samples = 100
data.categorical = ["label"]

[[heads]]
kind = "linear-gaussian"
columns = ["xb"]
width = 2
pinned_variance = 0.01
"#;
    fs::write(d.join("cfg.toml"), config).unwrap();
    ok(&apcde(d, &["train", "--config", "cfg.toml", "--out", "m.ckpt"]));
    let out = apcde(
        d,
        &["generate", "--model", "m.ckpt", "--fix-zp", "-0.5,0.5", "--grid", "-1:1:12", "--pgm-dir", "grid"],
    );
    ok(&out);
    let pgms = fs::read_dir(d.join("grid")).unwrap().count();
    assert_eq!(pgms, 12);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "y0,y1,y2,y3,target0");
    assert_eq!(csv.lines().count(), 13);
    let first = fs::read(d.join("grid/grid_00.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n2 2\n255\n"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = workspace();
    let d = dir.path();
    let out = apcde(d, &["train", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));

    let out = apcde(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = apcde(d, &["train", "--config", "cfg.toml", "--out", "m.ckpt", "--set", "train.epochz=3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = workspace();
    let d = dir.path();
    let out = apcde(d, &["train", "--config", "cfg.toml", "--data", "missing.csv", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("broken.ckpt"), b"not a checkpoint").unwrap();
    let out = apcde(d, &["density", "--model", "broken.ckpt", "--data", "test.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = workspace();
    let d = dir.path();
    let out = apcde(
        d,
        &["train", "--config", "cfg.toml", "--out", "m.ckpt", "--lr", "1e30", "--set", "flow.coupling=affine"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
