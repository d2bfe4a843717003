use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 1

[data]
preset = "toy_1d"

[model]
dim = 1
hidden = 8
blocks = 3
time_features = 4
num_classes = 2

[schedule]
steps = 40

[train]
steps = 20
batch_size = 32
log_every = 10

[[guidance]]
name = "cfg"
kind = "cfg"
lambda = 2.0

[[guidance]]
name = "s2"
kind = "s2"
lambda = 2.0
omega = 0.25
drop_count = 1

[sampling]
n_per_class = 16
"#;

fn s2lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2lab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let models = dir.path().join("models");
    let run = dir.path().join("run");
    let (models, run) = (models.to_str().unwrap(), run.to_str().unwrap());

    let o = s2lab(&["--threads", "1", "train", "--config", &cfg, "--out", models]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("probe_mse"));

    let o = s2lab(&["sample", "--config", &cfg, "--out", run, "--models", models, "--guidance", "s2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(Path::new(run).join("samples_s2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 32);

    let o = s2lab(&["eval", "--config", &cfg, "--out", run]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(run).join("metrics.json").exists());

    // A different seed is a different configuration.
    let o = s2lab(&["eval", "--config", &cfg, "--out", run, "--seed", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("manifest mismatch"));
}

#[test]
fn sweep_writes_long_table_and_rejects_bad_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("sweep");
    let out = out.to_str().unwrap();
    let o = s2lab(&["sweep", "--config", &cfg, "--out", out, "--guidance", "cfg", "--axis", "n_subnets", "--values", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep.axis"), "{}", stderr(&o));

    let o = s2lab(&["sweep", "--config", &cfg, "--out", out, "--guidance", "s2", "--axis", "omega", "--values", "0,0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(Path::new(out).join("sweep_s2_omega.csv")).unwrap();
    assert!(table.starts_with("axis,value,metric,metric_value\n"));
    assert!(table.lines().any(|l| l.starts_with("omega,0.5,wasserstein1,")));
}

#[test]
fn config_errors_name_the_key_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &TINY.replace("omega = 0.25", "omega = -1.0"));
    let o = s2lab(&["train", "--config", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("guidance[1].omega"), "{}", stderr(&o));

    let typo = write_config(dir.path(), "typo.toml", &TINY.replace("batch_size", "batchsize"));
    let o = s2lab(&["train", "--config", &typo, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.batchsize"), "{}", stderr(&o));
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = s2lab(&["train", "--config", "/nonexistent/x.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let o = s2lab(&["plot", "/nonexistent/plot.toml"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn plot_renders_a_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "x,label\n0.5,0\n1.5,0\n-0.2,1\n").unwrap();
    let spec = write_config(
        dir.path(),
        "plot.toml",
        "kind = \"hist1d\"\ninputs = [\"a.csv\"]\noutput = \"a.svg\"\nbins = 10\n",
    );
    let o = s2lab(&["plot", &spec]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("a.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}

#[test]
fn unknown_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = s2lab(&["repro", "fig42", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fig3_1d"));
}
