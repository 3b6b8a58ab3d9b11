//! End-to-end runs of the experiment commands on tiny synthetic problems.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use smoothlab::experiments::{self, manifest::LOCK_FILE, ExperimentConfig, RunManifest};
use smoothlab::network::load_checkpoint;
use smoothlab::Error;

const CLUSTERS: &str = "
[data]
source = synth_clusters
classes = 3
per_class = 40
dim = 4
separation = 3
noise = 1
validation_size = 30
test_size = 30

[teacher]
hidden = 8
input_keep = 1
hidden_keep = 1

[train]
epochs = 1
batch_size = 16
lr = 0.5
max_shift = 0
";

const GLYPHS: &str = "
[data]
source = synth_glyphs
classes = 2
per_class = 30
side = 8
strokes = 3
jitter = 0.5
validation_size = 10
test_size = 10

[teacher]
hidden = 8
input_keep = 1
hidden_keep = 1

[train]
epochs = 2
batch_size = 8
lr = 0.5
max_shift = 1
checkpoint_every = 0

[mi]
per_class = 10
mc_samples = 3
every = 4
";

fn config(kind: &str, body: &str, out: &Path) -> ExperimentConfig {
    let text = format!("[experiment]\nkind = {kind}\nseeds = 4\noutput = {}\n{body}", out.display());
    ExperimentConfig::parse(&text).unwrap()
}

/// Every artifact except the manifest, keyed by relative path.
fn snapshot(dir: &Path, m: &RunManifest) -> BTreeMap<PathBuf, Vec<u8>> {
    m.artifacts
        .iter()
        .map(|a| (a.clone(), fs::read(dir.join(a)).unwrap()))
        .collect()
}

fn assert_manifest_complete(dir: &Path, m: &RunManifest) {
    assert!(!m.artifacts.is_empty());
    for a in &m.artifacts {
        assert!(dir.join(a).is_file(), "{} listed but missing", a.display());
    }
    assert_eq!(&RunManifest::load(dir).unwrap(), m);
    assert!(!dir.join(LOCK_FILE).exists());
}

#[test]
fn one_epoch_train_writes_manifest_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("train", CLUSTERS, dir.path());
    let m = experiments::run(&cfg).unwrap();
    assert_manifest_complete(dir.path(), &m);
    assert_eq!(m.kind, "train");
    assert_eq!(m.seeds, vec![4]);
    let net = load_checkpoint(&dir.path().join("seed-4/model.slck")).unwrap();
    assert!(net.step > 0);
    let err = m.metrics["seed-4.test_error"];
    assert!((0.0..=1.0).contains(&err));
    assert!(m.artifacts.contains(&PathBuf::from("seed-4/metrics.csv")));
}

fn rerun_is_identical(kind: &str, body: &str) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(kind, body, dir.path());
    let first = experiments::run(&cfg).unwrap();
    let a = snapshot(dir.path(), &first);
    for entry in fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            fs::remove_dir_all(p).unwrap();
        } else {
            fs::remove_file(p).unwrap();
        }
    }
    let second = experiments::run(&cfg).unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert_eq!(first.metrics, second.metrics);
    assert_eq!(first.config_sha256, second.config_sha256);
    let b = snapshot(dir.path(), &second);
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs between runs", path.display());
    }
}

#[test]
fn train_is_byte_identical_across_runs() {
    rerun_is_identical("train", CLUSTERS);
}

#[test]
fn calibrate_is_byte_identical_across_runs() {
    rerun_is_identical("calibrate", CLUSTERS);
}

#[test]
fn project_is_byte_identical_across_runs() {
    rerun_is_identical("project", &format!("{CLUSTERS}\n[project]\nper_class = 5\n"));
}

#[test]
fn mi_track_is_byte_identical_across_runs() {
    rerun_is_identical("mi_track", GLYPHS);
}

#[test]
fn distill_sweep_is_byte_identical_across_runs() {
    let body = format!(
        "{CLUSTERS}\n[student]\nhidden = 6\n[student_train]\nepochs = 1\nbatch_size = 16\nlr = 0.5\n\
         [distill]\ntemperatures = 1, 4\nteacher_alphas = 0, 0.3\nstudent_alphas = 0.3\n"
    );
    rerun_is_identical("distill_sweep", &body);
}

#[test]
fn projection_csv_records_tightness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("project", &format!("{CLUSTERS}\n[project]\nper_class = 5\n"), dir.path());
    let m = experiments::run(&cfg).unwrap();
    assert_manifest_complete(dir.path(), &m);
    let csv = fs::read_to_string(dir.path().join("seed-4/projection_ls_train.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 3 * 5);
    assert!(csv.lines().any(|l| l.starts_with("# tightness mean=")));
    let svg = fs::read_to_string(dir.path().join("seed-4/projection_ls_train.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 15);
    assert!(m.metrics["seed-4.tightness_ratio_train"].is_finite());
}

#[test]
fn mi_series_starts_at_step_zero() {
    let dir = tempfile::tempdir().unwrap();
    let m = experiments::run(&config("mi_track", GLYPHS, dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("seed-4/mi_hard.csv")).unwrap();
    let steps: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps.first(), Some(&0));
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    let log_n = 20f64.ln();
    for key in ["hard", "ls"] {
        let v = m.metrics[&format!("seed-4.mi_{key}_final")];
        assert!((0.0..=log_n).contains(&v));
    }
}

#[test]
fn mi_track_skips_unreadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let first = experiments::run(&config("mi_track", GLYPHS, &dir.path().join("a"))).unwrap();
    let hard = dir.path().join("a/seed-4/hard-checkpoints");
    let ls = dir.path().join("a/seed-4/ls-checkpoints");
    fs::write(hard.join("ckpt-000000001.slck"), b"not a checkpoint").unwrap();
    let body = format!(
        "{GLYPHS}\n[inputs]\nhard_series = {}\nls_series = {}\n",
        hard.display(),
        ls.display()
    );
    let second = experiments::run(&config("mi_track", &body, &dir.path().join("b"))).unwrap();
    for k in ["seed-4.mi_hard_final", "seed-4.mi_ls_final", "seed-4.mi_hard_peak"] {
        assert_eq!(first.metrics[k], second.metrics[k], "{k}");
    }
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "1\n").unwrap();
    let err = experiments::run(&config("train", CLUSTERS, dir.path())).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "experiment.output"), "{err}");
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("conf") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg, "{}", path.display());
        n += 1;
    }
    assert!(n >= 5);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_smoothlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_applies_seed_and_output_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, format!("[experiment]\nkind = train\nseeds = 1, 2\n{CLUSTERS}")).unwrap();
    let out = dir.path().join("run");
    let res = cli(&["train", "--config", conf.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.seeds, vec![9]);
    assert!(out.join("seed-9/model.slck").is_file());
    assert!(String::from_utf8_lossy(&res.stdout).contains("seed-9.test_error"));
    let saved = ExperimentConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(saved.seeds, vec![9]);
    assert_eq!(saved.output, out);
}

#[test]
fn cli_reports_config_errors_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "[experiment]\nkind = train\n[train]\nepochs = many\n").unwrap();
    let res = cli(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("train.epochs"));

    fs::write(&conf, format!("[experiment]\nkind = calibrate\n{CLUSTERS}")).unwrap();
    let res = cli(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("experiment.kind"));

    let res = cli(&["train", "--config", dir.path().join("missing.conf").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn mnist_source_reads_idx_files() {
    use smoothlab::dataset::{synth_glyphs, to_idx_bytes, GlyphSpec};
    use smoothlab::numerics::RngState;

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir_all(&data).unwrap();
    let spec = GlyphSpec { classes: 10, per_class: 6, side: 12, strokes: 3, jitter: 0.5, pixel_noise: 0.05 };
    for (prefix, seed) in [("train", 1), ("t10k", 2)] {
        let ds = synth_glyphs(&spec, &RngState::new(seed)).unwrap();
        let (img, lab) = to_idx_bytes(&ds).unwrap();
        fs::write(data.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        fs::write(data.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
    let body = format!(
        "[data]\nsource = mnist\nmnist_dir = {}\nclasses = 10\nvalidation_size = 10\ntest_size = 0\n\
         [teacher]\nhidden = 8\ninput_keep = 0.8\nhidden_keep = 0.5\n\
         [train]\nepochs = 1\nbatch_size = 16\nmax_shift = 2\n\
         [student]\nhidden = 6\n[student_train]\nepochs = 1\nbatch_size = 16\n\
         [distill]\ntemperatures =\nteacher_alphas = 0, 0.1\nstudent_alphas =\n",
        data.display()
    );
    let out = dir.path().join("train");
    let m = experiments::run(&config("train", &body, &out)).unwrap();
    assert_manifest_complete(&out, &m);
    let net = load_checkpoint(&out.join("seed-4/model.slck")).unwrap();
    assert_eq!(net.input_dim(), 144);

    let out = dir.path().join("sweep");
    let m = experiments::run(&config("distill_sweep", &body, &out)).unwrap();
    let rows = experiments::read_sweep(&fs::read_to_string(out.join("distill.csv")).unwrap()).unwrap();
    let s4: Vec<f64> = rows.iter().filter(|r| r.scenario == 4).map(|r| r.alpha).collect();
    assert_eq!(s4, vec![0.0, 0.1]);
    assert!(m.artifacts.contains(&PathBuf::from("seed-4/teachers/teacher-alpha-0.1.slck")));
}
