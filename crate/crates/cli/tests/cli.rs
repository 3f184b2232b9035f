use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[data]
samples = 40

[gen]
dims = [3, 2, 2]
lengths = [[3, 4], [4, 5], [5, 6]]
visual_lag = [1, 2]
audio_window = [2, 3]

[train]
epochs = 2
batch_size = 8

[model]
d = 8
d_h = 6
heads = 2

[psa]
layers = 2
wal_hidden = 4

[hca]
layers = 1
"#;

fn mea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mea"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_writes_manifest_and_payload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let manifest = dir.path().join("out/train.jsonl");
    let o = mea(&["gen-data", "-c", &cfg, "--split", "train", "-o", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/train.bin").exists());
    let lines = std::fs::read_to_string(&manifest).unwrap().lines().count();
    assert!(lines > 1 && lines <= 41, "{lines} manifest lines");
}

#[test]
fn train_then_eval_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    let o = mea(&["train", "-c", &cfg, "-o", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best epoch"));

    let ck = run.join("checkpoint.bin");
    let eval_dir = dir.path().join("eval");
    let o = mea(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "-o",
        eval_dir.to_str().unwrap(),
        "--dump-reps",
        "--dump-attention",
        "--probe",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("modality probe accuracy"));
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("eval_metrics.csv")).unwrap(),
        std::fs::read_to_string(run.join("test_metrics.csv")).unwrap()
    );
    assert!(eval_dir.join("reps.csv").exists());
    assert!(eval_dir.join("attention.csv").exists());

    let o = mea(&["eval", "--checkpoint", ck.to_str().unwrap(), "--set", "model.d=12"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.d"));
}

#[test]
fn sweep_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("sweep");
    let o = mea(&["sweep", "-c", &cfg, "--param", "mu", "--values", "0,0.25,1", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("param,value,best_epoch,val_loss,"));
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap(), text);
}

#[test]
fn gradcheck_passes_for_one_seed() {
    let o = mea(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = mea(&["train", "-c", &cfg, "--set", "model.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mea(&["train", "-c", &cfg, "--set", "model.heads=5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mea(&["train", "-c", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    let o = mea(&["train", "-c", &cfg, "--set", "train.lr=1e300", "--set", "train.epochs=20", "-o", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}
