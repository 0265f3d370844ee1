use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hello_core::archive::load_archive;
use hello_core::encoders::{load_pretrained_encoder, ImageEncoder};
use safetensors::tensor::TensorView;
use safetensors::Dtype;

fn hello(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hello"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HELLO_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"output_dir = "{}"
[hyper]
epochs_k = 2
[data]
classes = 3
train_per_class = 10
test_per_class = 4
image_size = 16
[encoder]
embed_dim = 16
text_vocab = 64
[teachers]
arch = "convnet-xs"
total_epochs = 3
batch_size = 10
window = [1, 3]
count = 3
[transfer]
rank_encoder = 2
rank_head = 2
epochs = 1
batch_size = 10
holdout_fraction = 0.1
[synthesis]
ipc = 1
crops_per_image = 4
sources_per_class = 4
[downstream]
arch = "convnet-xs"
batch_size = 3
eval_every = 1
seeds = [0]
"#,
        dir.join("run").display()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn storage_report_from_numbers() {
    let o = hello(&["report-storage", "--k", "150", "--n-synthetic", "1000", "--classes", "100", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["soft_label_bytes"], 150u64 * 1000 * 100 * 4);

    let text = hello(&["report-storage", "--k", "150", "--n-synthetic", "1000", "--classes", "100"]);
    assert!(stdout(&text).contains("57.2 MiB"), "{}", stdout(&text));
}

#[test]
fn partial_storage_arguments_are_a_config_error() {
    let o = hello(&["report-storage", "--k", "150"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn negative_rank_fails_before_any_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = hello(&["pipeline", "--output", out.to_str().unwrap(), "--rank-enc", "-4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--rank-enc"));
    assert!(!out.exists());
}

#[test]
fn inverted_teacher_window_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = hello(&["train-teachers", "--output", out.to_str().unwrap(), "--teacher-window", "9,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unreadable_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[hyper]\nno_such_key = 1\n").unwrap();
    let o = hello(&["pipeline", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_upstream_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hello(&["fit-projector", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage projector failed"), "{}", stderr(&o));
}

#[test]
fn pipeline_runs_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let first = hello(&["pipeline", "--config", cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("student accuracy"), "{}", stdout(&first));
    assert!(dir.path().join("run/projector/projector.arc").exists());

    let again = hello(&["pipeline", "--config", cfg, "--resume"]);
    assert!(again.status.success());
    assert_eq!(stdout(&again).matches("current, skipped").count(), 6, "{}", stdout(&again));

    let storage = hello(&["report-storage", "--config", cfg, "--json"]);
    assert!(storage.status.success(), "{}", stderr(&storage));
    let v: serde_json::Value = serde_json::from_str(&stdout(&storage)).unwrap();
    assert_eq!(v["soft_label_bytes"], 2 * 3 * 3 * 4);
    assert!(v["projector_bytes"].as_u64().unwrap() > 0);

    let hard = hello(&["train-student", "--config", cfg, "--arm", "hard-only"]);
    assert!(hard.status.success(), "{}", stderr(&hard));
    let summary = fs::read_to_string(dir.path().join("run/student/summary.json")).unwrap();
    assert!(summary.contains("hardonly"), "{summary}");

    let cross = hello(&["eval-cross-arch", "--config", cfg, "--archs", "convnet-xs"]);
    assert!(cross.status.success(), "{}", stderr(&cross));
    assert!(dir.path().join("run/cross_arch.json").exists());

    let cont = hello(&["eval-continual", "--config", cfg, "--steps", "3"]);
    assert!(cont.status.success(), "{}", stderr(&cont));
    assert_eq!(stdout(&cont).matches("step ").count(), 3, "{}", stdout(&cont));
}

#[test]
fn imports_a_safetensors_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let enc = ImageEncoder::toy([3, 16, 16], 12, 7).unwrap();
    let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = enc
        .params()
        .iter()
        .map(|(name, a)| {
            let bytes = a.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            (name.replace('/', "."), a.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(String, TensorView)> = blobs
        .iter()
        .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
        .collect();
    let input = dir.path().join("enc.safetensors");
    fs::write(&input, safetensors::tensor::serialize(views, None).unwrap()).unwrap();
    let output = dir.path().join("enc.arc");
    let o = hello(&[
        "import-encoder",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--input-shape",
        "3,16,16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = load_pretrained_encoder(&load_archive(&output).unwrap(), "toy-encoder").unwrap();
    let x = ndarray::Array4::from_shape_fn((2, 3, 16, 16), |(n, c, h, w)| ((n + c + h * w) % 7) as f64 / 7.0);
    let a = enc.encode_image(x.view()).unwrap();
    let b = loaded.encode_image(x.view()).unwrap();
    assert!((a - b).iter().all(|d| d.abs() < 1e-4));

    let garbage = dir.path().join("junk.safetensors");
    fs::write(&garbage, b"not safetensors").unwrap();
    let o = hello(&["import-encoder", "--input", garbage.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
