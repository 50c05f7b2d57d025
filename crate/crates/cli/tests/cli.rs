use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
run_name = "t"
n_upper = 20
n_lower = 20
resolution = 16
multiplicity = [[1, 12], [2, 8]]
latent_dim = 8
mapping_depth = 2
synthesis_width = 8
encoder_width = 4
critic_width = 4
style_disc_width = 8
pretrain_iterations = 3
pretrain_batch_size = 4
iterations = 6
batch_size = 3
checkpoint_every = 2
eval_outputs = 2
evaluator_width = 4
evaluator_steps = 5
evaluator_batch_size = 8
"#;

struct Sandbox {
    root: TempDir,
    config: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("run.toml");
        fs::write(&config, TINY).unwrap();
        Self { root, config }
    }

    fn bcgan(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bcgan"))
            .env("BCGAN_RUN_ROOT", self.root.path().join("runs"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.bcgan(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.bcgan(args).status.code().unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        self.root.path().join("runs").join("t")
    }

    fn prepared(self) -> Self {
        self.ok(&["dataset"]);
        self.ok(&["pretrain"]);
        self
    }

    fn first_upper(&self) -> PathBuf {
        let dir = self.run_dir().join("dataset").join("upper");
        let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.remove(0)
    }
}

fn records(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn dataset_is_reproducible_and_reports_histogram() {
    let s = Sandbox::new();
    let out = s.ok(&["dataset"]);
    let pairs = fs::read(s.run_dir().join("dataset/pairs.csv")).unwrap();
    assert!(out.contains("upper matches per item -> count: 1:12 2:8"), "{out}");
    s.ok(&["dataset"]);
    assert_eq!(fs::read(s.run_dir().join("dataset/pairs.csv")).unwrap(), pairs);
}

#[test]
fn bad_configuration_exit_codes() {
    let s = Sandbox::new();
    assert_eq!(s.code(&["--set", "no_such_key=1", "dataset"]), 2);
    assert_eq!(s.code(&["--set", "split_ratio=1.5", "dataset"]), 2);
    let out = s.bcgan(&["--set", "multiplicity=[[1, 5]]", "dataset"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!out.stderr.is_empty());
    assert_eq!(s.code(&["pretrain"]), 3, "pre-training without a dataset is a data error");
}

#[test]
fn training_logs_and_ablations() {
    let s = Sandbox::new().prepared();
    s.ok(&["train", "--iterations", "5"]);
    let full = records(&s.run_dir().join("train/full/log.jsonl"));
    assert_eq!(full.len(), 5);
    for key in ["iter", "dis", "cmp_dis", "adv", "div", "cmp", "total", "grad_norms", "ms"] {
        assert!(full[0].get(key).is_some(), "missing {key}");
    }
    s.ok(&["train", "--iterations", "3", "--ablate", "no-div"]);
    let no_div = records(&s.run_dir().join("train/no-div/log.jsonl"));
    assert_eq!(no_div.len(), 3);
    assert!(no_div.iter().all(|r| r["lambda1"] == 0.0 && r["div"] == 0.0));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.run_dir().join("train/full/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn resume_matches_continuous_run() {
    let a = Sandbox::new().prepared();
    a.ok(&["train", "--iterations", "8"]);
    let b = Sandbox::new().prepared();
    b.ok(&["train", "--iterations", "4"]);
    b.ok(&["train", "--iterations", "8", "--resume"]);
    let (ra, rb) = (records(&a.run_dir().join("train/full/log.jsonl")), records(&b.run_dir().join("train/full/log.jsonl")));
    assert_eq!(ra.len(), 8);
    assert_eq!(rb.len(), 8);
    for (x, y) in ra.iter().zip(&rb) {
        for key in ["dis", "cmp_dis", "adv", "div", "cmp", "total"] {
            let (u, v) = (x[key].as_f64().unwrap(), y[key].as_f64().unwrap());
            assert!((u - v).abs() <= 1e-5, "{key}: {u} vs {v}");
        }
    }
    assert_eq!(b.code(&["--set", "lambda2=1.0", "train", "--iterations", "9", "--resume"]), 2);
}

#[test]
fn changed_data_settings_are_refused() {
    let s = Sandbox::new().prepared();
    assert_eq!(s.code(&["--set", "dataset_seed=99", "train"]), 2);
}

#[test]
fn generate_grid_and_determinism() {
    let s = Sandbox::new().prepared();
    s.ok(&["train", "--iterations", "2"]);
    let input = s.first_upper();
    let input_arg = input.to_str().unwrap();
    s.ok(&["generate", "--input", input_arg, "-n", "3"]);
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let out = s.run_dir().join("generate/full").join(stem);
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 3);
    let first = fs::read(&files[0]).unwrap();
    let grid = image::open(s.run_dir().join("generate/full/grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (4 * 18 + 2, 18 + 2));
    s.ok(&["generate", "--input", input_arg, "-n", "3"]);
    assert_eq!(fs::read(&files[0]).unwrap(), first);

    let lower = s.run_dir().join("dataset/lower");
    assert_eq!(s.code(&["generate", "--input", lower.to_str().unwrap(), "-n", "1"]), 3);
}

#[test]
fn evaluate_reports() {
    let s = Sandbox::new().prepared();
    s.ok(&["train", "--iterations", "2"]);
    s.ok(&["evaluate"]);
    let path = s.run_dir().join("evaluate/full/report.json");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!(r["f2bt"].is_null() && r["note"].is_string());
    let per: Vec<f64> = r["diversity_per_input"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let compat: Vec<f64> = r["compat_per_output"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&per) - r["diversity"].as_f64().unwrap()).abs() < 1e-9);
    assert!((mean(&compat) - r["oracle_compat_rate"].as_f64().unwrap()).abs() < 1e-9);

    let ck = s.run_dir().join("train/full/checkpoint.bin");
    s.ok(&["evaluate", "--compare", &format!("twin={}", ck.display())]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(r["f2bt"]["full"], 0.0);
    assert_eq!(r["f2bt"]["twin"], 0.0);
}

#[test]
fn interpolation_strip_and_table() {
    let s = Sandbox::new().prepared();
    s.ok(&["train", "--iterations", "2"]);
    let input = s.first_upper();
    s.ok(&["interpolate", "--input", input.to_str().unwrap()]);
    s.ok(&["generate", "--input", input.to_str().unwrap(), "-n", "1"]);
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let strip = image::open(s.run_dir().join(format!("interpolate/full/{stem}_strip.png"))).unwrap().to_rgb8();
    assert_eq!((strip.width(), strip.height()), (5 * 18 + 2, 20));
    let generated = image::open(s.run_dir().join(format!("generate/full/{stem}/00.png"))).unwrap().to_rgb8();
    let last = image::imageops::crop_imm(&strip, 2 + 4 * 18, 2, 16, 16).to_image();
    assert_eq!(last, generated, "alpha = 1 frame equals the generated output");
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.run_dir().join("interpolate/full/beat_table.json")).unwrap()).unwrap();
    let labels: Vec<&str> = table["table"]["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["0.00 vs 0.25", "0.25 vs 0.50", "0.50 vs 0.75", "0.75 vs 1.00"]);
}

#[test]
fn divergence_and_lock_exit_codes() {
    let s = Sandbox::new().prepared();
    assert_eq!(s.code(&["--set", "learning_rate=1e9", "train", "--iterations", "10"]), 4);
    fs::write(s.run_dir().join(".lock"), "1").unwrap();
    assert_eq!(s.code(&["report"]), 1);
    fs::remove_file(s.run_dir().join(".lock")).unwrap();
    s.ok(&["report"]);
    assert!(s.run_dir().join("report/pretrain.png").exists());
    assert!(s.run_dir().join("report/summary.json").exists());
}
