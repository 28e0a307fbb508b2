use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use steeradv_core::data::read_image;

const BIN: &str = env!("CARGO_BIN_EXE_steeradv");

/// Small enough that the whole pipeline runs in a few seconds.
const TINY: &str = "\
[data]
count = 120
resolution = 32
test_fraction = 0.25

[train]
epochs = 3
batch_size = 16

[attack]
images = 10
binary_search_steps = 3
max_iterations = 40
abort_window = 10
record_wall_time = false

[run]
seed = 5
";

fn steeradv(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn check(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    train: PathBuf,
    attack: PathBuf,
    eval: PathBuf,
    train_stdout: String,
}

/// synth -> train -> attack -> eval in `root`.
fn pipeline(root: &Path, config: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf, String) {
    let (data, train, attack, eval) = (root.join("data"), root.join("train"), root.join("attack"), root.join("eval"));
    let c = s(config);
    check(&steeradv(&["synth", "--config", c, "--out", s(&data)]));
    let set_data = format!("data.dir={}", s(&data));
    let t = steeradv(&["train", "--config", c, "--set", &set_data, "--out", s(&train)]);
    check(&t);
    let set_weights = format!("model.weights={}", s(&train.join("weights.evfw")));
    check(&steeradv(&[
        "attack", "--config", c, "--set", &set_data, "--set", &set_weights, "--out", s(&attack),
    ]));
    let set_input = format!("eval.input={}", s(&attack));
    check(&steeradv(&["eval", "--config", c, "--set", &set_input, "--out", s(&eval)]));
    (data, train, attack, eval, String::from_utf8(t.stdout).unwrap())
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.ini");
        std::fs::write(&config, TINY).unwrap();
        let (data, train, attack, eval, train_stdout) = pipeline(dir.path(), &config);
        Run {
            _dir: dir,
            config,
            data,
            train,
            attack,
            eval,
            train_stdout,
        }
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible_and_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        check(&steeradv(&["synth", "--seed", "7", "--set", "data.count=100", "--set", "data.resolution=32", "--out", s(out)]));
    }
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(ca.len(), 102);
    assert!(ca == cb, "synth output differs between runs");
    assert_eq!(csv_rows(&a.join("manifest.csv")).len(), 100);
}

#[test]
fn invalid_class_mix_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = steeradv(&["synth", "--set", "data.class_mix=0.5,0.5,0.5", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("class_mix"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_sections_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = steeradv(&["synth", "--set", "train.epoch=3", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key train.epoch"));
    let ini = dir.path().join("bad.ini");
    std::fs::write(&ini, "[trian]\nepochs = 3\n").unwrap();
    let o = steeradv(&["synth", "--config", s(&ini)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.ini:1"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = format!("data.dir={}", s(&dir.path().join("nowhere")));
    let o = steeradv(&["train", "--set", &missing, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = steeradv(&["train", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn show_config_prints_training_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = steeradv(&["synth", "--show-config", "--set", "data.count=2", "--set", "data.resolution=8", "--out", s(dir.path())]);
    check(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let section = text.split("[train]").nth(1).unwrap().split("\n[").next().unwrap();
    for line in ["learning_rate = 0.01", "momentum = 0.9", "batch_size = 128", "epochs = 50"] {
        assert!(section.contains(line), "missing {line:?} in\n{text}");
    }
    assert!(text.contains("count = 2"));
    assert!(text.contains("binary_search_steps = 9"));
    assert!(text.contains("c_initial = 0.001"));
}

#[test]
fn flags_override_file_and_set() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("c.ini");
    std::fs::write(&ini, "[run]\nseed = 1\nworkers = 3\n[data]\ncount = 2\nresolution = 8\n").unwrap();
    let o = steeradv(&[
        "synth", "--config", s(&ini), "--set", "run.seed=2", "--seed", "9", "--set", "run.workers=4", "--show-config",
        "--out", s(dir.path()),
    ]);
    check(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("workers = 4"));
}

#[test]
fn pipeline_writes_every_artifact() {
    let run = shared();
    for f in ["steering.csv", "manifest.csv"] {
        assert!(run.data.join(f).is_file(), "{f}");
    }
    for f in ["weights.evfw", "train_report.csv", "split.csv"] {
        assert!(run.train.join(f).is_file(), "{f}");
    }
    for f in ["results.csv", "scores.csv", "clean_scores.csv"] {
        assert!(run.attack.join(f).is_file(), "{f}");
    }
    for f in ["roc_clean.csv", "roc_attacked.csv", "success_curve.csv", "summary.txt"] {
        assert!(run.eval.join(f).is_file(), "{f}");
    }
    let keys: Vec<String> = std::fs::read_to_string(run.eval.join("summary.txt"))
        .unwrap()
        .lines()
        .map(|l| l.split('=').next().unwrap().to_string())
        .collect();
    assert_eq!(keys, ["auc_clean", "auc_attacked", "max_ratio", "n_images", "success_rate"]);
    assert!(run.train_stdout.contains("weights checksum"));
}

#[test]
fn classification_attacks_both_other_targets() {
    let run = shared();
    let rows = csv_rows(&run.attack.join("results.csv"));
    assert_eq!(rows.len(), 20);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0][0], pair[1][0]);
        let classes = [&pair[0][1], &pair[0][2], &pair[1][2]];
        assert!(classes[0] != classes[1] && classes[0] != classes[2] && classes[1] != classes[2]);
    }
}

#[test]
fn saved_adversarial_images_match_recorded_norms() {
    let run = shared();
    let rows = csv_rows(&run.attack.join("results.csv"));
    for row in &rows {
        let stem = row[0].trim_end_matches(".ppm");
        let orig = read_image(run.attack.join("orig").join(format!("{stem}.ppm"))).unwrap();
        let adv = read_image(run.attack.join("adv").join(format!("{stem}_to_{}.ppm", row[2]))).unwrap();
        let d = orig.pixels.len();
        let l2: f64 = orig
            .pixels
            .iter()
            .zip(&adv.pixels)
            .map(|(&a, &b)| ((a as f64 - b as f64) / 255.0).powi(2))
            .sum::<f64>()
            .sqrt();
        let recorded: f64 = row[4].parse().unwrap();
        let bound = (d as f64).sqrt() / 510.0;
        assert!((l2 - recorded).abs() <= bound, "{}: {l2} vs {recorded} (bound {bound})", row[0]);
    }
}

#[test]
fn regression_attack_with_classifier_weights_is_a_config_error() {
    let run = shared();
    let dir = tempfile::tempdir().unwrap();
    let set_data = format!("data.dir={}", s(&run.data));
    let set_weights = format!("model.weights={}", s(&run.train.join("weights.evfw")));
    let o = steeradv(&[
        "attack", "--config", s(&run.config), "--set", &set_data, "--set", &set_weights, "--set", "model.head=regress",
        "--out", s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.head"), "{}", stderr(&o));
}

#[test]
fn clean_only_eval_omits_the_attacked_roc() {
    let run = shared();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    std::fs::copy(run.attack.join("clean_scores.csv"), input.join("clean_scores.csv")).unwrap();
    let out = dir.path().join("out");
    let set_input = format!("eval.input={}", s(&input));
    check(&steeradv(&["eval", "--set", &set_input, "--out", s(&out)]));
    assert!(out.join("roc_clean.csv").is_file());
    assert!(!out.join("roc_attacked.csv").exists());
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("auc_clean=") && l != "auc_clean=NA"));
    assert!(summary.contains("auc_attacked=NA"));
}

#[test]
fn fixed_seed_reproduces_weights_and_results() {
    let run = shared();
    let dir = tempfile::tempdir().unwrap();
    let (_, train, attack, _, stdout) = pipeline(dir.path(), &run.config);
    assert_eq!(stdout, run.train_stdout);
    assert_eq!(
        std::fs::read(train.join("weights.evfw")).unwrap(),
        std::fs::read(run.train.join("weights.evfw")).unwrap()
    );
    for f in ["results.csv", "scores.csv", "clean_scores.csv"] {
        assert_eq!(
            std::fs::read(attack.join(f)).unwrap(),
            std::fs::read(run.attack.join(f)).unwrap(),
            "{f}"
        );
    }
}
