//! The `synth`, `train`, `attack` and `eval` commands.
//!
//! Directory layout shared between commands:
//!
//! ```text
//! dataset/  steering.csv  manifest.csv  images/*.ppm
//! train/    weights.evfw  train_report.csv  split.csv
//! attack/   results.csv  scores.csv  clean_scores.csv  orig/*.ppm  adv/*.ppm
//! eval/     roc_*.csv  success_curve.csv  mse_cdf_*.csv  ratios.csv  summary.txt
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use steeradv_core::attack::{run_attacks, write_results_csv, write_scores_csv, AttackJob, AttackRecord, JobKind};
use steeradv_core::data::{
    generate_synthetic, load_steering_log, read_image, tensor_to_image, train_test_split, write_manifest, write_ppm,
    write_steering_log, Direction, PreprocessConfig, Sample, SynthConfig,
};
use steeradv_core::eval::{
    read_clean_scores_csv, read_scores_csv, write_clean_scores_csv, CleanScore, EvalReport, ScoreTable,
};
use steeradv_core::model::{load_weights, save_weights, weight_checksum, Head, Model};
use steeradv_core::train::{evaluate_classifier, evaluate_regressor, train_with_validation};
use steeradv_core::Error;

use crate::config::{CropRows, RunConfig, DEFAULT_CROP_ROWS};
use crate::CliError;

pub const STEERING_LOG: &str = "steering.csv";
pub const MANIFEST: &str = "manifest.csv";
pub const IMAGES_DIR: &str = "images";
pub const WEIGHTS: &str = "weights.evfw";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const SPLIT: &str = "split.csv";
pub const RESULTS: &str = "results.csv";
pub const SCORES: &str = "scores.csv";
pub const CLEAN_SCORES: &str = "clean_scores.csv";

/// Raw steering units per scaled unit.
const RAW_PER_SCALED: f64 = 25.0;

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| {
        CliError::Runtime(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| {
        CliError::Runtime(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let synth_cfg = SynthConfig {
        count: cfg.data.count,
        resolution: cfg.data.resolution,
        seed: cfg.run.seed,
        class_mix: cfg.data.class_mix,
    };
    let samples = generate_synthetic(&synth_cfg)?;
    let out = &cfg.run.out;
    let images = out.join(IMAGES_DIR);
    create_dir(&images)?;
    let mut frames = Vec::with_capacity(samples.len());
    for s in &samples {
        let frame = format!("{}.ppm", s.source_id);
        write_ppm(images.join(&frame), &tensor_to_image(&s.image)?)?;
        frames.push((frame, s.scaled_angle * RAW_PER_SCALED));
    }
    write_steering_log(out.join(STEERING_LOG), frames.iter().map(|(f, a)| (f.as_str(), *a)))?;
    write_manifest(out.join(MANIFEST), &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn dataset_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg
        .data
        .dir
        .as_deref()
        .ok_or_else(|| CliError::Config("data.dir is required".into()))?;
    if !dir.join(STEERING_LOG).is_file() {
        return Err(CliError::Config(format!(
            "data.dir {} does not contain {STEERING_LOG}",
            dir.display()
        )));
    }
    Ok(dir)
}

/// Resolves `crop_rows = auto` from the height of the first listed frame.
fn preprocess_config(cfg: &RunConfig, dir: &Path, height: usize, width: usize) -> Result<PreprocessConfig, CliError> {
    let keep_rows = match cfg.data.crop_rows {
        CropRows::None => None,
        CropRows::Rows(n) => Some(n),
        CropRows::Auto => {
            let log = dir.join(STEERING_LOG);
            let text = std::fs::read_to_string(&log).map_err(|source| Error::Io { path: log.clone(), source })?;
            match text.lines().nth(1).and_then(|l| l.split(',').next()) {
                Some(frame) => {
                    let path = dir.join(IMAGES_DIR).join(frame.trim());
                    match read_image(&path) {
                        Ok(img) if img.height > DEFAULT_CROP_ROWS => Some(DEFAULT_CROP_ROWS),
                        _ => None,
                    }
                }
                None => None,
            }
        }
    };
    Ok(PreprocessConfig {
        keep_rows,
        height,
        width,
    })
}

fn load_dataset(cfg: &RunConfig, height: usize, width: usize) -> Result<Vec<Sample>, CliError> {
    let dir = dataset_dir(cfg)?;
    let pre = preprocess_config(cfg, dir, height, width)?;
    let log = load_steering_log(dir.join(STEERING_LOG), dir.join(IMAGES_DIR), &pre)?;
    if log.missing_count() > 0 {
        eprintln!("skipped {} rows with missing images", log.missing_count());
    }
    if log.samples.len() < 2 {
        return Err(CliError::Config(format!("dataset {} has fewer than 2 usable samples", dir.display())));
    }
    Ok(log.samples)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let res = cfg.data.resolution;
    let samples = load_dataset(cfg, res, res)?;
    let split = train_test_split(samples.len(), cfg.data.test_fraction, cfg.run.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, test_set) = (pick(&split.train), pick(&split.validation));
    let mut model = Model::build(cfg.model.architecture, cfg.model.head, res, res, cfg.run.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    eprintln!(
        "training {} {} ({} parameters) on {} samples, {} held out",
        cfg.model.architecture.name(),
        cfg.model.head.name(),
        model.parameter_count(),
        train_set.len(),
        test_set.len()
    );
    let report = train_with_validation(&mut model, &train_set, Some(&test_set), &cfg.train_config())?;
    for e in &report.epochs {
        eprintln!("epoch {:>3}  loss {:.5}  held-out {:.4}", e.epoch, e.loss, e.val_metric.unwrap_or(f64::NAN));
    }

    let out = &cfg.run.out;
    create_dir(out)?;
    save_weights(&model, out.join(WEIGHTS))?;
    report.write_csv(out.join(TRAIN_REPORT))?;
    let mut split_csv = String::from("source_id,split\n");
    for (idx, name) in [(&split.train, "train"), (&split.validation, "test")] {
        for &i in idx {
            split_csv.push_str(&format!("{},{name}\n", samples[i].source_id));
        }
    }
    write_file(&out.join(SPLIT), &split_csv)?;
    let bytes = std::fs::read(out.join(WEIGHTS)).map_err(|source| Error::Io {
        path: out.join(WEIGHTS),
        source,
    })?;
    let metric = match cfg.model.head {
        Head::Classification => "accuracy",
        Head::Regression => "mse",
    };
    println!("held-out {metric} {}", report.final_metric);
    println!("weights checksum {:016x}", weight_checksum(&bytes));
    Ok(())
}

/// Held-out source ids from a `split.csv`, in file order.
fn test_ids(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit_once(','))
        .filter(|(_, split)| *split == "test")
        .map(|(id, _)| id.to_string())
        .collect())
}

fn weights_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let path = cfg
        .model
        .weights
        .clone()
        .ok_or_else(|| CliError::Config("model.weights is required".into()))?;
    if !path.is_file() {
        return Err(CliError::Config(format!("weight file {} not found", path.display())));
    }
    Ok(path)
}

pub fn attack(cfg: &RunConfig) -> Result<(), CliError> {
    let weights = weights_path(cfg)?;
    let model: Model<f32> = load_weights(&weights)?;
    if model.head() != cfg.model.head {
        return Err(CliError::Config(format!(
            "model.head is {} but {} holds a {} model",
            cfg.model.head.name(),
            weights.display(),
            model.head().name()
        )));
    }
    let (h, w) = model.resolution();
    let samples = load_dataset(cfg, h, w)?;
    // attack the held-out images when the training split is known
    let split = weights.with_file_name(SPLIT);
    let pool: Vec<Sample> = if split.is_file() {
        let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.source_id.as_str(), s)).collect();
        test_ids(&split)?
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()))
            .collect()
    } else {
        samples
    };
    if pool.is_empty() {
        return Err(CliError::Config("no held-out images to attack".into()));
    }
    let limit = if cfg.attack.images == 0 { usize::MAX } else { cfg.attack.images };
    let out = &cfg.run.out;
    create_dir(out)?;

    let jobs: Vec<AttackJob> = match model.head() {
        Head::Classification => {
            let clean = evaluate_classifier(&model, &pool)?;
            let rows: Vec<CleanScore> = pool
                .iter()
                .zip(&clean.scores)
                .map(|(s, sc)| CleanScore {
                    source_id: s.source_id.clone(),
                    label: s.label,
                    scores: *sc,
                })
                .collect();
            write_clean_scores_csv(out.join(CLEAN_SCORES), &rows)?;
            eprintln!("clean accuracy on {} held-out images: {:.4}", pool.len(), clean.accuracy);
            pool.iter()
                .zip(&clean.predictions)
                .filter(|(s, p)| s.label == **p)
                .take(limit)
                .flat_map(|(s, _)| {
                    Direction::ALL.into_iter().filter(|t| *t != s.label).map(|target| AttackJob {
                        source_id: s.source_id.clone(),
                        image: s.image.clone(),
                        kind: JobKind::Targeted { label: s.label, target },
                    })
                })
                .collect()
        }
        Head::Regression => {
            let clean = evaluate_regressor(&model, &pool)?;
            eprintln!("clean MSE on {} held-out images: {:.5}", pool.len(), clean.mse);
            pool.iter()
                .take(limit)
                .map(|s| AttackJob {
                    source_id: s.source_id.clone(),
                    image: s.image.clone(),
                    kind: JobKind::Regression { y: s.scaled_angle },
                })
                .collect()
        }
    };
    eprintln!("running {} attacks on {} worker(s)", jobs.len(), cfg.run.workers);
    let records = run_attacks(&model, &jobs, &cfg.attack.params, cfg.run.workers)?;
    write_results_csv(out.join(RESULTS), &records, &cfg.attack.params, cfg.attack.record_wall_time)?;
    write_scores_csv(out.join(SCORES), &records, &cfg.attack.params)?;
    if cfg.attack.save_images {
        save_images(out, &jobs, &records)?;
    }
    let hits = records.iter().filter(|r| r.result.success).count();
    println!("attacks {} succeeded {}", records.len(), hits);
    Ok(())
}

/// Source id without a trailing image extension.
fn stem(source_id: &str) -> &str {
    Path::new(source_id).file_stem().and_then(|s| s.to_str()).unwrap_or(source_id)
}

fn adversarial_name(record: &AttackRecord) -> String {
    match record.kind {
        JobKind::Targeted { target, .. } => format!("{}_to_{target}.ppm", stem(&record.source_id)),
        JobKind::Regression { .. } => format!("{}.ppm", stem(&record.source_id)),
    }
}

fn save_images(out: &Path, jobs: &[AttackJob], records: &[AttackRecord]) -> Result<(), CliError> {
    let (orig, adv) = (out.join("orig"), out.join("adv"));
    create_dir(&orig)?;
    create_dir(&adv)?;
    for (job, rec) in jobs.iter().zip(records) {
        let original = orig.join(format!("{}.ppm", stem(&job.source_id)));
        if !original.exists() {
            write_ppm(&original, &tensor_to_image(&job.image)?)?;
        }
        write_ppm(adv.join(adversarial_name(rec)), &tensor_to_image(&rec.result.adversarial)?)?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg
        .eval
        .input
        .as_deref()
        .ok_or_else(|| CliError::Config("eval.input is required".into()))?;
    if !input.is_dir() {
        return Err(CliError::Config(format!("eval.input {} is not a directory", input.display())));
    }
    let (scores, clean) = (input.join(SCORES), input.join(CLEAN_SCORES));
    let table = if scores.is_file() { Some(read_scores_csv(&scores)?) } else { None };
    let report = match table {
        Some(ScoreTable::Regression(rows)) => EvalReport::regression(&rows)?,
        Some(ScoreTable::Classification(_)) | None if clean.is_file() => {
            let rows: Vec<([f64; 3], usize)> = read_clean_scores_csv(&clean)?
                .into_iter()
                .map(|r| (r.scores, r.label.index()))
                .collect();
            let attacks = match table {
                Some(ScoreTable::Classification(a)) => a,
                _ => Vec::new(),
            };
            EvalReport::classification(&rows, &attacks, cfg.eval.epsilon, cfg.eval.roc_scoring)?
        }
        _ => {
            return Err(CliError::Config(format!(
                "{} holds neither {SCORES} nor {CLEAN_SCORES}",
                input.display()
            )))
        }
    };
    report.write(&cfg.run.out)?;
    print!("{}", report.summary());
    Ok(())
}
