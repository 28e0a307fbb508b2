//! Run configuration: built-in defaults, an optional INI file, then
//! `section.key=value` overrides.
//!
//! The file format is flat INI: `[section]` headers, `key = value` lines,
//! `#` or `;` comments. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use steeradv_core::attack::{AttackConfig, RegressionMode};
use steeradv_core::data::ClassMix;
use steeradv_core::eval::RocScoring;
use steeradv_core::model::{Architecture, Head};

use crate::CliError;

/// How many bottom rows of each frame to keep before resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropRows {
    /// 280 rows when the frame is taller than that, otherwise no crop.
    Auto,
    None,
    Rows(usize),
}

pub const DEFAULT_CROP_ROWS: usize = 280;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Dataset directory holding `steering.csv` and `images/`.
    pub dir: Option<PathBuf>,
    /// Samples generated by `synth`.
    pub count: usize,
    pub resolution: usize,
    pub class_mix: ClassMix,
    pub crop_rows: CropRows,
    /// Share of samples held out from training.
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub head: Head,
    /// Weight file read by `attack`, which requires it.
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub params: AttackConfig,
    /// Images attacked; 0 means every eligible test image.
    pub images: usize,
    pub record_wall_time: bool,
    pub save_images: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Output directory of an `attack` run.
    pub input: Option<PathBuf>,
    /// Attacked-pool cap; `None` uses the median successful norm.
    pub epsilon: Option<f64>,
    /// Scores entering both ROC pools.
    pub roc_scoring: RocScoring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                dir: None,
                count: 1000,
                resolution: 128,
                class_mix: ClassMix::default(),
                crop_rows: CropRows::Auto,
                test_fraction: 0.2,
            },
            model: ModelSection {
                architecture: Architecture::Epoch,
                head: Head::Classification,
                weights: None,
            },
            train: TrainSection {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 128,
                epochs: 50,
            },
            attack: AttackSection {
                params: AttackConfig::default(),
                images: 300,
                record_wall_time: true,
                save_images: true,
            },
            eval: EvalSection {
                input: None,
                epsilon: None,
                roc_scoring: RocScoring::Decision,
            },
            run: RunSection {
                seed: 0,
                out: PathBuf::from("out"),
                workers: 1,
            },
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?} as a number"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn class_mix(value: &str) -> Result<ClassMix, String> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("class_mix: expected three comma-separated numbers, got {value:?}"))?;
    let [l, s, r] = parts[..] else {
        return Err(format!("class_mix: expected three proportions, got {}", parts.len()));
    };
    ClassMix::new(l, s, r).map_err(|e| e.to_string())
}

impl RunConfig {
    /// Sets one `section.key`. Every key accepted here is also printed by
    /// [`RunConfig::render`].
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let a = &mut self.attack.params;
        match (section, key) {
            ("data", "dir") => self.data.dir = path_or_none(value),
            ("data", "count") => self.data.count = num(k, value)?,
            ("data", "resolution") => self.data.resolution = num(k, value)?,
            ("data", "class_mix") => self.data.class_mix = class_mix(value)?,
            ("data", "crop_rows") => {
                self.data.crop_rows = match value {
                    "auto" => CropRows::Auto,
                    "none" => CropRows::None,
                    v => CropRows::Rows(num(k, v)?),
                }
            }
            ("data", "test_fraction") => self.data.test_fraction = num(k, value)?,
            ("model", "architecture") => {
                self.model.architecture =
                    Architecture::parse(value).ok_or_else(|| format!("{k}: expected epoch or nvidia, got {value:?}"))?
            }
            ("model", "head") => {
                self.model.head =
                    Head::parse(value).ok_or_else(|| format!("{k}: expected classify or regress, got {value:?}"))?
            }
            ("model", "weights") => self.model.weights = path_or_none(value),
            ("train", "learning_rate") => self.train.learning_rate = num(k, value)?,
            ("train", "momentum") => self.train.momentum = num(k, value)?,
            ("train", "batch_size") => self.train.batch_size = num(k, value)?,
            ("train", "epochs") => self.train.epochs = num(k, value)?,
            ("attack", "c_initial") => a.c_initial = num(k, value)?,
            ("attack", "binary_search_steps") => a.binary_search_steps = num(k, value)?,
            ("attack", "fixed_c") => a.fixed_c = num(k, value)?,
            ("attack", "max_iterations") => a.max_iterations = num(k, value)?,
            ("attack", "learning_rate") => a.learning_rate = num(k, value)?,
            ("attack", "abort_early") => a.abort_early = flag(k, value)?,
            ("attack", "abort_window") => a.abort_window = num(k, value)?,
            ("attack", "regression_mode") => {
                a.regression_mode = RegressionMode::parse(value)
                    .ok_or_else(|| format!("{k}: expected fixed_c or search, got {value:?}"))?
            }
            ("attack", "regression_success_ratio") => a.regression_success_ratio = num(k, value)?,
            ("attack", "images") => self.attack.images = num(k, value)?,
            ("attack", "record_wall_time") => self.attack.record_wall_time = flag(k, value)?,
            ("attack", "save_images") => self.attack.save_images = flag(k, value)?,
            ("eval", "input") => self.eval.input = path_or_none(value),
            ("eval", "epsilon") => {
                self.eval.epsilon = match value {
                    "auto" => None,
                    v => Some(num(k, v)?),
                }
            }
            ("eval", "roc_scoring") => {
                self.eval.roc_scoring = RocScoring::parse(value)
                    .ok_or_else(|| format!("{k}: expected decision or probability, got {value:?}"))?
            }
            ("run", "seed") => self.run.seed = num(k, value)?,
            ("run", "out") => self.run.out = PathBuf::from(value),
            ("run", "workers") => self.run.workers = num(k, value)?,
            _ => return Err(format!("unknown key {k}")),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), String> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| format!("--set expects section.key=value, got {assignment:?}"))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| format!("--set expects section.key=value, got {assignment:?}"))?;
        self.set(section, key, value.trim())
    }

    /// Applies every entry of an INI document; `origin` names it in errors.
    pub fn apply_ini(&mut self, text: &str, origin: &str) -> Result<(), String> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = |m: String| format!("{origin}:{}: {m}", i + 1);
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header {line:?}")))?
                    .trim();
                if !["data", "model", "train", "attack", "eval", "run"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let section = section
                .as_deref()
                .ok_or_else(|| at("key outside of any [section]".to_string()))?;
            self.set(section, key.trim(), value.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_ini(&text, &path.display().to_string())
            .map_err(CliError::Config)?;
        Ok(cfg)
    }

    /// Range checks that do not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.count == 0 {
            return bad("data.count must be at least 1".into());
        }
        if self.data.resolution == 0 {
            return bad("data.resolution must be at least 1".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("data.test_fraction {} must lie in (0, 1)", self.data.test_fraction));
        }
        if self.data.crop_rows == CropRows::Rows(0) {
            return bad("data.crop_rows must be positive, auto or none".into());
        }
        if self.run.workers == 0 {
            return bad("run.workers must be at least 1".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.attack
            .params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> steeradv_core::train::TrainConfig {
        steeradv_core::train::TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.run.seed,
            loss: steeradv_core::train::Loss::for_head(self.model.head),
        }
    }

    /// The resolved configuration in the same INI form [`RunConfig::apply_ini`] reads.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let m = &self.data.class_mix;
        let crop = match self.data.crop_rows {
            CropRows::Auto => "auto".to_string(),
            CropRows::None => "none".to_string(),
            CropRows::Rows(n) => n.to_string(),
        };
        let a = &self.attack.params;
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "dir = {}", path(&self.data.dir));
        let _ = writeln!(s, "count = {}", self.data.count);
        let _ = writeln!(s, "resolution = {}", self.data.resolution);
        let _ = writeln!(s, "class_mix = {},{},{}", m.left, m.straight, m.right);
        let _ = writeln!(s, "crop_rows = {crop}");
        let _ = writeln!(s, "test_fraction = {}", self.data.test_fraction);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "architecture = {}", self.model.architecture.name());
        let _ = writeln!(s, "head = {}", self.model.head.name());
        let _ = writeln!(s, "weights = {}", path(&self.model.weights));
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.train.momentum);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "c_initial = {}", a.c_initial);
        let _ = writeln!(s, "binary_search_steps = {}", a.binary_search_steps);
        let _ = writeln!(s, "fixed_c = {}", a.fixed_c);
        let _ = writeln!(s, "max_iterations = {}", a.max_iterations);
        let _ = writeln!(s, "learning_rate = {}", a.learning_rate);
        let _ = writeln!(s, "abort_early = {}", a.abort_early);
        let _ = writeln!(s, "abort_window = {}", a.abort_window);
        let _ = writeln!(s, "regression_mode = {}", a.regression_mode.name());
        let _ = writeln!(s, "regression_success_ratio = {}", a.regression_success_ratio);
        let _ = writeln!(s, "images = {}", self.attack.images);
        let _ = writeln!(s, "record_wall_time = {}", self.attack.record_wall_time);
        let _ = writeln!(s, "save_images = {}", self.attack.save_images);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "input = {}", path(&self.eval.input));
        let _ = writeln!(s, "epsilon = {}", self.eval.epsilon.map_or("auto".to_string(), |e| e.to_string()));
        let _ = writeln!(s, "roc_scoring = {}", self.eval.roc_scoring.name());
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.run.seed);
        let _ = writeln!(s, "out = {}", self.run.out.display());
        let _ = writeln!(s, "workers = {}", self.run.workers);
        s
    }
}
