//! Attack batches and their CSV forms.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{attack_regression, attack_targeted, AttackConfig, AttackResult};
use crate::data::Direction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JobKind {
    /// `label` is the true class of the image.
    Targeted { label: Direction, target: Direction },
    Regression { y: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackJob {
    pub source_id: String,
    pub image: Tensor<f32>,
    pub kind: JobKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub source_id: String,
    pub kind: JobKind,
    pub result: AttackResult<f32>,
}

impl AttackJob {
    pub fn run(&self, model: &Model<f32>, config: &AttackConfig) -> Result<AttackRecord> {
        let result = match self.kind {
            JobKind::Targeted { target, .. } => attack_targeted(model, &self.image, target, config)?,
            JobKind::Regression { y } => attack_regression(model, &self.image, y, config)?,
        };
        Ok(AttackRecord {
            source_id: self.source_id.clone(),
            kind: self.kind,
            result,
        })
    }
}

/// Runs independent attacks on up to `workers` threads. Output order follows
/// `jobs`; each attack is sequential, so results do not depend on `workers`.
pub fn run_attacks(
    model: &Model<f32>,
    jobs: &[AttackJob],
    config: &AttackConfig,
    workers: usize,
) -> Result<Vec<AttackRecord>> {
    config.validate()?;
    if workers <= 1 {
        return jobs.iter().map(|j| j.run(model, config)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("run_attacks", e.to_string()))?;
    pool.install(|| jobs.par_iter().map(|j| j.run(model, config)).collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl AttackRecord {
    fn truth_and_target(&self, regression_mode: &str) -> (String, String) {
        match self.kind {
            JobKind::Targeted { label, target } => (label.to_string(), target.to_string()),
            JobKind::Regression { y } => (y.to_string(), regression_mode.to_string()),
        }
    }
}

/// Writes `source_id,original_class_or_y,target_or_mode,success,l2_norm,
/// best_c,iterations,pre_prediction,post_prediction,wall_time_ms`.
/// With `wall_time` false the last column is written as 0 so that repeated
/// runs produce identical files.
pub fn write_results_csv(
    path: impl AsRef<Path>,
    records: &[AttackRecord],
    config: &AttackConfig,
    wall_time: bool,
) -> Result<()> {
    let mut out = String::from(
        "source_id,original_class_or_y,target_or_mode,success,l2_norm,best_c,iterations,pre_prediction,post_prediction,wall_time_ms\n",
    );
    for r in records {
        let (truth, target) = r.truth_and_target(config.regression_mode.name());
        let res = &r.result;
        let ms = if wall_time { res.wall_time.as_millis() } else { 0 };
        let _ = writeln!(
            out,
            "{},{truth},{target},{},{},{},{},{},{},{ms}",
            r.source_id,
            res.success,
            res.l2_norm,
            opt(res.best_c),
            res.iterations,
            res.original_prediction,
            res.adversarial_prediction,
        );
    }
    write_text(path.as_ref(), out)
}

pub const CLASSIFICATION_SCORES_HEADER: &str =
    "source_id,label,target,success,l2_norm,clean_left,clean_straight,clean_right,adv_left,adv_straight,adv_right";
pub const REGRESSION_SCORES_HEADER: &str = "source_id,y,mode,success,l2_norm,clean_prediction,adv_prediction,clean_mse,adv_mse";

/// Full-precision scores for evaluation. All records must be of one kind.
pub fn write_scores_csv(path: impl AsRef<Path>, records: &[AttackRecord], config: &AttackConfig) -> Result<()> {
    let regression = matches!(records.first().map(|r| r.kind), Some(JobKind::Regression { .. }));
    if records
        .iter()
        .any(|r| matches!(r.kind, JobKind::Regression { .. }) != regression)
    {
        return Err(Error::invalid("write_scores_csv", "mixed classification and regression records"));
    }
    let mut out = String::from(if regression {
        REGRESSION_SCORES_HEADER
    } else {
        CLASSIFICATION_SCORES_HEADER
    });
    out.push('\n');
    for r in records {
        let (truth, target) = r.truth_and_target(config.regression_mode.name());
        let res = &r.result;
        let _ = write!(out, "{},{truth},{target},{},{}", r.source_id, res.success, res.l2_norm);
        if regression {
            let _ = write!(
                out,
                ",{},{},{},{}",
                res.original_scores[0],
                res.adversarial_scores[0],
                opt(res.clean_residual),
                opt(res.adversarial_residual)
            );
        } else {
            for s in res.original_scores.iter().chain(&res.adversarial_scores) {
                let _ = write!(out, ",{s}");
            }
        }
        out.push('\n');
    }
    write_text(path.as_ref(), out)
}
