//! Reading the full-precision `scores.csv` written by attack runs.

use std::path::Path;

use crate::attack::{CLASSIFICATION_SCORES_HEADER, REGRESSION_SCORES_HEADER};
use crate::data::Direction;
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationScore {
    pub source_id: String,
    pub label: Direction,
    pub target: Direction,
    pub success: bool,
    pub l2_norm: f64,
    pub clean: [f64; NUM_CLASSES],
    pub adversarial: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionScore {
    pub source_id: String,
    pub y: f64,
    pub success: bool,
    pub l2_norm: f64,
    pub clean_prediction: f64,
    pub adversarial_prediction: f64,
    pub clean_mse: f64,
    pub adversarial_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreTable {
    Classification(Vec<ClassificationScore>),
    Regression(Vec<RegressionScore>),
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let bad = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let regression = match header {
        h if h == CLASSIFICATION_SCORES_HEADER => false,
        h if h == REGRESSION_SCORES_HEADER => true,
        other => return Err(bad(1, format!("unrecognized header {other:?}"))),
    };
    let width = header.split(',').count();
    let mut class_rows = Vec::new();
    let mut reg_rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let line_no = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(bad(line_no, format!("expected {width} fields, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .map_err(|_| bad(line_no, format!("invalid number {:?}", f[k])))
        };
        let flag = |k: usize| -> Result<bool> {
            f[k].parse::<bool>()
                .map_err(|_| bad(line_no, format!("invalid boolean {:?}", f[k])))
        };
        let class = |k: usize| -> Result<Direction> {
            Direction::parse(f[k]).ok_or_else(|| bad(line_no, format!("invalid class {:?}", f[k])))
        };
        if regression {
            reg_rows.push(RegressionScore {
                source_id: f[0].to_string(),
                y: num(1)?,
                success: flag(3)?,
                l2_norm: num(4)?,
                clean_prediction: num(5)?,
                adversarial_prediction: num(6)?,
                clean_mse: num(7)?,
                adversarial_mse: num(8)?,
            });
        } else {
            class_rows.push(ClassificationScore {
                source_id: f[0].to_string(),
                label: class(1)?,
                target: class(2)?,
                success: flag(3)?,
                l2_norm: num(4)?,
                clean: [num(5)?, num(6)?, num(7)?],
                adversarial: [num(8)?, num(9)?, num(10)?],
            });
        }
    }
    Ok(if regression {
        ScoreTable::Regression(reg_rows)
    } else {
        ScoreTable::Classification(class_rows)
    })
}

pub const CLEAN_SCORES_HEADER: &str = "source_id,label,left,straight,right";

/// Infer-mode class probabilities of one clean test image.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanScore {
    pub source_id: String,
    pub label: Direction,
    pub scores: [f64; NUM_CLASSES],
}

pub fn write_clean_scores_csv(path: impl AsRef<Path>, rows: &[CleanScore]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{CLEAN_SCORES_HEADER}\n");
    for r in rows {
        let [a, b, c] = r.scores;
        out.push_str(&format!("{},{},{a},{b},{c}\n", r.source_id, r.label));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_clean_scores_csv(path: impl AsRef<Path>) -> Result<Vec<CleanScore>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CLEAN_SCORES_HEADER) {
        return Err(bad(1, format!("header must be {CLEAN_SCORES_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let line_no = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line_no, format!("expected 5 fields, found {}", f.len())));
        }
        let label = Direction::parse(f[1]).ok_or_else(|| bad(line_no, format!("invalid class {:?}", f[1])))?;
        let mut scores = [0.0; NUM_CLASSES];
        for (s, v) in scores.iter_mut().zip(&f[2..]) {
            *s = v.parse().map_err(|_| bad(line_no, format!("invalid number {v:?}")))?;
        }
        rows.push(CleanScore {
            source_id: f[0].to_string(),
            label,
            scores,
        });
    }
    Ok(rows)
}
