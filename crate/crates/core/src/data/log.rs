//! Steering-log CSV ingestion and dataset manifests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{preprocess, read_image, PreprocessConfig};
use super::{scale_angle, Sample};
use crate::error::{Error, Result};

/// Samples read from a steering log, plus the frames whose image was absent.
#[derive(Debug, Clone)]
pub struct LoadedLog {
    pub samples: Vec<Sample>,
    pub missing: Vec<String>,
}

impl LoadedLog {
    pub fn missing_count(&self) -> usize {
        self.missing.len()
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads `frame,angle` rows, loading each frame from `image_dir`.
///
/// Rows whose image file does not exist are skipped and listed in
/// [`LoadedLog::missing`]; any other failure aborts the load.
pub fn load_steering_log(
    csv_path: impl AsRef<Path>,
    image_dir: impl AsRef<Path>,
    config: &PreprocessConfig,
) -> Result<LoadedLog> {
    let csv_path = csv_path.as_ref();
    let image_dir = image_dir.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| parse_error(csv_path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_error(csv_path, 1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["frame", "angle"] {
        return Err(parse_error(csv_path, 1, "header must be \"frame,angle\""));
    }

    let mut rows: Vec<(String, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(csv_path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(parse_error(
                csv_path,
                line,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let frame = &record[0];
        if frame.is_empty() {
            return Err(parse_error(csv_path, line, "empty frame name"));
        }
        let angle: f64 = record[1]
            .parse()
            .ok()
            .filter(|a: &f64| a.is_finite())
            .ok_or_else(|| parse_error(csv_path, line, format!("invalid angle {:?}", &record[1])))?;
        rows.push((frame.to_string(), angle));
    }

    let (present, missing): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .map(|(frame, angle)| (image_dir.join(&frame), frame, angle))
        .partition(|(path, _, _): &(PathBuf, String, f64)| path.is_file());
    let missing: Vec<String> = missing.into_iter().map(|(_, f, _)| f).collect();
    if present.is_empty() {
        return Err(Error::invalid(
            "load_steering_log",
            format!("no usable rows in {} ({} missing images)", csv_path.display(), missing.len()),
        ));
    }

    let samples = present
        .into_par_iter()
        .map(|(path, frame, angle)| {
            let image = preprocess(&read_image(&path)?, config)?;
            Ok(Sample::new(image, scale_angle(angle), frame))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedLog { samples, missing })
}

/// Writes a `frame,angle` log with angles in raw (unscaled) units.
pub fn write_steering_log<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["frame", "angle"]).map_err(|e| csv_io(path, e))?;
    for (frame, angle) in rows {
        w.write_record([frame, &angle.to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `source_id,scaled_angle,label` for each sample.
pub fn write_manifest(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["source_id", "scaled_angle", "label"])
        .map_err(|e| csv_io(path, e))?;
    for s in samples {
        w.write_record([s.source_id.as_str(), &s.scaled_angle.to_string(), s.label.name()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid("csv", format!("{}: {other:?}", path.display())),
    }
}
