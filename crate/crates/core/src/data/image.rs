//! 8-bit RGB images: binary PPM codec, bilinear resizing and the
//! crop/resize/normalize preprocessing chain.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::invalid(
                "image",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    /// The bottom `rows` rows.
    pub fn crop_bottom(&self, rows: usize) -> Result<Self> {
        if rows == 0 || rows > self.height {
            return Err(Error::invalid(
                "crop",
                format!("cannot keep {rows} rows of a {}-row image", self.height),
            ));
        }
        let start = (self.height - rows) * self.width * 3;
        Ok(Self {
            width: self.width,
            height: rows,
            pixels: self.pixels[start..].to_vec(),
        })
    }
}

fn ppm_error(message: impl Into<String>) -> Error {
    Error::Image {
        path: "<ppm>".into(),
        message: message.into(),
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ppm_error("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ppm_error(format!("invalid {field}")))
}

fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(ppm_error("only binary P6 PPM is supported"));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ppm_error(format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(ppm_error(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    RgbImage::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Decodes an image file's bytes. Binary PPM (P6, maxval 255) is supported.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    match bytes {
        [b'P', b'6', ..] => decode_ppm(bytes),
        [0x89, b'P', b'N', b'G', ..] => Err(ppm_error("PNG input is not supported; convert to P6 PPM")),
        _ => Err(ppm_error("unrecognized image format")),
    }
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Image { message, .. } => Error::Image {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

/// Quantizes an `H×W×3` tensor in `[0, 1]` to 8 bits (round to nearest).
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let [h, w, 3] = t.shape() else {
        return Err(Error::invalid("tensor_to_image", format!("expected HxWx3, got {:?}", t.shape())));
    };
    let pixels = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::new(*w, *h, pixels)
}

/// Bilinear resize with half-pixel centres: destination pixel `d` samples
/// source coordinate `(d + 0.5)·in/out − 0.5`, clamped to the image.
/// Returns interleaved RGB values in byte units.
pub fn bilinear_resize(image: &RgbImage, height: usize, width: usize) -> Vec<f64> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(height, image.height);
    let cols = axis(width, image.width);
    let px = |y: usize, x: usize, c: usize| image.pixels[(y * image.width + x) * 3 + c] as f64;
    let mut out = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    /// Keep only this many bottom rows (the road); `None` disables cropping.
    pub keep_rows: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            keep_rows: Some(280),
            height: 128,
            width: 128,
        }
    }
}

/// Crop to the bottom rows, resize, and scale bytes into `[0, 1]`.
pub fn preprocess(raw: &RgbImage, config: &PreprocessConfig) -> Result<Tensor<f32>> {
    let cropped;
    let source = match config.keep_rows {
        Some(rows) => {
            if raw.height < rows {
                return Err(Error::invalid(
                    "preprocess",
                    format!("image has {} rows, at least {rows} required", raw.height),
                ));
            }
            cropped = raw.crop_bottom(rows)?;
            &cropped
        }
        None => raw,
    };
    let data: Vec<f32> = if source.height == config.height && source.width == config.width {
        source.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        bilinear_resize(source, config.height, config.width)
            .into_iter()
            .map(|v| ((v / 255.0) as f32).clamp(0.0, 1.0))
            .collect()
    };
    Tensor::new(&[config.height, config.width, 3], data)
}
