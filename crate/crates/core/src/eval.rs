//! PSNR, center PSNR over the anchor placement, and filtered aggregation.

use std::fmt;

use thiserror::Error;

use crate::image::{resize_bilinear, Image, ImageError};
use crate::position::CropRegion;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("max value {0} must be positive")]
    InvalidMax(f64),
    #[error("cutoff {0} must be positive")]
    InvalidCutoff(f64),
    #[error("placement {region} lies outside a {height}x{width} image")]
    PlacementOutside { region: CropRegion, height: usize, width: usize },
    #[error("nothing left after filtering: {excluded_infinite} infinite, {excluded_cutoff} above cutoff")]
    EmptyAfterFilter { excluded_infinite: usize, excluded_cutoff: usize },
    #[error("resize failed: {0}")]
    Resize(String),
}

impl From<ImageError> for EvalError {
    fn from(e: ImageError) -> Self {
        EvalError::Resize(e.to_string())
    }
}

/// Peak value for images stored in [-1, 1].
pub const UNIT_RANGE_MAX: f64 = 2.0;
/// Peak value for 8-bit exports.
pub const EIGHT_BIT_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrResult {
    /// Decibels, or `f64::INFINITY` for identical inputs.
    pub value: f64,
    pub mse: f64,
    pub finite: bool,
}

impl PsnrResult {
    pub fn from_mse(mse: f64, max_value: f64) -> Self {
        if mse == 0.0 {
            Self { value: f64::INFINITY, mse, finite: false }
        } else {
            Self { value: 10.0 * (max_value * max_value / mse).log10(), mse, finite: true }
        }
    }
}

impl fmt::Display for PsnrResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.finite {
            write!(f, "{:.4}", self.value)
        } else {
            f.write_str("inf")
        }
    }
}

fn dims(i: &Image) -> (usize, usize, usize) {
    (i.height(), i.width(), i.channels())
}

fn check_max(max_value: f64) -> Result<(), EvalError> {
    if max_value > 0.0 && max_value.is_finite() {
        Ok(())
    } else {
        Err(EvalError::InvalidMax(max_value))
    }
}

fn psnr_values(x: impl Iterator<Item = f64>, y: impl Iterator<Item = f64>, max_value: f64) -> PsnrResult {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in x.zip(y) {
        sum += (a - b) * (a - b);
        n += 1;
    }
    PsnrResult::from_mse(if n == 0 { 0.0 } else { sum / n as f64 }, max_value)
}

/// MSE over every pixel and channel, expressed in decibels.
pub fn psnr(x: &Image, y: &Image, max_value: f64) -> Result<PsnrResult, EvalError> {
    check_max(max_value)?;
    if dims(x) != dims(y) {
        return Err(EvalError::ShapeMismatch { a: dims(x), b: dims(y) });
    }
    Ok(psnr_values(x.data().iter().map(|&v| v as f64), y.data().iter().map(|&v| v as f64), max_value))
}

/// PSNR after quantising both images to 8 bits, with peak 255.
pub fn psnr_8bit(x: &Image, y: &Image) -> Result<PsnrResult, EvalError> {
    if dims(x) != dims(y) {
        return Err(EvalError::ShapeMismatch { a: dims(x), b: dims(y) });
    }
    let (a, b) = (x.to_u8(), y.to_u8());
    Ok(psnr_values(a.iter().map(|&v| v as f64), b.iter().map(|&v| v as f64), EIGHT_BIT_MAX))
}

/// Pixel scale used by [`center_psnr`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsnrScale {
    /// Raw [-1, 1] values with the given peak.
    Unit(f64),
    /// Quantised to 8 bits, peak 255.
    EightBit,
}

impl fmt::Display for PsnrScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsnrScale::Unit(m) => write!(f, "unit (max {m})"),
            PsnrScale::EightBit => write!(f, "8-bit (max 255)"),
        }
    }
}

/// PSNR of the window `placement` of `generated` against `input` resized to
/// the window size.
pub fn center_psnr(generated: &Image, input: &Image, placement: &CropRegion, scale: PsnrScale) -> Result<PsnrResult, EvalError> {
    if !placement.fits_in(generated.height() as u32, generated.width() as u32) {
        return Err(EvalError::PlacementOutside { region: *placement, height: generated.height(), width: generated.width() });
    }
    let window = generated.crop(placement)?;
    let reference = resize_bilinear(&input.with_channels(generated.channels()), window.height(), window.width())?;
    match scale {
        PsnrScale::Unit(max) => psnr(&window, &reference, max),
        PsnrScale::EightBit => psnr_8bit(&window, &reference),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub included: usize,
    pub excluded_infinite: usize,
    pub excluded_cutoff: usize,
}

impl Summary {
    pub fn total(&self) -> usize {
        self.included + self.excluded_infinite + self.excluded_cutoff
    }
}

/// Mean of the finite values strictly below `cutoff`.
pub fn aggregate(results: &[PsnrResult], cutoff: f64) -> Result<Summary, EvalError> {
    if !(cutoff > 0.0) {
        return Err(EvalError::InvalidCutoff(cutoff));
    }
    let (mut sum, mut included, mut inf, mut cut) = (0.0, 0, 0, 0);
    for r in results {
        if !r.finite || !r.value.is_finite() {
            inf += 1;
        } else if r.value >= cutoff {
            cut += 1;
        } else {
            sum += r.value;
            included += 1;
        }
    }
    if included == 0 {
        return Err(EvalError::EmptyAfterFilter { excluded_infinite: inf, excluded_cutoff: cut });
    }
    Ok(Summary { mean: sum / included as f64, included, excluded_infinite: inf, excluded_cutoff: cut })
}

/// Default cutoff that drops effectively exact reconstructions.
pub const DEFAULT_CUTOFF: f64 = 1000.0;

/// Text report: one line per image, then a summary block.
pub fn format_report(rows: &[(String, PsnrResult)], summary: Result<Summary, EvalError>, scale: PsnrScale, cutoff: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("# center psnr, scale {scale}, cutoff {cutoff}\n"));
    out.push_str("# name psnr_db mse\n");
    for (name, r) in rows {
        out.push_str(&format!("{name} {r} {:.6e}\n", r.mse));
    }
    out.push_str("[summary]\n");
    out.push_str(&format!("n = {}\n", rows.len()));
    match summary {
        Ok(s) => {
            out.push_str(&format!("mean_db = {:.4}\n", s.mean));
            out.push_str(&format!("included = {}\n", s.included));
            out.push_str(&format!("excluded_infinite = {}\n", s.excluded_infinite));
            out.push_str(&format!("excluded_cutoff = {}\n", s.excluded_cutoff));
        }
        Err(e) => out.push_str(&format!("mean_db = unavailable ({e})\n")),
    }
    out.push_str("[fid_is]\nstatus = unavailable (needs a pretrained classifier)\n");
    out
}
