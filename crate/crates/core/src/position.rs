//! Crop-pair geometry and relative positional embeddings.
//!
//! A training example is a pair of crops (anchor, target) of one source
//! image. Every target patch is located in units of anchor patches, which
//! gives a per-axis arithmetic progression ([`RelativeGrid`]). The grid is
//! then lifted to a sin/cos embedding that the denoiser uses as its
//! cross-attention query.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

/// Default base of the sinusoid frequencies.
pub const DEFAULT_FREQ_BASE: f64 = 10_000.0;

/// Rejection-sampling budget for [`sample_crop_pair`].
pub const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PositionError {
    #[error("crop region must have positive size, got {height}x{width}")]
    EmptyRegion { height: u32, width: u32 },
    #[error("invalid range ({lo}, {hi}): {reason}")]
    InvalidRange { lo: f64, hi: f64, reason: &'static str },
    #[error("image {height}x{width} is too small for a crop at scale {scale}")]
    UnsatisfiableCrop { height: u32, width: u32, scale: f64 },
    #[error("embedding dimension {0} is not a positive multiple of 4")]
    InvalidDimension(usize),
    #[error("learnable embedding requested without weights")]
    MissingParams,
    #[error("learnable map produces dimension {got}, expected {expected}")]
    ParamShape { expected: usize, got: usize },
    #[error("outpaint multiple {0} must be a finite real >= 1")]
    InvalidMultiple(f64),
    #[error("output side {0} must be at least 2")]
    InvalidOutputSide(u32),
    #[error("anchor side rounds to {0} pixels")]
    DegenerateAnchor(i64),
    #[error("patch grid size must be >= 1")]
    EmptyGrid,
    #[error("cannot parse region {0:?}: expected top,left,height,width")]
    ParseRegion(String),
}

/// Integer rectangle in pixel coordinates: (top, left, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRegion {
    top: u32,
    left: u32,
    height: u32,
    width: u32,
}

impl CropRegion {
    pub fn new(top: u32, left: u32, height: u32, width: u32) -> Result<Self, PositionError> {
        if height == 0 || width == 0 {
            return Err(PositionError::EmptyRegion { height, width });
        }
        Ok(Self { top, left, height, width })
    }

    /// The whole `height`x`width` frame.
    pub fn full(height: u32, width: u32) -> Result<Self, PositionError> {
        Self::new(0, 0, height, width)
    }

    pub fn top(&self) -> u32 {
        self.top
    }

    pub fn left(&self) -> u32 {
        self.left
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn area(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    /// True when the region lies inside a `height`x`width` image.
    pub fn fits_in(&self, height: u32, width: u32) -> bool {
        self.top as u64 + self.height as u64 <= height as u64
            && self.left as u64 + self.width as u64 <= width as u64
    }

    /// Shifts the region; `None` if a coordinate would leave `u32`.
    pub fn translated(&self, dtop: i64, dleft: i64) -> Option<Self> {
        let top = u32::try_from(self.top as i64 + dtop).ok()?;
        let left = u32::try_from(self.left as i64 + dleft).ok()?;
        Some(Self { top, left, ..*self })
    }
}

impl fmt::Display for CropRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.top, self.left, self.height, self.width)
    }
}

impl FromStr for CropRegion {
    type Err = PositionError;

    /// Parses `top,left,height,width`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PositionError::ParseRegion(s.to_string());
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match parts.as_slice() {
            &[top, left, height, width] => Self::new(top, left, height, width),
            _ => Err(bad()),
        }
    }
}

/// Closed interval `[lo, hi]` used for crop scales and aspect ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self) -> Result<(), PositionError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(PositionError::InvalidRange { lo: self.lo, hi: self.hi, reason: "not finite" });
        }
        if self.lo > self.hi {
            return Err(PositionError::InvalidRange { lo: self.lo, hi: self.hi, reason: "lo > hi" });
        }
        Ok(())
    }

    pub(crate) fn check_scale(&self) -> Result<(), PositionError> {
        self.check()?;
        if self.lo <= 0.0 || self.hi > 1.0 {
            return Err(PositionError::InvalidRange {
                lo: self.lo,
                hi: self.hi,
                reason: "scale must lie in (0, 1]",
            });
        }
        Ok(())
    }

    pub(crate) fn check_aspect(&self) -> Result<(), PositionError> {
        self.check()?;
        if self.lo <= 0.0 {
            return Err(PositionError::InvalidRange {
                lo: self.lo,
                hi: self.hi,
                reason: "aspect ratio must be positive",
            });
        }
        Ok(())
    }
}

/// Default aspect-ratio range for crop sampling.
pub const DEFAULT_ASPECT: Range = Range::new(3.0 / 4.0, 4.0 / 3.0);

/// Result of [`sample_crop_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPair {
    pub anchor: CropRegion,
    pub target: CropRegion,
    /// How many of the two crops fell back to the deterministic center crop.
    pub fallbacks: u8,
}

/// One random-resized-crop draw. Returns the region and whether the
/// center-crop fallback was used.
pub fn sample_crop<R: Rng + ?Sized>(
    height: u32,
    width: u32,
    scale: Range,
    aspect: Range,
    rng: &mut R,
) -> Result<(CropRegion, bool), PositionError> {
    scale.check_scale()?;
    aspect.check_aspect()?;
    let area = height as f64 * width as f64;
    let min_area = (scale.lo * area).ceil();
    let max_area = (scale.hi * area).floor();
    if height == 0 || width == 0 || min_area > max_area {
        return Err(PositionError::UnsatisfiableCrop { height, width, scale: scale.lo });
    }
    let (log_lo, log_hi) = (aspect.lo.ln(), aspect.hi.ln());

    for _ in 0..CROP_ATTEMPTS {
        let target_area = area * rng.gen_range(scale.lo..=scale.hi);
        let ratio = if log_lo < log_hi { rng.gen_range(log_lo..=log_hi).exp() } else { aspect.lo };
        let w = (target_area * ratio).sqrt().round();
        let h = (target_area / ratio).sqrt().round();
        if w < 1.0 || h < 1.0 || w > width as f64 || h > height as f64 {
            continue;
        }
        let got = w * h;
        if got < min_area || got > max_area {
            continue;
        }
        // Aspect ratio must be reachable within half a pixel of rounding.
        if (w + 0.5) / (h - 0.5).max(0.5) < aspect.lo || (w - 0.5) / (h + 0.5) > aspect.hi {
            continue;
        }
        let (h, w) = (h as u32, w as u32);
        let top = rng.gen_range(0..=height - h);
        let left = rng.gen_range(0..=width - w);
        return Ok((CropRegion::new(top, left, h, w)?, false));
    }

    // Center crop at the lower scale with the image's own aspect ratio.
    let k = scale.lo.sqrt();
    let h = ((height as f64 * k).ceil() as u32).clamp(1, height);
    let w = ((width as f64 * k).ceil() as u32).clamp(1, width);
    let region = CropRegion::new((height - h) / 2, (width - w) / 2, h, w)?;
    Ok((region, true))
}

/// Draws two independent crops of an `height`x`width` image.
pub fn sample_crop_pair<R: Rng + ?Sized>(
    height: u32,
    width: u32,
    anchor_scale: Range,
    target_scale: Range,
    aspect: Range,
    rng: &mut R,
) -> Result<CropPair, PositionError> {
    let (anchor, fa) = sample_crop(height, width, anchor_scale, aspect, rng)?;
    let (target, ft) = sample_crop(height, width, target_scale, aspect, rng)?;
    Ok(CropPair { anchor, target, fallbacks: fa as u8 + ft as u8 })
}

/// Target patch coordinates in anchor-patch units, one progression per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeGrid {
    pub anchor_grid: usize,
    pub target_grid: usize,
    pub h_bias: f64,
    pub h_scale: f64,
    pub w_bias: f64,
    pub w_scale: f64,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

impl RelativeGrid {
    /// Number of target patches (`K_t^2`).
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(row, col)` coordinate of every target patch.
    pub fn coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    /// `L x 2` matrix of `(row, col)` pairs in patch order.
    pub fn coord_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), 2));
        for (i, (r, c)) in self.coords().enumerate() {
            out[[i, 0]] = r;
            out[[i, 1]] = c;
        }
        out
    }

    /// The integer lattice `0..k` on both axes (anchor relative to itself).
    pub fn identity(k: usize) -> Self {
        let lattice: Vec<f64> = (0..k).map(|i| i as f64).collect();
        Self {
            anchor_grid: k,
            target_grid: k,
            h_bias: 0.0,
            h_scale: 1.0,
            w_bias: 0.0,
            w_scale: 1.0,
            rows: lattice.clone(),
            cols: lattice,
        }
    }
}

/// Locates each target patch's top-left corner in anchor-patch units.
pub fn relative_grid(
    anchor: &CropRegion,
    target: &CropRegion,
    anchor_grid: usize,
    target_grid: usize,
) -> Result<RelativeGrid, PositionError> {
    if anchor_grid == 0 || target_grid == 0 {
        return Err(PositionError::EmptyGrid);
    }
    let ka = anchor_grid as f64;
    let kt = target_grid as f64;
    let axis = |t_off: u32, a_off: u32, t_len: u32, a_len: u32| {
        let bias = ka * (t_off as f64 - a_off as f64) / a_len as f64;
        let scale = (t_len as f64 * ka) / (kt * a_len as f64);
        let values = (0..target_grid).map(|i| bias + i as f64 * scale).collect::<Vec<_>>();
        (bias, scale, values)
    };
    let (h_bias, h_scale, rows) = axis(target.top, anchor.top, target.height, anchor.height);
    let (w_bias, w_scale, cols) = axis(target.left, anchor.left, target.width, anchor.width);
    Ok(RelativeGrid { anchor_grid, target_grid, h_bias, h_scale, w_bias, w_scale, rows, cols })
}

/// `L x D` embedding matrix, one row per target patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbedding(pub Array2<f64>);

impl PosEmbedding {
    pub fn zeros(len: usize, dim: usize) -> Self {
        Self(Array2::zeros((len, dim)))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Writes the banked `[sin(v w_0..), cos(v w_0..)]` encoding of `value`
/// into `out`, whose length is the number of features for this axis.
pub fn sincos_axis(value: f64, base: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    let axis_dim = out.len() as f64;
    for k in 0..half {
        let omega = 1.0 / base.powf(2.0 * k as f64 / axis_dim);
        let (s, c) = (value * omega).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
}

/// Fixed sin/cos embedding of a grid: row-axis half, then column-axis half.
pub fn sincos_embed(grid: &RelativeGrid, dim: usize, base: f64) -> Result<PosEmbedding, PositionError> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(PositionError::InvalidDimension(dim));
    }
    let half = dim / 2;
    let mut out = Array2::zeros((grid.len(), dim));
    let mut row_bank = vec![0.0; half];
    for (i, (r, c)) in grid.coords().enumerate() {
        let mut row = out.row_mut(i);
        let row = row.as_slice_mut().expect("standard layout");
        sincos_axis(r, base, &mut row_bank);
        row[..half].copy_from_slice(&row_bank);
        sincos_axis(c, base, &mut row[half..]);
    }
    Ok(PosEmbedding(out))
}

/// Positional-embedding variant used to build the cross-attention query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbedVariant {
    None,
    Learnable,
    SinCos,
}

impl fmt::Display for EmbedVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedVariant::None => "none",
            EmbedVariant::Learnable => "learnable",
            EmbedVariant::SinCos => "sincos",
        })
    }
}

impl FromStr for EmbedVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "learnable" => Ok(Self::Learnable),
            "sincos" => Ok(Self::SinCos),
            other => Err(format!("unknown embedding variant {other:?}")),
        }
    }
}

/// Two affine maps with a GELU between them, `(row, col) -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableMap {
    /// `2 x H`
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    /// `H x D`
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
}

impl LearnableMap {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w1: Array2::zeros((2, hidden)),
            b1: vec![0.0; hidden],
            w2: Array2::zeros((hidden, dim)),
            b2: vec![0.0; dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn apply(&self, grid: &RelativeGrid) -> PosEmbedding {
        let coords = grid.coord_matrix();
        let mut hidden = coords.dot(&self.w1);
        for mut row in hidden.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v = crate::model::layers::gelu_scalar(*v + b);
            }
        }
        let mut out = hidden.dot(&self.w2);
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        PosEmbedding(out)
    }
}

/// Builds the query embedding for `variant`.
pub fn embed_variant(
    grid: &RelativeGrid,
    variant: EmbedVariant,
    dim: usize,
    params: Option<&LearnableMap>,
) -> Result<PosEmbedding, PositionError> {
    match variant {
        EmbedVariant::None => Ok(PosEmbedding::zeros(grid.len(), dim)),
        EmbedVariant::SinCos => sincos_embed(grid, dim, DEFAULT_FREQ_BASE),
        EmbedVariant::Learnable => {
            let map = params.ok_or(PositionError::MissingParams)?;
            if map.out_dim() != dim {
                return Err(PositionError::ParamShape { expected: dim, got: map.out_dim() });
            }
            Ok(map.apply(grid))
        }
    }
}

/// Positional relation between the conditioning view and the output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutpaintMode {
    /// Centered outpainting: the output has `multiple` times the input area.
    Multiple { multiple: f64, output_side: u32 },
    /// Arbitrary placement; both regions share one pixel frame.
    Explicit { anchor: CropRegion, target: CropRegion },
}

/// Resolves a mode into `(anchor, target)` regions.
pub fn mode_to_regions(mode: &OutpaintMode) -> Result<(CropRegion, CropRegion), PositionError> {
    match *mode {
        OutpaintMode::Explicit { anchor, target } => Ok((anchor, target)),
        OutpaintMode::Multiple { multiple, output_side } => {
            if !multiple.is_finite() || multiple < 1.0 {
                return Err(PositionError::InvalidMultiple(multiple));
            }
            if output_side < 2 {
                return Err(PositionError::InvalidOutputSide(output_side));
            }
            // round half up
            let side = (output_side as f64 / multiple.sqrt() + 0.5).floor() as i64;
            if side < 1 {
                return Err(PositionError::DegenerateAnchor(side));
            }
            let side = side.min(output_side as i64) as u32;
            let offset = (output_side - side) / 2;
            Ok((
                CropRegion::new(offset, offset, side, side)?,
                CropRegion::full(output_side, output_side)?,
            ))
        }
    }
}
