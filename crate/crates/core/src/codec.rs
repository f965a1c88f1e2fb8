//! Invertible patch codec: image <-> `L x C` patch sequence.
//!
//! Stands in for a learned latent autoencoder. Patch `(m, n)` becomes row
//! `m * K + n`; inside a row the layout is channel-major, then row-major
//! over the patch pixels.

use ndarray::Array2;
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("patch side {patch} does not divide image side {image}")]
    Indivisible { image: usize, patch: usize },
    #[error("codec sizes must be positive")]
    Empty,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

/// `L x C` matrix of flattened patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence(pub Array2<f64>);

impl PatchSequence {
    pub fn zeros(len: usize, width: usize) -> Self {
        Self(Array2::zeros((len, width)))
    }

    pub fn from_vec(len: usize, width: usize, values: Vec<f64>) -> Option<Self> {
        Array2::from_shape_vec((len, width), values).ok().map(Self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCodec {
    image_side: usize,
    patch_side: usize,
    channels: usize,
}

impl PatchCodec {
    pub fn new(image_side: usize, patch_side: usize, channels: usize) -> Result<Self, CodecError> {
        if image_side == 0 || patch_side == 0 || channels == 0 {
            return Err(CodecError::Empty);
        }
        if !image_side.is_multiple_of(patch_side) {
            return Err(CodecError::Indivisible { image: image_side, patch: patch_side });
        }
        Ok(Self { image_side, patch_side, channels })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Patches per side (`K`).
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Sequence length `L = K^2`.
    pub fn len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row width `C = channels * patch^2`.
    pub fn width(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    fn check_image(&self, height: usize, width: usize, channels: usize) -> Result<(), CodecError> {
        if height != self.image_side || width != self.image_side || channels != self.channels {
            return Err(CodecError::ShapeMismatch {
                expected: format!("{0}x{0}x{1}", self.image_side, self.channels),
                got: format!("{height}x{width}x{channels}"),
            });
        }
        Ok(())
    }

    /// Index of pixel `(y, x, c)` as `(row, column)` of the sequence.
    #[inline]
    pub fn locate(&self, y: usize, x: usize, c: usize) -> (usize, usize) {
        let p = self.patch_side;
        let row = (y / p) * self.grid() + x / p;
        let col = c * p * p + (y % p) * p + x % p;
        (row, col)
    }

    /// Flat HWC slice -> sequence.
    pub fn encode_slice<T: Copy + Into<f64>>(&self, hwc: &[T]) -> PatchSequence {
        let side = self.image_side;
        let ch = self.channels;
        assert_eq!(hwc.len(), side * side * ch);
        let mut out = Array2::zeros((self.len(), self.width()));
        for y in 0..side {
            for x in 0..side {
                for c in 0..ch {
                    let (r, k) = self.locate(y, x, c);
                    out[[r, k]] = hwc[(y * side + x) * ch + c].into();
                }
            }
        }
        PatchSequence(out)
    }

    pub fn encode(&self, image: &Image) -> Result<PatchSequence, CodecError> {
        self.check_image(image.height(), image.width(), image.channels())?;
        Ok(self.encode_slice(image.data()))
    }

    /// Sequence -> flat HWC values.
    pub fn decode_to_vec(&self, seq: &Array2<f64>) -> Vec<f64> {
        let side = self.image_side;
        let ch = self.channels;
        let mut out = vec![0.0; side * side * ch];
        for y in 0..side {
            for x in 0..side {
                for c in 0..ch {
                    let (r, k) = self.locate(y, x, c);
                    out[(y * side + x) * ch + c] = seq[[r, k]];
                }
            }
        }
        out
    }

    pub fn decode(&self, seq: &PatchSequence) -> Result<Image, CodecError> {
        if seq.shape() != (self.len(), self.width()) {
            return Err(CodecError::ShapeMismatch {
                expected: format!("{}x{}", self.len(), self.width()),
                got: format!("{}x{}", seq.len(), seq.width()),
            });
        }
        let data = self.decode_to_vec(seq.values()).into_iter().map(|v| v as f32).collect();
        Ok(Image::from_vec(self.image_side, self.image_side, self.channels, data)
            .expect("codec shape is consistent"))
    }
}
