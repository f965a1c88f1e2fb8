//! Training and evaluation images: folder ingestion and a seeded synthetic
//! set whose crops reveal their own location.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{read_image, resize_bilinear, Image, ImageError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no supported images in {0}")]
    EmptyFolder(PathBuf),
    #[error("cannot decode {file}: {source}")]
    DecodeFailure { file: PathBuf, source: ImageError },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("resolution {0} is below the minimum of 16")]
    Resolution(usize),
    #[error("dataset is empty")]
    Empty,
}

/// Raster extensions picked up by [`load_folder`].
pub const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Peak amplitude of the smooth noise in the shape channel.
    pub noise_amplitude: f32,
    pub min_shapes: u32,
    pub max_shapes: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { noise_amplitude: 0.05, min_shapes: 2, max_shapes: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Folder(PathBuf),
    Synthetic { spec: SynthSpec, count: usize, seed: u64 },
}

/// Fixed list of images, all `resolution x resolution`, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    source: Source,
    resolution: usize,
    names: Vec<String>,
    items: Vec<Image>,
}

impl Dataset {
    pub fn synthetic(spec: SynthSpec, count: usize, seed: u64, resolution: usize) -> Result<Self, DataError> {
        if resolution < 16 {
            return Err(DataError::Resolution(resolution));
        }
        if count == 0 {
            return Err(DataError::Empty);
        }
        let items = (0..count).map(|i| synth_image(&spec, i as u64, seed, resolution)).collect();
        let names = (0..count).map(|i| format!("synth_{i:05}")).collect();
        Ok(Self { source: Source::Synthetic { spec, count, seed }, resolution, names, items })
    }

    pub fn from_images(names: Vec<String>, items: Vec<Image>, resolution: usize) -> Result<Self, DataError> {
        if items.is_empty() || names.len() != items.len() {
            return Err(DataError::Empty);
        }
        Ok(Self { source: Source::Folder(PathBuf::new()), resolution, names, items })
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Image> {
        self.items.get(i)
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.names.get(i).map(String::as_str)
    }

    pub fn images(&self) -> &[Image] {
        &self.items
    }
}

fn is_supported(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Sorted list of supported raster files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && is_supported(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every supported image in `dir` (sorted by file name), resized to
/// `resolution` square with `channels` planes.
pub fn load_folder(dir: &Path, resolution: usize, channels: usize) -> Result<Dataset, DataError> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(DataError::EmptyFolder(dir.to_path_buf()));
    }
    let mut items = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    for file in files {
        let fail = |source| DataError::DecodeFailure { file: file.clone(), source };
        let img = read_image(&file).map_err(fail)?;
        let img = resize_bilinear(&img.with_channels(channels), resolution, resolution).map_err(fail)?;
        names.push(file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        items.push(img);
    }
    Ok(Dataset { source: Source::Folder(dir.to_path_buf()), resolution, names, items })
}

/// Deterministic three-channel image.
///
/// Channel 0 ramps with the row and channel 1 with the column, so the mean
/// of either over any crop is an affine function of the crop center. Channel
/// 2 holds the rectangles and discs plus smooth value noise.
pub fn synth_image(spec: &SynthSpec, index: u64, seed: u64, resolution: usize) -> Image {
    let n = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut img = Image::zeros(n, n, 3);
    let ramp = |i: usize| -0.9 + 1.8 * i as f32 / (n - 1) as f32;

    const LATTICE: usize = 5;
    let lattice: Vec<f32> = (0..LATTICE * LATTICE).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let noise = |y: usize, x: usize| {
        let fy = y as f32 / (n - 1) as f32 * (LATTICE - 1) as f32;
        let fx = x as f32 / (n - 1) as f32 * (LATTICE - 1) as f32;
        let (y0, x0) = ((fy as usize).min(LATTICE - 2), (fx as usize).min(LATTICE - 2));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let at = |r: usize, c: usize| lattice[r * LATTICE + c];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    let lo = spec.min_shapes.min(spec.max_shapes);
    let count = rng.gen_range(lo..=spec.max_shapes.max(lo));
    let shapes: Vec<(bool, f32, f32, f32, f32, f32)> = (0..count)
        .map(|_| {
            let disc = rng.gen_bool(0.5);
            let cy = rng.gen_range(0.0..n as f32);
            let cx = rng.gen_range(0.0..n as f32);
            let ry = rng.gen_range(0.08..0.25) * n as f32;
            let rx = rng.gen_range(0.08..0.25) * n as f32;
            let level = rng.gen_range(-0.8f32..0.8);
            (disc, cy, cx, ry, rx, level)
        })
        .collect();

    for y in 0..n {
        for x in 0..n {
            img.set(y, x, 0, ramp(y));
            img.set(y, x, 1, ramp(x));
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut v = 0.0;
            for &(disc, cy, cx, ry, rx, level) in &shapes {
                let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    v = level;
                }
            }
            img.set(y, x, 2, (v + spec.noise_amplitude * noise(y, x)).clamp(-1.0, 1.0));
        }
    }
    img
}
