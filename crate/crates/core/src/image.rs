//! Float images (HWC, values nominally in [-1, 1]) and raster I/O.

use std::fs;
use std::io::{self, BufWriter};
use std::path::Path;

use thiserror::Error;

use crate::position::CropRegion;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image size {height}x{width}x{channels}")]
    InvalidSize { height: usize, width: usize, channels: usize },
    #[error("buffer holds {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("crop {region} does not fit in a {height}x{width} image")]
    CropOutOfBounds { region: CropRegion, height: usize, width: usize },
    #[error("cannot decode {format}: {reason}")]
    Decode { format: &'static str, reason: String },
    #[error("unsupported raster format")]
    UnknownFormat,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImageError::InvalidSize { height, width, channels });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::BufferSize { expected, got: data.len() });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, region: &CropRegion) -> Result<Image, ImageError> {
        if !region.fits_in(self.height as u32, self.width as u32) {
            return Err(ImageError::CropOutOfBounds { region: *region, height: self.height, width: self.width });
        }
        let (h, w) = (region.height() as usize, region.width() as usize);
        let (top, left) = (region.top() as usize, region.left() as usize);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in top..top + h {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Image { height: h, width: w, channels: self.channels, data })
    }

    /// Clamps into [-1, 1]; returns how many values were changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut changed = 0;
        for v in &mut self.data {
            let c = v.clamp(-1.0, 1.0);
            if c != *v {
                changed += 1;
                *v = c;
            }
        }
        changed
    }

    /// Replicates or drops channels so the image has `channels` planes.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let mut out = Image::zeros(self.height, self.width, channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..channels {
                    out.set(y, x, c, self.get(y, x, c.min(self.channels - 1)));
                }
            }
        }
        out
    }

    /// 8-bit samples -> [-1, 1].
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_vec(height, width, channels, bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect())
    }

    /// [-1, 1] -> 8-bit samples (clamped, rounded).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect()
    }
}

/// Separable bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidSize { height: out_h, width: out_w, channels: image.channels });
    }
    if out_h == image.height && out_w == image.width {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, image.height);
    let xs = taps(out_w, image.width);
    let ch = image.channels;
    let mut out = Image::zeros(out_h, out_w, ch);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
                let bot = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
                out.set(oy, ox, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// Crop then resize, the way training views are produced.
pub fn resized_crop(image: &Image, region: &CropRegion, side: usize) -> Result<Image, ImageError> {
    resize_bilinear(&image.crop(region)?, side, side)
}

/// Decodes a binary PPM (P6, maxval <= 255) or PGM (P5) buffer.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let err = |reason: &str| ImageError::Decode { format: "pnm", reason: reason.to_string() };
    let mut pos = 0usize;
    let mut token = || -> Result<String, ImageError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(err("bad magic")),
    };
    let mut num = |what: &str| -> Result<usize, ImageError> {
        token()?.parse::<usize>().map_err(|_| err(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(err("unsupported dimensions"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err("only 8-bit maxval is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| err("truncated raster"))?;
    let scale = 2.0 / maxval as f32;
    let data = raster.iter().map(|&b| (b.min(maxval as u8)) as f32 * scale - 1.0).collect();
    Image::from_vec(height, width, channels, data)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let img = image.with_channels(3);
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Decodes an 8-bit grayscale, gray+alpha, RGB or RGBA PNG; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let err = |reason: String| ImageError::Decode { format: "png", reason };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let (w, h) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    if w == 0 || h == 0 || w > 1 << 15 || h > 1 << 15 {
        return Err(err(format!("unsupported dimensions {w}x{h}")));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let buf = &buf[..frame.buffer_size()];
    let (stride, keep) = match frame.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(err("palette not expanded".into())),
    };
    let bytes: Vec<u8> = buf.chunks_exact(stride).flat_map(|px| px[..keep].to_vec()).collect();
    Image::from_u8(h, w, keep, &bytes)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>, ImageError> {
    let (color, img) = match image.channels {
        1 => (png::ColorType::Grayscale, image.clone()),
        _ => (png::ColorType::Rgb, image.with_channels(3)),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(io::Error::other)?;
        writer.write_image_data(&img.to_u8()).map_err(io::Error::other)?;
    }
    Ok(out)
}

/// Sniffs the format from magic bytes.
pub fn decode_raster(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes)
    } else {
        Err(ImageError::UnknownFormat)
    }
}

pub fn read_image(path: &Path) -> Result<Image, ImageError> {
    decode_raster(&fs::read(path)?)
}

/// Writes PNG, or PPM when the extension is `.ppm`.
pub fn write_image(path: &Path, image: &Image) -> Result<(), ImageError> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(image),
        _ => encode_png(image)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}
