//! PPM/PNG I/O and the fixed affine map between 8-bit RGB and latents.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nmsa_core::LatentGrid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported image format (expected binary PPM or PNG)")]
    Unsupported,
    #[error("corrupt PPM: {0}")]
    CorruptPpm(String),
    #[error("corrupt PNG: {0}")]
    Png(String),
    #[error("image has zero size")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension, if any.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "ppm" => Some(Self::Ppm),
            "png" => Some(Self::Png),
            _ => None,
        }
    }
}

impl FromStr for ImageFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ppm" => Ok(Self::Ppm),
            "png" => Ok(Self::Png),
            other => Err(format!("unknown image format `{other}`")),
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ppm => "ppm",
            Self::Png => "png",
        })
    }
}

/// 8-bit RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "RGB buffer size");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width * factor, self.height * factor);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                pixels.extend(self.pixel(x / factor, y / factor));
            }
        }
        Self::new(w, h, pixels)
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Binary PPM with optional `#` comments in the header. Max values below
/// 255 are rescaled to 8 bits.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let corrupt = |m: &str| ImageError::CorruptPpm(m.to_string());
    if !bytes.starts_with(b"P6") {
        return Err(ImageError::Unsupported);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("expected a number in the header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing whitespace after max value"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::Empty);
    }
    if !(1..=255).contains(&maxval) {
        return Err(corrupt("only 8-bit samples are supported"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| corrupt("dimensions overflow"))?;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| corrupt("pixel data truncated"))?;
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((u32::from(v.min(maxval as u8)) * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    Ok(RgbImage::new(width, height, pixels))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or(ImageError::Empty)?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?
        .to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(ImageError::Empty);
    }
    Ok(RgbImage::new(
        img.width() as usize,
        img.height() as usize,
        img.into_raw(),
    ))
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Decode by content, not by extension.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(ImageError::Unsupported)
    }
}

pub fn is_image(bytes: &[u8]) -> bool {
    bytes.starts_with(b"P6") || bytes.starts_with(&PNG_SIGNATURE)
}

pub fn read_image(path: &Path) -> Result<RgbImage, ImageError> {
    decode_image(&std::fs::read(path)?)
}

/// Write via a temporary file in the destination directory, then rename,
/// so a failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_image(img: &RgbImage, path: &Path, format: ImageFormat) -> Result<(), ImageError> {
    let bytes = match format {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img)?,
    };
    Ok(write_atomic(path, &bytes)?)
}

/// `(src index, weight)` pairs for each of `dst` cells covering `src` cells
/// by exact interval overlap.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = hi.min((s + 1) as f64) - lo.max(s as f64);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Pixel value in `[0, 255]` to latent `[-1, 1]`.
pub fn pixel_to_latent(p: f64) -> f64 {
    p / 127.5 - 1.0
}

/// Latent value to byte: `(v + 1)·127.5`, rounded half up, clamped.
pub fn latent_to_byte(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((f64::from(v) + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Box-average `img` onto a `height × width` grid and map it to a latent
/// with `channels` channels: RGB fill the first three, any further channels
/// carry luminance.
pub fn image_to_latent(
    img: &RgbImage,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<LatentGrid, ImageError> {
    if img.width == 0 || img.height == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(ImageError::Empty);
    }
    let wy = box_weights(img.height, height);
    let wx = box_weights(img.width, width);
    let mut data = Vec::with_capacity(height * width * channels);
    for row in &wy {
        for col in &wx {
            let mut rgb = [0f64; 3];
            for &(sy, a) in row {
                for &(sx, b) in col {
                    let p = img.pixel(sx, sy);
                    for (acc, v) in rgb.iter_mut().zip(p) {
                        *acc += a * b * f64::from(v);
                    }
                }
            }
            let lat = rgb.map(pixel_to_latent);
            let luma = 0.299 * lat[0] + 0.587 * lat[1] + 0.114 * lat[2];
            data.extend((0..channels).map(|c| lat.get(c).copied().unwrap_or(luma) as f32));
        }
    }
    LatentGrid::new(height, width, channels, data).map_err(|_| ImageError::Empty)
}

pub fn load_style_image(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<LatentGrid, ImageError> {
    image_to_latent(&read_image(path)?, height, width, channels)
}

/// Inverse of the pixel map on the first three channels. With fewer than
/// three channels the missing ones repeat channel 0.
pub fn decode_latent(z: &LatentGrid) -> RgbImage {
    let (h, w, c) = z.dims();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let ch = if k < c { k } else { 0 };
                pixels.push(latent_to_byte(z.get(y, x, ch)));
            }
        }
    }
    RgbImage::new(w, h, pixels)
}

/// Three-channel grid with values in `[0, 1]` to bytes.
pub fn unit_grid_to_image(g: &LatentGrid) -> RgbImage {
    let (h, w, c) = g.dims();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v = if k < c { g.get(y, x, k) } else { 0.0 };
                pixels.push((f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage::new(w, h, pixels)
}
