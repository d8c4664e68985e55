//! Raster containers and integer crop/translation geometry.
//!
//! Two translation models are supported. A *realistic* translation moves a
//! view window across a larger source, so content leaves one edge and new
//! content enters on the other. A *cyclic* translation wraps the image around
//! a torus. In both modes a translation `(dx, dy)` moves the window, so the
//! content inside it appears to move by `(-dx, -dy)`.

use std::fmt;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on decoded sample count (1 Gi samples).
const MAX_SAMPLES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Realistic,
    Cyclic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Realistic => "realistic",
            Mode::Cyclic => "cyclic",
        })
    }
}

/// 8-bit raster, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (expected 1 or 3)")));
        }
        let expected = sample_count(width, height, channels)?;
        if pixels.len() != expected {
            return Err(Error::SizeMismatch {
                expected: format!("{expected} samples"),
                got: format!("{} samples", pixels.len()),
            });
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        let n = sample_count(width, height, channels)?;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let at = (row * self.width + col) * self.channels;
        &self.pixels[at..at + self.channels]
    }

    /// Extracts the `k x k` window described by `w`.
    pub fn crop(&self, w: &CropWindow) -> Result<ImageBuf> {
        w.check(self.height, self.width)?;
        let pixels = crop_samples(&self.pixels, self.height, self.width, self.channels, w);
        Ok(ImageBuf {
            width: w.size,
            height: w.size,
            channels: self.channels,
            pixels,
        })
    }

    /// Wrap-around shift of the whole image: `out(r, c) = in((r + dy) mod H, (c + dx) mod W)`.
    pub fn cyclic_shift(&self, dy: i64, dx: i64) -> ImageBuf {
        let pixels = shift_samples(&self.pixels, self.height, self.width, self.channels, dy, dx);
        ImageBuf {
            pixels,
            ..*self
        }
    }
}

/// Single 8-bit luminance plane, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LumaPlane {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl LumaPlane {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty plane {width}x{height}")));
        }
        let expected = sample_count(width, height, 1)?;
        if values.len() != expected {
            return Err(Error::SizeMismatch {
                expected: format!("{expected} values"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(LumaPlane {
            width,
            height,
            values,
        })
    }

    /// Builds a plane from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut values = Vec::with_capacity(sample_count(width, height, 1)?);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn crop(&self, w: &CropWindow) -> Result<LumaPlane> {
        w.check(self.height, self.width)?;
        let values = crop_samples(&self.values, self.height, self.width, 1, w);
        Ok(LumaPlane {
            width: w.size,
            height: w.size,
            values,
        })
    }

    pub fn cyclic_shift(&self, dy: i64, dx: i64) -> LumaPlane {
        let values = shift_samples(&self.values, self.height, self.width, 1, dy, dx);
        LumaPlane {
            values,
            ..*self
        }
    }

    /// Copy with `pad` extra wrapped rows and columns appended, so every
    /// cyclic `k x k` crop (`pad = k - 1`) is a contiguous block.
    pub(crate) fn wrap_extended(&self, pad: usize) -> LumaPlane {
        let (h, w) = (self.height, self.width);
        let (eh, ew) = (h + pad, w + pad);
        let mut values = Vec::with_capacity(eh * ew);
        for r in 0..eh {
            let row = &self.values[(r % h) * w..(r % h + 1) * w];
            for c in 0..ew {
                values.push(row[c % w]);
            }
        }
        LumaPlane {
            width: ew,
            height: eh,
            values,
        }
    }
}

impl From<&LumaPlane> for ImageBuf {
    fn from(p: &LumaPlane) -> Self {
        ImageBuf {
            width: p.width,
            height: p.height,
            channels: 1,
            pixels: p.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub mode: Mode,
}

impl CropWindow {
    pub fn new(top: usize, left: usize, size: usize, mode: Mode) -> Self {
        CropWindow {
            top,
            left,
            size,
            mode,
        }
    }

    /// The window centered in a `height x width` image; odd margins round
    /// toward the top-left.
    pub fn centered(height: usize, width: usize, size: usize, mode: Mode) -> Self {
        CropWindow {
            top: height.saturating_sub(size) / 2,
            left: width.saturating_sub(size) / 2,
            size,
            mode,
        }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Geometry("crop size must be at least 1".into()));
        }
        match self.mode {
            Mode::Realistic => {
                if self.size > height || self.size > width {
                    return Err(Error::Geometry(format!(
                        "{k}x{k} crop does not fit a {height}x{width} image",
                        k = self.size
                    )));
                }
                if self.top > height - self.size || self.left > width - self.size {
                    return Err(Error::Geometry(format!(
                        "window at ({}, {}) size {} leaves the {height}x{width} image",
                        self.top, self.left, self.size
                    )));
                }
            }
            Mode::Cyclic => {
                if self.top >= height || self.left >= width {
                    return Err(Error::Geometry(format!(
                        "cyclic window origin ({}, {}) outside {height}x{width}",
                        self.top, self.left
                    )));
                }
                if self.size > height || self.size > width {
                    return Err(Error::Geometry(format!(
                        "{k}x{k} cyclic crop larger than {height}x{width} image",
                        k = self.size
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Translation {
    pub dx: i64,
    pub dy: i64,
    pub mode: Mode,
}

impl Translation {
    pub fn new(dx: i64, dy: i64, mode: Mode) -> Self {
        Translation { dx, dy, mode }
    }

    pub fn identity(mode: Mode) -> Self {
        Translation { dx: 0, dy: 0, mode }
    }
}

/// Top-left corner, in source coordinates, of the realistic view of size
/// `view` translated by `(dx, dy)` from the centered view.
pub fn view_origin(height: usize, width: usize, view: usize, dy: i64, dx: i64) -> Result<(usize, usize)> {
    if view == 0 || view > height || view > width {
        return Err(Error::Geometry(format!(
            "{view}x{view} view does not fit a {height}x{width} source"
        )));
    }
    let base_y = ((height - view) / 2) as i64;
    let base_x = ((width - view) / 2) as i64;
    let (oy, ox) = (base_y + dy, base_x + dx);
    if oy < 0 || ox < 0 || oy > (height - view) as i64 || ox > (width - view) as i64 {
        return Err(Error::Geometry(format!(
            "shift ({dx}, {dy}) moves the {view}x{view} view outside the {height}x{width} source"
        )));
    }
    Ok((oy as usize, ox as usize))
}

/// The translated view `T(I, t)`.
///
/// Realistic mode crops a `view_size` window displaced by `t` from the center
/// of the larger source. Cyclic mode requires `view_size` to match the source
/// and wraps the whole image around.
pub fn translate_view(source: &ImageBuf, view_size: usize, t: Translation) -> Result<ImageBuf> {
    match t.mode {
        Mode::Realistic => {
            let (oy, ox) = view_origin(source.height, source.width, view_size, t.dy, t.dx)?;
            source.crop(&CropWindow::new(oy, ox, view_size, Mode::Realistic))
        }
        Mode::Cyclic => {
            if view_size != source.height || view_size != source.width {
                return Err(Error::Geometry(format!(
                    "cyclic view size {view_size} must equal the {}x{} source",
                    source.height, source.width
                )));
            }
            Ok(source.cyclic_shift(t.dy, t.dx))
        }
    }
}

/// Rec.601 integer luminance: `(299 R + 587 G + 114 B + 500) / 1000`.
pub fn to_luminance(img: &ImageBuf) -> LumaPlane {
    let values = match img.channels {
        1 => img.pixels.clone(),
        _ => img
            .pixels
            .chunks_exact(3)
            .map(|p| luma_601(p[0], p[1], p[2]))
            .collect(),
    };
    LumaPlane {
        width: img.width,
        height: img.height,
        values,
    }
}

#[inline]
pub fn luma_601(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

fn sample_count(width: usize, height: usize, channels: usize) -> Result<usize> {
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or(Error::DimensionOverflow {
            width,
            height,
            channels,
        })
}

fn crop_samples(data: &[u8], height: usize, width: usize, ch: usize, w: &CropWindow) -> Vec<u8> {
    let k = w.size;
    let mut out = Vec::with_capacity(k * k * ch);
    match w.mode {
        Mode::Realistic => {
            for r in 0..k {
                let start = ((w.top + r) * width + w.left) * ch;
                out.extend_from_slice(&data[start..start + k * ch]);
            }
        }
        Mode::Cyclic => {
            for r in 0..k {
                let row = (w.top + r) % height;
                for c in 0..k {
                    let col = (w.left + c) % width;
                    let at = (row * width + col) * ch;
                    out.extend_from_slice(&data[at..at + ch]);
                }
            }
        }
    }
    out
}

fn shift_samples(data: &[u8], height: usize, width: usize, ch: usize, dy: i64, dx: i64) -> Vec<u8> {
    let sy = dy.rem_euclid(height as i64) as usize;
    let sx = dx.rem_euclid(width as i64) as usize;
    let mut out = Vec::with_capacity(data.len());
    for r in 0..height {
        let row = (r + sy) % height;
        let base = row * width * ch;
        // Two contiguous runs per row: [sx, W) then [0, sx).
        out.extend_from_slice(&data[base + sx * ch..base + width * ch]);
        out.extend_from_slice(&data[base..base + sx * ch]);
    }
    out
}

// ---------------------------------------------------------------------------
// File I/O

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes binary PGM/PPM (maxval 255) or 8-bit gray/RGB PNG.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuf> {
    match bytes {
        [b'P', b'5', ..] | [b'P', b'6', ..] => decode_pnm(bytes),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(Error::UnsupportedFormat(
            "expected binary PGM (P5), PPM (P6) or PNG".into(),
        )),
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuf> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = pnm_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Malformed("missing whitespace after PNM header".into()));
    }
    pos += 1;
    if maxval > 255 {
        return Err(Error::UnsupportedBitDepth(format!("maxval {maxval}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255 is accepted)")));
    }
    let n = sample_count(width, height, channels)?;
    let raster = &bytes[pos..];
    if raster.len() < n {
        return Err(Error::Malformed(format!(
            "raster truncated: {} of {n} bytes",
            raster.len()
        )));
    }
    ImageBuf::new(width, height, channels, raster[..n].to_vec())
}

fn pnm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Malformed("truncated PNM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Malformed("bad number in PNM header".into()))
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuf> {
    let decoder = png::Decoder::new(BufReader::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(format!("png {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedFormat(format!("png color type {other:?}"))),
    };
    sample_count(width, height, channels)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    buf.truncate(frame.buffer_size());
    ImageBuf::new(width, height, channels, buf)
}

/// Encodes as binary PGM (gray) or PPM (RGB).
pub fn encode_pnm(img: &ImageBuf) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn save_pnm(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
