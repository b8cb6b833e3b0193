//! Planar real-valued rasters and the binary PPM format.
//!
//! Pixel values live in `[0,1]` as `f64`. Quantization to 8 bits happens
//! only when writing files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` raster stored plane by plane (`c`, then `h`, then `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds an image by evaluating `f(c, h, w)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Quantizes to 8 bits with round-half-up after clamping to `[0,1]`.
    pub fn to_bytes_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for h in 0..self.height {
            for w in 0..self.width {
                for c in 0..self.channels {
                    out.push(quantize(self.get(c, h, w)));
                }
            }
        }
        out
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Segmentation classes, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegClass {
    Vehicle,
    Road,
    Lane,
}

impl SegClass {
    pub const ALL: [SegClass; 3] = [SegClass::Vehicle, SegClass::Road, SegClass::Lane];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SegClass::Vehicle => "vehicle",
            SegClass::Road => "road",
            SegClass::Lane => "lane",
        }
    }
}

/// Independent binary maps for the three classes, planar like [`Image`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub const CLASSES: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * Self::CLASSES {
            return Err(Error::dims(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * Self::CLASSES],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, class: SegClass, h: usize, w: usize) -> bool {
        self.data[(class.index() * self.height + h) * self.width + w] == 1
    }

    #[inline]
    pub fn set(&mut self, class: SegClass, h: usize, w: usize, on: bool) {
        let i = (class.index() * self.height + h) * self.width + w;
        self.data[i] = on as u8;
    }

    pub fn plane(&self, class: SegClass) -> &[u8] {
        let n = self.height * self.width;
        &self.data[class.index() * n..(class.index() + 1) * n]
    }

    /// The mask as a 3-channel 0/1 image.
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: Self::CLASSES,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// One 3-channel gray image (0 or 1) per class, for PPM export.
    pub fn class_image(&self, class: SegClass) -> Image {
        let plane = self.plane(class);
        Image::from_fn(self.height, self.width, 3, |_, h, w| {
            plane[h * self.width + w] as f64
        })
    }

    /// Rebuilds a mask from per-class gray images, thresholding at one half.
    pub fn from_class_images(images: &[Image; 3]) -> Result<Self> {
        let (h, w, _) = images[0].dims();
        let mut mask = Self::empty(h, w);
        for (class, img) in SegClass::ALL.into_iter().zip(images) {
            if img.height() != h || img.width() != w {
                return Err(Error::dims("class images differ in size"));
            }
            for y in 0..h {
                for x in 0..w {
                    mask.set(class, y, x, img.get(0, y, x) >= 0.5);
                }
            }
        }
        Ok(mask)
    }
}

/// Reads a binary P6 PPM with maxval 255.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::PpmHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_number(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_header_number(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_header_number(next_token(bytes, &mut pos)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::PpmMaxval(maxval as u32));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::PpmHeader("missing separator after maxval".into()));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let mut img = Image::zeros(height, width, 3);
    for h in 0..height {
        for w in 0..width {
            for c in 0..3 {
                let b = payload[(h * width + w) * 3 + c];
                img.set(c, h, w, b as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::PpmHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(tok: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::PpmHeader(format!(
                "bad {what} {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "PPM needs 3 channels, image has {}",
            img.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_bytes_interleaved());
    Ok(out)
}

/// Writes a binary P6 PPM. Values are clamped and rounded half-up.
pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("resize target has a zero dimension"));
    }
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    if (new_h, new_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let sy = img.height() as f64 / new_h as f64;
    let sx = img.width() as f64 / new_w as f64;
    let taps = |i: usize, scale: f64, len: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let rows: Vec<_> = (0..new_h).map(|y| taps(y, sy, img.height())).collect();
    let cols: Vec<_> = (0..new_w).map(|x| taps(x, sx, img.width())).collect();
    Ok(Image::from_fn(new_h, new_w, img.channels(), |c, y, x| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = img.get(c, y0, x0) * (1.0 - tx) + img.get(c, y0, x1) * tx;
        let bottom = img.get(c, y1, x0) * (1.0 - tx) + img.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }))
}
