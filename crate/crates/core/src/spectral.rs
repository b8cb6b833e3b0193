//! Two-dimensional DFT, amplitude/phase decomposition and amplitude
//! augmentation (AmpAug).
//!
//! AmpAug replaces the low-frequency part of a source image's amplitude
//! spectrum with that of a style target while keeping the source phase:
//!
//! ```text
//! A_aug = (1 - M) * A_src + M * A_tgt
//! x_aug = F^-1(A_aug, P_src)
//! ```
//!
//! `M` is a centred square window around DC in the unshifted spectrum
//! layout. The forward transform is the unnormalized sum; the inverse
//! carries the `1/(HW)` factor.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::image::Image;

/// Default mask proportion.
pub const DEFAULT_MASK_RATIO: f64 = 0.01;

/// Imaginary residue above which an inverse transform is reported.
pub const IMAG_RESIDUE_WARN: f64 = 1e-6;

/// Complex `H x W x C` spectrum, planar, DC at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{} bins for a {height}x{width}x{channels} spectrum",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![Complex64::new(0.0, 0.0); height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, z: Complex64) {
        self.data[(c * self.height + u) * self.width + v] = z;
    }

    /// Largest deviation from `F(u,v) = conj(F(-u,-v))`.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let (h, w, ch) = self.dims();
        let mut worst = 0.0f64;
        for c in 0..ch {
            for u in 0..h {
                for v in 0..w {
                    let a = self.get(c, u, v);
                    let b = self.get(c, (h - u) % h, (w - v) % w).conj();
                    worst = worst.max((a - b).norm());
                }
            }
        }
        worst
    }
}

/// Non-negative amplitude raster with the same layout as [`Spectrum`].
#[derive(Debug, Clone, PartialEq)]
pub struct Amplitude {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Amplitude {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{} values for a {height}x{width}x{channels} amplitude",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("amplitude must be finite and non-negative"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + u) * self.width + v]
    }
}

/// Polar form of a spectrum. Phase lies in `(-pi, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudePhase {
    pub amplitude: Amplitude,
    pub phase: Vec<f64>,
}

impl AmplitudePhase {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitude.dims()
    }
}

fn transform_2d(
    height: usize,
    width: usize,
    planes: &mut [Complex64],
    direction: FftDirection,
) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(width, direction);
    let col_fft = planner.plan_fft(height, direction);
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for plane in planes.chunks_exact_mut(height * width) {
        for row in plane.chunks_exact_mut(width) {
            row_fft.process_with_scratch(row, &mut scratch[..row_fft.get_inplace_scratch_len()]);
        }
        for v in 0..width {
            for u in 0..height {
                column[u] = plane[u * width + v];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch[..col_fft.get_inplace_scratch_len()]);
            for u in 0..height {
                plane[u * width + v] = column[u];
            }
        }
    }
}

/// Unnormalized forward DFT of every channel.
pub fn fft2d(img: &Image) -> Spectrum {
    let (h, w, c) = img.dims();
    let mut data: Vec<Complex64> = img.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if h > 0 && w > 0 {
        transform_2d(h, w, &mut data, FftDirection::Forward);
    }
    Spectrum {
        height: h,
        width: w,
        channels: c,
        data,
    }
}

/// Inverse DFT with `1/(HW)` normalization, returning the real part and the
/// largest discarded imaginary magnitude.
pub fn ifft2d_with_residue(spec: &Spectrum) -> (Image, f64) {
    let (h, w, c) = spec.dims();
    let mut data = spec.data.clone();
    if h > 0 && w > 0 {
        transform_2d(h, w, &mut data, FftDirection::Inverse);
    }
    let scale = 1.0 / (h * w).max(1) as f64;
    let mut residue = 0.0f64;
    let real = data
        .iter()
        .map(|z| {
            residue = residue.max((z.im * scale).abs());
            z.re * scale
        })
        .collect();
    let img = Image::new(h, w, c, real).expect("finite spectrum gives a finite image");
    (img, residue)
}

/// Inverse DFT. Logs a warning when the discarded imaginary part exceeds
/// [`IMAG_RESIDUE_WARN`].
pub fn ifft2d(spec: &Spectrum) -> Image {
    let (img, residue) = ifft2d_with_residue(spec);
    if residue > IMAG_RESIDUE_WARN {
        log::warn!("inverse DFT discarded an imaginary residue of {residue:.3e}");
    }
    img
}

/// Direct `O((HW)^2)` evaluation of the forward sum. Works for any size.
pub fn dft2d_naive(img: &Image) -> Spectrum {
    let (h, w, ch) = img.dims();
    let mut out = Spectrum::zeros(h, w, ch);
    for c in 0..ch {
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let turns = ((y * u) % h) as f64 / h as f64 + ((x * v) % w) as f64 / w as f64;
                        acc += Complex64::from_polar(img.get(c, y, x), -2.0 * PI * turns);
                    }
                }
                out.set(c, u, v, acc);
            }
        }
    }
    out
}

/// Splits a spectrum into modulus and argument. Zero bins get phase 0.
pub fn decompose(spec: &Spectrum) -> AmplitudePhase {
    let (h, w, c) = spec.dims();
    let mut amplitude = Vec::with_capacity(spec.data.len());
    let mut phase = Vec::with_capacity(spec.data.len());
    for z in &spec.data {
        let r = z.norm();
        amplitude.push(r);
        phase.push(if r == 0.0 { 0.0 } else { canonical_phase(z.arg()) });
    }
    AmplitudePhase {
        amplitude: Amplitude {
            height: h,
            width: w,
            channels: c,
            data: amplitude,
        },
        phase,
    }
}

fn canonical_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// `amplitude * (cos(phase) + i sin(phase))`.
pub fn compose(ap: &AmplitudePhase) -> Result<Spectrum> {
    compose_parts(&ap.amplitude, &ap.phase)
}

fn compose_parts(amplitude: &Amplitude, phase: &[f64]) -> Result<Spectrum> {
    if amplitude.data.len() != phase.len() {
        return Err(Error::dims(format!(
            "amplitude has {} bins, phase has {}",
            amplitude.data.len(),
            phase.len()
        )));
    }
    let (h, w, c) = amplitude.dims();
    let data = amplitude
        .data
        .iter()
        .zip(phase)
        .map(|(&r, &p)| Complex64::new(r * p.cos(), r * p.sin()))
        .collect();
    Ok(Spectrum {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

/// Square low-frequency window around DC, wrapped in the unshifted layout.
///
/// Half-extents are `floor(ratio * H)` and `floor(ratio * W)`, so the window
/// is `(2r_H + 1) x (2r_W + 1)` bins (capped at the full size) and always
/// contains DC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqMask {
    ratio: f64,
    height: usize,
    width: usize,
    half_h: usize,
    half_w: usize,
}

impl FreqMask {
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn half_extents(&self) -> (usize, usize) {
        (self.half_h, self.half_w)
    }

    #[inline]
    pub fn contains(&self, u: usize, v: usize) -> bool {
        let du = u.min(self.height - u);
        let dv = v.min(self.width - v);
        du <= self.half_h && dv <= self.half_w
    }

    pub fn member_count(&self) -> usize {
        (2 * self.half_h + 1).min(self.height) * (2 * self.half_w + 1).min(self.width)
    }

    pub fn covers_all(&self) -> bool {
        self.member_count() == self.height * self.width
    }
}

pub fn low_freq_mask(ratio: f64, h: usize, w: usize) -> Result<FreqMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("mask needs non-zero dimensions"));
    }
    Ok(FreqMask {
        ratio,
        height: h,
        width: w,
        half_h: (ratio * h as f64).floor() as usize,
        half_w: (ratio * w as f64).floor() as usize,
    })
}

/// `(1 - M) * a_src + M * a_tgt`, applied to every channel.
pub fn amp_swap(a_src: &Amplitude, a_tgt: &Amplitude, mask: &FreqMask) -> Result<Amplitude> {
    if a_src.dims() != a_tgt.dims() {
        return Err(Error::dims(format!(
            "source amplitude {:?} vs target {:?}",
            a_src.dims(),
            a_tgt.dims()
        )));
    }
    let (h, w, c) = a_src.dims();
    if mask.dims() != (h, w) {
        return Err(Error::dims(format!(
            "mask {:?} vs amplitude {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let mut out = a_src.clone();
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                if mask.contains(u, v) {
                    let i = (ch * h + u) * w + v;
                    out.data[i] = a_tgt.data[i];
                }
            }
        }
    }
    Ok(out)
}

/// AmpAug against a precomputed target amplitude, before clamping.
pub fn ampaug_unclamped(src: &Image, tgt_amplitude: &Amplitude, ratio: f64) -> Result<Image> {
    let (h, w, c) = src.dims();
    if tgt_amplitude.dims() != (h, w, c) {
        return Err(Error::dims(format!(
            "source image {:?} vs target amplitude {:?}",
            (h, w, c),
            tgt_amplitude.dims()
        )));
    }
    let mask = low_freq_mask(ratio, h, w)?;
    let src_ap = decompose(&fft2d(src));
    let swapped = amp_swap(&src_ap.amplitude, tgt_amplitude, &mask)?;
    Ok(ifft2d(&compose_parts(&swapped, &src_ap.phase)?))
}

pub fn ampaug_with_amplitude(src: &Image, tgt_amplitude: &Amplitude, ratio: f64) -> Result<Image> {
    Ok(ampaug_unclamped(src, tgt_amplitude, ratio)?.clamped())
}

/// Amplitude augmentation: the low-frequency amplitude of `src` is replaced
/// by that of `tgt`; the phase of `src` is kept; the result is clamped to
/// `[0,1]`.
pub fn ampaug(src: &Image, tgt: &Image, ratio: f64) -> Result<Image> {
    if !src.same_dims(tgt) {
        return Err(Error::dims(format!(
            "source {:?} vs target {:?}",
            src.dims(),
            tgt.dims()
        )));
    }
    let tgt_amp = decompose(&fft2d(tgt)).amplitude;
    ampaug_with_amplitude(src, &tgt_amp, ratio)
}

const BANK_MAGIC: &[u8; 8] = b"AMPBANK\0";
const BANK_VERSION: u32 = 1;

/// Immutable collection of precomputed amplitude spectra used as AmpAug
/// style targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeBank {
    dims: (usize, usize, usize),
    entries: Vec<Amplitude>,
}

impl AmplitudeBank {
    pub fn build(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("amplitude bank needs at least one image"))?;
        if let Some(bad) = images.iter().find(|i| !i.same_dims(first)) {
            return Err(Error::dims(format!(
                "bank image {:?} differs from {:?}",
                bad.dims(),
                first.dims()
            )));
        }
        let entries = images
            .iter()
            .map(|img| decompose(&fft2d(img)).amplitude)
            .collect();
        Ok(Self {
            dims: first.dims(),
            entries,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Amplitude] {
        &self.entries
    }

    /// Uniformly samples one entry.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Amplitude {
        &self.entries[rng.gen_range(0..self.entries.len())]
    }

    /// Serializes as: 8-byte magic `AMPBANK\0`, `u32` version, then `u64`
    /// height, width, channels, count, then every entry's planar values as
    /// `f64`. All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w, c) = self.dims;
        let mut out = Vec::with_capacity(44 + self.entries.len() * h * w * c * 8);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        for n in [h, w, c, self.entries.len()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("not an amplitude bank".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            *d = u64::from_le_bytes(b) as usize;
        }
        let [h, w, c, count] = dims;
        if count == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Format("empty amplitude bank".into()));
        }
        let per = h * w * c;
        if r.len() != count * per * 8 {
            return Err(Error::Format(format!(
                "bank payload is {} bytes, expected {}",
                r.len(),
                count * per * 8
            )));
        }
        let values: Vec<f64> = r
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let entries = values
            .chunks_exact(per)
            .map(|chunk| Amplitude::new(h, w, c, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims: (h, w, c),
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("amplitude bank header truncated".into()))
}
