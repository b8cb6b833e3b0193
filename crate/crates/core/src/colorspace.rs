//! RGB -> XYZ -> LAB conversion and LAB statistics transfer between
//! collaborating vehicles.
//!
//! RGB is treated as linear. The reference white defaults to the image of
//! RGB white under the conversion matrix, so `(1,1,1)` maps to `L = 100`.
//!
//! The alignment protocol: the ego vehicle computes the per-channel LAB
//! mean and standard deviation of its image and broadcasts them
//! ([`LabStats`], wire form via [`encode_stats`]); every other vehicle maps
//! its own LAB channels onto those statistics and converts back to RGB.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// Linear RGB to XYZ, row-major.
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3575, 0.1804],
    [0.2126, 0.7151, 0.0721],
    [0.0193, 0.1191, 0.9502],
];

/// Below this standard deviation a channel is shifted, not scaled.
pub const SIGMA_FLOOR: f64 = 1e-6;

const DELTA: f64 = 6.0 / 29.0;

fn forward_matrix() -> Matrix3<f64> {
    let m = RGB_TO_XYZ;
    Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    )
}

/// Inverse of [`RGB_TO_XYZ`].
pub fn xyz_to_rgb_matrix() -> &'static Matrix3<f64> {
    static INV: OnceLock<Matrix3<f64>> = OnceLock::new();
    INV.get_or_init(|| {
        forward_matrix()
            .try_inverse()
            .expect("RGB->XYZ matrix is invertible")
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitePoint {
    pub xn: f64,
    pub yn: f64,
    pub zn: f64,
}

impl WhitePoint {
    pub fn new(xn: f64, yn: f64, zn: f64) -> Result<Self> {
        if [xn, yn, zn].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self { xn, yn, zn })
        } else {
            Err(Error::invalid("white point components must be positive"))
        }
    }

    /// The conversion matrix applied to RGB `(1,1,1)`: its row sums.
    pub fn matrix_white() -> Self {
        let [x, y, z] = RGB_TO_XYZ.map(|row| row.iter().sum::<f64>());
        Self {
            xn: x,
            yn: y,
            zn: z,
        }
    }
}

impl Default for WhitePoint {
    fn default() -> Self {
        Self::matrix_white()
    }
}

/// XYZ tristimulus raster, planar `X, Y, Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// LAB raster, planar `L, a, b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

macro_rules! three_plane_raster {
    ($t:ident) => {
        impl $t {
            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if data.len() != 3 * height * width {
                    return Err(Error::dims(format!(
                        "{} values for a {height}x{width}x3 raster",
                        data.len()
                    )));
                }
                Ok(Self {
                    height,
                    width,
                    data,
                })
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn plane(&self, c: usize) -> &[f64] {
                let n = self.pixels();
                &self.data[c * n..(c + 1) * n]
            }

            /// The three components of pixel `i` (row-major index).
            pub fn pixel(&self, i: usize) -> [f64; 3] {
                let n = self.pixels();
                [self.data[i], self.data[n + i], self.data[2 * n + i]]
            }

            fn from_pixels(height: usize, width: usize, px: impl Iterator<Item = [f64; 3]>) -> Self {
                let n = height * width;
                let mut data = vec![0.0; 3 * n];
                for (i, p) in px.enumerate() {
                    data[i] = p[0];
                    data[n + i] = p[1];
                    data[2 * n + i] = p[2];
                }
                Self {
                    height,
                    width,
                    data,
                }
            }
        }
    };
}

three_plane_raster!(XyzImage);
three_plane_raster!(LabImage);

fn rgb_pixel(img: &Image, i: usize) -> [f64; 3] {
    let n = img.pixels();
    let d = img.data();
    [d[i], d[n + i], d[2 * n + i]]
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected an RGB image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

/// Per-pixel matrix product with [`RGB_TO_XYZ`]. Inputs are clamped to
/// `[0,1]` first.
pub fn rgb_to_xyz(img: &Image) -> Result<XyzImage> {
    require_rgb(img)?;
    let m = RGB_TO_XYZ;
    let px = (0..img.pixels()).map(|i| {
        let rgb = rgb_pixel(img, i).map(|v| v.clamp(0.0, 1.0));
        m.map(|row| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2])
    });
    Ok(XyzImage::from_pixels(img.height(), img.width(), px))
}

/// Cube root above `(6/29)^3`, linear below.
#[inline]
pub fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
pub fn lab_f_inv(s: f64) -> f64 {
    if s > DELTA {
        s * s * s
    } else {
        3.0 * DELTA * DELTA * (s - 4.0 / 29.0)
    }
}

pub fn xyz_to_lab(xyz: &XyzImage, wp: &WhitePoint) -> LabImage {
    let px = (0..xyz.pixels()).map(|i| {
        let [x, y, z] = xyz.pixel(i);
        let (fx, fy, fz) = (lab_f(x / wp.xn), lab_f(y / wp.yn), lab_f(z / wp.zn));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    });
    LabImage::from_pixels(xyz.height, xyz.width, px)
}

pub fn lab_to_xyz(lab: &LabImage, wp: &WhitePoint) -> XyzImage {
    let px = (0..lab.pixels()).map(|i| {
        let [l, a, b] = lab.pixel(i);
        let fy = (l + 16.0) / 116.0;
        let fx = fy + a / 500.0;
        let fz = fy - b / 200.0;
        [
            wp.xn * lab_f_inv(fx),
            wp.yn * lab_f_inv(fy),
            wp.zn * lab_f_inv(fz),
        ]
    });
    XyzImage::from_pixels(lab.height, lab.width, px)
}

/// XYZ back to RGB, clamped to `[0,1]`.
pub fn xyz_to_rgb(xyz: &XyzImage) -> Image {
    let inv = xyz_to_rgb_matrix();
    let mut out = Image::zeros(xyz.height, xyz.width, 3);
    let n = xyz.pixels();
    for i in 0..n {
        let rgb = inv * Vector3::from(xyz.pixel(i));
        for c in 0..3 {
            out.data_mut()[c * n + i] = rgb[c].clamp(0.0, 1.0);
        }
    }
    out
}

pub fn lab_to_rgb(lab: &LabImage, wp: &WhitePoint) -> Image {
    xyz_to_rgb(&lab_to_xyz(lab, wp))
}

pub fn rgb_to_lab(img: &Image, wp: &WhitePoint) -> Result<LabImage> {
    Ok(xyz_to_lab(&rgb_to_xyz(img)?, wp))
}

/// Per-channel population mean and standard deviation in LAB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub pixel_count: u64,
}

impl LabStats {
    pub fn new(mu: [f64; 3], sigma: [f64; 3], pixel_count: u64) -> Result<Self> {
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::invalid("LAB statistics must be finite"));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("LAB standard deviation must be non-negative"));
        }
        if pixel_count == 0 {
            return Err(Error::invalid("LAB statistics need at least one pixel"));
        }
        Ok(Self {
            mu,
            sigma,
            pixel_count,
        })
    }
}

pub fn compute_stats(lab: &LabImage) -> Result<LabStats> {
    let n = lab.pixels();
    if n == 0 {
        return Err(Error::invalid("cannot compute statistics of an empty image"));
    }
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    for c in 0..3 {
        let plane = lab.plane(c);
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        mu[c] = mean;
        sigma[c] = var.sqrt();
    }
    LabStats::new(mu, sigma, n as u64)
}

/// Channel-wise `sigma_t / sigma_s * (x - mu_s) + mu_t`. Channels whose
/// source deviation is below [`SIGMA_FLOOR`] are only shifted.
pub fn translate(src: &LabImage, src_stats: &LabStats, tgt_stats: &LabStats) -> LabImage {
    let mut out = src.clone();
    let n = src.pixels();
    for c in 0..3 {
        let (ms, ss) = (src_stats.mu[c], src_stats.sigma[c]);
        let (mt, st) = (tgt_stats.mu[c], tgt_stats.sigma[c]);
        if ms == mt && ss == st {
            continue;
        }
        let plane = &mut out.data[c * n..(c + 1) * n];
        if ss < SIGMA_FLOOR {
            plane.iter_mut().for_each(|x| *x = *x - ms + mt);
        } else {
            let gain = st / ss;
            plane.iter_mut().for_each(|x| *x = gain * (*x - ms) + mt);
        }
    }
    out
}

/// The receiving side of the protocol: restyle `img` toward broadcast stats.
pub fn align_to_stats(img: &Image, target: &LabStats, wp: &WhitePoint) -> Result<Image> {
    let lab = rgb_to_lab(img, wp)?;
    let own = compute_stats(&lab)?;
    Ok(lab_to_rgb(&translate(&lab, &own, target), wp))
}

/// Aligns every image in `others` to the LAB statistics of `ego`. The ego
/// image itself is not modified.
pub fn align_images(ego: &Image, others: &[Image]) -> Result<Vec<Image>> {
    let wp = WhitePoint::default();
    let ego_stats = compute_stats(&rgb_to_lab(ego, &wp)?)?;
    others
        .iter()
        .map(|img| align_to_stats(img, &ego_stats, &wp))
        .collect()
}

fn push_array(out: &mut String, values: &[f64; 3]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{v:.16e}"));
    }
    out.push(']');
}

/// Canonical wire form: `{"mu":[..],"sigma":[..],"n":N}` with every real
/// written to 17 significant digits.
pub fn encode_stats(stats: &LabStats) -> String {
    let mut out = String::from("{\"mu\":");
    push_array(&mut out, &stats.mu);
    out.push_str(",\"sigma\":");
    push_array(&mut out, &stats.sigma);
    out.push_str(&format!(",\"n\":{}}}", stats.pixel_count));
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsWire {
    mu: [f64; 3],
    sigma: [f64; 3],
    n: u64,
}

pub fn decode_stats(bytes: &[u8]) -> Result<LabStats> {
    let wire: StatsWire =
        serde_json::from_slice(bytes).map_err(|e| Error::Message(e.to_string()))?;
    LabStats::new(wire.mu, wire.sigma, wire.n).map_err(|e| Error::Message(e.to_string()))
}
