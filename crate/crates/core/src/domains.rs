//! Procedural multi-CAV road scenes and photometric domain shifts.
//!
//! A scene is a top-down raster: a ground plane crossed by a curved road
//! band, a dashed center lane and a few vehicle rectangles parked on the
//! road. Every CAV sees the same geometry through its own photometric
//! jitter. Corruptions (fog, rain, night, sunny) only touch pixel values,
//! never labels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_ppm, save_ppm, Image, SegClass, SegMask};
use crate::spectral::AmplitudeBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Clean,
    Sunny,
    Fog,
    Rain,
    Night,
}

impl DomainTag {
    /// The four evaluation domains.
    pub const SHIFTED: [DomainTag; 4] = [
        DomainTag::Sunny,
        DomainTag::Fog,
        DomainTag::Rain,
        DomainTag::Night,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Clean => "clean",
            DomainTag::Sunny => "sunny",
            DomainTag::Fog => "fog",
            DomainTag::Rain => "rain",
            DomainTag::Night => "night",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" => Ok(DomainTag::Clean),
            "sunny" => Ok(DomainTag::Sunny),
            "fog" => Ok(DomainTag::Fog),
            "rain" => Ok(DomainTag::Rain),
            "night" => Ok(DomainTag::Night),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Axis-aligned vehicle footprint in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// Everything needed to redraw a scene's label.
///
/// Pixel centers are measured from the image center. `along` and `across`
/// are the coordinates rotated by `angle`; the road centerline sits at
/// `across = offset + curvature * along^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    pub angle: f64,
    pub offset: f64,
    pub curvature: f64,
    pub road_width: f64,
    pub lane_half_width: f64,
    pub dash_period: f64,
    pub dash_on: f64,
    pub vehicles: Vec<Rect>,
}

impl SceneGeometry {
    fn road_coords(&self, row: usize, col: usize) -> (f64, f64) {
        let x = col as f64 + 0.5 - self.width as f64 / 2.0;
        let y = row as f64 + 0.5 - self.height as f64 / 2.0;
        let (s, c) = self.angle.sin_cos();
        let along = x * c + y * s;
        let across = -x * s + y * c;
        (along, across - (self.offset + self.curvature * along * along))
    }

    pub fn is_road(&self, row: usize, col: usize) -> bool {
        let (_, d) = self.road_coords(row, col);
        d.abs() <= self.road_width / 2.0
    }

    /// Dashed lane paint, before vehicles occlude it.
    pub fn is_lane_paint(&self, row: usize, col: usize) -> bool {
        let (along, d) = self.road_coords(row, col);
        d.abs() < self.lane_half_width && (along + 1e4).rem_euclid(self.dash_period) < self.dash_on
    }

    pub fn is_vehicle(&self, row: usize, col: usize) -> bool {
        self.vehicles.iter().any(|r| r.contains(row, col))
    }

    /// Road is the full band; lane is visible paint (not under a vehicle);
    /// vehicle is the union of rectangles.
    pub fn rasterize(&self) -> SegMask {
        let mut mask = SegMask::empty(self.height, self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                let vehicle = self.is_vehicle(row, col);
                mask.set(SegClass::Road, row, col, self.is_road(row, col));
                mask.set(SegClass::Vehicle, row, col, vehicle);
                mask.set(SegClass::Lane, row, col, !vehicle && self.is_lane_paint(row, col));
            }
        }
        mask
    }
}

/// Per-CAV photometric jitter ranges: brightness offset in `+-brightness`,
/// contrast factor in `contrast`, per-channel color cast in `+-cast`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub cast: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.15,
            contrast: (0.8, 1.2),
            cast: 0.05,
        }
    }
}

impl JitterParams {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: (1.0, 1.0),
            cast: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.brightness >= 0.0
            && self.cast >= 0.0
            && self.contrast.0 > 0.0
            && self.contrast.0 <= self.contrast.1
            && [self.brightness, self.cast, self.contrast.1].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad jitter ranges {self:?}")))
        }
    }
}

/// One drawn jitter: `clamp((x - 0.5) * contrast + 0.5 + brightness + cast[c])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub cast: [f64; 3],
}

impl Jitter {
    pub fn sample(p: &JitterParams, rng: &mut impl Rng) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let brightness = sym(p.brightness);
        let cast = [sym(p.cast), sym(p.cast), sym(p.cast)];
        let contrast = if p.contrast.1 > p.contrast.0 {
            rng.gen_range(p.contrast.0..=p.contrast.1)
        } else {
            p.contrast.0
        };
        Self {
            brightness,
            contrast,
            cast,
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for c in 0..out.channels() {
            let cast = self.cast[c % 3];
            for v in out.plane_mut(c) {
                *v = ((*v - 0.5) * self.contrast + 0.5 + self.brightness + cast).clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cav_images: Vec<Image>,
    pub label: SegMask,
    pub scene_seed: u64,
    pub domain_tag: DomainTag,
    pub geometry: SceneGeometry,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        (self.label.height(), self.label.width())
    }

    pub fn n_cavs(&self) -> usize {
        self.cav_images.len()
    }

    /// A copy with every CAV image replaced by `f(cav_index, image)`.
    pub fn map_images(&self, mut f: impl FnMut(usize, &Image) -> Result<Image>) -> Result<Scene> {
        let cav_images = self
            .cav_images
            .iter()
            .enumerate()
            .map(|(i, img)| f(i, img))
            .collect::<Result<_>>()?;
        Ok(Scene {
            cav_images,
            ..self.clone()
        })
    }
}

fn random_geometry(rng: &mut ChaCha8Rng, height: usize, width: usize) -> SceneGeometry {
    let side = height.min(width) as f64;
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let offset = rng.gen_range(-0.15..=0.15) * side;
    let curvature = rng.gen_range(-0.8..=0.8) / side;
    let road_width = rng.gen_range(0.28..=0.42) * side;
    let dash_period = (side / 5.0).max(4.0);
    let mut geometry = SceneGeometry {
        height,
        width,
        angle,
        offset,
        curvature,
        road_width,
        lane_half_width: 1.0,
        dash_period,
        dash_on: dash_period * 0.6,
        vehicles: Vec::new(),
    };

    let n_vehicles = rng.gen_range(1..=5);
    let max_side = ((side / 6.0).round() as usize).max(2);
    let (s, c) = angle.sin_cos();
    for _ in 0..n_vehicles {
        let along = rng.gen_range(-0.45..=0.45) * side;
        let across = offset
            + curvature * along * along
            + rng.gen_range(-0.25..=0.25) * road_width;
        // Back to image coordinates.
        let x = along * c - across * s + width as f64 / 2.0;
        let y = along * s + across * c + height as f64 / 2.0;
        let vh = rng.gen_range(2..=max_side).min(height);
        let vw = rng.gen_range(2..=max_side).min(width);
        let top = (y - vh as f64 / 2.0).round().clamp(0.0, (height - vh) as f64) as usize;
        let left = (x - vw as f64 / 2.0).round().clamp(0.0, (width - vw) as f64) as usize;
        geometry.vehicles.push(Rect {
            top,
            left,
            height: vh,
            width: vw,
        });
    }
    geometry
}

fn render_base(geometry: &SceneGeometry, rng: &mut ChaCha8Rng) -> Image {
    let mut jitter = |base: [f64; 3], r: f64| base.map(|v| (v + rng.gen_range(-r..=r)).clamp(0.0, 1.0));
    let ground = jitter([0.36, 0.6, 0.26], 0.06);
    let road = jitter([0.2, 0.2, 0.22], 0.04);
    let lane = jitter([0.95, 0.93, 0.8], 0.04);
    let vehicle_colors: Vec<[f64; 3]> = geometry
        .vehicles
        .iter()
        .map(|_| [rng.gen_range(0.6..0.95), rng.gen_range(0.05..0.3), rng.gen_range(0.5..0.95)])
        .collect();

    let (h, w) = (geometry.height, geometry.width);
    let mut img = Image::zeros(h, w, 3);
    for row in 0..h {
        for col in 0..w {
            let color = if let Some(k) = geometry.vehicles.iter().position(|r| r.contains(row, col)) {
                vehicle_colors[k]
            } else if geometry.is_road(row, col) && geometry.is_lane_paint(row, col) {
                lane
            } else if geometry.is_road(row, col) {
                road
            } else {
                ground
            };
            let grain = rng.gen_range(-0.03..=0.03);
            for (c, v) in color.iter().enumerate() {
                img.set(c, row, col, (v + grain).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Generates a clean scene with the default jitter ranges.
pub fn generate_scene(seed: u64, height: usize, width: usize, n_cavs: usize) -> Result<Scene> {
    generate_scene_with(seed, height, width, n_cavs, &JitterParams::default())
}

pub fn generate_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    n_cavs: usize,
    jitter: &JitterParams,
) -> Result<Scene> {
    if height < 4 || width < 4 {
        return Err(Error::invalid(format!("scene {height}x{width} is too small")));
    }
    if n_cavs == 0 {
        return Err(Error::invalid("a scene needs at least one CAV"));
    }
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = random_geometry(&mut rng, height, width);
    let base = render_base(&geometry, &mut rng);
    let cav_images = (0..n_cavs)
        .map(|_| Jitter::sample(jitter, &mut rng).apply(&base))
        .collect();
    Ok(Scene {
        cav_images,
        label: geometry.rasterize(),
        scene_seed: seed,
        domain_tag: DomainTag::Clean,
        geometry,
    })
}

/// Mixes a base seed with an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// CAV count range, inclusive.
    pub n_cavs: (usize, usize),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            height: 32,
            width: 32,
            n_cavs: (2, 4),
            seed: 0,
        }
    }
}

/// Scene `i` uses seed `derive_seed(spec.seed, i)`; its CAV count is drawn
/// from a stream keyed on the same seed.
pub fn generate_dataset(spec: &DatasetSpec, jitter: &JitterParams) -> Result<Vec<Scene>> {
    let (lo, hi) = spec.n_cavs;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("bad CAV range {lo}..={hi}")));
    }
    (0..spec.count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(spec.seed, i);
            let n = ChaCha8Rng::seed_from_u64(seed ^ 0xCA5).gen_range(lo..=hi);
            generate_scene_with(seed, spec.height, spec.width, n, jitter)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FogParams {
    /// Extinction per unit depth.
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            beta: 1.5,
            airlight: [0.8, 0.8, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FogDensity {
    Light,
    Dense,
}

impl FogParams {
    /// `light` scales the extinction by 0.5, `dense` by 1.5.
    pub fn preset(&self, density: FogDensity) -> Self {
        let k = match density {
            FogDensity::Light => 0.5,
            FogDensity::Dense => 1.5,
        };
        Self {
            beta: self.beta * k,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::invalid(format!("fog extinction {}", self.beta)));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("airlight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Depth proxy for row `r` of `h`: top row is farthest (1), bottom row is
/// `1/h`. Never zero, so very dense fog reaches pure airlight everywhere.
pub fn row_depth(r: usize, h: usize) -> f64 {
    (h - r) as f64 / h as f64
}

/// `I = x * t + A * (1 - t)` with `t = exp(-beta * depth(row))`.
pub fn apply_fog(img: &Image, p: &FogParams) -> Result<Image> {
    p.validate()?;
    let (h, w, channels) = img.dims();
    let mut out = img.clone();
    for c in 0..channels {
        let a = p.airlight[c % 3];
        let plane = out.plane_mut(c);
        for r in 0..h {
            let t = (-p.beta * row_depth(r, h)).exp();
            for v in &mut plane[r * w..(r + 1) * w] {
                *v = *v * t + a * (1.0 - t);
            }
        }
    }
    Ok(out)
}

/// Streak map: each streak is a segment of random length, rotated, zoomed,
/// sheared and translated, then drawn with its own intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainParams {
    pub streak_count: usize,
    /// Segment length range in pixels.
    pub length: (f64, f64),
    /// Rotation range in degrees from vertical.
    pub angle: (f64, f64),
    pub zoom: (f64, f64),
    /// Maximum horizontal shear factor.
    pub shear: f64,
    /// Peak streak intensity in `[0, 1]`.
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streak_count: 40,
            length: (4.0, 10.0),
            angle: (-20.0, 20.0),
            zoom: (0.8, 1.25),
            shear: 0.2,
            intensity: 0.6,
        }
    }
}

impl RainParams {
    fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.length) || !ordered(self.angle) || !ordered(self.zoom) {
            return Err(Error::invalid("rain ranges must be finite and ordered"));
        }
        if self.length.0 < 0.0 || self.zoom.0 <= 0.0 || !(0.0..=1.0).contains(&self.intensity) || !(self.shear >= 0.0) {
            return Err(Error::invalid(format!("bad rain parameters {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if b > a {
        rng.gen_range(a..=b)
    } else {
        a
    }
}

/// Single-channel streak intensities in `[0, 1]`, row-major.
pub fn rain_streaks(height: usize, width: usize, p: &RainParams, seed: u64) -> Result<Vec<f64>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = vec![0.0f64; height * width];
    for _ in 0..p.streak_count {
        let len = uniform(&mut rng, p.length) * uniform(&mut rng, p.zoom);
        let theta = uniform(&mut rng, p.angle).to_radians();
        let shear = if p.shear > 0.0 { rng.gen_range(-p.shear..=p.shear) } else { 0.0 };
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let strength = p.intensity * rng.gen_range(0.6..=1.0);
        let (s, c) = theta.sin_cos();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64 - 0.5;
            // Vertical segment, rotated then sheared.
            let (dx, dy) = (-t * len * s, t * len * c);
            let x = cx + dx + shear * dy;
            let y = cy + dy;
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (col, row) = (x as usize, y as usize);
            if row < height && col < width {
                let v = &mut map[row * width + col];
                *v = v.max(strength);
            }
        }
    }
    Ok(map)
}

/// `1 - (1 - img) * (1 - streaks)` on every channel.
pub fn screen_blend(img: &Image, streaks: &[f64]) -> Result<Image> {
    let (h, w, channels) = img.dims();
    if streaks.len() != h * w {
        return Err(Error::dims(format!(
            "streak map of {} values for a {h}x{w} image",
            streaks.len()
        )));
    }
    let mut out = img.clone();
    for c in 0..channels {
        for (v, &s) in out.plane_mut(c).iter_mut().zip(streaks) {
            // Skipped at zero so streak-free pixels stay bitwise unchanged.
            if s != 0.0 {
                *v = 1.0 - (1.0 - *v) * (1.0 - s);
            }
        }
    }
    Ok(out)
}

pub fn apply_rain(img: &Image, p: &RainParams, seed: u64) -> Result<Image> {
    let streaks = rain_streaks(img.height(), img.width(), p, seed)?;
    screen_blend(img, &streaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NightParams {
    pub gain: [f64; 3],
    pub gamma: f64,
}

impl Default for NightParams {
    fn default() -> Self {
        Self {
            gain: [0.5, 0.5, 0.65],
            gamma: 1.6,
        }
    }
}

/// `(gain[c] * x)^gamma`.
pub fn apply_night(img: &Image, p: &NightParams) -> Result<Image> {
    if p.gain.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) || !(p.gamma >= 1.0) || !p.gamma.is_finite() {
        return Err(Error::invalid(format!("bad night parameters {p:?}")));
    }
    let mut out = img.clone();
    for c in 0..out.channels() {
        let g = p.gain[c % 3];
        for v in out.plane_mut(c) {
            *v = (g * *v).powf(p.gamma);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionParams {
    pub fog: FogParams,
    pub rain: RainParams,
    pub night: NightParams,
    pub sunny_gain: f64,
    pub jitter: JitterParams,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            fog: FogParams::default(),
            rain: RainParams::default(),
            night: NightParams::default(),
            sunny_gain: 1.1,
            jitter: JitterParams::default(),
        }
    }
}

/// Applies one domain's corruption to every CAV image. Labels are kept.
/// Rain seeds are derived from the scene seed and CAV index.
pub fn apply_domain(scene: &Scene, tag: DomainTag, p: &CorruptionParams) -> Result<Scene> {
    let mut out = match tag {
        DomainTag::Clean => scene.clone(),
        DomainTag::Sunny => scene.map_images(|_, img| Ok(img.map(|v| (v * p.sunny_gain).clamp(0.0, 1.0))))?,
        DomainTag::Fog => scene.map_images(|_, img| apply_fog(img, &p.fog))?,
        DomainTag::Rain => scene.map_images(|i, img| {
            apply_rain(img, &p.rain, derive_seed(scene.scene_seed ^ 0x5241_494E, i as u64))
        })?,
        DomainTag::Night => scene.map_images(|_, img| apply_night(img, &p.night))?,
    };
    out.domain_tag = tag;
    Ok(out)
}

/// The four shifted domains built from the same base scenes.
pub fn build_domain_suite(
    base: &[Scene],
    p: &CorruptionParams,
) -> Result<BTreeMap<DomainTag, Vec<Scene>>> {
    if base.is_empty() {
        return Err(Error::invalid("domain suite needs at least one scene"));
    }
    DomainTag::SHIFTED
        .iter()
        .map(|&tag| {
            let scenes = base
                .par_iter()
                .map(|s| apply_domain(s, tag, p))
                .collect::<Result<Vec<_>>>()?;
            Ok((tag, scenes))
        })
        .collect()
}

/// Generic photometric style used to populate an amplitude bank: a random
/// per-channel gain, a haze toward a random gray level, and a gamma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub gain: [f64; 3],
    pub haze: f64,
    pub haze_level: f64,
    pub gamma: f64,
}

impl Style {
    /// Styles centered on the identity: brightness and gamma are
    /// log-uniform and symmetric around 1, tints are mild, and haze may pull
    /// toward a dark or a bright gray.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let brightness = rng.gen_range(-(2f64.ln())..=2f64.ln()).exp();
        let gain = [(); 3].map(|_| brightness * rng.gen_range(0.85..=1.15));
        let gamma_span = (1.0f64 / 0.6).ln();
        Self {
            gain,
            haze: rng.gen_range(0.0..=0.5),
            haze_level: rng.gen_range(0.2..=1.0),
            gamma: rng.gen_range(-gamma_span..=gamma_span).exp(),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for c in 0..out.channels() {
            let g = self.gain[c % 3];
            for v in out.plane_mut(c) {
                let x = (g * *v).clamp(0.0, 1.0).powf(self.gamma);
                *v = x * (1.0 - self.haze) + self.haze_level * self.haze;
            }
        }
        out
    }
}

/// Amplitude bank built from freshly generated, randomly styled scenes.
/// Seeds are independent of any training or test dataset derived from a
/// different base seed.
pub fn style_bank(count: usize, height: usize, width: usize, seed: u64) -> Result<AmplitudeBank> {
    let images = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed ^ 0x5459_4C45, i);
            let scene = generate_scene_with(s, height, width, 1, &JitterParams::none())?;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            Ok(Style::sample(&mut rng).apply(&scene.cav_images[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    AmplitudeBank::build(&images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    dir: String,
    scene_seed: u64,
    domain: DomainTag,
    n_cavs: usize,
    geometry: SceneGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn label_file(class: SegClass) -> String {
    format!("label_{}.ppm", class.name())
}

/// Writes `scene_NNNN/cav_K.ppm`, one `label_<class>.ppm` per class and a
/// `manifest.json` listing seeds, tags and geometry.
pub fn save_scenes(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}");
        let sdir = dir.join(&name);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for (k, img) in scene.cav_images.iter().enumerate() {
            save_ppm(img, sdir.join(format!("cav_{k}.ppm")))?;
        }
        for class in SegClass::ALL {
            save_ppm(&scene.label.class_image(class), sdir.join(label_file(class)))?;
        }
        entries.push(ManifestEntry {
            dir: name,
            scene_seed: scene.scene_seed,
            domain: scene.domain_tag,
            n_cavs: scene.n_cavs(),
            geometry: scene.geometry.clone(),
        });
    }
    let text = serde_json::to_string_pretty(&Manifest { scenes: entries })
        .map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_scenes(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest
        .scenes
        .into_iter()
        .map(|entry| {
            let sdir = dir.join(&entry.dir);
            let cav_images = (0..entry.n_cavs)
                .map(|k| load_ppm(sdir.join(format!("cav_{k}.ppm"))))
                .collect::<Result<Vec<_>>>()?;
            let planes = SegClass::ALL.map(|class| load_ppm(sdir.join(label_file(class))));
            let [a, b, c] = planes;
            let label = SegMask::from_class_images(&[a?, b?, c?])?;
            Ok(Scene {
                cav_images,
                label,
                scene_seed: entry.scene_seed,
                domain_tag: entry.domain,
                geometry: entry.geometry,
            })
        })
        .collect()
}
