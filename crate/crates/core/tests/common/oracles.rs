//! Slow, direct implementations used as references by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use bevdg::{Image, SegClass, SegMask};

pub type C = (f64, f64);

/// Direct double sum, sign `-1` forward and `+1` inverse (with `1/(HW)`).
pub fn dft(plane: &[C], h: usize, w: usize, sign: f64) -> Vec<C> {
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let t = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (s, c) = t.sin_cos();
                    let (re, im) = plane[y * w + x];
                    acc.0 += re * c - im * s;
                    acc.1 += re * s + im * c;
                }
            }
            out[u * w + v] = acc;
        }
    }
    if sign > 0.0 {
        let n = (h * w) as f64;
        out.iter_mut().for_each(|z| *z = (z.0 / n, z.1 / n));
    }
    out
}

/// Low-frequency amplitude swap written against the direct DFT.
pub fn ampaug(src: &Image, tgt: &Image, ratio: f64) -> Image {
    let (h, w, c) = src.dims();
    let (rh, rw) = ((ratio * h as f64).floor() as usize, (ratio * w as f64).floor() as usize);
    let mut out = Image::zeros(h, w, c);
    for ch in 0..c {
        let to_c = |img: &Image| img.plane(ch).iter().map(|&v| (v, 0.0)).collect::<Vec<C>>();
        let fs = dft(&to_c(src), h, w, -1.0);
        let ft = dft(&to_c(tgt), h, w, -1.0);
        let mixed: Vec<C> = (0..h * w)
            .map(|i| {
                let (u, v) = (i / w, i % w);
                let low = u.min(h - u) <= rh && v.min(w - v) <= rw;
                let (re, im) = fs[i];
                let amp_s = (re * re + im * im).sqrt();
                let amp = if low {
                    (ft[i].0 * ft[i].0 + ft[i].1 * ft[i].1).sqrt()
                } else {
                    amp_s
                };
                let phase = if amp_s == 0.0 { 0.0 } else { im.atan2(re) };
                (amp * phase.cos(), amp * phase.sin())
            })
            .collect();
        let back = dft(&mixed, h, w, 1.0);
        for (o, z) in out.plane_mut(ch).iter_mut().zip(back) {
            *o = z.0.clamp(0.0, 1.0);
        }
    }
    out
}

/// Biased MMD^2 with a Gaussian kernel, one pair at a time.
pub fn mmd2(zs: &[Vec<f64>], zt: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += k(x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(zs, zs) + mean(zt, zt) - 2.0 * mean(zs, zt)
}

/// Per-class IoU by counting pixels, with both-empty scored as 1.
pub fn iou(pred: &Image, label: &SegMask, threshold: f64) -> [f64; 3] {
    let (h, w) = (label.height(), label.width());
    SegClass::ALL.map(|class| {
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..h {
            for x in 0..w {
                let p = pred.get(class.index(), y, x) >= threshold;
                let t = label.get(class, y, x);
                inter += (p && t) as u32;
                union += (p || t) as u32;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    })
}
