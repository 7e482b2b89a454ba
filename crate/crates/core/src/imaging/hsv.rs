//! Hexcone HSV conversion with hue expressed as a fraction of a full turn.
//!
//! Pixels with zero saturation (the gray axis) get hue 0. The per-pixel
//! derivative helpers treat the choice of max/min channel as locally
//! constant, which makes hue and saturation piecewise smooth.

use super::ImageRGB;
use crate::error::{Error, Result};

/// Planar HSV image; every plane holds `height * width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageHSV {
    height: usize,
    width: usize,
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

impl ImageHSV {
    pub fn new(height: usize, width: usize, h: Vec<f64>, s: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if n == 0 || h.len() != n || s.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "HSV planes must each hold {height}x{width} values"
            )));
        }
        Ok(Self { height, width, h, s, v })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mean_v(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len() as f64
    }
}

#[inline]
fn argmax3(p: [f64; 3]) -> usize {
    if p[0] >= p[1] && p[0] >= p[2] {
        0
    } else if p[1] >= p[2] {
        1
    } else {
        2
    }
}

#[inline]
fn argmin3(p: [f64; 3], not: usize) -> usize {
    // The min channel must differ from the max channel even on ties.
    let mut best = usize::MAX;
    for k in 0..3 {
        if k != not && (best == usize::MAX || p[k] < p[best]) {
            best = k;
        }
    }
    best
}

/// Converts one RGB pixel to `[h, s, v]`.
#[inline]
pub fn rgb_to_hsv_pixel(p: [f64; 3]) -> [f64; 3] {
    let (h, s, v, _, _) = hsv_pixel_with_grad(p);
    [h, s, v]
}

/// Hue, saturation and value of a pixel along with the gradients of hue
/// and saturation with respect to `(r, g, b)`.
#[inline]
pub fn hsv_pixel_with_grad(p: [f64; 3]) -> (f64, f64, f64, [f64; 3], [f64; 3]) {
    let imax = argmax3(p);
    let imin = argmin3(p, imax);
    let max = p[imax];
    let delta = max - p[imin];
    let mut dh = [0.0; 3];
    let mut ds = [0.0; 3];

    if max <= 0.0 || delta <= 0.0 {
        return (0.0, 0.0, max.max(0.0), dh, ds);
    }

    let s = delta / max;
    for k in 0..3 {
        let dd = f64::from(u8::from(k == imax)) - f64::from(u8::from(k == imin));
        let dm = f64::from(u8::from(k == imax));
        ds[k] = (dd * max - delta * dm) / (max * max);
    }

    // Sector numerator and its gradient: red (g-b), green (b-r), blue (r-g).
    let (num, dnum, offset) = match imax {
        0 => (p[1] - p[2], [0.0, 1.0, -1.0], 0.0),
        1 => (p[2] - p[0], [-1.0, 0.0, 1.0], 2.0),
        _ => (p[0] - p[1], [1.0, -1.0, 0.0], 4.0),
    };
    let mut h6 = num / delta + offset;
    if h6 < 0.0 {
        h6 += 6.0;
    }
    if h6 >= 6.0 {
        h6 -= 6.0;
    }
    for k in 0..3 {
        let dd = f64::from(u8::from(k == imax)) - f64::from(u8::from(k == imin));
        dh[k] = (dnum[k] * delta - num * dd) / (delta * delta) / 6.0;
    }
    (h6 / 6.0, s, max, dh, ds)
}

/// Converts one `[h, s, v]` pixel back to RGB.
#[inline]
pub fn hsv_to_rgb_pixel(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    if s <= 0.0 {
        return [v, v, v];
    }
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(img: &ImageRGB) -> ImageHSV {
    let n = img.num_pixels();
    let (mut h, mut s, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.pixels() {
        let [ph, ps, pv] = rgb_to_hsv_pixel(p);
        h.push(ph);
        s.push(ps);
        v.push(pv);
    }
    ImageHSV { height: img.height(), width: img.width(), h, s, v }
}

pub fn hsv_to_rgb(img: &ImageHSV) -> ImageRGB {
    let mut data = Vec::with_capacity(img.h.len() * 3);
    for i in 0..img.h.len() {
        data.extend(hsv_to_rgb_pixel([img.h[i], img.s[i], img.v[i]]).map(|c| c.clamp(0.0, 1.0)));
    }
    ImageRGB::from_raw_unchecked(img.height, img.width, data).expect("shape preserved")
}

/// Mean of the V channel, i.e. the mean over pixels of `max(r, g, b)`.
pub fn mean_value(img: &ImageRGB) -> f64 {
    img.pixels().map(|p| p[0].max(p[1]).max(p[2])).sum::<f64>() / img.num_pixels() as f64
}
