//! RMSE, PSNR and SSIM for images and visibility-masked textures.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) with K1 = 0.01 and
//! K2 = 0.03, evaluated at every window position that fits inside the
//! image, per channel, then averaged. Under a mask the window weights are
//! restricted to masked pixels and renormalized, and only windows centered
//! on masked pixels count.

use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;

use crate::image::{Grid, Image, Mask};
use crate::uv::UvTexture;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    /// `+inf` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
}

impl Serialize for Metrics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Metrics", 3)?;
        st.serialize_field("rmse", &self.rmse)?;
        if self.psnr.is_infinite() {
            st.serialize_field("psnr", "inf")?;
        } else {
            st.serialize_field("psnr", &self.psnr)?;
        }
        st.serialize_field("ssim", &self.ssim)?;
        st.end()
    }
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn peak(scale255: bool) -> f64 {
    if scale255 {
        255.0
    } else {
        1.0
    }
}

/// Root mean squared error over masked pixels and all channels, on the
/// `[0, 255]` scale when `scale255` is set.
pub fn rmse(a: &Image, b: &Image, mask: Option<&Mask>, scale255: bool) -> Result<f64> {
    a.check_shape(b, "metric inputs")?;
    if let Some(m) = mask {
        a.check_shape(m, "metric mask")?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.is_none_or(|m| m.data[i]) {
            sum += (a.data[i] - b.data[i]).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("metric over an empty region".into()));
    }
    Ok(peak(scale255) * (sum / (3 * n) as f64).sqrt())
}

pub fn psnr_from_rmse(rmse: f64, scale255: bool) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak(scale255) / rmse).log10()
    }
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean local SSIM. The result does not depend on `scale255`: the stability
/// constants scale with the dynamic range.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    a.check_shape(b, "metric inputs")?;
    if let Some(m) = mask {
        a.check_shape(m, "metric mask")?;
    }
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let inside = |i: usize| mask.is_none_or(|m| m.data[i]);
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in r..h - r {
        for x in r..w - r {
            if !inside(a.index(y, x)) {
                continue;
            }
            let mut wsum = 0.0;
            let mut s = [[0.0f64; 5]; 3];
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let i = a.index(y + dy - r, x + dx - r);
                    if !inside(i) {
                        continue;
                    }
                    let wt = g[dy] * g[dx];
                    wsum += wt;
                    for c in 0..3 {
                        let (p, q) = (a.data[i][c], b.data[i][c]);
                        s[c][0] += wt * p;
                        s[c][1] += wt * q;
                        s[c][2] += wt * p * p;
                        s[c][3] += wt * q * q;
                        s[c][4] += wt * p * q;
                    }
                }
            }
            let mut local = 0.0;
            for sc in &s {
                let [mp, mq, pp, qq, pq] = sc.map(|v| v / wsum);
                let vp = pp - mp * mp;
                let vq = qq - mq * mq;
                let cov = pq - mp * mq;
                local += ((2.0 * mp * mq + c1) * (2.0 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2));
            }
            total += local / 3.0;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::Invalid("no SSIM window centered inside the region".into()));
    }
    Ok(total / windows as f64)
}

pub fn image_metrics(a: &Image, b: &Image, mask: Option<&Mask>, scale255: bool) -> Result<Metrics> {
    let e = rmse(a, b, mask, scale255)?;
    Ok(Metrics {
        rmse: e,
        psnr: psnr_from_rmse(e, scale255),
        ssim: ssim(a, b, mask)?,
    })
}

/// Metrics over the intersection of the two textures' visibility.
pub fn uv_metrics(a: &UvTexture, b: &UvTexture, scale255: bool) -> Result<Metrics> {
    let mask: Mask = a.visibility.and(&b.visibility);
    if mask.count() == 0 {
        return Err(Error::Invalid("textures share no visible texel".into()));
    }
    image_metrics(&a.color, &b.color, Some(&mask), scale255)
}

/// Per-pixel absolute error magnitude, for inspection images.
pub fn error_map(a: &Image, b: &Image) -> Result<Grid<f64>> {
    a.check_shape(b, "metric inputs")?;
    Ok(Grid {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs().max()).collect(),
    })
}
