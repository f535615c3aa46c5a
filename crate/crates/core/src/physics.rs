//! Atmospheric scattering composition, HSV terms, and the dark-channel airlight hint.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Denominator guard for saturation.
pub const SATURATION_EPS: f64 = 1e-6;
pub const HINT_PATCH: usize = 15;
pub const HINT_TOP_FRACTION: f64 = 0.001;

/// The three layers recovered from one hazy image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    /// Scene radiance, three channels.
    pub radiance: ImagePlane,
    /// Transmission, one channel.
    pub transmission: ImagePlane,
    /// Atmospheric light, three channels.
    pub airlight: ImagePlane,
}

impl Disentanglement {
    /// Re-synthesizes the hazy image from the three layers.
    pub fn recompose(&self) -> Result<ImagePlane> {
        compose_planes(&self.radiance, &self.transmission, &self.airlight)
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Disentanglement {
            radiance: self.radiance.crop(height, width)?,
            transmission: self.transmission.crop(height, width)?,
            airlight: self.airlight.crop(height, width)?,
        })
    }
}

fn check_layers(op: &'static str, j: &[usize], t: &[usize], a: &[usize]) -> Result<()> {
    let spatial = |s: &[usize]| s.get(2..4).map(<[usize]>::to_vec);
    if j.len() != 4 || t.len() != 4 || a.len() != 4 {
        return Err(Error::invalid(op, "layers must be [N, C, H, W]"));
    }
    if spatial(j) != spatial(t) {
        return Err(Error::shape(op, j, t));
    }
    if spatial(j) != spatial(a) {
        return Err(Error::shape(op, j, a));
    }
    if t[1] != 1 {
        return Err(Error::invalid(op, "transmission must have one channel"));
    }
    Ok(())
}

/// `I = J * T + A * (1 - T)`, with `T` broadcast across channels.
pub fn compose<T: Real>(g: &mut Graph<T>, radiance: Var, transmission: Var, airlight: Var) -> Result<Var> {
    check_layers("compose", g.shape(radiance), g.shape(transmission), g.shape(airlight))?;
    let direct = g.mul(radiance, transmission)?;
    let veil = g.rsub_scalar(T::one(), transmission);
    let scattered = g.mul(airlight, veil)?;
    g.add(direct, scattered)
}

/// Non-differentiable [`compose`] on planes.
pub fn compose_planes(radiance: &ImagePlane, transmission: &ImagePlane, airlight: &ImagePlane) -> Result<ImagePlane> {
    let dims = |p: &ImagePlane| [1, p.channels(), p.height(), p.width()];
    check_layers("compose", &dims(radiance), &dims(transmission), &dims(airlight))?;
    if radiance.channels() != airlight.channels() {
        return Err(Error::shape("compose", &dims(radiance), &dims(airlight)));
    }
    let t = transmission.data();
    let n = t.len();
    let mut data = Vec::with_capacity(radiance.data().len());
    for c in 0..radiance.channels() {
        let (j, a) = (radiance.channel(c), airlight.channel(c));
        for i in 0..n {
            data.push((j[i] * t[i] + a[i] * (1.0 - t[i])).clamp(0.0, 1.0));
        }
    }
    ImagePlane::new(radiance.height(), radiance.width(), radiance.channels(), data)
}

fn require_rgb<T: Real>(g: &Graph<T>, image: Var, op: &'static str) -> Result<()> {
    match g.shape(image) {
        [_, 3, _, _] => Ok(()),
        s => Err(Error::invalid(op, format!("expected a 3-channel [N, 3, H, W] image, got {s:?}"))),
    }
}

/// HSV value: per-pixel channel maximum.
pub fn hsv_value<T: Real>(g: &mut Graph<T>, image: Var) -> Result<Var> {
    require_rgb(g, image, "hsv_value")?;
    g.channel_max(image)
}

/// HSV saturation `(max - min) / (max + eps)`.
pub fn hsv_saturation<T: Real>(g: &mut Graph<T>, image: Var, eps: T) -> Result<Var> {
    require_rgb(g, image, "hsv_saturation")?;
    if !(eps > T::zero()) {
        return Err(Error::invalid("hsv_saturation", "eps must be positive"));
    }
    let hi = g.channel_max(image)?;
    let lo = g.channel_min(image)?;
    let chroma = g.sub(hi, lo)?;
    let denom = g.add_scalar(hi, eps);
    g.div(chroma, denom)
}

/// Dark channel: minimum over channels and over a `patch x patch` window,
/// with replicate padding at the borders. Row-major, one value per pixel.
pub fn dark_channel(image: &ImagePlane, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::invalid("dark_channel", format!("patch must be odd, got {patch}")));
    }
    let (h, w) = image.dims();
    let r = patch / 2;
    let mut min_c: Vec<f64> = image.channel(0).to_vec();
    for c in 1..image.channels() {
        for (m, &v) in min_c.iter_mut().zip(image.channel(c)) {
            *m = m.min(v);
        }
    }
    // min is separable: rows first, then columns; clamped indices replicate the border
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &min_c[y * w..(y + 1) * w];
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    Ok(out)
}

/// Row-major indices (ascending) of the `ceil(top_fraction * pixels)` pixels
/// with the largest dark channel. Ties are broken by pixel index.
pub fn airlight_pixels(hazy: &ImagePlane, patch: usize, top_fraction: f64) -> Result<Vec<usize>> {
    if hazy.channels() != 3 {
        return Err(Error::invalid("airlight_hint", "expected a 3-channel image"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid("airlight_hint", format!("top_fraction {top_fraction} not in (0, 1]")));
    }
    let dark = dark_channel(hazy, patch)?;
    let m = dark.len();
    let count = ((top_fraction * m as f64).ceil() as usize).clamp(1, m);
    let mut order: Vec<usize> = (0..m).collect();
    let key = |&a: &usize, &b: &usize| dark[b].total_cmp(&dark[a]).then(a.cmp(&b));
    if count < m {
        order.select_nth_unstable_by(count - 1, key);
    }
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// Airlight estimate: the per-channel mean of the hazy image over
/// [`airlight_pixels`].
pub fn estimate_airlight_hint(hazy: &ImagePlane, patch: usize, top_fraction: f64) -> Result<[f64; 3]> {
    let selected = airlight_pixels(hazy, patch, top_fraction)?;
    let mut hint = [0.0; 3];
    for (c, h) in hint.iter_mut().enumerate() {
        let plane = hazy.channel(c);
        *h = selected.iter().map(|&i| plane[i]).sum::<f64>() / selected.len() as f64;
    }
    Ok(hint)
}

/// A full-size plane filled with a global airlight colour.
pub fn hint_plane(hint: [f64; 3], height: usize, width: usize) -> Result<ImagePlane> {
    ImagePlane::filled(height, width, &hint)
}
