//! Loss terms of the disentanglement objective and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Padding, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nets::LatentGaussian;
use crate::physics::{compose, hsv_saturation, hsv_value, SATURATION_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    SumOfSquares,
    /// Squared distance divided by the element count.
    #[default]
    MeanOfSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the airlight smoothness term.
    pub lambda_reg: f64,
    pub enable_rec: bool,
    pub enable_j: bool,
    pub enable_h: bool,
    pub enable_kl: bool,
    pub enable_reg: bool,
    pub norm_mode: NormMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 0.1,
            enable_rec: true,
            enable_j: true,
            enable_h: true,
            enable_kl: true,
            enable_reg: true,
            norm_mode: NormMode::MeanOfSquares,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::invalid("loss config", format!("lambda {} must be >= 0", self.lambda_reg)));
        }
        Ok(())
    }
}

/// Raw (unweighted) value of every term at one step; disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub j: f64,
    pub h: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

fn squared_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(match cfg.norm_mode {
        NormMode::SumOfSquares => g.sum(sq),
        NormMode::MeanOfSquares => g.mean(sq),
    })
}

/// Squared Frobenius distance between the recomposed and the observed image.
pub fn loss_rec<T: Real>(g: &mut Graph<T>, reconstructed: Var, hazy: Var, cfg: &LossConfig) -> Result<Var> {
    if g.shape(reconstructed) != g.shape(hazy) {
        return Err(Error::shape("loss_rec", g.shape(reconstructed), g.shape(hazy)));
    }
    squared_distance(g, reconstructed, hazy, cfg)
}

/// Squared distance between the HSV value and saturation planes of the radiance.
pub fn loss_j<T: Real>(g: &mut Graph<T>, radiance: Var, cfg: &LossConfig) -> Result<Var> {
    let v = hsv_value(g, radiance)?;
    let s = hsv_saturation(g, radiance, T::of(SATURATION_EPS))?;
    squared_distance(g, v, s, cfg)
}

/// Squared distance between the airlight output and the hint. `hint` is either
/// a full-size plane or a `1 x 1` colour broadcast over the output.
pub fn loss_hint<T: Real>(g: &mut Graph<T>, airlight_out: Var, hint: &ImagePlane, cfg: &LossConfig) -> Result<Var> {
    let out_shape = g.shape(airlight_out).to_vec();
    let target = g.constant(hint.to_tensor());
    let hint_shape = g.shape(target).to_vec();
    let broadcastable = hint_shape.len() == out_shape.len()
        && hint_shape
            .iter()
            .zip(&out_shape)
            .all(|(&h, &o)| h == o || h == 1);
    if !broadcastable {
        return Err(Error::shape("loss_hint", &out_shape, &hint_shape));
    }
    squared_distance(g, airlight_out, target, cfg)
}

/// KL divergence of `N(mu, exp(log_var))` from the standard normal, summed
/// over all latent elements.
pub fn loss_kl<T: Real>(g: &mut Graph<T>, latent: &LatentGaussian) -> Result<Var> {
    if g.shape(latent.mu) != g.shape(latent.log_var) {
        return Err(Error::shape("loss_kl", g.shape(latent.mu), g.shape(latent.log_var)));
    }
    let mu2 = g.square(latent.mu);
    let var = g.exp(latent.log_var);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, latent.log_var)?;
    let c = g.add_scalar(b, -T::one());
    let s = g.sum(c);
    Ok(g.mul_scalar(s, T::of(0.5)))
}

/// Number of 8-connected neighbours of each pixel of an `h x w` grid.
fn neighbour_counts(h: usize, w: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| (i.min(1) + (n - 1 - i).min(1) + 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(span(y, h) * span(x, w) - 1.0);
        }
    }
    out
}

/// Smoothness regularizer `(1 / 2m) * sum_i (a_i - mean of the 8-neighbours of a_i)^2`,
/// per channel, with neighbourhoods clipped at the border.
pub fn loss_reg<T: Real>(g: &mut Graph<T>, airlight_out: Var) -> Result<Var> {
    let shape = g.shape(airlight_out).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::invalid("loss_reg", format!("expected [N, C, H, W], got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::invalid("loss_reg", format!("needs at least 2x2 pixels, got {h}x{w}")));
    }
    let m = n * c * h * w;
    // every channel becomes its own batch item so one single-channel kernel serves all
    let planes = g.reshape(airlight_out, &[n * c, 1, h, w])?;
    let mut ring = vec![T::one(); 9];
    ring[4] = T::zero();
    let kernel = g.constant(Tensor::new(vec![1, 1, 3, 3], ring)?);
    let neighbour_sum = g.conv2d(planes, kernel, None, 1, Padding::Same)?;
    let inv_counts: Vec<f64> = neighbour_counts(h, w).iter().map(|k| 1.0 / k).collect();
    let inv_counts = g.constant(Tensor::from_f64(&[1, 1, h, w], &inv_counts)?);
    let neighbour_mean = g.mul(neighbour_sum, inv_counts)?;
    let d = g.sub(planes, neighbour_mean)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.mul_scalar(s, T::of(0.5 / m as f64)))
}

/// Individually computed loss terms; `None` for terms that were not evaluated.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub rec: Option<Var>,
    pub j: Option<Var>,
    pub h: Option<Var>,
    pub kl: Option<Var>,
    pub reg: Option<Var>,
}

/// `rec + j + h + kl + lambda * reg` over the enabled terms.
pub fn loss_total<T: Real>(g: &mut Graph<T>, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let terms = [
        ("rec", cfg.enable_rec, parts.rec, 1.0),
        ("j", cfg.enable_j, parts.j, 1.0),
        ("h", cfg.enable_h, parts.h, 1.0),
        ("kl", cfg.enable_kl, parts.kl, 1.0),
        ("reg", cfg.enable_reg, parts.reg, cfg.lambda_reg),
    ];
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (name, enabled, part, weight) in terms {
        if !enabled {
            continue;
        }
        let v = part.ok_or_else(|| Error::invalid("loss_total", format!("enabled term `{name}` was not computed")))?;
        let raw = g
            .value(v)
            .item()
            .ok_or_else(|| Error::NonScalarRoot(g.shape(v).to_vec()))?
            .to_f64()
            .unwrap_or(f64::NAN);
        match name {
            "rec" => breakdown.rec = raw,
            "j" => breakdown.j = raw,
            "h" => breakdown.h = raw,
            "kl" => breakdown.kl = raw,
            _ => breakdown.reg = raw,
        }
        let weighted = if weight == 1.0 { v } else { g.mul_scalar(v, T::of(weight)) };
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    breakdown.total = g.value(total).data()[0].to_f64().unwrap_or(f64::NAN);
    Ok((total, breakdown))
}

/// Graph handles of one full evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub reconstruction: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Composes the three layers and evaluates every enabled term against the
/// observed image `hazy` and the airlight hint.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    g: &mut Graph<T>,
    hazy: Var,
    radiance: Var,
    transmission: Var,
    airlight: Var,
    latent: &LatentGaussian,
    hint: &ImagePlane,
    cfg: &LossConfig,
) -> Result<Evaluation> {
    let reconstruction = compose(g, radiance, transmission, airlight)?;
    let mut parts = LossParts::default();
    if cfg.enable_rec {
        parts.rec = Some(loss_rec(g, reconstruction, hazy, cfg)?);
    }
    if cfg.enable_j {
        parts.j = Some(loss_j(g, radiance, cfg)?);
    }
    if cfg.enable_h {
        parts.h = Some(loss_hint(g, airlight, hint, cfg)?);
    }
    if cfg.enable_kl {
        parts.kl = Some(loss_kl(g, latent)?);
    }
    if cfg.enable_reg {
        parts.reg = Some(loss_reg(g, airlight)?);
    }
    let (total, breakdown) = loss_total(g, &parts, cfg)?;
    Ok(Evaluation {
        reconstruction,
        total,
        breakdown,
    })
}
