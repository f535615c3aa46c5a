//! Full-reference quality metrics on unit-range images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Recorded alongside scores so reports say which SSIM variant produced them.
pub const SSIM_CONVENTION: &str = "single-scale, 11x11 gaussian sigma=1.5, K1=0.01, K2=0.03, valid windows, mean over windows then channels";

fn check_pair(op: &'static str, a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        let dims = |p: &ImagePlane| vec![p.height(), p.width(), p.channels()];
        return Err(Error::shape(op, &dims(a), &dims(b)));
    }
    Ok(())
}

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_pair("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio with peak 1, in dB. `f64::INFINITY` for identical images.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity over all valid windows and channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let k = gaussian_window();
    let sum: f64 = (0..a.channels())
        .map(|c| ssim_plane(a.channel(c), b.channel(c), h, w, &k))
        .sum();
    Ok(sum / a.channels() as f64)
}

/// PSNR/SSIM of one prediction against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    #[serde(with = "inf_as_string")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub ssim_convention: String,
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        MetricReport {
            mean_psnr_db: images.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
            images,
            ssim_convention: SSIM_CONVENTION.to_string(),
        }
    }

    pub fn score(name: impl Into<String>, pred: &ImagePlane, reference: &ImagePlane) -> Result<ImageScore> {
        Ok(ImageScore {
            name: name.into(),
            psnr_db: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
        })
    }

    /// `key: value` lines, one block per image followed by the means.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.images {
            out.push_str(&format!("image: {}\npsnr_db: {}\nssim: {:.6}\n", s.name, fmt_db(s.psnr_db), s.ssim));
        }
        if self.images.len() > 1 {
            out.push_str(&format!(
                "mean_psnr_db: {}\nmean_ssim: {:.6}\n",
                fmt_db(self.mean_psnr_db),
                self.mean_ssim
            ));
        }
        out.push_str(&format!("ssim_convention: {}\n", self.ssim_convention));
        out
    }
}

pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Serializes infinite PSNR as the string `"inf"` since JSON has no infinity.
pub mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected `{t}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: f64) -> ImagePlane {
        ImagePlane::filled(12, 12, &[v, v, v]).unwrap()
    }

    #[test]
    fn psnr_identity_and_closed_form() {
        assert_eq!(psnr(&plane(0.3), &plane(0.3)).unwrap(), f64::INFINITY);
        // uniform offset of 0.1 -> MSE 0.01 -> 20 dB
        let v = psnr(&plane(0.5), &plane(0.6)).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn shape_mismatch() {
        let a = plane(0.1);
        let b = ImagePlane::filled(12, 13, &[0.1, 0.1, 0.1]).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_window_requirement() {
        let a = ImagePlane::filled(10, 30, &[0.1, 0.1, 0.1]).unwrap();
        assert!(ssim(&a, &a).is_err());
        assert_eq!(ssim(&plane(0.4), &plane(0.4)).unwrap(), 1.0);
    }

    #[test]
    fn window_normalized() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k.len(), 11);
    }

    #[test]
    fn report_text_has_sentinel() {
        let s = MetricReport::score("a", &plane(0.2), &plane(0.2)).unwrap();
        let r = MetricReport::from_scores(vec![s]);
        let text = r.to_text();
        assert!(text.contains("psnr_db: inf"));
        assert!(text.contains("ssim: 1.000000"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mean_psnr_db, f64::INFINITY);
    }
}
