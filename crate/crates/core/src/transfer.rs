//! Haze transfer: reuse the transmission and airlight recovered from one hazy
//! image to synthesize haze over a different clean image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::image::{load_gray, load_image, save_png16_gray, save_png8, ImagePlane};
use crate::physics::compose_planes;
use crate::solver::{dehaze, RunRecord, SolverConfig};

pub const STYLE_TRANSMISSION_FILE: &str = "style_transmission.png";
pub const STYLE_AIRLIGHT_FILE: &str = "style_airlight.png";
pub const STYLE_META_FILE: &str = "style.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resize {
    #[default]
    Bilinear,
}

/// Transmission and airlight planes of a hazy source image.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeStyle {
    pub transmission: ImagePlane,
    pub airlight: ImagePlane,
    /// `(height, width)` of the source image.
    pub source_dims: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct StyleMeta {
    version: u32,
    source_height: usize,
    source_width: usize,
    transmission: String,
    airlight: String,
}

impl HazeStyle {
    pub fn new(transmission: ImagePlane, airlight: ImagePlane) -> Result<Self> {
        if transmission.channels() != 1 || airlight.channels() != 3 {
            return Err(Error::invalid("haze style", "expects 1-channel transmission and 3-channel airlight"));
        }
        if transmission.dims() != airlight.dims() {
            return Err(Error::invalid("haze style", "transmission and airlight dims differ"));
        }
        let source_dims = transmission.dims();
        Ok(HazeStyle {
            transmission,
            airlight,
            source_dims,
        })
    }

    /// Writes the transmission as a 16-bit grayscale PNG, the airlight as an
    /// 8-bit RGB PNG, and a JSON sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_png16_gray(&self.transmission, dir.join(STYLE_TRANSMISSION_FILE))?;
        save_png8(&self.airlight, dir.join(STYLE_AIRLIGHT_FILE))?;
        let meta = StyleMeta {
            version: 1,
            source_height: self.source_dims.0,
            source_width: self.source_dims.1,
            transmission: STYLE_TRANSMISSION_FILE.into(),
            airlight: STYLE_AIRLIGHT_FILE.into(),
        };
        let path = dir.join(STYLE_META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("style metadata serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STYLE_META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StyleMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "style metadata",
            reason: e.to_string(),
        })?;
        if meta.version != 1 {
            return Err(Error::Format {
                what: "style metadata",
                reason: format!("unsupported version {}", meta.version),
            });
        }
        let style = HazeStyle::new(load_gray(dir.join(&meta.transmission))?, load_image(dir.join(&meta.airlight))?)?;
        if style.source_dims != (meta.source_height, meta.source_width) {
            return Err(Error::Format {
                what: "style metadata",
                reason: "recorded dims do not match the planes".into(),
            });
        }
        Ok(style)
    }
}

/// Runs the solver on `hazy` and keeps its transmission and airlight.
pub fn extract_style<T: Real>(hazy: &ImagePlane, cfg: &SolverConfig) -> Result<(HazeStyle, RunRecord)> {
    let (layers, record) = dehaze::<T>(hazy, cfg)?;
    Ok((HazeStyle::new(layers.transmission, layers.airlight)?, record))
}

/// Hazes `clean` with `style`: the style planes are resized to the clean
/// image and combined as `clean * T + A * (1 - T)`.
pub fn apply_style(clean: &ImagePlane, style: &HazeStyle, resize: Resize) -> Result<ImagePlane> {
    if clean.channels() != 3 {
        return Err(Error::invalid("apply_style", "expected a 3-channel clean image"));
    }
    let (h, w) = clean.dims();
    let (t, a) = match resize {
        Resize::Bilinear => (style.transmission.resize_bilinear(h, w)?, style.airlight.resize_bilinear(h, w)?),
    };
    compose_planes(clean, &t, &a)
}
