//! Per-image optimization of the three networks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nets::{build_anet, build_jnet, build_tnet, forward_anet, seeded_rng, LatentMode, NetworkParams, SeededRng};
use crate::objective::{evaluate, LossBreakdown, LossConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::physics::{estimate_airlight_hint, Disentanglement, HINT_PATCH, HINT_TOP_FRACTION};

/// Smallest accepted input side.
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("solver", "epochs must be at least 1"));
        }
        self.adam().validate()?;
        self.loss.validate()
    }
}

/// Everything recorded during one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: SolverConfig,
    pub seed: u64,
    pub precision: String,
    /// Airlight hint the run was anchored to.
    pub hint: [f64; 3],
    /// One entry per epoch.
    pub losses: Vec<LossBreakdown>,
    pub epoch_ms: Vec<f64>,
}

impl RunRecord {
    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.precision == other.precision
            && self.hint == other.hint
            && self.losses.len() == other.losses.len()
            && self
                .losses
                .iter()
                .zip(&other.losses)
                .all(|(a, b)| bits(a) == bits(b))
    }

    pub fn mean_epoch_ms(&self) -> f64 {
        self.epoch_ms.iter().sum::<f64>() / self.epoch_ms.len().max(1) as f64
    }
}

fn bits(b: &LossBreakdown) -> [u64; 6] {
    [b.rec, b.j, b.h, b.kl, b.reg, b.total].map(f64::to_bits)
}

/// Loss term that can be switched off for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblatedTerm {
    H,
    Kl,
    J,
    Reg,
}

impl AblatedTerm {
    pub const ALL: [AblatedTerm; 4] = [AblatedTerm::H, AblatedTerm::Kl, AblatedTerm::J, AblatedTerm::Reg];

    pub fn label(self) -> &'static str {
        match self {
            AblatedTerm::H => "H",
            AblatedTerm::Kl => "KL",
            AblatedTerm::J => "J",
            AblatedTerm::Reg => "Reg",
        }
    }

    pub fn disable(self, cfg: &mut LossConfig) {
        match self {
            AblatedTerm::H => cfg.enable_h = false,
            AblatedTerm::Kl => cfg.enable_kl = false,
            AblatedTerm::J => cfg.enable_j = false,
            AblatedTerm::Reg => cfg.enable_reg = false,
        }
    }
}

/// The three networks and their optimizer state.
struct Model<T> {
    jnet: NetworkParams<T>,
    tnet: NetworkParams<T>,
    anet: NetworkParams<T>,
}

impl<T: Real> Model<T> {
    fn new(seed: u64) -> Self {
        Model {
            jnet: build_jnet(seed),
            tnet: build_tnet(seed.wrapping_add(1)),
            anet: build_anet(seed.wrapping_add(2)),
        }
    }

    /// Forward all three networks; returns (J, T, A) planes and, when
    /// `train` holds a sampler, the loss breakdown after one backward pass.
    fn step(
        &mut self,
        x: &Tensor<T>,
        hint: &ImagePlane,
        cfg: &LossConfig,
        sampler: Option<&mut SeededRng>,
    ) -> Result<(LossBreakdown, [Tensor<T>; 3])> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bj = self.jnet.bind(&mut g);
        let bt = self.tnet.bind(&mut g);
        let ba = self.anet.bind(&mut g);
        let (j, _) = self.jnet.forward(&mut g, &bj, xv, LatentMode::Mean)?;
        let (t, _) = self.tnet.forward(&mut g, &bt, xv, LatentMode::Mean)?;
        let train = sampler.is_some();
        let mode = match sampler {
            Some(rng) => LatentMode::Sample(rng),
            None => LatentMode::Mean,
        };
        let (a, latent) = forward_anet(&self.anet, &mut g, &ba, xv, mode)?;
        let eval = evaluate(&mut g, xv, j, t, a, &latent, hint, cfg)?;
        let planes = [g.value(j).clone(), g.value(t).clone(), g.value(a).clone()];
        if train && eval.breakdown.total.is_finite() {
            g.backward(eval.total)?;
            self.jnet.collect_grads(&g, &bj);
            self.tnet.collect_grads(&g, &bt);
            self.anet.collect_grads(&g, &ba);
        }
        Ok((eval.breakdown, planes))
    }
}

fn first_non_finite(b: &LossBreakdown) -> &'static str {
    [("rec", b.rec), ("j", b.j), ("h", b.h), ("kl", b.kl), ("reg", b.reg)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("total", |(n, _)| n)
}

fn to_disentanglement<T: Real>(planes: &[Tensor<T>; 3], dims: (usize, usize)) -> Result<Disentanglement> {
    Disentanglement {
        radiance: ImagePlane::from_tensor(&planes[0])?,
        transmission: ImagePlane::from_tensor(&planes[1])?,
        airlight: ImagePlane::from_tensor(&planes[2])?,
    }
    .crop(dims.0, dims.1)
}

/// Disentangles `hazy` into radiance, transmission, and airlight.
pub fn dehaze<T: Real>(hazy: &ImagePlane, cfg: &SolverConfig) -> Result<(Disentanglement, RunRecord)> {
    dehaze_observed::<T>(hazy, cfg, |_, _| {})
}

/// [`dehaze`] with a callback invoked after every epoch.
pub fn dehaze_observed<T: Real>(
    hazy: &ImagePlane,
    cfg: &SolverConfig,
    mut observe: impl FnMut(usize, &LossBreakdown),
) -> Result<(Disentanglement, RunRecord)> {
    cfg.validate()?;
    if hazy.channels() != 3 {
        return Err(Error::invalid("dehaze", "expected a 3-channel image"));
    }
    let (h, w) = hazy.dims();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid("dehaze", format!("image is {h}x{w}, both sides must be >= {MIN_SIDE}")));
    }
    let hint = estimate_airlight_hint(hazy, HINT_PATCH, HINT_TOP_FRACTION)?;
    let hint_plane = ImagePlane::filled(1, 1, &hint)?;
    let (padded, dims) = hazy.pad_to_multiple(crate::nets::ANET_STRIDE)?;
    let x = padded.to_tensor::<T>();

    let mut model = Model::<T>::new(cfg.seed);
    let mut sampler = seeded_rng(cfg.seed.wrapping_add(3));
    let mut adam = AdamState::new();
    let adam_cfg = cfg.adam();
    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        precision: T::NAME.to_string(),
        hint,
        losses: Vec::with_capacity(cfg.epochs),
        epoch_ms: Vec::with_capacity(cfg.epochs),
    };
    let mut last_good: Option<[Tensor<T>; 3]> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (breakdown, planes) = model.step(&x, &hint_plane, &cfg.loss, Some(&mut sampler))?;
        if !breakdown.total.is_finite() {
            let last_good = match last_good {
                Some(p) => Some(Box::new(to_disentanglement(&p, dims)?)),
                None => None,
            };
            return Err(Error::NonFiniteLoss {
                epoch,
                term: first_non_finite(&breakdown),
                last_good,
            });
        }
        adam_step(&mut [&mut model.jnet, &mut model.tnet, &mut model.anet], &mut adam, &adam_cfg)?;
        last_good = Some(planes);
        record.losses.push(breakdown);
        record.epoch_ms.push(start.elapsed().as_secs_f64() * 1e3);
        observe(epoch, &breakdown);
    }
    let (_, planes) = model.step(&x, &hint_plane, &cfg.loss, None)?;
    Ok((to_disentanglement(&planes, dims)?, record))
}

/// [`dehaze`] with one loss term switched off.
pub fn ablate<T: Real>(
    hazy: &ImagePlane,
    cfg: &SolverConfig,
    disabled: AblatedTerm,
) -> Result<(Disentanglement, RunRecord)> {
    let mut cfg = cfg.clone();
    disabled.disable(&mut cfg.loss);
    dehaze::<T>(hazy, &cfg)
}
