use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_full, Denoiser, DenoiserConfig, DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent_prior::{extract_condition, LatentPrior, Lpeb, LpebConfig};
use crate::numerics::{rng, ParamStore, Real};
use crate::texture::{fuse_with_own_texture, texture_condition, TextureConfig};
use crate::transformer::{unet_forward, UNet, UNetConfig};

/// RNG stream reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    /// `latent_dim` is taken from `unet`.
    pub lpeb: LpebConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub texture: TextureConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn toy() -> Self {
        let unet = UNetConfig::toy();
        Self {
            lpeb: LpebConfig {
                width: 16,
                res_blocks: 2,
                latent_dim: unet.latent_dim,
            },
            denoiser: DenoiserConfig {
                hidden: 128,
                ..Default::default()
            },
            schedule: ScheduleConfig::default(),
            texture: TextureConfig::default(),
            unet,
        }
    }

    pub fn full() -> Self {
        let unet = UNetConfig::full();
        Self {
            lpeb: LpebConfig {
                latent_dim: unet.latent_dim,
                ..LpebConfig::default()
            },
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            texture: TextureConfig::default(),
            unet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.lpeb.validate()?;
        self.texture.validate()?;
        self.schedule.build()?;
        if self.lpeb.latent_dim != self.unet.latent_dim {
            return Err(Error::Config(format!(
                "LPEB latent dim {} differs from U-net latent dim {}",
                self.lpeb.latent_dim, self.unet.latent_dim
            )));
        }
        Ok(())
    }
}

/// All trainable parts sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub store: ParamStore<T>,
    pub msp: Lpeb,
    pub condition: Lpeb,
    pub denoiser: Denoiser,
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let d = config.unet.latent_dim;
        let n = config.unet.tracers;
        let msp = Lpeb::new(&mut store, "msp", &config.lpeb, n, &mut r)?;
        let condition = Lpeb::new(&mut store, "cond", &config.lpeb, 1, &mut r)?;
        let schedule = config.schedule.build()?;
        let denoiser = Denoiser::new(
            &mut store,
            "denoiser",
            &config.denoiser,
            d * n,
            d,
            schedule.steps(),
            &mut r,
        )?;
        let unet = UNet::new(&mut store, "unet", &config.unet, &mut r)?;
        Ok(Self {
            config: config.clone(),
            init_seed: seed,
            store,
            msp,
            condition,
            denoiser,
            unet,
            schedule,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.unet.latent_dim
    }

    pub fn tracers(&self) -> usize {
        self.config.unet.tracers
    }
}

/// Output of [`separate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Separation<T> {
    pub fused: Vec<Image>,
    pub raw: Vec<Image>,
    pub prior: LatentPrior<T>,
}

/// Inference: condition → prior from noise → U-net → texture fusion.
pub fn separate<T: Real>(
    dual: &Image,
    model: &Model<T>,
    texture: &TextureConfig,
    seed: u64,
) -> Result<Separation<T>> {
    texture.validate()?;
    let div = model.config.unet.divisor().max(2);
    if !dual.height().is_multiple_of(div) || !dual.width().is_multiple_of(div) {
        return Err(Error::Shape(format!(
            "input {:?} is not divisible by {div}",
            dual.dims()
        )));
    }
    let (_, u) = texture_condition(dual, texture.tau)?;
    let cond = extract_condition(&model.condition, &model.store, dual, &u)?;
    let (d, n) = (model.latent_dim(), model.tracers());
    let mut r = rng::stream(seed, 0);
    let start = rng::normal_tensor::<T>(&mut r, &[d, n]);
    let prior = denoise_full(
        &model.store,
        &model.denoiser,
        &model.schedule,
        &start,
        &cond,
    )?;
    let prior = LatentPrior::new(prior)?;
    let raw = unet_forward(&model.unet, &model.store, dual, &u, prior.flat())?;
    let fused = raw
        .iter()
        .map(|x| fuse_with_own_texture(x, texture))
        .collect::<Result<Vec<_>>>()?;
    Ok(Separation { fused, raw, prior })
}
