use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::diffusion::{denoise_full_graph, forward_sample_graph};
use crate::error::{Error, Result};
use crate::evaluation::PhantomPair;
use crate::image::Image;
use crate::numerics::{rng, Adam, AdamConfig, DType, Graph, Real, Tensor, Var};
use crate::texture::{lbp_map, masked_texture, texture_condition, texture_mask, TextureConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: DType,
    /// Fraction of steps during which the U-net sees the extracted prior
    /// instead of the diffusion rollout.
    pub teacher_forcing: f64,
    pub weight_dm: f64,
    pub weight_tm: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            adam: AdamConfig::default(),
            steps: 2000,
            batch_size: 4,
            seed: 0,
            precision: DType::F32,
            teacher_forcing: 0.25,
            weight_dm: 1.0,
            weight_tm: 1.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Config(
                "teacher forcing fraction outside [0, 1]".into(),
            ));
        }
        if !(self.adam.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }

    pub fn teacher_forced(&self, step: usize) -> bool {
        (step as f64) < self.teacher_forcing * self.steps as f64
    }
}

/// Batch-mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub dm: f64,
    pub tm: f64,
}

/// Image term plus masked-texture term, each a per-image mean absolute error,
/// summed over tracers. Masks come from the targets.
pub fn loss_tm(separated: &[Image], targets: &[Image], texture: &TextureConfig) -> Result<f64> {
    if separated.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} targets",
            separated.len(),
            targets.len()
        )));
    }
    let mae = |a: &Image, b: &Image| -> Result<f64> {
        let d = a.zip_map(b, |x, y| (x - y).abs())?;
        Ok(d.data().iter().sum::<f64>() / d.len().max(1) as f64)
    };
    let mut total = 0.0;
    for (out, target) in separated.iter().zip(targets) {
        let (mask, u) = texture_condition(target, texture.tau)?;
        total += mae(out, target)?;
        total += mae(&masked_texture(out, &mask)?, &u)?;
    }
    Ok(total)
}

/// Frozen randomness of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleNoise<T> {
    pub rollout: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: usize,
}

impl<T: Real> SampleNoise<T> {
    pub fn draw(seed: u64, step: usize, index: usize, latent_len: usize, steps: usize) -> Self {
        let mut r = rng::stream(seed, ((step as u64) << 20) | index as u64);
        let rollout = rng::normal_tensor(&mut r, &[latent_len]);
        let eps = rng::normal_tensor(&mut r, &[latent_len]);
        let t = r.gen_range(1..=steps);
        Self { rollout, eps, t }
    }
}

/// Graph nodes of one sample's losses.
#[derive(Debug, Clone, Copy)]
pub struct SampleGraph {
    pub total: Var,
    pub dm: Var,
    pub tm: Var,
    pub outputs: Var,
}

fn mask_tensor<T: Real>(image: &Image, tau: u8) -> Result<Tensor<T>> {
    let mask = texture_mask(&lbp_map(image)?, tau);
    Ok(mask.as_image().to_tensor())
}

/// Builds the full training graph for one phantom.
pub fn sample_graph<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    pair: &PhantomPair,
    noise: &SampleNoise<T>,
    teacher_forced: bool,
    weights: (f64, f64),
) -> Result<SampleGraph> {
    let store = &model.store;
    let n = model.tracers();
    if pair.singles.len() != n {
        return Err(Error::Shape(format!(
            "phantom has {} tracers, model {n}",
            pair.singles.len()
        )));
    }
    let tau = model.config.texture.tau;
    let dual = g.constant(pair.dual.to_tensor())?;
    let singles = pair
        .singles
        .iter()
        .map(|s| g.constant(s.to_tensor()))
        .collect::<Result<Vec<_>, _>>()?;

    let prior = model.msp.prior_graph(g, store, dual, &singles)?;
    let latent = g.reshape(prior, &[model.latent_dim() * n])?;
    let (_, u_dual) = texture_condition(&pair.dual, tau)?;
    let u_dual = g.constant(u_dual.to_tensor())?;
    let cond = model.condition.condition_graph(g, store, dual, u_dual)?;

    let steps = model.schedule.steps();
    let rollout = g.constant(noise.rollout.clone())?;
    let start = forward_sample_graph(g, latent, &model.schedule, steps, rollout)?;
    let latent_hat = denoise_full_graph(g, store, &model.denoiser, &model.schedule, start, cond)?;
    let eps = g.constant(noise.eps.clone())?;
    let noisy = forward_sample_graph(g, latent, &model.schedule, noise.t, eps)?;
    let eps_hat = model
        .denoiser
        .forward(g, store, &model.schedule, noisy, cond, noise.t)?;
    let dm_roll = g.l1(latent_hat, latent)?;
    let dm_eps = g.l1(eps_hat, eps)?;
    let dm = g.add(dm_roll, dm_eps)?;

    let guide = if teacher_forced { latent } else { latent_hat };
    let outputs = model.unet.forward(g, store, dual, u_dual, guide)?;
    let mut tm = None;
    for (k, (&target, image)) in singles.iter().zip(&pair.singles).enumerate() {
        let out = g.slice(outputs, k, 1)?;
        let mask = g.constant(mask_tensor(image, tau)?)?;
        let img_term = g.l1(out, target)?;
        let mo = g.mul(out, mask)?;
        let mt = g.mul(target, mask)?;
        let tex_term = g.l1(mo, mt)?;
        let s = g.add(img_term, tex_term)?;
        tm = Some(match tm {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let tm = tm.expect("at least one tracer");
    let wdm = g.scale(dm, weights.0)?;
    let wtm = g.scale(tm, weights.1)?;
    let total = g.add(wdm, wtm)?;
    Ok(SampleGraph {
        total,
        dm,
        tm,
        outputs,
    })
}

struct SampleResult<T> {
    dm: f64,
    tm: f64,
    grads: Vec<Option<Tensor<T>>>,
}

fn run_sample<T: Real>(
    model: &Model<T>,
    pair: &PhantomPair,
    noise: &SampleNoise<T>,
    teacher_forced: bool,
    weights: (f64, f64),
    grad_seed: f64,
) -> Result<SampleResult<T>> {
    let mut g = Graph::new();
    let s = sample_graph(&mut g, model, pair, noise, teacher_forced, weights)?;
    g.backward_scaled(s.total, grad_seed)?;
    Ok(SampleResult {
        dm: g.scalar(s.dm).to_f64(),
        tm: g.scalar(s.tm).to_f64(),
        grads: g.param_grads(model.store.len()),
    })
}

/// One optimizer update on `batch`. Per-sample gradients are reduced in batch
/// order, so the result does not depend on `cfg.threads`.
pub fn train_step<T: Real>(
    batch: &[PhantomPair],
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let teacher = cfg.teacher_forced(step);
    let weights = (cfg.weight_dm, cfg.weight_tm);
    let len = model.latent_dim() * model.tracers();
    let steps = model.schedule.steps();
    let noises: Vec<SampleNoise<T>> = (0..batch.len())
        .map(|i| SampleNoise::draw(cfg.seed, step, i, len, steps))
        .collect();
    let seed_grad = 1.0 / batch.len() as f64;
    let m: &Model<T> = model;
    let results: Vec<Result<SampleResult<T>>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            batch
                .par_iter()
                .zip(&noises)
                .map(|(p, nz)| run_sample(m, p, nz, teacher, weights, seed_grad))
                .collect()
        })
    } else {
        batch
            .iter()
            .zip(&noises)
            .map(|(p, nz)| run_sample(m, p, nz, teacher, weights, seed_grad))
            .collect()
    };
    model.store.zero_grads();
    let (mut dm, mut tm) = (0.0, 0.0);
    for r in results {
        let r = r?;
        dm += r.dm;
        tm += r.tm;
        model.store.accumulate_grads(&r.grads);
    }
    let b = batch.len() as f64;
    let (dm, tm) = (dm / b, tm / b);
    let total = cfg.weight_dm * dm + cfg.weight_tm * tm;
    if !total.is_finite() {
        return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite(
            format!("loss at step {step}"),
        )));
    }
    optimizer.step(&mut model.store);
    Ok(StepLosses {
        step,
        total,
        dm,
        tm,
    })
}

/// Model, optimizer and loss history for a training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub history: Vec<StepLosses>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let optimizer = Adam::new(config.adam, &model.store);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Next batch, cycling through `data` in order.
    pub fn batch<'a>(&self, data: &'a [PhantomPair]) -> Vec<&'a PhantomPair> {
        let b = self.config.batch_size;
        (0..b)
            .map(|i| &data[(self.step * b + i) % data.len()])
            .collect()
    }

    pub fn step(&mut self, data: &[PhantomPair]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(Error::Config("no training data".into()));
        }
        let batch: Vec<PhantomPair> = self.batch(data).into_iter().cloned().collect();
        let losses = train_step(
            &batch,
            &mut self.model,
            &mut self.optimizer,
            &self.config,
            self.step,
        )?;
        self.step += 1;
        self.history.push(losses);
        Ok(losses)
    }

    /// Runs until `config.steps`, calling `on_step` after each update.
    pub fn run(
        &mut self,
        data: &[PhantomPair],
        mut on_step: impl FnMut(&StepLosses),
    ) -> Result<()> {
        while self.step < self.config.steps {
            let l = self.step(data)?;
            on_step(&l);
        }
        Ok(())
    }
}
