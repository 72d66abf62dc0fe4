//! Multi-latent-space prior extraction (LPEB), the condition encoder, and
//! prior-driven feature modulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Conv3x3, Graph, Linear, ParamStore, Real, Tensor, Var};

pub const DEFAULT_LATENT_DIM: usize = 256;
pub const DEFAULT_WIDTH: usize = 64;
pub const UNSHUFFLE_FACTOR: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// The `d × N` prior, one column per tracer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrior<T> {
    values: Tensor<T>,
}

impl<T: Real> LatentPrior<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 || values.numel() == 0 {
            return Err(Error::Shape(format!(
                "latent prior must be a non-empty d×N matrix, got {:?}",
                values.shape()
            )));
        }
        values.ensure_finite("latent prior")?;
        Ok(Self { values })
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            values: Tensor::zeros(&[d, n]),
        }
    }

    pub fn d(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Row-major flattening, `d·N` long.
    pub fn flat(&self) -> &[T] {
        self.values.data()
    }

    pub fn column(&self, k: usize) -> Vec<T> {
        let n = self.n();
        self.values
            .data()
            .iter()
            .skip(k)
            .step_by(n)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpebConfig {
    pub width: usize,
    pub res_blocks: usize,
    pub latent_dim: usize,
}

impl Default for LpebConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            res_blocks: 2,
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }
}

impl LpebConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "LPEB width and latent dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Conv trunk over a 2-channel stack followed by one linear head per output column.
#[derive(Debug, Clone)]
pub struct Lpeb {
    pub config: LpebConfig,
    conv_in: Conv3x3,
    res: Vec<[Conv3x3; 2]>,
    heads: Vec<Linear>,
}

impl Lpeb {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &LpebConfig,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if heads == 0 {
            return Err(Error::Config("LPEB needs at least one head".into()));
        }
        let w = config.width;
        let r2 = UNSHUFFLE_FACTOR * UNSHUFFLE_FACTOR;
        let conv_in = Conv3x3::new(store, &format!("{name}.conv_in"), 2 * r2, w, rng)?;
        let res = (0..config.res_blocks)
            .map(|i| {
                Ok([
                    Conv3x3::new(store, &format!("{name}.res{i}.conv1"), w, w, rng)?,
                    Conv3x3::new(store, &format!("{name}.res{i}.conv2"), w, w, rng)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..heads)
            .map(|k| {
                Ok(Linear::new(
                    store,
                    &format!("{name}.head{k}"),
                    w,
                    config.latent_dim,
                    true,
                    rng,
                )?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            conv_in,
            res,
            heads,
        })
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    /// `[H, W, 2]` → pooled `[width]` feature.
    pub fn trunk<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let x = g.pixel_unshuffle(x, UNSHUFFLE_FACTOR)?;
        let x = self.conv_in.forward(g, store, x)?;
        let mut x = g.leaky_relu(x, LEAKY_SLOPE)?;
        for [c1, c2] in &self.res {
            let h = c1.forward(g, store, x)?;
            let h = g.leaky_relu(h, LEAKY_SLOPE)?;
            let h = c2.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        Ok(g.mean_rows(x)?)
    }

    /// `dual`, `singles[k]`: `[H, W, 1]`. Returns the `[d, N]` prior.
    pub fn prior_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        dual: Var,
        singles: &[Var],
    ) -> Result<Var> {
        if singles.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} tracer images for {} heads",
                singles.len(),
                self.heads.len()
            )));
        }
        let d = self.config.latent_dim;
        let mut cols = Vec::with_capacity(singles.len());
        for (head, &single) in self.heads.iter().zip(singles) {
            let x = g.concat(&[dual, single])?;
            let feat = self.trunk(g, store, x)?;
            let col = head.forward_vec(g, store, feat)?;
            cols.push(g.reshape(col, &[d, 1])?);
        }
        Ok(g.concat(&cols)?)
    }

    /// Single-head encoding of `(dual, masked texture)` to a `[d]` condition.
    pub fn condition_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        dual: Var,
        masked: Var,
    ) -> Result<Var> {
        let x = g.concat(&[dual, masked])?;
        let feat = self.trunk(g, store, x)?;
        Ok(self.heads[0].forward_vec(g, store, feat)?)
    }
}

fn check_images(dual: &Image, others: &[&Image]) -> Result<()> {
    let (h, w) = dual.dims();
    if dual.is_empty() {
        return Err(Error::EmptyImage);
    }
    for o in others {
        dual.ensure_same_dims(o)?;
    }
    for extent in [h, w] {
        if extent % UNSHUFFLE_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "extent {extent} is not divisible by {UNSHUFFLE_FACTOR}"
            )));
        }
    }
    Ok(())
}

/// Prior `L` from a dual image and its per-tracer ground truths.
pub fn extract_msp<T: Real>(
    lpeb: &Lpeb,
    store: &ParamStore<T>,
    dual: &Image,
    singles: &[Image],
) -> Result<LatentPrior<T>> {
    check_images(dual, &singles.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let d = g.constant(dual.to_tensor())?;
    let s = singles
        .iter()
        .map(|s| g.constant(s.to_tensor()))
        .collect::<Result<Vec<_>, _>>()?;
    let l = lpeb.prior_graph(&mut g, store, d, &s)?;
    LatentPrior::new(g.value(l).clone())
}

/// Condition vector from `(dual, dual ⊙ mask)`; no ground truth needed.
pub fn extract_condition<T: Real>(
    encoder: &Lpeb,
    store: &ParamStore<T>,
    dual: &Image,
    masked_texture: &Image,
) -> Result<Tensor<T>> {
    check_images(dual, &[masked_texture])?;
    let mut g = Graph::new();
    let d = g.constant(dual.to_tensor())?;
    let u = g.constant(masked_texture.to_tensor())?;
    let c = encoder.condition_graph(&mut g, store, d, u)?;
    Ok(g.value(c).clone())
}

/// Per-channel scale and shift predicted linearly from the flattened prior.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub scale: Linear,
    pub shift: Linear,
}

impl Modulation {
    /// Scale bias starts at 1, shift bias at 0 and both weight matrices at 0,
    /// so a fresh map is plain normalization.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_len: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 0.0;
        let scale = Linear::with_bound(
            store,
            &format!("{name}.scale"),
            latent_len,
            channels,
            true,
            bound,
            rng,
        )?;
        let shift = Linear::with_bound(
            store,
            &format!("{name}.shift"),
            latent_len,
            channels,
            true,
            bound,
            rng,
        )?;
        let sb = store.get_mut(scale.b.expect("bias"));
        sb.value.data_mut().iter_mut().for_each(|v| *v = T::ONE);
        let hb = store.get_mut(shift.b.expect("bias"));
        hb.value.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
        Ok(Self { scale, shift })
    }

    /// `M′ = scale(L) ⊙ LayerNorm(M) + shift(L)` over the channel (last) axis.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m: Var,
        latent_flat: Var,
    ) -> Result<Var> {
        modulate(g, store, m, latent_flat, &self.scale, &self.shift)
    }
}

/// Prior-driven modulation of `m[..., C]` by the flat prior `latent_flat[d·N]`.
pub fn modulate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    m: Var,
    latent_flat: Var,
    scale_map: &Linear,
    shift_map: &Linear,
) -> Result<Var> {
    let c = g.value(m).last_dim();
    if scale_map.fan_out != c || shift_map.fan_out != c {
        return Err(Error::Shape(format!(
            "modulation maps emit {}/{} values for {c} channels",
            scale_map.fan_out, shift_map.fan_out
        )));
    }
    if g.value(latent_flat).numel() != scale_map.fan_in || scale_map.fan_in != shift_map.fan_in {
        return Err(Error::Shape(format!(
            "latent of {} values for maps over {}",
            g.value(latent_flat).numel(),
            scale_map.fan_in
        )));
    }
    let flat = g.reshape(latent_flat, &[scale_map.fan_in])?;
    let scale = scale_map.forward_vec(g, store, flat)?;
    let shift = shift_map.forward_vec(g, store, flat)?;
    let normed = g.layer_norm(m, NORM_EPS)?;
    let y = g.mul_bias(normed, scale)?;
    Ok(g.add_bias(y, shift)?)
}
