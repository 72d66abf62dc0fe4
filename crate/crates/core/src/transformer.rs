//! Channel-wise (transposed) multi-head attention, gated depth-wise
//! feed-forward, prior-modulated blocks and the separating U-net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent_prior::Modulation;
use crate::numerics::{Conv3x3, Depthwise, Graph, Linear, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub heads_per_level: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    pub blocks_per_level: Vec<usize>,
    pub gdfn_expansion: f64,
    pub tracers: usize,
    pub latent_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl UNetConfig {
    /// Four-level configuration at full width.
    pub fn full() -> Self {
        Self {
            levels: 4,
            heads_per_level: vec![1, 2, 4, 8],
            channels_per_level: vec![48, 96, 192, 384],
            blocks_per_level: vec![3, 5, 6, 6],
            gdfn_expansion: 2.0,
            tracers: 2,
            latent_dim: 256,
        }
    }

    /// Two-level desk-scale configuration.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            heads_per_level: vec![1, 2],
            channels_per_level: vec![8, 16],
            blocks_per_level: vec![1, 1],
            gdfn_expansion: 2.0,
            tracers: 2,
            latent_dim: 32,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.latent_dim * self.tracers
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::Config("U-net needs at least one level".into()));
        }
        for (name, len) in [
            ("heads_per_level", self.heads_per_level.len()),
            ("channels_per_level", self.channels_per_level.len()),
            ("blocks_per_level", self.blocks_per_level.len()),
        ] {
            if len != l {
                return Err(Error::Config(format!(
                    "{name} has {len} entries for {l} levels"
                )));
            }
        }
        for (i, (&h, &c)) in self
            .heads_per_level
            .iter()
            .zip(&self.channels_per_level)
            .enumerate()
        {
            if h == 0 || c == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "level {i}: {h} heads do not divide {c} channels"
                )));
            }
        }
        if !(self.gdfn_expansion >= 1.0) {
            return Err(Error::Config(format!(
                "GDFN expansion {} is below 1",
                self.gdfn_expansion
            )));
        }
        if self.tracers == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "tracer count and latent dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-head attention across channels.
#[derive(Debug, Clone)]
pub struct Mdta {
    pub heads: usize,
    pub channels: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub q_dw: Depthwise,
    pub k_dw: Depthwise,
    pub v_dw: Depthwise,
    pub out: Linear,
    /// One temperature per head, initialized to 1.
    pub gamma: ParamId,
}

impl Mdta {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads for {channels} channels"
            )));
        }
        let c = channels;
        Ok(Self {
            heads,
            channels,
            q: Linear::new(store, &format!("{name}.q"), c, c, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, false, rng)?,
            q_dw: Depthwise::new(store, &format!("{name}.q_dw"), c, rng)?,
            k_dw: Depthwise::new(store, &format!("{name}.k_dw"), c, rng)?,
            v_dw: Depthwise::new(store, &format!("{name}.v_dw"), c, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, false, rng)?,
            gamma: store.add_full(format!("{name}.gamma"), &[heads], 1.0)?,
        })
    }

    /// Attention output plus `residual`; also returns each head's `c×c` map.
    pub fn forward_with_maps<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_prime: Var,
        residual: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(m_prime).to_vec();
        let [h, w, c] = shape[..] else {
            return Err(Error::Shape(format!(
                "mdta expects [H, W, C], got {shape:?}"
            )));
        };
        if c != self.channels {
            return Err(Error::Shape(format!(
                "mdta built for {} channels, got {c}",
                self.channels
            )));
        }
        let project = |g: &mut Graph<T>, pw: &Linear, dw: &Depthwise| -> Result<Var> {
            let x = pw.forward(g, store, m_prime)?;
            let x = dw.forward(g, store, x)?;
            Ok(g.reshape(x, &[h * w, c])?)
        };
        let q = project(g, &self.q, &self.q_dw)?;
        let k = project(g, &self.k, &self.k_dw)?;
        let v = project(g, &self.v, &self.v_dw)?;
        let gamma = g.param(store, self.gamma)?;
        let ch = c / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, head * ch, ch)?,
                    g.slice(k, head * ch, ch)?,
                    g.slice(v, head * ch, ch)?,
                )
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(kt, qh)?;
            let logits = g.div_abs(logits, gamma, head)?;
            let attn = g.softmax(logits)?;
            let at = g.transpose(attn)?;
            outs.push(g.matmul(vh, at)?);
            maps.push(attn);
        }
        let y = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        let y = self.out.forward(g, store, y)?;
        let y = g.reshape(y, &[h, w, c])?;
        Ok((g.add(y, residual)?, maps))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_prime: Var,
        residual: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_maps(g, store, m_prime, residual)?.0)
    }
}

/// Gated feed-forward: `W_out(GELU(dw1(pw1 x)) ⊙ dw2(pw2 x)) + residual`.
#[derive(Debug, Clone)]
pub struct Gdfn {
    pub hidden: usize,
    pub pw1: Linear,
    pub pw2: Linear,
    pub dw1: Depthwise,
    pub dw2: Depthwise,
    pub out: Linear,
}

impl Gdfn {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        expansion: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(expansion >= 1.0) {
            return Err(Error::Config(format!(
                "GDFN expansion {expansion} is below 1"
            )));
        }
        let hidden = (expansion * channels as f64).round() as usize;
        let c = channels;
        Ok(Self {
            hidden,
            pw1: Linear::new(store, &format!("{name}.pw1"), c, hidden, false, rng)?,
            pw2: Linear::new(store, &format!("{name}.pw2"), c, hidden, false, rng)?,
            dw1: Depthwise::new(store, &format!("{name}.dw1"), hidden, rng)?,
            dw2: Depthwise::new(store, &format!("{name}.dw2"), hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, c, false, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_prime: Var,
        residual: Var,
    ) -> Result<Var> {
        let a = self.pw1.forward(g, store, m_prime)?;
        let a = self.dw1.forward(g, store, a)?;
        let a = g.gelu(a)?;
        let b = self.pw2.forward(g, store, m_prime)?;
        let b = self.dw2.forward(g, store, b)?;
        let y = g.mul(a, b)?;
        let y = self.out.forward(g, store, y)?;
        Ok(g.add(y, residual)?)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub mod_attn: Modulation,
    pub mdta: Mdta,
    pub mod_ffn: Modulation,
    pub gdfn: Gdfn,
}

impl BlockParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: f64,
        latent_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mod_attn: Modulation::new(
                store,
                &format!("{name}.mod_attn"),
                latent_len,
                channels,
                rng,
            )?,
            mdta: Mdta::new(store, &format!("{name}.mdta"), channels, heads, rng)?,
            mod_ffn: Modulation::new(store, &format!("{name}.mod_ffn"), latent_len, channels, rng)?,
            gdfn: Gdfn::new(store, &format!("{name}.gdfn"), channels, expansion, rng)?,
        })
    }

    /// Output projections of both sub-layers.
    pub fn output_projections(&self) -> [ParamId; 2] {
        [self.mdta.out.w, self.gdfn.out.w]
    }
}

/// Modulate → attention (+M) → modulate → feed-forward (+input).
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BlockParams,
    m: Var,
    latent_flat: Var,
) -> Result<Var> {
    let m1 = params.mod_attn.forward(g, store, m, latent_flat)?;
    let a = params.mdta.forward(g, store, m1, m)?;
    let m2 = params.mod_ffn.forward(g, store, a, latent_flat)?;
    params.gdfn.forward(g, store, m2, a)
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    conv_in: Conv3x3,
    encoder: Vec<Vec<BlockParams>>,
    down: Vec<Linear>,
    bottleneck: Vec<BlockParams>,
    up: Vec<Linear>,
    fuse: Vec<Linear>,
    decoder: Vec<Vec<BlockParams>>,
    conv_out: Conv3x3,
}

impl UNet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config.channels_per_level;
        let ll = config.latent_len();
        let blocks = |store: &mut ParamStore<T>, rng: &mut R, tag: &str, level: usize| {
            (0..config.blocks_per_level[level])
                .map(|b| {
                    BlockParams::new(
                        store,
                        &format!("{name}.{tag}{level}.block{b}"),
                        c[level],
                        config.heads_per_level[level],
                        config.gdfn_expansion,
                        ll,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let last = config.levels - 1;
        let conv_in = Conv3x3::new(store, &format!("{name}.conv_in"), 2, c[0], rng)?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for i in 0..last {
            encoder.push(blocks(store, rng, "enc", i)?);
            down.push(Linear::new(
                store,
                &format!("{name}.down{i}"),
                4 * c[i],
                c[i + 1],
                false,
                rng,
            )?);
        }
        let bottleneck = blocks(store, rng, "mid", last)?;
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..last).rev() {
            up.push(Linear::new(
                store,
                &format!("{name}.up{i}"),
                c[i + 1],
                4 * c[i],
                false,
                rng,
            )?);
            fuse.push(Linear::new(
                store,
                &format!("{name}.fuse{i}"),
                2 * c[i],
                c[i],
                false,
                rng,
            )?);
            decoder.push(blocks(store, rng, "dec", i)?);
        }
        let conv_out = Conv3x3::new(
            store,
            &format!("{name}.conv_out"),
            c[0],
            config.tracers,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            conv_in,
            encoder,
            down,
            bottleneck,
            up,
            fuse,
            decoder,
            conv_out,
        })
    }

    /// Every transformer block, encoder first.
    pub fn blocks(&self) -> impl Iterator<Item = &BlockParams> {
        self.encoder
            .iter()
            .flatten()
            .chain(&self.bottleneck)
            .chain(self.decoder.iter().flatten())
    }

    /// `dual`, `masked`: `[H, W, 1]`; returns `[H, W, N]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        dual: Var,
        masked: Var,
        latent_flat: Var,
    ) -> Result<Var> {
        let shape = g.shape(dual).to_vec();
        let div = self.config.divisor();
        if shape.len() != 3 || shape[2] != 1 {
            return Err(Error::Shape(format!(
                "U-net input must be [H, W, 1], got {shape:?}"
            )));
        }
        if !shape[0].is_multiple_of(div) || !shape[1].is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "input {}×{} is not divisible by {div}",
                shape[0], shape[1]
            )));
        }
        if g.value(latent_flat).numel() != self.config.latent_len() {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {}",
                g.value(latent_flat).numel(),
                self.config.latent_len()
            )));
        }
        let x = g.concat(&[dual, masked])?;
        let mut x = self.conv_in.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (blocks, down) in self.encoder.iter().zip(&self.down) {
            for b in blocks {
                x = transformer_block(g, store, b, x, latent_flat)?;
            }
            skips.push(x);
            let y = g.pixel_unshuffle(x, 2)?;
            x = down.forward(g, store, y)?;
        }
        for b in &self.bottleneck {
            x = transformer_block(g, store, b, x, latent_flat)?;
        }
        for ((up, fuse), blocks) in self.up.iter().zip(&self.fuse).zip(&self.decoder) {
            let y = up.forward(g, store, x)?;
            let y = g.pixel_shuffle(y, 2)?;
            let skip = skips.pop().expect("one skip per level");
            let y = g.concat(&[y, skip])?;
            x = fuse.forward(g, store, y)?;
            for b in blocks {
                x = transformer_block(g, store, b, x, latent_flat)?;
            }
        }
        let y = self.conv_out.forward(g, store, x)?;
        // Global residual: each tracer starts from an even share of the mixture.
        let n = self.config.tracers;
        let rep = g.concat(&vec![dual; n])?;
        let rep = g.scale(rep, 1.0 / n as f64)?;
        Ok(g.add(y, rep)?)
    }
}

/// Splits `[H, W, N]` into N single-channel images.
pub fn split_channels<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let [h, w, n] = t.shape()[..] else {
        return Err(Error::Shape(format!(
            "expected [H, W, N], got {:?}",
            t.shape()
        )));
    };
    let data = t.to_f64_vec();
    Ok((0..n)
        .map(|k| Image::new(h, w, data.iter().skip(k).step_by(n).copied().collect()).expect("dims"))
        .collect())
}

/// Separates `dual` into N images given the masked texture and a flat prior.
pub fn unet_forward<T: Real>(
    unet: &UNet,
    store: &ParamStore<T>,
    dual: &Image,
    masked_texture: &Image,
    latent_flat: &[T],
) -> Result<Vec<Image>> {
    dual.ensure_same_dims(masked_texture)?;
    let mut g = Graph::new();
    let d = g.constant(dual.to_tensor())?;
    let u = g.constant(masked_texture.to_tensor())?;
    let l = g.constant(Tensor::new(vec![latent_flat.len()], latent_flat.to_vec())?)?;
    let out = unet.forward(&mut g, store, d, u, l)?;
    split_channels(g.value(out))
}
