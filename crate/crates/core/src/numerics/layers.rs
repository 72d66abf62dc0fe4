//! Parameter handles for the layer shapes shared by the model modules.

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Real;
use super::Result;

/// Default init bound `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `y = x·W (+ b)` over the last axis; also serves as a 1×1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_bound(
            store,
            name,
            fan_in,
            fan_out,
            bias,
            fan_in_bound(fan_in),
            rng,
        )
    }

    pub fn with_bound<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{name}.b"), &[fan_out], bound, rng)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Maps a flat `[fan_in]` vector to a flat `[fan_out]` vector.
    pub fn forward_vec<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let row = g.reshape(x, &[1, self.fan_in])?;
        let y = self.forward(g, store, row)?;
        g.reshape(y, &[self.fan_out])
    }
}

/// Full 3×3 convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(9 * cin);
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), &[3, 3, cin, cout], bound, rng)?,
            b: store.add_uniform(format!("{name}.b"), &[cout], bound, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        g.conv3x3(x, w, Some(b))
    }
}

/// Depth-wise 3×3 convolution without bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Depthwise {
    pub w: ParamId,
}

impl Depthwise {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), &[3, 3, c], fan_in_bound(9), rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        g.depthwise3x3(x, w)
    }
}
