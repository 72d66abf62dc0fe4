//! Few-step diffusion over the compact prior: linear-β schedule, closed-form
//! noising, deterministic reverse iteration and the conditional ε-denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            beta_start: 0.1,
            beta_end: 0.99,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step β, α = 1 − β and ᾱ_t = Π_{i≤t} α_i. Index `t − 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(0.0 <= beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "β range must satisfy 0 ≤ {beta_start} ≤ {beta_end} < 1"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Diffusion(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Coefficients `(sqrt(ᾱ_t), sqrt(1 − ᾱ_t))`.
    pub fn forward_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `(1/sqrt(α_t), (1 − α_t)/sqrt(1 − ᾱ_t))`; the second is `None` when ᾱ_t = 1.
    fn reverse_coefs(&self, t: usize) -> Result<(f64, Option<f64>)> {
        self.check_step(t)?;
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        let c = if ab < 1.0 {
            Some((1.0 - a) / (1.0 - ab).sqrt())
        } else {
            None
        };
        Ok((1.0 / a.sqrt(), c))
    }
}

/// `L_t = sqrt(ᾱ_t)·L + sqrt(1 − ᾱ_t)·ε`.
pub fn forward_sample<T: Real>(
    latent: &Tensor<T>,
    sched: &DiffusionSchedule,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if latent.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs latent {:?}",
            eps.shape(),
            latent.shape()
        )));
    }
    let (a, b) = sched.forward_coefs(t)?;
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    Ok(latent.zip_map(eps, |l, e| a * l + b * e)?)
}

/// One deterministic step `L_t → L_{t−1}` with no added variance.
pub fn reverse_step<T: Real>(
    latent_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    if latent_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!(
            "noise estimate {:?} vs latent {:?}",
            eps_hat.shape(),
            latent_t.shape()
        )));
    }
    let (inv_sqrt_a, c) = sched.reverse_coefs(t)?;
    let c = match c {
        Some(c) => c,
        None if eps_hat.data().iter().all(|&e| e == T::ZERO) => 0.0,
        None => return Err(zero_noise_level(t)),
    };
    let (inv, c) = (T::from_f64(inv_sqrt_a), T::from_f64(c));
    Ok(latent_t.zip_map(eps_hat, |l, e| (l - c * e) * inv)?)
}

fn zero_noise_level(t: usize) -> Error {
    Error::Diffusion(format!(
        "ᾱ_{t} = 1 leaves no noise to remove but the noise estimate is non-zero"
    ))
}

/// Graph form of [`forward_sample`]; gradients reach `latent`.
pub fn forward_sample_graph<T: Real>(
    g: &mut Graph<T>,
    latent: Var,
    sched: &DiffusionSchedule,
    t: usize,
    eps: Var,
) -> Result<Var> {
    let (a, b) = sched.forward_coefs(t)?;
    let x = g.scale(latent, a)?;
    let n = g.scale(eps, b)?;
    Ok(g.add(x, n)?)
}

/// Graph form of [`reverse_step`].
pub fn reverse_step_graph<T: Real>(
    g: &mut Graph<T>,
    latent_t: Var,
    eps_hat: Var,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let (inv_sqrt_a, c) = sched.reverse_coefs(t)?;
    let c = match c {
        Some(c) => c,
        None if g.value(eps_hat).data().iter().all(|&e| e == T::ZERO) => 0.0,
        None => return Err(zero_noise_level(t)),
    };
    let e = g.scale(eps_hat, c)?;
    let x = g.sub(latent_t, e)?;
    Ok(g.scale(x, inv_sqrt_a)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub target: Parameterization,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            target: Parameterization::Clean,
        }
    }
}

/// What the MLP head regresses. Either way the denoiser returns ε̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// The head output is ε̂ itself.
    Noise,
    /// The head output is a clean latent `x`, and
    /// `ε̂ = (L_t − sqrt(ᾱ_t)·x) / sqrt(1 − ᾱ_t)` (zero when `ᾱ_t = 1`).
    Clean,
}

/// Three-layer GELU MLP over `[L_t (d·N), condition (d), one-hot t (T)]` → `ε̂ (d·N)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub latent_len: usize,
    pub cond_len: usize,
    pub steps: usize,
    pub target: Parameterization,
    layers: [Linear; 3],
}

impl Denoiser {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &DenoiserConfig,
        latent_len: usize,
        cond_len: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden == 0 || latent_len == 0 || steps == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        let h = config.hidden;
        let input = latent_len + cond_len + steps;
        Ok(Self {
            latent_len,
            cond_len,
            steps,
            target: config.target,
            layers: [
                Linear::new(store, &format!("{name}.fc1"), input, h, true, rng)?,
                Linear::new(store, &format!("{name}.fc2"), h, h, true, rng)?,
                Linear::new(store, &format!("{name}.fc3"), h, latent_len, true, rng)?,
            ],
        })
    }

    pub fn layers(&self) -> &[Linear; 3] {
        &self.layers
    }

    /// ε̂ for a noisy flat latent at step `t`, shaped like `latent_t`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        sched: &DiffusionSchedule,
        latent_t: Var,
        condition: Var,
        t: usize,
    ) -> Result<Var> {
        if t == 0 || t > self.steps {
            return Err(Error::Diffusion(format!(
                "step {t} outside 1..={}",
                self.steps
            )));
        }
        if sched.steps() != self.steps {
            return Err(Error::Config(format!(
                "denoiser built for {} steps, schedule has {}",
                self.steps,
                sched.steps()
            )));
        }
        let shape = g.shape(latent_t).to_vec();
        if g.value(latent_t).numel() != self.latent_len
            || g.value(condition).numel() != self.cond_len
        {
            return Err(Error::Shape(format!(
                "denoiser expects {} latent and {} condition values, got {:?} and {:?}",
                self.latent_len,
                self.cond_len,
                shape,
                g.shape(condition)
            )));
        }
        let mut onehot = vec![0.0; self.steps];
        onehot[t - 1] = 1.0;
        let onehot = g.constant(Tensor::from_f64(&[self.steps], &onehot)?)?;
        let l = g.reshape(latent_t, &[self.latent_len])?;
        let c = g.reshape(condition, &[self.cond_len])?;
        let x = g.concat(&[l, c, onehot])?;
        let x = self.layers[0].forward_vec(g, store, x)?;
        let x = g.gelu(x)?;
        let x = self.layers[1].forward_vec(g, store, x)?;
        let x = g.gelu(x)?;
        let x = self.layers[2].forward_vec(g, store, x)?;
        let x = g.reshape(x, &shape)?;
        match self.target {
            Parameterization::Noise => Ok(x),
            Parameterization::Clean => {
                let ab = sched.alpha_bar(t);
                if 1.0 - ab <= 0.0 {
                    return Ok(g.scale(x, 0.0)?);
                }
                let x = g.scale(x, ab.sqrt())?;
                let r = g.sub(latent_t, x)?;
                Ok(g.scale(r, 1.0 / (1.0 - ab).sqrt())?)
            }
        }
    }
}

/// Runs all T reverse steps from `start` (taken to be at step T).
pub fn denoise_full_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    denoiser: &Denoiser,
    sched: &DiffusionSchedule,
    start: Var,
    condition: Var,
) -> Result<Var> {
    let mut l = start;
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.forward(g, store, sched, l, condition, t)?;
        l = reverse_step_graph(g, l, eps, t, sched)?;
    }
    Ok(l)
}

pub fn denoise_full<T: Real>(
    store: &ParamStore<T>,
    denoiser: &Denoiser,
    sched: &DiffusionSchedule,
    start: &Tensor<T>,
    condition: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let s = g.constant(start.clone())?;
    let c = g.constant(condition.clone())?;
    let out = denoise_full_graph(&mut g, store, denoiser, sched, s, c)?;
    Ok(g.value(out).clone())
}

/// Mean absolute error over every latent element.
pub fn loss_dm<T: Real>(latent_hat: &Tensor<T>, latent: &Tensor<T>) -> Result<f64> {
    if latent_hat.shape() != latent.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            latent_hat.shape(),
            latent.shape()
        )));
    }
    let n = latent.numel().max(1) as f64;
    Ok(latent_hat
        .data()
        .iter()
        .zip(latent.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_beta_schedule() {
        let s = build_schedule(4, 0.0, 0.0).unwrap();
        assert!(s.alpha_bar.iter().all(|&a| a == 1.0));
        let l = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(reverse_step(&l, &z, 2, &s).unwrap(), l);
        assert!(reverse_step(&l, &l, 2, &s).is_err());
        assert_eq!(forward_sample(&l, &s, 3, &l).unwrap(), l);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(4, 0.3, 0.2).is_err());
        assert!(build_schedule(4, 0.1, 1.0).is_err());
        let s = build_schedule(4, 0.1, 0.4).unwrap();
        let l = Tensor::<f64>::zeros(&[1]);
        assert!(forward_sample(&l, &s, 0, &l).is_err());
        assert!(forward_sample(&l, &s, 5, &l).is_err());
    }

    #[test]
    fn loss_dm_examples() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(loss_dm(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert_eq!(loss_dm(&b, &a).unwrap(), 2.0);
    }
}
