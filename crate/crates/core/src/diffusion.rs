//! A toy denoising diffusion model over scene parameter vectors.
//!
//! The denoiser is a two-hidden-layer feedforward network trained with the
//! standard noise-prediction MSE objective. Backpropagation is written out
//! by hand (the topology is small and fixed) and every gradient path is
//! covered by finite-difference tests. Reverse steps are diagonal Gaussians
//! with analytic log-densities, which is what makes trajectories usable for
//! policy-gradient fine-tuning.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{SceneParams, SCENE_DIM};

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DNZCKPT\x01";
/// Checkpoint layout version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reverse-step standard deviation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReverseVariance {
    /// `sigma_t^2 = beta_t`, the simple choice (the default).
    Beta,
    /// `sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`,
    /// the forward-process posterior variance, floored at `beta_1` so the
    /// degenerate t = 1 step keeps a usable density. Disperses far less at
    /// small t, which matters for short schedules.
    Posterior,
}

/// Per-step variances and derived quantities of the forward process.
///
/// Steps are indexed 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`,
    /// with `sigma_t^2 = beta_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with(steps, beta_start, beta_end, ReverseVariance::Beta)
    }

    /// As [`NoiseSchedule::linear`] with an explicit reverse-variance choice.
    pub fn linear_with(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        variance: ReverseVariance,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Validation(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let f = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            betas.push(beta_start + f * (beta_end - beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas: Vec<f64> = match variance {
            ReverseVariance::Beta => betas.iter().map(|b| b.sqrt()).collect(),
            ReverseVariance::Posterior => (0..steps)
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    let var = (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i];
                    var.max(betas[0]).sqrt()
                })
                .collect(),
        };
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// The default 50-step schedule, betas from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(50, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Domain(format!(
                "step {} outside schedule range 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Apply the closed-form forward process:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::LengthMismatch {
            left: x0.len(),
            right: eps.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let scale = ab.sqrt();
    let noise_scale = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| scale * x + noise_scale * e)
        .collect())
}

/// Class id conditioning the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition(pub usize);

/// Network shape. The input is the state concatenated with a sinusoidal
/// time embedding and a learned per-class embedding vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub state_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            state_dim: SCENE_DIM,
            time_dim: 16,
            cond_dim: 8,
            hidden_dim: 128,
            n_classes: 2,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0
            || self.time_dim == 0
            || self.cond_dim == 0
            || self.hidden_dim == 0
            || self.n_classes == 0
        {
            return Err(Error::Validation("all topology dimensions must be >= 1".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Validation("time embedding dimension must be even".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.time_dim + self.cond_dim
    }

    fn sizes(&self) -> [usize; 7] {
        let h = self.hidden_dim;
        let i = self.input_dim();
        let s = self.state_dim;
        [h * i, h, h * h, h, s * h, s, self.n_classes * self.cond_dim]
    }

    pub fn param_count(&self) -> usize {
        self.sizes().iter().sum()
    }
}

struct Views<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: &'a [f64],
    emb: &'a [f64],
}

struct ViewsMut<'a> {
    w1: &'a mut [f64],
    b1: &'a mut [f64],
    w2: &'a mut [f64],
    b2: &'a mut [f64],
    w3: &'a mut [f64],
    b3: &'a mut [f64],
    emb: &'a mut [f64],
}

fn views<'a>(params: &'a [f64], topo: &Topology) -> Views<'a> {
    let s = topo.sizes();
    let (w1, rest) = params.split_at(s[0]);
    let (b1, rest) = rest.split_at(s[1]);
    let (w2, rest) = rest.split_at(s[2]);
    let (b2, rest) = rest.split_at(s[3]);
    let (w3, rest) = rest.split_at(s[4]);
    let (b3, emb) = rest.split_at(s[5]);
    Views {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        emb,
    }
}

fn views_mut<'a>(params: &'a mut [f64], topo: &Topology) -> ViewsMut<'a> {
    let s = topo.sizes();
    let (w1, rest) = params.split_at_mut(s[0]);
    let (b1, rest) = rest.split_at_mut(s[1]);
    let (w2, rest) = rest.split_at_mut(s[2]);
    let (b2, rest) = rest.split_at_mut(s[3]);
    let (w3, rest) = rest.split_at_mut(s[4]);
    let (b3, emb) = rest.split_at_mut(s[5]);
    ViewsMut {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        emb,
    }
}

fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        let phase = t as f64 * freq;
        emb.push(phase.sin());
        emb.push(phase.cos());
    }
    emb
}

/// `out = W x + b` with `W` stored row-major.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let in_dim = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bias)| {
            let row = &w[i * in_dim..(i + 1) * in_dim];
            bias + row.iter().zip(x).map(|(wij, xj)| wij * xj).sum::<f64>()
        })
        .collect()
}

struct ForwardCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
    class: usize,
}

/// The noise-prediction network: flat parameter vector plus topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    topo: Topology,
    params: Vec<f64>,
}

impl Denoiser {
    /// He-style initialization for the weight matrices, zero biases, and
    /// small random class embeddings.
    pub fn init<R: Rng + ?Sized>(topo: Topology, rng: &mut R) -> Result<Self> {
        topo.validate()?;
        let mut params = vec![0.0; topo.param_count()];
        {
            let v = views_mut(&mut params, &topo);
            let mut fill = |w: &mut [f64], fan_in: usize| {
                let std = (2.0 / fan_in as f64).sqrt();
                for slot in w.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = std * z;
                }
            };
            fill(v.w1, topo.input_dim());
            fill(v.w2, topo.hidden_dim);
            fill(v.w3, topo.hidden_dim);
            for slot in v.emb.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = 0.5 * z;
            }
        }
        Ok(Self { topo, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_inputs(&self, x: &[f64], c: Condition) -> Result<()> {
        if x.len() != self.topo.state_dim {
            return Err(Error::Domain(format!(
                "state dimension {} does not match topology {}",
                x.len(),
                self.topo.state_dim
            )));
        }
        if c.0 >= self.topo.n_classes {
            return Err(Error::Domain(format!(
                "condition class {} outside 0..{}",
                c.0, self.topo.n_classes
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64], t: usize, c: Condition) -> Result<ForwardCache> {
        self.check_inputs(x, c)?;
        let v = views(&self.params, &self.topo);
        let mut input = Vec::with_capacity(self.topo.input_dim());
        input.extend_from_slice(x);
        input.extend(time_embedding(t, self.topo.time_dim));
        let emb_row = &v.emb[c.0 * self.topo.cond_dim..(c.0 + 1) * self.topo.cond_dim];
        input.extend_from_slice(emb_row);

        let z1 = affine(v.w1, v.b1, &input);
        let h1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
        let z2 = affine(v.w2, v.b2, &h1);
        let h2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();
        let out = affine(v.w3, v.b3, &h2);
        Ok(ForwardCache {
            input,
            z1,
            h1,
            z2,
            h2,
            out,
            class: c.0,
        })
    }

    /// Predicted noise for state `x` at step `t` under class `c`.
    pub fn predict_noise(&self, x: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, c)?.out)
    }

    /// Accumulate `d(out) -> d(params)` into `grad` for one cached forward.
    fn backprop_into(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let topo = &self.topo;
        let v = views(&self.params, topo);
        let g = views_mut(grad, topo);
        let h = topo.hidden_dim;
        let in_dim = topo.input_dim();

        // Output layer.
        let mut d_h2 = vec![0.0; h];
        for (i, &d) in d_out.iter().enumerate() {
            g.b3[i] += d;
            let w_row = &v.w3[i * h..(i + 1) * h];
            let g_row = &mut g.w3[i * h..(i + 1) * h];
            for j in 0..h {
                g_row[j] += d * cache.h2[j];
                d_h2[j] += d * w_row[j];
            }
        }
        // Second hidden layer.
        let mut d_h1 = vec![0.0; h];
        for i in 0..h {
            if cache.z2[i] <= 0.0 {
                continue;
            }
            let d = d_h2[i];
            g.b2[i] += d;
            let w_row = &v.w2[i * h..(i + 1) * h];
            let g_row = &mut g.w2[i * h..(i + 1) * h];
            for j in 0..h {
                g_row[j] += d * cache.h1[j];
                d_h1[j] += d * w_row[j];
            }
        }
        // First hidden layer, plus the class-embedding slice of the input.
        let mut d_input = vec![0.0; in_dim];
        for i in 0..h {
            if cache.z1[i] <= 0.0 {
                continue;
            }
            let d = d_h1[i];
            g.b1[i] += d;
            let w_row = &v.w1[i * in_dim..(i + 1) * in_dim];
            let g_row = &mut g.w1[i * in_dim..(i + 1) * in_dim];
            for j in 0..in_dim {
                g_row[j] += d * cache.input[j];
                d_input[j] += d * w_row[j];
            }
        }
        let emb_offset = topo.state_dim + topo.time_dim;
        let g_emb_row =
            &mut g.emb[cache.class * topo.cond_dim..(cache.class + 1) * topo.cond_dim];
        for k in 0..topo.cond_dim {
            g_emb_row[k] += d_input[emb_offset + k];
        }
    }

    /// Write a versioned binary checkpoint: magic, version, topology, then
    /// parameters as little-endian 64-bit floats.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(48 + 8 * self.params.len());
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [
            self.topo.state_dim,
            self.topo.time_dim,
            self.topo.cond_dim,
            self.topo.hidden_dim,
            self.topo.n_classes,
        ] {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
            bytes
                .get(range)
                .ok_or_else(|| Error::Parse("checkpoint truncated".into()))
        };
        if take(0..8)? != CHECKPOINT_MAGIC {
            return Err(Error::VersionMismatch {
                expected: "checkpoint magic".into(),
                found: "unrecognized header".into(),
            });
        }
        let version = u32::from_le_bytes(take(8..12)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let mut dims = [0usize; 5];
        for (i, dim) in dims.iter_mut().enumerate() {
            let start = 12 + 4 * i;
            *dim = u32::from_le_bytes(take(start..start + 4)?.try_into().unwrap()) as usize;
        }
        let topo = Topology {
            state_dim: dims[0],
            time_dim: dims[1],
            cond_dim: dims[2],
            hidden_dim: dims[3],
            n_classes: dims[4],
        };
        topo.validate()?;
        let count = u64::from_le_bytes(take(32..40)?.try_into().unwrap()) as usize;
        if count != topo.param_count() {
            return Err(Error::Parse(format!(
                "checkpoint parameter count {} does not match topology ({})",
                count,
                topo.param_count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            let start = 40 + 8 * i;
            params.push(f64::from_le_bytes(take(start..start + 8)?.try_into().unwrap()));
        }
        if bytes.len() != 40 + 8 * count {
            return Err(Error::Parse("checkpoint has trailing bytes".into()));
        }
        Ok(Self { topo, params })
    }
}

/// Diagonal-Gaussian log-density with shared standard deviation.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != mean.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: mean.len(),
        });
    }
    let d = x.len() as f64;
    let quad: f64 = x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| {
            let z = (xi - mi) / sigma;
            z * z
        })
        .sum();
    Ok(-0.5 * quad - d * (0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln()))
}

fn reverse_mean(denoiser: &Denoiser, x_t: &[f64], t: usize, c: Condition, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let eps_hat = denoiser.predict_noise(x_t, t, c)?;
    let alpha = schedule.alpha(t);
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    Ok(x_t
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect())
}

/// One recorded denoising chain x_T..x_0 with per-step means and analytic
/// log-probabilities under the policy that sampled it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: Condition,
    /// `states[k]` is x_{T-k}; the last entry is x_0.
    pub states: Vec<Vec<f64>>,
    /// `means[k]` is the reverse mean for the transition states[k] -> states[k+1].
    pub means: Vec<Vec<f64>>,
    /// Log-probability of each transition under the sampling policy.
    pub log_probs: Vec<f64>,
    /// Filled in by the reinforcement-learning stage.
    pub reward: Option<f64>,
}

/// Borrowed view of one reverse transition.
pub struct Transition<'a> {
    pub t: usize,
    pub x_t: &'a [f64],
    pub x_prev: &'a [f64],
    pub mean: &'a [f64],
    pub log_prob: f64,
}

impl Trajectory {
    pub fn x0(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn x0_scene(&self) -> Result<SceneParams> {
        SceneParams::from_slice(self.x0())
    }

    /// Transitions in sampling order: t = T, T-1, .., 1.
    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        let t_max = self.means.len();
        (0..self.means.len()).map(move |k| Transition {
            t: t_max - k,
            x_t: &self.states[k],
            x_prev: &self.states[k + 1],
            mean: &self.means[k],
            log_prob: self.log_probs[k],
        })
    }

    /// Check the bookkeeping identity: every stored log-probability equals
    /// the Gaussian formula recomputed from the stored states and means.
    pub fn verify_log_probs(&self, schedule: &NoiseSchedule, tol: f64) -> Result<()> {
        for tr in self.transitions() {
            let expect = gaussian_log_density(tr.x_prev, tr.mean, schedule.sigma(tr.t))?;
            if (expect - tr.log_prob).abs() > tol {
                return Err(Error::Numerical(format!(
                    "stored log-prob {} deviates from recomputed {} at step {}",
                    tr.log_prob, expect, tr.t
                )));
            }
        }
        Ok(())
    }
}

/// Run the reverse chain from Gaussian noise and record every step.
pub fn sample<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    c: Condition,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Trajectory> {
    let t_max = schedule.steps();
    let dim = denoiser.topology().state_dim;
    let mut states = Vec::with_capacity(t_max + 1);
    let mut means = Vec::with_capacity(t_max);
    let mut log_probs = Vec::with_capacity(t_max);

    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    states.push(x.clone());
    for t in (1..=t_max).rev() {
        let mean = reverse_mean(denoiser, &x, t, c, schedule)?;
        let sigma = schedule.sigma(t);
        let next: Vec<f64> = mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling(format!("non-finite state at step {t}")));
        }
        log_probs.push(gaussian_log_density(&next, &mean, sigma)?);
        means.push(mean);
        states.push(next.clone());
        x = next;
    }
    Ok(Trajectory {
        condition: c,
        states,
        means,
        log_probs,
        reward: None,
    })
}

/// Log-probability of one reverse transition under the current parameters.
pub fn step_logprob(
    denoiser: &Denoiser,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: Condition,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    schedule.check_t(t)?;
    let mean = reverse_mean(denoiser, x_t, t, c, schedule)?;
    gaussian_log_density(x_prev, &mean, schedule.sigma(t))
}

/// Log-probability of one reverse transition plus its exact gradient with
/// respect to every parameter, via the chain rule through the reverse mean.
pub fn step_logprob_grad(
    denoiser: &Denoiser,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: Condition,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; denoiser.param_count()];
    let log_prob = step_logprob_grad_into(denoiser, x_t, x_prev, t, c, schedule, &mut grad)?;
    Ok((log_prob, grad))
}

/// As [`step_logprob_grad`], accumulating `weight * grad` into an existing
/// buffer to avoid reallocating inside training loops.
pub fn step_logprob_grad_into(
    denoiser: &Denoiser,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: Condition,
    schedule: &NoiseSchedule,
    grad: &mut [f64],
) -> Result<f64> {
    schedule.check_t(t)?;
    let sigma = schedule.sigma(t);
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let cache = denoiser.forward_cached(x_t, t, c)?;
    let alpha = schedule.alpha(t);
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mean: Vec<f64> = x_t
        .iter()
        .zip(&cache.out)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    let log_prob = gaussian_log_density(x_prev, &mean, sigma)?;
    // d log p / d mean_i = (x_prev_i - mean_i) / sigma^2
    // d mean_i / d eps_hat_i = -coef / sqrt(alpha)
    let var = sigma * sigma;
    let d_out: Vec<f64> = x_prev
        .iter()
        .zip(&mean)
        .map(|(xp, m)| (xp - m) / var * (-coef * inv_sqrt_alpha))
        .collect();
    denoiser.backprop_into(&cache, &d_out, grad);
    Ok(log_prob)
}

/// Mean squared error of noise prediction over a batch, with its gradient.
///
/// Each batch entry is (clean state, step, noise draw, condition); the loss
/// is the mean over entries of the per-dimension mean squared residual.
pub fn mse_loss_and_grad(
    denoiser: &Denoiser,
    batch: &[(Vec<f64>, usize, Vec<f64>, Condition)],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut grad = vec![0.0; denoiser.param_count()];
    let mut loss = 0.0;
    let b = batch.len() as f64;
    for (x0, t, eps, c) in batch {
        let x_t = forward_noise(x0, *t, eps, schedule)?;
        let cache = denoiser.forward_cached(&x_t, *t, *c)?;
        let d = x0.len() as f64;
        let mut d_out = Vec::with_capacity(x0.len());
        for (pred, true_eps) in cache.out.iter().zip(eps) {
            let residual = pred - true_eps;
            loss += residual * residual / (b * d);
            d_out.push(2.0 * residual / (b * d));
        }
        denoiser.backprop_into(&cache, &d_out, &mut grad);
    }
    Ok((loss, grad))
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Pretraining hyperparameters for the noise-prediction objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Train a fresh denoiser on samples drawn from `data`; returns the model
/// and the per-step loss curve.
pub fn train_denoiser<R, F>(
    data: &mut F,
    cfg: &PretrainConfig,
    topo: Topology,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Denoiser, Vec<f64>)>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> (SceneParams, Condition),
{
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Validation("learning rate must be non-negative".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Validation("steps and batch size must be >= 1".into()));
    }
    let mut denoiser = Denoiser::init(topo, rng)?;
    let mut adam = Adam::new(cfg.learning_rate, denoiser.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (scene, c) = data(rng);
            let t = rng.random_range(1..=schedule.steps());
            let eps: Vec<f64> = (0..topo.state_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            batch.push((scene.to_vec(), t, eps, c));
        }
        let (loss, grad) = mse_loss_and_grad(&denoiser, &batch, schedule)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite at step {step}"
            )));
        }
        adam.step(denoiser.params_mut(), &grad);
        losses.push(loss);
    }
    Ok((denoiser, losses))
}
