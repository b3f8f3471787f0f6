//! Importance-sampled policy-gradient fine-tuning of the diffusion model
//! against the artifact-classification reward.
//!
//! Each batch samples trajectories from a frozen snapshot of the policy,
//! scores their final states once through the classifier pipeline, and
//! ascends the per-step estimator `ratio * grad(log p) * advantage` summed
//! over denoising steps. With clipping and advantage normalization turned
//! off and the policy equal to its snapshot, the estimator reduces exactly
//! to [`reinforce_gradient`], which is the reference implementation the
//! gradient tests check against.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample, step_logprob_grad_into, Adam, Condition, Denoiser, NoiseSchedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::reward::RewardPipeline;
use crate::scenes::{classify_scene, sample_scene, SceneConfig, SceneMixture, SceneParams};

/// Hyperparameters of the policy-gradient loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpoConfig {
    /// Trajectories sampled per batch.
    pub trajectories_per_batch: usize,
    pub learning_rate: f64,
    /// Gradient steps taken on each collected batch.
    pub inner_epochs: usize,
    /// Importance ratios are clamped to [1-e, 1+e]; `None` disables
    /// clipping (the raw estimator).
    pub clip_range: Option<f64>,
    /// Normalize batch rewards to zero mean and unit deviation.
    pub normalize_advantages: bool,
    pub total_batches: usize,
    /// Write a checkpoint every this many batches (0 = only on demand).
    pub checkpoint_every: usize,
}

impl Default for DdpoConfig {
    fn default() -> Self {
        Self {
            trajectories_per_batch: 24,
            learning_rate: 3e-4,
            inner_epochs: 1,
            clip_range: Some(0.2),
            normalize_advantages: true,
            total_batches: 200,
            checkpoint_every: 0,
        }
    }
}

impl DdpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories_per_batch == 0 {
            return Err(Error::Validation("batch needs at least one trajectory".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation("learning rate must be >= 0".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Validation("inner epochs must be >= 1".into()));
        }
        if let Some(e) = self.clip_range {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Validation(format!(
                    "clip range must lie in (0,1), got {}",
                    e
                )));
            }
        }
        Ok(())
    }
}

/// Reward of a finished trajectory, evaluated once on its final state.
pub trait TrajectoryReward: Sync {
    fn reward(&self, x0: &[f64], c: Condition) -> Result<f64>;
}

impl TrajectoryReward for RewardPipeline {
    fn reward(&self, x0: &[f64], _c: Condition) -> Result<f64> {
        let scene = SceneParams::from_slice(x0)?;
        self.reward_for_scene(&scene)
    }
}

impl<F> TrajectoryReward for F
where
    F: Fn(&[f64], Condition) -> Result<f64> + Sync,
{
    fn reward(&self, x0: &[f64], c: Condition) -> Result<f64> {
        self(x0, c)
    }
}

fn with_trajectory_index(e: Error, i: usize) -> Error {
    match e {
        Error::Sampling(m) => Error::Sampling(format!("trajectory {i}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("trajectory {i}: {m}")),
        Error::Domain(m) => Error::Domain(format!("trajectory {i}: {m}")),
        Error::Training(m) => Error::Training(format!("trajectory {i}: {m}")),
        Error::Protocol(m) => Error::Protocol(format!("trajectory {i}: {m}")),
        Error::Transport { message, attempts } => Error::Transport {
            message: format!("trajectory {i}: {message}"),
            attempts,
        },
        other => other,
    }
}

/// Sample `n` trajectories from the frozen policy and score each final
/// state through the reward pipeline.
pub fn collect<R, C>(
    denoiser_old: &Denoiser,
    n: usize,
    cond_sampler: &mut C,
    reward_fn: &dyn TrajectoryReward,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Trajectory>>
where
    R: Rng + ?Sized,
    C: FnMut(&mut R) -> Condition,
{
    if n == 0 {
        return Err(Error::Validation("cannot collect an empty batch".into()));
    }
    let mut batch = Vec::with_capacity(n);
    for i in 0..n {
        let c = cond_sampler(rng);
        let mut trajectory =
            sample(denoiser_old, c, schedule, rng).map_err(|e| with_trajectory_index(e, i))?;
        let reward = reward_fn
            .reward(trajectory.x0(), c)
            .map_err(|e| with_trajectory_index(e, i))?;
        if !reward.is_finite() {
            return Err(Error::Numerical(format!(
                "trajectory {i}: reward is not finite ({reward})"
            )));
        }
        trajectory.reward = Some(reward);
        batch.push(trajectory);
    }
    Ok(batch)
}

fn advantages(batch: &[Trajectory], normalize: bool) -> Result<Vec<f64>> {
    let mut rewards = Vec::with_capacity(batch.len());
    for (i, trajectory) in batch.iter().enumerate() {
        let r = trajectory.reward.ok_or_else(|| {
            Error::Validation(format!("trajectory {i} has no reward attached"))
        })?;
        rewards.push(r);
    }
    if !normalize {
        return Ok(rewards);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
}

/// The importance-sampled policy gradient (ascent direction) of a batch.
///
/// Per trajectory and per step: `ratio = exp(log p - log p_old)` with the
/// stored sampling log-probability as the old side, optionally clipped,
/// times the gradient of `log p` times the trajectory advantage; averaged
/// over trajectories. The trajectory reward weights every step of its own
/// chain uniformly.
pub fn policy_gradient(
    batch: &[Trajectory],
    denoiser: &Denoiser,
    cfg: &DdpoConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let adv = advantages(batch, cfg.normalize_advantages)?;
    let n = batch.len() as f64;
    let mut total = vec![0.0; denoiser.param_count()];
    let mut scratch = vec![0.0; denoiser.param_count()];
    for (trajectory, &a) in batch.iter().zip(&adv) {
        for tr in trajectory.transitions() {
            scratch.fill(0.0);
            let log_prob = step_logprob_grad_into(
                denoiser,
                tr.x_t,
                tr.x_prev,
                tr.t,
                trajectory.condition,
                schedule,
                &mut scratch,
            )?;
            let mut ratio = (log_prob - tr.log_prob).exp();
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!(
                    "importance ratio not finite at step {} (log p {} vs stored {})",
                    tr.t, log_prob, tr.log_prob
                )));
            }
            if let Some(e) = cfg.clip_range {
                ratio = ratio.clamp(1.0 - e, 1.0 + e);
            }
            let weight = ratio * a / n;
            for (slot, g) in total.iter_mut().zip(&scratch) {
                *slot += weight * g;
            }
        }
    }
    Ok(total)
}

/// Plain REINFORCE over the stored chains: `sum_t grad(log p) * advantage`,
/// averaged over trajectories. This is the reference the importance-sampled
/// estimator collapses to when the policy equals its sampling snapshot and
/// clipping is off.
pub fn reinforce_gradient(
    batch: &[Trajectory],
    denoiser: &Denoiser,
    normalize_advantages: bool,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let adv = advantages(batch, normalize_advantages)?;
    let n = batch.len() as f64;
    let mut total = vec![0.0; denoiser.param_count()];
    let mut scratch = vec![0.0; denoiser.param_count()];
    for (trajectory, &a) in batch.iter().zip(&adv) {
        for tr in trajectory.transitions() {
            scratch.fill(0.0);
            step_logprob_grad_into(
                denoiser,
                tr.x_t,
                tr.x_prev,
                tr.t,
                trajectory.condition,
                schedule,
                &mut scratch,
            )?;
            let weight = a / n;
            for (slot, g) in total.iter_mut().zip(&scratch) {
                *slot += weight * g;
            }
        }
    }
    Ok(total)
}

/// Per-batch statistics of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub mean_reward: Vec<f64>,
    pub std_reward: Vec<f64>,
    pub artifact_rate: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.mean_reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_reward.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,mean_reward,std_reward,artifact_rate,grad_norm\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                i, self.mean_reward[i], self.std_reward[i], self.artifact_rate[i], self.grad_norm[i]
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut history = TrainingHistory::default();
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyInput)?;
        if header.trim() != "batch,mean_reward,std_reward,artifact_rate,grad_norm" {
            return Err(Error::Parse(format!("unexpected history header {header:?}")));
        }
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {:?}", lineno + 2, s)))
            };
            history.mean_reward.push(parse(fields[1])?);
            history.std_reward.push(parse(fields[2])?);
            history.artifact_rate.push(parse(fields[3])?);
            history.grad_norm.push(parse(fields[4])?);
        }
        Ok(history)
    }
}

/// Fraction of freshly sampled scenes whose oracle label is not clean.
pub fn measure_artifact_rate<R, C>(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    scene_cfg: &SceneConfig,
    n: usize,
    cond_sampler: &mut C,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    C: FnMut(&mut R) -> Condition,
{
    if n == 0 {
        return Err(Error::Validation("need at least one sample".into()));
    }
    let mut artifacts = 0usize;
    for i in 0..n {
        let c = cond_sampler(rng);
        let trajectory =
            sample(denoiser, c, schedule, rng).map_err(|e| with_trajectory_index(e, i))?;
        let scene = trajectory.x0_scene()?;
        if !classify_scene(&scene, scene_cfg).is_no_artifacts() {
            artifacts += 1;
        }
    }
    Ok(artifacts as f64 / n as f64)
}

/// Mixed clean/artifact data sampler for pretraining: draws a condition
/// class uniformly, narrows the scene config to that class, and samples a
/// scene from the mixture.
pub fn mixture_data_sampler<'a, R: Rng + ?Sized>(
    mixture: &'a SceneMixture,
    scene_cfg: &'a SceneConfig,
    n_classes: usize,
) -> impl FnMut(&mut R) -> (SceneParams, Condition) + 'a {
    move |rng: &mut R| {
        let class = rng.random_range(0..n_classes);
        let spec = mixture.sample_spec(rng);
        let scene = sample_scene(rng, spec, &scene_cfg.for_class(class, n_classes));
        (scene, Condition(class))
    }
}

/// Repeat: snapshot the policy, collect a batch from the snapshot, take
/// `inner_epochs` Adam ascent steps on the policy gradient, and record the
/// batch statistics. Aborts (retaining the last good checkpoint on disk when
/// a directory is given) if the weights stop being finite.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<R, C>(
    mut denoiser: Denoiser,
    reward_fn: &dyn TrajectoryReward,
    scene_cfg: &SceneConfig,
    cond_sampler: &mut C,
    cfg: &DdpoConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
    checkpoint_dir: Option<&Path>,
) -> Result<(Denoiser, TrainingHistory)>
where
    R: Rng + ?Sized,
    C: FnMut(&mut R) -> Condition,
{
    cfg.validate()?;
    let mut adam = Adam::new(cfg.learning_rate, denoiser.param_count());
    let mut history = TrainingHistory::default();
    let mut neg = vec![0.0; denoiser.param_count()];
    for batch_idx in 0..cfg.total_batches {
        let snapshot = denoiser.clone();
        let batch = collect(
            &snapshot,
            cfg.trajectories_per_batch,
            cond_sampler,
            reward_fn,
            schedule,
            rng,
        )?;

        let rewards: Vec<f64> = batch.iter().map(|t| t.reward.unwrap_or(f64::NAN)).collect();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let artifact_rate = {
            let mut count = 0usize;
            for trajectory in &batch {
                if !classify_scene(&trajectory.x0_scene()?, scene_cfg).is_no_artifacts() {
                    count += 1;
                }
            }
            count as f64 / n
        };

        let mut grad_norm = 0.0;
        for _ in 0..cfg.inner_epochs {
            let grad = policy_gradient(&batch, &denoiser, cfg, schedule)?;
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient norm not finite at batch {batch_idx}"
                )));
            }
            for (slot, g) in neg.iter_mut().zip(&grad) {
                *slot = -g;
            }
            adam.step(denoiser.params_mut(), &neg);
        }

        if denoiser.params().iter().any(|p| !p.is_finite()) {
            if let Some(dir) = checkpoint_dir {
                snapshot.save(dir.join("last-good.ckpt"))?;
            }
            return Err(Error::Training(format!(
                "weights became non-finite at batch {batch_idx}; last good checkpoint retained"
            )));
        }

        history.mean_reward.push(mean);
        history.std_reward.push(std);
        history.artifact_rate.push(artifact_rate);
        history.grad_norm.push(grad_norm);

        if cfg.checkpoint_every > 0 && (batch_idx + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                denoiser.save(dir.join(format!("checkpoint-{:05}.ckpt", batch_idx + 1)))?;
            }
        }
    }
    Ok((denoiser, history))
}
