//! Conditional rectified-flow policy.
//!
//! Time runs from noise at `t = 1` to data at `t = 0` on a uniform grid of
//! `T` steps. The network predicts the velocity `ε − x₀`, so a deterministic
//! step is `x' = x − Δt·v`. The stochastic step adds a drift correction and
//! isotropic Gaussian noise, which gives every perturbed transition an exact
//! log-density under the policy.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, Architecture, BatchTape, GradientBuffer, Mlp, Tape};
use crate::rng::{derive_seed, Namespace};
use crate::scene::{
    decode_latent, ConditionVector, EditCondition, SceneLatent, SceneSpec, CONDITION_DIM, LATENT_DIM,
};

pub const TIME_FEATURES: usize = 3;
pub const POLICY_INPUT_DIM: usize = LATENT_DIM + TIME_FEATURES + CONDITION_DIM;

/// One `(x, t, c)` point at which to evaluate a velocity.
#[derive(Debug, Clone, Copy)]
pub struct VelocityQuery<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub c: &'a [f64],
}

/// Anything that maps `(x, t, c)` to a velocity.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64>;

    /// One velocity per query; each query counts as one evaluation.
    fn velocity_batch(&self, queries: &[VelocityQuery<'_>]) -> Vec<Vec<f64>> {
        queries.iter().map(|q| self.velocity(q.x, q.t, q.c)).collect()
    }
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

pub fn policy_input(x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + TIME_FEATURES + c.len());
    input.extend_from_slice(x);
    input.extend_from_slice(&time_features(t));
    input.extend_from_slice(c);
    input
}

/// Row-stacked policy inputs.
pub fn policy_inputs(queries: &[VelocityQuery<'_>]) -> Vec<f64> {
    let mut inputs = Vec::with_capacity(queries.len() * POLICY_INPUT_DIM);
    for q in queries {
        inputs.extend_from_slice(q.x);
        inputs.extend_from_slice(&time_features(q.t));
        inputs.extend_from_slice(q.c);
    }
    inputs
}

pub fn policy_architecture(hidden: Vec<usize>) -> Architecture {
    Architecture::new(POLICY_INPUT_DIM, hidden, LATENT_DIM)
}

/// Velocity network plus its time grid. Every velocity evaluation bumps a
/// shared call counter.
#[derive(Debug)]
pub struct FlowPolicy {
    pub net: Mlp,
    pub steps: usize,
    calls: AtomicU64,
}

impl Clone for FlowPolicy {
    fn clone(&self) -> Self {
        Self::new(self.net.clone(), self.steps).expect("cloned policy was valid")
    }
}

impl FlowPolicy {
    pub fn new(net: Mlp, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("flow needs at least 2 steps, got {steps}")));
        }
        if net.input_dim() != POLICY_INPUT_DIM || net.output_dim() != LATENT_DIM {
            return Err(Error::ShapeMismatch(format!(
                "policy network must map {POLICY_INPUT_DIM} -> {LATENT_DIM}, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            steps,
            calls: AtomicU64::new(0),
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_i = 1 − i/T` for `i = 0..=T`.
    pub fn time(&self, i: usize) -> f64 {
        time_at(i, self.steps)
    }

    /// Total velocity evaluations since construction.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Velocity evaluation with its tape, for differentiation. Not counted.
    pub fn velocity_with_tape(&self, x: &[f64], t: f64, c: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.net.forward(&policy_input(x, t, c))
    }
}

impl VelocityField for FlowPolicy {
    fn velocity(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.net.eval(&policy_input(x, t, c)).expect("policy input has the network's width")
    }

    fn velocity_batch(&self, queries: &[VelocityQuery<'_>]) -> Vec<Vec<f64>> {
        if queries.is_empty() {
            return Vec::new();
        }
        self.calls.fetch_add(queries.len() as u64, Ordering::Relaxed);
        self.net
            .eval_batch(&policy_inputs(queries), queries.len())
            .expect("policy input has the network's width")
            .chunks_exact(LATENT_DIM)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn time_at(i: usize, steps: usize) -> f64 {
    1.0 - i as f64 / steps as f64
}

/// Deterministic Euler step toward the data end.
pub fn ode_step(x: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi - dt * vi).collect()
}

/// Noise scale `σ_t = a·√(t_σ / (1 − t_σ))`. The time entering σ is capped
/// at the first interior grid point `1 − Δt`, since `t = 1` diverges.
pub fn sigma(t: f64, dt: f64, noise_level: f64) -> f64 {
    let ts = t.min(1.0 - dt);
    noise_level * (ts / (1.0 - ts)).sqrt()
}

/// Mean and standard deviation of the stochastic transition from `x` at `t`.
pub fn sde_moments(x: &[f64], v: &[f64], t: f64, dt: f64, noise_level: f64) -> Result<(Vec<f64>, f64)> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTime(t));
    }
    let s = sigma(t, dt, noise_level);
    let k = s * s / (2.0 * t);
    let mean = x
        .iter()
        .zip(v)
        .map(|(xi, vi)| xi - dt * (vi + k * (xi + (1.0 - t) * vi)))
        .collect();
    Ok((mean, s * dt.sqrt()))
}

/// `∂mean/∂v`, identical for every coordinate.
fn mean_velocity_gain(t: f64, dt: f64, noise_level: f64) -> f64 {
    let s = sigma(t, dt, noise_level);
    -dt * (1.0 + s * s / (2.0 * t) * (1.0 - t))
}

pub fn gaussian_log_density(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let norm = -std.ln() - 0.5 * (2.0 * PI).ln();
    x.iter()
        .zip(mean)
        .map(|(xi, mi)| {
            let z = (xi - mi) / std;
            norm - 0.5 * z * z
        })
        .sum()
}

/// One recorded denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTransition {
    pub index: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    /// 0 for deterministic steps.
    pub std: f64,
    pub sample: Vec<f64>,
    /// `None` for deterministic steps, which carry no density.
    pub log_prob: Option<f64>,
    pub perturbed: bool,
}

/// Stochastic step. With `noise_level == 0` this is exactly [`ode_step`]
/// and the transition is marked unperturbed.
pub fn sde_step<R: Rng + ?Sized>(
    index: usize,
    x: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
    noise_level: f64,
    rng: &mut R,
) -> Result<StepTransition> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTime(t));
    }
    if noise_level == 0.0 {
        return Ok(deterministic_transition(index, x, v, t, dt));
    }
    let (mean, std) = sde_moments(x, v, t, dt, noise_level)?;
    let sample: Vec<f64> = mean
        .iter()
        .map(|m| {
            let e: f64 = rng.sample(StandardNormal);
            m + std * e
        })
        .collect();
    let log_prob = gaussian_log_density(&sample, &mean, std);
    Ok(StepTransition {
        index,
        t,
        mean,
        std,
        sample,
        log_prob: Some(log_prob),
        perturbed: true,
    })
}

fn deterministic_transition(index: usize, x: &[f64], v: &[f64], t: f64, dt: f64) -> StepTransition {
    let sample = ode_step(x, v, dt);
    StepTransition {
        index,
        t,
        mean: sample.clone(),
        std: 0.0,
        sample,
        log_prob: None,
        perturbed: false,
    }
}

/// Log-density of `x_to` given `x_from` under `net`, from a fresh velocity
/// evaluation.
pub fn transition_logprob(
    net: &Mlp,
    x_from: &[f64],
    x_to: &[f64],
    t: f64,
    dt: f64,
    noise_level: f64,
    c: &[f64],
) -> Result<f64> {
    if noise_level == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let v = net.eval(&policy_input(x_from, t, c))?;
    let (mean, std) = sde_moments(x_from, &v, t, dt, noise_level)?;
    Ok(gaussian_log_density(x_to, &mean, std))
}

/// Forward half of a differentiable log-density evaluation.
pub struct LogprobTape {
    tape: Tape,
    /// `∂logp/∂v`.
    velocity_cotangent: Vec<f64>,
}

impl LogprobTape {
    /// Accumulates `weight · ∂logp/∂θ` into `grads`.
    pub fn backward(&self, net: &Mlp, weight: f64, grads: &mut GradientBuffer) -> Result<()> {
        if weight != 0.0 {
            net.backward_into(&self.tape, &self.velocity_cotangent, weight, grads)?;
        }
        Ok(())
    }
}

/// Log-density of a transition together with what is needed to
/// differentiate it later.
pub fn transition_logprob_tape(
    net: &Mlp,
    x_from: &[f64],
    x_to: &[f64],
    t: f64,
    dt: f64,
    noise_level: f64,
    c: &[f64],
) -> Result<(f64, LogprobTape)> {
    if noise_level == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let (v, tape) = net.forward(&policy_input(x_from, t, c))?;
    let (mean, std) = sde_moments(x_from, &v, t, dt, noise_level)?;
    let logp = gaussian_log_density(x_to, &mean, std);
    // d logp / d mean = (x_to − mean)/std², and the mean is affine in v
    let gain = mean_velocity_gain(t, dt, noise_level) / (std * std);
    let velocity_cotangent = x_to.iter().zip(&mean).map(|(xt, m)| gain * (xt - m)).collect();
    Ok((logp, LogprobTape { tape, velocity_cotangent }))
}

/// As [`transition_logprob`], also accumulating `weight · ∂logp/∂θ` into
/// `grads`.
#[allow(clippy::too_many_arguments)]
pub fn transition_logprob_grad(
    net: &Mlp,
    x_from: &[f64],
    x_to: &[f64],
    t: f64,
    dt: f64,
    noise_level: f64,
    c: &[f64],
    weight: f64,
    grads: &mut GradientBuffer,
) -> Result<f64> {
    let (logp, tape) = transition_logprob_tape(net, x_from, x_to, t, dt, noise_level, c)?;
    tape.backward(net, weight, grads)?;
    Ok(logp)
}

/// One transition whose log-density is to be recomputed.
#[derive(Debug, Clone, Copy)]
pub struct TransitionQuery<'a> {
    pub x_from: &'a [f64],
    pub x_to: &'a [f64],
    pub t: f64,
    pub c: &'a [f64],
}

/// Log-densities of a batch of transitions, ready for differentiation.
#[derive(Debug, Clone)]
pub struct LogprobBatch {
    pub log_probs: Vec<f64>,
    tape: BatchTape,
    /// Row-stacked `∂logp/∂v`.
    velocity_cotangents: Vec<f64>,
}

impl LogprobBatch {
    /// Accumulates `Σ_r weights[r] · ∂logp_r/∂θ` into `grads`.
    pub fn backward(&self, net: &Mlp, weights: &[f64], grads: &mut GradientBuffer) -> Result<()> {
        if weights.len() != self.log_probs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.log_probs.len(),
                got: weights.len(),
            });
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(());
        }
        let cot: Vec<f64> = self
            .velocity_cotangents
            .chunks_exact(LATENT_DIM)
            .zip(weights)
            .flat_map(|(row, &w)| row.iter().map(move |g| w * g))
            .collect();
        net.backward_batch_into(&self.tape, &cot, grads)?;
        Ok(())
    }
}

/// Batched [`transition_logprob_tape`] over transitions sharing `Δt` and
/// the noise level.
pub fn transition_logprob_batch(
    net: &Mlp,
    queries: &[TransitionQuery<'_>],
    dt: f64,
    noise_level: f64,
) -> Result<LogprobBatch> {
    if noise_level == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let points: Vec<VelocityQuery> = queries
        .iter()
        .map(|q| VelocityQuery {
            x: q.x_from,
            t: q.t,
            c: q.c,
        })
        .collect();
    let (v, tape) = net.forward_batch(&policy_inputs(&points), queries.len())?;
    let mut log_probs = Vec::with_capacity(queries.len());
    let mut velocity_cotangents = Vec::with_capacity(v.len());
    for (q, vr) in queries.iter().zip(v.chunks_exact(LATENT_DIM)) {
        let (mean, std) = sde_moments(q.x_from, vr, q.t, dt, noise_level)?;
        log_probs.push(gaussian_log_density(q.x_to, &mean, std));
        let gain = mean_velocity_gain(q.t, dt, noise_level) / (std * std);
        velocity_cotangents.extend(q.x_to.iter().zip(&mean).map(|(xt, m)| gain * (xt - m)));
    }
    Ok(LogprobBatch {
        log_probs,
        tape,
        velocity_cotangents,
    })
}

/// One-step extrapolation `x̂₀ = x − t·v(x, t, c)`.
pub fn shortcut_to_x0<F: VelocityField + ?Sized>(field: &F, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
    let v = field.velocity(x, t, c);
    x.iter().zip(&v).map(|(xi, vi)| xi - t * vi).collect()
}

/// Which steps are stochastic and where, if anywhere, the trajectory exits
/// through a shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPlan {
    pub steps: usize,
    pub noise_level: f64,
    pub perturbed: Vec<bool>,
    /// Number of steps taken before the shortcut.
    pub exit_step: Option<usize>,
}

impl RolloutPlan {
    pub fn deterministic(steps: usize) -> Self {
        Self {
            steps,
            noise_level: 0.0,
            perturbed: vec![false; steps],
            exit_step: None,
        }
    }

    /// Steps `0..k` stochastic, the rest deterministic, no shortcut.
    pub fn prefix(steps: usize, k: usize, noise_level: f64) -> Self {
        Self {
            steps,
            noise_level,
            perturbed: (0..steps).map(|i| i < k).collect(),
            exit_step: None,
        }
    }

    /// Velocity evaluations one rollout performs.
    pub fn nfe(&self) -> usize {
        match self.exit_step {
            Some(k) => k + 1,
            None => self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: ConditionVector,
    pub initial_noise: Vec<f64>,
    pub transitions: Vec<StepTransition>,
    pub shortcut_used: bool,
    pub final_latent: SceneLatent,
    pub decoded: SceneSpec,
    pub nfe_sample: usize,
}

impl Trajectory {
    /// The latent a transition started from.
    pub fn step_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.initial_noise
        } else {
            &self.transitions[i - 1].sample
        }
    }

    pub fn perturbed_count(&self) -> usize {
        self.transitions.iter().filter(|s| s.perturbed).count()
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs one trajectory from `initial_noise` following `plan`.
pub fn rollout<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cond: &EditCondition,
    plan: &RolloutPlan,
    initial_noise: Vec<f64>,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut out = rollout_batch(field, &[cond], plan, vec![initial_noise], &mut [rng])?;
    Ok(out.pop().expect("one trajectory per condition"))
}

/// Runs one trajectory per `(condition, noise, rng)` triple in lockstep,
/// batching the velocity evaluations of each step. Every trajectory draws
/// from its own stream exactly as [`rollout`] would.
pub fn rollout_batch<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    conds: &[&EditCondition],
    plan: &RolloutPlan,
    initial_noises: Vec<Vec<f64>>,
    rngs: &mut [&mut R],
) -> Result<Vec<Trajectory>> {
    if conds.len() != initial_noises.len() || conds.len() != rngs.len() {
        return Err(Error::Config("rollout batch needs one noise and one stream per condition".into()));
    }
    if let Some(bad) = initial_noises.iter().find(|n| n.len() != LATENT_DIM) {
        return Err(Error::DimensionMismatch {
            expected: LATENT_DIM,
            got: bad.len(),
        });
    }
    let steps = plan.steps;
    let dt = 1.0 / steps as f64;
    let last = plan.exit_step.unwrap_or(steps).min(steps);
    let mut transitions: Vec<Vec<StepTransition>> = conds.iter().map(|_| Vec::with_capacity(last)).collect();
    let mut xs = initial_noises.clone();
    for i in 0..last {
        let t = time_at(i, steps);
        let queries: Vec<VelocityQuery> = xs
            .iter()
            .zip(conds)
            .map(|(x, cond)| VelocityQuery { x, t, c: &cond.vector.0 })
            .collect();
        let vs = field.velocity_batch(&queries);
        for (((x, v), rng), traj) in xs.iter_mut().zip(&vs).zip(rngs.iter_mut()).zip(&mut transitions) {
            let step = if plan.perturbed[i] {
                sde_step(i, x, v, t, dt, plan.noise_level, &mut **rng)?
            } else {
                deterministic_transition(i, x, v, t, dt)
            };
            x.clone_from(&step.sample);
            traj.push(step);
        }
    }
    let shortcut_used = plan.exit_step.is_some();
    if shortcut_used {
        let t = time_at(last, steps);
        let queries: Vec<VelocityQuery> = xs
            .iter()
            .zip(conds)
            .map(|(x, cond)| VelocityQuery { x, t, c: &cond.vector.0 })
            .collect();
        let vs = field.velocity_batch(&queries);
        for (x, v) in xs.iter_mut().zip(&vs) {
            *x = x.iter().zip(v).map(|(xi, vi)| xi - t * vi).collect();
        }
    }
    let nfe = last + usize::from(shortcut_used);
    Ok(conds
        .iter()
        .zip(initial_noises)
        .zip(transitions)
        .zip(xs)
        .map(|(((cond, initial_noise), transitions), x)| {
            let final_latent = SceneLatent(x);
            let decoded = decode_latent(&final_latent, &cond.scene);
            Trajectory {
                condition: cond.vector.clone(),
                initial_noise,
                transitions,
                shortcut_used,
                final_latent,
                decoded,
                nfe_sample: nfe,
            }
        })
        .collect())
}

/// Deterministic ODE sample from `initial_noise`.
pub fn sample_ode<F: VelocityField + ?Sized>(
    field: &F,
    cond: &EditCondition,
    steps: usize,
    initial_noise: Vec<f64>,
) -> Result<Trajectory> {
    // the plan has no perturbed step, so the stream is never drawn from
    let mut unused = crate::rng::stream(0);
    rollout(field, cond, &RolloutPlan::deterministic(steps), initial_noise, &mut unused)
}

/// Deterministic ODE samples for many conditions at once.
pub fn sample_ode_batch<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[&EditCondition],
    steps: usize,
    initial_noises: Vec<Vec<f64>>,
) -> Result<Vec<Trajectory>> {
    let mut streams: Vec<_> = conds.iter().map(|_| crate::rng::stream(0)).collect();
    let mut refs: Vec<&mut rand_chacha::ChaCha8Rng> = streams.iter_mut().collect();
    rollout_batch(field, conds, &RolloutPlan::deterministic(steps), initial_noises, &mut refs)
}

/// One flow-matching training example: a condition and its clean target.
#[derive(Debug, Clone)]
pub struct PretrainPair {
    pub condition: EditCondition,
    pub target: SceneLatent,
}

impl PretrainPair {
    pub fn from_condition(condition: EditCondition) -> Self {
        let target = crate::scene::encode_scene(&condition.oracle_target());
        Self { condition, target }
    }
}

/// Rows per batched gradient chunk. Fixed so that the reduction order, and
/// hence the result, does not depend on the thread count.
pub const BATCH_CHUNK: usize = 64;

/// Runs `f` over fixed-size chunks of `items`, each into its own gradient
/// buffer, and sums the buffers in chunk order. Returns the per-chunk
/// outputs in order.
pub fn accumulate_chunks<T, X, F>(net: &Mlp, items: &[T], f: F) -> Result<(Vec<X>, GradientBuffer)>
where
    T: Sync,
    X: Send,
    F: Fn(&[T], &mut GradientBuffer) -> Result<X> + Sync,
{
    let partials: Vec<Result<(X, GradientBuffer)>> = items
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut g = GradientBuffer::zeros_like(net);
            let out = f(chunk, &mut g)?;
            Ok((out, g))
        })
        .collect();
    let mut grads = GradientBuffer::zeros_like(net);
    let mut outputs = Vec::with_capacity(partials.len());
    for p in partials {
        let (x, g) = p?;
        outputs.push(x);
        grads.add_assign(&g);
    }
    Ok((outputs, grads))
}

struct FlowMatchingSample<'a> {
    x_t: Vec<f64>,
    t: f64,
    target_velocity: Vec<f64>,
    c: &'a [f64],
}

/// Conditional flow-matching loss `mean_batch ‖v_θ(x_t, t, c) − (ε − x₀)‖²`
/// with `x_t = (1 − t)·x₀ + t·ε`, and its exact gradient.
pub fn pretrain_loss<R: Rng + ?Sized>(net: &Mlp, batch: &[PretrainPair], rng: &mut R) -> Result<(f64, GradientBuffer)> {
    if batch.is_empty() {
        return Err(Error::Config("empty pretraining batch".into()));
    }
    let samples = draw_flow_matching_samples(batch, rng);
    let scale = 1.0 / batch.len() as f64;
    let (partials, grads) = accumulate_chunks(net, &samples, |chunk, g| {
        let points: Vec<VelocityQuery> = chunk.iter().map(|s| VelocityQuery { x: &s.x_t, t: s.t, c: s.c }).collect();
        let (v, tape) = net.forward_batch(&policy_inputs(&points), chunk.len())?;
        let target = chunk.iter().flat_map(|s| s.target_velocity.iter());
        let diff: Vec<f64> = v.iter().zip(target).map(|(a, b)| a - b).collect();
        let cot: Vec<f64> = diff.iter().map(|d| 2.0 * scale * d).collect();
        net.backward_batch_into(&tape, &cot, g)?;
        Ok(diff.iter().map(|d| d * d).sum::<f64>())
    })?;
    Ok((partials.iter().sum::<f64>() * scale, grads))
}

/// Flow-matching loss of an arbitrary velocity field, without gradients.
pub fn flow_matching_loss<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    batch: &[PretrainPair],
    rng: &mut R,
) -> f64 {
    let samples = draw_flow_matching_samples(batch, rng);
    let total: f64 = samples
        .iter()
        .map(|s| {
            let v = field.velocity(&s.x_t, s.t, s.c);
            v.iter().zip(&s.target_velocity).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    total / batch.len() as f64
}

fn draw_flow_matching_samples<'a, R: Rng + ?Sized>(
    batch: &'a [PretrainPair],
    rng: &mut R,
) -> Vec<FlowMatchingSample<'a>> {
    batch
        .iter()
        .map(|pair| {
            let t: f64 = rng.random();
            let eps = standard_normal(rng, LATENT_DIM);
            let x0 = &pair.target.0;
            let x_t = x0.iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
            let target_velocity = eps.iter().zip(x0).map(|(e, a)| e - a).collect();
            FlowMatchingSample {
                x_t,
                t,
                target_velocity,
                c: &pair.condition.vector.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to `lr · final_lr_fraction`;
    /// 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    /// Ends the run early while keeping the schedule of `iterations`;
    /// yields a deliberately under-trained checkpoint.
    pub stop_after: Option<u64>,
}

impl PretrainConfig {
    /// Iterations actually run.
    pub fn run_length(&self) -> u64 {
        self.stop_after.map_or(self.iterations, |s| s.min(self.iterations))
    }

    pub fn learning_rate(&self, iteration: u64) -> f64 {
        let progress = iteration as f64 / self.iterations.max(1) as f64;
        let f = self.final_lr_fraction;
        self.adam.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40_000,
            batch_size: 64,
            max_grad_norm: 1.0,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.05,
            stop_after: None,
        }
    }
}

/// Flow-matching training on oracle pairs. Returns the per-iteration loss.
pub fn pretrain(
    net: &mut Mlp,
    pairs: &[PretrainPair],
    config: &PretrainConfig,
    seed: u64,
    mut on_iteration: impl FnMut(u64, f64, &Mlp),
) -> Result<Vec<f64>> {
    if pairs.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("pretraining needs pairs and a positive batch size".into()));
    }
    let mut adam = AdamState::new(net, config.adam);
    let mut losses = Vec::with_capacity(config.run_length() as usize);
    for it in 0..config.run_length() {
        let mut r = crate::rng::stream(derive_seed(seed, Namespace::Pretrain, &[it]));
        let batch: Vec<PretrainPair> = (0..config.batch_size)
            .map(|_| pairs[r.random_range(0..pairs.len())].clone())
            .collect();
        let (loss, mut grads) = pretrain_loss(net, &batch, &mut r)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss diverged at iteration {it}")));
        }
        grads.clip_global_norm(config.max_grad_norm);
        adam.config.lr = config.learning_rate(it);
        adam_step(net, &grads, &mut adam)?;
        losses.push(loss);
        on_iteration(it, loss, net);
    }
    Ok(losses)
}
