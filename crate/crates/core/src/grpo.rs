//! Group-relative policy optimization over the flow policy.
//!
//! A group is `G` rollouts of one condition that share their initial noise
//! and differ only in the per-step perturbations. Each rollout's terminal
//! reward is standardized within the group and broadcast to all of its
//! optimized steps, which then enter a clipped importance-ratio objective.
//!
//! Three step-sampling regimes are supported: every step perturbed and
//! optimized (`Full`), every step perturbed but only a moving window
//! optimized (`SlidingWindow`), and the first `K` steps perturbed and
//! optimized followed by a one-step shortcut to the clean sample (`Active`).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    accumulate_chunks, rollout_batch, standard_normal, transition_logprob_batch, FlowPolicy, RolloutPlan,
    TransitionQuery, Trajectory, VelocityField,
};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::rewards::{compute_reward, RewardBreakdown, RewardConfig};
use crate::rng::{self, child_seed, derive_seed, Namespace};
use crate::scene::{EditCondition, Task, LATENT_DIM};

pub const DEFAULT_GROUP_SIZE: usize = 16;
pub const DEFAULT_CLIP_RANGE: f64 = 2e-4;
pub const DEFAULT_NOISE_LEVEL: f64 = 1.0;
pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplerMode {
    Full,
    SlidingWindow { window: usize, shift_every: usize },
    Active { exit_step: usize },
}

impl SamplerMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerMode::Full => "full",
            SamplerMode::SlidingWindow { .. } => "window",
            SamplerMode::Active { .. } => "active",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub mode: SamplerMode,
    pub steps: usize,
    pub noise_level: f64,
}

impl SamplerConfig {
    pub fn full(steps: usize, noise_level: f64) -> Self {
        Self {
            mode: SamplerMode::Full,
            steps,
            noise_level,
        }
    }

    pub fn sliding_window(steps: usize, noise_level: f64, window: usize, shift_every: usize) -> Self {
        Self {
            mode: SamplerMode::SlidingWindow { window, shift_every },
            steps,
            noise_level,
        }
    }

    pub fn active(steps: usize, noise_level: f64, exit_step: usize) -> Self {
        Self {
            mode: SamplerMode::Active { exit_step },
            steps,
            noise_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidSampler(format!("steps must be >= 2, got {}", self.steps)));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::InvalidSampler("noise level must be finite and >= 0".into()));
        }
        match self.mode {
            SamplerMode::Full => {}
            SamplerMode::SlidingWindow { window, shift_every } => {
                if window == 0 || window > self.steps || shift_every == 0 {
                    return Err(Error::InvalidSampler(format!(
                        "window {window} must lie in [1, {}] and shift period must be positive",
                        self.steps
                    )));
                }
            }
            SamplerMode::Active { exit_step } => {
                if exit_step == 0 || exit_step > self.steps {
                    return Err(Error::InvalidSampler(format!(
                        "exit step {exit_step} must lie in [1, {}]",
                        self.steps
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> RolloutPlan {
        match self.mode {
            SamplerMode::Full | SamplerMode::SlidingWindow { .. } => RolloutPlan::prefix(self.steps, self.steps, self.noise_level),
            SamplerMode::Active { exit_step } => RolloutPlan {
                exit_step: Some(exit_step),
                ..RolloutPlan::prefix(self.steps, exit_step, self.noise_level)
            },
        }
    }

    /// Whether step `i` enters the objective, given the current window start.
    pub fn optimized(&self, i: usize, window_start: usize) -> bool {
        match self.mode {
            SamplerMode::Full => i < self.steps,
            SamplerMode::SlidingWindow { window, .. } => (window_start..window_start + window).contains(&i),
            SamplerMode::Active { exit_step } => i < exit_step,
        }
    }

    pub fn optimized_steps(&self) -> usize {
        match self.mode {
            SamplerMode::Full => self.steps,
            SamplerMode::SlidingWindow { window, .. } => window,
            SamplerMode::Active { exit_step } => exit_step,
        }
    }
}

/// Per-rollout and per-group velocity-evaluation budget of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeBudget {
    pub per_rollout_old: usize,
    pub per_rollout_train: usize,
    pub group_old: usize,
    pub group_train: usize,
}

pub fn nfe_accounting(sampler: &SamplerConfig, group_size: usize, inner_epochs: usize) -> NfeBudget {
    let old = sampler.plan().nfe();
    let train = sampler.optimized_steps() * inner_epochs;
    NfeBudget {
        per_rollout_old: old,
        per_rollout_train: train,
        group_old: old * group_size,
        group_train: train * group_size,
    }
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub condition: EditCondition,
    pub initial_noise: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }

    pub fn nfe_sample(&self) -> usize {
        self.trajectories.iter().map(|t| t.nfe_sample).sum()
    }
}

/// `(R − mean) / (std + 1e-8)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = population_variance(rewards);
    if var == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// Population variance; exactly 0 when all values are identical.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Draws one shared initial noise and `G` independently perturbed rollouts,
/// then scores them.
pub fn generate_group<F: VelocityField + ?Sized>(
    old_policy: &F,
    condition: &EditCondition,
    group_size: usize,
    sampler: &SamplerConfig,
    reward_config: &RewardConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let plan = sampler.plan();
    generate_group_with(old_policy, condition, group_size, &plan, seed, |traj| {
        compute_reward(&condition.scene, &traj.decoded, &condition.instruction, reward_config)
    })
}

fn generate_group_with<F, S>(
    field: &F,
    condition: &EditCondition,
    group_size: usize,
    plan: &RolloutPlan,
    seed: u64,
    score: S,
) -> Result<RolloutGroup>
where
    F: VelocityField + ?Sized,
    S: Fn(&Trajectory) -> Result<RewardBreakdown> + Sync,
{
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {group_size}")));
    }
    let initial_noise = standard_normal(&mut rng::stream(child_seed(seed, &[0])), LATENT_DIM);
    let mut streams: Vec<_> = (0..group_size)
        .map(|i| rng::stream(child_seed(seed, &[1, i as u64])))
        .collect();
    let mut refs: Vec<_> = streams.iter_mut().collect();
    let trajectories = rollout_batch(
        field,
        &vec![condition; group_size],
        plan,
        vec![initial_noise.clone(); group_size],
        &mut refs,
    )?;
    let rewards = trajectories.iter().map(&score).collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    Ok(RolloutGroup {
        condition: condition.clone(),
        initial_noise,
        trajectories,
        advantages: compute_advantages(&totals),
        rewards,
    })
}

/// Diagnostics of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    pub terms: usize,
    pub mean_ratio: f64,
    pub max_ratio_deviation: f64,
    pub clip_fraction: f64,
}

struct Term<'a> {
    traj: &'a Trajectory,
    step: usize,
    advantage: f64,
    old_logp: f64,
}

/// Negated clipped surrogate averaged over every perturbed, optimized step
/// of every rollout, with its exact parameter gradient.
pub fn grpo_objective(
    net: &crate::nn::Mlp,
    groups: &[RolloutGroup],
    sampler: &SamplerConfig,
    window_start: usize,
    clip_range: f64,
) -> Result<(f64, crate::nn::GradientBuffer, ObjectiveStats)> {
    let mut terms = Vec::new();
    for group in groups {
        for (traj, &advantage) in group.trajectories.iter().zip(&group.advantages) {
            for (i, step) in traj.transitions.iter().enumerate() {
                if step.perturbed && sampler.optimized(i, window_start) {
                    let old_logp = step.log_prob.ok_or_else(|| {
                        Error::Numerical(format!("perturbed step {i} has no stored log-probability"))
                    })?;
                    terms.push(Term {
                        traj,
                        step: i,
                        advantage,
                        old_logp,
                    });
                }
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::NoContributingSteps);
    }
    let n = terms.len() as f64;
    let dt = 1.0 / sampler.steps as f64;
    let (lo, hi) = (1.0 - clip_range, 1.0 + clip_range);

    let (partials, grads) = accumulate_chunks(net, &terms, |chunk, g| {
        let queries: Vec<TransitionQuery> = chunk
            .iter()
            .map(|term| TransitionQuery {
                x_from: term.traj.step_input(term.step),
                x_to: &term.traj.transitions[term.step].sample,
                t: term.traj.transitions[term.step].t,
                c: &term.traj.condition.0,
            })
            .collect();
        let batch = transition_logprob_batch(net, &queries, dt, sampler.noise_level)?;
        let mut weights = Vec::with_capacity(chunk.len());
        let mut value = 0.0;
        let mut ratios = Vec::with_capacity(chunk.len());
        for (term, &logp) in chunk.iter().zip(&batch.log_probs) {
            let ratio = (logp - term.old_logp).exp();
            let a = term.advantage;
            let unclipped = ratio * a;
            let clipped = ratio.clamp(lo, hi) * a;
            // the clipped branch is constant in θ and contributes no gradient
            let (v, w) = if unclipped <= clipped {
                (unclipped, -a * ratio / n)
            } else {
                (clipped, 0.0)
            };
            value += v;
            weights.push(w);
            ratios.push((ratio, unclipped > clipped));
        }
        batch.backward(net, &weights, g)?;
        Ok((value, ratios))
    })?;
    let sum: f64 = partials.iter().map(|(v, _)| v).sum();
    let items: Vec<(f64, bool)> = partials.into_iter().flat_map(|(_, r)| r).collect();
    let mean_ratio = items.iter().map(|(r, _)| r).sum::<f64>() / n;
    let max_ratio_deviation = items.iter().map(|(r, _)| (r - 1.0).abs()).fold(0.0, f64::max);
    let clip_fraction = items.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((
        -sum / n,
        grads,
        ObjectiveStats {
            terms: terms.len(),
            mean_ratio,
            max_ratio_deviation,
            clip_fraction,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_range: f64,
    pub inner_epochs: usize,
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            clip_range: DEFAULT_CLIP_RANGE,
            inner_epochs: 1,
            max_grad_norm: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_range > 0.0) {
            return Err(Error::Config("clip_range must be positive".into()));
        }
        if !(1..=4).contains(&self.inner_epochs) {
            return Err(Error::Config("inner_epochs must lie in [1, 4]".into()));
        }
        if !(self.max_grad_norm > 0.0 && self.adam.lr > 0.0) {
            return Err(Error::Config("max_grad_norm and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub accuracy: f64,
    /// Mean displacement (translation) or normalized error (rotation, resize).
    pub trans_dist_or_err: f64,
    pub nfe_old: u64,
    pub nfe_train: u64,
    pub wall_ms: u64,
    pub loss: f64,
    pub updates_applied: usize,
    pub window_start: usize,
}

pub const LOG_HEADER: &str = "iteration,mean_reward,reward_std,accuracy,trans_dist_or_err,nfe_old,nfe_train,wall_ms";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_reward,
            self.reward_std,
            self.accuracy,
            self.trans_dist_or_err,
            self.nfe_old,
            self.nfe_train,
            self.wall_ms
        )
    }
}

pub struct TrainState {
    pub policy: FlowPolicy,
    pub adam: AdamState,
    pub iteration: u64,
    pub sampler: SamplerConfig,
    pub config: GrpoConfig,
    pub reward_config: RewardConfig,
    pub root_seed: u64,
    pub window_start: usize,
    /// When false, `wall_ms` is logged as 0 so logs are byte-reproducible.
    pub record_wall_time: bool,
    pub log: Vec<IterationMetrics>,
}

impl TrainState {
    pub fn new(
        policy: FlowPolicy,
        sampler: SamplerConfig,
        config: GrpoConfig,
        reward_config: RewardConfig,
        root_seed: u64,
    ) -> Result<Self> {
        sampler.validate()?;
        config.validate()?;
        reward_config.validate()?;
        if sampler.steps != policy.steps {
            return Err(Error::InvalidSampler(format!(
                "sampler has {} steps but the policy grid has {}",
                sampler.steps, policy.steps
            )));
        }
        let adam = AdamState::new(&policy.net, config.adam);
        Ok(Self {
            policy,
            adam,
            iteration: 0,
            sampler,
            config,
            reward_config,
            root_seed,
            window_start: 0,
            record_wall_time: false,
            log: Vec::new(),
        })
    }

    pub fn group_seed(&self, condition_index: usize) -> u64 {
        derive_seed(self.root_seed, Namespace::Train, &[self.iteration, condition_index as u64])
    }
}

/// Snapshot, sample groups under the snapshot, run the inner updates, and
/// append one metrics row.
pub fn train_iteration(state: &mut TrainState, conditions: &[EditCondition]) -> Result<IterationMetrics> {
    if conditions.is_empty() {
        return Err(Error::Config("training batch has no conditions".into()));
    }
    let started = Instant::now();
    let old = FlowPolicy::new(state.policy.net.clone(), state.policy.steps)?;
    let seeds: Vec<u64> = (0..conditions.len()).map(|j| state.group_seed(j)).collect();
    let groups: Vec<RolloutGroup> = conditions
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(cond, &seed)| {
            generate_group(&old, cond, state.config.group_size, &state.sampler, &state.reward_config, seed)
        })
        .collect::<Result<_>>()?;
    let nfe_old = old.calls();

    let mut nfe_train = 0u64;
    let mut loss = 0.0;
    let mut updates_applied = 0;
    let has_signal = groups.iter().flat_map(|g| &g.advantages).any(|&a| a != 0.0);
    if has_signal {
        for _ in 0..state.config.inner_epochs {
            let (l, mut grads, stats) =
                grpo_objective(&state.policy.net, &groups, &state.sampler, state.window_start, state.config.clip_range)?;
            nfe_train += stats.terms as u64;
            loss = l;
            if !l.is_finite() {
                continue;
            }
            grads.clip_global_norm(state.config.max_grad_norm);
            match adam_step(&mut state.policy.net, &grads, &mut state.adam) {
                Ok(()) => updates_applied += 1,
                Err(Error::NonFiniteGradient { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    if let SamplerMode::SlidingWindow { window, shift_every } = state.sampler.mode {
        if (state.iteration + 1) % shift_every as u64 == 0 {
            state.window_start = (state.window_start + 1).min(state.sampler.steps - window);
        }
    }

    let rewards: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let count = totals.len() as f64;
    let metrics = IterationMetrics {
        iteration: state.iteration,
        mean_reward: totals.iter().sum::<f64>() / count,
        reward_std: population_variance(&totals).sqrt(),
        accuracy: rewards.iter().filter(|r| r.success).count() as f64 / count,
        trans_dist_or_err: rewards.iter().map(|r| r.task_metric()).sum::<f64>() / count,
        nfe_old,
        nfe_train,
        wall_ms: if state.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
        loss,
        updates_applied,
        window_start: state.window_start,
    };
    state.log.push(metrics.clone());
    state.iteration += 1;
    Ok(metrics)
}

/// Reward variance as a function of how many leading steps are perturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepImportanceProfile {
    pub task: Task,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "a")]
    pub noise_level: f64,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub probes: usize,
    /// Entry `k`: mean over probes of the within-group reward variance with
    /// steps `0..k` perturbed.
    pub variances: Vec<f64>,
    pub means: Vec<f64>,
    #[serde(rename = "selected_K")]
    pub selected_k: Option<usize>,
}

/// Calibrates step importance on 2 to 4 probe conditions.
#[allow(clippy::too_many_arguments)]
pub fn off_policy_step_eval<F: VelocityField + ?Sized>(
    policy: &F,
    probes: &[EditCondition],
    steps: usize,
    group_size: usize,
    noise_level: f64,
    reward_config: &RewardConfig,
    seed: u64,
) -> Result<StepImportanceProfile> {
    if !(2..=4).contains(&probes.len()) {
        return Err(Error::Config(format!("calibration expects 2-4 probes, got {}", probes.len())));
    }
    step_profile_with(policy, probes, steps, group_size, noise_level, seed, |cond, traj| {
        Ok(compute_reward(&cond.scene, &traj.decoded, &cond.instruction, reward_config)?.total)
    })
}

/// Step profile under an arbitrary scalar reward, without the probe-count
/// bound.
pub fn step_profile_with<F, S>(
    policy: &F,
    probes: &[EditCondition],
    steps: usize,
    group_size: usize,
    noise_level: f64,
    seed: u64,
    reward: S,
) -> Result<StepImportanceProfile>
where
    F: VelocityField + ?Sized,
    S: Fn(&EditCondition, &Trajectory) -> Result<f64> + Sync,
{
    if probes.is_empty() || group_size < 2 {
        return Err(Error::Config("calibration needs probes and a group size >= 2".into()));
    }
    let task = probes[0].instruction.task;
    let mut variances = vec![0.0; steps + 1];
    let mut means = vec![0.0; steps + 1];
    for (p, cond) in probes.iter().enumerate() {
        let probe_seed = child_seed(seed, &[p as u64]);
        let initial_noise = standard_normal(&mut rng::stream(child_seed(probe_seed, &[0])), LATENT_DIM);
        for k in 0..=steps {
            let plan = RolloutPlan::prefix(steps, k, noise_level);
            let mut streams: Vec<_> = (0..group_size)
                .map(|i| rng::stream(child_seed(probe_seed, &[1, k as u64, i as u64])))
                .collect();
            let mut refs: Vec<_> = streams.iter_mut().collect();
            let trajectories = rollout_batch(
                policy,
                &vec![cond; group_size],
                &plan,
                vec![initial_noise.clone(); group_size],
                &mut refs,
            )?;
            let rewards: Vec<f64> = trajectories.iter().map(|t| reward(cond, t)).collect::<Result<_>>()?;
            variances[k] += population_variance(&rewards) / probes.len() as f64;
            means[k] += rewards.iter().sum::<f64>() / group_size as f64 / probes.len() as f64;
        }
    }
    let selected_k = select_exit_step(&variances).ok();
    Ok(StepImportanceProfile {
        task,
        steps,
        noise_level,
        group_size,
        probes: probes.len(),
        variances,
        means,
        selected_k,
    })
}

/// The last `k ≥ 1` attaining the maximal variance.
pub fn select_exit_step(variances: &[f64]) -> Result<usize> {
    let (mut best_k, mut best) = (0, 0.0);
    for (k, &v) in variances.iter().enumerate().skip(1) {
        if v >= best && v > 0.0 {
            best_k = k;
            best = v;
        }
    }
    if best_k == 0 {
        return Err(Error::ZeroProfile);
    }
    Ok(best_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_examples() {
        assert_eq!(compute_advantages(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
        let a = compute_advantages(&[0.0, 1.0]);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        let r = [0.3, -0.2, 0.9, 0.1, 0.45];
        let s: Vec<f64> = r.iter().map(|x| 3.0 * x + 7.0).collect();
        for (x, y) in compute_advantages(&r).iter().zip(compute_advantages(&s)) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(compute_advantages(&r).iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn exit_step_rule() {
        let ties = [0.0, 0.1, 0.3, 0.3, 0.2, 0.1, 0.05, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(select_exit_step(&ties).unwrap(), 3);
        let increasing: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        assert_eq!(select_exit_step(&increasing).unwrap(), 10);
        let mut peak = vec![0.0; 11];
        peak[1] = 0.05;
        peak[4] = 0.4;
        peak[6] = 0.1;
        assert_eq!(select_exit_step(&peak).unwrap(), 4);
        assert!(matches!(select_exit_step(&[0.0; 11]), Err(Error::ZeroProfile)));
    }

    #[test]
    fn nfe_table() {
        let full = nfe_accounting(&SamplerConfig::full(10, 1.0), 1, 1);
        assert_eq!((full.per_rollout_old, full.per_rollout_train), (10, 10));
        let window = nfe_accounting(&SamplerConfig::sliding_window(10, 1.0, 4, 25), 1, 1);
        assert_eq!((window.per_rollout_old, window.per_rollout_train), (10, 4));
        let active = nfe_accounting(&SamplerConfig::active(10, 1.0, 4), 16, 1);
        assert_eq!((active.per_rollout_old, active.per_rollout_train), (5, 4));
        assert_eq!((active.group_old, active.group_train), (80, 64));
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerConfig::active(10, 1.0, 0).validate().is_err());
        assert!(SamplerConfig::active(10, 1.0, 11).validate().is_err());
        assert!(SamplerConfig::sliding_window(10, 1.0, 0, 1).validate().is_err());
        assert!(SamplerConfig::full(1, 1.0).validate().is_err());
        assert!(SamplerConfig::active(10, 1.0, 10).validate().is_ok());
    }

    #[test]
    fn sampler_serializes_flat() {
        let s = SamplerConfig::sliding_window(10, 1.0, 4, 25);
        let v = serde_json::to_value(s).unwrap();
        assert_eq!(v["mode"], "sliding_window");
        assert_eq!(v["window"], 4);
        let back: SamplerConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn variance_of_identical_values_is_exactly_zero() {
        assert_eq!(population_variance(&[0.1 + 0.2; 7]), 0.0);
    }
}
