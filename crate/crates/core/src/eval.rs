//! Benchmark harness: seeded test sets, evaluation metrics, and the
//! sampler-strategy comparison.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{sample_ode_batch, standard_normal, FlowPolicy, VelocityField, BATCH_CHUNK};
use crate::grpo::{nfe_accounting, train_iteration, GrpoConfig, IterationMetrics, SamplerConfig, TrainState};
use crate::rewards::{compute_reward, RewardConfig};
use crate::rng::{self, derive_seed, Namespace};
use crate::scene::{
    sample_instruction, sample_scene, template_grid, EditCondition, GenerationConfig, Task, LATENT_DIM,
};

pub const DEFAULT_TEST_SIZE: usize = 100;

fn task_tag(task: Task) -> u64 {
    task as u64
}

/// `n` seeded conditions for `task` drawn from namespace `ns`.
pub fn build_conditions(
    task: Task,
    n: usize,
    seed: u64,
    ns: Namespace,
    generation: &GenerationConfig,
) -> Result<Vec<EditCondition>> {
    (0..n)
        .map(|i| {
            let scene = sample_scene(derive_seed(seed, ns, &[task_tag(task), i as u64, 0]), generation)?;
            let instr = sample_instruction(derive_seed(seed, ns, &[task_tag(task), i as u64, 1]), &scene, Some(task));
            Ok(EditCondition::new(scene, instr))
        })
        .collect()
}

/// One corpus line: a condition plus the seeds it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub scene_seed: u64,
    pub instruction_seed: u64,
    /// Position of the instruction among its scene's instructions.
    pub slot: usize,
    pub condition: EditCondition,
}

/// `scenes` seeded scenes with `per_scene` distinct instructions each (fewer
/// only when the scene admits fewer templates).
pub fn build_corpus(
    task: Task,
    scenes: usize,
    per_scene: usize,
    seed: u64,
    ns: Namespace,
    generation: &GenerationConfig,
) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::with_capacity(scenes * per_scene);
    for s in 0..scenes {
        let scene_seed = derive_seed(seed, ns, &[task_tag(task), s as u64, 0]);
        let instruction_seed = derive_seed(seed, ns, &[task_tag(task), s as u64, 1]);
        let scene = sample_scene(scene_seed, generation)?;
        let grid = template_grid(&scene, task);
        let mut r = rng::stream(instruction_seed);
        let picks = sample_indices(&mut r, grid.len(), per_scene.min(grid.len()));
        for (slot, i) in picks.into_iter().enumerate() {
            items.push(CorpusItem {
                scene_seed,
                instruction_seed,
                slot,
                condition: EditCondition::new(scene.clone(), grid[i]),
            });
        }
    }
    Ok(items)
}

pub fn build_test_set(task: Task, n: usize, seed: u64) -> Result<Vec<EditCondition>> {
    build_conditions(task, n, seed, Namespace::Eval, &GenerationConfig::default())
}

/// Fixed initial noise for test item `index`.
pub fn eval_noise(seed: u64, index: usize) -> Vec<f64> {
    standard_normal(&mut rng::stream(derive_seed(seed, Namespace::Eval, &[u64::MAX, index as u64])), LATENT_DIM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub success: bool,
    pub total: f64,
    pub task_metric: f64,
    pub consistency_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trans_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rot_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_err: Option<f64>,
    pub consistency_l1: f64,
    pub records: Vec<SampleRecord>,
}

impl MetricsReport {
    /// Trans. Dist. for translation, the normalized error otherwise.
    pub fn headline(&self) -> f64 {
        self.trans_dist.or(self.rot_err).or(self.scale_err).unwrap_or(f64::NAN)
    }
}

/// One deterministic ODE sample per test item, scored by the shared reward
/// criteria.
pub fn evaluate_policy<F: VelocityField + ?Sized>(
    field: &F,
    test_set: &[EditCondition],
    steps: usize,
    seed: u64,
    reward_config: &RewardConfig,
) -> Result<MetricsReport> {
    let task = test_set
        .first()
        .map(|c| c.instruction.task)
        .ok_or_else(|| crate::Error::Config("empty test set".into()))?;
    let chunks: Vec<Vec<SampleRecord>> = test_set
        .par_chunks(BATCH_CHUNK)
        .enumerate()
        .map(|(chunk_index, chunk)| {
            let offset = chunk_index * BATCH_CHUNK;
            let conds: Vec<&EditCondition> = chunk.iter().collect();
            let noises = (0..chunk.len()).map(|j| eval_noise(seed, offset + j)).collect();
            let trajectories = sample_ode_batch(field, &conds, steps, noises)?;
            chunk
                .iter()
                .zip(&trajectories)
                .enumerate()
                .map(|(j, (cond, traj))| {
                    let r = compute_reward(&cond.scene, &traj.decoded, &cond.instruction, reward_config)?;
                    Ok(SampleRecord {
                        index: offset + j,
                        success: r.success,
                        total: r.total,
                        task_metric: r.task_metric(),
                        consistency_l1: r.diagnostics["consistency_l1"],
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<SampleRecord> = chunks.into_iter().flatten().collect();
    let n = records.len() as f64;
    let mean = |f: fn(&SampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let metric = mean(|r| r.task_metric);
    Ok(MetricsReport {
        task,
        n_samples: records.len(),
        accuracy: records.iter().filter(|r| r.success).count() as f64 / n,
        mean_reward: mean(|r| r.total),
        trans_dist: (task == Task::Translate).then_some(metric),
        rot_err: (task == Task::Rotate).then_some(metric),
        scale_err: (task == Task::Resize).then_some(metric),
        consistency_l1: mean(|r| r.consistency_l1),
        records,
    })
}

/// Indices of the training conditions used at `iteration`; identical for
/// every strategy sharing `seed`.
pub fn batch_indices(seed: u64, iteration: u64, dataset_len: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::stream(derive_seed(seed, Namespace::Train, &[u64::MAX, iteration]));
    sample_indices(&mut r, dataset_len, batch.min(dataset_len)).into_vec()
}

/// Order-sensitive hash of a stream of conditions.
pub fn hash_conditions<'a>(conditions: impl IntoIterator<Item = &'a EditCondition>, state: &mut DefaultHasher) {
    for c in conditions {
        for v in &c.vector.0 {
            v.to_bits().hash(state);
        }
    }
}

/// Evaluation reward curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub cumulative_nfe_train: u64,
    pub eval_reward: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub log: Vec<IterationMetrics>,
    pub eval_curve: Vec<EvalPoint>,
    pub condition_hash: u64,
    pub sample_ms: u64,
    pub train_ms: u64,
}

/// Drives `iterations` GRPO iterations, evaluating every `eval_every`
/// iterations (and at both ends).
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    state: &mut TrainState,
    train_set: &[EditCondition],
    iterations: u64,
    batch: usize,
    test_set: &[EditCondition],
    eval_every: u64,
    eval_seed: u64,
    mut on_iteration: impl FnMut(&IterationMetrics, &TrainState) -> Result<()>,
) -> Result<TrainingRun> {
    let mut hasher = DefaultHasher::new();
    let mut eval_curve = Vec::new();
    let mut cumulative = 0u64;
    let evaluate = |state: &TrainState, cumulative: u64, curve: &mut Vec<EvalPoint>| -> Result<()> {
        let report = evaluate_policy(&state.policy, test_set, state.policy.steps, eval_seed, &state.reward_config)?;
        curve.push(EvalPoint {
            iteration: state.iteration,
            cumulative_nfe_train: cumulative,
            eval_reward: report.mean_reward,
            eval_accuracy: report.accuracy,
        });
        Ok(())
    };
    if !test_set.is_empty() {
        evaluate(state, 0, &mut eval_curve)?;
    }
    let mut sample_ms = 0;
    let mut train_ms = 0;
    for _ in 0..iterations {
        let idx = batch_indices(state.root_seed, state.iteration, train_set.len(), batch);
        let conditions: Vec<EditCondition> = idx.iter().map(|&i| train_set[i].clone()).collect();
        hash_conditions(&conditions, &mut hasher);
        let started = Instant::now();
        let m = train_iteration(state, &conditions)?;
        let elapsed = started.elapsed().as_millis() as u64;
        // sampling and optimization share one timer; split by NFE share
        let total_nfe = (m.nfe_old + m.nfe_train).max(1);
        sample_ms += elapsed * m.nfe_old / total_nfe;
        train_ms += elapsed * m.nfe_train / total_nfe;
        cumulative += m.nfe_train;
        on_iteration(&m, state)?;
        if !test_set.is_empty() && eval_every > 0 && (state.iteration % eval_every == 0 || state.iteration == iterations) {
            evaluate(state, cumulative, &mut eval_curve)?;
        }
    }
    Ok(TrainingRun {
        log: state.log.clone(),
        eval_curve,
        condition_hash: hasher.finish(),
        sample_ms,
        train_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    pub sampler: SamplerConfig,
    pub nfe_old: usize,
    pub nfe_train: usize,
    pub sample_ms: u64,
    pub train_ms: u64,
    pub total_ms: u64,
    pub initial: MetricsReport,
    pub final_metrics: MetricsReport,
    pub run: TrainingRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerComparison {
    pub task: Task,
    pub iterations: u64,
    pub strategies: Vec<StrategyResult>,
}

/// Settings shared by every strategy in a comparison.
#[derive(Debug, Clone)]
pub struct ComparisonSetup<'a> {
    pub pretrained: &'a FlowPolicy,
    pub train_set: &'a [EditCondition],
    pub test_set: &'a [EditCondition],
    pub iterations: u64,
    pub batch: usize,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub eval_every: u64,
    pub record_wall_time: bool,
}

/// Trains one copy of the pretrained policy per strategy on an identical
/// condition stream.
pub fn compare_samplers(setup: &ComparisonSetup<'_>, strategies: &[SamplerConfig]) -> Result<SamplerComparison> {
    let task = setup
        .test_set
        .first()
        .map(|c| c.instruction.task)
        .ok_or_else(|| crate::Error::Config("empty test set".into()))?;
    let mut results = Vec::with_capacity(strategies.len());
    for sampler in strategies {
        let policy = FlowPolicy::new(setup.pretrained.net.clone(), setup.pretrained.steps)?;
        let mut state = TrainState::new(policy, *sampler, setup.grpo, setup.reward, setup.train_seed)?;
        state.record_wall_time = setup.record_wall_time;
        let initial = evaluate_policy(&state.policy, setup.test_set, state.policy.steps, setup.eval_seed, &setup.reward)?;
        let mut run = run_training(
            &mut state,
            setup.train_set,
            setup.iterations,
            setup.batch,
            setup.test_set,
            setup.eval_every,
            setup.eval_seed,
            |_, _| Ok(()),
        )?;
        if !setup.record_wall_time {
            run.sample_ms = 0;
            run.train_ms = 0;
        }
        let final_metrics =
            evaluate_policy(&state.policy, setup.test_set, state.policy.steps, setup.eval_seed, &setup.reward)?;
        let budget = nfe_accounting(sampler, 1, setup.grpo.inner_epochs);
        results.push(StrategyResult {
            strategy: sampler.mode.name().to_string(),
            sampler: *sampler,
            nfe_old: budget.per_rollout_old,
            nfe_train: budget.per_rollout_train,
            sample_ms: run.sample_ms,
            train_ms: run.train_ms,
            total_ms: run.sample_ms + run.train_ms,
            initial,
            final_metrics,
            run,
        });
    }
    Ok(SamplerComparison {
        task,
        iterations: setup.iterations,
        strategies: results,
    })
}

impl SamplerComparison {
    /// Table with one row per strategy.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("strategy,nfe_old,nfe_train,sample_ms,train_ms,total_ms,trans_dist_or_err,accuracy\n");
        for s in &self.strategies {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.strategy,
                s.nfe_old,
                s.nfe_train,
                s.sample_ms,
                s.train_ms,
                s.total_ms,
                s.final_metrics.headline(),
                s.final_metrics.accuracy
            ));
        }
        out
    }

    /// Per-iteration mean group reward, one column per strategy.
    pub fn reward_curves_csv(&self) -> String {
        let mut out = String::from("iteration");
        for s in &self.strategies {
            out.push_str(&format!(",{}", s.strategy));
        }
        out.push('\n');
        let rows = self.strategies.iter().map(|s| s.run.log.len()).max().unwrap_or(0);
        for i in 0..rows {
            out.push_str(&i.to_string());
            for s in &self.strategies {
                match s.run.log.get(i) {
                    Some(m) => out.push_str(&format!(",{}", m.mean_reward)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}
