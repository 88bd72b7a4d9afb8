//! Command-line pipeline: `gen-data → pretrain → calibrate → train → eval`,
//! plus `compare` and `pipeline`.
//!
//! Every command resolves one [`RunConfig`] (flags > config file > defaults),
//! writes its artifacts under `<out>/<command>/`, and leaves `config.json`
//! and `manifest.json` next to them. Re-running with
//! `--config <out>/<command>/config.json` reproduces the artifacts byte for
//! byte; wall-clock fields are zero unless `record_wall_time` is set.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::eval::{
    build_conditions, build_corpus, build_test_set, compare_samplers, evaluate_policy, eval_noise,
    run_training, ComparisonSetup,
};
use crate::flow::{policy_architecture, pretrain, sample_ode_batch, FlowPolicy, PretrainConfig, PretrainPair};
use crate::grpo::{
    nfe_accounting, off_policy_step_eval, GrpoConfig, SamplerConfig, StepImportanceProfile, TrainState,
    DEFAULT_NOISE_LEVEL, DEFAULT_STEPS, LOG_HEADER,
};
use crate::nn::Mlp;
use crate::rewards::RewardConfig;
use crate::rng::{derive_seed, Namespace};
use crate::scene::{EditCondition, GenerationConfig, Instruction, SceneSpec, Task};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {}; run `geoedit {producer}` first", artifact.display())]
    Missing { artifact: PathBuf, producer: &'static str },

    #[error(transparent)]
    Run(#[from] crate::Error),
}

impl CliError {
    /// 2 config error, 3 missing prerequisite, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use crate::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Run(e) => match e {
                E::Numerical(_) | E::NonFiniteGradient { .. } | E::NonPositiveTime(_) | E::ZeroProfile => 4,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    Full,
    Window,
    Active,
    /// Active with the exit step taken from calibration.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub pretrain: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            pretrain: 0,
            train: 0,
            eval: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub instructions_per_scene: usize,
    /// Fraction of the RL corpus kept, by whole scenes (0.1 → 320 inputs).
    pub fraction: f64,
    pub pretrain_pairs: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 800,
            instructions_per_scene: 4,
            fraction: 1.0,
            pretrain_pairs: 2000,
            test_size: crate::eval::DEFAULT_TEST_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub steps: usize,
    pub noise_level: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            noise_level: DEFAULT_NOISE_LEVEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub mode: SamplerChoice,
    pub window: usize,
    pub shift_every: usize,
    pub exit_step: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            mode: SamplerChoice::Active,
            window: 4,
            shift_every: 25,
            exit_step: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub probes: usize,
    pub group_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            probes: 4,
            group_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: u64,
    /// Conditions per iteration, each expanded into a group.
    pub batch: usize,
    /// Test-set evaluation cadence; 0 evaluates only at both ends.
    pub eval_every: u64,
    /// Checkpoint cadence; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch: 16,
            eval_every: 25,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub strategies: Vec<SamplerChoice>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            strategies: vec![SamplerChoice::Full, SamplerChoice::Window, SamplerChoice::Auto],
        }
    }
}

/// Declarative description of a run. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub seeds: Seeds,
    pub generation: GenerationConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub flow: FlowConfig,
    pub pretrain: PretrainConfig,
    /// Pretraining snapshot cadence; 0 keeps only the final checkpoint.
    pub pretrain_snapshot_every: u64,
    pub sampler: SamplerSpec,
    pub calibration: CalibrationConfig,
    pub grpo: GrpoConfig,
    pub training: TrainingConfig,
    pub reward: RewardConfig,
    pub compare: CompareConfig,
    pub out: PathBuf,
    /// Rayon pool size; `None` uses every core.
    pub workers: Option<usize>,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Translate,
            seeds: Seeds::default(),
            generation: GenerationConfig::default(),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            flow: FlowConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_snapshot_every: 0,
            sampler: SamplerSpec::default(),
            calibration: CalibrationConfig::default(),
            grpo: GrpoConfig::default(),
            training: TrainingConfig::default(),
            reward: RewardConfig::default(),
            compare: CompareConfig::default(),
            out: PathBuf::from("runs/default"),
            workers: None,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.generation.validate()?;
        self.grpo.validate()?;
        self.reward.validate()?;
        if self.flow.steps < 2 {
            return bad("flow.steps must be >= 2");
        }
        if !(self.flow.noise_level >= 0.0 && self.flow.noise_level.is_finite()) {
            return bad("flow.noise_level must be finite and >= 0");
        }
        if self.network.hidden.iter().any(|&h| h == 0) {
            return bad("network.hidden widths must be >= 1");
        }
        let d = &self.data;
        if d.scenes == 0 || d.instructions_per_scene == 0 || d.pretrain_pairs == 0 || d.test_size == 0 {
            return bad("data counts must be >= 1");
        }
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            return bad("data.fraction must lie in (0, 1]");
        }
        if self.pretrain.iterations == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain.iterations and pretrain.batch_size must be >= 1");
        }
        if !(self.pretrain.final_lr_fraction >= 0.0 && self.pretrain.final_lr_fraction <= 1.0) {
            return bad("pretrain.final_lr_fraction must lie in [0, 1]");
        }
        if self.training.batch == 0 {
            return bad("training.batch must be >= 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1");
        }
        let c = &self.calibration;
        let needs_calibration =
            self.sampler.mode == SamplerChoice::Auto || self.compare.strategies.contains(&SamplerChoice::Auto);
        if needs_calibration && (!(2..=4).contains(&c.probes) || c.group_size < 2) {
            return bad("auto exit step needs calibration.probes in 2..=4 and calibration.group_size >= 2");
        }
        if self.compare.strategies.is_empty() {
            return bad("compare.strategies must not be empty");
        }
        for choice in std::iter::once(self.sampler.mode).chain(self.compare.strategies.iter().copied()) {
            if choice != SamplerChoice::Auto {
                self.sampler_for(choice, None)?.validate()?;
            }
        }
        Ok(())
    }

    /// Sampler for `choice`; `auto` needs the calibrated exit step.
    pub fn sampler_for(&self, choice: SamplerChoice, calibrated_k: Option<usize>) -> CliResult<SamplerConfig> {
        let (t, a) = (self.flow.steps, self.flow.noise_level);
        let s = match choice {
            SamplerChoice::Full => SamplerConfig::full(t, a),
            SamplerChoice::Window => SamplerConfig::sliding_window(t, a, self.sampler.window, self.sampler.shift_every),
            SamplerChoice::Active => SamplerConfig::active(t, a, self.sampler.exit_step),
            SamplerChoice::Auto => {
                let k = calibrated_k.ok_or_else(|| CliError::Config("auto sampler without a calibrated exit step".into()))?;
                SamplerConfig::active(t, a, k)
            }
        };
        s.validate()?;
        Ok(s)
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }
}

#[derive(Debug, Parser)]
#[command(name = "geoedit", version, about = "Train and evaluate a flow-based scene-editing policy with GRPO")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Flags {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sets every seed (data, pretrain, train, eval).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<Task>,
    #[arg(long, global = true, value_enum)]
    pub sampler: Option<SamplerChoice>,
    /// Rayon pool size.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the RL corpus, pretraining pairs, and test set as JSONL.
    GenData,
    /// Flow-matching pretraining on oracle pairs.
    Pretrain,
    /// Off-policy step-importance profile and exit-step selection.
    Calibrate,
    /// GRPO fine-tuning from the pretrained checkpoint.
    Train,
    /// Deterministic evaluation on the test set.
    Eval {
        /// Checkpoint to evaluate; defaults to the trained, then the
        /// pretrained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write one ODE trajectory per test item as JSONL.
        #[arg(long)]
        trajectories: bool,
    },
    /// Train one policy per sampling strategy and compare them.
    Compare,
    /// gen-data, pretrain, calibrate, train and eval in sequence.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Calibrate => "calibrate",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Compare => "compare",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Resolves flags > config file > defaults.
pub fn resolve_config(flags: &Flags) -> CliResult<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seeds = Seeds {
            data: seed,
            pretrain: seed,
            train: seed,
            eval: seed,
        };
    }
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if let Some(task) = flags.task {
        cfg.task = task;
    }
    if let Some(sampler) = flags.sampler {
        cfg.sampler.mode = sampler;
    }
    if let Some(workers) = flags.workers {
        cfg.workers = Some(workers);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.flags)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Calibrate => cmd_calibrate(&cfg).map(|_| ()),
        Command::Train => cmd_train(&cfg),
        Command::Eval {
            checkpoint,
            trajectories,
        } => cmd_eval(&cfg, checkpoint.as_deref(), *trajectories),
        Command::Compare => cmd_compare(&cfg),
        Command::Pipeline => {
            cmd_gen_data(&cfg)?;
            cmd_pretrain(&cfg)?;
            if cfg.flow.noise_level > 0.0 {
                cmd_calibrate(&cfg)?;
            }
            cmd_train(&cfg)?;
            cmd_eval(&cfg, None, false)?;
            write_manifest(&cfg, cli.command.name(), &cfg.out, &[])
        }
    })
}

/// One line of the corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRecord {
    pub index: usize,
    pub scene_seed: u64,
    pub instruction_seed: u64,
    /// Position of the instruction among its scene's instructions.
    pub slot: usize,
    pub scene: SceneSpec,
    pub instruction: Instruction,
    /// Oracle-edited scene; present in pretraining pairs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<SceneSpec>,
}

impl ConditionRecord {
    pub fn condition(&self) -> EditCondition {
        EditCondition::new(self.scene.clone(), self.instruction)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seeds: Seeds,
    workers: usize,
    config: &'a RunConfig,
    artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    path: String,
    bytes: u64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(crate::Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(crate::Error::from)?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn write_manifest(cfg: &RunConfig, command: &str, dir: &Path, artifacts: &[PathBuf]) -> CliResult<()> {
    let entries = artifacts
        .iter()
        .map(|p| {
            let bytes = fs::metadata(p).map(|m| m.len()).unwrap_or(0);
            let rel = p.strip_prefix(&cfg.out).unwrap_or(p);
            ArtifactEntry {
                path: rel.display().to_string(),
                bytes,
            }
        })
        .collect();
    write_json(&dir.join("config.json"), cfg)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seeds: cfg.seeds,
            workers: rayon::current_num_threads(),
            config: cfg,
            artifacts: entries,
        },
    )
}

fn require(path: PathBuf, producer: &'static str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing {
            artifact: path,
            producer,
        })
    }
}

fn read_records(path: &Path, task: Task) -> CliResult<Vec<ConditionRecord>> {
    let text = fs::read_to_string(path).map_err(crate::Error::from)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: ConditionRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if row.instruction.task != task {
            return Err(CliError::Config(format!(
                "{} holds {} data but the config task is {}",
                path.display(),
                row.instruction.task.name(),
                task.name()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} is empty", path.display())));
    }
    Ok(rows)
}

fn train_path(cfg: &RunConfig) -> PathBuf {
    cfg.dir("data").join("train.jsonl")
}

fn pretrain_data_path(cfg: &RunConfig) -> PathBuf {
    cfg.dir("data").join("pretrain.jsonl")
}

fn test_path(cfg: &RunConfig) -> PathBuf {
    cfg.dir("data").join("test.jsonl")
}

fn load_conditions(cfg: &RunConfig, path: PathBuf) -> CliResult<Vec<EditCondition>> {
    let path = require(path, "gen-data")?;
    Ok(read_records(&path, cfg.task)?.iter().map(ConditionRecord::condition).collect())
}

fn load_policy(cfg: &RunConfig, path: &Path) -> CliResult<FlowPolicy> {
    let net = Mlp::load(path)?;
    Ok(FlowPolicy::new(net, cfg.flow.steps)?)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.dir("data");
    let d = &cfg.data;
    let kept_scenes = ((d.scenes as f64 * d.fraction).round() as usize).max(1);
    let corpus = build_corpus(
        cfg.task,
        kept_scenes,
        d.instructions_per_scene,
        cfg.seeds.data,
        Namespace::Data,
        &cfg.generation,
    )?;
    let train: Vec<ConditionRecord> = corpus
        .into_iter()
        .enumerate()
        .map(|(index, item)| ConditionRecord {
            index,
            scene_seed: item.scene_seed,
            instruction_seed: item.instruction_seed,
            slot: item.slot,
            scene: item.condition.scene,
            instruction: item.condition.instruction,
            target: None,
        })
        .collect();

    let pairs = build_conditions(cfg.task, d.pretrain_pairs, cfg.seeds.pretrain, Namespace::Pretrain, &cfg.generation)?;
    let pretrain_rows: Vec<ConditionRecord> = pairs
        .into_iter()
        .enumerate()
        .map(|(index, c)| {
            let target = Some(c.oracle_target());
            condition_record(index, cfg.task, cfg.seeds.pretrain, Namespace::Pretrain, c, target)
        })
        .collect();

    let test = build_test_set(cfg.task, d.test_size, cfg.seeds.eval)?;
    let test_rows: Vec<ConditionRecord> = test
        .into_iter()
        .enumerate()
        .map(|(index, c)| condition_record(index, cfg.task, cfg.seeds.eval, Namespace::Eval, c, None))
        .collect();

    let paths = [train_path(cfg), pretrain_data_path(cfg), test_path(cfg)];
    write_jsonl(&paths[0], &train)?;
    write_jsonl(&paths[1], &pretrain_rows)?;
    write_jsonl(&paths[2], &test_rows)?;
    eprintln!(
        "gen-data [{}]: {} RL inputs over {} scenes, {} pretraining pairs, {} test items",
        cfg.task.name(),
        train.len(),
        kept_scenes,
        pretrain_rows.len(),
        test_rows.len()
    );
    write_manifest(cfg, "gen-data", &dir, &paths)
}

/// Matches the seed derivation of [`build_conditions`].
fn condition_record(
    index: usize,
    task: Task,
    seed: u64,
    ns: Namespace,
    c: EditCondition,
    target: Option<SceneSpec>,
) -> ConditionRecord {
    ConditionRecord {
        index,
        scene_seed: derive_seed(seed, ns, &[task as u64, index as u64, 0]),
        instruction_seed: derive_seed(seed, ns, &[task as u64, index as u64, 1]),
        slot: 0,
        scene: c.scene,
        instruction: c.instruction,
        target,
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.dir("pretrain");
    let data = require(pretrain_data_path(cfg), "gen-data")?;
    let pairs: Vec<PretrainPair> = read_records(&data, cfg.task)?
        .iter()
        .map(|r| PretrainPair::from_condition(r.condition()))
        .collect();
    let arch = policy_architecture(cfg.network.hidden.clone());
    let mut net = Mlp::init(derive_seed(cfg.seeds.pretrain, Namespace::Pretrain, &[u64::MAX]), arch)?;
    let mut artifacts = Vec::new();
    let mut snapshot_error = None;
    let every = cfg.pretrain_snapshot_every;
    let total = cfg.pretrain.run_length();
    let losses = pretrain(&mut net, &pairs, &cfg.pretrain, cfg.seeds.pretrain, |it, loss, net| {
        let done = it + 1;
        if done % 500 == 0 || done == total {
            eprintln!("pretrain {done}/{total}: loss {loss:.4}");
        }
        if every > 0 && done % every == 0 && done < total {
            let path = dir.join(format!("checkpoint_{done:06}.json"));
            match fs::create_dir_all(&dir).map_err(crate::Error::from).and_then(|_| net.save(&path)) {
                Ok(()) => artifacts.push(path),
                Err(e) => snapshot_error = Some(e),
            }
        }
    })?;
    if let Some(e) = snapshot_error {
        return Err(e.into());
    }
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let loss_path = dir.join("loss.csv");
    write_file(&loss_path, csv.as_bytes())?;
    let ckpt = dir.join("checkpoint.json");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    net.save(&ckpt)?;
    artifacts.push(loss_path);
    artifacts.push(ckpt);
    write_manifest(cfg, "pretrain", &dir, &artifacts)
}

fn calibrate_policy(cfg: &RunConfig, policy: &FlowPolicy) -> CliResult<StepImportanceProfile> {
    if cfg.flow.noise_level == 0.0 {
        return Err(CliError::Config("calibration without noise (flow.noise_level = 0)".into()));
    }
    let train = load_conditions(cfg, train_path(cfg))?;
    let probes = cfg.calibration.probes.min(train.len());
    let profile = off_policy_step_eval(
        policy,
        &train[..probes],
        cfg.flow.steps,
        cfg.calibration.group_size,
        cfg.flow.noise_level,
        &cfg.reward,
        derive_seed(cfg.seeds.train, Namespace::Calibrate, &[]),
    )?;
    if profile.selected_k.is_none() {
        return Err(crate::Error::ZeroProfile.into());
    }
    Ok(profile)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> CliResult<StepImportanceProfile> {
    let dir = cfg.dir("calibrate");
    if cfg.flow.noise_level == 0.0 {
        return Err(CliError::Config("calibration without noise (flow.noise_level = 0)".into()));
    }
    let ckpt = require(cfg.dir("pretrain").join("checkpoint.json"), "pretrain")?;
    let policy = load_policy(cfg, &ckpt)?;
    let profile = calibrate_policy(cfg, &policy)?;
    let path = dir.join("profile.json");
    write_json(&path, &profile)?;
    eprintln!(
        "calibrate [{}]: variances {:?}, selected K = {:?}",
        cfg.task.name(),
        profile.variances,
        profile.selected_k
    );
    write_manifest(cfg, "calibrate", &dir, &[path])?;
    Ok(profile)
}

/// Exit step for `auto`: the stored profile when it matches the config,
/// otherwise a fresh calibration.
fn calibrated_exit_step(cfg: &RunConfig, policy: &FlowPolicy) -> CliResult<usize> {
    let path = cfg.dir("calibrate").join("profile.json");
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(crate::Error::from)?;
        let profile: StepImportanceProfile = serde_json::from_str(&text).map_err(crate::Error::from)?;
        let matches = profile.task == cfg.task
            && profile.steps == cfg.flow.steps
            && profile.noise_level == cfg.flow.noise_level
            && profile.group_size == cfg.calibration.group_size;
        if let (true, Some(k)) = (matches, profile.selected_k) {
            return Ok(k);
        }
    }
    let profile = calibrate_policy(cfg, policy)?;
    let k = profile.selected_k.ok_or(crate::Error::ZeroProfile)?;
    eprintln!("auto sampler: calibrated exit step K = {k}");
    Ok(k)
}

fn resolve_sampler(cfg: &RunConfig, choice: SamplerChoice, policy: &FlowPolicy) -> CliResult<SamplerConfig> {
    let k = match choice {
        SamplerChoice::Auto => Some(calibrated_exit_step(cfg, policy)?),
        _ => None,
    };
    cfg.sampler_for(choice, k)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.dir("train");
    let ckpt = require(cfg.dir("pretrain").join("checkpoint.json"), "pretrain")?;
    let train = load_conditions(cfg, train_path(cfg))?;
    let test = load_conditions(cfg, test_path(cfg))?;
    let policy = load_policy(cfg, &ckpt)?;
    let sampler = resolve_sampler(cfg, cfg.sampler.mode, &policy)?;
    let mut state = TrainState::new(policy, sampler, cfg.grpo, cfg.reward, cfg.seeds.train)?;
    state.record_wall_time = cfg.record_wall_time;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let mut artifacts = Vec::new();
    let every = cfg.training.checkpoint_every;
    let total = cfg.training.iterations;
    let mut run = run_training(
        &mut state,
        &train,
        total,
        cfg.training.batch,
        &test,
        cfg.training.eval_every,
        cfg.seeds.eval,
        |m, state| {
            let done = m.iteration + 1;
            if done % 10 == 0 || done == total {
                eprintln!(
                    "train {done}/{total}: mean reward {:.4}, accuracy {:.3}",
                    m.mean_reward, m.accuracy
                );
            }
            if every > 0 && done % every == 0 && done < total {
                let path = dir.join(format!("checkpoint_{done:05}.json"));
                state.policy.net.save(&path)?;
                artifacts.push(path);
            }
            Ok(())
        },
    )?;
    if !cfg.record_wall_time {
        run.sample_ms = 0;
        run.train_ms = 0;
    }

    let mut log = format!("{LOG_HEADER}\n");
    for m in &run.log {
        log.push_str(&m.csv_row());
        log.push('\n');
    }
    let log_path = dir.join("log.csv");
    write_file(&log_path, log.as_bytes())?;

    let mut curve = String::from("iteration,cumulative_nfe_train,eval_reward,eval_accuracy\n");
    for p in &run.eval_curve {
        curve.push_str(&format!(
            "{},{},{},{}\n",
            p.iteration, p.cumulative_nfe_train, p.eval_reward, p.eval_accuracy
        ));
    }
    let curve_path = dir.join("eval_curve.csv");
    write_file(&curve_path, curve.as_bytes())?;

    let final_ckpt = dir.join("checkpoint.json");
    state.policy.net.save(&final_ckpt)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        sampler: &'a SamplerConfig,
        iterations: u64,
        batch: usize,
        nfe_per_rollout_old: usize,
        nfe_per_rollout_train: usize,
        condition_hash: u64,
        eval_curve: &'a [crate::eval::EvalPoint],
    }
    let budget = nfe_accounting(&sampler, 1, cfg.grpo.inner_epochs);
    let summary_path = dir.join("summary.json");
    write_json(
        &summary_path,
        &Summary {
            sampler: &sampler,
            iterations: total,
            batch: cfg.training.batch,
            nfe_per_rollout_old: budget.per_rollout_old,
            nfe_per_rollout_train: budget.per_rollout_train,
            condition_hash: run.condition_hash,
            eval_curve: &run.eval_curve,
        },
    )?;
    artifacts.extend([log_path, curve_path, summary_path, final_ckpt]);
    write_manifest(cfg, "train", &dir, &artifacts)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, trajectories: bool) -> CliResult<()> {
    let dir = cfg.dir("eval");
    let ckpt = match checkpoint {
        Some(p) => require(p.to_path_buf(), "train")?,
        None => {
            let trained = cfg.dir("train").join("checkpoint.json");
            if trained.exists() {
                trained
            } else {
                require(cfg.dir("pretrain").join("checkpoint.json"), "pretrain")?
            }
        }
    };
    let test = load_conditions(cfg, test_path(cfg))?;
    let policy = load_policy(cfg, &ckpt)?;
    let report = evaluate_policy(&policy, &test, cfg.flow.steps, cfg.seeds.eval, &cfg.reward)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    let mut artifacts = vec![report_path];
    if trajectories {
        let conds: Vec<&EditCondition> = test.iter().collect();
        let noises = (0..test.len()).map(|i| eval_noise(cfg.seeds.eval, i)).collect();
        let trajs = sample_ode_batch(&policy, &conds, cfg.flow.steps, noises)?;
        let path = dir.join("trajectories.jsonl");
        write_jsonl(&path, &trajs)?;
        artifacts.push(path);
    }
    let metric = match cfg.task {
        Task::Translate => "trans_dist",
        Task::Rotate => "rot_err",
        Task::Resize => "scale_err",
    };
    eprintln!(
        "eval [{}] {}: accuracy {:.3}, {metric} {:.4}, consistency_l1 {:.4}",
        cfg.task.name(),
        ckpt.display(),
        report.accuracy,
        report.headline(),
        report.consistency_l1
    );
    write_manifest(cfg, "eval", &dir, &artifacts)
}

pub fn cmd_compare(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.dir("compare");
    let ckpt = require(cfg.dir("pretrain").join("checkpoint.json"), "pretrain")?;
    let train = load_conditions(cfg, train_path(cfg))?;
    let test = load_conditions(cfg, test_path(cfg))?;
    let policy = load_policy(cfg, &ckpt)?;
    let strategies = cfg
        .compare
        .strategies
        .iter()
        .map(|&c| resolve_sampler(cfg, c, &policy))
        .collect::<CliResult<Vec<_>>>()?;
    let comparison = compare_samplers(
        &ComparisonSetup {
            pretrained: &policy,
            train_set: &train,
            test_set: &test,
            iterations: cfg.training.iterations,
            batch: cfg.training.batch,
            grpo: cfg.grpo,
            reward: cfg.reward,
            train_seed: cfg.seeds.train,
            eval_seed: cfg.seeds.eval,
            eval_every: cfg.training.eval_every,
            record_wall_time: cfg.record_wall_time,
        },
        &strategies,
    )?;
    let table = dir.join("table.csv");
    write_file(&table, comparison.table_csv().as_bytes())?;
    let curves = dir.join("reward_curves.csv");
    write_file(&curves, comparison.reward_curves_csv().as_bytes())?;
    let mut artifacts = vec![table, curves];
    for s in &comparison.strategies {
        let mut csv = String::from("iteration,cumulative_nfe_train,eval_reward,eval_accuracy\n");
        for p in &s.run.eval_curve {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.iteration, p.cumulative_nfe_train, p.eval_reward, p.eval_accuracy
            ));
        }
        let path = dir.join(format!("eval_curve_{}.csv", s.strategy));
        write_file(&path, csv.as_bytes())?;
        artifacts.push(path);
    }
    let json = dir.join("comparison.json");
    write_json(&json, &comparison)?;
    artifacts.push(json);
    eprint!("{}", comparison.table_csv());
    write_manifest(cfg, "compare", &dir, &artifacts)
}
