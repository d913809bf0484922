//! Experiment configuration.
//!
//! A config is a TOML document (schema in `docs/config.md`). Presets
//! provide complete configs; a `--config` file replaces the preset, and
//! command-line flags override either. Unset fields fall back to the
//! defaults of the selected task and scale.

use std::fs;
use std::path::Path;

use bilinear_ssm::eval::{Feedback, RolloutConfig, RolloutMode};
use bilinear_ssm::tasks::{config_hash, DatasetSizes, TaskConfig};
use bilinear_ssm::train::TrainConfig;
use bilinear_ssm::{Architecture, ModelDims, Routing, ScanMode, VariantKind};
use bilinear_ssm::tasks::TaskKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::runner::CellSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub rollout_count: Option<usize>,
    pub rollout_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_start: Option<f64>,
    pub lr_end: Option<f64>,
    pub bilinear_std: Option<f64>,
    pub log_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub eval_limit: Option<usize>,
    pub pbim_clamp: Option<f64>,
    pub scan: Option<ScanMode>,
    pub precision: Precision,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub total: Option<usize>,
    pub warmup: Option<usize>,
    pub count: Option<usize>,
    pub feedback: Option<Feedback>,
    /// Restart every prediction from the last `window` frames instead of
    /// carrying the state.
    pub window: Option<usize>,
}

/// One configuration of the parameter-matched comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedModel {
    pub variant: VariantKind,
    pub d_state: usize,
    pub d_inner: Option<usize>,
}

impl MatchedModel {
    const fn new(variant: VariantKind, d_state: usize, d_inner: Option<usize>) -> Self {
        Self {
            variant,
            d_state,
            d_inner,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub context_lens: Vec<usize>,
    pub d_states: Vec<usize>,
    /// Variants trained at every grid point of the L / d_s sweeps.
    pub variants: Vec<VariantKind>,
    pub matched: Vec<MatchedModel>,
    pub ablation_tasks: Vec<TaskKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        use VariantKind::*;
        Self {
            context_lens: vec![25, 50, 75, 100],
            d_states: vec![8, 16],
            variants: vec![Standard, SeqBim, PBim],
            matched: vec![
                MatchedModel::new(Coupled, 16, Some(12)),
                MatchedModel::new(Coupled, 24, None),
                MatchedModel::new(Gm, 16, None),
                MatchedModel::new(Gm, 8, Some(12)),
                MatchedModel::new(SeqBim, 16, None),
                MatchedModel::new(PBim, 16, None),
            ],
            ablation_tasks: TaskKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub variants: Vec<VariantKind>,
    pub routing: Routing,
    pub d_state: usize,
    pub d_inner: Option<usize>,
    pub dt_rank: Option<usize>,
    pub context_len: usize,
    pub seeds: Vec<u64>,
    /// Master seed of the generated dataset.
    pub data_seed: u64,
    pub desk_scale: bool,
    /// Worker threads; defaults to the available parallelism.
    pub workers: Option<usize>,
    /// Generator settings; task defaults when absent.
    pub generator: Option<TaskConfig>,
    pub data: DataSection,
    pub train: TrainSection,
    pub rollout: RolloutSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Narma10,
            variants: VariantKind::ALL.to_vec(),
            routing: Routing::Full,
            d_state: 8,
            d_inner: None,
            dt_rank: None,
            context_len: 50,
            seeds: (0..11).collect(),
            data_seed: 7,
            desk_scale: false,
            workers: None,
            generator: None,
            data: DataSection::default(),
            train: TrainSection::default(),
            rollout: RolloutSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

pub const PRESETS: [&str; 8] = [
    "table2",
    "table3",
    "table5",
    "table7",
    "table2-desk",
    "table3-desk",
    "table5-desk",
    "table7-desk",
];

/// Named experiment configuration.
pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    let (base, desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let mut cfg = ExperimentConfig::default();
    match base {
        "table2" => cfg.task = TaskKind::InputDelay,
        "table3" | "table7" => cfg.task = TaskKind::Narma10,
        "table5" => {
            cfg.variants = vec![VariantKind::SeqBim, VariantKind::Coupled];
            cfg.seeds = (0..3).collect();
        }
        _ => {
            return Err(CliError::Invalid(format!(
                "unknown preset '{name}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    }
    if desk {
        cfg.desk_scale = true;
        cfg.seeds = (0..3).collect();
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

/// Accepts `0..3`, `0..=2` or `0,1,2`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("cannot parse seed list '{s}'");
    if let Some((a, b)) = s.split_once("..") {
        let start: u64 = a.trim().parse().map_err(|_| bad())?;
        let (end, inclusive) = match b.strip_prefix('=') {
            Some(e) => (e, true),
            None => (b, false),
        };
        let end: u64 = end.trim().parse().map_err(|_| bad())?;
        let seeds: Vec<u64> = if inclusive {
            (start..=end).collect()
        } else {
            (start..end).collect()
        };
        return if seeds.is_empty() { Err(bad()) } else { Ok(seeds) };
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Invalid(format!("cannot serialise config: {e}")))
    }

    /// Hash of everything that can change results; the worker count is excluded.
    pub fn hash(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.workers = None;
        Ok(config_hash(&c)?)
    }

    pub fn is_full_scale(&self) -> bool {
        !self.desk_scale && self.train.iterations.is_none_or(|n| n >= 100_000)
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> CliResult<()> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if self.precision() != Precision::F64 {
            return invalid("only 64-bit floating point is implemented (precision = \"f64\")".into());
        }
        if self.variants.is_empty() {
            return invalid("no variants selected".into());
        }
        if self.seeds.is_empty() {
            return invalid("no seeds selected".into());
        }
        if let Some(g) = &self.generator {
            if g.kind() != self.task {
                return invalid(format!("generator settings are for {}, task is {}", g.kind(), self.task));
            }
            g.validate()?;
        }
        if self.workers == Some(0) {
            return invalid("workers must be positive".into());
        }
        for &v in &self.variants {
            Architecture::new(v, self.routing)?;
        }
        self.validate_context(self.context_len)?;
        for &ds in self.sweep.d_states.iter().chain([&self.d_state]) {
            if ds == 0 {
                return invalid("d_state must be positive".into());
            }
        }
        if self.sweep.context_lens.contains(&0) || self.context_len == 0 {
            return invalid("context length must be positive".into());
        }
        Ok(())
    }

    fn precision(&self) -> Precision {
        self.train.precision
    }

    fn tasks_in_use(&self) -> Vec<TaskKind> {
        let mut t = vec![self.task];
        t.extend(self.sweep.ablation_tasks.iter().copied().filter(|k| *k != self.task));
        t
    }

    /// Sizes, rollout and training settings at context length `l`.
    fn validate_context(&self, l: usize) -> CliResult<()> {
        for task in self.tasks_in_use() {
            self.sizes(l).validate()?;
            self.rollout_config(l)?.validate()?;
            self.train_config(task, 0).validate()?;
            if self.rollout_config(l)?.total > self.sizes(l).rollout_steps + 1 {
                return Err(CliError::Invalid(format!(
                    "rollout of {} frames exceeds the {} stored frames",
                    self.rollout_config(l)?.total,
                    self.sizes(l).rollout_steps + 1
                )));
            }
        }
        Ok(())
    }

    pub fn task_config(&self, task: TaskKind) -> TaskConfig {
        match &self.generator {
            Some(g) if g.kind() == task => g.clone(),
            _ => TaskConfig::default_for(task),
        }
    }

    pub fn sizes(&self, context_len: usize) -> DatasetSizes {
        let base = if self.desk_scale {
            DatasetSizes::desk()
        } else {
            DatasetSizes::default()
        };
        let mut s = base.with_context(context_len);
        let d = &self.data;
        s.train_count = d.train_count.unwrap_or(s.train_count);
        s.test_count = d.test_count.unwrap_or(s.test_count);
        s.rollout_count = d.rollout_count.unwrap_or(s.rollout_count);
        s.rollout_steps = d.rollout_steps.unwrap_or(s.rollout_steps);
        s
    }

    pub fn train_config(&self, task: TaskKind, seed: u64) -> TrainConfig {
        let mut c = if self.desk_scale {
            TrainConfig::desk()
        } else {
            TrainConfig::default()
        };
        let t = &self.train;
        c.seed = seed;
        c.iterations = t.iterations.unwrap_or(c.iterations);
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.lr_start = t.lr_start.unwrap_or(c.lr_start);
        c.lr_end = t.lr_end.unwrap_or(c.lr_end);
        c.bilinear_std = t.bilinear_std.unwrap_or(task.default_bilinear_std());
        c.log_every = t.log_every.unwrap_or(c.log_every);
        c.grad_clip = t.grad_clip.or(c.grad_clip);
        c.eval_limit = t.eval_limit.or(c.eval_limit);
        c.forward.pbim_clamp = t.pbim_clamp.or(c.forward.pbim_clamp);
        c.forward.scan = t.scan.unwrap_or(c.forward.scan);
        c
    }

    pub fn rollout_config(&self, context_len: usize) -> CliResult<RolloutConfig> {
        if context_len < 2 {
            return Err(CliError::Invalid("context length must be at least 2".into()));
        }
        let mut r = RolloutConfig::for_context(context_len);
        let s = &self.rollout;
        r.total = s.total.unwrap_or(r.total);
        r.warmup = s.warmup.unwrap_or(r.warmup);
        r.count = s.count.unwrap_or(r.count);
        r.feedback = s.feedback.unwrap_or(r.feedback);
        if let Some(w) = s.window {
            r.mode = RolloutMode::SlidingWindow(w);
        }
        Ok(r)
    }

    pub fn dims(&self, task: TaskKind, d_state: usize, d_inner: Option<usize>, context_len: usize) -> ModelDims {
        let mut d = ModelDims::new(task.d_model(), d_state, context_len).with_dt_rank(self.dt_rank);
        if let Some(di) = d_inner {
            d = d.with_d_inner(di);
        }
        d
    }

    pub fn cell(
        &self,
        task: TaskKind,
        arch: Architecture,
        d_state: usize,
        d_inner: Option<usize>,
        context_len: usize,
        seed: u64,
    ) -> CliResult<CellSpec> {
        Ok(CellSpec {
            task: self.task_config(task),
            sizes: self.sizes(context_len),
            data_seed: self.data_seed,
            arch,
            dims: self.dims(task, d_state, d_inner, context_len),
            train: self.train_config(task, seed),
            rollout: self.rollout_config(context_len)?,
        })
    }

    /// Every (variant, seed) pair at the configured dims.
    pub fn train_cells(&self) -> CliResult<Vec<CellSpec>> {
        let mut cells = Vec::new();
        for &v in &self.variants {
            let arch = Architecture::new(v, self.routing)?;
            for &seed in &self.seeds {
                cells.push(self.cell(self.task, arch, self.d_state, self.d_inner, self.context_len, seed)?);
            }
        }
        Ok(cells)
    }

    pub fn sweep_cells(&self, axis: SweepAxis) -> CliResult<Vec<CellSpec>> {
        let mut cells = Vec::new();
        let mut push = |arch, ds, di, l| -> CliResult<()> {
            for &seed in &self.seeds {
                cells.push(self.cell(self.task, arch, ds, di, l, seed)?);
            }
            Ok(())
        };
        match axis {
            SweepAxis::ContextLen | SweepAxis::DState => {
                let ls = match axis {
                    SweepAxis::ContextLen => self.sweep.context_lens.clone(),
                    _ => vec![self.context_len],
                };
                for &l in &ls {
                    self.validate_context(l)?;
                }
                for &ds in &self.sweep.d_states {
                    for &l in &ls {
                        for &v in &self.sweep.variants {
                            push(Architecture::plain(v), ds, self.d_inner, l)?;
                        }
                    }
                }
            }
            SweepAxis::ParamMatched => {
                for m in &self.sweep.matched {
                    push(Architecture::plain(m.variant), m.d_state, m.d_inner, self.context_len)?;
                }
            }
        }
        Ok(cells)
    }

    /// seq-BIM under every routing plus the Coupled reference, per task.
    pub fn ablation_cells(&self) -> CliResult<Vec<CellSpec>> {
        let mut cells = Vec::new();
        for &task in &self.sweep.ablation_tasks {
            for arch in ablation_architectures() {
                for &seed in &self.seeds {
                    cells.push(self.cell(task, arch, self.d_state, self.d_inner, self.context_len, seed)?);
                }
            }
        }
        Ok(cells)
    }
}

pub fn ablation_architectures() -> [Architecture; 4] {
    let seq = |r| Architecture {
        kind: VariantKind::SeqBim,
        routing: r,
    };
    [
        seq(Routing::Full),
        seq(Routing::XprojOnly),
        seq(Routing::BcoupOnly),
        Architecture::plain(VariantKind::Coupled),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    /// Context length × state size grid.
    #[value(name = "context-len", alias = "L")]
    ContextLen,
    /// State sizes at the configured context length.
    #[value(name = "d-state", alias = "ds")]
    DState,
    /// Models with roughly equal parameter counts.
    #[value(name = "param-matched")]
    ParamMatched,
}

/// Flags that override config values.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Comma-separated variant list.
    #[arg(long = "variant", global = true, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<VariantKind>,
    #[arg(long, global = true, value_parser = parse_routing)]
    pub routing: Option<Routing>,
    #[arg(long, global = true)]
    pub d_state: Option<usize>,
    #[arg(long, global = true)]
    pub d_inner: Option<usize>,
    #[arg(long, global = true)]
    pub context_len: Option<usize>,
    /// `0..3`, `0..=2` or `0,1,2`.
    #[arg(long, global = true, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Reduced protocol: 20K iterations, batch 64, 8K/1K/100 trajectories, 3 seeds.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr_start: Option<f64>,
    #[arg(long, global = true)]
    pub lr_end: Option<f64>,
    #[arg(long, global = true)]
    pub bilinear_std: Option<f64>,
    #[arg(long, global = true)]
    pub log_every: Option<usize>,
    #[arg(long, global = true)]
    pub grad_clip: Option<f64>,
    #[arg(long, global = true)]
    pub eval_limit: Option<usize>,
    #[arg(long, global = true)]
    pub pbim_clamp: Option<f64>,
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long, global = true)]
    pub train_count: Option<usize>,
    #[arg(long, global = true)]
    pub test_count: Option<usize>,
    #[arg(long, global = true)]
    pub rollout_count: Option<usize>,
    #[arg(long, global = true)]
    pub rollout_total: Option<usize>,
    /// Predict each frame from a fresh state over the last N frames.
    #[arg(long, global = true)]
    pub rollout_window: Option<usize>,
    /// Feed predicted exogenous inputs back as well.
    #[arg(long, global = true)]
    pub feedback_all: bool,
    /// Comma-separated tasks for `ablate`.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_task)]
    pub ablation_tasks: Vec<TaskKind>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(t) = self.task {
            c.task = t;
            if c.generator.as_ref().is_some_and(|g| g.kind() != t) {
                c.generator = None;
            }
        }
        if !self.variants.is_empty() {
            c.variants = self.variants.clone();
        }
        if !self.ablation_tasks.is_empty() {
            c.sweep.ablation_tasks = self.ablation_tasks.clone();
        }
        if self.desk_scale && !c.desk_scale {
            c.desk_scale = true;
            c.seeds = (0..3).collect();
        }
        set(&mut c.routing, self.routing);
        set(&mut c.d_state, self.d_state);
        set_opt(&mut c.d_inner, self.d_inner);
        set(&mut c.context_len, self.context_len);
        set(&mut c.seeds, self.seeds.clone().map(|s| s.0));
        set(&mut c.data_seed, self.data_seed);
        set_opt(&mut c.workers, self.workers);
        let t = &mut c.train;
        set_opt(&mut t.iterations, self.iterations);
        set_opt(&mut t.batch_size, self.batch_size);
        set_opt(&mut t.lr_start, self.lr_start);
        set_opt(&mut t.lr_end, self.lr_end);
        set_opt(&mut t.bilinear_std, self.bilinear_std);
        set_opt(&mut t.log_every, self.log_every);
        set_opt(&mut t.grad_clip, self.grad_clip);
        set_opt(&mut t.eval_limit, self.eval_limit);
        set_opt(&mut t.pbim_clamp, self.pbim_clamp);
        set(&mut t.precision, self.precision);
        let d = &mut c.data;
        set_opt(&mut d.train_count, self.train_count);
        set_opt(&mut d.test_count, self.test_count);
        set_opt(&mut d.rollout_count, self.rollout_count);
        set_opt(&mut c.rollout.total, self.rollout_total);
        set_opt(&mut c.rollout.window, self.rollout_window);
        if self.feedback_all {
            c.rollout.feedback = Some(Feedback::AllChannels);
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    VariantKind::parse(s).map_err(|e| e.to_string())
}

fn parse_routing(s: &str) -> Result<Routing, String> {
    Routing::parse(s).map_err(|e| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        _ => Err(format!("unknown precision '{s}' (f64 or f32)")),
    }
}
