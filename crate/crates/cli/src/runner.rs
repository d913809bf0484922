//! Cells and their on-disk cache.
//!
//! A cell is one training run plus its rollout evaluations. Its directory
//! is named after the SHA-256 of the training specification and the crate
//! version, so identical requests reuse earlier results and any change
//! lands in a fresh directory. Each rollout configuration gets its own
//! result file. Every file is written to a temporary sibling and renamed
//! into place.
//!
//! ```text
//! <root>/data/<task>-<hash>/                 dataset splits + manifest.json
//! <root>/cells/<task>/<arch>-ds8-di8-L50/seed0-<hash>/
//!     cell.json        spec, hash, version, seed
//!     train_log.csv
//!     checkpoint.bin   (+ checkpoint.bin.json)
//!     eval-<hash>.json rollout evaluation, one per rollout config
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use bilinear_ssm::eval::{evaluate_model, null_as_nan, RolloutConfig, SeedResult};
use bilinear_ssm::tasks::{build_dataset, config_hash, write_dataset, Dataset, DatasetSizes, TaskConfig, TaskKind};
use bilinear_ssm::train::{read_checkpoint, train_run, write_checkpoint, TrainConfig, TrainLog};
use bilinear_ssm::{Architecture, ModelDims, ModelParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const CELL_FILE: &str = "cell.json";
const LOG_FILE: &str = "train_log.csv";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub task: TaskConfig,
    pub sizes: DatasetSizes,
    pub data_seed: u64,
    pub arch: Architecture,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
}

impl CellSpec {
    pub fn task_kind(&self) -> TaskKind {
        self.task.kind()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Identifies the trained model: everything except the rollout settings.
    pub fn train_hash(&self) -> CliResult<String> {
        Ok(config_hash(&(
            CODE_VERSION,
            &self.task,
            &self.sizes,
            self.data_seed,
            &self.arch,
            &self.dims,
            &self.train,
        ))?)
    }

    /// Identifies one evaluation of the trained model.
    pub fn hash(&self) -> CliResult<String> {
        Ok(config_hash(&(CODE_VERSION, self))?)
    }

    pub fn result_file(&self) -> CliResult<String> {
        let h = config_hash(&self.rollout)?;
        Ok(format!("eval-{}.json", &h[..12]))
    }

    pub fn dataset_hash(&self) -> CliResult<String> {
        dataset_hash(&self.task, &self.sizes, self.data_seed)
    }

    /// `<arch>-ds<d_s>-di<d_i>-L<L>`; shared by every seed of a configuration.
    pub fn group_label(&self) -> String {
        let d = &self.dims;
        format!("{}-ds{}-di{}-L{}", self.arch.label(), d.d_state, d.d_inner, d.context_len)
    }

    pub fn dir(&self, root: &Path) -> CliResult<PathBuf> {
        let hash = self.train_hash()?;
        Ok(root
            .join("cells")
            .join(self.task_kind().name())
            .join(self.group_label())
            .join(format!("seed{}-{}", self.seed(), &hash[..12])))
    }

    pub fn param_count(&self) -> CliResult<usize> {
        Ok(ModelParams::zeros(self.arch, self.dims)?.num_params())
    }
}

pub fn dataset_hash(task: &TaskConfig, sizes: &DatasetSizes, seed: u64) -> CliResult<String> {
    Ok(config_hash(&(task, sizes, seed))?)
}

pub fn dataset_dir(root: &Path, task: &TaskConfig, sizes: &DatasetSizes, seed: u64) -> CliResult<PathBuf> {
    let hash = dataset_hash(task, sizes, seed)?;
    Ok(root.join("data").join(format!("{}-{}", task.kind().name(), &hash[..12])))
}

/// Generates and writes a dataset unless its directory already exists.
/// Returns the directory and whether it was (re)written.
pub fn ensure_dataset(
    root: &Path,
    task: &TaskConfig,
    sizes: &DatasetSizes,
    seed: u64,
    force: bool,
) -> CliResult<(PathBuf, bool)> {
    let dir = dataset_dir(root, task, sizes, seed)?;
    if dir.join("manifest.json").exists() && !force {
        return Ok((dir, false));
    }
    let ds = build_dataset(task, *sizes, seed)?;
    let tmp = temp_sibling(&dir);
    write_dataset(&tmp, &ds)?;
    replace_dir(&tmp, &dir)?;
    Ok((dir, true))
}

/// Loaded datasets shared between workers.
pub struct DataStore {
    root: PathBuf,
    generate: bool,
    cache: Mutex<HashMap<PathBuf, Arc<Dataset>>>,
}

impl DataStore {
    /// With `generate`, missing datasets are built and written; otherwise
    /// they are reported as missing.
    pub fn new(root: &Path, generate: bool) -> Self {
        Self {
            root: root.to_path_buf(),
            generate,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, spec: &CellSpec) -> CliResult<Arc<Dataset>> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let dir = dataset_dir(&self.root, &spec.task, &spec.sizes, spec.data_seed)?;
        if let Some(ds) = cache.get(&dir) {
            return Ok(ds.clone());
        }
        if !dir.join("manifest.json").exists() {
            if !self.generate {
                return Err(CliError::Missing {
                    what: "dataset",
                    path: dir,
                    hint: "gen-data",
                });
            }
            log::info!("generating {} dataset into {}", spec.task_kind(), dir.display());
            ensure_dataset(&self.root, &spec.task, &spec.sizes, spec.data_seed, false)?;
        }
        let ds = Arc::new(Dataset::load(&dir)?);
        cache.insert(dir, ds.clone());
        Ok(ds)
    }
}

/// Provenance written next to every cell's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub params: usize,
    pub spec: CellSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Iterations completed before stopping.
    pub iterations: usize,
    pub diverged: bool,
    #[serde(deserialize_with = "null_as_nan")]
    pub final_train_loss: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub final_tf_eval_loss: f64,
}

impl TrainSummary {
    fn from_log(log: &TrainLog, iterations: usize, diverged: bool) -> Self {
        let last = log.records.last();
        Self {
            iterations,
            diverged,
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_tf_eval_loss: last.map_or(f64::NAN, |r| r.tf_eval_loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub code_version: String,
    pub group: String,
    pub params: usize,
    pub train: TrainSummary,
    pub eval: SeedResult,
}

/// How much of a cell to (re)compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Train unless a checkpoint exists.
    Train,
    /// Evaluate an existing checkpoint, overwriting any earlier result.
    Eval,
    /// Train and evaluate, reusing whatever is cached.
    Full,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub dir: PathBuf,
    pub train: Option<TrainSummary>,
    pub result: Option<CellResult>,
    pub error: Option<CliError>,
}

impl CellOutcome {
    pub fn diverged(&self) -> bool {
        self.result.as_ref().map_or(self.train.as_ref().is_some_and(|t| t.diverged), |r| r.eval.diverged)
    }
}

pub fn read_result(root: &Path, spec: &CellSpec) -> CliResult<CellResult> {
    let path = spec.dir(root)?.join(spec.result_file()?);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Core(e.into()))
}

fn read_train_summary(dir: &Path) -> CliResult<TrainSummary> {
    let path = dir.join(CHECKPOINT_FILE);
    let (header, _) = read_checkpoint(&path)?;
    let log = TrainLog::read_csv(&dir.join(LOG_FILE))?;
    Ok(TrainSummary::from_log(&log, header.iteration, header.diverged))
}

/// Trains one cell, or reads its summary if a checkpoint is already there.
pub fn train_cell(root: &Path, store: &DataStore, spec: &CellSpec) -> CliResult<TrainSummary> {
    let dir = spec.dir(root)?;
    if dir.join(CHECKPOINT_FILE).exists() {
        log::info!("{}: checkpoint exists, skipped", dir.display());
        return read_train_summary(&dir);
    }
    let ds = store.get(spec)?;
    let hash = spec.train_hash()?;
    let manifest = CellManifest {
        code_version: CODE_VERSION.to_string(),
        config_hash: hash.clone(),
        seed: spec.seed(),
        dataset_hash: spec.dataset_hash()?,
        params: spec.param_count()?,
        spec: spec.clone(),
    };
    log::info!("training {} seed {}", spec.group_label(), spec.seed());
    let outcome = train_run(spec.arch, spec.dims, &ds, &spec.train)?;
    if outcome.diverged {
        log::warn!("{} seed {} diverged", spec.group_label(), spec.seed());
    }
    let tmp = temp_sibling(&dir);
    fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    write_json(&tmp.join(CELL_FILE), &manifest)?;
    outcome.log.write_csv(&tmp.join(LOG_FILE))?;
    write_checkpoint(
        &tmp.join(CHECKPOINT_FILE),
        &outcome.params,
        &hash,
        outcome.iterations,
        spec.seed(),
        outcome.diverged,
    )?;
    replace_dir(&tmp, &dir)?;
    Ok(TrainSummary::from_log(&outcome.log, outcome.iterations, outcome.diverged))
}

/// Rolls out a trained cell and writes its result file.
pub fn eval_cell(root: &Path, store: &DataStore, spec: &CellSpec) -> CliResult<CellResult> {
    let dir = spec.dir(root)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path: ckpt,
            hint: "train",
        });
    }
    let train = read_train_summary(&dir)?;
    let (_, params) = read_checkpoint(&ckpt)?;
    let (ar_mse, diverged) = if train.diverged {
        (f64::NAN, true)
    } else {
        let ds = store.get(spec)?;
        evaluate_model(&params, spec.train.forward, &ds.rollout, spec.task_kind(), &spec.rollout)?
    };
    let result = CellResult {
        code_version: CODE_VERSION.to_string(),
        group: spec.group_label(),
        params: params.num_params(),
        train,
        eval: SeedResult {
            task: spec.task_kind(),
            variant: spec.arch.kind.name().to_string(),
            routing: spec.arch.routing.name().to_string(),
            d_state: spec.dims.d_state,
            context_len: spec.dims.context_len,
            seed: spec.seed(),
            ar_mse,
            diverged,
            config_hash: spec.hash()?,
        },
    };
    let path = dir.join(spec.result_file()?);
    let tmp = temp_sibling(&path);
    write_json(&tmp, &result)?;
    fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
    Ok(result)
}

pub fn run_cell(root: &Path, store: &DataStore, spec: &CellSpec, stage: Stage) -> CellOutcome {
    let dir = spec.dir(root).unwrap_or_default();
    let mut out = CellOutcome {
        spec: spec.clone(),
        dir: dir.clone(),
        train: None,
        result: None,
        error: None,
    };
    let res = (|| -> CliResult<()> {
        match stage {
            Stage::Train => out.train = Some(train_cell(root, store, spec)?),
            Stage::Eval => {
                let r = eval_cell(root, store, spec)?;
                out.train = Some(r.train.clone());
                out.result = Some(r);
            }
            Stage::Full => {
                if let Ok(r) = read_result(root, spec) {
                    out.train = Some(r.train.clone());
                    out.result = Some(r);
                    return Ok(());
                }
                out.train = Some(train_cell(root, store, spec)?);
                out.result = Some(eval_cell(root, store, spec)?);
            }
        }
        Ok(())
    })();
    if let Err(e) = res {
        log::error!("{} seed {}: {e}", spec.group_label(), spec.seed());
        out.error = Some(e);
    }
    out
}

/// Runs every cell on a pool of `workers` threads; outcomes keep the input order.
pub fn run_cells(root: &Path, store: &DataStore, specs: &[CellSpec], workers: usize, stage: Stage) -> CliResult<Vec<CellOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| specs.par_iter().map(|s| run_cell(root, store, s, stage)).collect()))
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tag = format!("{:?}", std::thread::current().id()).replace(|c: char| !c.is_ascii_alphanumeric(), "");
    path.with_file_name(format!(".{name}.tmp-{}-{tag}", std::process::id()))
}

fn replace_dir(tmp: &Path, dir: &Path) -> CliResult<()> {
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::rename(tmp, dir).map_err(|e| CliError::io(dir, e))
}
