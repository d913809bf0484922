use std::fs;
use std::path::{Path, PathBuf};

use bilinear_ssm::{Architecture, Routing, VariantKind};
use clap::{Parser, Subcommand};

use crate::checks::{grad_check_dims, model_grad_check, scan_equivalence};
use crate::config::{self, ExperimentConfig, Overrides, SweepAxis};
use crate::error::{CliError, CliResult};
use crate::report;
use crate::runner::{default_workers, ensure_dataset, run_cells, CellOutcome, DataStore, Stage};

#[derive(Debug, Parser)]
#[command(name = "bssm", version, about = "Selective SSMs with bilinear input modulation: data, training, evaluation")]
pub struct Cli {
    /// TOML experiment config (replaces the preset).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// table2, table3, table5, table7, or any of them with a -desk suffix.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output root.
    #[arg(long, global = true, env = "BSSM_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// -v for info, -vv for per-log-record training progress.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/test/rollout splits.
    GenData {
        /// Regenerate even if the dataset exists.
        #[arg(long)]
        force: bool,
    },
    /// Train every (variant, seed) of the config.
    Train,
    /// Roll out trained checkpoints and write per-seed and aggregate reports.
    Eval,
    /// Train and evaluate a grid of configurations.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// seq-BIM routing ablation against Coupled on every ablation task.
    Ablate,
    /// Finite-difference gradient check of every variant and routing.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parallel against sequential scan on random problems.
    ScanCheck {
        /// Cases per gate kind.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Ablate => "ablate",
            Command::GradCheck { .. } => "grad-check",
            Command::ScanCheck { .. } => "scan-check",
        }
    }

    fn trains(&self) -> bool {
        matches!(self, Command::Train | Command::Sweep { .. } | Command::Ablate)
    }
}

/// Preset or file, then flag overrides, then validation.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => return Err(CliError::Invalid("--config and --preset are mutually exclusive".into())),
        (Some(path), None) => config::load(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GradCheck { tol, seed } => return grad_check(*tol, *seed),
        Command::ScanCheck { cases, tol, seed } => return scan_check(*cases, *tol, *seed),
        _ => {}
    }
    let cfg = resolve_config(cli)?;
    if cli.command.trains() && cfg.is_full_scale() {
        log::warn!("full-scale protocol: expect hours to days of CPU time per cell (use --desk-scale for a reduced run)");
    }
    let root = &cli.out;
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let reports = report_dir(root, cli.command.name(), &cfg)?;
    let workers = cfg.workers.unwrap_or_else(default_workers);
    match &cli.command {
        Command::GenData { force } => gen_data(root, &cfg, *force),
        Command::Train => {
            let store = DataStore::new(root, false);
            let outcomes = run_cells(root, &store, &cfg.train_cells()?, workers, Stage::Train)?;
            write_train_summary(root, &reports.join("train_summary.csv"), &outcomes)?;
            finish(outcomes)
        }
        Command::Eval => {
            let store = DataStore::new(root, false);
            let outcomes = run_cells(root, &store, &cfg.train_cells()?, workers, Stage::Eval)?;
            let groups = report::group(&outcomes);
            report::write_comparison(&reports.join("comparison.csv"), &groups)?;
            report::write_group_reports(&reports, &groups)?;
            print_groups(&groups);
            finish(outcomes)
        }
        Command::Sweep { axis } => {
            let store = DataStore::new(root, true);
            let outcomes = run_cells(root, &store, &cfg.sweep_cells(*axis)?, workers, Stage::Full)?;
            let groups = report::group(&outcomes);
            report::write_comparison(&reports.join("comparison.csv"), &groups)?;
            match axis {
                SweepAxis::ParamMatched => report::write_matched(&reports.join("matched.csv"), &groups)?,
                _ => report::write_sweep(&reports.join("sweep.csv"), &groups, &cfg.sweep.variants)?,
            }
            print_groups(&groups);
            finish(outcomes)
        }
        Command::Ablate => {
            let store = DataStore::new(root, true);
            let outcomes = run_cells(root, &store, &cfg.ablation_cells()?, workers, Stage::Full)?;
            let groups = report::group(&outcomes);
            report::write_comparison(&reports.join("comparison.csv"), &groups)?;
            report::write_ablation(&reports.join("ablation.csv"), &groups, &cfg.sweep.ablation_tasks)?;
            print_groups(&groups);
            finish(outcomes)
        }
        Command::GradCheck { .. } | Command::ScanCheck { .. } => unreachable!("handled above"),
    }
}

/// `<root>/reports/<command>-<task>-<hash>/` holding the resolved config.
fn report_dir(root: &Path, command: &str, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let hash = cfg.hash()?;
    let dir = root
        .join("reports")
        .join(format!("{command}-{}-{}", cfg.task.name(), &hash[..12]));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let text = format!(
        "# resolved configuration\n# config_hash = \"{hash}\"\n# code_version = \"{}\"\n\n{}",
        crate::runner::CODE_VERSION,
        cfg.to_toml()?
    );
    let path = dir.join("resolved.toml");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(dir)
}

fn gen_data(root: &Path, cfg: &ExperimentConfig, force: bool) -> CliResult<()> {
    let task = cfg.task_config(cfg.task);
    let sizes = cfg.sizes(cfg.context_len);
    let (dir, written) = ensure_dataset(root, &task, &sizes, cfg.data_seed, force)?;
    if written {
        println!(
            "{}: wrote {}/{}/{} trajectories to {}",
            cfg.task,
            sizes.train_count,
            sizes.test_count,
            sizes.rollout_count,
            dir.display()
        );
    } else {
        println!("{}: {} exists, skipped (use --force to regenerate)", cfg.task, dir.display());
    }
    Ok(())
}

fn write_train_summary(root: &Path, path: &Path, outcomes: &[CellOutcome]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "task",
        "variant",
        "routing",
        "seed",
        "iterations",
        "diverged",
        "final_train_loss",
        "final_tf_eval_loss",
        "config_hash",
        "cell",
    ])
    .map_err(csv_err)?;
    for o in outcomes {
        let s = &o.spec;
        let (iters, div, tl, el) = match &o.train {
            Some(t) => (
                t.iterations.to_string(),
                t.diverged.to_string(),
                format!("{:e}", t.final_train_loss),
                format!("{:e}", t.final_tf_eval_loss),
            ),
            None => Default::default(),
        };
        w.write_record([
            s.task_kind().name().to_string(),
            s.arch.kind.name().to_string(),
            s.arch.routing.name().to_string(),
            s.seed().to_string(),
            iters,
            div,
            tl,
            el,
            s.train_hash()?,
            o.dir.strip_prefix(root).unwrap_or(&o.dir).display().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn print_groups(groups: &[report::Group]) {
    for g in groups {
        let agg = g.aggregate();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        println!(
            "{:<8} {:<18} ds={:<3} L={:<4} mean {} median {} worst {} sd {} ({} seeds, {} diverged, {} failed)",
            g.task.name(),
            g.label(),
            g.d_state,
            g.context_len,
            fmt(agg.as_ref().map(|a| a.mean)),
            fmt(agg.as_ref().map(|a| a.median)),
            fmt(agg.as_ref().map(|a| a.worst)),
            fmt(agg.as_ref().and_then(|a| a.sd)),
            g.results.len() + g.failed,
            g.results.iter().filter(|r| r.eval.diverged).count(),
            g.failed
        );
    }
}

/// First cell error wins; otherwise all-diverged is its own status and a
/// partial divergence only warns.
fn finish(outcomes: Vec<CellOutcome>) -> CliResult<()> {
    let total = outcomes.len();
    let diverged = outcomes.iter().filter(|o| o.diverged()).count();
    let mut errors: Vec<CliError> = outcomes.into_iter().filter_map(|o| o.error).collect();
    if !errors.is_empty() {
        log::error!("{} of {total} cells failed", errors.len());
        return Err(errors.swap_remove(0));
    }
    if diverged == total && total > 0 {
        return Err(CliError::AllDiverged(diverged));
    }
    if diverged > 0 {
        log::warn!("{diverged} of {total} runs diverged and are excluded from aggregates");
    }
    Ok(())
}

fn grad_check(tol: f64, seed: u64) -> CliResult<()> {
    let d = grad_check_dims();
    println!("gradient check at d_i={}, d_s={}, L={}, tolerance {tol:e}", d.d_inner, d.d_state, d.context_len);
    let mut archs: Vec<Architecture> = VariantKind::ALL.iter().map(|&k| Architecture::plain(k)).collect();
    for r in [Routing::XprojOnly, Routing::BcoupOnly] {
        archs.push(Architecture::new(VariantKind::SeqBim, r)?);
    }
    let mut failed = 0;
    for arch in &archs {
        let rep = model_grad_check(*arch, seed, tol)?;
        let ok = rep.passed();
        failed += usize::from(!ok);
        println!(
            "{} {:<18} max relative error {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            arch.label(),
            rep.max_rel_error()
        );
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: archs.len(),
        });
    }
    Ok(())
}

fn scan_check(cases: usize, tol: f64, seed: u64) -> CliResult<()> {
    let r = scan_equivalence(cases, seed)?;
    let ok = r.max_abs_diff < tol;
    println!(
        "{} {} cases, max |parallel - sequential| = {:.3e} (tolerance {tol:e})",
        if ok { "PASS" } else { "FAIL" },
        r.cases,
        r.max_abs_diff
    );
    if let (false, Some(w)) = (ok, r.worst) {
        println!("worst case: {w:?}");
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::ChecksFailed { failed: 1, total: 1 })
    }
}
