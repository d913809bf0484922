//! Tables built from cell results.
//!
//! All numbers are written with Rust's shortest round-trip formatting, so
//! identical results give byte-identical files.

use std::path::Path;

use bilinear_ssm::eval::{aggregate_seeds, improvement, EvalReport, SeedAggregate};
use bilinear_ssm::tasks::TaskKind;
use bilinear_ssm::{Architecture, Routing, VariantKind};

use crate::error::{CliError, CliResult};
use crate::runner::{CellOutcome, CellResult};

/// Results of every seed of one configuration.
#[derive(Clone, Debug)]
pub struct Group {
    pub task: TaskKind,
    pub arch: Architecture,
    pub d_state: usize,
    pub d_inner: usize,
    pub context_len: usize,
    pub params: usize,
    pub results: Vec<CellResult>,
    /// Seeds whose cell failed to produce a result.
    pub failed: usize,
}

impl Group {
    pub fn label(&self) -> String {
        self.arch.label()
    }

    pub fn aggregate(&self) -> Option<SeedAggregate> {
        let values: Vec<f64> = self.results.iter().map(|r| r.eval.ar_mse).collect();
        let flags: Vec<bool> = self.results.iter().map(|r| r.eval.diverged).collect();
        aggregate_seeds(&values, &flags).ok()
    }

    pub fn report(&self) -> EvalReport {
        EvalReport::new(self.results.iter().map(|r| r.eval.clone()).collect())
    }

    fn same_setting(&self, other: &Group) -> bool {
        self.task == other.task && self.d_state == other.d_state && self.context_len == other.context_len
    }
}

/// Groups outcomes by configuration, in order of first appearance.
pub fn group(outcomes: &[CellOutcome]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    for o in outcomes {
        let s = &o.spec;
        let idx = groups.iter().position(|g| {
            g.task == s.task_kind()
                && g.arch == s.arch
                && g.d_state == s.dims.d_state
                && g.d_inner == s.dims.d_inner
                && g.context_len == s.dims.context_len
        });
        let idx = idx.unwrap_or_else(|| {
            groups.push(Group {
                task: s.task_kind(),
                arch: s.arch,
                d_state: s.dims.d_state,
                d_inner: s.dims.d_inner,
                context_len: s.dims.context_len,
                params: s.param_count().unwrap_or(0),
                results: Vec::new(),
                failed: 0,
            });
            groups.len() - 1
        });
        match &o.result {
            Some(r) => groups[idx].results.push(r.clone()),
            None => groups[idx].failed += 1,
        }
    }
    groups
}

/// Standard's aggregate in the same task / d_s / L setting, if present.
pub fn baseline<'a>(groups: &'a [Group], g: &Group) -> Option<(&'a Group, SeedAggregate)> {
    groups
        .iter()
        .find(|b| b.arch == Architecture::plain(VariantKind::Standard) && b.same_setting(g))
        .and_then(|b| b.aggregate().map(|a| (b, a)))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// One row per configuration with the Mean / Med. / Worst / SD / Impr.
/// columns of the main results tables; improvement is relative to
/// Standard at the same setting.
pub fn write_comparison(path: &Path, groups: &[Group]) -> CliResult<()> {
    let header = strings(&[
        "task",
        "variant",
        "d_state",
        "d_inner",
        "context_len",
        "params",
        "mean",
        "median",
        "worst",
        "sd",
        "impr_mean",
        "impr_median",
        "convergent",
        "diverged",
        "failed",
    ]);
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let agg = g.aggregate();
            let impr = agg.as_ref().and_then(|a| baseline(groups, g).map(|(_, b)| improvement(&b, a)));
            let diverged = g.results.iter().filter(|r| r.eval.diverged).count();
            vec![
                g.task.name().to_string(),
                g.label(),
                g.d_state.to_string(),
                g.d_inner.to_string(),
                g.context_len.to_string(),
                g.params.to_string(),
                opt(agg.as_ref().map(|a| a.mean)),
                opt(agg.as_ref().map(|a| a.median)),
                opt(agg.as_ref().map(|a| a.worst)),
                opt(agg.as_ref().and_then(|a| a.sd)),
                opt(impr.map(|i| i.mean)),
                opt(impr.map(|i| i.median)),
                (g.results.len() - diverged).to_string(),
                diverged.to_string(),
                g.failed.to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Per-seed and aggregate files for every group, named after the group.
pub fn write_group_reports(dir: &Path, groups: &[Group]) -> CliResult<()> {
    for g in groups {
        let mut report = g.report();
        if let Some((_, b)) = baseline(groups, g) {
            report = report.with_baseline(&b);
        }
        let stem = format!(
            "{}-{}-ds{}-di{}-L{}",
            g.task.name(),
            g.label(),
            g.d_state,
            g.d_inner,
            g.context_len
        );
        report.write_csv(&dir.join(format!("{stem}.csv")))?;
        report.write_json(&dir.join(format!("{stem}.json")))?;
    }
    Ok(())
}

/// Rows `(L, d_s)`, one median column per variant and one
/// Standard-over-variant ratio per non-Standard variant.
pub fn write_sweep(path: &Path, groups: &[Group], variants: &[VariantKind]) -> CliResult<()> {
    let mut header = strings(&["context_len", "d_state"]);
    header.extend(variants.iter().map(|v| v.name().to_string()));
    header.extend(
        variants
            .iter()
            .filter(|v| **v != VariantKind::Standard)
            .map(|v| format!("impr_{}", v.name())),
    );
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for g in groups {
        if !keys.contains(&(g.context_len, g.d_state)) {
            keys.push((g.context_len, g.d_state));
        }
    }
    keys.sort_by_key(|&(l, ds)| (ds, l));
    let median = |l: usize, ds: usize, v: VariantKind| {
        groups
            .iter()
            .find(|g| g.context_len == l && g.d_state == ds && g.arch == Architecture::plain(v))
            .and_then(|g| g.aggregate())
            .map(|a| a.median)
    };
    let rows: Vec<Vec<String>> = keys
        .iter()
        .map(|&(l, ds)| {
            let mut row = vec![l.to_string(), ds.to_string()];
            row.extend(variants.iter().map(|&v| opt(median(l, ds, v))));
            let std = median(l, ds, VariantKind::Standard);
            row.extend(
                variants
                    .iter()
                    .filter(|v| **v != VariantKind::Standard)
                    .map(|&v| opt(std.zip(median(l, ds, v)).map(|(s, m)| s / m))),
            );
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Parameter count against median AR MSE.
pub fn write_matched(path: &Path, groups: &[Group]) -> CliResult<()> {
    let header = strings(&["variant", "d_state", "d_inner", "params", "median", "mean", "convergent", "diverged"]);
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let agg = g.aggregate();
            vec![
                g.label(),
                g.d_state.to_string(),
                g.d_inner.to_string(),
                g.params.to_string(),
                opt(agg.as_ref().map(|a| a.median)),
                opt(agg.as_ref().map(|a| a.mean)),
                agg.as_ref().map_or(0, |a| a.convergent).to_string(),
                agg.as_ref().map_or(g.results.len(), |a| a.diverged).to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

fn routed_inputs(arch: &Architecture) -> (&'static str, &'static str) {
    match (arch.kind, arch.routing) {
        (VariantKind::SeqBim, Routing::Full) => ("x_mod", "x_mod"),
        (VariantKind::SeqBim, Routing::XprojOnly) => ("x_mod", "x_t"),
        (VariantKind::SeqBim, Routing::BcoupOnly) => ("x_t", "x_mod"),
        _ => ("x_t", "x_t"),
    }
}

/// One row per architecture, with the input each pathway receives and the
/// mean AR MSE per task.
pub fn write_ablation(path: &Path, groups: &[Group], tasks: &[TaskKind]) -> CliResult<()> {
    let mut header = strings(&["variant", "xproj_input", "bcoup_input"]);
    header.extend(tasks.iter().map(|t| format!("{}_mean", t.name())));
    let mut archs: Vec<Architecture> = Vec::new();
    for g in groups {
        if !archs.contains(&g.arch) {
            archs.push(g.arch);
        }
    }
    let rows: Vec<Vec<String>> = archs
        .iter()
        .map(|arch| {
            let (xp, bc) = routed_inputs(arch);
            let mut row = vec![arch.label(), xp.to_string(), bc.to_string()];
            row.extend(tasks.iter().map(|t| {
                opt(groups
                    .iter()
                    .find(|g| g.arch == *arch && g.task == *t)
                    .and_then(|g| g.aggregate())
                    .map(|a| a.mean))
            }));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}
