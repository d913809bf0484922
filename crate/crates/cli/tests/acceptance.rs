//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 need no training and always gate the exit status. Criteria
//! 8-10 read desk-scale results from the run cache (`$BSSM_OUT`, else
//! `<workspace>/runs`). Missing cells are trained only when
//! `BSSM_ACCEPTANCE_TRAIN=1`; their outcome gates the exit status only when
//! `BSSM_ACCEPTANCE_STRICT=1`. Criteria 11-12 are full-scale and never run
//! here.

use std::path::PathBuf;
use std::time::Instant;

use bilinear_ssm::eval::SeedAggregate;
use bilinear_ssm::tasks::{fir_weights, narma_series, simulate_pendulum, PendulumConfig, TaskKind};
use bilinear_ssm::train::init_params;
use bilinear_ssm::variants::{self, gm_gate, gm_linearization_identity, seqbim_modulate, step_tensor};
use bilinear_ssm::{
    block, Architecture, ForwardOptions, ModelDims, ModelParams, Routing, ScanMode, Tape, Tensor, VariantKind,
};
use bssm_cli::checks::{model_grad_check, scan_equivalence};
use bssm_cli::report::{self, Group};
use bssm_cli::runner::{default_workers, read_result, run_cells, CellOutcome, CellSpec, DataStore, Stage};
use bssm_cli::{preset, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn line(id: u32, pass: bool, detail: String) -> Outcome {
    println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn random_params(arch: Architecture, dims: ModelDims, seed: u64) -> ModelParams {
    let mut p = init_params(arch, dims, 0.5, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd5);
    for (name, t) in p.named_mut() {
        let amp = if name == "a_log" || name == "dt_bias" { 0.3 } else { 0.1 };
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
    p
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scan_criterion() -> Outcome {
    let start = Instant::now();
    let r = scan_equivalence(1000, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        r.cases == 2000 && r.max_abs_diff < 1e-10 && secs < 60.0,
        format!("scan equivalence, {} cases, max diff {:.2e} (< 1e-10), {secs:.1}s (< 60s)", r.cases, r.max_abs_diff),
    )
}

fn grad_criterion() -> Outcome {
    let start = Instant::now();
    let mut archs: Vec<Architecture> = VariantKind::ALL.into_iter().map(Architecture::plain).collect();
    for r in [Routing::XprojOnly, Routing::BcoupOnly] {
        archs.push(Architecture::new(VariantKind::SeqBim, r).unwrap());
    }
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for arch in &archs {
        let rep = model_grad_check(*arch, 0, 1e-5).unwrap();
        worst = worst.max(rep.max_rel_error());
        if !rep.passed() {
            failed.push(arch.label());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        2,
        failed.is_empty() && secs < 300.0,
        format!(
            "finite-difference gradients, {} architectures, worst relative error {worst:.2e} (< 1e-5), {secs:.1}s (< 300s){}",
            archs.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn gm_identity_criterion() -> Outcome {
    let dims = ModelDims::new(2, 4, 4).with_d_inner(8);
    let arch = Architecture::plain(VariantKind::Gm);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = random_params(arch, dims, 0);
    let mut worst: f64 = 0.0;
    for draw in 0..10_000u64 {
        if draw % 250 == 0 {
            p = random_params(arch, dims, 1000 + draw);
        }
        let x = random_vec(&mut rng, 8, 2.0);
        let h = random_vec(&mut rng, 4, 2.0);
        worst = worst.max(gm_linearization_identity(&p, &Tensor::vector(&x), &Tensor::vector(&h)).unwrap());
    }
    line(3, worst < 1e-11, format!("GM linearisation identity over 10^4 draws, worst residual {worst:.2e} (< 1e-11)"))
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let k = m.shape()[1];
    (0..m.shape()[0]).map(|i| (0..k).map(|j| m.data()[i * k + j] * v[j]).sum()).collect()
}

/// Coupled recurrence with decay `σ(AΔt)` instead of `exp(AΔt)`, one sequence.
fn sigmoid_gated_coupled(p: &ModelParams, u: &[Vec<f64>]) -> Vec<f64> {
    let ds = p.dims.d_state;
    let coup = p.coupling.as_ref().unwrap();
    let a: Vec<f64> = p.decay.a_log.data().iter().map(|v| -v.exp()).collect();
    let mut h = vec![0.0; ds];
    let mut out = Vec::new();
    for x in u {
        let proj = matvec(&p.selectivity.x_proj, x);
        let head = proj.len() - 2 * ds;
        let pre = match &p.selectivity.dt_proj {
            Some(m) => matvec(m, &proj[..head]),
            None => proj[..head].to_vec(),
        };
        let dt: Vec<f64> = pre.iter().zip(p.selectivity.dt_bias.data()).map(|(a, b)| softplus(a + b)).collect();
        let (b, c) = (&proj[head..head + ds], &proj[head + ds..]);
        let xs = matvec(&coup.b_coup, x);
        for n in 0..ds {
            h[n] = sigmoid(a[n] * dt[n]) * h[n] + dt[n] * b[n] * xs[n];
        }
        let ch: Vec<f64> = (0..ds).map(|n| c[n] * h[n]).collect();
        let y = matvec(&coup.c_coup, &ch);
        out.extend(y.iter().zip(x).zip(p.decay.d_skip.data()).map(|((y, x), d)| y + d * x));
    }
    out
}

fn degeneracy_criterion() -> Outcome {
    let dims = ModelDims::new(2, 3, 12).with_d_inner(5);
    let (steps, batch) = (12, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[steps * batch, 2], random_vec(&mut rng, steps * batch * 2, 1.5)).unwrap();
        let mut coupled = None;
        for kind in [VariantKind::SeqBim, VariantKind::PBim, VariantKind::Gm] {
            let mut p = random_params(Architecture::plain(kind), dims, seed);
            p.bilinear.as_mut().unwrap().w_out = Tensor::zeros(&[5, 5]);
            let c = coupled.get_or_insert_with(|| {
                let mut c = ModelParams::zeros(Architecture::plain(VariantKind::Coupled), dims).unwrap();
                c.block = p.block.clone();
                c.selectivity = p.selectivity.clone();
                c.decay = p.decay.clone();
                c.coupling = p.coupling.clone();
                c
            });
            if kind == VariantKind::Gm {
                let u: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut rng, 5, 1.5)).collect();
                let want = sigmoid_gated_coupled(&p, &u);
                for scan in [ScanMode::Sequential, ScanMode::Parallel] {
                    let mut tape = Tape::new();
                    let bound = p.bind(&mut tape, false, ForwardOptions { scan, pbim_clamp: None }).unwrap();
                    let uv = tape.constant(Tensor::new(&[steps, 5], u.concat()).unwrap());
                    let h0 = tape.constant(variants::zero_state(&bound, 1));
                    let (y, _) = variants::sequence(&mut tape, &bound, uv, 1, h0).unwrap();
                    worst = worst.max(max_diff(tape.value(y).data(), &want));
                }
            } else {
                for scan in [ScanMode::Sequential, ScanMode::Parallel] {
                    if kind == VariantKind::SeqBim && scan == ScanMode::Parallel {
                        continue;
                    }
                    let opts = ForwardOptions { scan, pbim_clamp: None };
                    let a = block::predict(&p, opts, &x, batch).unwrap();
                    let b = block::predict(c, opts, &x, batch).unwrap();
                    worst = worst.max(a.max_abs_diff(&b));
                }
            }
        }
    }
    line(4, worst < 1e-12, format!("W_out = 0 degeneracy, sequence outputs, worst diff {worst:.2e} (< 1e-12)"))
}

fn affinity_residual(p: &ModelParams, rng: &mut ChaCha8Rng) -> f64 {
    let len: usize = p.dims.state_shape(p.arch.kind).iter().product();
    let shape = p.dims.state_shape(p.arch.kind);
    let x = Tensor::vector(&random_vec(rng, p.dims.d_inner, 2.0));
    let h1 = random_vec(rng, len, 2.0);
    let h2 = random_vec(rng, len, 2.0);
    let w: f64 = rng.random_range(-1.5..2.5);
    let mix: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    let f = |h: &[f64]| step_tensor(p, &Tensor::new(&shape, h.to_vec()).unwrap(), &x).unwrap().0;
    let (f1, f2, fm) = (f(&h1), f(&h2), f(&mix));
    let want: Vec<f64> = f1.data().iter().zip(f2.data()).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    max_diff(fm.data(), &want)
}

fn affinity_criterion() -> Outcome {
    let dims = ModelDims::new(2, 3, 4).with_d_inner(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for kind in [VariantKind::Standard, VariantKind::Coupled, VariantKind::Gm, VariantKind::PBim] {
        for draw in 0..1000u64 {
            let p = random_params(Architecture::plain(kind), dims, draw);
            worst = worst.max(affinity_residual(&p, &mut rng));
        }
    }
    let seq = Architecture::plain(VariantKind::SeqBim);
    let witness = (0..10u64).find(|&draw| affinity_residual(&random_params(seq, dims, draw), &mut rng) > 1e-6);
    line(
        5,
        worst < 1e-12 && witness.is_some(),
        format!(
            "affine in h for Standard/Coupled/GM/p-BIM, worst residual {worst:.2e} (< 1e-12); seq-BIM witness {}",
            witness.map_or("not found in 10 draws".into(), |d| format!("at draw {}", d + 1))
        ),
    )
}

fn range_criterion() -> Outcome {
    let dims = ModelDims::new(2, 3, 4).with_d_inner(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut gate_lo, mut gate_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut proj_max: f64 = 0.0;
    let mut gm = random_params(Architecture::plain(VariantKind::Gm), dims, 0);
    let mut seq = random_params(Architecture::plain(VariantKind::SeqBim), dims, 0);
    for draw in 0..100_000u64 {
        if draw % 1000 == 0 {
            gm = random_params(Architecture::plain(VariantKind::Gm), dims, draw);
            seq = random_params(Architecture::plain(VariantKind::SeqBim), dims, draw);
        }
        let x = Tensor::vector(&random_vec(&mut rng, 5, 2.0));
        for g in gm_gate(&gm, &x).unwrap().data() {
            gate_lo = gate_lo.min(*g);
            gate_hi = gate_hi.max(*g);
        }
        let h = Tensor::vector(&random_vec(&mut rng, 3, 100.0));
        let (hp, _) = seqbim_modulate(&seq, &h, &x).unwrap();
        proj_max = hp.data().iter().fold(proj_max, |m, v| m.max(v.abs()));
    }
    line(
        6,
        gate_lo > 0.0 && gate_hi < 1.0 && proj_max <= 1.0,
        format!(
            "10^5 draws: GM gate in [{gate_lo:.3e}, {:.3e}] within (0,1); max |seq-BIM h_proj| {proj_max:.6} <= 1",
            gate_hi
        ),
    )
}

fn narma_reference(n: usize) -> Vec<f64> {
    let mut y = vec![0.0f64; n + 1];
    for t in 0..n {
        let lo = t.saturating_sub(9);
        let sum: f64 = y[lo..=t].iter().sum();
        y[t + 1] = 0.3 * y[t] + 0.05 * y[t] * sum + 0.1;
    }
    y
}

fn generator_criterion() -> Outcome {
    let narma = narma_series(&[0.0; 30]);
    let narma_ok = narma == narma_reference(30) && narma[1] == 0.1 && (narma[2] - 0.1305).abs() < 1e-15;

    let cfg = PendulumConfig::default();
    let norm: f64 = (0..cfg.buffer_len).map(|i| (-cfg.decay * i as f64).exp()).sum();
    let w0 = 1.0 / norm;
    let s = simulate_pendulum(&cfg, 0.0, 0.0, &[], &[1.0]);
    let omega_ok = s[1].1 == w0 * cfg.dt;

    let sum: f64 = fir_weights(cfg.buffer_len, cfg.decay).iter().sum();
    let sum_err = (sum - 1.0).abs();
    line(
        7,
        narma_ok && omega_ok && sum_err < 1e-15,
        format!(
            "NARMA zero-input prefix {:.4} {:.4} {}; impulse omega_1 = w0*dt {}; FIR sum error {sum_err:.1e} (< 1e-15)",
            narma[1],
            narma[2],
            if narma_ok { "matches" } else { "differs" },
            if omega_ok { "matches" } else { "differs" },
        ),
    )
}

fn cache_root() -> PathBuf {
    match std::env::var_os("BSSM_OUT") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().join("runs"),
    }
}

/// Per-group statistics for `specs`, from the cache or, when allowed, by
/// training the missing cells.
fn groups(specs: &[CellSpec], train: bool) -> Result<Vec<Group>, String> {
    let root = cache_root();
    let missing = specs.iter().filter(|s| read_result(&root, s).is_err()).count();
    let outcomes: Vec<CellOutcome> = if missing > 0 {
        if !train {
            return Err(format!(
                "{missing}/{} desk-scale results not cached under {} (set BSSM_ACCEPTANCE_TRAIN=1 to compute)",
                specs.len(),
                root.display()
            ));
        }
        let store = DataStore::new(&root, true);
        run_cells(&root, &store, specs, default_workers(), Stage::Full).map_err(|e| e.to_string())?
    } else {
        specs
            .iter()
            .map(|s| {
                let r = read_result(&root, s).unwrap();
                CellOutcome {
                    spec: s.clone(),
                    dir: s.dir(&root).unwrap(),
                    train: Some(r.train.clone()),
                    result: Some(r),
                    error: None,
                }
            })
            .collect()
    };
    Ok(report::group(&outcomes))
}

fn stat(groups: &[Group], arch: Architecture) -> Result<SeedAggregate, String> {
    let g = groups.iter().find(|g| g.arch == arch).ok_or(format!("no {} results", arch.label()))?;
    g.aggregate().ok_or(format!("{}: no convergent seed ({} diverged)", arch.label(), g.results.len()))
}

fn median(groups: &[Group], kind: VariantKind) -> Result<f64, String> {
    stat(groups, Architecture::plain(kind)).map(|a| a.median)
}

fn desk(name: &str, window: Option<usize>) -> ExperimentConfig {
    let mut cfg = preset(name).unwrap();
    cfg.rollout.window = window;
    cfg
}

fn mode_label(window: Option<usize>) -> String {
    window.map_or("continuous".into(), |w| format!("window {w}"))
}

fn narma_ordering(window: Option<usize>, train: bool) -> Result<(bool, String), String> {
    let g = groups(&desk("table3-desk", window).train_cells().unwrap(), train)?;
    let base = median(&g, VariantKind::Standard)?;
    let r = |k| median(&g, k).map(|m| m / base);
    let (seq, pbim, gm, cou) = (r(VariantKind::SeqBim)?, r(VariantKind::PBim)?, r(VariantKind::Gm)?, r(VariantKind::Coupled)?);
    let ok = seq < 0.5 && pbim < 0.5 && (0.5..=1.5).contains(&gm) && (0.5..=1.5).contains(&cou);
    Ok((
        ok,
        format!(
            "NARMA-10 median / Standard ({}): seq-BIM {seq:.3}, p-BIM {pbim:.3} (< 0.5); GM {gm:.3}, Coupled {cou:.3} (in [0.5, 1.5]); Standard median {base:.3e}",
            mode_label(window)
        ),
    ))
}

fn delay_ordering(window: Option<usize>, train: bool) -> Result<(bool, String), String> {
    let g = groups(&desk("table2-desk", window).train_cells().unwrap(), train)?;
    let base = median(&g, VariantKind::Standard)?;
    let (gm, seq) = (median(&g, VariantKind::Gm)? / base, median(&g, VariantKind::SeqBim)? / base);
    let pbim = stat(&g, Architecture::plain(VariantKind::PBim))
        .map_or("p-BIM: no convergent seed".into(), |a| format!("p-BIM {} of {} seeds diverged", a.diverged, a.convergent + a.diverged));
    Ok((
        gm < 0.2 && seq < 0.2,
        format!(
            "input-delay median / Standard ({}): GM {gm:.3}, seq-BIM {seq:.3} (< 0.2); {pbim}; Standard median {base:.3e}",
            mode_label(window)
        ),
    ))
}

fn ablation_ordering(window: Option<usize>, train: bool) -> Result<(bool, String), String> {
    let mut cfg = desk("table5-desk", window);
    cfg.sweep.ablation_tasks = vec![TaskKind::Narma10];
    let g = groups(&cfg.ablation_cells().unwrap(), train)?;
    let seq = |r| stat(&g, Architecture::new(VariantKind::SeqBim, r).unwrap()).map(|a| a.mean);
    let (full, xproj, bcoup) = (seq(Routing::Full)?, seq(Routing::XprojOnly)?, seq(Routing::BcoupOnly)?);
    let coupled = stat(&g, Architecture::plain(VariantKind::Coupled))?.mean;
    let ratio = xproj / full;
    let between = full.min(coupled) < bcoup && bcoup < full.max(coupled);
    Ok((
        (1.0 / 1.3..=1.3).contains(&ratio) && between,
        format!(
            "NARMA-10 ablation means ({}): xproj-only / full {ratio:.3} (within 1.3x); bcoup-only {bcoup:.3e} {} full {full:.3e} and Coupled {coupled:.3e}",
            mode_label(window),
            if between { "between" } else { "not between" }
        ),
    ))
}

type Empirical = fn(Option<usize>, bool) -> Result<(bool, String), String>;

fn empirical(id: u32, check: Empirical, train: bool) -> Outcome {
    let out = match check(None, train) {
        Ok((pass, detail)) => line(id, pass, detail),
        Err(e) => line(id, false, e),
    };
    // sliding-window rollouts are reported alongside, never substituted
    match check(Some(50), false) {
        Ok((pass, detail)) => println!("INFO criterion {id}: {} {detail}", if pass { "holds" } else { "does not hold" }),
        Err(e) => println!("INFO criterion {id}: window 50: {e}"),
    }
    out
}

fn main() {
    let train = flag("BSSM_ACCEPTANCE_TRAIN");
    let strict = flag("BSSM_ACCEPTANCE_STRICT");
    let fast = vec![
        scan_criterion(),
        grad_criterion(),
        gm_identity_criterion(),
        degeneracy_criterion(),
        affinity_criterion(),
        range_criterion(),
        generator_criterion(),
    ];
    let slow = vec![
        empirical(8, narma_ordering, train),
        empirical(9, delay_ordering, train),
        empirical(10, ablation_ordering, train),
    ];
    println!("SKIP criterion 11: full-scale protocol (200K iterations, 11 seeds), run with `bssm --preset table3`");
    println!("SKIP criterion 12: full-scale state-size spot check, run with `bssm --preset table7`");

    let fast_failed: Vec<&Outcome> = fast.iter().filter(|o| !o.pass).collect();
    let slow_failed: Vec<&Outcome> = slow.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {}/{} training-free criteria pass, {}/{} desk-scale criteria pass",
        fast.len() - fast_failed.len(),
        fast.len(),
        slow.len() - slow_failed.len(),
        slow.len()
    );
    for o in fast_failed.iter().chain(&slow_failed) {
        eprintln!("failed criterion {}: {}", o.id, o.detail);
    }
    if !fast_failed.is_empty() || (strict && !slow_failed.is_empty()) {
        std::process::exit(1);
    }
}
