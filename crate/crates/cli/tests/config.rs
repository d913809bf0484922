use bilinear_ssm::tasks::TaskKind;
use bilinear_ssm::VariantKind;
use bssm_cli::config::{parse, parse_seeds, PRESETS};
use bssm_cli::{preset, resolve_config, Cli, ExperimentConfig, SweepAxis};
use clap::Parser;

fn resolve(args: &[&str]) -> Result<ExperimentConfig, String> {
    let cli = Cli::try_parse_from(std::iter::once("bssm").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    resolve_config(&cli).map_err(|e| e.to_string())
}

#[test]
fn seed_lists() {
    assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
    assert_eq!(parse_seeds("2..=4").unwrap(), vec![2, 3, 4]);
    assert_eq!(parse_seeds("5, 1,9").unwrap(), vec![5, 1, 9]);
    for bad in ["3..3", "a..4", "", "1,,2"] {
        assert!(parse_seeds(bad).is_err(), "{bad}");
    }
}

#[test]
fn every_preset_resolves_and_validates() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.desk_scale, name.ends_with("-desk"));
        if cfg.desk_scale {
            assert_eq!(cfg.seeds, vec![0, 1, 2]);
            let t = cfg.train_config(cfg.task, 0);
            assert_eq!((t.iterations, t.batch_size), (20_000, 64));
            assert_eq!(cfg.sizes(cfg.context_len).train_count, 8_000);
        }
    }
    assert_eq!(preset("table2").unwrap().task, TaskKind::InputDelay);
    assert_eq!(preset("table3").unwrap().task, TaskKind::Narma10);
    assert!(preset("table3").unwrap().is_full_scale());
    assert!(preset("table4").is_err());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(parse("task = \"narma10\"\n").is_ok());
    assert!(parse("tsak = \"narma10\"\n").is_err());
    assert!(parse("[train]\niteratoins = 3\n").is_err());
}

#[test]
fn flags_override_the_preset() {
    let cfg = resolve(&["--preset", "table3-desk", "--seeds", "4,5", "--d-state", "16", "train"]).unwrap();
    assert_eq!(cfg.seeds, vec![4, 5]);
    assert_eq!(cfg.d_state, 16);
    assert!(cfg.desk_scale);

    let cfg = resolve(&["train", "--desk-scale", "--variant", "gm,p-bim"]).unwrap();
    assert_eq!(cfg.variants, vec![VariantKind::Gm, VariantKind::PBim]);
    assert_eq!(cfg.seeds, vec![0, 1, 2]);
    // explicit seeds win over the desk default regardless of flag order
    let cfg = resolve(&["train", "--seeds", "7", "--desk-scale"]).unwrap();
    assert_eq!(cfg.seeds, vec![7]);

    assert!(resolve(&["train", "--variant", "gm", "--routing", "xproj-only"]).is_err());
}

#[test]
fn hash_ignores_the_worker_count() {
    let a = resolve(&["train", "--workers", "1"]).unwrap();
    let b = resolve(&["train", "--workers", "8"]).unwrap();
    let c = resolve(&["train", "--workers", "8", "--data-seed", "99"]).unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn resolved_config_roundtrips_through_toml() {
    let cfg = resolve(&["--preset", "table5-desk", "--rollout-window", "50", "ablate"]).unwrap();
    let back = parse(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn cell_lists_have_the_expected_shape() {
    let cfg = resolve(&["--preset", "table3-desk", "train"]).unwrap();
    let cells = cfg.train_cells().unwrap();
    assert_eq!(cells.len(), 5 * 3);
    assert!(cells.iter().all(|c| c.dims.d_state == 8 && c.dims.context_len == 50 && c.rollout.warmup == 49));

    let cfg = resolve(&["--preset", "table5-desk", "--ablation-tasks", "narma10", "ablate"]).unwrap();
    assert_eq!(cfg.ablation_cells().unwrap().len(), 4 * 3);

    let mut cfg = resolve(&["train", "--seeds", "0"]).unwrap();
    cfg.sweep.context_lens = vec![25, 50];
    cfg.sweep.d_states = vec![4, 8, 16];
    cfg.sweep.variants = vec![VariantKind::Standard, VariantKind::SeqBim];
    assert_eq!(cfg.sweep_cells(SweepAxis::ContextLen).unwrap().len(), 2 * 3 * 2);
    assert_eq!(cfg.sweep_cells(SweepAxis::DState).unwrap().len(), 3 * 2);
}
