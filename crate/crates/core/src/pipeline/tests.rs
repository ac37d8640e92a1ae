use super::*;
use crate::alignment::SaConfig;
use crate::segmenter::SegmenterConfig;

fn tiny_cfg(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: dir.join("run"),
        model: SegmenterConfig::tiny(3),
        ..RunConfig::default()
    };
    cfg.data.root = dir.join("data");
    cfg.data.synth = SynthConfig {
        size: 32,
        source_train: 6,
        source_val: 3,
        target_train: 6,
        target_val: 3,
        target_sa_train: 5,
        ..SynthConfig::default()
    };
    cfg.train.iterations = 3;
    cfg.train.batch_size = 2;
    cfg.train.schedule.warmup_iters = 1;
    cfg.uda.iterations = 2;
    cfg.uda.batch_size = 2;
    cfg.uda.schedule.warmup_iters = 1;
    cfg.sa = SaConfig {
        iterations: 2,
        warmup_iters: 1,
        rounds: 2,
        subset_sizes: vec![2, 3],
        batch_size: 2,
        ..SaConfig::default()
    };
    cfg.sp = cfg.sp.with_scheme("blur");
    cfg
}

fn generated(dir: &Path) -> RunConfig {
    let cfg = tiny_cfg(dir);
    cmd_synth_gen(&cfg, &cfg.data.root, false).unwrap();
    cfg
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn arm_names_are_path_safe() {
    assert_eq!(arm_name("blur"), "blur");
    assert_eq!(arm_name("stacked[blur+mixup]"), "stacked_blur+mixup_");
    assert_eq!(arm_name("A/B"), "a_b");
}

#[test]
fn synth_gen_counts_and_label_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let info = cmd_synth_gen(&cfg, &cfg.data.root, false).unwrap();
    let counts: Vec<(usize, bool)> = info.iter().map(|i| (i.images, i.labeled)).collect();
    assert_eq!(counts, vec![(6, true), (3, true), (6, false), (3, true), (5, true)]);
    assert!(!cfg.data.resolve(&cfg.data.target_train).join("masks").exists());
    let data = RunData::new(&cfg.data);
    assert_eq!(data.target_labeled().unwrap().len(), 5);
    assert_eq!(data.source_train().unwrap().class_names()[1], "disk");
}

#[test]
fn synth_gen_is_bit_identical_and_refuses_non_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    cmd_synth_gen(&cfg, &cfg.data.root, false).unwrap();
    let first = read_tree(&cfg.data.root);
    assert!(matches!(cmd_synth_gen(&cfg, &cfg.data.root, false), Err(Error::Refused(_))));
    cmd_synth_gen(&cfg, &cfg.data.root, true).unwrap();
    assert_eq!(read_tree(&cfg.data.root), first);
    let other = dir.path().join("other");
    cmd_synth_gen(&cfg.clone().with_seed(1), &other, false).unwrap();
    assert_ne!(read_tree(&other), first);
}

#[test]
fn splits_do_not_share_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_splits(&tiny_cfg(dir.path())).unwrap();
    let a = &s.source_train.samples()[0].mask;
    assert!(s.source_val.samples().iter().all(|x| &x.mask != a));
}

#[test]
fn sp_rerun_is_flagged_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let opts = CommandOptions::default();
    let a = cmd_sp_train(&cfg, &opts).unwrap();
    assert_eq!(a.status, EntryStatus::Completed);
    assert_eq!(a.arm, "blur");
    assert!(a.checkpoint_path.ends_with("checkpoints/sp-blur.ckpt"));
    let b = cmd_sp_train(&cfg, &opts).unwrap();
    assert_eq!(b.status, EntryStatus::Reused);
    assert_eq!(a.checkpoint.weights, b.checkpoint.weights);
    let forced = cmd_sp_train(&cfg, &CommandOptions { force: true }).unwrap();
    assert_eq!(forced.status, EntryStatus::Completed);
    assert_eq!(forced.checkpoint.weights, a.checkpoint.weights);
    let ledger = RunLedger::open(&cfg.out.join(LEDGER_FILE)).unwrap();
    let hashes: Vec<&str> = ledger.entries().iter().map(|e| e.config_hash.as_str()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    assert!(ledger.entries()[1].note.as_deref().unwrap().contains("idempotent"));
}

#[test]
fn uda_with_missing_start_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let err = cmd_uda(&cfg, None, &CommandOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
    assert!(!cfg.out.exists());
}

#[test]
fn uda_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let sp = cmd_sp_train(&cfg, &CommandOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.model.num_classes = 4;
    let err = cmd_uda(&other, Some(&sp.checkpoint_path), &CommandOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn uda_records_sp_during_uda_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = generated(dir.path());
    cfg.uda.sp_during_uda = cfg.uda.sp_during_uda.clone().with_scheme("blur");
    cmd_sp_train(&cfg, &CommandOptions::default()).unwrap();
    let run = cmd_uda(&cfg, None, &CommandOptions::default()).unwrap();
    assert_eq!(run.arm, "blur+during-blur");
    assert_eq!(default_sa_start(&cfg).unwrap(), run.checkpoint_path);
    let ledger = RunLedger::open(&cfg.out.join(LEDGER_FILE)).unwrap();
    let entry = ledger.entries().last().unwrap();
    assert_eq!(entry.stage, "uda");
    assert!(entry.note.as_deref().unwrap().contains("sp_during_uda = blur"));
    assert!(entry.command.contains("--start"));
}

#[test]
fn sa_skip_and_missing_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = generated(dir.path());
    cfg.sa.enabled = false;
    let out = cmd_sa(&cfg, &[], &CommandOptions::default()).unwrap();
    assert!(matches!(out, SaStage::Skipped { .. }));
    let ledger = RunLedger::open(&cfg.out.join(LEDGER_FILE)).unwrap();
    assert_eq!(ledger.entries()[0].status, EntryStatus::Skipped);
    assert_eq!(ledger.entries()[0].note.as_deref(), Some("sa.enabled = false"));

    cfg.sa.enabled = true;
    cfg.data.target_labeled = None;
    let err = cmd_sa(&cfg, &[], &CommandOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("DZ does not"));
}

#[test]
fn sa_runs_every_size_and_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let opts = CommandOptions::default();
    cmd_sp_train(&cfg, &opts).unwrap();
    cmd_uda(&cfg, None, &opts).unwrap();
    let SaStage::Ran { arms, grid, reports } = cmd_sa(&cfg, &[], &opts).unwrap() else {
        panic!("sa skipped");
    };
    assert_eq!(arms.len(), 1);
    assert_eq!(arms[0].checkpoints.len(), 4);
    assert!(arms[0].checkpoints.iter().all(|c| c.2.is_file()));
    assert_eq!(grid.lines().count(), 3);
    assert_eq!(fs::read_to_string(&reports[1]).unwrap(), grid);
    assert_eq!(fs::read_to_string(&reports[0]).unwrap().lines().count(), 4);
}

#[test]
fn evaluate_unknown_checkpoint_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let err = cmd_evaluate(&cfg, &[dir.path().join("nope.ckpt")], EvalMode::Clean).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
    assert!(matches!(cmd_evaluate(&cfg, &[], EvalMode::Clean), Err(Error::Config(_))));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let _held = RunLock::acquire(&cfg.out).unwrap();
    assert!(matches!(cmd_sp_train(&cfg, &CommandOptions::default()), Err(Error::Refused(_))));
}

#[test]
fn pipeline_ledger_order_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = generated(dir.path());
    cfg.sa.subset_sizes = vec![2];
    cfg.eval.robustness = true;
    let sum = cmd_pipeline(&cfg, &CommandOptions::default()).unwrap();
    let names: Vec<&str> = sum.rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, vec!["baseline", "uda", "sp+uda", "sp+uda+sa"]);
    assert_eq!(sum.contribution_grid.lines().count(), 6);
    assert_eq!(sum.robustness_grid.as_ref().unwrap().lines().count(), 5);

    let sp = sum.sp.as_ref().unwrap();
    let prefix = sp.checkpoint.provenance();
    assert!(sum.sp_uda.checkpoint.provenance().starts_with(prefix));
    let SaStage::Ran { arms, .. } = &sum.sa else { panic!("sa skipped") };
    assert_eq!(arms.len(), 2);
    let sa_ckpt = SegmenterCheckpoint::load(&arms[0].checkpoints[0].2).unwrap();
    assert!(sa_ckpt.provenance().starts_with(sum.sp_uda.checkpoint.provenance()));

    let ledger = RunLedger::open(&cfg.out.join(LEDGER_FILE)).unwrap();
    let stages: Vec<(&str, &str)> = ledger.entries().iter().map(|e| (e.stage.as_str(), e.arm.as_str())).collect();
    assert_eq!(
        stages,
        vec![("sp", "none"), ("uda", "none"), ("sp", "blur"), ("uda", "blur"), ("sa", "blur,none"), ("report", "blur")]
    );
    for e in ledger.entries() {
        let snapshot = e.command.split_whitespace().nth(3).unwrap();
        let replay = RunConfig::load(Some(Path::new(snapshot)), &[]).unwrap();
        assert_eq!(replay.out, cfg.out);
    }
}

#[test]
fn mean_report_averages_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generated(dir.path());
    let sp = cmd_sp_train(&cfg, &CommandOptions::default()).unwrap();
    let r = sp.report.clone();
    let mut other = r.clone();
    other.miou = r.miou / 2.0;
    let m = mean_report(&[r.clone(), other]).unwrap();
    assert!((m.miou - 0.75 * r.miou).abs() < 1e-15);
    assert_eq!(m.num_images, 2 * r.num_images);
    assert_eq!(m.confusion.total_pixels(), 2 * r.confusion.total_pixels());
    assert!(mean_report(&[]).is_err());
}
