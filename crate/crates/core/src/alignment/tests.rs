use super::*;
use crate::data::{domainize, generate_scene, ClassSpec, Split, SynthDomainParams};
use crate::segmenter::{Segmenter, SegmenterConfig, HEAD_PREFIX};
use statrs::statistics::Statistics;

fn target(n: u64, offset: u64) -> DomainDataset {
    let classes = ClassSpec::default_classes();
    let samples = (0..n)
        .map(|s| {
            let mut clean = generate_scene(offset + s, (32, 32), &classes).unwrap();
            clean.id = format!("t{:04}", offset + s);
            domainize(&clean, &SynthDomainParams::target_default(), s).unwrap()
        })
        .collect();
    DomainDataset::new(samples, 3, Split::Train).unwrap()
}

fn start(seed: u64) -> SegmenterCheckpoint {
    let model = Segmenter::new(SegmenterConfig::tiny(3), seed).unwrap();
    let sp = Provenance {
        stage: StageKind::Sp,
        label: "none".into(),
        config: serde_json::json!({ "train": { "schedule": { "base_lr": 2e-3 } } }),
        seed,
        note: None,
    };
    SegmenterCheckpoint::from_model(&model, vec![sp])
}

fn short(sizes: Vec<usize>) -> SaConfig {
    SaConfig {
        iterations: 3,
        warmup_iters: 1,
        rounds: 2,
        subset_sizes: sizes,
        batch_size: 2,
        ..Default::default()
    }
}

struct Fixture {
    labeled: DomainDataset,
    val: DomainDataset,
    mapping: ClassMapping,
}

impl Fixture {
    fn new() -> Self {
        let labeled = target(10, 500);
        let val = target(4, 900).with_split(Split::Val);
        let names = labeled.class_names().to_vec();
        Self {
            labeled,
            val,
            mapping: ClassMapping::identity(&names),
        }
    }

    fn eval(&self) -> SaEval<'_> {
        SaEval {
            val: &self.val,
            mapping: &self.mapping,
            selected_classes: &[0, 1, 2],
        }
    }
}

#[test]
fn full_set_collapses_to_one_round() {
    let f = Fixture::new();
    let out = run_sa(&start(0), &f.labeled, &short(vec![4, 10]), &f.eval(), 5).unwrap();
    assert_eq!(out.report.row(4).unwrap().rounds.len(), 2);
    let full = out.report.row(10).unwrap();
    assert_eq!(full.rounds.len(), 1);
    assert_eq!(full.std, None);
    assert_eq!(out.runs.len(), 3);
}

#[test]
fn zero_iterations_returns_start_weights() {
    let f = Fixture::new();
    let s = start(1);
    let cfg = SaConfig {
        iterations: 0,
        ..short(vec![3])
    };
    let out = run_sa(&s, &f.labeled, &cfg, &f.eval(), 2).unwrap();
    for run in &out.runs {
        assert_eq!(run.checkpoint.weights, s.weights);
        assert_eq!(run.checkpoint.provenance().len(), 2);
    }
    for r in &out.report.row(3).unwrap().rounds {
        assert_eq!(r.miou, out.report.start_miou);
    }
}

#[test]
fn reruns_are_identical() {
    let f = Fixture::new();
    let a = run_sa(&start(2), &f.labeled, &short(vec![3]), &f.eval(), 9).unwrap();
    let b = run_sa(&start(2), &f.labeled, &short(vec![3]), &f.eval(), 9).unwrap();
    assert_eq!(a.report, b.report);
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.checkpoint.weights, y.checkpoint.weights);
    }
}

#[test]
fn oversized_subset_is_a_capacity_error() {
    let f = Fixture::new();
    let err = run_sa(&start(0), &f.labeled, &short(vec![3, 11]), &f.eval(), 0).unwrap_err();
    assert!(matches!(err, Error::Capacity { requested: 11, available: 10 }));
}

#[test]
fn linear_probe_touches_only_the_head() {
    let f = Fixture::new();
    let s = start(3);
    let cfg = SaConfig {
        mode: SaMode::LinearProbe,
        base_lr: Some(1e-2),
        ..short(vec![4])
    };
    let out = run_sa(&s, &f.labeled, &cfg, &f.eval(), 1).unwrap();
    let head = s.weights.ranges_with_prefix(HEAD_PREFIX);
    let in_head = |i: usize| head.iter().any(|r| r.contains(&i));
    for run in &out.runs {
        let (before, after) = (s.weights.data(), run.checkpoint.weights.data());
        let mut head_changed = false;
        for i in 0..before.len() {
            if in_head(i) {
                head_changed |= before[i] != after[i];
            } else {
                assert_eq!(before[i].to_bits(), after[i].to_bits(), "non-head parameter {i} moved");
            }
        }
        assert!(head_changed);
    }
}

#[test]
fn mean_and_std_match_recomputation() {
    let f = Fixture::new();
    let cfg = SaConfig {
        rounds: 3,
        base_lr: Some(5e-3),
        ..short(vec![4])
    };
    let out = run_sa(&start(4), &f.labeled, &cfg, &f.eval(), 3).unwrap();
    let row = out.report.row(4).unwrap();
    let values: Vec<f64> = row.rounds.iter().map(|r| r.miou).collect();
    assert!((row.mean - values.iter().mean()).abs() <= 1e-12);
    assert!((row.std.unwrap() - values.iter().std_dev()).abs() <= 1e-12);
}

#[test]
fn provenance_appends_sa() {
    let f = Fixture::new();
    let out = run_sa(&start(0), &f.labeled, &short(vec![2]), &f.eval(), 0).unwrap();
    let stages: Vec<StageKind> = out.runs[0].checkpoint.provenance().iter().map(|p| p.stage).collect();
    assert_eq!(stages, vec![StageKind::Sp, StageKind::Sa]);
}

#[test]
fn lr_defaults_to_a_tenth_of_source() {
    let cfg = SaConfig::default();
    assert!((cfg.resolve_lr(&start(0)) - 2e-4).abs() < 1e-18);
    let explicit = SaConfig {
        base_lr: Some(0.5),
        ..SaConfig::default()
    };
    assert_eq!(explicit.resolve_lr(&start(0)), 0.5);
}

#[test]
fn arms_share_subsets() {
    let f = Fixture::new();
    let arms = vec![("a".to_string(), start(0)), ("b".to_string(), start(7))];
    let cmp = compare_sa_arms(&arms, &f.labeled, &short(vec![3, 5]), &f.eval(), 11).unwrap();
    let ids = |i: usize| -> Vec<(usize, usize, Vec<String>)> {
        cmp.outcomes[i]
            .report
            .records()
            .into_iter()
            .map(|r| (r.subset_size, r.round, r.subset_ids))
            .collect()
    };
    assert_eq!(ids(0), ids(1));
    assert_eq!(cmp.grid.lines().count(), 4);
}

#[test]
fn identical_arms_give_identical_rows() {
    let f = Fixture::new();
    let arms = vec![("a".to_string(), start(5)), ("b".to_string(), start(5))];
    let cmp = compare_sa_arms(&arms, &f.labeled, &short(vec![3]), &f.eval(), 4).unwrap();
    assert_eq!(cmp.outcomes[0].report.rows, cmp.outcomes[1].report.rows);
}

#[test]
fn arm_validation() {
    let f = Fixture::new();
    let one = vec![("a".to_string(), start(0))];
    assert!(matches!(
        compare_sa_arms(&one, &f.labeled, &short(vec![3]), &f.eval(), 0),
        Err(Error::Config(_))
    ));
    let other = SegmenterCheckpoint::from_model(&Segmenter::new(SegmenterConfig::tiny(4), 0).unwrap(), vec![]);
    let mixed = vec![("a".to_string(), start(0)), ("b".to_string(), other)];
    assert!(matches!(
        compare_sa_arms(&mixed, &f.labeled, &short(vec![3]), &f.eval(), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn config_validation() {
    assert!(SaConfig::default().validate().is_ok());
    for bad in [
        SaConfig { warmup_iters: 10, iterations: 10, ..SaConfig::default() },
        SaConfig { rounds: 0, ..SaConfig::default() },
        SaConfig { subset_sizes: vec![], ..SaConfig::default() },
        SaConfig { subset_sizes: vec![0], ..SaConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn config_parses_from_toml() {
    let cfg: SaConfig = toml::from_str("iterations = 200\nwarmup_iters = 20\nsubset_sizes = [20, 50]\nmode = \"linear_probe\"\n").unwrap();
    assert_eq!(cfg.mode, SaMode::LinearProbe);
    assert_eq!(cfg.subset_sizes, vec![20, 50]);
    assert_eq!(cfg.rounds, 4);
}
