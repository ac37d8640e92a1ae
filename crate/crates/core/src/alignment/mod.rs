//! Supervised alignment: short finetuning of an adapted checkpoint on small
//! labeled target subsets, repeated over seeded rounds.

use serde::{Deserialize, Serialize};

use crate::data::{sample_labeled_subset, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, render_grid, ClassMapping};
use crate::segmenter::{
    fit, AdamWConfig, AugmentConfig, BackwardScope, PolySchedule, Provenance, SegmenterCheckpoint, StageKind,
    TrainConfig,
};
use crate::source_prep::SpPlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaMode {
    #[default]
    Finetune,
    /// Only the classification head is trained.
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub warmup_iters: usize,
    pub rounds: usize,
    pub subset_sizes: Vec<usize>,
    pub mode: SaMode,
    /// Explicit base learning rate; when unset, `lr_scale` times the source
    /// training rate recorded in the start checkpoint.
    pub base_lr: Option<f64>,
    pub lr_scale: f64,
    pub power: f64,
    pub batch_size: usize,
    pub crop: Option<[usize; 2]>,
    pub augment: AugmentConfig,
    pub optimizer: AdamWConfig,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: 4000,
            warmup_iters: 150,
            rounds: 4,
            subset_sizes: vec![20, 50, 100],
            mode: SaMode::Finetune,
            base_lr: None,
            lr_scale: 0.1,
            power: 1.0,
            batch_size: 8,
            crop: None,
            augment: AugmentConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.warmup_iters >= self.iterations {
            return Err(Error::Config(format!(
                "sa warmup_iters {} must be below iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("sa rounds must be at least 1".into()));
        }
        if self.subset_sizes.is_empty() || self.subset_sizes.contains(&0) {
            return Err(Error::Config("sa subset_sizes must be a nonempty list of positive sizes".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sa batch_size must be at least 1".into()));
        }
        if self.lr_scale < 0.0 || self.base_lr.is_some_and(|lr| lr < 0.0) {
            return Err(Error::Config("sa learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn check_capacity(&self, labeled: usize) -> Result<()> {
        match self.subset_sizes.iter().find(|&&n| n > labeled) {
            Some(&n) => Err(Error::Capacity {
                requested: n,
                available: labeled,
            }),
            None => Ok(()),
        }
    }

    /// Effective base rate for a start checkpoint.
    pub fn resolve_lr(&self, start: &SegmenterCheckpoint) -> f64 {
        self.base_lr
            .unwrap_or_else(|| self.lr_scale * source_base_lr(start).unwrap_or(PolySchedule::default().base_lr))
    }

    fn train_config(&self, base_lr: f64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            crop: self.crop,
            augment: self.augment.clone(),
            schedule: PolySchedule {
                base_lr,
                warmup_iters: self.warmup_iters,
                power: self.power,
            },
            optimizer: self.optimizer.clone(),
        }
    }

    /// Rounds actually run for subset size `n` out of `labeled` samples.
    pub fn rounds_for(&self, n: usize, labeled: usize) -> usize {
        if n == labeled {
            1
        } else {
            self.rounds
        }
    }
}

/// Base rate recorded by source training, if the checkpoint has one.
pub fn source_base_lr(ckpt: &SegmenterCheckpoint) -> Option<f64> {
    ckpt.provenance()
        .iter()
        .find(|p| p.stage == StageKind::Sp)
        .and_then(|p| p.config.pointer("/train/schedule/base_lr"))
        .and_then(|v| v.as_f64())
}

/// Evaluation set used to score every round.
#[derive(Clone, Copy, Debug)]
pub struct SaEval<'a> {
    pub val: &'a DomainDataset,
    pub mapping: &'a ClassMapping,
    pub selected_classes: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaRound {
    pub round: usize,
    pub seed: u64,
    pub subset_ids: Vec<String>,
    /// Mean IoU in `[0, 1]`.
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaRow {
    pub subset_size: usize,
    pub rounds: Vec<SaRound>,
    pub mean: f64,
    /// Sample standard deviation; present only with more than one round.
    pub std: Option<f64>,
}

impl SaRow {
    fn from_rounds(subset_size: usize, rounds: Vec<SaRound>) -> Self {
        let (mean, std) = mean_std(&rounds.iter().map(|r| r.miou).collect::<Vec<_>>());
        Self {
            subset_size,
            rounds,
            mean,
            std,
        }
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaReport {
    pub arm: String,
    pub mode: SaMode,
    /// mIoU of the start checkpoint on the evaluation set.
    pub start_miou: f64,
    pub rows: Vec<SaRow>,
}

/// One structured line per arm × size × round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaRecord {
    pub arm: String,
    pub subset_size: usize,
    pub round: usize,
    pub seed: u64,
    pub miou: f64,
    pub subset_ids: Vec<String>,
}

impl SaReport {
    pub fn records(&self) -> Vec<SaRecord> {
        self.rows
            .iter()
            .flat_map(|row| {
                row.rounds.iter().map(|r| SaRecord {
                    arm: self.arm.clone(),
                    subset_size: row.subset_size,
                    round: r.round,
                    seed: r.seed,
                    miou: r.miou,
                    subset_ids: r.subset_ids.clone(),
                })
            })
            .collect()
    }

    pub fn row(&self, subset_size: usize) -> Option<&SaRow> {
        self.rows.iter().find(|r| r.subset_size == subset_size)
    }
}

/// Rows are arms, columns subset sizes, cells `mean ± std` in points.
pub fn sa_grid(reports: &[SaReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut header = vec!["arm".to_string(), "start".to_string()];
    header.extend(first.rows.iter().map(|r| format!("n={}", r.subset_size)));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|rep| {
            let mut row = vec![rep.arm.clone(), format!("{:.2}", 100.0 * rep.start_miou)];
            row.extend(rep.rows.iter().map(|r| match r.std {
                Some(s) => format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * s),
                None => format!("{:.2}", 100.0 * r.mean),
            }));
            row
        })
        .collect();
    render_grid(&header, &rows)
}

#[derive(Clone, Debug)]
pub struct SaRun {
    pub subset_size: usize,
    pub round: usize,
    pub checkpoint: SegmenterCheckpoint,
}

#[derive(Clone, Debug)]
pub struct SaOutcome {
    pub runs: Vec<SaRun>,
    pub report: SaReport,
}

/// Subset ids per size and round; a round's subset uses seed `seed ^ round`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPlan {
    pub sizes: Vec<(usize, Vec<(usize, u64, Vec<String>)>)>,
}

impl SubsetPlan {
    pub fn draw(labeled_target: &DomainDataset, cfg: &SaConfig, seed: u64) -> Result<Self> {
        let labeled = labeled_target.labeled_ids().len();
        let mut sizes = Vec::with_capacity(cfg.subset_sizes.len());
        for &n in &cfg.subset_sizes {
            let mut rounds = Vec::new();
            for r in 0..cfg.rounds_for(n, labeled) {
                let round_seed = seed ^ r as u64;
                let subset = sample_labeled_subset(labeled_target, n, round_seed)?;
                rounds.push((r, round_seed, subset.ids().iter().map(|s| s.to_string()).collect()));
            }
            sizes.push((n, rounds));
        }
        Ok(Self { sizes })
    }
}

fn check_inputs(labeled_target: &DomainDataset, cfg: &SaConfig) -> Result<()> {
    cfg.validate()?;
    if labeled_target.is_empty() {
        return Err(Error::Contract("labeled target set is empty".into()));
    }
    cfg.check_capacity(labeled_target.labeled_ids().len())
}

fn run_plan(
    arm: &str,
    start: &SegmenterCheckpoint,
    labeled_target: &DomainDataset,
    cfg: &SaConfig,
    plan: &SubsetPlan,
    eval: &SaEval<'_>,
) -> Result<SaOutcome> {
    if start.config.num_classes != labeled_target.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the labeled target set has {}",
            start.config.num_classes,
            labeled_target.num_classes()
        )));
    }
    let start_miou = evaluate_model(start, eval.val, eval.mapping, eval.selected_classes)?.miou;
    let base_lr = cfg.resolve_lr(start);
    let train = cfg.train_config(base_lr);
    let scope = match cfg.mode {
        SaMode::Finetune => BackwardScope::Full,
        SaMode::LinearProbe => BackwardScope::HeadOnly,
    };
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for (n, rounds) in &plan.sizes {
        let mut results = Vec::with_capacity(rounds.len());
        for (r, round_seed, ids) in rounds {
            let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let subset = labeled_target.select(&id_refs)?;
            let mut model = start.to_model()?;
            let note = if cfg.iterations == 0 {
                Some("no-op: zero iterations".to_string())
            } else {
                fit(&mut model, &subset, &train, &SpPlan::default(), scope, *round_seed)?;
                None
            };
            let record = Provenance {
                stage: StageKind::Sa,
                label: "sa".into(),
                config: serde_json::json!({
                    "mode": cfg.mode,
                    "subset_size": n,
                    "round": r,
                    "subset_ids": ids,
                    "train": train,
                }),
                seed: *round_seed,
                note,
            };
            let checkpoint = start.extended(&model, record);
            let miou = evaluate_model(&checkpoint, eval.val, eval.mapping, eval.selected_classes)?.miou;
            results.push(SaRound {
                round: *r,
                seed: *round_seed,
                subset_ids: ids.clone(),
                miou,
            });
            runs.push(SaRun {
                subset_size: *n,
                round: *r,
                checkpoint,
            });
        }
        rows.push(SaRow::from_rounds(*n, results));
    }
    Ok(SaOutcome {
        runs,
        report: SaReport {
            arm: arm.to_string(),
            mode: cfg.mode,
            start_miou,
            rows,
        },
    })
}

/// Finetunes `start` once per subset size and round and scores every
/// result on `eval`.
pub fn run_sa(
    start: &SegmenterCheckpoint,
    labeled_target: &DomainDataset,
    cfg: &SaConfig,
    eval: &SaEval<'_>,
    seed: u64,
) -> Result<SaOutcome> {
    check_inputs(labeled_target, cfg)?;
    let plan = SubsetPlan::draw(labeled_target, cfg, seed)?;
    let arm = start
        .provenance()
        .iter()
        .map(|p| p.label.as_str())
        .collect::<Vec<_>>()
        .join("+");
    run_plan(&arm, start, labeled_target, cfg, &plan, eval)
}

#[derive(Clone, Debug)]
pub struct SaComparison {
    pub outcomes: Vec<SaOutcome>,
    pub grid: String,
}

impl SaComparison {
    pub fn reports(&self) -> Vec<&SaReport> {
        self.outcomes.iter().map(|o| &o.report).collect()
    }
}

/// Runs every arm on the same per-round subsets and renders the grid.
pub fn compare_sa_arms(
    arms: &[(String, SegmenterCheckpoint)],
    labeled_target: &DomainDataset,
    cfg: &SaConfig,
    eval: &SaEval<'_>,
    seed: u64,
) -> Result<SaComparison> {
    if arms.len() < 2 {
        return Err(Error::Config(format!("comparison needs at least 2 arms, got {}", arms.len())));
    }
    let k = arms[0].1.config.num_classes;
    if let Some((name, _)) = arms.iter().find(|(_, c)| c.config.num_classes != k) {
        return Err(Error::Config(format!(
            "arm `{name}` predicts a different number of classes than `{}`",
            arms[0].0
        )));
    }
    check_inputs(labeled_target, cfg)?;
    let plan = SubsetPlan::draw(labeled_target, cfg, seed)?;
    let outcomes = arms
        .iter()
        .map(|(name, ckpt)| run_plan(name, ckpt, labeled_target, cfg, &plan, eval))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<SaReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    Ok(SaComparison {
        grid: sa_grid(&reports),
        outcomes,
    })
}

#[cfg(test)]
mod tests;
