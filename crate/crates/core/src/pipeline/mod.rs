//! Stage orchestration over a run directory.
//!
//! Layout of `<out>`:
//!
//! ```text
//! checkpoints/<stage>-<arm>.ckpt
//! reports/<name>.records    one JSON object per line
//! reports/<name>.txt        rendered grid
//! configs/<hash>.toml       effective config of every recorded command
//! ledger.jsonl              append-only stage journal
//! ```

mod config;
mod ledger;

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::alignment::{compare_sa_arms, run_sa, sa_grid, SaEval, SaReport, SaRun};
use crate::data::{
    domainize, generate_scene, load_directory_dataset, write_directory_dataset, ClassSpec, DirectoryLayout,
    DomainDataset, DomainTag, MaskFormat, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    contribution_grid, evaluate_predictor, robustness_eval, robustness_grid, ClassIou, ClassMapping, CorruptionSpec,
    ReportRecord, RobustnessRow, SegmenterPredictor, StageReport,
};
use crate::segmenter::{train_supervised, SegmenterCheckpoint, StageKind};
use crate::uda::run_uda;

pub use config::{apply_override, DataConfig, EvalConfig, RunConfig, SeedConfig, SynthConfig};
pub use ledger::{config_hash, file_hash, write_atomic, EntryStatus, LedgerEntry, RunLedger, RunLock, LOCK_FILE};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const CHECKPOINT_EXT: &str = "ckpt";

/// Lowercase, filesystem-safe form of an arm or scheme name.
pub fn arm_name(raw: &str) -> String {
    raw.chars()
        .map(|c| match c {
            'a'..='z' | '0'..='9' | '-' | '_' | '+' => c,
            'A'..='Z' => c.to_ascii_lowercase(),
            _ => '_',
        })
        .collect()
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.{CHECKPOINT_EXT}"))
}

/// Exclusive handle on a run directory.
#[derive(Debug)]
pub struct Workspace {
    out: PathBuf,
    force: bool,
    ledger: RunLedger,
    _lock: RunLock,
}

impl Workspace {
    pub fn open(out: &Path, force: bool) -> Result<Self> {
        let lock = RunLock::acquire(out)?;
        let ledger = RunLedger::open(&out.join(LEDGER_FILE))?;
        Ok(Self {
            out: out.to_path_buf(),
            force,
            ledger,
            _lock: lock,
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        checkpoint_path(&self.out, name)
    }

    /// Writes `<name>.records` and `<name>.txt` under `reports/`.
    fn write_report(&self, name: &str, records: &str, text: &str) -> Result<Vec<PathBuf>> {
        let dir = self.out.join("reports");
        let rec = dir.join(format!("{name}.records"));
        let txt = dir.join(format!("{name}.txt"));
        write_atomic(&rec, records.as_bytes())?;
        write_atomic(&txt, text.as_bytes())?;
        Ok(vec![rec, txt])
    }

    /// Snapshots `cfg` and returns the command line that reruns `sub` on it.
    fn command(&self, sub: &str, cfg: &RunConfig, extra: &[String]) -> Result<String> {
        let text = cfg.to_toml_string()?;
        let hash = config_hash(&serde_json::Value::String(text.clone()));
        let path = self.out.join("configs").join(format!("{}.toml", &hash[..16]));
        if !path.exists() {
            write_atomic(&path, text.as_bytes())?;
        }
        let mut cmd = format!("segadapt {sub} --config {}", path.display());
        for e in extra {
            cmd.push(' ');
            cmd.push_str(e);
        }
        Ok(cmd)
    }

    fn reusable(&self, stage: &str, arm: &str, hash: &str, checkpoint: Option<&Path>) -> bool {
        !self.force
            && self.ledger.find_completed(stage, arm, hash).is_some()
            && checkpoint.is_none_or(Path::is_file)
    }
}

/// Datasets of one run, loaded on first use.
pub struct RunData {
    data: DataConfig,
    source_train: OnceCell<DomainDataset>,
    source_val: OnceCell<DomainDataset>,
    target_train: OnceCell<DomainDataset>,
    target_val: OnceCell<DomainDataset>,
    target_labeled: OnceCell<DomainDataset>,
}

fn cached(cell: &OnceCell<DomainDataset>, load: impl FnOnce() -> Result<DomainDataset>) -> Result<&DomainDataset> {
    if let Some(ds) = cell.get() {
        return Ok(ds);
    }
    let ds = load()?;
    Ok(cell.get_or_init(|| ds))
}

impl RunData {
    pub fn new(data: &DataConfig) -> Self {
        Self {
            data: data.clone(),
            source_train: OnceCell::new(),
            source_val: OnceCell::new(),
            target_train: OnceCell::new(),
            target_val: OnceCell::new(),
            target_labeled: OnceCell::new(),
        }
    }

    fn load(&self, p: &Path, split: Split) -> Result<DomainDataset> {
        let layout = DirectoryLayout::default();
        Ok(load_directory_dataset(&self.data.resolve(p), &layout)?.with_split(split))
    }

    fn labeled(&self, p: &Path, split: Split) -> Result<DomainDataset> {
        let ds = self.load(p, split)?;
        if ds.is_empty() || !ds.is_fully_labeled() {
            return Err(Error::Config(format!(
                "{} must be non-empty and fully labeled",
                self.data.resolve(p).display()
            )));
        }
        Ok(ds)
    }

    pub fn source_train(&self) -> Result<&DomainDataset> {
        cached(&self.source_train, || self.labeled(&self.data.source_train, Split::Train))
    }

    pub fn source_val(&self) -> Result<&DomainDataset> {
        cached(&self.source_val, || self.labeled(&self.data.source_val, Split::Val))
    }

    /// Target training images; any masks on disk are dropped.
    pub fn target_train(&self) -> Result<&DomainDataset> {
        cached(&self.target_train, || {
            Ok(self.load(&self.data.target_train, Split::Train)?.without_labels())
        })
    }

    pub fn target_val(&self) -> Result<&DomainDataset> {
        cached(&self.target_val, || self.labeled(&self.data.target_val, Split::Val))
    }

    pub fn target_labeled(&self) -> Result<&DomainDataset> {
        cached(&self.target_labeled, || {
            let p = self.data.target_labeled.as_ref().ok_or_else(no_labeled_target)?;
            self.labeled(p, Split::Train)
        })
    }
}

fn no_labeled_target() -> Error {
    Error::Config(
        "sa.enabled is true but data.target_labeled is not set. SA needs a labeled target train split; \
         CI and MFNT have one, but DZ does not. For such targets set sa.enabled = false"
            .into(),
    )
}

/// A finished (or reused) training stage.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub stage: String,
    pub arm: String,
    pub status: EntryStatus,
    pub checkpoint_path: PathBuf,
    pub checkpoint: SegmenterCheckpoint,
    pub report: StageReport,
    pub reports: Vec<PathBuf>,
}

/// Target-side evaluation settings resolved against the source classes.
struct EvalSetup {
    mapping: ClassMapping,
    selected: Vec<usize>,
}

impl EvalSetup {
    fn new(cfg: &RunConfig, source_class_names: &[String]) -> Result<Self> {
        let mapping = cfg.eval.mapping(source_class_names)?;
        let selected = cfg.eval.selected(&mapping);
        Ok(Self { mapping, selected })
    }
}

fn evaluate(cfg: &RunConfig, ckpt: &SegmenterCheckpoint, ds: &DomainDataset, setup: &EvalSetup) -> Result<StageReport> {
    let predictor = SegmenterPredictor::from_checkpoint(ckpt)?;
    evaluate_predictor(&predictor, ds, &setup.mapping, &setup.selected, cfg.eval.absent_class_policy)
}

fn stage_records(report: &StageReport, context: &str) -> Result<String> {
    ReportRecord::to_jsonl(&ReportRecord::from_stage(report, context))
}

fn check_classes(ckpt: &SegmenterCheckpoint, cfg: &RunConfig, path: &Path) -> Result<()> {
    let have = ckpt.config.num_classes;
    if have != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "{} predicts {have} classes but model.num_classes is {}",
            path.display(),
            cfg.model.num_classes
        )));
    }
    Ok(())
}

fn load_start(path: &Path, cfg: &RunConfig) -> Result<SegmenterCheckpoint> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let ckpt = SegmenterCheckpoint::load(path)?;
    check_classes(&ckpt, cfg, path)?;
    Ok(ckpt)
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Arm of a checkpoint: its SP label, plus the UDA-time SP scheme if any.
fn sp_arm_of(ckpt: &SegmenterCheckpoint) -> String {
    ckpt.provenance()
        .iter()
        .find(|p| p.stage == StageKind::Sp)
        .map(|p| arm_name(&p.label))
        .unwrap_or_else(|| "none".into())
}

fn uda_arm(start: &SegmenterCheckpoint, cfg: &RunConfig) -> Result<(String, Option<String>)> {
    let during = cfg.uda.sp_during_uda.to_scheme()?;
    let base = sp_arm_of(start);
    Ok(if during.is_none() {
        (base, None)
    } else {
        let name = during.name();
        (format!("{base}+during-{}", arm_name(&name)), Some(name))
    })
}

fn sp_stage(ws: &mut Workspace, cfg: &RunConfig, data: &RunData) -> Result<StageRun> {
    let scheme = cfg.sp.to_scheme()?;
    scheme.validate(Some(cfg.model.num_stages))?;
    let arm = arm_name(&scheme.name());
    let source = data.source_train()?;
    if source.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "source data has {} classes, model.num_classes is {}",
            source.num_classes(),
            cfg.model.num_classes
        )));
    }
    let hash = config_hash(&json!({
        "stage": "sp",
        "source_train": cfg.data.resolve(&cfg.data.source_train),
        "model": cfg.model,
        "train": cfg.train,
        "scheme": scheme,
        "seed": cfg.seeds.sp,
    }));
    let name = format!("sp-{arm}");
    let path = ws.checkpoint_path(&name);
    let t = Instant::now();
    let (status, checkpoint, note) = if ws.reusable("sp", &arm, &hash, Some(&path)) {
        let note = format!("idempotent rerun: config hash {} already completed", &hash[..16]);
        (EntryStatus::Reused, SegmenterCheckpoint::load(&path)?, Some(note))
    } else {
        let out = train_supervised(source, &cfg.model, &cfg.train, &scheme, cfg.seeds.sp)?;
        out.checkpoint.save(&path)?;
        (EntryStatus::Completed, out.checkpoint, None)
    };
    let source_val = data.source_val()?;
    let setup = EvalSetup {
        mapping: ClassMapping::identity(source_val.class_names()),
        selected: (0..source_val.num_classes()).collect(),
    };
    let report = evaluate(cfg, &checkpoint, source_val, &setup)?;
    let reports = ws.write_report(
        &name,
        &stage_records(&report, &format!("{name}/source_val"))?,
        &contribution_grid(&[(name.as_str(), &report)]),
    )?;
    let command = ws.command("sp-train", cfg, &[])?;
    ws.ledger.append(LedgerEntry {
        stage: "sp".into(),
        arm: arm.clone(),
        status,
        config_hash: hash,
        seed: cfg.seeds.sp,
        checkpoint: Some(path.clone()),
        reports: reports.clone(),
        wall_clock_secs: seconds(t),
        command,
        note,
    })?;
    Ok(StageRun {
        stage: "sp".into(),
        arm,
        status,
        checkpoint_path: path,
        checkpoint,
        report,
        reports,
    })
}

fn uda_stage(
    ws: &mut Workspace,
    cfg: &RunConfig,
    data: &RunData,
    start_path: &Path,
    start: &SegmenterCheckpoint,
) -> Result<StageRun> {
    let (arm, during) = uda_arm(start, cfg)?;
    let source = data.source_train()?;
    let target = data.target_train()?;
    let hash = config_hash(&json!({
        "stage": "uda",
        "start": file_hash(start_path)?,
        "source_train": cfg.data.resolve(&cfg.data.source_train),
        "target_train": cfg.data.resolve(&cfg.data.target_train),
        "uda": cfg.uda,
        "seed": cfg.seeds.uda,
    }));
    let name = format!("uda-{arm}");
    let path = ws.checkpoint_path(&name);
    let t = Instant::now();
    let (status, checkpoint, mut notes) = if ws.reusable("uda", &arm, &hash, Some(&path)) {
        let note = format!("idempotent rerun: config hash {} already completed", &hash[..16]);
        (EntryStatus::Reused, SegmenterCheckpoint::load(&path)?, vec![note])
    } else {
        let out = run_uda(source, target, start, &cfg.uda, cfg.seeds.uda)?;
        out.checkpoint.save(&path)?;
        (EntryStatus::Completed, out.checkpoint, vec![])
    };
    if let Some(d) = during {
        notes.push(format!("sp_during_uda = {d}"));
    }
    let setup = EvalSetup::new(cfg, source.class_names())?;
    let report = evaluate(cfg, &checkpoint, data.target_val()?, &setup)?;
    let reports = ws.write_report(
        &name,
        &stage_records(&report, &format!("{name}/target_val"))?,
        &contribution_grid(&[(name.as_str(), &report)]),
    )?;
    let command = ws.command("uda", cfg, &[format!("--start {}", start_path.display())])?;
    ws.ledger.append(LedgerEntry {
        stage: "uda".into(),
        arm: arm.clone(),
        status,
        config_hash: hash,
        seed: cfg.seeds.uda,
        checkpoint: Some(path.clone()),
        reports: reports.clone(),
        wall_clock_secs: seconds(t),
        command,
        note: (!notes.is_empty()).then(|| notes.join("; ")),
    })?;
    Ok(StageRun {
        stage: "uda".into(),
        arm,
        status,
        checkpoint_path: path,
        checkpoint,
        report,
        reports,
    })
}

/// SA results for one start checkpoint.
#[derive(Clone, Debug)]
pub struct SaArm {
    pub arm: String,
    pub report: SaReport,
    /// `(subset_size, round, path)` of every finetuned checkpoint.
    pub checkpoints: Vec<(usize, usize, PathBuf)>,
}

#[derive(Clone, Debug)]
pub enum SaStage {
    Skipped { reason: String },
    Ran { arms: Vec<SaArm>, grid: String, reports: Vec<PathBuf> },
}

fn sa_checkpoint_name(arm: &str, run: &SaRun) -> String {
    format!("sa-{arm}-n{}-r{}", run.subset_size, run.round)
}

fn sa_stage(
    ws: &mut Workspace,
    cfg: &RunConfig,
    data: &RunData,
    starts: &[(String, PathBuf, SegmenterCheckpoint)],
) -> Result<SaStage> {
    let arm_label = starts.iter().map(|s| s.0.as_str()).collect::<Vec<_>>().join(",");
    if !cfg.sa.enabled {
        let reason = "sa.enabled = false".to_string();
        let command = ws.command("sa", cfg, &[])?;
        ws.ledger.append(LedgerEntry {
            stage: "sa".into(),
            arm: arm_label,
            status: EntryStatus::Skipped,
            config_hash: config_hash(&json!({"stage": "sa", "enabled": false})),
            seed: cfg.seeds.sa,
            checkpoint: None,
            reports: vec![],
            wall_clock_secs: 0.0,
            command,
            note: Some(reason.clone()),
        })?;
        return Ok(SaStage::Skipped { reason });
    }
    if cfg.data.target_labeled.is_none() {
        return Err(no_labeled_target());
    }
    let labeled = data.target_labeled()?;
    cfg.sa.check_capacity(labeled.len())?;
    let source_names = data.source_train()?.class_names().to_vec();
    let setup = EvalSetup::new(cfg, &source_names)?;
    let val = data.target_val()?;
    let eval = SaEval {
        val,
        mapping: &setup.mapping,
        selected_classes: &setup.selected,
    };
    let t = Instant::now();
    let outcomes: Vec<(String, Vec<SaRun>, SaReport)> = if starts.len() == 1 {
        let (name, _, ckpt) = &starts[0];
        let mut out = run_sa(ckpt, labeled, &cfg.sa, &eval, cfg.seeds.sa)?;
        out.report.arm = name.clone();
        vec![(name.clone(), out.runs, out.report)]
    } else {
        let arms: Vec<(String, SegmenterCheckpoint)> = starts.iter().map(|(n, _, c)| (n.clone(), c.clone())).collect();
        compare_sa_arms(&arms, labeled, &cfg.sa, &eval, cfg.seeds.sa)?
            .outcomes
            .into_iter()
            .map(|o| (o.report.arm.clone(), o.runs, o.report))
            .collect()
    };
    let mut arms = Vec::new();
    for (name, runs, report) in outcomes {
        let mut checkpoints = Vec::new();
        for run in &runs {
            let path = ws.checkpoint_path(&sa_checkpoint_name(&name, run));
            run.checkpoint.save(&path)?;
            checkpoints.push((run.subset_size, run.round, path));
        }
        arms.push(SaArm {
            arm: name,
            report,
            checkpoints,
        });
    }
    let reports_list: Vec<SaReport> = arms.iter().map(|a| a.report.clone()).collect();
    let grid = sa_grid(&reports_list);
    let mut records = String::new();
    for r in reports_list.iter().flat_map(SaReport::records) {
        records.push_str(&serde_json::to_string(&r).map_err(|e| Error::Serialization(e.to_string()))?);
        records.push('\n');
    }
    let report_name = if starts.len() == 1 { format!("sa-{}", starts[0].0) } else { "sa".to_string() };
    let reports = ws.write_report(&report_name, &records, &grid)?;
    let mut start_hashes = Vec::new();
    for (name, path, _) in starts {
        start_hashes.push(json!({ "arm": name, "checkpoint": file_hash(path)? }));
    }
    let hash = config_hash(&json!({
        "stage": "sa",
        "starts": start_hashes,
        "target_labeled": cfg.data.target_labeled.as_ref().map(|p| cfg.data.resolve(p)),
        "target_val": cfg.data.resolve(&cfg.data.target_val),
        "sa": cfg.sa,
        "eval": cfg.eval,
        "seed": cfg.seeds.sa,
    }));
    let extra: Vec<String> = starts.iter().map(|(_, p, _)| format!("--start {}", p.display())).collect();
    let command = ws.command("sa", cfg, &extra)?;
    let runs: usize = arms.iter().map(|a| a.checkpoints.len()).sum();
    ws.ledger.append(LedgerEntry {
        stage: "sa".into(),
        arm: arm_label,
        status: EntryStatus::Completed,
        config_hash: hash,
        seed: cfg.seeds.sa,
        checkpoint: None,
        reports: reports.clone(),
        wall_clock_secs: seconds(t),
        command,
        note: Some(format!("{runs} finetune runs")),
    })?;
    Ok(SaStage::Ran { arms, grid, reports })
}

/// Averages per-round reports into one row: per-class IoU and mIoU are
/// round means; counts are summed.
pub fn mean_report(reports: &[StageReport]) -> Result<StageReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("mean_report needs at least one report".into()))?;
    let n = reports.len() as f64;
    let mut out = first.clone();
    for (i, c) in out.per_class.iter_mut().enumerate() {
        let values: Vec<f64> = reports.iter().filter_map(|r| r.per_class[i].iou).collect();
        *c = ClassIou {
            class: c.class,
            tp: reports.iter().map(|r| r.per_class[i].tp).sum(),
            union: reports.iter().map(|r| r.per_class[i].union).sum(),
            iou: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        };
    }
    out.miou = reports.iter().map(|r| r.miou).sum::<f64>() / n;
    for r in &reports[1..] {
        out.confusion.merge(&r.confusion);
    }
    out.num_images = reports.iter().map(|r| r.num_images).sum();
    out.ignored_predictions = reports.iter().map(|r| r.ignored_predictions).sum();
    if reports.len() > 1 {
        out.label = format!("{} (mean of {})", first.label, reports.len());
    }
    Ok(out)
}

/// Target-val reports of the SA checkpoints for the smallest subset size.
fn sa_row_report(cfg: &RunConfig, data: &RunData, arm: &SaArm) -> Result<StageReport> {
    let size = arm
        .checkpoints
        .iter()
        .map(|c| c.0)
        .min()
        .ok_or_else(|| Error::Contract("SA produced no checkpoints".into()))?;
    let setup = EvalSetup::new(cfg, data.source_train()?.class_names())?;
    let mut reports = Vec::new();
    for (_, _, path) in arm.checkpoints.iter().filter(|c| c.0 == size) {
        let ckpt = SegmenterCheckpoint::load(path)?;
        reports.push(evaluate(cfg, &ckpt, data.target_val()?, &setup)?);
    }
    mean_report(&reports)
}

/// Corruption battery described by the eval config.
pub fn configured_battery(cfg: &RunConfig) -> Result<Vec<CorruptionSpec>> {
    cfg.eval
        .battery_kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| CorruptionSpec::new(kind, cfg.eval.battery_severity, cfg.seeds.eval ^ (0xC0_0000 + i as u64)))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
struct RobustnessRecord<'a> {
    model: &'a str,
    corruption: Option<String>,
    severity: f64,
    miou: f64,
}

/// Clean and corrupted target-val reports per model, plus the grid.
fn robustness_section(
    cfg: &RunConfig,
    data: &RunData,
    models: &[(String, StageReport, SegmenterCheckpoint)],
) -> Result<(String, String, Vec<Vec<RobustnessRow>>)> {
    let setup = EvalSetup::new(cfg, data.source_train()?.class_names())?;
    let battery = configured_battery(cfg)?;
    let mut all = Vec::new();
    for (_, _, ckpt) in models {
        let predictor = SegmenterPredictor::from_checkpoint(ckpt)?;
        all.push(robustness_eval(&predictor, data.target_val()?, &setup.mapping, &setup.selected, &battery)?);
    }
    let rows: Vec<(&str, &StageReport, &[RobustnessRow])> = models
        .iter()
        .zip(&all)
        .map(|((n, clean, _), r)| (n.as_str(), clean, r.as_slice()))
        .collect();
    let grid = robustness_grid(&rows);
    let mut records = String::new();
    for (name, clean, rows) in &rows {
        let mut push = |corruption: Option<String>, severity: f64, miou: f64| -> Result<()> {
            let rec = RobustnessRecord {
                model: name,
                corruption,
                severity,
                miou,
            };
            records.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Serialization(e.to_string()))?);
            records.push('\n');
            Ok(())
        };
        push(None, 0.0, clean.miou)?;
        for r in rows.iter() {
            push(Some(r.spec.kind.column_name().to_string()), r.spec.severity, r.report.miou)?;
        }
    }
    Ok((grid, records, all))
}

/// Options shared by the stage commands.
#[derive(Clone, Debug, Default)]
pub struct CommandOptions {
    pub force: bool,
}

fn prepare(cfg: &RunConfig, need_labeled: bool) -> Result<RunData> {
    cfg.validate()?;
    cfg.validate_paths(need_labeled)?;
    Ok(RunData::new(&cfg.data))
}

/// Trains the configured SP scheme on source train; reports source val.
pub fn cmd_sp_train(cfg: &RunConfig, opts: &CommandOptions) -> Result<StageRun> {
    let data = prepare(cfg, false)?;
    let mut ws = Workspace::open(&cfg.out, opts.force)?;
    sp_stage(&mut ws, cfg, &data)
}

/// Default UDA start: the SP checkpoint of the configured scheme.
pub fn default_uda_start(cfg: &RunConfig) -> Result<PathBuf> {
    let scheme = cfg.sp.to_scheme()?;
    Ok(checkpoint_path(&cfg.out, &format!("sp-{}", arm_name(&scheme.name()))))
}

/// Default SA start: the UDA checkpoint that follows the default UDA start.
pub fn default_sa_start(cfg: &RunConfig) -> Result<PathBuf> {
    let scheme = cfg.sp.to_scheme()?;
    let mut arm = arm_name(&scheme.name());
    let during = cfg.uda.sp_during_uda.to_scheme()?;
    if !during.is_none() {
        arm = format!("{arm}+during-{}", arm_name(&during.name()));
    }
    Ok(checkpoint_path(&cfg.out, &format!("uda-{arm}")))
}

/// Adapts `start` (default: [`default_uda_start`]) to the target domain.
pub fn cmd_uda(cfg: &RunConfig, start: Option<&Path>, opts: &CommandOptions) -> Result<StageRun> {
    let path = match start {
        Some(p) => p.to_path_buf(),
        None => default_uda_start(cfg)?,
    };
    let ckpt = load_start(&path, cfg)?;
    let data = prepare(cfg, false)?;
    let mut ws = Workspace::open(&cfg.out, opts.force)?;
    uda_stage(&mut ws, cfg, &data, &path, &ckpt)
}

/// Finetunes each start on labeled target subsets. Several starts are
/// compared on shared subsets.
pub fn cmd_sa(cfg: &RunConfig, starts: &[PathBuf], opts: &CommandOptions) -> Result<SaStage> {
    let paths = if starts.is_empty() { vec![default_sa_start(cfg)?] } else { starts.to_vec() };
    let mut loaded = Vec::new();
    if cfg.sa.enabled {
        if cfg.data.target_labeled.is_none() {
            return Err(no_labeled_target());
        }
        for p in &paths {
            let ckpt = load_start(p, cfg)?;
            let name = p.file_stem().map(|s| arm_name(&s.to_string_lossy())).unwrap_or_default();
            loaded.push((name, p.clone(), ckpt));
        }
    }
    let data = prepare(cfg, cfg.sa.enabled)?;
    let mut ws = Workspace::open(&cfg.out, opts.force)?;
    sa_stage(&mut ws, cfg, &data, &loaded)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Clean,
    Robustness,
}

#[derive(Clone, Debug)]
pub struct EvaluateOutput {
    pub reports: Vec<(String, StageReport)>,
    pub grid: String,
    pub robustness: Option<Vec<Vec<RobustnessRow>>>,
    pub report_paths: Vec<PathBuf>,
}

/// Evaluates checkpoints on target val and renders a contribution or a
/// robustness grid.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], mode: EvalMode) -> Result<EvaluateOutput> {
    if checkpoints.is_empty() {
        return Err(Error::Config("evaluate needs at least one --checkpoint".into()));
    }
    let mut models = Vec::new();
    for p in checkpoints {
        let ckpt = load_start(p, cfg)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        models.push((name, ckpt));
    }
    let data = prepare(cfg, false)?;
    let mut ws = Workspace::open(&cfg.out, false)?;
    let t = Instant::now();
    let setup = EvalSetup::new(cfg, data.source_train()?.class_names())?;
    let mut reports = Vec::new();
    for (name, ckpt) in &models {
        reports.push((name.clone(), evaluate(cfg, ckpt, data.target_val()?, &setup)?));
    }
    let (stage, grid, records, robustness) = match mode {
        EvalMode::Clean => {
            let rows: Vec<(&str, &StageReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
            let mut records = String::new();
            for (n, r) in &reports {
                records.push_str(&stage_records(r, n)?);
            }
            ("evaluate", contribution_grid(&rows), records, None)
        }
        EvalMode::Robustness => {
            let triples: Vec<(String, StageReport, SegmenterCheckpoint)> = reports
                .iter()
                .zip(&models)
                .map(|((n, r), (_, c))| (n.clone(), r.clone(), c.clone()))
                .collect();
            let (grid, records, rows) = robustness_section(cfg, &data, &triples)?;
            ("robustness", grid, records, Some(rows))
        }
    };
    let report_paths = ws.write_report(stage, &records, &grid)?;
    let mut extra: Vec<String> = checkpoints.iter().map(|p| format!("--checkpoint {}", p.display())).collect();
    if mode == EvalMode::Robustness {
        extra.push("--robustness".into());
    }
    let mut hashes = Vec::new();
    for p in checkpoints {
        hashes.push(file_hash(p)?);
    }
    let command = ws.command("evaluate", cfg, &extra)?;
    ws.ledger.append(LedgerEntry {
        stage: stage.into(),
        arm: reports.iter().map(|r| r.0.as_str()).collect::<Vec<_>>().join(","),
        status: EntryStatus::Completed,
        config_hash: config_hash(&json!({ "stage": stage, "checkpoints": hashes, "eval": cfg.eval, "seed": cfg.seeds.eval })),
        seed: cfg.seeds.eval,
        checkpoint: None,
        reports: report_paths.clone(),
        wall_clock_secs: seconds(t),
        command,
        note: None,
    })?;
    Ok(EvaluateOutput {
        reports,
        grid,
        robustness,
        report_paths,
    })
}

/// Outcome of a full pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineSummary {
    /// Source-only model trained without SP.
    pub baseline: StageRun,
    /// UDA from the baseline.
    pub uda: StageRun,
    /// Source model trained with the configured scheme; `None` when the
    /// scheme is `none`.
    pub sp: Option<StageRun>,
    /// UDA from the SP model.
    pub sp_uda: StageRun,
    pub sa: SaStage,
    /// Contribution-grid rows, all on target val: baseline, uda, sp+uda
    /// and, when SA ran, sp+uda+sa.
    pub rows: Vec<(String, StageReport)>,
    pub contribution_grid: String,
    pub robustness_grid: Option<String>,
    pub robustness: Option<Vec<Vec<RobustnessRow>>>,
}

impl PipelineSummary {
    pub fn row(&self, name: &str) -> Option<&StageReport> {
        self.rows.iter().find(|r| r.0 == name).map(|r| &r.1)
    }
}

/// Runs SP, UDA and SA for the baseline arm (`none`) and the configured
/// scheme, then renders the stage-contribution grid.
pub fn cmd_pipeline(cfg: &RunConfig, opts: &CommandOptions) -> Result<PipelineSummary> {
    let data = prepare(cfg, cfg.sa.enabled)?;
    if cfg.sa.enabled && cfg.data.target_labeled.is_none() {
        return Err(no_labeled_target());
    }
    let mut ws = Workspace::open(&cfg.out, opts.force)?;
    let scheme = cfg.sp.to_scheme()?;

    let mut base_cfg = cfg.clone();
    base_cfg.sp = cfg.sp.clone().with_scheme("none");
    base_cfg.uda.sp_during_uda = cfg.uda.sp_during_uda.clone().with_scheme("none");
    let baseline = sp_stage(&mut ws, &base_cfg, &data)?;
    let uda = uda_stage(&mut ws, &base_cfg, &data, &baseline.checkpoint_path, &baseline.checkpoint)?;
    let (sp, sp_uda) = if scheme.is_none() {
        (None, uda.clone())
    } else {
        let sp = sp_stage(&mut ws, cfg, &data)?;
        let sp_uda = uda_stage(&mut ws, cfg, &data, &sp.checkpoint_path, &sp.checkpoint)?;
        (Some(sp), sp_uda)
    };

    let mut starts = vec![(sp_uda.arm.clone(), sp_uda.checkpoint_path.clone(), sp_uda.checkpoint.clone())];
    if sp.is_some() {
        starts.push((uda.arm.clone(), uda.checkpoint_path.clone(), uda.checkpoint.clone()));
    }
    let sa = if cfg.sa.enabled { sa_stage(&mut ws, cfg, &data, &starts)? } else { sa_stage(&mut ws, cfg, &data, &[])? };

    let setup = EvalSetup::new(cfg, data.source_train()?.class_names())?;
    let baseline_target = evaluate(cfg, &baseline.checkpoint, data.target_val()?, &setup)?;
    let mut rows = vec![
        ("baseline".to_string(), baseline_target),
        ("uda".to_string(), uda.report.clone()),
        ("sp+uda".to_string(), sp_uda.report.clone()),
    ];
    if let SaStage::Ran { arms, .. } = &sa {
        rows.push(("sp+uda+sa".to_string(), sa_row_report(cfg, &data, &arms[0])?));
    }
    let t = Instant::now();
    let grid_rows: Vec<(&str, &StageReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let grid = contribution_grid(&grid_rows);
    let mut records = String::new();
    for (n, r) in &rows {
        records.push_str(&stage_records(r, n)?);
    }
    let mut reports = ws.write_report("contribution", &records, &grid)?;

    let (robustness_grid, robustness) = if cfg.eval.robustness {
        let models = vec![
            ("baseline".to_string(), rows[0].1.clone(), baseline.checkpoint.clone()),
            ("uda".to_string(), uda.report.clone(), uda.checkpoint.clone()),
            ("sp+uda".to_string(), sp_uda.report.clone(), sp_uda.checkpoint.clone()),
        ];
        let (g, rec, all) = robustness_section(cfg, &data, &models)?;
        reports.extend(ws.write_report("robustness", &rec, &g)?);
        (Some(g), Some(all))
    } else {
        (None, None)
    };
    let command = ws.command("pipeline", cfg, &[])?;
    ws.ledger.append(LedgerEntry {
        stage: "report".into(),
        arm: sp_uda.arm.clone(),
        status: EntryStatus::Completed,
        config_hash: config_hash(&json!({
            "stage": "report",
            "rows": rows.iter().map(|(n, r)| json!({ "name": n, "miou": r.miou })).collect::<Vec<_>>(),
            "eval": cfg.eval,
        })),
        seed: cfg.seeds.eval,
        checkpoint: None,
        reports,
        wall_clock_secs: seconds(t),
        command,
        note: None,
    })?;
    Ok(PipelineSummary {
        baseline,
        uda,
        sp,
        sp_uda,
        sa,
        rows,
        contribution_grid: grid,
        robustness_grid,
        robustness,
    })
}

/// In-memory synthetic benchmark splits.
#[derive(Clone, Debug)]
pub struct SynthSplits {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    pub target_train: DomainDataset,
    pub target_val: DomainDataset,
    pub target_sa_train: DomainDataset,
}

fn scene_seed(data_seed: u64, tag: u64, i: usize) -> u64 {
    data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 40) ^ i as u64
}

fn synth_split(cfg: &RunConfig, tag: u64, prefix: &str, n: usize, target: bool, split: Split) -> Result<DomainDataset> {
    let classes = ClassSpec::default_classes();
    let size = cfg.data.synth.size;
    let samples = (0..n)
        .map(|i| {
            let seed = scene_seed(cfg.seeds.data, tag, i);
            let mut clean = generate_scene(seed, (size, size), &classes)?;
            clean.id = format!("{prefix}_{i:05}");
            if target {
                domainize(&clean, &cfg.data.synth.target, seed ^ 0xD0_0000_0000)
            } else {
                Ok(clean)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DomainDataset::with_class_names(samples, classes.into_iter().map(|c| c.name).collect(), split)
}

/// Generates the five synthetic splits from `seeds.data`.
pub fn synth_splits(cfg: &RunConfig) -> Result<SynthSplits> {
    let s = &cfg.data.synth;
    Ok(SynthSplits {
        source_train: synth_split(cfg, 1, "src_train", s.source_train, false, Split::Train)?,
        source_val: synth_split(cfg, 2, "src_val", s.source_val, false, Split::Val)?,
        target_train: synth_split(cfg, 3, "tgt_train", s.target_train, true, Split::Train)?,
        target_val: synth_split(cfg, 4, "tgt_val", s.target_val, true, Split::Val)?,
        target_sa_train: synth_split(cfg, 5, "tgt_sa", s.target_sa_train, true, Split::Train)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplitInfo {
    pub path: PathBuf,
    pub images: usize,
    pub labeled: bool,
}

/// Writes the synthetic splits under `root` at the paths named in
/// `cfg.data`. A non-empty `root` is refused unless `force`, which replaces
/// only the split directories.
pub fn cmd_synth_gen(cfg: &RunConfig, root: &Path, force: bool) -> Result<Vec<SynthSplitInfo>> {
    cfg.validate()?;
    let non_empty = match fs::read_dir(root) {
        Ok(mut it) => it.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(root, e)),
    };
    if non_empty && !force {
        return Err(Error::Refused(format!(
            "{} is not empty; pass --force to regenerate the synthetic splits",
            root.display()
        )));
    }
    let d = DataConfig {
        root: root.to_path_buf(),
        ..cfg.data.clone()
    };
    let labeled_rel = d.target_labeled.clone().unwrap_or_else(|| "target/sa_train".into());
    let splits = synth_splits(cfg)?;
    let plan: [(&Path, &DomainDataset, DomainTag, bool); 5] = [
        (&d.source_train, &splits.source_train, DomainTag::Source, true),
        (&d.source_val, &splits.source_val, DomainTag::Source, true),
        (&d.target_train, &splits.target_train, DomainTag::Target, cfg.data.synth.label_target_train),
        (&d.target_val, &splits.target_val, DomainTag::Target, true),
        (&labeled_rel, &splits.target_sa_train, DomainTag::Target, true),
    ];
    let mut out = Vec::new();
    for (rel, ds, tag, masks) in plan {
        let path = d.resolve(rel);
        if path.exists() {
            fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
        write_directory_dataset(&path, ds, tag, &MaskFormat::Indexed, masks)?;
        out.push(SynthSplitInfo {
            path,
            images: ds.len(),
            labeled: masks,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
