use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::SaConfig;
use crate::data::SynthDomainParams;
use crate::error::{Error, Result};
use crate::eval::{AbsentClassPolicy, ClassMapping, CorruptionKind};
use crate::segmenter::{AugmentConfig, PhotometricConfig, PolySchedule, SegmenterConfig, TrainConfig};
use crate::source_prep::SpConfig;
use crate::uda::UdaConfig;

/// Per-stage seeds. `--seed` sets all of them at once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub data: u64,
    pub sp: u64,
    pub uda: u64,
    pub sa: u64,
    pub eval: u64,
}

impl SeedConfig {
    pub fn uniform(seed: u64) -> Self {
        Self {
            data: seed,
            sp: seed,
            uda: seed,
            sa: seed,
            eval: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_sa_train: usize,
    /// Write masks for the target train split too (normally unlabeled).
    pub label_target_train: bool,
    pub target: SynthDomainParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            source_train: 400,
            source_val: 100,
            target_train: 400,
            target_val: 100,
            target_sa_train: 100,
            label_target_train: false,
            target: SynthDomainParams::target_default(),
        }
    }
}

/// Dataset locations. Split paths are relative to `root` unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub source_train: PathBuf,
    pub source_val: PathBuf,
    pub target_train: PathBuf,
    pub target_val: PathBuf,
    /// Labeled target split for alignment; unset for targets without one.
    pub target_labeled: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            source_train: "source/train".into(),
            source_val: "source/val".into(),
            target_train: "target/train".into(),
            target_val: "target/val".into(),
            target_labeled: Some("target/sa_train".into()),
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `identity`, a built-in table name or the path of a mapping table file.
    pub mapping: String,
    /// Evaluation class names for a table file.
    pub eval_class_names: Option<Vec<String>>,
    /// Classes averaged into mIoU; all evaluation classes when unset.
    pub selected_classes: Option<Vec<usize>>,
    pub absent_class_policy: AbsentClassPolicy,
    /// Also run the corruption battery in `pipeline`.
    pub robustness: bool,
    pub battery_kinds: Vec<CorruptionKind>,
    pub battery_severity: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mapping: "identity".into(),
            eval_class_names: None,
            selected_classes: None,
            absent_class_policy: AbsentClassPolicy::Exclude,
            robustness: false,
            battery_kinds: CorruptionKind::ALL.to_vec(),
            battery_severity: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn mapping(&self, source_class_names: &[String]) -> Result<ClassMapping> {
        let mapping = match self.mapping.as_str() {
            "identity" => ClassMapping::identity(source_class_names),
            "cs_to_mfnt" | "cs_to_ci" => ClassMapping::builtin(&self.mapping)?,
            path => {
                let names = self.eval_class_names.clone().ok_or_else(|| {
                    Error::Config("eval.eval_class_names is required with a mapping table file".into())
                })?;
                ClassMapping::load_table(Path::new(path), names)?
            }
        };
        if mapping.num_source_classes() != source_class_names.len() {
            return Err(Error::Config(format!(
                "mapping covers {} source classes, the source label space has {}",
                mapping.num_source_classes(),
                source_class_names.len()
            )));
        }
        Ok(mapping)
    }

    pub fn selected(&self, mapping: &ClassMapping) -> Vec<usize> {
        match (&self.selected_classes, self.mapping.as_str()) {
            (Some(s), _) => s.clone(),
            (None, "cs_to_mfnt") => ClassMapping::mfnt_selected_classes(),
            (None, _) => (0..mapping.num_eval_classes()).collect(),
        }
    }
}

/// Everything a run needs. Loaded from TOML; command-line `--a.b=v`
/// overrides are applied before deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seeds: SeedConfig,
    pub data: DataConfig,
    pub model: SegmenterConfig,
    /// Source training.
    pub train: TrainConfig,
    pub sp: SpConfig,
    pub uda: UdaConfig,
    pub sa: SaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: "runs/default".into(),
            seeds: SeedConfig::default(),
            data: DataConfig::default(),
            model: SegmenterConfig::default(),
            train: TrainConfig::default(),
            sp: SpConfig::default(),
            uda: UdaConfig::default(),
            sa: SaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = SeedConfig::uniform(seed);
        self
    }

    /// Checks ranges and cross-field consistency; paths are checked by
    /// [`RunConfig::validate_paths`].
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sp.to_scheme()?.validate(Some(self.model.num_stages))?;
        self.uda.validate()?;
        self.sa.validate()?;
        self.data.synth.target.validate()?;
        if self.data.synth.size < 32 {
            return Err(Error::Config("synth.size must be at least 32".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.battery_severity) {
            return Err(Error::Config("eval.battery_severity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every dataset directory the run reads must exist.
    pub fn validate_paths(&self, need_labeled_target: bool) -> Result<()> {
        let d = &self.data;
        let mut paths = vec![&d.source_train, &d.source_val, &d.target_train, &d.target_val];
        if need_labeled_target {
            if let Some(p) = &d.target_labeled {
                paths.push(p);
            }
        }
        for p in paths {
            let full = d.resolve(p);
            if !full.is_dir() {
                return Err(Error::NotFound(full));
            }
        }
        Ok(())
    }

    /// Desk-scale benchmark settings: 64 px shapes, a four-stage narrow
    /// segmenter and iteration counts that fit a few CPU minutes per seed.
    pub fn synthetic_benchmark() -> Self {
        let schedule = |base_lr: f64, warmup_iters: usize| PolySchedule {
            base_lr,
            warmup_iters,
            power: 1.0,
        };
        let augment = AugmentConfig {
            hflip: true,
            vflip: true,
            photometric: Some(PhotometricConfig::default()),
        };
        Self {
            model: SegmenterConfig {
                num_stages: 4,
                stage_channels: vec![8, 16, 32, 64],
                stage_downsample: vec![2, 2, 2, 2],
                blocks_per_stage: vec![1, 1, 1, 1],
                decoder_dim: 16,
                num_classes: 3,
                mlp_ratio: 2,
            },
            train: TrainConfig {
                iterations: 1000,
                batch_size: 8,
                crop: None,
                augment: augment.clone(),
                schedule: schedule(3e-3, 30),
                optimizer: Default::default(),
            },
            sp: SpConfig::default().with_scheme("blur"),
            uda: UdaConfig {
                iterations: 600,
                schedule: schedule(3e-4, 30),
                source_augment: augment.clone(),
                target_photometric: Some(PhotometricConfig::default()),
                ..UdaConfig::default()
            },
            sa: SaConfig {
                iterations: 200,
                warmup_iters: 20,
                rounds: 4,
                subset_sizes: vec![20],
                augment: AugmentConfig {
                    hflip: true,
                    vflip: true,
                    photometric: None,
                },
                ..SaConfig::default()
            },
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn dot_path_overrides() {
        let ov = vec![
            ("sp.scheme".to_string(), "blur".to_string()),
            ("uda.pseudo_threshold".to_string(), "0.9".to_string()),
            ("sa.subset_sizes".to_string(), "[20, 50]".to_string()),
            ("sa.enabled".to_string(), "false".to_string()),
            ("seeds.sp".to_string(), "7".to_string()),
        ];
        let cfg = RunConfig::from_toml_str("[sp]\nscheme = \"none\"\n", &ov).unwrap();
        assert_eq!(cfg.sp.scheme, "blur");
        assert_eq!(cfg.uda.pseudo_threshold, 0.9);
        assert_eq!(cfg.sa.subset_sizes, vec![20, 50]);
        assert!(!cfg.sa.enabled);
        assert_eq!(cfg.seeds.sp, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml_str("[sp]\nschem = \"blur\"\n", &[]), Err(Error::Config(_))));
        let bad = vec![("sp.scheme".to_string(), "sharpen".to_string())];
        assert!(matches!(RunConfig::from_toml_str("", &bad), Err(Error::Config(_))));
        let bad = vec![("uda.ema_momentum".to_string(), "1.5".to_string())];
        assert!(matches!(RunConfig::from_toml_str("", &bad), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::synthetic_benchmark().with_seed(3);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_synthetic_config_is_the_benchmark_preset() {
        let shipped = RunConfig::from_toml_str(include_str!("../../../../configs/synthetic.toml"), &[]).unwrap();
        let mut preset = RunConfig::synthetic_benchmark();
        preset.out = "runs/synthetic".into();
        preset.data.root = "data/synthetic".into();
        assert_eq!(shipped, preset);
    }

    #[test]
    fn missing_dataset_directory_is_not_found() {
        let mut cfg = RunConfig::default();
        cfg.data.root = "/nonexistent/segadapt".into();
        assert!(matches!(cfg.validate_paths(true), Err(Error::NotFound(_))));
    }

    #[test]
    fn mfnt_mapping_selects_three_classes() {
        let eval = EvalConfig {
            mapping: "cs_to_mfnt".into(),
            ..Default::default()
        };
        let names: Vec<String> = crate::eval::CITYSCAPES_CLASSES.iter().map(|s| s.to_string()).collect();
        let m = eval.mapping(&names).unwrap();
        assert_eq!(eval.selected(&m), vec![1, 2, 3]);
        let short: Vec<String> = names[..3].to_vec();
        assert!(eval.mapping(&short).is_err());
    }
}
