//! Source Preparation: regularizing transforms used while training the
//! source model. None of them adds trainable parameters.

mod blur;
mod mixstyle;
mod mixup;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blur::{blur_with_kernel, gaussian_kernel, random_blur, sample_blur, sigma_for_kernel, BlurConfig, SizeDistribution};
pub use mixstyle::{instance_stats, mix_statistics, mixstyle_apply, InstanceStats, MixPlan, MixStyleConfig, MixStyleHook};
pub use mixup::{mixup_batch, mixup_with, one_hot, MixupBatch, MixupConfig, MixupMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum SpScheme {
    None,
    MixStyle(MixStyleConfig),
    Mixup(MixupConfig),
    Blur(BlurConfig),
    Stacked { parts: Vec<SpScheme> },
}

impl SpScheme {
    pub fn name(&self) -> String {
        match self {
            SpScheme::None => "none".into(),
            SpScheme::MixStyle(_) => "mixstyle".into(),
            SpScheme::Mixup(_) => "mixup".into(),
            SpScheme::Blur(_) => "blur".into(),
            SpScheme::Stacked { parts } => {
                let names: Vec<String> = parts.iter().map(SpScheme::name).collect();
                format!("stacked[{}]", names.join("+"))
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, SpScheme::None)
    }

    pub fn validate(&self, num_stages: Option<usize>) -> Result<()> {
        match self {
            SpScheme::None => Ok(()),
            SpScheme::MixStyle(c) => c.validate(num_stages),
            SpScheme::Mixup(c) => c.validate(),
            SpScheme::Blur(c) => c.validate(),
            SpScheme::Stacked { parts } => {
                if parts.is_empty() {
                    return Err(Error::Config("stacked scheme needs at least one member".into()));
                }
                for p in parts {
                    if matches!(p, SpScheme::Stacked { .. }) {
                        return Err(Error::Config("stacked schemes cannot be nested".into()));
                    }
                    p.validate(num_stages)?;
                }
                Ok(())
            }
        }
    }
}

/// Input-side transform of a plan, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub enum InputTransform {
    Blur(BlurConfig),
    Mixup(MixupConfig),
}

/// What a scheme does to a training batch: input transforms, then
/// model-side style-mixing hooks.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpPlan {
    pub inputs: Vec<InputTransform>,
    pub mixstyle: Option<MixStyleConfig>,
}

impl SpPlan {
    pub fn is_identity(&self) -> bool {
        self.inputs.is_empty() && self.mixstyle.is_none()
    }

    pub fn blur(&self) -> Option<&BlurConfig> {
        self.inputs.iter().find_map(|t| match t {
            InputTransform::Blur(c) => Some(c),
            _ => None,
        })
    }

    pub fn mixup(&self) -> Option<&MixupConfig> {
        self.inputs.iter().find_map(|t| match t {
            InputTransform::Mixup(c) => Some(c),
            _ => None,
        })
    }

    /// Stage boundaries at which hooks are active.
    pub fn hook_stages(&self) -> Vec<usize> {
        self.mixstyle
            .as_ref()
            .map(|c| c.stage_indices.iter().copied().collect())
            .unwrap_or_default()
    }
}

/// Resolves a scheme into the transforms run on a training batch. Stacked
/// members run as blur → mixup on inputs; style mixing acts inside the model.
pub fn apply_sp_to_batch(scheme: &SpScheme) -> Result<SpPlan> {
    scheme.validate(None)?;
    let members: Vec<&SpScheme> = match scheme {
        SpScheme::Stacked { parts } => parts.iter().collect(),
        other => vec![other],
    };
    let mut plan = SpPlan::default();
    let mut blur = None;
    let mut mixup = None;
    for m in members {
        match m {
            SpScheme::None => {}
            SpScheme::Blur(c) => blur = Some(c.clone()),
            SpScheme::Mixup(c) => mixup = Some(c.clone()),
            SpScheme::MixStyle(c) => plan.mixstyle = Some(c.clone()),
            SpScheme::Stacked { .. } => unreachable!("nesting rejected by validate"),
        }
    }
    plan.inputs.extend(blur.map(InputTransform::Blur));
    plan.inputs.extend(mixup.map(InputTransform::Mixup));
    Ok(plan)
}

/// Config-file form: `scheme = "none" | "mixstyle" | "mixup" | "blur" |
/// "stacked"` plus one parameter table per scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpConfig {
    pub scheme: String,
    pub mixstyle: MixStyleConfig,
    pub mixup: MixupConfig,
    pub blur: BlurConfig,
    /// Members of a stacked scheme, by name.
    pub stacked: Vec<String>,
}

impl Default for SpConfig {
    fn default() -> Self {
        Self {
            scheme: "none".into(),
            mixstyle: MixStyleConfig::default(),
            mixup: MixupConfig::default(),
            blur: BlurConfig::default(),
            stacked: vec!["blur".into(), "mixup".into(), "mixstyle".into()],
        }
    }
}

impl SpConfig {
    fn single(&self, name: &str) -> Result<SpScheme> {
        Ok(match name {
            "none" => SpScheme::None,
            "mixstyle" => SpScheme::MixStyle(self.mixstyle.clone()),
            "mixup" => SpScheme::Mixup(self.mixup.clone()),
            "blur" => SpScheme::Blur(self.blur.clone()),
            "stacked" => return Err(Error::Config("stacked schemes cannot be nested".into())),
            other => {
                return Err(Error::Config(format!(
                    "unknown sp scheme `{other}` (expected none, mixstyle, mixup, blur or stacked)"
                )))
            }
        })
    }

    pub fn to_scheme(&self) -> Result<SpScheme> {
        let scheme = if self.scheme == "stacked" {
            SpScheme::Stacked {
                parts: self.stacked.iter().map(|n| self.single(n)).collect::<Result<_>>()?,
            }
        } else {
            self.single(&self.scheme)?
        };
        scheme.validate(None)?;
        Ok(scheme)
    }

    pub fn with_scheme(mut self, scheme: &str) -> Self {
        self.scheme = scheme.into();
        self
    }
}
