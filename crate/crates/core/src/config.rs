//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{CfgForm, GuidanceConfig, GuidanceSpace, ScheduleConfig};
use crate::error::{Error, Result};
use crate::inside_outside::ConstraintMode;
use crate::model::DenoiserConfig;
use crate::pipeline::EditOptions;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub steps: usize,
    pub w_g: f64,
    pub mode: ConstraintMode,
    pub reweight_scale: f64,
    pub cfg_form: CfgForm,
    pub guidance_space: GuidanceSpace,
    pub blend: bool,
    pub skip_unguided_uncond: bool,
    pub renormalize: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            w_g: 3.5,
            mode: ConstraintMode::Hard,
            reweight_scale: 1.0,
            cfg_form: CfgForm::CondAnchored,
            guidance_space: GuidanceSpace::Latent,
            blend: true,
            skip_unguided_uncond: false,
            renormalize: false,
        }
    }
}

impl EditConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            w_g: self.w_g,
            reweight_scale: self.reweight_scale,
            form: self.cfg_form,
            space: self.guidance_space,
        }
    }

    pub fn options(&self) -> EditOptions {
        EditOptions {
            blend: self.blend,
            skip_unguided_uncond: self.skip_unguided_uncond,
            renormalize: self.renormalize,
            diagnostics: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub edit: EditConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fully materialised configuration, suitable for re-running.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.t_train != self.schedule.t_train {
            return Err(Error::Parameter(format!(
                "model.t_train {} differs from schedule.t_train {}",
                self.model.t_train, self.schedule.t_train
            )));
        }
        if self.edit.steps == 0 || self.edit.steps > self.schedule.t_train {
            return Err(Error::Parameter(format!(
                "edit.steps must be in [1, {}], got {}",
                self.schedule.t_train, self.edit.steps
            )));
        }
        self.edit.guidance().validate()?;
        self.train.validate()
    }
}
