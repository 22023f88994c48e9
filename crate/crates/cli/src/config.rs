use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vagco::baselines::{MfaNetConfig, MfaTrainConfig};
use vagco::ising::ProblemKind;
use vagco::policy::NetConfig;
use vagco::ppo::{AnnealSchedule, PpoConfig};
use vagco::theory::TheoryConfig;
use vagco::{Error, Result};

pub const RUN_FORMAT: &str = "vagco-run/1";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMethod {
    #[default]
    Ppo,
    /// Mean-field network trained with REINFORCE.
    Mfa,
    /// Mean-field network trained on the closed-form expected energy.
    Egn,
}

/// Everything a run needs. Missing keys take their defaults and the completed
/// config is written back to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    pub kind: ProblemKind,
    pub penalty_a: f64,
    pub penalty_b: f64,
    /// Training dataset directory (written by `generate`); relative paths resolve
    /// against the config file.
    pub dataset: Option<PathBuf>,
    /// Validation dataset and its oracle directory.
    pub val_dataset: Option<PathBuf>,
    pub val_oracle: Option<PathBuf>,
    pub method: TrainMethod,
    pub seed: u64,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub schedule: AnnealSchedule,
    pub mfa_net: MfaNetConfig,
    pub mfa: MfaTrainConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format: RUN_FORMAT.into(),
            kind: ProblemKind::Mvc,
            penalty_a: 1.0,
            penalty_b: 1.1,
            dataset: None,
            val_dataset: None,
            val_oracle: None,
            method: TrainMethod::Ppo,
            seed: 0,
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            schedule: AnnealSchedule::default(),
            mfa_net: MfaNetConfig::default(),
            mfa: MfaTrainConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Input(format!("config {}: {e}", path.display())))?;
        if cfg.format != RUN_FORMAT {
            return Err(Error::Input(format!("config format {:?}, expected {RUN_FORMAT:?}", cfg.format)));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.val_dataset, &mut cfg.val_oracle].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.ppo.validate()?;
        self.schedule.validate()?;
        if self.val_dataset.is_some() != self.val_oracle.is_some() {
            return Err(Error::Input("val_dataset and val_oracle must be given together".into()));
        }
        Ok(())
    }

    pub fn echo(&self, out: &Path) -> Result<()> {
        std::fs::write(out.join(CONFIG_ECHO), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
