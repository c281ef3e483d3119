//! Parameter resolution: flags override a `--params` file, which overrides
//! a `--config` file, which overrides built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use droplex::detection::{DetectionParams, TriggerParams};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file with defaults for any of these flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// JSON file with detection/trigger parameters.
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    #[arg(long, global = true)]
    pub session: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Detection threshold in standard deviations.
    #[arg(long, global = true)]
    pub z: Option<f64>,
    #[arg(long = "min-size", global = true)]
    pub min_size: Option<usize>,
    #[arg(long = "aspect-max", global = true)]
    pub aspect_max: Option<usize>,
    /// Deposit trigger sensitivity.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// TPS smoothing.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Compensation stability term.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long = "frames-per-region", global = true)]
    pub frames_per_region: Option<usize>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Default root for session files.
    #[arg(long = "data-dir", env = "DROPLEX_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
}

/// Same fields as the flags, as read from `--config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub params: Option<PathBuf>,
    pub session: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub z: Option<f64>,
    pub min_size: Option<usize>,
    pub aspect_max: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub frames_per_region: Option<usize>,
    pub folds: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub z: Option<f64>,
    pub min_size: Option<usize>,
    pub aspect_diff_max: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub session: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub detection: DetectionParams,
    pub trigger: TriggerParams,
    pub lambda: f64,
    pub epsilon: f64,
    pub frames_per_region: usize,
    pub folds: usize,
    pub data_dir: Option<PathBuf>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(path, e))
}

impl Settings {
    pub fn resolve(flags: &Common) -> Result<Self, CliError> {
        let cfg: ConfigFile = match &flags.config {
            Some(p) => read_json(p)?,
            None => ConfigFile::default(),
        };
        let params_path = flags.params.clone().or(cfg.params.clone());
        let params: ParamsFile = match &params_path {
            Some(p) => read_json(p)?,
            None => ParamsFile::default(),
        };
        let dd = DetectionParams::default();
        let detection = DetectionParams {
            z: flags.z.or(params.z).or(cfg.z).unwrap_or(dd.z),
            min_size: flags.min_size.or(params.min_size).or(cfg.min_size).unwrap_or(dd.min_size),
            aspect_diff_max: flags
                .aspect_max
                .or(params.aspect_diff_max)
                .or(cfg.aspect_max)
                .unwrap_or(dd.aspect_diff_max),
        };
        detection.validate()?;
        let trigger = TriggerParams {
            alpha: flags.alpha.or(params.alpha).or(cfg.alpha).unwrap_or(TriggerParams::default().alpha),
        };
        Ok(Self {
            session: flags.session.clone().or(cfg.session),
            seed: flags.seed.or(cfg.seed),
            out: flags.out.clone().or(cfg.out),
            detection,
            trigger,
            lambda: flags.lambda.or(cfg.lambda).unwrap_or(droplex::calibration::DEFAULT_LAMBDA),
            epsilon: flags.epsilon.or(cfg.epsilon).unwrap_or(droplex::calibration::DEFAULT_EPSILON),
            frames_per_region: flags.frames_per_region.or(cfg.frames_per_region).unwrap_or(50),
            folds: flags.folds.or(cfg.folds).unwrap_or(5),
            data_dir: flags.data_dir.clone().or(cfg.data_dir),
        })
    }

    /// Relative paths that do not exist are looked up under the data dir.
    pub fn locate(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn session_path(&self) -> Result<PathBuf, CliError> {
        let p = self
            .session
            .as_ref()
            .ok_or_else(|| CliError::usage("--session is required"))?;
        Ok(self.locate(p))
    }

    pub fn out_path(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))
    }

    /// Directory of sessions: explicit argument, else the data dir.
    pub fn sessions_dir(&self, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
        match (explicit, &self.data_dir) {
            (Some(p), _) => Ok(self.locate(p)),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(CliError::usage("no session directory: pass --sessions or set DROPLEX_DATA_DIR")),
        }
    }
}
