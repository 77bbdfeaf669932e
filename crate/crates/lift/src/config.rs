//! Plain-text `key = value` run configuration with command-line overrides.
//! Unknown keys are rejected; every run writes its resolved configuration
//! alongside its outputs.

use crate::error::{LiftError, Result};
use crate::refiner::StateInput;
use crate::training::{TrainConfig, TrainMode};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Full operator-facing configuration for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Warm start for training (e.g. a pretrained backbone to freeze).
    pub init_checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub strict_boundaries: bool,
    pub per_channel_backbone: bool,
    pub state_input: StateInput,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            cache: None,
            checkpoint: None,
            init_checkpoint: None,
            out: PathBuf::from("out"),
            threads: None,
            strict_boundaries: false,
            per_channel_backbone: false,
            state_input: StateInput::Normalized,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file (empty lines and `#` comments allowed).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LiftError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LiftError::Parse {
                row: i + 1,
                col: 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| {
                LiftError::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
        }
        Ok(config)
    }

    /// Applies one `key=value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<Self> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "cache" => self.cache = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = Some(parse(key, value)?),
            "strict_boundaries" => self.strict_boundaries = parse_bool(key, value)?,
            "per_channel_backbone" => self.per_channel_backbone = parse_bool(key, value)?,
            "state_input" => {
                self.state_input = match value {
                    "raw" => StateInput::Raw,
                    "normalized" => StateInput::Normalized,
                    other => {
                        return Err(LiftError::InvalidInput(format!(
                            "state_input must be raw or normalized, got {other:?}"
                        )))
                    }
                }
            }
            "lr" => self.train.lr = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "mode" => self.train.mode = TrainMode::parse(value)?,
            "pretrain_epochs" => self.train.pretrain_epochs = parse(key, value)?,
            "k" => self.train.k = parse(key, value)?,
            "states" => self.train.states = parse(key, value)?,
            "lookback" => self.train.lookback = parse(key, value)?,
            "horizon" => self.train.horizon = parse(key, value)?,
            "stride" => self.train.stride = parse(key, value)?,
            "grad_through_shift" => self.train.grad_through_shift = parse_bool(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "lr_grid" => {
                let grid: Result<Vec<f64>> = value
                    .split(',')
                    .map(|v| parse::<f64>("lr_grid", v.trim()))
                    .collect();
                self.train.lr_grid = Some(grid?);
            }
            other => {
                return Err(LiftError::InvalidInput(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(self.clone())
    }

    /// Canonical rendering of every key; written next to run outputs so a
    /// run can be reproduced exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|v| v.display().to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "cache = {}", path(&self.cache));
        let _ = writeln!(s, "checkpoint = {}", path(&self.checkpoint));
        let _ = writeln!(s, "dataset = {}", path(&self.dataset));
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "grad_through_shift = {}", self.train.grad_through_shift);
        let _ = writeln!(s, "horizon = {}", self.train.horizon);
        let _ = writeln!(s, "init_checkpoint = {}", path(&self.init_checkpoint));
        let _ = writeln!(s, "k = {}", self.train.k);
        let _ = writeln!(s, "lookback = {}", self.train.lookback);
        let _ = writeln!(s, "lr = {}", self.train.lr);
        let _ = writeln!(
            s,
            "lr_grid = {}",
            self.train
                .lr_grid
                .as_ref()
                .map(|g| g
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","))
                .unwrap_or_default()
        );
        let _ = writeln!(s, "mode = {}", self.train.mode.as_str());
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "patience = {}", self.train.patience);
        let _ = writeln!(s, "per_channel_backbone = {}", self.per_channel_backbone);
        let _ = writeln!(s, "pretrain_epochs = {}", self.train.pretrain_epochs);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(
            s,
            "state_input = {}",
            match self.state_input {
                StateInput::Raw => "raw",
                StateInput::Normalized => "normalized",
            }
        );
        let _ = writeln!(s, "states = {}", self.train.states);
        let _ = writeln!(s, "strict_boundaries = {}", self.strict_boundaries);
        let _ = writeln!(s, "stride = {}", self.train.stride);
        let _ = writeln!(
            s,
            "threads = {}",
            self.threads.map(|t| t.to_string()).unwrap_or_default()
        );
        s
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LiftError::InvalidInput(format!("cannot parse {key} value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(LiftError::InvalidInput(format!(
            "{key} expects true/false, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn parses_file_and_rejects_unknown_keys() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nlr = 0.01\nk = 4\nmode = frozen-backbone").unwrap();
        let cfg = RunConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.mode, TrainMode::FrozenBackbone);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "learning_rate = 0.01").unwrap();
        assert!(RunConfig::from_file(bad.path()).is_err());
    }

    #[test]
    fn render_round_trips_through_set() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.005").unwrap();
        cfg.set("lr_grid", "0.01, 0.001").unwrap();
        cfg.set("dataset", "data.csv").unwrap();
        let rendered = cfg.render();
        let mut parsed = RunConfig::default();
        for line in rendered.lines() {
            let (k, v) = line.split_once('=').unwrap();
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                continue;
            }
            parsed.set(k, v).unwrap();
        }
        assert_eq!(cfg, parsed);
    }
}
