use std::path::Path;

use serde::{Deserialize, Serialize};
use spikeflow::dataset::SyntheticSuite;
use spikeflow::events::WindowSpec;
use spikeflow::model::ModelConfig;
use spikeflow::training::TrainConfig;

use crate::CliError;

/// Everything a subcommand reads, resolved from defaults, the config file and
/// `--set` overrides (in that order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: WindowSpec,
    pub synth: SyntheticSuite,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            // recordings written by `synth` start at t = 0
            window: WindowSpec {
                t0_us: Some(0),
                ..WindowSpec::default()
            },
            synth: SyntheticSuite::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        Ok(config)
    }

    /// Cross-section consistency on top of each section's own checks.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if self.window.window_frames != m.num_frames {
            return Err(CliError::Usage(format!(
                "window.window_frames = {} but model.num_frames = {}",
                self.window.window_frames, m.num_frames
            )));
        }
        if self.window.polarity_mode.channels() != m.input_channels {
            return Err(CliError::Usage(format!(
                "window.polarity_mode gives {} channels but model.input_channels = {}",
                self.window.polarity_mode.channels(),
                m.input_channels
            )));
        }
        if self.synth.num_frames != m.num_frames || self.synth.dims != m.sensor_dims {
            return Err(CliError::Usage(
                "synth.num_frames and synth.dims must match the model".into(),
            ));
        }
        if self.synth.polarity_mode != self.window.polarity_mode
            || self.synth.frame_duration_us != self.window.frame_duration_us
        {
            return Err(CliError::Usage(
                "synth and window disagree on polarity mode or frame duration".into(),
            ));
        }
        Ok(())
    }

    /// The resolved config as TOML, each line prefixed with `# `.
    pub fn echo(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        text.lines().map(|l| format!("# {l}\n")).collect()
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal, falling
/// back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{k} in {path} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
