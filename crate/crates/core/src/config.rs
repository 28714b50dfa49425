//! One TOML document describing a whole run, with `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::generation::SearchConfig;
use crate::model::ModelConfig;
use crate::reasoning::ReasoningConfig;
use crate::training::TrainingConfig;

/// Environment variable that relocates every output path.
pub const OUTPUT_ROOT_ENV: &str = "AVSD_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding the corpus, checkpoints, logs and outputs.
    #[serde(default = "default_root")]
    pub root: PathBuf,
}

fn default_root() -> PathBuf {
    PathBuf::from("run")
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { root: default_root() }
    }
}

/// How a synthetic corpus is cut; the test split takes the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub validation: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 60,
            validation: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// IoU-2 frame period for videos whose features are not loaded.
    pub frame_period: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { frame_period: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub generation: SearchConfig,
    #[serde(default)]
    pub reasoning: ReasoningConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let mut model = ModelConfig::default();
        model.encoder.input_a = synth.d_a;
        model.encoder.input_v = synth.d_v;
        Self {
            seed: 1,
            paths: PathsConfig::default(),
            synth,
            split: SplitConfig::default(),
            model,
            training: TrainingConfig::default(),
            generation: SearchConfig::default(),
            reasoning: ReasoningConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Set `path` (dot separated) inside `doc` to `raw`, parsed as a TOML value
/// when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse a TOML document after applying overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Everything checked up front so that no later stage hits a shape error.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.model.with_caption(true).validate()?;
        self.training.validate()?;
        self.generation.validate()?;
        self.reasoning.validate()?;
        let enc = &self.model.encoder;
        if enc.input_a != self.synth.d_a || enc.input_v != self.synth.d_v {
            return Err(Error::Config(format!(
                "model.encoder.input_a/input_v ({}/{}) must match synth.d_a/d_v ({}/{})",
                enc.input_a, enc.input_v, self.synth.d_a, self.synth.d_v
            )));
        }
        if self.training.lambda_c > 0.0 && self.model.decoder.blocks % 2 != 0 {
            return Err(Error::Config(format!(
                "model.decoder.blocks must be even when training.lambda_c > 0 (got {})",
                self.model.decoder.blocks
            )));
        }
        if self.split.train == 0 || self.split.train + self.split.validation > self.synth.num_videos {
            return Err(Error::Config(format!(
                "split.train ({}) must be positive and split.train + split.validation must not exceed synth.num_videos ({})",
                self.split.train, self.synth.num_videos
            )));
        }
        if !(self.evaluation.frame_period > 0.0) {
            return Err(Error::Config("evaluation.frame_period must be positive".into()));
        }
        Ok(())
    }

    /// `paths.root`, placed under the output-root environment variable when set.
    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(base) if !self.paths.root.is_absolute() => PathBuf::from(base).join(&self.paths.root),
            _ => self.paths.root.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_parse_values_and_create_tables() {
        let text = RunConfig::default().to_toml();
        let cfg = RunConfig::from_toml(
            &text,
            &[
                "training.epochs=3".into(),
                "model.decoder.fusion=attentional".into(),
                "reasoning.kernel_sizes=[1, 3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.reasoning.kernel_sizes, vec![1, 3]);
        assert!(matches!(RunConfig::from_toml(&text, &["nonsense".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn missing_and_inconsistent_fields_are_named() {
        let text: String = RunConfig::default()
            .to_toml()
            .lines()
            .filter(|l| !l.starts_with("seed"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = RunConfig::from_toml(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("missing field `seed`"), "{err}");
        let err = RunConfig::from_toml("seed = 1\n[training]\nepochs = 2\n", &[]).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        let err = RunConfig::from_toml(&RunConfig::default().to_toml(), &["model.decoder.blocks=3".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("even"), "{err}");
    }
}
