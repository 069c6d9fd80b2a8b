//! `--synthetic` sources: a named preset or a JSON file overriding one.
//!
//! ```json
//! { "preset": "small",
//!   "world": { "seed": 3, "landmark_count": 2000 },
//!   "sequence": { "lateral_offset": 1.0 } }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use topoloc::synthworld::{SequenceConfig, WorldConfig};

use crate::CliError;

pub const PRESETS: [&str; 4] = ["default", "query", "small", "small-query"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Synthetic {
    pub world: WorldSpec,
    pub sequence: SequenceSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub extent: (f64, f64),
    pub landmark_count: usize,
    pub seed: u64,
    pub blob_sigma: f64,
    pub view_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub frame_spacing: f64,
    pub lateral_offset: f64,
    pub lighting_gain: f64,
    pub lighting_bias: f64,
    pub pixel_noise_sigma: f64,
    pub landmark_dropout: f64,
    pub start: f64,
    pub seed: u64,
}

impl From<WorldConfig> for WorldSpec {
    fn from(c: WorldConfig) -> Self {
        Self {
            extent: c.extent,
            landmark_count: c.landmark_count,
            seed: c.seed,
            blob_sigma: c.blob_sigma,
            view_distance: c.view_distance,
        }
    }
}

impl From<WorldSpec> for WorldConfig {
    fn from(s: WorldSpec) -> Self {
        Self {
            extent: s.extent,
            landmark_count: s.landmark_count,
            seed: s.seed,
            blob_sigma: s.blob_sigma,
            view_distance: s.view_distance,
        }
    }
}

impl From<SequenceConfig> for SequenceSpec {
    fn from(c: SequenceConfig) -> Self {
        Self {
            frame_spacing: c.frame_spacing,
            lateral_offset: c.lateral_offset,
            lighting_gain: c.lighting_gain,
            lighting_bias: c.lighting_bias,
            pixel_noise_sigma: c.pixel_noise_sigma,
            landmark_dropout: c.landmark_dropout,
            start: c.start,
            seed: c.seed,
        }
    }
}

impl From<SequenceSpec> for SequenceConfig {
    fn from(s: SequenceSpec) -> Self {
        Self {
            frame_spacing: s.frame_spacing,
            lateral_offset: s.lateral_offset,
            lighting_gain: s.lighting_gain,
            lighting_bias: s.lighting_bias,
            pixel_noise_sigma: s.pixel_noise_sigma,
            landmark_dropout: s.landmark_dropout,
            start: s.start,
            seed: s.seed,
        }
    }
}

/// Query sequences sit between the mapping frames and use their own
/// rendering seed.
fn query_sequence() -> SequenceConfig {
    SequenceConfig {
        frame_spacing: 1.0,
        start: 0.25,
        seed: 1,
        ..SequenceConfig::default()
    }
}

fn small_world() -> WorldConfig {
    WorldConfig {
        extent: (40.0, 40.0),
        landmark_count: 1750,
        ..WorldConfig::default()
    }
}

pub fn preset(name: &str) -> Option<Synthetic> {
    let (world, sequence) = match name {
        "default" => (WorldConfig::default(), SequenceConfig::default()),
        "query" => (WorldConfig::default(), query_sequence()),
        "small" => (small_world(), SequenceConfig::default()),
        "small-query" => (small_world(), query_sequence()),
        _ => return None,
    };
    Some(Synthetic {
        world: world.into(),
        sequence: sequence.into(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    world: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    sequence: serde_json::Map<String, serde_json::Value>,
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    base: T,
    fields: serde_json::Map<String, serde_json::Value>,
) -> Result<T, serde_json::Error> {
    let mut v = serde_json::to_value(base)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.extend(fields);
    }
    serde_json::from_value(v)
}

impl Synthetic {
    /// Resolves a preset name, or failing that reads a JSON file.
    pub fn resolve(arg: &str) -> Result<Self, CliError> {
        if let Some(s) = preset(arg) {
            return Ok(s);
        }
        let path = Path::new(arg);
        if !path.exists() {
            return Err(CliError::Config(format!(
                "--synthetic {arg:?} is neither a preset ({}) nor an existing file",
                PRESETS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let file: File = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let name = file.preset.as_deref().unwrap_or("default");
        let base = preset(name).ok_or_else(|| format!("unknown preset {name:?}"))?;
        let s = Self {
            world: overlay(base.world, file.world).map_err(|e| format!("world: {e}"))?,
            sequence: overlay(base.sequence, file.sequence)
                .map_err(|e| format!("sequence: {e}"))?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        WorldConfig::from(self.world).validate()?;
        SequenceConfig::from(self.sequence).validate()
    }

    pub fn world_config(&self) -> WorldConfig {
        self.world.into()
    }

    pub fn sequence_config(&self) -> SequenceConfig {
        self.sequence.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in PRESETS {
            let s = Synthetic::resolve(name).unwrap();
            s.validate().unwrap();
        }
        assert_eq!(
            preset("default").unwrap().world_config(),
            WorldConfig::default()
        );
    }

    #[test]
    fn json_overrides_preset_fields() {
        let s = Synthetic::parse(
            r#"{"preset": "small", "world": {"seed": 3}, "sequence": {"lateral_offset": 1.5}}"#,
        )
        .unwrap();
        assert_eq!(s.world.seed, 3);
        assert_eq!(s.world.extent, (40.0, 40.0));
        assert_eq!(s.sequence.lateral_offset, 1.5);
        assert_eq!(s.sequence.frame_spacing, 0.5);
    }

    #[test]
    fn json_rejects_unknown_and_invalid_fields() {
        assert!(Synthetic::parse(r#"{"world": {"colour": 1}}"#).is_err());
        assert!(Synthetic::parse(r#"{"sequence": {"frame_spacing": -1}}"#).is_err());
        assert!(Synthetic::parse(r#"{"preset": "nope"}"#).is_err());
        assert!(Synthetic::parse("{").is_err());
    }
}
