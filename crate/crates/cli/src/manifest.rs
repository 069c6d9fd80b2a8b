//! Run manifests: what was run, with which settings and seeds, and how long
//! each stage took. Timings are the only fields that vary between
//! otherwise identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use topoloc::pipeline::{StageTimings, TrajectoryMetrics};

use crate::{CliError, MANIFEST_FILE};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub results: Value,
    /// Wall-clock seconds per stage.
    pub timings_s: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: Value::Null,
            timings_s: BTreeMap::new(),
        }
    }

    pub fn timing(&mut self, stage: &str, d: Duration) {
        self.timings_s.insert(stage.into(), d.as_secs_f64());
    }

    /// Records the per-stage totals and the per-frame averages.
    pub fn stage_timings(&mut self, t: &StageTimings, frames: usize) {
        let n = frames.max(1) as f64;
        for (name, d) in [
            ("classify", t.classify),
            ("normalize", t.normalize),
            ("match_pnp", t.match_pnp),
            ("total", t.total),
        ] {
            self.timing(name, d);
            self.timings_s
                .insert(format!("{name}_per_frame"), d.as_secs_f64() / n);
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

pub fn metrics_json(m: &TrajectoryMetrics) -> Value {
    json!({
        "median_translation_error_m": m.median_translation_error,
        "median_rotation_error_deg": m.median_rotation_error,
        "median_translation_error_all_m": m.median_translation_error_all,
        "topological_accuracy": m.topological_accuracy,
        "localization_rate": m.localization_rate,
        "frames": m.frames,
        "localized": m.localized,
        "jump_rejected": m.jump_rejected,
    })
}
