//! Sweep spec files.
//!
//! ```toml
//! components = ["*.*.*", "*.*.*.*"]
//! predicate = "target_word_restored"   # or repetition_suppressed, output_changed
//! exact_match = false
//! seed = 1
//!
//! [mode]
//! kind = "patch"                       # or "ablate"
//! alpha = 1.0
//! reference = "white_noise"            # or "calibrated_noise"
//!
//! [inputs]
//! task = "ambiguity"
//! count = 100
//! seed = 4
//! ```

use anyhow::{Context, Result};
use asrlens::experiments::{Predicate, SweepMode, SweepSpec};
use asrlens::instrument::ComponentPattern;
use serde::Deserialize;
use std::path::Path;

use crate::tasks::Task;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub components: Vec<String>,
    pub mode: SweepMode,
    pub predicate: Predicate,
    #[serde(default)]
    pub exact_match: bool,
    pub max_len: Option<usize>,
    pub seed: Option<u64>,
    pub inputs: InputSet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSet {
    pub task: Task,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_spec(&self, default_max_len: usize, default_seed: u64) -> SweepSpec {
        SweepSpec {
            components: self
                .components
                .iter()
                .cloned()
                .map(ComponentPattern)
                .collect(),
            mode: self.mode,
            predicate: self.predicate,
            exact_match: self.exact_match,
            max_len: self.max_len.unwrap_or(default_max_len),
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}
