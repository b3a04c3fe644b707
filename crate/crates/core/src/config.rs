//! Run configuration. Every task default lives here, and every report
//! carries the fully resolved record so a run can be reproduced from its
//! output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markers::{default_marker, MarkerSpec};
use crate::scoring::PromptTemplate;
use crate::tasks::MeanSubtract;
use crate::transport::{DecodeMode, SinkhornOptions, DEFAULT_TAU};

/// Bumped whenever a default below changes.
pub const CONFIG_VERSION: u32 = 1;

pub const DEFAULT_GRID: usize = 30;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_DISTRACTORS: usize = 500;
pub const DEFAULT_TEMPLATE: &str = "This image shows the {part} of the {animal}";
pub const DEFAULT_REC_PREFIX: &str = "This is ";
pub const DEFAULT_BIAS_PREFIX: &str = "This is an image of a ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Backend specs such as `synthetic`, `fixture:<path>` or
    /// `remote:<url>+<model>`. Several backends are ensembled.
    pub backends: Vec<String>,
    pub marker: MarkerSpec,
    pub tau: f64,
    pub sinkhorn: SinkhornOptions,
    pub decode: DecodeMode,
    pub grid: usize,
    pub alpha: f64,
    pub distractors: usize,
    pub mean_subtract: MeanSubtract,
    /// Score REC proposals with the marked/blurred/grayed triple rather
    /// than the marked image alone.
    pub rec_ensemble: bool,
    pub template: PromptTemplate,
    pub rec_prefix: String,
    pub bias_prefix: String,
    pub seed: u64,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            backends: vec!["synthetic".to_string()],
            marker: default_marker(),
            tau: DEFAULT_TAU,
            sinkhorn: SinkhornOptions::default(),
            decode: DecodeMode::RowArgmax,
            grid: DEFAULT_GRID,
            alpha: DEFAULT_ALPHA,
            distractors: DEFAULT_DISTRACTORS,
            mean_subtract: MeanSubtract::ExcludeQuery,
            rec_ensemble: true,
            template: PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template parses"),
            rec_prefix: DEFAULT_REC_PREFIX.to_string(),
            bias_prefix: DEFAULT_BIAS_PREFIX.to_string(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backends.is_empty() {
            return Err(Error::arg("at least one backend is required"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::arg(format!("tau must be positive, got {}", self.tau)));
        }
        if self.grid == 0 {
            return Err(Error::arg("grid size must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::arg(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.distractors == 0 {
            return Err(Error::arg("distractor count must be at least 1"));
        }
        if self.sinkhorn.max_iter == 0 || !(self.sinkhorn.tol > 0.0) {
            return Err(Error::arg("sinkhorn needs max_iter >= 1 and tol > 0"));
        }
        Ok(())
    }
}
