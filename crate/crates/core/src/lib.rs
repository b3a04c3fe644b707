//! Visual prompt engineering for zero-shot vision-language tasks.
//!
//! Markers (a red circle by default) are drawn on an image to point a
//! vision-language model at a location or object. The marked images are
//! scored against text prompts by a pluggable [`scoring::ScorerBackend`], and
//! the scores drive keypoint naming (optimal transport), keypoint
//! localization, referring expression comprehension and a marker bias probe.

pub mod config;
pub mod data;
pub mod error;
pub mod imgcore;
pub mod markers;
pub mod scoring;
pub mod tasks;
pub mod transport;

pub use error::{Error, Result, ValidationIssue};
pub use imgcore::{BBox, Color, ImageBuffer, PointF};
pub use markers::{default_marker, MarkerSpec, Shape, VisualPrompt};
pub use scoring::{PromptTemplate, ScoreMatrix, Scorer, ScorerBackend};
pub use transport::{Assignment, CostMatrix, DecodeMode, TransportPlan};
pub use config::RunConfig;
pub use data::TaskReport;
