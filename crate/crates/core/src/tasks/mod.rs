//! The zero-shot tasks built on marked images and scores, and their metrics.

mod bias;
mod localize;
mod naming;
mod rec;

use std::collections::BTreeMap;

pub use bias::{bias_probe, BiasCategories, BiasImageResult, BiasReport, Category, Subject};
pub use localize::{
    candidate_grid, localize_keypoints, pck, pck_flags, GridSpec, LocalizationResult,
    LocalizeOptions, PckTarget, SaliencyMask, MASK_THRESHOLD,
};
pub use naming::{name_keypoints, KeypointInstance, NamingOptions, NamingResult, NamingSummary};
pub use rec::{
    iou, mean_subtracted, rec_accuracy, rec_select, sample_distractors, MeanSubtract, RecInstance,
    RecOptions, RecSelection,
};

use crate::error::Result;
use crate::scoring::PromptTemplate;

/// Renders a keypoint prompt. `{part}` takes the keypoint name; `{animal}`
/// and `{class}` take the object class. Only the slots the template uses
/// are filled.
pub fn render_keypoint_prompt(
    template: &PromptTemplate,
    part: &str,
    class_name: &str,
) -> Result<String> {
    let mut slots = BTreeMap::new();
    for (slot, value) in [("part", part), ("animal", class_name), ("class", class_name)] {
        if template.has_slot(slot) {
            slots.insert(slot, value);
        }
    }
    template.render(&slots)
}
