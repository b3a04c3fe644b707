//! Turns backend specs into scorers.
//!
//! `synthetic` is the planted oracle: the texts of one instance are aligned
//! with the marker footprints of that instance's ground truth, so a correct
//! pipeline scores perfectly. Planting is per instance because prompts such
//! as "the beak of the bird" recur across images with different answers.
//! `random` embeds everything by hash, `blind` ignores image content.

use std::sync::Arc;

use anyhow::{Context, Result};
use markprompt::config::RunConfig;
use markprompt::scoring::{fixture_backend, remote_backend, ImageMode, Signature, SyntheticOracle};
use markprompt::{Scorer, ScorerBackend};

use crate::usage;

pub const SYNTHETIC_DIM: usize = 256;

enum Slot {
    Planted,
    Fixed(Arc<dyn ScorerBackend>),
}

pub struct Backends {
    seed: u64,
    slots: Vec<Slot>,
}

impl Backends {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let slots = config
            .backends
            .iter()
            .map(|spec| slot(spec, config.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backends {
            seed: config.seed,
            slots,
        })
    }

    /// Scorer whose synthetic backends carry `planted`.
    pub fn scorer(&self, planted: &[(String, Signature)]) -> Result<Scorer> {
        let backends = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(b) => Ok(Arc::clone(b)),
                Slot::Planted => {
                    let mut o = SyntheticOracle::new(self.seed, SYNTHETIC_DIM)?;
                    for (key, sig) in planted {
                        o.align(key.clone(), sig.clone());
                    }
                    Ok(Arc::new(o) as Arc<dyn ScorerBackend>)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scorer::ensemble(backends)?)
    }
}

fn slot(spec: &str, seed: u64) -> Result<Slot> {
    let oracle = || SyntheticOracle::new(seed, SYNTHETIC_DIM);
    let backend: Arc<dyn ScorerBackend> = match spec {
        "synthetic" => return Ok(Slot::Planted),
        "random" => Arc::new(oracle()?.with_id(format!("random-{seed}-{SYNTHETIC_DIM}"))),
        "blind" => Arc::new(oracle()?.with_image_mode(ImageMode::Constant)),
        _ => {
            if let Some(path) = spec.strip_prefix("fixture:") {
                Arc::new(fixture_backend(path, None).with_context(|| format!("backend {spec}"))?)
            } else if let Some(rest) = spec.strip_prefix("remote:") {
                let (url, model) = rest.rsplit_once('+').ok_or_else(|| {
                    usage(format!("remote backend needs <url>+<model>, got {spec:?}"))
                })?;
                Arc::new(remote_backend(url, model).with_context(|| format!("backend {spec}"))?)
            } else {
                return Err(usage(format!(
                    "unknown backend {spec:?}; expected synthetic, random, blind, fixture:<path> or remote:<url>+<model>"
                )));
            }
        }
    };
    Ok(Slot::Fixed(backend))
}
