use std::collections::HashSet;
use std::sync::Arc;

use ndarray::ArrayView2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BBox, ImageBuffer};
use crate::markers::{build_bbox_prompt_ensemble, marker_for_bbox, MarkerSpec, VisualPrompt};
use crate::scoring::{argmax, Scorer};

/// An image, its candidate boxes and the expression naming one of them.
#[derive(Debug, Clone)]
pub struct RecInstance {
    pub image: ImageBuffer,
    pub proposals: Vec<BBox>,
    pub expression: String,
    pub gt_box: BBox,
    /// Expressions distractors are drawn from, usually every expression of
    /// the split. Shared between instances.
    pub distractor_pool: Arc<[String]>,
}

/// Which columns enter the per-proposal mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanSubtract {
    /// Mean over the sampled distractors only.
    #[default]
    ExcludeQuery,
    /// Mean over the distractors and the query itself.
    IncludeQuery,
    /// Raw query scores.
    None,
}

impl std::str::FromStr for MeanSubtract {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude-query" => Ok(MeanSubtract::ExcludeQuery),
            "include-query" => Ok(MeanSubtract::IncludeQuery),
            "none" => Ok(MeanSubtract::None),
            other => Err(Error::arg(format!("unknown mean-subtract mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecOptions {
    pub marker: MarkerSpec,
    pub prefix: String,
    pub distractors: usize,
    pub mean_subtract: MeanSubtract,
    /// Score the marked, blurred-outside and grayed-outside triple.
    pub ensemble: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecSelection {
    pub index: usize,
    pub adjusted: Vec<f64>,
    pub raw: Vec<f64>,
    pub distractors_used: usize,
}

/// Up to `count` distinct pool expressions other than `query`, in pool
/// order. The draw depends only on `(seed, stream)`.
pub fn sample_distractors(
    pool: &[String],
    query: &str,
    count: usize,
    seed: u64,
    stream: u64,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let candidates: Vec<&String> = pool
        .iter()
        .filter(|e| e.as_str() != query && seen.insert(e.as_str()))
        .collect();
    if count >= candidates.len() {
        return candidates.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = index::sample(&mut rng, candidates.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Adjusted score per proposal. `scores` is proposals × expressions and
/// `query` is the query's column; every other column is a distractor.
/// With no distractor columns the raw query scores are returned.
pub fn mean_subtracted(
    scores: ArrayView2<'_, f64>,
    query: usize,
    mode: MeanSubtract,
) -> Result<Vec<f64>> {
    let cols = scores.ncols();
    if scores.nrows() == 0 || query >= cols {
        return Err(Error::arg(format!(
            "need at least one proposal and query column {query} < {cols}"
        )));
    }
    let adjusted = scores
        .rows()
        .into_iter()
        .map(|row| {
            let raw = row[query];
            match mode {
                MeanSubtract::None => raw,
                _ if cols == 1 => raw,
                MeanSubtract::IncludeQuery => raw - row.sum() / cols as f64,
                MeanSubtract::ExcludeQuery => {
                    let rest: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != query)
                        .map(|(_, v)| v)
                        .sum();
                    raw - rest / (cols - 1) as f64
                }
            }
        })
        .collect();
    Ok(adjusted)
}

/// Picks the proposal whose marked image best matches the expression after
/// removing each proposal's average affinity to other expressions. `stream`
/// separates the distractor draws of different instances under one seed.
pub fn rec_select(
    inst: &RecInstance,
    scorer: &Scorer,
    opts: &RecOptions,
    stream: u64,
) -> Result<RecSelection> {
    if inst.proposals.is_empty() {
        return Err(Error::arg("REC instance has no proposals"));
    }
    let prompts = inst
        .proposals
        .iter()
        .map(|b| {
            if opts.ensemble {
                build_bbox_prompt_ensemble(&inst.image, b, &opts.marker)
            } else {
                marker_for_bbox(&inst.image, b, &opts.marker)
                    .map(|(img, _)| VisualPrompt::single(img, "ellipse"))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let distractors = match opts.mean_subtract {
        MeanSubtract::None => Vec::new(),
        _ => sample_distractors(
            &inst.distractor_pool,
            &inst.expression,
            opts.distractors,
            opts.seed,
            stream,
        ),
    };
    if distractors.is_empty() && opts.mean_subtract != MeanSubtract::None {
        log::warn!(
            "no distractors available for {:?}; using raw scores",
            inst.expression
        );
    }
    let texts: Vec<String> = std::iter::once(&inst.expression)
        .chain(&distractors)
        .map(|e| format!("{}{}", opts.prefix, e))
        .collect();

    // rows are texts, columns proposals
    let scores = scorer.score_prompts(&prompts, &texts)?;
    let by_proposal = scores.values().t();
    let raw: Vec<f64> = by_proposal.column(0).to_vec();
    let adjusted = mean_subtracted(by_proposal, 0, opts.mean_subtract)?;
    Ok(RecSelection {
        index: argmax(adjusted.iter().copied()),
        adjusted,
        raw,
        distractors_used: distractors.len(),
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of selections whose IoU with the ground truth is over 0.5.
pub fn rec_accuracy(selections: &[BBox], gts: &[BBox]) -> Result<f64> {
    if selections.len() != gts.len() || gts.is_empty() {
        return Err(Error::arg(format!(
            "need equally many (>= 1) selections and ground-truth boxes, got {} and {}",
            selections.len(),
            gts.len()
        )));
    }
    let hits = selections.iter().zip(gts).filter(|(s, g)| iou(s, g) > 0.5).count();
    Ok(hits as f64 / gts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::Color;
    use crate::markers::default_marker;
    use crate::scoring::{Signature, SyntheticOracle};
    use ndarray::array;
    use proptest::prelude::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn worked_example() {
        let s = array![[0.9, 0.8], [0.1, 0.5]];
        let adj = mean_subtracted(s.view(), 0, MeanSubtract::IncludeQuery).unwrap();
        assert!((adj[0] - 0.05).abs() < 1e-12);
        assert!((adj[1] + 0.2).abs() < 1e-12);
        assert_eq!(argmax(adj), 0);
        let adj = mean_subtracted(s.view(), 0, MeanSubtract::ExcludeQuery).unwrap();
        assert!((adj[0] - 0.1).abs() < 1e-12);
        assert!((adj[1] + 0.4).abs() < 1e-12);
        assert_eq!(mean_subtracted(s.view(), 0, MeanSubtract::None).unwrap(), vec![0.9, 0.1]);
        // query column only
        let q = array![[0.3], [0.7]];
        assert_eq!(mean_subtracted(q.view(), 0, MeanSubtract::ExcludeQuery).unwrap(), vec![0.3, 0.7]);
        assert!(mean_subtracted(q.view(), 1, MeanSubtract::None).is_err());
    }

    #[test]
    fn iou_examples() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &bb(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert_eq!(iou(&b, &bb(10.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((iou(&b, &bb(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&b, &bb(0.0, 0.0, 5.0, 5.0)), 0.25);
        assert_eq!(rec_accuracy(&[b, b], &[b, bb(5.0, 0.0, 10.0, 10.0)]).unwrap(), 0.5);
        assert!(rec_accuracy(&[b], &[]).is_err());
    }

    #[test]
    fn distractor_sampling() {
        let pool: Vec<String> = (0..50).map(|i| format!("e{i}")).chain(["e3".to_string()]).collect();
        let a = sample_distractors(&pool, "e3", 10, 7, 0);
        assert_eq!(a.len(), 10);
        assert!(!a.contains(&"e3".to_string()));
        assert_eq!(a, sample_distractors(&pool, "e3", 10, 7, 0));
        assert_ne!(a, sample_distractors(&pool, "e3", 10, 7, 1));
        assert_ne!(a, sample_distractors(&pool, "e3", 10, 8, 0));
        let all = sample_distractors(&pool, "e3", 500, 7, 0);
        assert_eq!(all.len(), 49);
        assert!(sample_distractors(&["q".to_string()], "q", 5, 0, 0).is_empty());
    }

    fn planted(n: usize, target: usize) -> (RecInstance, Scorer) {
        let image = ImageBuffer::filled(160, 120, Color::new(70, 110, 150)).unwrap();
        let proposals: Vec<BBox> = (0..n).map(|i| bb(10.0 + 28.0 * i as f64, 40.0, 20.0, 30.0)).collect();
        let mut oracle = SyntheticOracle::new(2, 128).unwrap();
        oracle.align(
            "This is the left dog",
            Signature::Ellipse { bbox: proposals[target], spec: default_marker() },
        );
        let pool: Arc<[String]> = ["the left dog", "a cat", "the red car", "a tree"]
            .map(String::from)
            .into();
        let inst = RecInstance {
            image,
            gt_box: proposals[target],
            proposals,
            expression: "the left dog".into(),
            distractor_pool: pool,
        };
        (inst, Scorer::new(oracle))
    }

    fn opts() -> RecOptions {
        RecOptions {
            marker: default_marker(),
            prefix: "This is ".into(),
            distractors: 500,
            mean_subtract: MeanSubtract::ExcludeQuery,
            ensemble: true,
            seed: 0,
        }
    }

    #[test]
    fn planted_proposal_is_selected() {
        let (inst, scorer) = planted(5, 3);
        for mode in [MeanSubtract::ExcludeQuery, MeanSubtract::IncludeQuery, MeanSubtract::None] {
            for ensemble in [true, false] {
                let o = RecOptions { mean_subtract: mode, ensemble, ..opts() };
                let sel = rec_select(&inst, &scorer, &o, 0).unwrap();
                assert_eq!(sel.index, 3, "{mode:?} {ensemble}");
                assert_eq!(sel.adjusted.len(), 5);
            }
        }
        let sel = rec_select(&inst, &scorer, &opts(), 0).unwrap();
        assert_eq!(sel.distractors_used, 3);
    }

    #[test]
    fn single_proposal_and_empty() {
        let (mut inst, scorer) = planted(1, 0);
        assert_eq!(rec_select(&inst, &scorer, &opts(), 0).unwrap().index, 0);
        inst.proposals.clear();
        assert!(rec_select(&inst, &scorer, &opts(), 0).is_err());
    }

    proptest! {
        #[test]
        fn per_proposal_offsets_cancel(
            rows in 1usize..6, cols in 2usize..8,
            seed in any::<u64>(),
            mode in prop_oneof![Just(MeanSubtract::ExcludeQuery), Just(MeanSubtract::IncludeQuery)],
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = ndarray::Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
            let offsets: Vec<f64> = (0..rows).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shifted = ndarray::Array2::from_shape_fn((rows, cols), |(i, j)| s[(i, j)] + offsets[i]);
            let a = mean_subtracted(s.view(), 0, mode).unwrap();
            let b = mean_subtracted(shifted.view(), 0, mode).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let scaled = s.mapv(|v| v * 3.5);
            let c = mean_subtracted(scaled.view(), 0, mode).unwrap();
            prop_assert_eq!(argmax(a.iter().copied()), argmax(c.iter().copied()));
        }
    }
}
