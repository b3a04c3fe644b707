use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::render_keypoint_prompt;
use crate::error::{Error, Result};
use crate::imgcore::{BBox, ImageBuffer, PointF};
use crate::markers::{draw_marker, MarkerSpec};
use crate::scoring::{PromptTemplate, ScoreMatrix, Scorer};
use crate::transport::{
    decode_assignment, gibbs_kernel, sinkhorn, Assignment, CostMatrix, DecodeMode,
    SinkhornOptions, TransportPlan,
};

/// An image with `m` named keypoints; name `k` belongs at location `k`.
#[derive(Debug, Clone)]
pub struct KeypointInstance {
    pub image: ImageBuffer,
    pub names: Vec<String>,
    pub locations: Vec<PointF>,
    pub bbox: BBox,
    pub class_name: String,
}

impl KeypointInstance {
    pub fn new(
        image: ImageBuffer,
        names: Vec<String>,
        locations: Vec<PointF>,
        bbox: BBox,
        class_name: impl Into<String>,
    ) -> Result<Self> {
        if names.is_empty() || names.len() != locations.len() {
            return Err(Error::arg(format!(
                "need m >= 1 names and as many locations, got {} and {}",
                names.len(),
                locations.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::arg(format!("duplicate keypoint name {dup:?}")));
        }
        Ok(KeypointInstance {
            image,
            names,
            locations,
            bbox,
            class_name: class_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct NamingOptions {
    pub template: PromptTemplate,
    pub marker: MarkerSpec,
    pub tau: f64,
    pub sinkhorn: SinkhornOptions,
    pub decode: DecodeMode,
}

#[derive(Debug, Clone)]
pub struct NamingResult {
    pub score_matrix: ScoreMatrix,
    pub plan: TransportPlan,
    /// Name (row) to location (column).
    pub row_assignment: Assignment,
    /// Location (column) to name (row).
    pub col_assignment: Assignment,
    pub t2i_accuracy: f64,
    pub i2t_accuracy: f64,
}

/// Per-instance summary for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamingSummary {
    pub m: usize,
    pub row_assignment: Vec<Option<usize>>,
    pub col_assignment: Vec<Option<usize>>,
    pub t2i_accuracy: f64,
    pub i2t_accuracy: f64,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_converged: bool,
}

impl NamingResult {
    pub fn summary(&self) -> NamingSummary {
        NamingSummary {
            m: self.score_matrix.rows(),
            row_assignment: self.row_assignment.mapping.clone(),
            col_assignment: self.col_assignment.mapping.clone(),
            t2i_accuracy: self.t2i_accuracy,
            i2t_accuracy: self.i2t_accuracy,
            sinkhorn_iterations: self.plan.iterations,
            sinkhorn_converged: self.plan.converged,
        }
    }
}

fn inverse(assignment: &Assignment, m: usize) -> Assignment {
    let mut mapping = vec![None; m];
    for (row, col) in assignment.mapping.iter().enumerate() {
        if let Some(c) = col {
            mapping[*c] = Some(row);
        }
    }
    Assignment {
        direction: crate::transport::Direction::ColToRow,
        is_permutation: assignment.is_permutation,
        mapping,
    }
}

/// Matches keypoint names to marked locations. The cost of pairing name
/// `q` with location `a` is the negated score of the image marked at `a`
/// against the prompt for `q`; the Gibbs kernel of that cost is Sinkhorn
/// normalized and decoded in both directions.
pub fn name_keypoints(
    inst: &KeypointInstance,
    scorer: &Scorer,
    opts: &NamingOptions,
) -> Result<NamingResult> {
    let m = inst.len();
    let images = inst
        .locations
        .iter()
        .map(|&loc| draw_marker(&inst.image, &opts.marker, loc))
        .collect::<Result<Vec<_>>>()?;
    let texts = inst
        .names
        .iter()
        .map(|n| render_keypoint_prompt(&opts.template, n, &inst.class_name))
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score(&images, &texts)?;
    let cost = CostMatrix::new(scores.values().mapv(|s| -s))?;
    let kernel = gibbs_kernel(&cost, opts.tau)?;
    let plan = sinkhorn(&kernel, opts.sinkhorn)?;
    if !plan.converged {
        log::warn!(
            "sinkhorn stopped after {} iterations with marginal error {:e}",
            plan.iterations,
            plan.marginal_error
        );
    }

    let (row_assignment, col_assignment) = match opts.decode {
        DecodeMode::Hungarian => {
            let rows = decode_assignment(&plan, DecodeMode::Hungarian);
            let cols = inverse(&rows, m);
            (rows, cols)
        }
        DecodeMode::RowArgmax | DecodeMode::ColArgmax => (
            decode_assignment(&plan, DecodeMode::RowArgmax),
            decode_assignment(&plan, DecodeMode::ColArgmax),
        ),
    };
    let truth: Vec<usize> = (0..m).collect();
    let t2i_accuracy = row_assignment.accuracy(&truth);
    let i2t_accuracy = col_assignment.accuracy(&truth);
    let col_labels = (0..m).map(|a| format!("location {a}")).collect();
    Ok(NamingResult {
        score_matrix: scores.with_col_labels(col_labels)?,
        plan,
        row_assignment,
        col_assignment,
        t2i_accuracy,
        i2t_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::Color;
    use crate::markers::default_marker;
    use crate::scoring::{Signature, SyntheticOracle};
    use crate::transport::DEFAULT_TAU;

    fn opts() -> NamingOptions {
        NamingOptions {
            template: PromptTemplate::new("This is the {part} of a bird").unwrap(),
            marker: default_marker(),
            tau: DEFAULT_TAU,
            sinkhorn: SinkhornOptions::default(),
            decode: DecodeMode::RowArgmax,
        }
    }

    fn planted(locations: &[(f64, f64)]) -> (KeypointInstance, Scorer) {
        let image = ImageBuffer::filled(120, 100, Color::new(90, 120, 60)).unwrap();
        let names: Vec<String> = (0..locations.len()).map(|i| format!("part{i}")).collect();
        let locs: Vec<PointF> = locations.iter().map(|&(x, y)| PointF::new(x, y)).collect();
        let mut oracle = SyntheticOracle::new(3, 128).unwrap();
        for (n, &l) in names.iter().zip(&locs) {
            let text = format!("This is the {n} of a bird");
            oracle.align(text, Signature::Circle { center: l, spec: default_marker() });
        }
        let inst = KeypointInstance::new(image, names, locs, BBox::new(0.0, 0.0, 120.0, 100.0).unwrap(), "bird").unwrap();
        (inst, Scorer::new(oracle))
    }

    #[test]
    fn planted_instance_is_named_perfectly() {
        let (inst, scorer) = planted(&[(20.0, 20.0), (90.0, 25.0), (30.0, 80.0), (95.0, 75.0)]);
        for decode in [DecodeMode::RowArgmax, DecodeMode::Hungarian] {
            let r = name_keypoints(&inst, &scorer, &NamingOptions { decode, ..opts() }).unwrap();
            assert_eq!(r.t2i_accuracy, 1.0);
            assert_eq!(r.i2t_accuracy, 1.0);
            assert!(r.plan.converged);
        }
    }

    #[test]
    fn single_keypoint_is_always_right() {
        let image = ImageBuffer::filled(50, 50, Color::BLACK).unwrap();
        let inst = KeypointInstance::new(
            image,
            vec!["beak".into()],
            vec![PointF::new(10.0, 10.0)],
            BBox::new(0.0, 0.0, 50.0, 50.0).unwrap(),
            "bird",
        )
        .unwrap();
        let scorer = Scorer::new(SyntheticOracle::new(1, 16).unwrap());
        let r = name_keypoints(&inst, &scorer, &opts()).unwrap();
        assert_eq!((r.t2i_accuracy, r.i2t_accuracy), (1.0, 1.0));
    }

    #[test]
    fn instance_validation() {
        let image = ImageBuffer::filled(10, 10, Color::BLACK).unwrap();
        let bbox = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let p = PointF::new(1.0, 1.0);
        assert!(KeypointInstance::new(image.clone(), vec![], vec![], bbox, "x").is_err());
        assert!(KeypointInstance::new(image.clone(), vec!["a".into()], vec![p, p], bbox, "x").is_err());
        assert!(KeypointInstance::new(image, vec!["a".into(), "a".into()], vec![p, p], bbox, "x").is_err());
    }

    #[test]
    fn accuracies_invariant_to_input_order() {
        let locs = [(20.0, 20.0), (90.0, 25.0), (30.0, 80.0)];
        let (inst, _) = planted(&locs);
        // A random backend gives imperfect but order-independent results.
        let scorer = Scorer::new(SyntheticOracle::new(11, 64).unwrap());
        let base = name_keypoints(&inst, &scorer, &opts()).unwrap();
        let order = [2usize, 0, 1];
        let permuted = KeypointInstance::new(
            inst.image.clone(),
            order.iter().map(|&i| inst.names[i].clone()).collect(),
            order.iter().map(|&i| inst.locations[i]).collect(),
            inst.bbox,
            "bird",
        )
        .unwrap();
        let r = name_keypoints(&permuted, &scorer, &opts()).unwrap();
        assert_eq!(r.t2i_accuracy, base.t2i_accuracy);
        assert_eq!(r.i2t_accuracy, base.i2t_accuracy);
    }
}
