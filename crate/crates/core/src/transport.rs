//! Entropic optimal transport for decoding a square cost matrix into a
//! one-to-one assignment.
//!
//! The cost is turned into a Gibbs kernel `exp(-tau * C)`, Sinkhorn-Knopp
//! scales it to a doubly stochastic plan (unit row and column sums), and the
//! plan is decoded by row argmax, column argmax or a maximum-weight perfect
//! matching.

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::argmax;

pub const DEFAULT_TAU: f64 = 1.0 / 150.0;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const BRUTE_FORCE_MAX: usize = 9;

/// Square matrix of finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.is_empty() {
            return Err(Error::arg(format!(
                "cost matrix must be square and non-empty, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix(values))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// `exp(-tau * C)`, shifted by the largest exponent so that no entry
/// overflows. The shift is a global positive factor and leaves the Sinkhorn
/// limit unchanged. Entries are floored at the smallest positive normal
/// so the kernel stays strictly positive.
pub fn gibbs_kernel(cost: &CostMatrix, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::arg(format!("tau must be positive, got {tau}")));
    }
    let shift = cost
        .0
        .iter()
        .map(|c| -tau * c)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(cost
        .0
        .mapv(|c| (-tau * c - shift).exp().max(f64::MIN_POSITIVE)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub iterations: usize,
    /// Largest deviation of any row or column sum from 1.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn size(&self) -> usize {
        self.plan.nrows()
    }
}

pub fn marginal_error(plan: ArrayView2<'_, f64>) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    rows.iter()
        .chain(cols.iter())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Alternating row/column scaling of a strictly positive square kernel
/// towards unit marginals. Stops once the marginal error is within `tol`;
/// hitting `max_iter` first returns the last plan with `converged = false`.
pub fn sinkhorn(kernel: &Array2<f64>, options: SinkhornOptions) -> Result<TransportPlan> {
    let m = kernel.nrows();
    if m == 0 || kernel.ncols() != m {
        return Err(Error::arg(format!(
            "sinkhorn needs a non-empty square kernel, got {:?}",
            kernel.dim()
        )));
    }
    if options.max_iter == 0 || !(options.tol > 0.0) {
        return Err(Error::arg("sinkhorn needs max_iter >= 1 and tol > 0"));
    }
    if let Some(bad) = kernel.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
        return Err(Error::arg(format!(
            "sinkhorn kernel entries must be positive and finite, found {bad}"
        )));
    }

    let mut v = Array1::<f64>::ones(m);
    let mut plan = kernel.clone();
    let mut error = f64::INFINITY;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let u = kernel.dot(&v).mapv(f64::recip);
        v = kernel.t().dot(&u).mapv(f64::recip);
        plan = kernel * &u.view().insert_axis(Axis(1)) * &v.view().insert_axis(Axis(0));
        error = marginal_error(plan.view());
        if error <= options.tol {
            break;
        }
    }
    Ok(TransportPlan {
        plan,
        iterations,
        marginal_error: error,
        converged: error <= options.tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    RowArgmax,
    ColArgmax,
    Hungarian,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row-argmax" | "row_argmax" => Ok(DecodeMode::RowArgmax),
            "col-argmax" | "col_argmax" => Ok(DecodeMode::ColArgmax),
            "hungarian" => Ok(DecodeMode::Hungarian),
            other => Err(Error::arg(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    RowToCol,
    ColToRow,
}

/// A (possibly colliding) map from rows to columns or columns to rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub direction: Direction,
    pub mapping: Vec<Option<usize>>,
    pub is_permutation: bool,
}

impl Assignment {
    fn from_targets(direction: Direction, targets: Vec<usize>) -> Self {
        let is_permutation = targets.iter().all_unique();
        Assignment {
            direction,
            mapping: targets.into_iter().map(Some).collect(),
            is_permutation,
        }
    }

    /// Row-to-column permutation as plain indices. `None` if any entry is
    /// unassigned.
    pub fn targets(&self) -> Option<Vec<usize>> {
        self.mapping.iter().copied().collect()
    }

    /// Fraction of sources mapped to their expected target.
    pub fn accuracy(&self, expected: &[usize]) -> f64 {
        if self.mapping.is_empty() {
            return 0.0;
        }
        let hits = self
            .mapping
            .iter()
            .zip(expected)
            .filter(|(got, want)| **got == Some(**want))
            .count();
        hits as f64 / self.mapping.len() as f64
    }
}

pub fn decode_assignment(plan: &TransportPlan, mode: DecodeMode) -> Assignment {
    decode_matrix(plan.plan.view(), mode)
}

/// Decoding applied to any score-like matrix (larger is better).
pub fn decode_matrix(matrix: ArrayView2<'_, f64>, mode: DecodeMode) -> Assignment {
    match mode {
        DecodeMode::RowArgmax => Assignment::from_targets(
            Direction::RowToCol,
            matrix.outer_iter().map(|r| argmax(r.iter().copied())).collect(),
        ),
        DecodeMode::ColArgmax => Assignment::from_targets(
            Direction::ColToRow,
            matrix.columns().into_iter().map(|c| argmax(c.iter().copied())).collect(),
        ),
        DecodeMode::Hungarian => {
            Assignment::from_targets(Direction::RowToCol, max_weight_matching(matrix))
        }
    }
}

/// Maximum-weight perfect matching on a square matrix (Hungarian method with
/// potentials, O(m³)). Returns the column assigned to each row.
pub fn max_weight_matching(weights: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = weights.nrows();
    assert_eq!(n, weights.ncols(), "matching needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -weights[[i - 1, j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Exhaustive maximization of `Σ_q exp(-tau C[q, π(q)])` over all
/// permutations. Ties keep the lexicographically smallest permutation.
pub fn brute_force_assignment(cost: &CostMatrix, tau: f64) -> Result<Assignment> {
    let m = cost.size();
    if m > BRUTE_FORCE_MAX {
        return Err(Error::Size(format!(
            "brute force assignment supports m <= {BRUTE_FORCE_MAX}, got {m}"
        )));
    }
    let kernel = gibbs_kernel(cost, tau)?;
    Ok(Assignment::from_targets(
        Direction::RowToCol,
        best_permutation(kernel.view()),
    ))
}

/// Permutation maximizing the summed weights, by enumeration in
/// lexicographic order.
pub fn best_permutation(weights: ArrayView2<'_, f64>) -> Vec<usize> {
    let m = weights.nrows();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..m).permutations(m) {
        let total: f64 = perm.iter().enumerate().map(|(q, &a)| weights[[q, a]]).sum();
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn cost(v: Array2<f64>) -> CostMatrix {
        CostMatrix::new(v).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let k = gibbs_kernel(&cost(Array2::zeros((3, 3))), 0.5).unwrap();
        assert!(k.iter().all(|&v| v == 1.0));
        let k = gibbs_kernel(&cost(array![[0.0, 1.0], [1.0, 0.0]]), 1.0).unwrap();
        let inv_e = 1.0 / E;
        for (got, want) in k.iter().zip([1.0, inv_e, inv_e, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(gibbs_kernel(&cost(array![[1.0]]), 0.0).is_err());
        assert_eq!(DEFAULT_TAU, 1.0 / 150.0);
    }

    #[test]
    fn kernel_survives_extreme_costs() {
        let k = gibbs_kernel(&cost(array![[-1e6, 0.0], [0.0, 1e6]]), 1.0).unwrap();
        assert!(k.iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(sinkhorn(&k, SinkhornOptions::default()).is_ok());
    }

    #[test]
    fn cost_matrix_validation() {
        assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(CostMatrix::new(Array2::zeros((0, 0))).is_err());
        assert!(CostMatrix::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn uniform_kernel_gives_uniform_plan() {
        for m in 1..=8 {
            let plan = sinkhorn(&Array2::ones((m, m)), SinkhornOptions::default()).unwrap();
            assert!(plan.converged);
            let want = 1.0 / m as f64;
            assert!(plan.plan.iter().all(|&p| (p - want).abs() <= 1e-12));
        }
    }

    #[test]
    fn two_by_two_fixed_point() {
        // Symmetric fixed point: x (1 + 1/e) = 1.
        let x = 1.0 / (1.0 + 1.0 / E);
        let k = gibbs_kernel(&cost(array![[0.0, 1.0], [1.0, 0.0]]), 1.0).unwrap();
        let plan = sinkhorn(&k, SinkhornOptions::default()).unwrap();
        assert!((plan.plan[[0, 0]] - 0.7311).abs() < 1e-3);
        assert!((plan.plan[[0, 1]] - 0.2689).abs() < 1e-3);
        assert!((plan.plan[[0, 0]] - x).abs() < 1e-9);
        assert!((plan.plan[[1, 1]] - x).abs() < 1e-9);
    }

    #[test]
    fn row_scaling_does_not_change_limit() {
        let k = array![[1.0, 0.3, 0.2], [0.5, 0.9, 0.1], [0.2, 0.4, 0.7]];
        let mut scaled = k.clone();
        scaled.row_mut(1).mapv_inplace(|v| v * 10.0);
        let opts = SinkhornOptions::default();
        let a = sinkhorn(&k, opts).unwrap();
        let b = sinkhorn(&scaled, opts).unwrap();
        for (x, y) in a.plan.iter().zip(b.plan.iter()) {
            assert!((x - y).abs() <= 10.0 * opts.tol);
        }
    }

    #[test]
    fn sinkhorn_argument_errors() {
        let opts = SinkhornOptions::default();
        assert!(sinkhorn(&array![[1.0, 0.0], [1.0, 1.0]], opts).is_err());
        assert!(sinkhorn(&array![[1.0, -1.0], [1.0, 1.0]], opts).is_err());
        assert!(sinkhorn(&Array2::ones((2, 3)), opts).is_err());
        assert!(sinkhorn(&Array2::ones((2, 2)), SinkhornOptions { max_iter: 0, tol: 1e-9 }).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let k = array![[1.0, 1e-6, 0.3], [0.2, 1.0, 1e-5], [0.4, 0.1, 1.0]];
        let plan = sinkhorn(&k, SinkhornOptions { max_iter: 1, tol: 1e-15 }).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 1);
        assert!(plan.marginal_error > 1e-15);
    }

    #[test]
    fn decode_examples() {
        let plan = TransportPlan {
            plan: array![[0.73, 0.27], [0.27, 0.73]],
            iterations: 1,
            marginal_error: 0.0,
            converged: true,
        };
        for mode in [DecodeMode::RowArgmax, DecodeMode::ColArgmax, DecodeMode::Hungarian] {
            let a = decode_assignment(&plan, mode);
            assert_eq!(a.targets().unwrap(), vec![0, 1]);
            assert!(a.is_permutation);
        }
    }

    #[test]
    fn colliding_argmax_is_not_a_permutation() {
        let m = array![[0.9, 0.1], [0.8, 0.2]];
        let a = decode_matrix(m.view(), DecodeMode::RowArgmax);
        assert_eq!(a.targets().unwrap(), vec![0, 0]);
        assert!(!a.is_permutation);
        let h = decode_matrix(m.view(), DecodeMode::Hungarian);
        assert!(h.is_permutation);
        assert_eq!(h.accuracy(&[0, 1]), 1.0);
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_assignment(&cost(array![[3.0]]), 1.0).unwrap();
        assert_eq!(a.targets().unwrap(), vec![0]);

        let mut c = Array2::from_elem((4, 4), 1.0);
        for q in 0..4 {
            c[[q, 3 - q]] = -2.0;
        }
        let a = brute_force_assignment(&cost(c), 1.0).unwrap();
        assert_eq!(a.targets().unwrap(), vec![3, 2, 1, 0]);

        let a = brute_force_assignment(&cost(Array2::zeros((3, 3))), 1.0).unwrap();
        assert_eq!(a.targets().unwrap(), vec![0, 1, 2]);

        assert!(matches!(
            brute_force_assignment(&cost(Array2::zeros((10, 10))), 1.0),
            Err(Error::Size(_))
        ));
    }

    fn matrix_strategy(m: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, m * m)
            .prop_map(move |v| Array2::from_shape_vec((m, m), v).unwrap())
    }

    proptest! {
        #[test]
        fn hungarian_matches_enumeration(m in 1usize..=6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = Array2::from_shape_fn((m, m), |_| rng.gen_range(-2.0..2.0));
            let c = cost(c);
            let kernel = gibbs_kernel(&c, 1.3).unwrap();
            let hungarian = max_weight_matching(kernel.view());
            let brute = brute_force_assignment(&c, 1.3).unwrap();
            prop_assert_eq!(Some(hungarian), brute.targets());
        }

        #[test]
        fn converged_marginals_within_tol(k in matrix_strategy(5)) {
            let kernel = k.mapv(|v| v.exp());
            let opts = SinkhornOptions::default();
            let plan = sinkhorn(&kernel, opts).unwrap();
            prop_assert!(plan.converged);
            prop_assert!(marginal_error(plan.plan.view()) <= opts.tol);
            prop_assert!(plan.plan.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn shift_leaves_plan_unchanged(c in matrix_strategy(4), tau in 0.1f64..3.0) {
            let cm = cost(c.clone());
            let shifted = gibbs_kernel(&cm, tau).unwrap();
            let unshifted = c.mapv(|v| (-tau * v).exp());
            let opts = SinkhornOptions::default();
            let a = sinkhorn(&shifted, opts).unwrap();
            let b = sinkhorn(&unshifted, opts).unwrap();
            for (x, y) in a.plan.iter().zip(b.plan.iter()) {
                prop_assert!((x - y).abs() <= 10.0 * opts.tol);
            }
        }

        #[test]
        fn global_kernel_scale_keeps_brute_force(c in matrix_strategy(4), s in 0.01f64..100.0) {
            let k = gibbs_kernel(&cost(c), 1.0).unwrap();
            prop_assert_eq!(best_permutation(k.view()), best_permutation((&k * s).view()));
        }
    }
}
