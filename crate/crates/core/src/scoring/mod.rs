//! Image-text compatibility scores.
//!
//! A [`ScorerBackend`] turns images and texts into unit embeddings; scores
//! are cosine similarities between them, assembled into a [`ScoreMatrix`]
//! with one row per text and one column per image. Ensembles (several
//! backbones, several prompt variants) average score matrices entrywise.

mod fixture;
mod remote;
mod synthetic;
mod template;

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::ImageBuffer;
use crate::markers::VisualPrompt;

pub use fixture::{
    fixture_backend, image_key, text_key, EmbeddingKind, FixtureBackend, FixtureRecord,
    RecordingBackend,
};
pub use remote::{remote_backend, ModelInfo, RemoteBackend, RemoteOptions};
pub use synthetic::{synthetic_oracle, ImageMode, Signature, SyntheticOracle};
pub use template::PromptTemplate;

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// L2-normalized embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `values` to unit length. Zero or non-finite vectors are
    /// rejected.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("embedding has no components"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("embedding has non-finite components"));
        }
        let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::arg("embedding is the zero vector"));
        }
        // Already unit up to f32 rounding: keep the exact bits.
        if (norm - 1.0).abs() <= 1e-6 {
            return Ok(Embedding(values));
        }
        Ok(Embedding(values.into_iter().map(|v| (v as f64 / norm) as f32).collect()))
    }

    /// Wraps values without normalizing; for tests that need raw vectors.
    pub fn raw(values: Vec<f32>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }
}

pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine of a zero vector is undefined"));
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// An image/text encoder. Implementations must be deterministic for a given
/// input within one session and safe to call from several threads.
pub trait ScorerBackend: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>>;
}

/// Score matrix with one row per text (question) and one column per image
/// (answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoreMatrixRepr", into = "ScoreMatrixRepr")]
pub struct ScoreMatrix {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreMatrixRepr {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<ScoreMatrixRepr> for ScoreMatrix {
    type Error = Error;

    fn try_from(r: ScoreMatrixRepr) -> Result<Self> {
        let cols = r.col_labels.len();
        if r.values.iter().any(|row| row.len() != cols) {
            return Err(Error::arg("score matrix rows must match the column labels"));
        }
        let flat = r.values.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((r.row_labels.len(), cols), flat)
            .map_err(|e| Error::arg(e.to_string()))?;
        ScoreMatrix::new(r.row_labels, r.col_labels, values)
    }
}

impl From<ScoreMatrix> for ScoreMatrixRepr {
    fn from(m: ScoreMatrix) -> Self {
        ScoreMatrixRepr {
            values: m.values.outer_iter().map(|r| r.to_vec()).collect(),
            row_labels: m.row_labels,
            col_labels: m.col_labels,
        }
    }
}

impl ScoreMatrix {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (row_labels.len(), col_labels.len()) {
            return Err(Error::arg(format!(
                "score matrix shape {:?} does not match {} row and {} column labels",
                values.dim(),
                row_labels.len(),
                col_labels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("score matrix contains non-finite entries"));
        }
        Ok(ScoreMatrix {
            row_labels,
            col_labels,
            values,
        })
    }

    /// Matrix with positional column labels `"0"`, `"1"`, ...
    pub fn from_rows(row_labels: Vec<String>, values: Array2<f64>) -> Result<Self> {
        let cols = (0..values.ncols()).map(|i| i.to_string()).collect();
        Self::new(row_labels, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn with_col_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.cols() {
            return Err(Error::arg("column label count does not match the matrix"));
        }
        self.col_labels = labels;
        Ok(self)
    }

    /// Column of the largest entry in each row; ties go to the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.values.outer_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    pub fn col_argmax(&self) -> Vec<usize> {
        self.values.columns().into_iter().map(|c| argmax(c.iter().copied())).collect()
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn embed_batched<T: Sync>(
    items: &[T],
    batch_size: usize,
    kind: &'static str,
    dim: usize,
    embed: impl Fn(&[T]) -> Result<Vec<Embedding>> + Sync,
) -> Result<Vec<Embedding>> {
    let batch_size = batch_size.max(1);
    let batches: Vec<Vec<Embedding>> = items
        .par_chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let start = b * batch_size;
            let wrap = |source: Error| Error::Backend {
                kind,
                start,
                end: start + chunk.len(),
                source: Box::new(source),
            };
            let out = embed(chunk).map_err(wrap)?;
            if out.len() != chunk.len() {
                return Err(wrap(Error::arg(format!(
                    "backend returned {} embeddings for {} inputs",
                    out.len(),
                    chunk.len()
                ))));
            }
            out.into_iter()
                .map(|e| {
                    if e.dim() != dim {
                        return Err(wrap(Error::arg(format!(
                            "backend returned a {}-dim embedding, expected {dim}",
                            e.dim()
                        ))));
                    }
                    Embedding::normalized(e.0).map_err(wrap)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

pub fn embed_texts_batched(
    backend: &dyn ScorerBackend,
    texts: &[String],
    batch_size: usize,
) -> Result<Vec<Embedding>> {
    embed_batched(texts, batch_size, "text", backend.dim(), |b| backend.embed_texts(b))
}

pub fn embed_images_batched(
    backend: &dyn ScorerBackend,
    images: &[ImageBuffer],
    batch_size: usize,
) -> Result<Vec<Embedding>> {
    embed_batched(images, batch_size, "image", backend.dim(), |b| backend.embed_images(b))
}

fn cosine_matrix(
    texts: &[String],
    text_emb: &[Embedding],
    image_emb: &[Embedding],
) -> Result<ScoreMatrix> {
    let mut values = Array2::zeros((text_emb.len(), image_emb.len()));
    for (q, t) in text_emb.iter().enumerate() {
        for (a, i) in image_emb.iter().enumerate() {
            values[[q, a]] = cosine_score(t, i)?;
        }
    }
    ScoreMatrix::from_rows(texts.to_vec(), values)
}

/// Entry `(q, a)` is the cosine between text `q` and image `a`.
pub fn score_pairs(
    backend: &dyn ScorerBackend,
    images: &[ImageBuffer],
    texts: &[String],
) -> Result<ScoreMatrix> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::arg("score_pairs needs at least one image and one text"));
    }
    let text_emb = embed_texts_batched(backend, texts, DEFAULT_BATCH_SIZE)?;
    let image_emb = embed_images_batched(backend, images, DEFAULT_BATCH_SIZE)?;
    cosine_matrix(texts, &text_emb, &image_emb)
}

/// Entrywise mean of matrices that share shape and labels. Each entry is
/// summed in sorted order, so the result does not depend on argument order.
pub fn ensemble_scores(matrices: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::arg("cannot ensemble an empty list of score matrices"))?;
    for m in &matrices[1..] {
        if m.values.dim() != first.values.dim()
            || m.row_labels != first.row_labels
            || m.col_labels != first.col_labels
        {
            return Err(Error::arg("ensembled score matrices must share shape and labels"));
        }
    }
    if matrices.len() == 1 {
        return Ok(first.clone());
    }
    let n = matrices.len() as f64;
    let mut buf = Vec::with_capacity(matrices.len());
    let values = Array2::from_shape_fn(first.values.dim(), |idx| {
        buf.clear();
        buf.extend(matrices.iter().map(|m| m.values[idx]));
        buf.sort_by(f64::total_cmp);
        buf.iter().sum::<f64>() / n
    });
    ScoreMatrix::new(first.row_labels.clone(), first.col_labels.clone(), values)
}

/// One or more backends whose scores are averaged.
#[derive(Clone)]
pub struct Scorer {
    backends: Vec<Arc<dyn ScorerBackend>>,
    batch_size: usize,
}

impl std::fmt::Debug for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scorer")
            .field("backends", &self.backend_ids())
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

impl Scorer {
    pub fn new(backend: impl ScorerBackend + 'static) -> Self {
        Scorer {
            backends: vec![Arc::new(backend)],
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn ensemble(backends: Vec<Arc<dyn ScorerBackend>>) -> Result<Self> {
        if backends.is_empty() {
            return Err(Error::arg("a scorer needs at least one backend"));
        }
        Ok(Scorer {
            backends,
            batch_size: DEFAULT_BATCH_SIZE,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.iter().map(|b| b.id().to_string()).collect()
    }

    pub fn backends(&self) -> &[Arc<dyn ScorerBackend>] {
        &self.backends
    }

    /// Backend-averaged scores of `texts` against single images.
    pub fn score(&self, images: &[ImageBuffer], texts: &[String]) -> Result<ScoreMatrix> {
        if images.is_empty() || texts.is_empty() {
            return Err(Error::arg("scoring needs at least one image and one text"));
        }
        let matrices = self
            .backends
            .iter()
            .map(|b| {
                let t = embed_texts_batched(b.as_ref(), texts, self.batch_size)?;
                let i = embed_images_batched(b.as_ref(), images, self.batch_size)?;
                cosine_matrix(texts, &t, &i)
            })
            .collect::<Result<Vec<_>>>()?;
        ensemble_scores(&matrices)
    }

    /// Scores against multi-variant prompts: one matrix per backend and
    /// variant index, then a flat mean over all of them. Column `a` is
    /// prompt `a`.
    pub fn score_prompts(&self, prompts: &[VisualPrompt], texts: &[String]) -> Result<ScoreMatrix> {
        let variants = prompts
            .first()
            .map(VisualPrompt::len)
            .ok_or_else(|| Error::arg("scoring needs at least one prompt"))?;
        if variants == 0 || prompts.iter().any(|p| p.len() != variants) {
            return Err(Error::arg("all prompts must carry the same non-zero number of variants"));
        }
        if texts.is_empty() {
            return Err(Error::arg("scoring needs at least one text"));
        }
        let images: Vec<ImageBuffer> = (0..variants)
            .flat_map(|v| prompts.iter().map(move |p| p.variants[v].clone()))
            .collect();
        let n = prompts.len();
        let mut matrices = Vec::with_capacity(self.backends.len() * variants);
        for b in &self.backends {
            let t = embed_texts_batched(b.as_ref(), texts, self.batch_size)?;
            let i = embed_images_batched(b.as_ref(), &images, self.batch_size)?;
            for v in 0..variants {
                matrices.push(cosine_matrix(texts, &t, &i[v * n..(v + 1) * n])?);
            }
        }
        ensemble_scores(&matrices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::Color;
    use ndarray::array;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::raw(v.to_vec())
    }

    #[test]
    fn cosine_examples() {
        let a = emb(&[0.6, 0.8]);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_score(&emb(&[1.0, 0.0]), &emb(&[0.0, 3.0])).unwrap().abs() < 1e-12);
        assert!((cosine_score(&a, &emb(&[-0.6, -0.8])).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_score(&a, &emb(&[1.0, 0.0, 0.0])).is_err());
        assert!(cosine_score(&a, &emb(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn normalization_rejects_degenerate() {
        assert!(Embedding::normalized(vec![0.0; 4]).is_err());
        assert!(Embedding::normalized(vec![f32::NAN, 1.0]).is_err());
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ensemble_examples() {
        let m = |v: f64| ScoreMatrix::from_rows(vec!["q".into()], array![[v]]).unwrap();
        let mean = ensemble_scores(&[m(0.2), m(0.4)]).unwrap();
        assert!((mean.get(0, 0) - 0.3).abs() < 1e-15);
        assert_eq!(ensemble_scores(&[m(0.7)]).unwrap(), m(0.7));
        assert!(ensemble_scores(&[]).is_err());

        let other = ScoreMatrix::from_rows(vec!["z".into()], array![[0.1]]).unwrap();
        assert!(ensemble_scores(&[m(0.1), other]).is_err());
        let wide = ScoreMatrix::from_rows(vec!["q".into()], array![[0.1, 0.2]]).unwrap();
        assert!(ensemble_scores(&[m(0.1), wide]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let m = ScoreMatrix::from_rows(vec!["a".into(), "b".into()], array![[0.5, 0.5], [0.1, 0.9]]).unwrap();
        assert_eq!(m.row_argmax(), vec![0, 1]);
        assert_eq!(m.col_argmax(), vec![0, 1]);
    }

    #[test]
    fn matrix_json_round_trip() {
        let m = ScoreMatrix::from_rows(vec!["a".into()], array![[0.25, -0.5]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ScoreMatrix>(&s).unwrap(), m);
        assert!(ScoreMatrix::from_rows(vec!["a".into()], array![[f64::NAN]]).is_err());
    }

    struct Failing;

    impl ScorerBackend for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
            Ok(texts.iter().map(|_| emb(&[1.0, 0.0])).collect())
        }
        fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>> {
            if images.iter().any(|i| i.get(0, 0) == Color::RED) {
                return Err(Error::arg("cannot embed red"));
            }
            Ok(images.iter().map(|_| emb(&[0.0, 1.0])).collect())
        }
    }

    #[test]
    fn backend_failures_name_the_batch() {
        let mut images = vec![ImageBuffer::filled(2, 2, Color::BLACK).unwrap(); 70];
        images[40] = ImageBuffer::filled(2, 2, Color::RED).unwrap();
        let err = score_pairs(&Failing, &images, &["t".to_string()]).unwrap_err();
        match err {
            Error::Backend { kind, start, end, .. } => {
                assert_eq!((kind, start, end), ("image", 32, 64));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-1.0f32..1.0, 6),
            b in proptest::collection::vec(-1.0f32..1.0, 6),
            s in 0.1f32..10.0,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            prop_assume!(ea.norm() > 1e-3 && eb.norm() > 1e-3);
            let ab = cosine_score(&ea, &eb).unwrap();
            prop_assert!((ab - cosine_score(&eb, &ea).unwrap()).abs() < 1e-12);
            let scaled = emb(&a.iter().map(|v| v * s).collect::<Vec<_>>());
            prop_assert!((ab - cosine_score(&scaled, &eb).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn ensemble_is_order_invariant(vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let ms: Vec<ScoreMatrix> = vals
                .chunks(4)
                .map(|c| ScoreMatrix::from_rows(vec!["a".into(), "b".into()],
                    Array2::from_shape_vec((2, 2), c.to_vec()).unwrap()).unwrap())
                .collect();
            let fwd = ensemble_scores(&ms).unwrap();
            let rev: Vec<_> = ms.iter().rev().cloned().collect();
            prop_assert_eq!(fwd.clone(), ensemble_scores(&rev).unwrap());
            let rot = vec![ms[1].clone(), ms[2].clone(), ms[0].clone()];
            prop_assert_eq!(fwd, ensemble_scores(&rot).unwrap());
        }
    }
}
