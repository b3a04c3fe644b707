//! Deterministic stand-in for a vision-language model.
//!
//! Texts embed to pseudo-random unit vectors derived from a keyed hash.
//! An image that carries a registered marker footprint embeds close to the
//! vector of the text it is aligned with; any other image embeds to a
//! hash of its pixels. With a large enough dimension independent vectors
//! are nearly orthogonal, so a planted alignment is always the argmax.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Embedding, ScorerBackend};
use crate::error::{Error, Result};
use crate::imgcore::{BBox, Color, ImageBuffer, PointF};
use crate::markers::{bbox_marker_pixels, marker_pixels, MarkerSpec};

/// Minimum Jaccard overlap between the marker-colored pixels of an image
/// and a footprint for the footprint to count as present.
const FOOTPRINT_MATCH: f64 = 0.9;
const NOISE_NORM: f64 = 0.05;

/// Marker footprint an image must carry to be aligned with a text.
#[derive(Debug, Clone, PartialEq)]
pub enum Signature {
    /// `spec` drawn at exactly `center`.
    Circle { center: PointF, spec: MarkerSpec },
    /// Box ellipse drawn around `bbox`.
    Ellipse { bbox: BBox, spec: MarkerSpec },
    /// Any `spec` marker whose center falls inside `region`.
    CircleIn { region: BBox, spec: MarkerSpec },
}

impl Signature {
    fn color(&self) -> Color {
        match self {
            Signature::Circle { spec, .. }
            | Signature::Ellipse { spec, .. }
            | Signature::CircleIn { spec, .. } => spec.color,
        }
    }
}

/// Pixels of one color in an image, with their bounding box.
struct ColorMask {
    width: u32,
    height: u32,
    hits: Vec<bool>,
    count: usize,
    bounds: Option<(u32, u32, u32, u32)>,
}

impl ColorMask {
    fn new(image: &ImageBuffer, color: Color) -> Self {
        let mut hits = vec![false; (image.width() * image.height()) as usize];
        let mut count = 0;
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for (i, (x, y, c)) in image.pixels().enumerate() {
            if c == color {
                hits[i] = true;
                count += 1;
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        ColorMask {
            width: image.width(),
            height: image.height(),
            hits,
            count,
            bounds,
        }
    }

    fn near(&self, p: PointF, slack: f64) -> bool {
        self.bounds.is_some_and(|(x0, y0, x1, y1)| {
            p.x >= x0 as f64 - slack
                && p.x <= x1 as f64 + slack
                && p.y >= y0 as f64 - slack
                && p.y <= y1 as f64 + slack
        })
    }

    fn jaccard(&self, footprint: &[(u32, u32)]) -> f64 {
        let inter = footprint
            .iter()
            .filter(|&&(x, y)| self.hits[(y * self.width + x) as usize])
            .count();
        let union = self.count + footprint.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Marker center estimated from the colored bounding box, using the
    /// known outer radius on sides clipped by the image border.
    fn estimated_center(&self, outer_radius: f64) -> Option<PointF> {
        let (x0, y0, x1, y1) = self.bounds?;
        let axis = |lo: u32, hi: u32, extent: u32| {
            let (lo_f, hi_f) = (lo as f64, hi as f64);
            match (lo == 0, hi + 1 == extent) {
                (true, false) => hi_f - outer_radius,
                (false, true) => lo_f + outer_radius,
                _ => (lo_f + hi_f) / 2.0,
            }
        };
        Some(PointF::new(axis(x0, x1, self.width), axis(y0, y1, self.height)))
    }
}

fn match_score(sig: &Signature, image: &ImageBuffer, mask: &ColorMask) -> f64 {
    if mask.count == 0 {
        return 0.0;
    }
    match sig {
        Signature::Circle { center, spec } => {
            let (r, t) = spec.pixel_size(image.shorter_side());
            if !image.contains_point(center) || !mask.near(*center, r + t) {
                return 0.0;
            }
            mask.jaccard(&marker_pixels(image.width(), image.height(), spec, *center))
        }
        Signature::Ellipse { bbox, spec } => {
            let reach = bbox.w.max(bbox.h) + spec.pixel_size(image.shorter_side()).1;
            if !mask.near(bbox.center(), reach) {
                return 0.0;
            }
            mask.jaccard(&bbox_marker_pixels(image, bbox, spec))
        }
        Signature::CircleIn { region, spec } => {
            let (r, t) = spec.pixel_size(image.shorter_side());
            let (x0, y0, x1, y1) = mask.bounds.expect("non-empty mask has bounds");
            let outer = r + t / 2.0;
            let span = (x1 - x0).max(y1 - y0) as f64;
            if span > 2.0 * outer + 2.0 {
                return 0.0;
            }
            match mask.estimated_center(outer) {
                Some(c) if region.contains(&c) => 1.0,
                _ => 0.0,
            }
        }
    }
}

/// How images without a registered footprint are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// Hash of the pixel data; any pixel change gives a new vector.
    PixelHash,
    /// Every unaligned image embeds to the same vector, so markers have no
    /// effect on scores.
    Constant,
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    id: String,
    seed: u64,
    dim: usize,
    mode: ImageMode,
    alignments: Vec<(String, Signature)>,
}

/// Builds a synthetic backend aligning each text key with the given
/// footprints.
pub fn synthetic_oracle(
    seed: u64,
    dim: usize,
    alignment: impl IntoIterator<Item = (String, Signature)>,
) -> Result<SyntheticOracle> {
    let mut oracle = SyntheticOracle::new(seed, dim)?;
    for (key, sig) in alignment {
        oracle.align(key, sig);
    }
    Ok(oracle)
}

fn hash_vector(seed: u64, dim: usize, domain: &[u8], content: &[u8]) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain);
    hasher.update(content);
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn to_embedding(v: Vec<f64>) -> Embedding {
    Embedding::normalized(v.into_iter().map(|x| x as f32).collect())
        .expect("hash vectors are finite and non-zero")
}

fn pixel_digest(image: &ImageBuffer) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hasher.finalize().to_vec()
}

impl SyntheticOracle {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::arg(format!("synthetic embeddings need dim >= 8, got {dim}")));
        }
        Ok(SyntheticOracle {
            id: format!("synthetic-{seed}-{dim}"),
            seed,
            dim,
            mode: ImageMode::PixelHash,
            alignments: Vec::new(),
        })
    }

    pub fn with_image_mode(mut self, mode: ImageMode) -> Self {
        self.mode = mode;
        if mode == ImageMode::Constant {
            self.id = format!("blind-{}-{}", self.seed, self.dim);
        }
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Registers `signature` as a footprint of `key`. A key may own several
    /// footprints.
    pub fn align(&mut self, key: impl Into<String>, signature: Signature) -> &mut Self {
        self.alignments.push((key.into(), signature));
        self
    }

    pub fn alignments(&self) -> &[(String, Signature)] {
        &self.alignments
    }

    pub fn text_vector(&self, text: &str) -> Embedding {
        to_embedding(hash_vector(self.seed, self.dim, b"text", text.as_bytes()))
    }

    /// The aligned key whose footprint best matches `image`, if any.
    pub fn detect(&self, image: &ImageBuffer) -> Option<&str> {
        let mut masks: HashMap<Color, ColorMask> = HashMap::new();
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, sig)) in self.alignments.iter().enumerate() {
            let mask = masks
                .entry(sig.color())
                .or_insert_with(|| ColorMask::new(image, sig.color()));
            let score = match_score(sig, image, mask);
            let threshold = match sig {
                Signature::CircleIn { .. } => 1.0,
                _ => FOOTPRINT_MATCH,
            };
            if score >= threshold && best.map_or(true, |(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| self.alignments[i].0.as_str())
    }

    fn image_vector(&self, image: &ImageBuffer) -> Embedding {
        let digest = pixel_digest(image);
        match self.detect(image) {
            Some(key) => {
                let base = hash_vector(self.seed, self.dim, b"text", key.as_bytes());
                let noise = hash_vector(self.seed, self.dim, b"noise", &digest);
                to_embedding(
                    base.iter()
                        .zip(&noise)
                        .map(|(b, n)| b + NOISE_NORM * n)
                        .collect(),
                )
            }
            None => match self.mode {
                ImageMode::PixelHash => to_embedding(hash_vector(self.seed, self.dim, b"image", &digest)),
                ImageMode::Constant => to_embedding(hash_vector(self.seed, self.dim, b"image", b"")),
            },
        }
    }
}

impl ScorerBackend for SyntheticOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.text_vector(t)).collect())
    }

    fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>> {
        Ok(images.iter().map(|i| self.image_vector(i)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markers::{build_bbox_prompt_ensemble, build_prompt_ensemble, default_marker, draw_marker};
    use crate::scoring::{cosine_score, score_pairs};

    fn background() -> ImageBuffer {
        let pixels = (0..96u32 * 80)
            .flat_map(|i| [(i % 180) as u8 + 30, (i / 96 % 150) as u8 + 40, 90])
            .collect();
        ImageBuffer::from_raw(96, 80, pixels).unwrap()
    }

    fn planted() -> (SyntheticOracle, ImageBuffer, ImageBuffer) {
        let img = background();
        let spec = default_marker();
        let beak = PointF::new(30.0, 20.0);
        let tail = PointF::new(70.0, 60.0);
        let oracle = synthetic_oracle(
            7,
            128,
            [
                ("beak".to_string(), Signature::Circle { center: beak, spec }),
                ("tail".to_string(), Signature::Circle { center: tail, spec }),
            ],
        )
        .unwrap();
        let a = draw_marker(&img, &spec, beak).unwrap();
        let b = draw_marker(&img, &spec, tail).unwrap();
        (oracle, a, b)
    }

    #[test]
    fn planted_pair_scores_high_and_other_low() {
        let (oracle, beak_img, tail_img) = planted();
        let t = oracle.embed_texts(&["beak".into()]).unwrap();
        let i = oracle.embed_images(&[beak_img, tail_img]).unwrap();
        assert!(cosine_score(&t[0], &i[0]).unwrap() > 0.9);
        assert!(cosine_score(&t[0], &i[1]).unwrap() < 0.5);
    }

    #[test]
    fn deterministic_for_same_seed() {
        let (a, img, _) = planted();
        let (b, _, _) = planted();
        assert_eq!(a.embed_images(&[img.clone()]).unwrap(), b.embed_images(&[img]).unwrap());
        assert_eq!(
            a.embed_texts(&["x".into()]).unwrap(),
            b.embed_texts(&["x".into()]).unwrap()
        );
        let other = SyntheticOracle::new(8, 128).unwrap();
        assert_ne!(a.embed_texts(&["x".into()]).unwrap(), other.embed_texts(&["x".into()]).unwrap());
    }

    #[test]
    fn diagonal_dominates_in_planted_matrix() {
        let (oracle, beak_img, tail_img) = planted();
        let m = score_pairs(&oracle, &[beak_img, tail_img], &["beak".into(), "tail".into()]).unwrap();
        assert!(m.get(0, 0) > m.get(0, 1) && m.get(0, 0) > m.get(1, 0));
        assert!(m.get(1, 1) > m.get(1, 0) && m.get(1, 1) > m.get(0, 1));
        assert_eq!(m.row_argmax(), vec![0, 1]);
    }

    #[test]
    fn unmarked_image_is_unaligned() {
        let (oracle, _, _) = planted();
        assert_eq!(oracle.detect(&background()), None);
    }

    #[test]
    fn small_dim_rejected() {
        assert!(SyntheticOracle::new(0, 4).is_err());
    }

    #[test]
    fn ensemble_variants_keep_alignment() {
        let img = background();
        let spec = default_marker();
        let center = PointF::new(40.0, 40.0);
        let mut oracle = SyntheticOracle::new(1, 64).unwrap();
        oracle.align("k", Signature::Circle { center, spec });
        for v in build_prompt_ensemble(&img, center, &spec).unwrap().variants {
            assert_eq!(oracle.detect(&v), Some("k"));
        }

        let bbox = BBox::new(30.0, 25.0, 30.0, 20.0).unwrap();
        let mut oracle = SyntheticOracle::new(1, 64).unwrap();
        oracle.align("box", Signature::Ellipse { bbox, spec });
        for v in build_bbox_prompt_ensemble(&img, &bbox, &spec).unwrap().variants {
            assert_eq!(oracle.detect(&v), Some("box"));
        }
        let other = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let v = build_bbox_prompt_ensemble(&img, &other, &spec).unwrap();
        assert_eq!(oracle.detect(&v.variants[0]), None);
    }

    #[test]
    fn region_signature_handles_clipped_markers() {
        let img = background();
        let spec = default_marker();
        let cell = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut oracle = SyntheticOracle::new(1, 64).unwrap();
        oracle.align("corner", Signature::CircleIn { region: cell, spec });
        let marked = draw_marker(&img, &spec, PointF::new(5.0, 5.0)).unwrap();
        assert_eq!(oracle.detect(&marked), Some("corner"));
        let marked = draw_marker(&img, &spec, PointF::new(15.0, 5.0)).unwrap();
        assert_eq!(oracle.detect(&marked), None);
    }

    #[test]
    fn constant_mode_ignores_markers() {
        let blind = SyntheticOracle::new(3, 32).unwrap().with_image_mode(ImageMode::Constant);
        let img = background();
        let marked = draw_marker(&img, &default_marker(), PointF::new(10.0, 10.0)).unwrap();
        let e = blind.embed_images(&[img, marked]).unwrap();
        assert_eq!(e[0], e[1]);
    }
}
