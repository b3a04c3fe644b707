use serde::{Deserialize, Serialize};

use super::render_keypoint_prompt;
use crate::error::{Error, Result};
use crate::imgcore::{luma, BBox, ImageBuffer, PointF};
use crate::markers::{draw_marker, MarkerSpec};
use crate::scoring::{PromptTemplate, Scorer};

/// 8-bit mask values above this are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// `M`×`M` grid of candidate locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub size: usize,
}

impl GridSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::arg("grid size must be at least 1"));
        }
        Ok(GridSpec { size })
    }
}

/// Binary foreground mask used to drop background grid points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl SaliencyMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::arg(format!(
                "mask has {} values, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(SaliencyMask {
            width,
            height,
            bits,
        })
    }

    /// Binarizes an 8-bit image: luma above [`MASK_THRESHOLD`] is foreground.
    pub fn from_image(image: &ImageBuffer) -> Self {
        SaliencyMask {
            width: image.width(),
            height: image.height(),
            bits: image.pixels().map(|(_, _, c)| luma(c) > MASK_THRESHOLD).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    /// Value at the pixel nearest to `p`.
    pub fn at(&self, p: PointF) -> bool {
        let clamp = |v: f64, n: u32| ((v + 0.5).floor()).clamp(0.0, n as f64 - 1.0) as u32;
        self.get(clamp(p.x, self.width), clamp(p.y, self.height))
    }
}

/// Cell centers `((j + 0.5) W / M, (i + 0.5) H / M)` in row-major order,
/// keeping only foreground points when a mask is given.
pub fn candidate_grid(
    image: &ImageBuffer,
    grid: GridSpec,
    mask: Option<&SaliencyMask>,
) -> Result<Vec<PointF>> {
    if let Some(mask) = mask {
        if (mask.width, mask.height) != (image.width(), image.height()) {
            return Err(Error::arg(format!(
                "mask is {}x{} but image is {}x{}",
                mask.width,
                mask.height,
                image.width(),
                image.height()
            )));
        }
    }
    let m = grid.size as f64;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let points: Vec<PointF> = (0..grid.size)
        .flat_map(|i| {
            (0..grid.size).map(move |j| PointF::new((j as f64 + 0.5) * w / m, (i as f64 + 0.5) * h / m))
        })
        .filter(|p| mask.map_or(true, |mask| mask.at(*p)))
        .collect();
    if points.is_empty() {
        return Err(Error::Degenerate(
            "saliency mask removes every grid location".into(),
        ));
    }
    Ok(points)
}

/// Fraction of predictions within `alpha * max(bbox.w, bbox.h)` of the
/// ground truth (inclusive).
pub fn pck(gt: &[PointF], pred: &[PointF], bbox: &BBox, alpha: f64) -> Result<f64> {
    let flags = pck_flags(gt, pred, bbox, alpha)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

pub fn pck_flags(gt: &[PointF], pred: &[PointF], bbox: &BBox, alpha: f64) -> Result<Vec<bool>> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(Error::arg(format!(
            "pck needs equally many (>= 1) ground-truth and predicted points, got {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let delta = alpha * bbox.w.max(bbox.h);
    Ok(gt.iter().zip(pred).map(|(g, p)| g.distance(p) <= delta).collect())
}

#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub template: PromptTemplate,
    pub marker: MarkerSpec,
    pub grid: GridSpec,
}

/// Ground truth for scoring a localization run.
#[derive(Debug, Clone)]
pub struct PckTarget<'a> {
    pub points: &'a [PointF],
    pub bbox: BBox,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub predictions: Vec<PointF>,
    pub candidate_indices: Vec<usize>,
    pub candidate_count: usize,
    pub correct: Option<Vec<bool>>,
    pub pck: Option<f64>,
}

/// For each name, the candidate location whose marked image scores highest
/// against the name's prompt.
pub fn localize_keypoints(
    image: &ImageBuffer,
    names: &[String],
    class_name: &str,
    scorer: &Scorer,
    opts: &LocalizeOptions,
    mask: Option<&SaliencyMask>,
    gt: Option<PckTarget<'_>>,
) -> Result<LocalizationResult> {
    if names.is_empty() {
        return Err(Error::arg("localization needs at least one keypoint name"));
    }
    let candidates = candidate_grid(image, opts.grid, mask)?;
    let images = candidates
        .iter()
        .map(|&c| draw_marker(image, &opts.marker, c))
        .collect::<Result<Vec<_>>>()?;
    let texts = names
        .iter()
        .map(|n| render_keypoint_prompt(&opts.template, n, class_name))
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score(&images, &texts)?;
    let candidate_indices = scores.row_argmax();
    let predictions: Vec<PointF> = candidate_indices.iter().map(|&i| candidates[i]).collect();
    let (correct, pck) = match gt {
        Some(t) => {
            let flags = pck_flags(t.points, &predictions, &t.bbox, t.alpha)?;
            let score = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
            (Some(flags), Some(score))
        }
        None => (None, None),
    };
    Ok(LocalizationResult {
        predictions,
        candidate_indices,
        candidate_count: candidates.len(),
        correct,
        pck,
    })
}
