//! Visual prompts: markers drawn onto an image to point the model at a
//! location, the outside-blur/gray variants, and the crop baseline.
//!
//! Markers are rasterized with hard thresholds on a per-pixel shape
//! predicate (no anti-aliasing), so marked pixel sets are exact and
//! reproducible.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{
    default_blur_sigma, gaussian_blur, pixel_rect, round_half_up, to_grayscale, BBox, Color,
    ImageBuffer, PointF,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Rectangle,
    Cross,
    Arrow,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Rectangle, Shape::Cross, Shape::Arrow];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Rectangle => "rectangle",
            Shape::Cross => "cross",
            Shape::Arrow => "arrow",
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::arg(format!("unknown marker shape {s:?}")))
    }
}

/// Shape, color and size of a marker. Sizes are fractions of the image's
/// shorter side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMarkerSpec")]
pub struct MarkerSpec {
    pub shape: Shape,
    pub color: Color,
    pub radius_frac: f64,
    pub thickness_frac: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarkerSpec {
    shape: Shape,
    color: Color,
    radius_frac: f64,
    thickness_frac: f64,
}

impl TryFrom<RawMarkerSpec> for MarkerSpec {
    type Error = Error;

    fn try_from(raw: RawMarkerSpec) -> Result<Self> {
        MarkerSpec::new(raw.shape, raw.color, raw.radius_frac, raw.thickness_frac)
    }
}

impl Default for MarkerSpec {
    fn default() -> Self {
        default_marker()
    }
}

/// The red circle: radius 0.06 and stroke 0.01 of the shorter side.
pub fn default_marker() -> MarkerSpec {
    MarkerSpec {
        shape: Shape::Circle,
        color: Color::RED,
        radius_frac: 0.06,
        thickness_frac: 0.01,
    }
}

impl MarkerSpec {
    pub fn new(shape: Shape, color: Color, radius_frac: f64, thickness_frac: f64) -> Result<Self> {
        if !(radius_frac > 0.0 && radius_frac <= 0.5) {
            return Err(Error::arg(format!(
                "radius_frac must lie in (0, 0.5], got {radius_frac}"
            )));
        }
        if !(thickness_frac > 0.0 && thickness_frac.is_finite()) {
            return Err(Error::arg(format!(
                "thickness_frac must be positive, got {thickness_frac}"
            )));
        }
        Ok(MarkerSpec {
            shape,
            color,
            radius_frac,
            thickness_frac,
        })
    }

    /// Pixel radius and stroke width for an image whose shorter side is
    /// `shorter_side`. The stroke never drops below one pixel.
    pub fn pixel_size(&self, shorter_side: u32) -> (f64, f64) {
        let s = shorter_side as f64;
        let radius = round_half_up(self.radius_frac * s);
        let thickness = round_half_up(self.thickness_frac * s).max(1.0);
        (radius, thickness)
    }

    pub fn with_shape(self, shape: Shape) -> Self {
        MarkerSpec { shape, ..self }
    }

    pub fn with_color(self, color: Color) -> Self {
        MarkerSpec { color, ..self }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx).hypot(p.1 - qy)
}

/// Arrow segments: a shaft of length `2r` coming from the lower right and
/// ending at the target, plus two head strokes of `0.6r` at ±30°.
fn arrow_segments(center: PointF, radius: f64) -> [((f64, f64), (f64, f64)); 3] {
    let tip = (center.x, center.y);
    let back = (FRAC_1_SQRT_2, FRAC_1_SQRT_2);
    let tail = (tip.0 + 2.0 * radius * back.0, tip.1 + 2.0 * radius * back.1);
    let head = |angle: f64| {
        let (s, c) = angle.sin_cos();
        let dir = (back.0 * c - back.1 * s, back.0 * s + back.1 * c);
        (tip.0 + 0.6 * radius * dir.0, tip.1 + 0.6 * radius * dir.1)
    };
    let deg30 = 30f64.to_radians();
    [(tail, tip), (tip, head(deg30)), (tip, head(-deg30))]
}

fn on_stroke(shape: Shape, center: PointF, radius: f64, half: f64, x: f64, y: f64) -> bool {
    let dx = (x - center.x).abs();
    let dy = (y - center.y).abs();
    match shape {
        Shape::Circle => (dx.hypot(dy) - radius).abs() <= half,
        Shape::Rectangle => {
            let d = if dx <= radius && dy <= radius {
                (radius - dx).min(radius - dy)
            } else {
                (dx - radius).max(0.0).hypot((dy - radius).max(0.0))
            };
            d <= half
        }
        Shape::Cross => {
            (dx - radius).max(0.0).hypot(dy) <= half || dx.hypot((dy - radius).max(0.0)) <= half
        }
        Shape::Arrow => arrow_segments(center, radius)
            .iter()
            .any(|&(a, b)| segment_distance((x, y), a, b) <= half),
    }
}

fn scan_window(
    width: u32,
    height: u32,
    center: PointF,
    reach: f64,
) -> impl Iterator<Item = (u32, u32)> {
    let clamp_x = |v: f64| v.clamp(0.0, width as f64 - 1.0) as u32;
    let clamp_y = |v: f64| v.clamp(0.0, height as f64 - 1.0) as u32;
    let (x0, x1) = (clamp_x((center.x - reach).floor()), clamp_x((center.x + reach).ceil()));
    let (y0, y1) = (clamp_y((center.y - reach).floor()), clamp_y((center.y + reach).ceil()));
    (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
}

/// Pixels painted by `spec` centered at `center` on a `width`×`height` canvas,
/// in row-major order.
pub fn marker_pixels(width: u32, height: u32, spec: &MarkerSpec, center: PointF) -> Vec<(u32, u32)> {
    let (radius, thickness) = spec.pixel_size(width.min(height));
    let half = thickness / 2.0;
    let reach = match spec.shape {
        Shape::Arrow => 2.0 * radius,
        Shape::Rectangle => radius * SQRT_2,
        Shape::Circle | Shape::Cross => radius,
    } + half
        + 1.0;
    scan_window(width, height, center, reach)
        .filter(|&(x, y)| on_stroke(spec.shape, center, radius, half, x as f64, y as f64))
        .collect()
}

fn paint(image: &ImageBuffer, pixels: &[(u32, u32)], color: Color) -> ImageBuffer {
    let mut out = image.clone();
    for &(x, y) in pixels {
        out.set(x, y, color);
    }
    out
}

fn check_center(image: &ImageBuffer, center: PointF) -> Result<()> {
    if image.contains_point(&center) {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "marker center ({}, {}) lies outside the {}x{} image",
            center.x,
            center.y,
            image.width(),
            image.height()
        )))
    }
}

pub fn draw_marker(image: &ImageBuffer, spec: &MarkerSpec, center: PointF) -> Result<ImageBuffer> {
    check_center(image, center)?;
    let pixels = marker_pixels(image.width(), image.height(), spec, center);
    Ok(paint(image, &pixels, spec.color))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleRegion {
    pub center: PointF,
    pub radius: f64,
}

impl CircleRegion {
    pub fn new(center: PointF, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::arg(format!("region radius must be positive, got {radius}")));
        }
        Ok(CircleRegion { center, radius })
    }
}

/// Axis-aligned ellipse; the region analogue of a box marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseRegion {
    pub center: PointF,
    pub semi_x: f64,
    pub semi_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Circle(CircleRegion),
    Ellipse(EllipseRegion),
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Circle(c) => (x - c.center.x).hypot(y - c.center.y) <= c.radius,
            Region::Ellipse(e) => {
                let u = (x - e.center.x) / e.semi_x;
                let v = (y - e.center.y) / e.semi_y;
                u * u + v * v <= 1.0
            }
        }
    }
}

impl From<CircleRegion> for Region {
    fn from(c: CircleRegion) -> Self {
        Region::Circle(c)
    }
}

impl From<EllipseRegion> for Region {
    fn from(e: EllipseRegion) -> Self {
        Region::Ellipse(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutsideEffect {
    Blur,
    Grayscale,
}

impl OutsideEffect {
    pub fn label(self) -> &'static str {
        match self {
            OutsideEffect::Blur => "blur-out",
            OutsideEffect::Grayscale => "gray-out",
        }
    }
}

/// Keeps pixels inside `region` and replaces the rest with the blurred or
/// grayscaled image.
pub fn apply_outside_effect(
    image: &ImageBuffer,
    region: &Region,
    effect: OutsideEffect,
) -> ImageBuffer {
    let effected = match effect {
        OutsideEffect::Grayscale => to_grayscale(image),
        OutsideEffect::Blur => gaussian_blur(image, default_blur_sigma(image))
            .expect("default sigma is positive for non-empty images"),
    };
    let mut out = image.clone();
    for (x, y, c) in effected.pixels() {
        if !region.contains(x as f64, y as f64) {
            out.set(x, y, c);
        }
    }
    out
}

/// A set of image variants for one marked location, scored jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt {
    pub variants: Vec<ImageBuffer>,
    pub labels: Vec<String>,
}

impl VisualPrompt {
    pub fn single(image: ImageBuffer, label: impl Into<String>) -> Self {
        VisualPrompt {
            variants: vec![image],
            labels: vec![label.into()],
        }
    }

    fn ensemble(marked: ImageBuffer, region: Region, base: &str) -> Self {
        let mut variants = vec![marked];
        let mut labels = vec![base.to_string()];
        for effect in [OutsideEffect::Blur, OutsideEffect::Grayscale] {
            variants.push(apply_outside_effect(&variants[0], &region, effect));
            labels.push(format!("{base}+{}", effect.label()));
        }
        VisualPrompt { variants, labels }
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// `[circle, circle+blur-out, circle+gray-out]`. The outside region is
/// bounded by the stroke's outer edge so the marker itself is untouched.
pub fn build_prompt_ensemble(
    image: &ImageBuffer,
    center: PointF,
    spec: &MarkerSpec,
) -> Result<VisualPrompt> {
    if spec.shape != Shape::Circle {
        return Err(Error::arg(format!(
            "the prompt ensemble is defined for circle markers, got {}",
            spec.shape.name()
        )));
    }
    let marked = draw_marker(image, spec, center)?;
    let (radius, thickness) = spec.pixel_size(image.shorter_side());
    let region = CircleRegion::new(center, radius + thickness / 2.0)?;
    Ok(VisualPrompt::ensemble(marked, region.into(), "circle"))
}

/// Centerline semi-axes and stroke width of the ellipse drawn around `bbox`.
/// The centerline passes `t` outside the box corners.
pub fn bbox_ellipse_geometry(image: &ImageBuffer, bbox: &BBox, spec: &MarkerSpec) -> (PointF, f64, f64, f64) {
    let (_, thickness) = spec.pixel_size(image.shorter_side());
    let semi_x = bbox.w / SQRT_2 + thickness;
    let semi_y = bbox.h / SQRT_2 + thickness;
    (bbox.center(), semi_x, semi_y, thickness)
}

/// Pixels of the ellipse stroke around `bbox`, row-major.
pub fn bbox_marker_pixels(image: &ImageBuffer, bbox: &BBox, spec: &MarkerSpec) -> Vec<(u32, u32)> {
    let (center, a, b, t) = bbox_ellipse_geometry(image, bbox, spec);
    let half = t / 2.0;
    let (ao, bo, ai, bi) = (a + half, b + half, a - half, b - half);
    scan_window(image.width(), image.height(), center, ao.max(bo) + 1.0)
        .filter(|&(x, y)| {
            let dx = x as f64 - center.x;
            let dy = y as f64 - center.y;
            let outer = (dx / ao).powi(2) + (dy / bo).powi(2);
            let inner = (dx / ai).powi(2) + (dy / bi).powi(2);
            outer <= 1.0 && inner >= 1.0
        })
        .collect()
}

/// Draws an ellipse circumscribing `bbox` in `spec.color` with `spec`'s
/// stroke width. Returns the marked image and the region bounded by the
/// stroke's outer edge.
pub fn marker_for_bbox(
    image: &ImageBuffer,
    bbox: &BBox,
    spec: &MarkerSpec,
) -> Result<(ImageBuffer, EllipseRegion)> {
    let bbox = BBox::new(bbox.x, bbox.y, bbox.w, bbox.h)?;
    if pixel_rect(image, &bbox).is_none() {
        return Err(Error::arg(format!(
            "box {:?} does not intersect the {}x{} image",
            bbox,
            image.width(),
            image.height()
        )));
    }
    let (center, a, b, t) = bbox_ellipse_geometry(image, &bbox, spec);
    let marked = paint(image, &bbox_marker_pixels(image, &bbox, spec), spec.color);
    let region = EllipseRegion {
        center,
        semi_x: a + t / 2.0,
        semi_y: b + t / 2.0,
    };
    Ok((marked, region))
}

/// Ellipse-marked box plus its blurred and grayscaled-exterior variants.
pub fn build_bbox_prompt_ensemble(
    image: &ImageBuffer,
    bbox: &BBox,
    spec: &MarkerSpec,
) -> Result<VisualPrompt> {
    let (marked, region) = marker_for_bbox(image, bbox, spec)?;
    Ok(VisualPrompt::ensemble(marked, region.into(), "ellipse"))
}

/// Square window of side `window_frac` times the shorter side around
/// `center`, shifted (not shrunk) to stay inside the image.
pub fn crop_window(image: &ImageBuffer, center: PointF, window_frac: f64) -> Result<BBox> {
    check_center(image, center)?;
    if !(window_frac > 0.0 && window_frac <= 1.0) {
        return Err(Error::arg(format!(
            "window_frac must lie in (0, 1], got {window_frac}"
        )));
    }
    let side = round_half_up(window_frac * image.shorter_side() as f64).max(1.0);
    let place = |c: f64, extent: u32| round_half_up(c - side / 2.0).clamp(0.0, extent as f64 - side);
    BBox::new(
        place(center.x, image.width()),
        place(center.y, image.height()),
        side,
        side,
    )
}

pub fn crop_prompt(image: &ImageBuffer, center: PointF, window_frac: f64) -> Result<ImageBuffer> {
    let window = crop_window(image, center, window_frac)?;
    crate::imgcore::crop(image, &window)
}
