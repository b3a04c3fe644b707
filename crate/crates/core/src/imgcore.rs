//! RGB raster buffers and the pixel operations the visual prompts are built
//! from: grayscale, Gaussian blur, cropping and PNG I/O.
//!
//! Pixel `(x, y)` sits at integer coordinates in the same frame as keypoints
//! and boxes: origin top-left, `x` to the right, `y` downwards.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round half up, the convention used for every pixel-space rounding.
pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u8; 3]", into = "[u8; 3]")]
pub struct Color {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Color {
    pub const RED: Color = Color::new(255, 0, 0);
    pub const BLACK: Color = Color::new(0, 0, 0);
    pub const WHITE: Color = Color::new(255, 255, 255);

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Color { r, g, b }
    }

    /// CSS named colors used by the marker ablation.
    pub fn from_name(name: &str) -> Option<Color> {
        let c = match name.to_ascii_lowercase().as_str() {
            "red" => Color::new(255, 0, 0),
            "green" => Color::new(0, 128, 0),
            "lime" => Color::new(0, 255, 0),
            "blue" => Color::new(0, 0, 255),
            "yellow" => Color::new(255, 255, 0),
            "cyan" | "aqua" => Color::new(0, 255, 255),
            "magenta" | "fuchsia" => Color::new(255, 0, 255),
            "black" => Color::BLACK,
            "white" => Color::WHITE,
            "gray" | "grey" => Color::new(128, 128, 128),
            "orange" => Color::new(255, 165, 0),
            "purple" => Color::new(128, 0, 128),
            _ => return None,
        };
        Some(c)
    }

    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }
}

impl From<[u8; 3]> for Color {
    fn from([r, g, b]: [u8; 3]) -> Self {
        Color { r, g, b }
    }
}

impl From<Color> for [u8; 3] {
    fn from(c: Color) -> Self {
        c.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PointF {
    pub x: f64,
    pub y: f64,
}

impl PointF {
    pub const fn new(x: f64, y: f64) -> Self {
        PointF { x, y }
    }

    pub fn distance(&self, other: &PointF) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for PointF {
    fn from([x, y]: [f64; 2]) -> Self {
        PointF { x, y }
    }
}

impl From<PointF> for [f64; 2] {
    fn from(p: PointF) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box `[x, y, w, h]` (COCO convention), real-valued pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::arg(format!(
                "bounding box [{x}, {y}, {w}, {h}] must be finite with positive extent"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn center(&self) -> PointF {
        PointF::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Half-open containment `[x, x+w) × [y, y+h)`.
    pub fn contains(&self, p: &PointF) -> bool {
        p.x >= self.x && p.x < self.right() && p.y >= self.y && p.y < self.bottom()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x, y, w, h]: [f64; 4]) -> Result<Self> {
        BBox::new(x, y, w, h)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(Error::arg(format!(
                "pixel buffer has {} bytes, expected {expected} for {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Color) -> Result<Self> {
        let pixels = color
            .to_array()
            .iter()
            .copied()
            .cycle()
            .take(3 * width as usize * height as usize)
            .collect();
        Self::from_raw(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Length of the shorter side.
    pub fn shorter_side(&self) -> u32 {
        self.width.min(self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        3 * (y as usize * self.width as usize + x as usize)
    }

    pub fn get(&self, x: u32, y: u32) -> Color {
        let o = self.offset(x, y);
        Color::new(self.pixels[o], self.pixels[o + 1], self.pixels[o + 2])
    }

    pub fn set(&mut self, x: u32, y: u32, c: Color) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&c.to_array());
    }

    pub fn contains_point(&self, p: &PointF) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Iterates `(x, y, color)` in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32, Color)> + '_ {
        let w = self.width;
        self.pixels.chunks_exact(3).enumerate().map(move |(i, c)| {
            let i = i as u32;
            (i % w, i / w, Color::new(c[0], c[1], c[2]))
        })
    }
}

/// Decodes an 8-bit grayscale, gray+alpha, RGB, RGBA or palette PNG into RGB.
pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat(
            "16-bit PNG channels are not supported".into(),
        ));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "bit depth {:?} after expansion",
            frame.bit_depth
        )));
    }
    let data = &buf[..frame.buffer_size()];
    let (w, h) = (frame.width, frame.height);
    let n = w as usize * h as usize;
    let mut rgb = Vec::with_capacity(3 * n);
    let stride = frame.line_size;
    let channels = frame.color_type.samples();
    for row in data.chunks_exact(stride).take(h as usize) {
        for px in row[..w as usize * channels].chunks_exact(channels) {
            match frame.color_type {
                png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                    rgb.extend_from_slice(&[px[0], px[0], px[0]])
                }
                png::ColorType::Rgb | png::ColorType::Rgba => rgb.extend_from_slice(&px[..3]),
                png::ColorType::Indexed => {
                    return Err(Error::UnsupportedFormat(
                        "palette image was not expanded".into(),
                    ))
                }
            }
        }
    }
    ImageBuffer::from_raw(w, h, rgb)
}

/// Encodes as 8-bit RGB with fixed compression and filter settings, so equal
/// buffers always produce identical bytes.
pub fn encode_png(image: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width, image.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Default);
        encoder.set_filter(png::FilterType::Sub);
        encoder.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
        let mut writer = encoder
            .write_header()
            .expect("writing a PNG header to memory cannot fail");
        writer
            .write_image_data(&image.pixels)
            .expect("buffer length is validated at construction");
    }
    out
}

/// BT.601 luma, rounded half up.
pub fn luma(c: Color) -> u8 {
    let weighted = 299 * c.r as u32 + 587 * c.g as u32 + 114 * c.b as u32;
    ((weighted + 500) / 1000) as u8
}

pub fn to_grayscale(image: &ImageBuffer) -> ImageBuffer {
    let pixels = image
        .pixels
        .chunks_exact(3)
        .flat_map(|c| {
            let l = luma(Color::new(c[0], c[1], c[2]));
            [l, l, l]
        })
        .collect();
    ImageBuffer {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// Blur sigma used for the blurred-exterior prompt variant.
pub fn default_blur_sigma(image: &ImageBuffer) -> f64 {
    0.02 * image.shorter_side() as f64
}

/// Normalized 1-D Gaussian weights for offsets `-radius..=radius`,
/// radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Separable Gaussian blur with clamp-to-edge borders. The intermediate pass
/// is kept in floating point and rounded once at the end.
pub fn gaussian_blur(image: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (image.width as i64, image.height as i64);
    let idx = |x: i64, y: i64| 3 * (y * w + x) as usize;

    let mut horizontal = vec![0f64; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, weight) in kernel.iter().enumerate() {
                let sx = (x + k as i64 - radius).clamp(0, w - 1);
                let o = idx(sx, y);
                for c in 0..3 {
                    acc[c] += weight * image.pixels[o + c] as f64;
                }
            }
            horizontal[idx(x, y)..idx(x, y) + 3].copy_from_slice(&acc);
        }
    }

    let mut pixels = vec![0u8; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, weight) in kernel.iter().enumerate() {
                let sy = (y + k as i64 - radius).clamp(0, h - 1);
                let o = idx(x, sy);
                for c in 0..3 {
                    acc[c] += weight * horizontal[o + c];
                }
            }
            let o = idx(x, y);
            for c in 0..3 {
                pixels[o + c] = round_half_up(acc[c]).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(ImageBuffer {
        width: image.width,
        height: image.height,
        pixels,
    })
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)` obtained from a real box:
/// floor the origin, round the extent, clamp to the image.
pub fn pixel_rect(image: &ImageBuffer, bbox: &BBox) -> Option<(u32, u32, u32, u32)> {
    let x0 = bbox.x.floor();
    let y0 = bbox.y.floor();
    let x1 = x0 + round_half_up(bbox.w);
    let y1 = y0 + round_half_up(bbox.h);
    let (w, h) = (image.width as f64, image.height as f64);
    let (x0, x1) = (x0.clamp(0.0, w), x1.clamp(0.0, w));
    let (y0, y1) = (y0.clamp(0.0, h), y1.clamp(0.0, h));
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

pub fn crop(image: &ImageBuffer, bbox: &BBox) -> Result<ImageBuffer> {
    let (x0, y0, x1, y1) = pixel_rect(image, bbox).ok_or_else(|| {
        Error::arg(format!(
            "crop box {:?} does not intersect the {}x{} image",
            bbox, image.width, image.height
        ))
    })?;
    let mut pixels = Vec::with_capacity(3 * ((x1 - x0) * (y1 - y0)) as usize);
    for y in y0..y1 {
        let start = image.offset(x0, y);
        let end = image.offset(x1 - 1, y) + 3;
        pixels.extend_from_slice(&image.pixels[start..end]);
    }
    ImageBuffer::from_raw(x1 - x0, y1 - y0, pixels)
}
