//! Seeded generators for planted test datasets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use markprompt::imgcore::encode_png;
use markprompt::tasks::{KeypointInstance, RecInstance};
use markprompt::{BBox, ImageBuffer, PointF};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const PART_NAMES: [&str; 15] = [
    "beak",
    "crown",
    "nape",
    "left eye",
    "right eye",
    "throat",
    "breast",
    "belly",
    "back",
    "tail",
    "left wing",
    "right wing",
    "left leg",
    "right leg",
    "forehead",
];

/// Smooth gradient plus noise. Channels stay in [30, 210) so no pixel
/// ever equals a saturated marker color.
pub fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> ImageBuffer {
    let base: [f64; 3] = [
        rng.gen_range(40.0..120.0),
        rng.gen_range(40.0..120.0),
        rng.gen_range(40.0..120.0),
    ];
    let mut pixels = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            for (c, b) in base.iter().enumerate() {
                let grad = 50.0 * (x as f64 / w as f64) + 30.0 * (y as f64 / h as f64) * c as f64;
                let v = b + grad + rng.gen_range(0.0..30.0);
                pixels.push(v.clamp(30.0, 209.0) as u8);
            }
        }
    }
    ImageBuffer::from_raw(w, h, pixels).unwrap()
}

fn spaced_points(rng: &mut ChaCha8Rng, m: usize, w: u32, h: u32, min_dist: f64) -> Vec<PointF> {
    let mut pts: Vec<PointF> = Vec::new();
    while pts.len() < m {
        let p = PointF::new(
            rng.gen_range(3..w - 3) as f64,
            rng.gen_range(3..h - 3) as f64,
        );
        if pts.iter().all(|q| q.distance(&p) >= min_dist) {
            pts.push(p);
        }
    }
    pts
}

/// `n` keypoint instances with `m` drawn from `m_range`, on 160x120 images.
pub fn keypoint_instances(
    seed: u64,
    n: usize,
    m_range: std::ops::RangeInclusive<usize>,
) -> Vec<KeypointInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (w, h) = (160, 120);
            let m = rng.gen_range(m_range.clone());
            let image = background(&mut rng, w, h);
            let mut names: Vec<String> = PART_NAMES.iter().map(|s| s.to_string()).collect();
            names.shuffle(&mut rng);
            names.truncate(m);
            let locations = spaced_points(&mut rng, m, w, h, 12.0);
            let bbox = BBox::new(0.0, 0.0, w as f64, h as f64).unwrap();
            KeypointInstance::new(image, names, locations, bbox, "bird").unwrap()
        })
        .collect()
}

pub fn write_keypoint_dataset(dir: &Path, instances: &[KeypointInstance]) -> PathBuf {
    let entries: Vec<_> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let name = format!("kp_{i}.png");
            std::fs::write(dir.join(&name), encode_png(&inst.image)).unwrap();
            let kps: Vec<_> = inst
                .names
                .iter()
                .zip(&inst.locations)
                .map(|(n, p)| json!({"name": n, "x": p.x, "y": p.y}))
                .collect();
            json!({"image_path": name, "class_name": inst.class_name, "bbox": inst.bbox, "keypoints": kps})
        })
        .collect();
    let path = dir.join("keypoints.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&json!({"entries": entries})).unwrap(),
    )
    .unwrap();
    path
}

/// `n` REC instances with `k` proposals on 200x150 images; the ground
/// truth is a random proposal and every expression is unique.
pub fn rec_instances(seed: u64, n: usize, k: usize) -> Vec<RecInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expressions: Arc<[String]> = (0..n).map(|i| format!("the object numbered {i}")).collect();
    (0..n)
        .map(|i| {
            let (w, h) = (200, 150);
            let image = background(&mut rng, w, h);
            let centers = spaced_points(&mut rng, k, w, h, 20.0);
            let proposals: Vec<BBox> = centers
                .iter()
                .map(|c| {
                    let bw = rng.gen_range(12.0..40.0f64);
                    let bh = rng.gen_range(12.0..40.0f64);
                    BBox::new((c.x - bw / 2.0).max(0.0), (c.y - bh / 2.0).max(0.0), bw, bh).unwrap()
                })
                .collect();
            let gt = rng.gen_range(0..k);
            RecInstance {
                image,
                gt_box: proposals[gt],
                proposals,
                expression: expressions[i].clone(),
                distractor_pool: Arc::clone(&expressions),
            }
        })
        .collect()
}

pub fn write_rec_dataset(dir: &Path, instances: &[RecInstance]) -> PathBuf {
    let entries: Vec<_> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let name = format!("rec_{i}.png");
            std::fs::write(dir.join(&name), encode_png(&inst.image)).unwrap();
            json!({"image_path": name, "expression": inst.expression, "gt_box": inst.gt_box, "proposals": inst.proposals})
        })
        .collect();
    let path = dir.join("rec.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&json!({"entries": entries})).unwrap(),
    )
    .unwrap();
    path
}

pub fn write_bias_dataset(dir: &Path, seed: u64, n: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<_> = (0..n)
        .map(|i| {
            let name = format!("person_{i}.png");
            std::fs::write(dir.join(&name), encode_png(&background(&mut rng, 96, 128))).unwrap();
            match i % 3 {
                0 => json!({"image_path": name}),
                1 => json!({"image_path": name, "subject": {"point": [48, 40]}}),
                _ => json!({"image_path": name, "subject": {"box": [20, 16, 50, 100]}}),
            }
        })
        .collect();
    let path = dir.join("bias.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&json!({"entries": entries})).unwrap(),
    )
    .unwrap();
    path
}
