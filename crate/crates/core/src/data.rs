//! Dataset ingestion and report persistence.
//!
//! All files are UTF-8 JSON. Boxes are `[x, y, w, h]` in absolute pixels
//! and image paths are resolved relative to the file that names them.
//!
//! Keypoint dataset:
//!
//! ```json
//! {"entries": [{"image_path": "bird.png", "class_name": "bird",
//!   "bbox": [10, 12, 80, 60],
//!   "keypoints": [{"name": "beak", "x": 30, "y": 20}]}]}
//! ```
//!
//! REC dataset:
//!
//! ```json
//! {"entries": [{"image_path": "street.png", "expression": "the left car",
//!   "gt_box": [4, 40, 30, 20], "proposals": [[4, 40, 30, 20], [60, 38, 28, 22]]}]}
//! ```
//!
//! Bias dataset (`subject` is optional; absent means the image center):
//!
//! ```json
//! {"entries": [{"image_path": "p.png", "subject": {"box": [20, 10, 30, 60]}},
//!              {"image_path": "q.png", "subject": {"point": [40, 32]}}]}
//! ```
//!
//! Mask file, keyed by the dataset's `image_path` strings:
//!
//! ```json
//! {"masks": {"bird.png": "bird_mask.png"}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result, ValidationIssue};
use crate::imgcore::{decode_png, BBox, ImageBuffer, PointF};
use crate::tasks::{BiasCategories, KeypointInstance, RecInstance, SaliencyMask, Subject};

/// One loaded dataset entry with its position and source path.
#[derive(Debug, Clone)]
pub struct DatasetEntry<T> {
    pub index: usize,
    pub image_path: String,
    pub instance: T,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entries<E> {
    entries: Vec<E>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeypoint {
    name: String,
    x: f64,
    y: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeypointEntry {
    image_path: String,
    class_name: String,
    bbox: [f64; 4],
    keypoints: Vec<RawKeypoint>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecEntry {
    image_path: String,
    expression: String,
    gt_box: [f64; 4],
    proposals: Vec<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBiasEntry {
    image_path: String,
    #[serde(default)]
    subject: Option<RawSubject>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RawSubject {
    Point([f64; 2]),
    Box([f64; 4]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMasks {
    masks: BTreeMap<String, String>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Decodes every entry's image, concurrently, preserving order. Fails on
/// the first unreadable file.
fn load_images(base: &Path, paths: &[&str]) -> Result<Vec<ImageBuffer>> {
    paths
        .par_iter()
        .map(|p| load_image(&resolve(base, p)))
        .collect()
}

/// Collects issues for one entry.
struct Issues<'a> {
    entry: usize,
    out: &'a mut Vec<ValidationIssue>,
}

impl Issues<'_> {
    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.out.push(ValidationIssue {
            entry: self.entry,
            field: field.into(),
            reason: reason.into(),
        });
    }

    fn bbox(&mut self, field: &str, b: [f64; 4]) -> Option<BBox> {
        if b.iter().any(|v| !v.is_finite()) {
            self.push(field, "coordinates must be finite");
            return None;
        }
        if b[2] <= 0.0 || b[3] <= 0.0 {
            self.push(field, format!("width and height must be positive, got {} x {}", b[2], b[3]));
            return None;
        }
        BBox::new(b[0], b[1], b[2], b[3]).ok()
    }

    fn nonempty(&mut self, field: &str, s: &str) {
        if s.trim().is_empty() {
            self.push(field, "must not be empty");
        }
    }
}

fn finish<T>(issues: Vec<ValidationIssue>, items: Vec<T>) -> Result<Vec<T>> {
    if issues.is_empty() {
        Ok(items)
    } else {
        Err(Error::Validation(issues))
    }
}

fn in_bounds(p: PointF, image: &ImageBuffer) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < image.width() as f64 && p.y < image.height() as f64
}

pub fn load_keypoint_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry<KeypointInstance>>> {
    let path = path.as_ref();
    let raw: Entries<RawKeypointEntry> = read_json(path)?;
    let paths: Vec<&str> = raw.entries.iter().map(|e| e.image_path.as_str()).collect();
    let images = load_images(path, &paths)?;

    let mut issues = Vec::new();
    let mut out = Vec::new();
    for (i, (e, image)) in raw.entries.into_iter().zip(images).enumerate() {
        let mut v = Issues { entry: i, out: &mut issues };
        v.nonempty("class_name", &e.class_name);
        let bbox = v.bbox("bbox", e.bbox);
        if e.keypoints.is_empty() {
            v.push("keypoints", "at least one keypoint is required");
        }
        let mut seen = HashSet::new();
        for (k, kp) in e.keypoints.iter().enumerate() {
            let field = format!("keypoints[{k}]");
            if kp.name.trim().is_empty() {
                v.push(format!("{field}.name"), "must not be empty");
            } else if !seen.insert(kp.name.as_str()) {
                v.push(format!("{field}.name"), format!("duplicate keypoint name {:?}", kp.name));
            }
            if !in_bounds(PointF::new(kp.x, kp.y), &image) {
                v.push(
                    field,
                    format!(
                        "({}, {}) lies outside the {}x{} image",
                        kp.x,
                        kp.y,
                        image.width(),
                        image.height()
                    ),
                );
            }
        }
        if let (Some(bbox), true) = (bbox, issues.iter().all(|x| x.entry != i)) {
            let (names, locations) = e
                .keypoints
                .into_iter()
                .map(|kp| (kp.name, PointF::new(kp.x, kp.y)))
                .unzip();
            let instance = KeypointInstance::new(image, names, locations, bbox, e.class_name)?;
            out.push(DatasetEntry { index: i, image_path: e.image_path, instance });
        }
    }
    finish(issues, out)
}

/// The distractor pool of every instance is the list of all expressions in
/// the file.
pub fn load_rec_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry<RecInstance>>> {
    let path = path.as_ref();
    let raw: Entries<RawRecEntry> = read_json(path)?;
    let paths: Vec<&str> = raw.entries.iter().map(|e| e.image_path.as_str()).collect();
    let images = load_images(path, &paths)?;
    let pool: Arc<[String]> = raw.entries.iter().map(|e| e.expression.clone()).collect();

    let mut issues = Vec::new();
    let mut out = Vec::new();
    for (i, (e, image)) in raw.entries.into_iter().zip(images).enumerate() {
        let mut v = Issues { entry: i, out: &mut issues };
        v.nonempty("expression", &e.expression);
        let gt_box = v.bbox("gt_box", e.gt_box);
        if e.proposals.is_empty() {
            v.push("proposals", "at least one proposal is required");
        }
        let proposals: Vec<Option<BBox>> = e
            .proposals
            .iter()
            .enumerate()
            .map(|(k, b)| v.bbox(&format!("proposals[{k}]"), *b))
            .collect();
        if issues.iter().any(|x| x.entry == i) {
            continue;
        }
        out.push(DatasetEntry {
            index: i,
            image_path: e.image_path,
            instance: RecInstance {
                image,
                proposals: proposals.into_iter().flatten().collect(),
                expression: e.expression,
                gt_box: gt_box.expect("validated"),
                distractor_pool: Arc::clone(&pool),
            },
        });
    }
    finish(issues, out)
}

#[derive(Debug, Clone)]
pub struct BiasEntry {
    pub image: ImageBuffer,
    pub subject: Option<Subject>,
}

pub fn load_bias_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry<BiasEntry>>> {
    let path = path.as_ref();
    let raw: Entries<RawBiasEntry> = read_json(path)?;
    let paths: Vec<&str> = raw.entries.iter().map(|e| e.image_path.as_str()).collect();
    let images = load_images(path, &paths)?;

    let mut issues = Vec::new();
    let mut out = Vec::new();
    for (i, (e, image)) in raw.entries.into_iter().zip(images).enumerate() {
        let mut v = Issues { entry: i, out: &mut issues };
        let subject = match e.subject {
            None => None,
            Some(RawSubject::Point([x, y])) => {
                let p = PointF::new(x, y);
                if !in_bounds(p, &image) {
                    v.push("subject.point", format!("({x}, {y}) lies outside the image"));
                }
                Some(Subject::Point(p))
            }
            Some(RawSubject::Box(b)) => v.bbox("subject.box", b).map(Subject::Box),
        };
        if issues.iter().any(|x| x.entry == i) {
            continue;
        }
        out.push(DatasetEntry {
            index: i,
            image_path: e.image_path,
            instance: BiasEntry { image, subject },
        });
    }
    finish(issues, out)
}

pub fn load_categories(path: impl AsRef<Path>) -> Result<BiasCategories> {
    let path = path.as_ref();
    let cats: BiasCategories = read_json(path)?;
    cats.validate()?;
    Ok(cats)
}

/// Maps dataset `image_path` strings to resolved mask paths.
pub fn load_masks(path: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>> {
    let path = path.as_ref();
    let raw: RawMasks = read_json(path)?;
    Ok(raw
        .masks
        .into_iter()
        .map(|(img, mask)| (img, resolve(path, &mask)))
        .collect())
}

/// Reads an 8-bit PNG mask, binarized at 127.
pub fn load_mask(path: impl AsRef<Path>) -> Result<SaliencyMask> {
    Ok(SaliencyMask::from_image(&load_image(path.as_ref())?))
}

/// Serialized result of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskReport {
    pub task: String,
    pub config: RunConfig,
    /// Sorted by instance index.
    pub per_instance: Vec<serde_json::Value>,
    pub aggregate: BTreeMap<String, f64>,
}

pub fn report_json(report: &TaskReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| Error::arg(format!("report cannot be serialized: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(report: &TaskReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_json(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<TaskReport> {
    read_json(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{encode_png, Color};
    use std::fs;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
        let img = ImageBuffer::filled(w, h, Color::new(200, 10, 10)).unwrap();
        fs::write(dir.join(name), encode_png(&img)).unwrap();
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn keypoints_minimal() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 40, 30);
        let p = write(
            dir.path(),
            "kp.json",
            r#"{"entries":[{"image_path":"a.png","class_name":"bird","bbox":[0,0,40,30],
               "keypoints":[{"name":"beak","x":3,"y":4},{"name":"tail","x":39.5,"y":29}]}]}"#,
        );
        let ds = load_keypoint_dataset(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].instance.len(), 2);
        assert_eq!(ds[0].image_path, "a.png");
    }

    #[test]
    fn keypoint_issues_are_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 40, 30);
        let p = write(
            dir.path(),
            "kp.json",
            r#"{"entries":[
                {"image_path":"a.png","class_name":"bird","bbox":[0,0,40,30],
                 "keypoints":[{"name":"beak","x":3,"y":4},{"name":"beak","x":5,"y":4}]},
                {"image_path":"a.png","class_name":"bird","bbox":[0,0,40,30],
                 "keypoints":[{"name":"beak","x":3,"y":4}]},
                {"image_path":"a.png","class_name":"bird","bbox":[0,0,0,30],
                 "keypoints":[{"name":"beak","x":40,"y":4}]}]}"#,
        );
        let Err(Error::Validation(issues)) = load_keypoint_dataset(&p) else {
            panic!("expected validation error");
        };
        let entries: Vec<(usize, &str)> = issues.iter().map(|i| (i.entry, i.field.as_str())).collect();
        assert_eq!(entries, vec![(0, "keypoints[1].name"), (2, "bbox"), (2, "keypoints[0]")]);
    }

    #[test]
    fn missing_image_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "kp.json",
            r#"{"entries":[{"image_path":"nope.png","class_name":"bird","bbox":[0,0,4,4],
               "keypoints":[{"name":"beak","x":1,"y":1}]}]}"#,
        );
        match load_keypoint_dataset(&p) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("nope.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_error_has_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "kp.json", "{\"entries\": [{\"image_path\": 3}]}");
        assert!(matches!(load_keypoint_dataset(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rec_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "s.png", 100, 80);
        let p = write(
            dir.path(),
            "rec.json",
            r#"{"entries":[
                {"image_path":"s.png","expression":"the left car","gt_box":[0,0,10,10],"proposals":[[0,0,10,10],[50,0,10,10]]},
                {"image_path":"s.png","expression":"the right car","gt_box":[50,0,10,10],"proposals":[[50,0,10,10]]}]}"#,
        );
        let ds = load_rec_dataset(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].instance.distractor_pool.len(), 2);
        assert_eq!(ds[1].instance.proposals.len(), 1);

        let bad = write(
            dir.path(),
            "bad.json",
            r#"{"entries":[
                {"image_path":"s.png","expression":"a","gt_box":[0,0,10,10],"proposals":[]},
                {"image_path":"s.png","expression":"b","gt_box":[0,0,-1,10],"proposals":[[0,0,1,1]]}]}"#,
        );
        let Err(Error::Validation(issues)) = load_rec_dataset(&bad) else {
            panic!("expected validation error");
        };
        assert_eq!(issues.len(), 2);
        assert_eq!((issues[0].entry, issues[0].field.as_str()), (0, "proposals"));
        assert_eq!((issues[1].entry, issues[1].field.as_str()), (1, "gt_box"));
    }

    #[test]
    fn bias_masks_categories() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "p.png", 20, 20);
        let p = write(
            dir.path(),
            "bias.json",
            r#"{"entries":[{"image_path":"p.png"},{"image_path":"p.png","subject":{"point":[5,5]}},
               {"image_path":"p.png","subject":{"box":[1,1,5,5]}}]}"#,
        );
        let ds = load_bias_dataset(&p).unwrap();
        assert_eq!(ds[0].instance.subject, None);
        assert!(matches!(ds[2].instance.subject, Some(Subject::Box(_))));

        let m = write(dir.path(), "masks.json", r#"{"masks":{"p.png":"p.png"}}"#);
        let masks = load_masks(&m).unwrap();
        let mask = load_mask(&masks["p.png"]).unwrap();
        // luma of (200, 10, 10) is 65
        assert!(!mask.get(0, 0));

        let c = write(
            dir.path(),
            "cats.json",
            r#"{"positive":["good"],"neutral":["person"],"criminal":["thief"]}"#,
        );
        assert_eq!(load_categories(&c).unwrap().criminal, vec!["thief"]);
        let c = write(dir.path(), "cats2.json", r#"{"positive":[],"neutral":["a"],"criminal":["b"]}"#);
        assert!(load_categories(&c).unwrap_err().is_validation());
        assert!(matches!(load_categories(dir.path().join("none.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = TaskReport {
            task: "rec".into(),
            config: RunConfig { seed: 42, ..RunConfig::default() },
            per_instance: vec![serde_json::json!({"index": 0, "score": 0.1 + 0.2})],
            aggregate: BTreeMap::from([("accuracy".to_string(), 2.0 / 3.0)]),
        };
        let p = dir.path().join("r.json");
        write_report(&report, &p).unwrap();
        let back = read_report(&p).unwrap();
        assert_eq!(back, report);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"tau\"") && text.contains("\"seed\": 42") && text.contains("\"marker\""));

        fs::write(&p, "{\n  \"task\": \"rec\",\n  oops\n}").unwrap();
        assert!(matches!(read_report(&p), Err(Error::Parse { line: 3, .. })));
    }
}
