//! Record/replay of embeddings as JSON Lines keyed by content hash.
//!
//! Each line is `{"key", "kind", "model", "embedding"}` where `key` is the
//! hex SHA-256 of the canonical content: the UTF-8 bytes of a text, or the
//! PNG bytes produced by [`encode_png`] for an image.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Embedding, ScorerBackend};
use crate::error::{Error, Result};
use crate::imgcore::{encode_png, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Text,
    Image,
}

impl EmbeddingKind {
    fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Text => "text",
            EmbeddingKind::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub kind: EmbeddingKind,
    pub model: String,
    pub embedding: Vec<f32>,
}

pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn image_key(image: &ImageBuffer) -> String {
    hex::encode(Sha256::digest(encode_png(image)))
}

/// Replays recorded embeddings.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    id: String,
    dim: usize,
    table: HashMap<(EmbeddingKind, String), Embedding>,
}

/// Loads a fixture file. With `model` set, only that model's lines are used.
pub fn fixture_backend(path: impl AsRef<Path>, model: Option<&str>) -> Result<FixtureBackend> {
    FixtureBackend::open(path, model)
}

impl FixtureBackend {
    pub fn open(path: impl AsRef<Path>, model: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records, model)
    }

    pub fn from_records(records: Vec<FixtureRecord>, model: Option<&str>) -> Result<Self> {
        let records: Vec<_> = records
            .into_iter()
            .filter(|r| model.map_or(true, |m| r.model == m))
            .collect();
        let first = records
            .first()
            .ok_or_else(|| Error::arg("fixture contains no embeddings for the requested model"))?;
        let id = model.map(str::to_string).unwrap_or_else(|| first.model.clone());
        let dim = first.embedding.len();
        let mut table = HashMap::with_capacity(records.len());
        for r in records {
            if r.embedding.len() != dim {
                return Err(Error::arg(format!(
                    "fixture entry {} has dim {}, expected {dim}",
                    r.key,
                    r.embedding.len()
                )));
            }
            table.insert((r.kind, r.key), Embedding::normalized(r.embedding)?);
        }
        Ok(FixtureBackend { id, dim, table })
    }

    fn lookup(&self, kind: EmbeddingKind, key: String) -> Result<Embedding> {
        self.table
            .get(&(kind, key.clone()))
            .cloned()
            .ok_or(Error::Lookup {
                kind: kind.name(),
                key,
            })
    }
}

impl ScorerBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| self.lookup(EmbeddingKind::Text, text_key(t)))
            .collect()
    }

    fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>> {
        images
            .iter()
            .map(|i| self.lookup(EmbeddingKind::Image, image_key(i)))
            .collect()
    }
}

/// Wraps a backend and remembers every embedding it returns, so a run can
/// be written out as a fixture and replayed offline.
pub struct RecordingBackend<B> {
    inner: B,
    seen: Mutex<BTreeMap<(EmbeddingKind, String), Vec<f32>>>,
}

impl<B: ScorerBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            seen: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries, sorted by kind then key; duplicates collapse.
    pub fn records(&self) -> Vec<FixtureRecord> {
        let seen = self.seen.lock().expect("recording lock poisoned");
        seen.iter()
            .map(|((kind, key), v)| FixtureRecord {
                key: key.clone(),
                kind: *kind,
                model: self.inner.id().to_string(),
                embedding: v.clone(),
            })
            .collect()
    }

    pub fn write_fixture(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in self.records() {
            let line = serde_json::to_string(&rec).expect("fixture records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    fn remember(&self, kind: EmbeddingKind, keys: Vec<String>, embs: &[Embedding]) {
        let mut seen = self.seen.lock().expect("recording lock poisoned");
        for (k, e) in keys.into_iter().zip(embs) {
            seen.insert((kind, k), e.values().to_vec());
        }
    }
}

impl<B: ScorerBackend> ScorerBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let out = self.inner.embed_texts(texts)?;
        self.remember(EmbeddingKind::Text, texts.iter().map(|t| text_key(t)).collect(), &out);
        Ok(out)
    }

    fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>> {
        let out = self.inner.embed_images(images)?;
        self.remember(EmbeddingKind::Image, images.iter().map(image_key).collect(), &out);
        Ok(out)
    }
}
