//! Dataset manifests: which file holds which image id, which ids are queries,
//! and which images count as relevant for each query. Stored as JSON next to
//! the images; entry paths are relative to the manifest's directory joined
//! with its `root` field.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{crop, load_image, Image};
use crate::retrieval::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    /// Optional `[x, y, w, h]` pixel rectangle applied after loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Image path prefix, itself resolved against the manifest's directory.
    pub root: String,
    pub entries: Vec<ManifestEntry>,
    pub queries: Vec<u64>,
    pub ground_truth: GroundTruth,
}

impl DatasetManifest {
    /// Ids must be unique, and queries and ground truth may only reference
    /// listed images.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let fail = |message: String| Error::Manifest { path: path.to_path_buf(), message };
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id) {
                return Err(Error::DuplicateId { kind: "manifest", id: e.id });
            }
        }
        for q in &self.queries {
            if !ids.contains(q) {
                return Err(fail(format!("query {q} is not an entry")));
            }
        }
        for (q, relevant) in &self.ground_truth {
            if !ids.contains(q) {
                return Err(fail(format!("ground truth query {q} is not an entry")));
            }
            if let Some(r) = relevant.iter().find(|r| !ids.contains(r)) {
                return Err(fail(format!("relevant image {r} of query {q} is not an entry")));
            }
        }
        Ok(())
    }
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.validate(path)?;
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    m.validate(path)?;
    Ok(m)
}

/// Directory all entry paths are relative to.
pub fn manifest_root(manifest_path: &Path, m: &DatasetManifest) -> PathBuf {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    dir.join(&m.root)
}

/// Loads one entry's pixels, applying its crop rectangle when present.
pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<Image> {
    let img = load_image(&root.join(&entry.file))?;
    match entry.crop {
        Some([x, y, w, h]) => crop(&img, x, y, w, h),
        None => Ok(img),
    }
}

/// All images referenced by a visibility graph, keyed by id; files resolve
/// relative to the graph file's directory.
pub fn load_graph_images(
    graph_dir: &Path,
    g: &crate::mining::VisibilityGraph,
) -> Result<BTreeMap<u64, Image>> {
    let mut out = BTreeMap::new();
    for node in g.images() {
        out.insert(node.id, load_image(&graph_dir.join(&node.file))?);
    }
    Ok(out)
}
