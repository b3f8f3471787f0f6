//! Annotated-image dataset model: load/save, deterministic splitting, and
//! artifact-distribution summaries.
//!
//! Datasets are stored as JSON with a schema version, canonical key order,
//! and canonical float formatting, so save -> load -> save is byte-stable.
//! Image payloads are stored by reference (path or opaque id), keeping the
//! file small and diff-able.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::BoundingBox;
use crate::taxonomy::{LabelSet, Taxonomy};

/// Schema version written to and required from dataset files.
pub const DATASET_SCHEMA_VERSION: &str = "dataset-v1";

/// One annotated artifact: its category plus a normalized box, a caption,
/// or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactAnnotation {
    pub category_id: usize,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// One synthetic image with its prompt, generator tag, label set, and
/// per-artifact annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_ref: String,
    pub prompt: String,
    pub generator: String,
    pub labels: LabelSet,
    pub annotations: Vec<ArtifactAnnotation>,
}

/// A collection of annotated images tied to a taxonomy version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: String,
    pub taxonomy_version: String,
    pub items: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn new(taxonomy_version: impl Into<String>, items: Vec<AnnotatedImage>) -> Result<Self> {
        let ds = Self {
            schema_version: DATASET_SCHEMA_VERSION.to_string(),
            taxonomy_version: taxonomy_version.into(),
            items,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Structural invariants: unique image refs; labels and annotations
    /// consistent; boxes normalized; every annotation carries a box or a
    /// caption.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_SCHEMA_VERSION.to_string(),
                found: self.schema_version.clone(),
            });
        }
        let mut refs = BTreeSet::new();
        for item in &self.items {
            if !refs.insert(&item.image_ref) {
                return Err(Error::Schema {
                    record: item.image_ref.clone(),
                    message: "duplicate image_ref".into(),
                });
            }
            let schema_err = |message: String| Error::Schema {
                record: item.image_ref.clone(),
                message,
            };
            match &item.labels {
                LabelSet::NoArtifacts => {
                    if !item.annotations.is_empty() {
                        return Err(schema_err(
                            "labels say no artifacts but annotations are present".into(),
                        ));
                    }
                }
                LabelSet::Artifacts(ids) => {
                    if item.annotations.is_empty() {
                        return Err(schema_err(
                            "artifact labels present but no annotations".into(),
                        ));
                    }
                    for ann in &item.annotations {
                        if !ids.contains(&ann.category_id) {
                            return Err(schema_err(format!(
                                "annotation category {} not in labels",
                                ann.category_id
                            )));
                        }
                    }
                }
            }
            for ann in &item.annotations {
                if ann.bbox.is_none() && ann.caption.is_none() {
                    return Err(schema_err(
                        "annotation needs at least one of box or caption".into(),
                    ));
                }
                if let Some(b) = &ann.bbox {
                    b.validate()
                        .map_err(|e| schema_err(format!("bad box: {e}")))?;
                    if !b.is_normalized() {
                        return Err(schema_err(format!(
                            "box [{},{},{},{}] is not normalized",
                            b.x1, b.y1, b.x2, b.y2
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Category ids must exist in the given taxonomy.
    pub fn validate_against(&self, taxonomy: &Taxonomy) -> Result<()> {
        for item in &self.items {
            item.labels.validate_for(taxonomy).map_err(|e| Error::Schema {
                record: item.image_ref.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut out = serde_json::to_string_pretty(self)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    /// Deterministic shuffle split: the train side gets round(n * fraction)
    /// items and the test side the remainder; together they are exactly the
    /// original multiset.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "train fraction must lie in (0,1), got {}",
                train_fraction
            )));
        }
        let n = self.items.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.min(n);
        let train_items = indices[..n_train]
            .iter()
            .map(|&i| self.items[i].clone())
            .collect();
        let test_items = indices[n_train..]
            .iter()
            .map(|&i| self.items[i].clone())
            .collect();
        Ok((
            Dataset {
                schema_version: self.schema_version.clone(),
                taxonomy_version: self.taxonomy_version.clone(),
                items: train_items,
            },
            Dataset {
                schema_version: self.schema_version.clone(),
                taxonomy_version: self.taxonomy_version.clone(),
                items: test_items,
            },
        ))
    }

    /// Count, per category, the images in which it appears (once per image),
    /// plus the number of artifact-free images.
    pub fn summarize(&self) -> DatasetSummary {
        let mut per_category: BTreeMap<usize, usize> = BTreeMap::new();
        let mut no_artifacts = 0usize;
        for item in &self.items {
            match &item.labels {
                LabelSet::NoArtifacts => no_artifacts += 1,
                LabelSet::Artifacts(ids) => {
                    for &id in ids {
                        *per_category.entry(id).or_insert(0) += 1;
                    }
                }
            }
        }
        DatasetSummary {
            per_category,
            no_artifacts,
            n_items: self.items.len(),
        }
    }
}

/// Artifact distribution of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub per_category: BTreeMap<usize, usize>,
    pub no_artifacts: usize,
    pub n_items: usize,
}

impl DatasetSummary {
    /// CSV rows `category,name,count`, one per taxonomy category (zeros
    /// included) plus a final `no_artifacts` row.
    pub fn to_csv(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::from("category,name,count\n");
        for cat in taxonomy.categories() {
            let count = self.per_category.get(&cat.id).copied().unwrap_or(0);
            out.push_str(&format!("{},{},{}\n", cat.id, cat.name, count));
        }
        out.push_str(&format!("no_artifacts,No artifacts,{}\n", self.no_artifacts));
        out
    }
}
