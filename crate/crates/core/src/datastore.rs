//! Feature records, the immutable feature store, and episodic sampling.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, DEGENERATE_NORM};

pub const LABEL_REAL: u8 = 0;
pub const LABEL_FAKE: u8 = 1;
pub const NUM_CLASSES: usize = 2;

/// One news item: an id, a binary label, and its text and image token
/// embeddings (`L x d` each, `L >= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: u8,
    pub text_tokens: Matrix,
    pub image_tokens: Matrix,
}

impl FeatureRecord {
    pub fn new(id: impl Into<String>, label: u8, text_tokens: Matrix, image_tokens: Matrix) -> Self {
        Self {
            id: id.into(),
            label,
            text_tokens,
            image_tokens,
        }
    }

    /// Single-token record built from pooled embeddings.
    pub fn pooled(id: impl Into<String>, label: u8, text: &[f64], image: &[f64]) -> Result<Self> {
        Ok(Self::new(id, label, Matrix::row_vector(text)?, Matrix::row_vector(image)?))
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidInput(format!(
                "record `{}` has label {} (expected 0 or 1)",
                self.id, self.label
            )));
        }
        for (which, m) in [("text", &self.text_tokens), ("image", &self.image_tokens)] {
            if m.rows() == 0 {
                return Err(Error::InvalidInput(format!(
                    "record `{}` has an empty {which} sequence",
                    self.id
                )));
            }
            if m.cols() != dimension {
                return Err(Error::Dimension(format!(
                    "record `{}` {which} width {} does not match store dimension {dimension}",
                    self.id,
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!(
                    "record `{}` has non-finite {which} values",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A validated collection of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dimension: usize,
    source_name: String,
    records: Vec<FeatureRecord>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(
        dimension: usize,
        source_name: impl Into<String>,
        records: Vec<FeatureRecord>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Dimension("store dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(dimension)?;
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(Self {
            dimension,
            source_name: source_name.into(),
            records,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Record counts indexed by label.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    pub fn with_source_name(mut self, name: impl Into<String>) -> Self {
        self.source_name = name.into();
        self
    }
}

/// An n-shot split of a store. Ids refer to records of the store the
/// episode was sampled from; `synthetic` holds label-augmentation records
/// that exist only inside this episode and only ever join the train set.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_shot: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub synthetic: Vec<FeatureRecord>,
}

impl Episode {
    pub fn train_len(&self) -> usize {
        self.train_ids.len() + self.synthetic.len()
    }

    pub fn has_validation(&self) -> bool {
        !self.val_ids.is_empty()
    }

    /// Looks up every id in `store`.
    pub fn resolve<'a>(&'a self, store: &'a FeatureStore) -> Result<ResolvedEpisode<'a>> {
        let lookup = |ids: &[String]| -> Result<Vec<&'a FeatureRecord>> {
            ids.iter()
                .map(|id| {
                    store.get(id).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "episode id `{id}` not found in store `{}`",
                            store.source_name()
                        ))
                    })
                })
                .collect()
        };
        let mut train = lookup(&self.train_ids)?;
        train.extend(self.synthetic.iter());
        Ok(ResolvedEpisode {
            seed: self.seed,
            train,
            val: lookup(&self.val_ids)?,
            test: lookup(&self.test_ids)?,
        })
    }
}

/// An episode with its records looked up, ready for training.
#[derive(Debug, Clone)]
pub struct ResolvedEpisode<'a> {
    pub seed: u64,
    pub train: Vec<&'a FeatureRecord>,
    pub val: Vec<&'a FeatureRecord>,
    pub test: Vec<&'a FeatureRecord>,
}

/// Derives a 256-bit ChaCha seed from a domain tag and key material.
pub(crate) fn derive_rng(tag: &str, seed: u64, extra: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(extra);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

/// Class-stratified sampling without replacement.
///
/// Per class, ids are sorted and then shuffled by a generator keyed on
/// `(seed, store.source_name)`. The first `n_shot` go to train, the next
/// `n_shot` to validation when requested, and the rest to test.
pub fn sample_episode(
    store: &FeatureStore,
    n_shot: usize,
    seed: u64,
    with_validation: bool,
) -> Result<Episode> {
    if n_shot == 0 {
        return Err(Error::InvalidInput("n_shot must be at least 1".into()));
    }
    let need = if with_validation { 2 * n_shot } else { n_shot };
    let mut by_class: [Vec<&str>; NUM_CLASSES] = Default::default();
    for r in store.records() {
        by_class[r.label as usize].push(&r.id);
    }
    for (class, ids) in by_class.iter().enumerate() {
        if ids.len() < need {
            return Err(Error::InsufficientPopulation {
                class: class as u8,
                have: ids.len(),
                need,
            });
        }
    }

    let mut rng = derive_rng("cma/episode", seed, store.source_name().as_bytes());
    let mut episode = Episode {
        n_shot,
        seed,
        train_ids: Vec::with_capacity(2 * n_shot),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
        synthetic: Vec::new(),
    };
    for ids in by_class.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        episode
            .train_ids
            .extend(ids[..n_shot].iter().map(|s| s.to_string()));
        let rest = if with_validation {
            episode
                .val_ids
                .extend(ids[n_shot..2 * n_shot].iter().map(|s| s.to_string()));
            &ids[2 * n_shot..]
        } else {
            &ids[n_shot..]
        };
        episode.test_ids.extend(rest.iter().map(|s| s.to_string()));
    }
    episode.test_ids.sort_unstable();
    Ok(episode)
}

/// Index of the candidate with the highest cosine similarity to `text`;
/// ties resolve to the lowest index.
pub fn select_best_image(text: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate images".into()));
    }
    let text_norm = checked_norm(text)?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != text.len() {
            return Err(Error::Dimension(format!(
                "candidate {i} has width {}, text has width {}",
                c.len(),
                text.len()
            )));
        }
        let cos = dot(text, c) / (text_norm * checked_norm(c)?);
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(best.0)
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateVector {
            norm: n,
            threshold: DEGENERATE_NORM,
        });
    }
    Ok(n)
}

/// Prefix of the ids given to label-augmentation records.
pub const SYNTHETIC_ID_PREFIX: &str = "<label:";

/// Appends one synthetic train record per class whose text and image
/// tokens are both the class-label embedding. `None` leaves the episode
/// untouched.
pub fn augment_with_labels(
    mut episode: Episode,
    label_features: Option<&[Vec<f64>]>,
    dimension: usize,
) -> Result<Episode> {
    let Some(features) = label_features else {
        return Ok(episode);
    };
    if features.len() != NUM_CLASSES {
        return Err(Error::InvalidInput(format!(
            "expected {NUM_CLASSES} label features, got {}",
            features.len()
        )));
    }
    for (label, f) in features.iter().enumerate() {
        if f.len() != dimension {
            return Err(Error::Dimension(format!(
                "label feature {label} has width {}, expected {dimension}",
                f.len()
            )));
        }
        let record =
            FeatureRecord::pooled(format!("{SYNTHETIC_ID_PREFIX}{label}>"), label as u8, f, f)?;
        episode.synthetic.push(record);
    }
    Ok(episode)
}

/// JSON sidecar describing a feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub source_name: String,
    pub dimension: usize,
    pub class_counts: ClassCounts,
    #[serde(default)]
    pub provenance: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

impl StoreManifest {
    pub fn describe(store: &FeatureStore) -> Self {
        let [real, fake] = store.class_counts();
        Self {
            source_name: store.source_name().to_string(),
            dimension: store.dimension(),
            class_counts: ClassCounts { real, fake },
            provenance: serde_json::Value::Null,
            label_texts: None,
            label_features: None,
        }
    }
}

/// Ids that occur in more than one of the given sets.
pub fn overlapping_ids<'a>(sets: &[&'a [String]]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    let mut dup = Vec::new();
    for set in sets {
        for id in set.iter() {
            if !seen.insert(id.as_str()) {
                dup.push(id.as_str());
            }
        }
    }
    dup
}
