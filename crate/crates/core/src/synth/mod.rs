//! Shape-world: a deterministic synthetic benchmark, plus expression
//! synthesis from class labels.
//!
//! All randomness comes from `Xoshiro256PlusPlus` seeded through splitmix64
//! (`SeedableRng::seed_from_u64`), so every output is a pure function of
//! its seed and configuration.

mod referring;
mod scene;
pub mod vectors;

use std::sync::Arc;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::segment::{BinaryMask, Image};

pub use referring::{
    make_referring_sample, make_referring_sample_with, mix_datasets, regions_to_samples,
    synthesize_expression, ExpressionStyle, StreamEntry, QUALIFIERS,
};
pub use scene::{generate_scene, Instance, Scene, SceneSpec, ShapeKind};

pub type Rng64 = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("empty class name")]
    EmptyName,
    #[error("class index {index} out of range for {classes} classes")]
    BadClassIndex { index: usize, classes: usize },
    #[error("could not place object {object} after {retries} attempts")]
    PlacementFailure { object: usize, retries: usize },
    #[error("no unambiguous referent found after {0} attempts")]
    NoUnambiguousReferent(usize),
    #[error("invalid scene configuration: {0}")]
    BadSpec(String),
    #[error("invalid class catalog: {0}")]
    BadCatalog(String),
}

/// The `M` class names, indexed `0..M`. An optional background entry marks
/// the class that never names a referent.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    synonyms: Vec<Vec<String>>,
    background: Option<usize>,
}

pub const BACKGROUND: &str = "background";

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Result<Self, SynthError> {
        let n = names.len();
        Self::with_synonyms(names, vec![Vec::new(); n], None)
    }

    pub fn with_synonyms(
        names: Vec<String>,
        synonyms: Vec<Vec<String>>,
        background: Option<usize>,
    ) -> Result<Self, SynthError> {
        if names.len() < 2 {
            return Err(SynthError::BadCatalog("need at least two classes".into()));
        }
        if synonyms.len() != names.len() {
            return Err(SynthError::BadCatalog("one synonym list per class".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for word in names.iter().chain(synonyms.iter().flatten()) {
            if word.is_empty() || word.chars().any(|c| c.is_uppercase()) {
                return Err(SynthError::BadCatalog(format!(
                    "names must be non-empty and lowercase: {word:?}"
                )));
            }
            if !seen.insert(word.as_str()) {
                return Err(SynthError::BadCatalog(format!("duplicate word {word:?}")));
            }
        }
        if let Some(b) = background {
            if b >= names.len() {
                return Err(SynthError::BadClassIndex {
                    index: b,
                    classes: names.len(),
                });
            }
        }
        Ok(Self {
            names,
            synonyms,
            background,
        })
    }

    /// The first `objects` shape classes followed by a background class.
    pub fn shape_world(objects: usize) -> Result<Self, SynthError> {
        if objects == 0 || objects > ShapeKind::ALL.len() {
            return Err(SynthError::BadCatalog(format!(
                "shape-world supports 1..={} object classes",
                ShapeKind::ALL.len()
            )));
        }
        let kinds = &ShapeKind::ALL[..objects];
        let mut names: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
        let mut synonyms: Vec<Vec<String>> = kinds
            .iter()
            .map(|k| k.synonyms().iter().map(|s| s.to_string()).collect())
            .collect();
        names.push(BACKGROUND.to_string());
        synonyms.push(Vec::new());
        Self::with_synonyms(names, synonyms, Some(objects))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Result<&str, SynthError> {
        self.names
            .get(index)
            .map(String::as_str)
            .ok_or(SynthError::BadClassIndex {
                index,
                classes: self.names.len(),
            })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn synonyms(&self, index: usize) -> &[String] {
        &self.synonyms[index]
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    /// Indices of classes that can be referred to.
    pub fn object_classes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| Some(i) != self.background)
            .collect()
    }

    /// Class named by `word`, either directly or through a synonym.
    pub fn resolve_noun(&self, word: &str) -> Option<usize> {
        (0..self.len())
            .find(|&i| self.names[i] == word || self.synonyms[i].iter().any(|s| s == word))
    }
}

/// Image, ground-truth mask and referring expression, with the target's
/// class when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Arc<Image>,
    pub gt_mask: BinaryMask,
    pub expression: String,
    pub class_label: Option<usize>,
}
