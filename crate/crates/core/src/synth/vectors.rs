//! Word vectors for the shape-world vocabulary, built to behave like a
//! pretrained table: synonyms sit close to their class name, everything
//! else is spread out at random.

use rand::RngExt;

use super::{rng_from_seed, ClassCatalog, Rng64, QUALIFIERS};
use crate::embedding::EmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub struct VectorSpec {
    pub dimension: usize,
    /// Norm of the perturbation added to a class vector to make each of its
    /// synonyms (class vectors have unit norm).
    pub synonym_spread: f64,
    /// Unrelated filler words, so the table is not just the task vocabulary.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for VectorSpec {
    fn default() -> Self {
        Self {
            dimension: 50,
            synonym_spread: 0.15,
            distractors: 100,
            seed: 0,
        }
    }
}

pub fn random_unit(rng: &mut Rng64, dimension: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Vector at distance exactly `spread` from `base` in a random direction.
pub fn perturb(rng: &mut Rng64, base: &[f64], spread: f64) -> Vec<f64> {
    let dir = random_unit(rng, base.len());
    base.iter().zip(dir).map(|(b, d)| b + spread * d).collect()
}

pub fn shape_world_vectors(catalog: &ClassCatalog, spec: &VectorSpec) -> EmbeddingTable {
    let mut rng = rng_from_seed(spec.seed);
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    for class in 0..catalog.len() {
        let base = random_unit(&mut rng, spec.dimension);
        for syn in catalog.synonyms(class) {
            tokens.push(syn.clone());
            rows.push(perturb(&mut rng, &base, spec.synonym_spread));
        }
        tokens.push(catalog.names()[class].clone());
        rows.push(base);
    }
    for q in QUALIFIERS {
        tokens.push(q.to_string());
        rows.push(random_unit(&mut rng, spec.dimension));
    }
    for i in 0..spec.distractors {
        tokens.push(format!("w{i:04}"));
        rows.push(random_unit(&mut rng, spec.dimension));
    }
    EmbeddingTable::from_rows(tokens, rows).expect("generated vocabulary is valid")
}
