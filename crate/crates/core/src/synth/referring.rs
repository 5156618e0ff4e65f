use rand::seq::SliceRandom;
use rand::RngExt;

use super::{rng_from_seed, ClassCatalog, Sample, Scene, SynthError};

/// Expression for a region annotated only with a class: the class name.
pub fn synthesize_expression(class_name: &str) -> Result<String, SynthError> {
    if class_name.is_empty() {
        return Err(SynthError::EmptyName);
    }
    Ok(class_name.to_string())
}

/// One sample per annotated region, using the region's class name as its
/// expression.
pub fn regions_to_samples(
    scenes: &[Scene],
    catalog: &ClassCatalog,
) -> Result<Vec<Sample>, SynthError> {
    let mut out = Vec::new();
    for scene in scenes {
        for inst in &scene.instances {
            let name = catalog.name(inst.class_index)?;
            out.push(Sample {
                image: scene.image.clone(),
                gt_mask: inst.mask.clone(),
                expression: synthesize_expression(name)?,
                class_label: Some(inst.class_index),
            });
        }
    }
    Ok(out)
}

pub const QUALIFIERS: [&str; 4] = ["left", "right", "top", "bottom"];

/// Knobs for generated referring expressions.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionStyle {
    /// Probability of naming the class through one of its synonyms instead
    /// of its canonical name.
    pub synonym_rate: f64,
    pub max_retries: usize,
}

impl Default for ExpressionStyle {
    fn default() -> Self {
        Self {
            synonym_rate: 0.0,
            max_retries: 32,
        }
    }
}

/// Index of the unique extreme instance among `candidates` for a qualifier.
fn unique_extreme(scene: &Scene, candidates: &[usize], qualifier: &str) -> Option<usize> {
    let key = |i: usize| {
        let (x, y) = scene.instances[i].center;
        match qualifier {
            "left" => -x,
            "right" => x,
            "top" => -y,
            "bottom" => y,
            _ => unreachable!("unknown qualifier"),
        }
    };
    let best = candidates
        .iter()
        .copied()
        .max_by(|&a, &b| key(a).total_cmp(&key(b)))?;
    let ties = candidates.iter().filter(|&&i| key(i) == key(best)).count();
    (ties == 1).then_some(best)
}

/// Picks a target instance and an expression naming it unambiguously:
/// the bare class name if the class is unique in the scene, otherwise
/// `"<qualifier> <class>"` where the qualifier singles the target out
/// among instances of its class.
pub fn make_referring_sample(
    seed: u64,
    scene: &Scene,
    catalog: &ClassCatalog,
) -> Result<Sample, SynthError> {
    make_referring_sample_with(seed, scene, catalog, &ExpressionStyle::default())
}

pub fn make_referring_sample_with(
    seed: u64,
    scene: &Scene,
    catalog: &ClassCatalog,
    style: &ExpressionStyle,
) -> Result<Sample, SynthError> {
    if scene.instances.is_empty() {
        return Err(SynthError::NoUnambiguousReferent(0));
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..style.max_retries.max(1) {
        let target = rng.random_range(0..scene.instances.len());
        let class = scene.instances[target].class_index;
        let canonical = catalog.name(class)?;
        let synonyms = catalog.synonyms(class);
        let noun = if !synonyms.is_empty() && rng.random::<f64>() < style.synonym_rate {
            synonyms[rng.random_range(0..synonyms.len())].as_str()
        } else {
            canonical
        };
        let same_class: Vec<usize> = (0..scene.instances.len())
            .filter(|&i| scene.instances[i].class_index == class)
            .collect();
        let expression = if same_class.len() == 1 {
            noun.to_string()
        } else {
            let mut order = QUALIFIERS;
            order.shuffle(&mut rng);
            match order
                .iter()
                .find(|q| unique_extreme(scene, &same_class, q) == Some(target))
            {
                Some(q) => format!("{q} {noun}"),
                None => continue,
            }
        };
        return Ok(Sample {
            image: scene.image.clone(),
            gt_mask: scene.instances[target].mask.clone(),
            expression,
            class_label: Some(class),
        });
    }
    Err(SynthError::NoUnambiguousReferent(style.max_retries))
}

/// Position in a mixed training stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamEntry {
    Referring(usize),
    Synthesized(usize),
}

/// Interleaves shuffled referring and synthesized samples so that every
/// prefix of length `n` holds `floor(n * ratio)` synthesized entries.
///
/// The stream length is `|referring| / (1 - ratio)` (all synthesized
/// samples when `ratio == 1`); synthesized samples are drawn from a shuffled
/// pool, cycling if the pool is smaller than needed.
pub fn mix_datasets(
    referring: usize,
    synthesized: usize,
    ratio: f64,
    seed: u64,
) -> Vec<StreamEntry> {
    let ratio = if synthesized == 0 {
        0.0
    } else {
        ratio.clamp(0.0, 1.0)
    };
    let mut rng = rng_from_seed(seed);
    let mut ref_order: Vec<usize> = (0..referring).collect();
    ref_order.shuffle(&mut rng);
    let mut syn_order: Vec<usize> = (0..synthesized).collect();
    syn_order.shuffle(&mut rng);

    if ratio >= 1.0 {
        return syn_order
            .into_iter()
            .map(StreamEntry::Synthesized)
            .collect();
    }
    if ratio <= 0.0 || referring == 0 {
        return ref_order.into_iter().map(StreamEntry::Referring).collect();
    }
    let mut out = Vec::new();
    let (mut r, mut s) = (0usize, 0usize);
    let mut t = 0usize;
    while r < referring {
        let synth_slot = ((t + 1) as f64 * ratio).floor() > (t as f64 * ratio).floor();
        if synth_slot {
            if s > 0 && s % synthesized == 0 {
                syn_order.shuffle(&mut rng);
            }
            out.push(StreamEntry::Synthesized(syn_order[s % synthesized]));
            s += 1;
        } else {
            out.push(StreamEntry::Referring(ref_order[r]));
            r += 1;
        }
        t += 1;
    }
    out
}
