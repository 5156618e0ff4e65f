//! Datasets on disk: a manifest of `image<TAB>mask<TAB>class<TAB>expression`
//! lines with paths relative to the manifest, binary PPM images and PGM
//! masks.
//!
//! A generated dataset directory holds `dataset.tsv` (referring samples),
//! `regions.tsv` (one sample per annotated region, named by class),
//! `classes.txt` (one class name per line) and `vectors.txt` (word vectors).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::encoder::tokenize;
use crate::pnm::{encode_pgm_mask, encode_ppm, read_pgm_mask, read_ppm, write_bytes};
use crate::segment::Image;
use crate::synth::vectors::{shape_world_vectors, VectorSpec};
use crate::synth::{
    derive_seed, generate_scene, make_referring_sample_with, regions_to_samples, ClassCatalog,
    ExpressionStyle, Sample, Scene, SceneSpec, BACKGROUND,
};
use crate::train::TrainData;
use crate::Error;

pub const REFERRING_MANIFEST: &str = "dataset.tsv";
pub const REGION_MANIFEST: &str = "regions.tsv";
pub const CLASSES_FILE: &str = "classes.txt";
pub const VECTORS_FILE: &str = "vectors.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class_label: Option<usize>,
    pub expression: String,
}

fn at(path: &Path, err: impl Into<Error>) -> Error {
    Error::AtPath {
        path: path.to_path_buf(),
        source: Box::new(err.into()),
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, Error> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let class_label = match fields[2] {
            "-" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| bad(format!("class must be an index or '-', found {s:?}")))?,
            ),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(bad("empty path".into()));
        }
        tokenize(fields[3]).map_err(|e| bad(e.to_string()))?;
        out.push(ManifestEntry {
            image: PathBuf::from(fields[0]),
            mask: PathBuf::from(fields[1]),
            class_label,
            expression: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let class = e
            .class_label
            .map_or_else(|| "-".to_string(), |c| c.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.image.display(),
            e.mask.display(),
            class,
            e.expression
        )
        .unwrap();
    }
    out
}

/// Shares decoded images between samples that name the same file.
#[derive(Default)]
pub struct ImageCache {
    images: HashMap<PathBuf, Arc<Image>>,
}

impl ImageCache {
    pub fn get(&mut self, path: &Path) -> Result<Arc<Image>, Error> {
        if let Some(img) = self.images.get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(read_ppm(path).map_err(|e| at(path, e))?);
        self.images.insert(path.to_path_buf(), img.clone());
        Ok(img)
    }
}

/// Loads every sample of a manifest; paths resolve against its directory.
pub fn load_samples(manifest: &Path, cache: &mut ImageCache) -> Result<Vec<Sample>, Error> {
    let text = fs::read_to_string(manifest).map_err(|e| at(manifest, e))?;
    let entries = parse_manifest(&text).map_err(|e| at(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image_path = base.join(&e.image);
        let mask_path = base.join(&e.mask);
        let image = cache.get(&image_path)?;
        let gt_mask = read_pgm_mask(&mask_path).map_err(|err| at(&mask_path, err))?;
        if gt_mask.height != image.height() || gt_mask.width != image.width() {
            return Err(at(
                &mask_path,
                Error::Config(format!(
                    "mask is {}x{} but its image is {}x{}",
                    gt_mask.height,
                    gt_mask.width,
                    image.height(),
                    image.width()
                )),
            ));
        }
        if gt_mask.is_empty() {
            return Err(at(
                &mask_path,
                Error::Config("ground-truth mask is empty".into()),
            ));
        }
        out.push(Sample {
            image,
            gt_mask,
            expression: e.expression,
            class_label: e.class_label,
        });
    }
    Ok(out)
}

pub fn parse_classes(text: &str) -> Result<ClassCatalog, Error> {
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let background = names.iter().position(|n| n == BACKGROUND);
    let n = names.len();
    Ok(ClassCatalog::with_synonyms(
        names,
        vec![Vec::new(); n],
        background,
    )?)
}

fn read_optional(path: &Path) -> Result<Option<String>, Error> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(at(path, e)),
    }
}

/// Training inputs for a referring manifest: regions, classes and word
/// vectors are read from the manifest's directory when present.
pub fn load_train_data(manifest: &Path, cache: &mut ImageCache) -> Result<TrainData, Error> {
    let referring = load_samples(manifest, cache)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let regions_path = dir.join(REGION_MANIFEST);
    let regions = if regions_path.exists() {
        load_samples(&regions_path, cache)?
    } else {
        Vec::new()
    };
    let classes_path = dir.join(CLASSES_FILE);
    let catalog = match read_optional(&classes_path)? {
        Some(text) => parse_classes(&text).map_err(|e| at(&classes_path, e))?,
        None => {
            return Err(at(
                &classes_path,
                Error::Config("class list not found next to the manifest".into()),
            ))
        }
    };
    let vectors_path = dir.join(VECTORS_FILE);
    let vectors = if vectors_path.exists() {
        Some(Arc::new(
            EmbeddingTable::load(&vectors_path).map_err(|e| at(&vectors_path, e))?,
        ))
    } else {
        None
    };
    Ok(TrainData {
        referring,
        regions,
        catalog,
        vectors,
        validation: Vec::new(),
    })
}

/// Settings of a generated shape-world dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of scenes; each yields one referring sample.
    pub count: usize,
    /// Object classes (the catalog adds a background class).
    pub classes: usize,
    /// Probability that a referring expression names its class by a
    /// synonym.
    pub synonym_rate: f64,
    pub scene: SceneSpec,
    /// Seed of the word vectors; kept separate so train and test splits
    /// share one table.
    pub vector_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            classes: 8,
            synonym_rate: 0.0,
            scene: SceneSpec::default(),
            vector_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub catalog: ClassCatalog,
    pub scenes: Vec<Scene>,
    pub referring: Vec<Sample>,
    pub regions: Vec<Sample>,
    pub vectors: EmbeddingTable,
}

impl GeneratedDataset {
    pub fn train_data(&self) -> TrainData {
        TrainData {
            referring: self.referring.clone(),
            regions: self.regions.clone(),
            catalog: self.catalog.clone(),
            vectors: Some(Arc::new(self.vectors.clone())),
            validation: Vec::new(),
        }
    }
}

pub fn generate_dataset(config: &SynthConfig) -> Result<GeneratedDataset, Error> {
    let spec = SceneSpec {
        classes: config.classes,
        ..config.scene.clone()
    };
    let catalog = ClassCatalog::shape_world(config.classes)?;
    let style = ExpressionStyle {
        synonym_rate: config.synonym_rate,
        ..ExpressionStyle::default()
    };
    let scene_seed = derive_seed(config.seed, 1);
    let expr_seed = derive_seed(config.seed, 2);
    let mut scenes = Vec::with_capacity(config.count);
    let mut referring = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let scene = generate_scene(derive_seed(scene_seed, i as u64), &spec)?;
        referring.push(make_referring_sample_with(
            derive_seed(expr_seed, i as u64),
            &scene,
            &catalog,
            &style,
        )?);
        scenes.push(scene);
    }
    let regions = regions_to_samples(&scenes, &catalog)?;
    let vectors = shape_world_vectors(
        &catalog,
        &VectorSpec {
            seed: config.vector_seed,
            ..VectorSpec::default()
        },
    );
    Ok(GeneratedDataset {
        catalog,
        scenes,
        referring,
        regions,
        vectors,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    write_bytes(path, bytes).map_err(|e| at(path, e))
}

/// Writes images, masks, both manifests, the class list and the word
/// vectors under `dir`.
pub fn write_dataset(dir: &Path, data: &GeneratedDataset) -> Result<(), Error> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| at(&p, e))?;
    }
    let mut referring = Vec::new();
    let mut regions = Vec::new();
    for (i, (scene, sample)) in data.scenes.iter().zip(&data.referring).enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.ppm"));
        write_file(&dir.join(&image), &encode_ppm(&scene.image))?;
        let mask = PathBuf::from(format!("masks/{i:05}.pgm"));
        write_file(&dir.join(&mask), &encode_pgm_mask(&sample.gt_mask))?;
        referring.push(ManifestEntry {
            image: image.clone(),
            mask,
            class_label: sample.class_label,
            expression: sample.expression.clone(),
        });
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask = PathBuf::from(format!("masks/{i:05}_{k}.pgm"));
            write_file(&dir.join(&mask), &encode_pgm_mask(&inst.mask))?;
            regions.push(ManifestEntry {
                image: image.clone(),
                mask,
                class_label: Some(inst.class_index),
                expression: data.catalog.name(inst.class_index)?.to_string(),
            });
        }
    }
    write_file(
        &dir.join(REFERRING_MANIFEST),
        format_manifest(&referring).as_bytes(),
    )?;
    write_file(
        &dir.join(REGION_MANIFEST),
        format_manifest(&regions).as_bytes(),
    )?;
    let classes: String = data
        .catalog
        .names()
        .iter()
        .map(|n| format!("{n}\n"))
        .collect();
    write_file(&dir.join(CLASSES_FILE), classes.as_bytes())?;
    let mut vectors = Vec::new();
    data.vectors
        .write(&mut vectors)
        .map_err(|e| at(&dir.join(VECTORS_FILE), e))?;
    write_file(&dir.join(VECTORS_FILE), &vectors)?;
    Ok(())
}
