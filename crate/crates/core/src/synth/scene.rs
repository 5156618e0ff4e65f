use std::sync::Arc;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, ClassCatalog, Rng64, SynthError};
use crate::segment::{BinaryMask, Image};

/// Filled shapes; each class has its own geometry and base colour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::Frame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Frame => "frame",
        }
    }

    pub fn synonyms(self) -> &'static [&'static str] {
        match self {
            ShapeKind::Circle => &["ball", "disc", "dot"],
            ShapeKind::Square => &["box", "block", "tile"],
            ShapeKind::Triangle => &["wedge", "pyramid", "cone"],
            ShapeKind::Cross => &["plus", "crucifix", "intersection"],
            ShapeKind::Diamond => &["rhombus", "lozenge", "gem"],
            ShapeKind::Ring => &["hoop", "loop", "donut"],
            ShapeKind::Bar => &["strip", "plank", "stick"],
            ShapeKind::Frame => &["border", "outline", "rim"],
        }
    }

    pub fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.90, 0.15, 0.15],
            ShapeKind::Square => [0.15, 0.80, 0.20],
            ShapeKind::Triangle => [0.20, 0.30, 0.95],
            ShapeKind::Cross => [0.95, 0.90, 0.15],
            ShapeKind::Diamond => [0.90, 0.20, 0.85],
            ShapeKind::Ring => [0.15, 0.85, 0.90],
            ShapeKind::Bar => [0.95, 0.55, 0.10],
            ShapeKind::Frame => [0.85, 0.85, 0.85],
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up, base at dy = 0.8 r
                let top = -r;
                let bottom = 0.8 * r;
                if dy < top || dy > bottom {
                    return false;
                }
                let t = (dy - top) / (bottom - top);
                ax <= t * r
            }
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (ax <= arm && ay <= r) || (ay <= arm && ax <= r)
            }
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Bar => ax <= r && ay <= 0.4 * r,
            ShapeKind::Frame => {
                let outer = 0.85 * r;
                let inner = 0.45 * r;
                ax <= outer && ay <= outer && (ax > inner || ay > inner)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    /// Object classes drawn from (at most 8).
    pub classes: usize,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 45,
            width: 45,
            min_objects: 1,
            max_objects: 3,
            min_radius: 6,
            max_radius: 10,
            classes: 8,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "image {}x{} is below 16x16",
                self.height, self.width
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max".into());
        }
        if self.min_radius < 2 || self.min_radius > self.max_radius {
            return bad("radius range must satisfy 2 <= min <= max".into());
        }
        if 2 * self.max_radius + 1 > self.height.min(self.width) {
            return bad("largest shape does not fit in the image".into());
        }
        let footprint = (2 * self.min_radius + 3).pow(2) * self.max_objects;
        if footprint * 2 > self.height * self.width {
            return bad("too many objects for the image area".into());
        }
        if self.classes == 0 || self.classes > ShapeKind::ALL.len() {
            return bad(format!("classes must be in 1..={}", ShapeKind::ALL.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_index: usize,
    pub color: [u8; 3],
    /// `(x, y)` in pixels.
    pub center: (f64, f64),
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Arc<Image>,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// Per-pixel class index, `background` where no instance lies.
    pub fn label_map(&self, background: usize) -> Vec<usize> {
        let mut labels = vec![background; self.image.height() * self.image.width()];
        for inst in &self.instances {
            for (l, &m) in labels.iter_mut().zip(&inst.mask.data) {
                if m == 1 {
                    *l = inst.class_index;
                }
            }
        }
        labels
    }
}

fn rasterize(kind: ShapeKind, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if kind.contains(x as f64 - cx, y as f64 - cy, r) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Mask grown by one pixel in each direction (8-neighbourhood).
fn dilate(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(y, x) {
                continue;
            }
            for ny in y.saturating_sub(1)..=(y + 1).min(mask.height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(mask.width - 1) {
                    out.set(ny, nx, true);
                }
            }
        }
    }
    out
}

/// Fresh layouts tried before giving up on a scene.
const LAYOUT_ATTEMPTS: usize = 16;

/// One rejection-sampled layout, or `None` when some object found no room.
fn place_objects(
    rng: &mut Rng64,
    spec: &SceneSpec,
    objects: &[usize],
    count: usize,
) -> Option<Vec<(usize, BinaryMask, (f64, f64))>> {
    let (h, w) = (spec.height, spec.width);
    let mut occupied = BinaryMask::empty(h, w);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let class_index = objects[rng.random_range(0..objects.len())];
        let kind = ShapeKind::ALL[class_index];
        let placed = (0..spec.max_retries).find_map(|_| {
            let r = rng.random_range(spec.min_radius..=spec.max_radius) as f64;
            let cx = rng.random_range(r..=(w as f64 - 1.0 - r)).round();
            let cy = rng.random_range(r..=(h as f64 - 1.0 - r)).round();
            let mask = rasterize(kind, cx, cy, r, h, w);
            (!mask.is_empty() && !dilate(&mask).overlaps(&occupied)).then_some((mask, (cx, cy)))
        })?;
        for (o, &m) in occupied.data.iter_mut().zip(&placed.0.data) {
            *o |= m;
        }
        out.push((class_index, placed.0, placed.1));
    }
    Some(out)
}

/// Generates one scene. Objects are placed by rejection so their masks stay
/// at least one pixel apart; a layout that runs out of room is redrawn.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let catalog = ClassCatalog::shape_world(spec.classes)?;
    let objects = catalog.object_classes();
    let mut rng = rng_from_seed(seed);
    let (h, w) = (spec.height, spec.width);

    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.30));
    let count = rng.random_range(spec.min_objects..=spec.max_objects);

    let layout = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| place_objects(&mut rng, spec, &objects, count))
        .ok_or(SynthError::PlacementFailure {
            object: count - 1,
            retries: spec.max_retries,
        })?;

    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    for (class_index, mask, center) in layout {
        let kind = ShapeKind::ALL[class_index];
        let color = loop {
            let base = kind.base_color();
            let c: [u8; 3] = std::array::from_fn(|i| {
                let v = (base[i] + rng.random_range(-0.06..=0.06)).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            if instances.iter().all(|inst| inst.color != c) {
                break c;
            }
        };
        instances.push(Instance {
            class_index,
            color,
            center,
            mask,
        });
    }

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let owner = instances.iter().find(|inst| inst.mask.get(y, x));
            for (c, bg) in background.iter().enumerate() {
                let base = match owner {
                    Some(inst) => f64::from(inst.color[c]) / 255.0,
                    None => *bg,
                };
                let v = base + rng.random_range(-0.03..=0.03);
                // quantise to the byte grid so images survive a PPM round trip
                data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    let image = Image::new(h, w, data).map_err(|e| SynthError::BadSpec(e.to_string()))?;
    Ok(Scene {
        image: Arc::new(image),
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(
            generate_scene(42, &spec).unwrap(),
            generate_scene(42, &spec).unwrap()
        );
        assert_ne!(
            generate_scene(42, &spec).unwrap(),
            generate_scene(43, &spec).unwrap()
        );
    }

    #[test]
    fn single_object_spec() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..SceneSpec::default()
        };
        for seed in 0..20 {
            assert_eq!(generate_scene(seed, &spec).unwrap().instances.len(), 1);
        }
    }

    #[test]
    fn every_shape_rasterizes_non_empty() {
        for kind in ShapeKind::ALL {
            let m = rasterize(kind, 10.0, 10.0, 5.0, 21, 21);
            assert!(m.count() > 10, "{kind:?}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SceneSpec {
            height: 12,
            ..SceneSpec::default()
        };
        assert!(s.validate().is_err());
        s.height = 45;
        s.max_objects = 40;
        assert!(s.validate().is_err());
        s.max_objects = 4;
        s.classes = 9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_map_marks_instances() {
        let scene = generate_scene(3, &SceneSpec::default()).unwrap();
        let labels = scene.label_map(8);
        for inst in &scene.instances {
            for (l, &m) in labels.iter().zip(&inst.mask.data) {
                if m == 1 {
                    assert_eq!(*l, inst.class_index);
                }
            }
        }
    }
}
