//! Target classes, synthetic SAR-like chips, split assembly and VQA pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::rng::{derive_seed, RngState};

pub const TRAIN_DEPRESSION: f64 = 17.0;
pub const TEST_DEPRESSION: f64 = 15.0;
pub const IMAGE_SIZE: usize = 128;

pub const QUESTION_CLASS: &str = "What vehicle is this?";
pub const QUESTION_CAPTION: &str = "Describe this SAR image.";
pub const QUESTION_PROPULSION: &str = "Is this vehicle wheeled or tracked?";
pub const QUESTION_AMPHIBIOUS: &str = "Is this vehicle amphibious?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propulsion {
    Wheeled,
    Tracked,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Amphibious {
    #[serde(rename = "yes")]
    Yes,
    #[serde(rename = "no")]
    No,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attributes {
    pub propulsion: Propulsion,
    pub amphibious: Amphibious,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Rect { cx: f64, cy: f64, w: f64, h: f64, v: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, v: f64 },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, width: f64, v: f64 },
}

impl Shape {
    /// Whether object-frame point `(x, y)` lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, w, h, .. } => (x - cx).abs() <= w / 2.0 && (y - cy).abs() <= h / 2.0,
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Line { x0, y0, x1, y1, width, .. } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
                };
                let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
                (px * px + py * py).sqrt() <= width / 2.0
            }
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Shape::Rect { v, .. } | Shape::Ellipse { v, .. } | Shape::Line { v, .. } => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetClass {
    pub name: String,
    pub caption: String,
    pub attributes: Attributes,
    pub serial: String,
    pub collection: String,
    pub published_train: usize,
    pub published_test: usize,
    /// Silhouette primitives in object coordinates (pixels, +x forward),
    /// painted in order.
    pub shapes: Vec<Shape>,
}

pub const CLASS_FIXTURE: &str = include_str!("../fixtures/classes.json");
pub const CAPTION_GOLDEN: &str = include_str!("../fixtures/captions_golden.txt");

/// The 11 target classes in fixture order (alphabetical).
pub fn classes() -> &'static [TargetClass] {
    static CLASSES: OnceLock<Vec<TargetClass>> = OnceLock::new();
    CLASSES.get_or_init(|| serde_json::from_str(CLASS_FIXTURE).expect("class fixture is valid JSON"))
}

pub fn class_names() -> Vec<&'static str> {
    classes().iter().map(|c| c.name.as_str()).collect()
}

pub fn class_index(name: &str) -> Result<usize> {
    classes()
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| Error::UnknownClass(name.to_string()))
}

pub fn class_by_name(name: &str) -> Result<&'static TargetClass> {
    Ok(&classes()[class_index(name)?])
}

pub fn caption_for(name: &str) -> Result<&'static str> {
    Ok(class_by_name(name)?.caption.as_str())
}

pub fn attributes_for(name: &str) -> Result<&'static Attributes> {
    Ok(&class_by_name(name)?.attributes)
}

/// Probe questions with attribute-derived answers plus the classification
/// question. Questions whose attribute does not apply are omitted.
pub fn make_vqa_pairs(name: &str) -> Result<Vec<(String, String)>> {
    let c = class_by_name(name)?;
    let mut out = Vec::with_capacity(3);
    match c.attributes.propulsion {
        Propulsion::Wheeled => out.push((QUESTION_PROPULSION.into(), "wheeled".into())),
        Propulsion::Tracked => out.push((QUESTION_PROPULSION.into(), "tracked".into())),
        Propulsion::None => {}
    }
    match c.attributes.amphibious {
        Amphibious::Yes => out.push((QUESTION_AMPHIBIOUS.into(), "yes".into())),
        Amphibious::No => out.push((QUESTION_AMPHIBIOUS.into(), "no".into())),
        Amphibious::NotApplicable => {}
    }
    out.push((QUESTION_CLASS.into(), c.name.clone()));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn depression(self) -> f64 {
        match self {
            Split::Train => TRAIN_DEPRESSION,
            Split::Test => TEST_DEPRESSION,
        }
    }
}

/// The depression angle alone decides the split.
pub fn split_for_depression(depression: f64) -> Result<Split> {
    if depression == TRAIN_DEPRESSION {
        Ok(Split::Train)
    } else if depression == TEST_DEPRESSION {
        Ok(Split::Test)
    } else {
        Err(invalid(format!(
            "depression angle {depression} is neither {TRAIN_DEPRESSION} (train) nor {TEST_DEPRESSION} (test)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub depression_angle: f64,
    pub aspect_angle: f64,
    pub collection_tag: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub size: usize,
    pub background: f64,
    pub speckle: bool,
    pub shadow: bool,
    /// Shadow length in pixels is `shadow_scale / tan(depression)`.
    pub shadow_scale: f64,
    pub shadow_level: f64,
    /// Global gain applied to test-depression scenes.
    pub test_gain: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: IMAGE_SIZE,
            background: 0.12,
            speckle: true,
            shadow: true,
            shadow_scale: 3.0,
            shadow_level: 0.3,
            test_gain: 1.10,
        }
    }
}

/// Object-frame coordinates of pixel `(row, col)` for a given aspect.
fn object_coords(row: usize, col: usize, size: usize, aspect_deg: f64) -> (f64, f64) {
    let c = size as f64 / 2.0 - 0.5;
    let (dx, dy) = (col as f64 - c, row as f64 - c);
    let (s, co) = aspect_deg.to_radians().sin_cos();
    (dx * co + dy * s, -dx * s + dy * co)
}

/// Silhouette value at a pixel: the last shape covering it, if any.
pub fn silhouette_at(class: &TargetClass, row: usize, col: usize, size: usize, aspect_deg: f64) -> Option<f64> {
    let (x, y) = object_coords(row, col, size, aspect_deg);
    class.shapes.iter().rev().find(|s| s.contains(x, y)).map(|s| s.value())
}

/// Render one chip: rotated silhouette, range shadow, split gain, speckle,
/// clip to `[0, 1]`.
pub fn synth_generate(class: &TargetClass, scene: &SceneParams, opts: &SynthOptions) -> Result<GrayImage> {
    let split = split_for_depression(scene.depression_angle)?;
    let n = opts.size;
    let mut target = vec![None; n * n];
    for r in 0..n {
        for c in 0..n {
            target[r * n + c] = silhouette_at(class, r, c, n, scene.aspect_angle);
        }
    }
    let shadow_len = if opts.shadow {
        (opts.shadow_scale / scene.depression_angle.to_radians().tan()).round() as usize
    } else {
        0
    };
    let gain = match split {
        Split::Train => 1.0,
        Split::Test => opts.test_gain,
    };
    let mut rng = RngState::new(scene.seed);
    let mut img = GrayImage::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let base = match target[r * n + c] {
                Some(v) => v,
                None => {
                    let shadowed = (1..=shadow_len.min(r)).any(|k| target[(r - k) * n + c].is_some());
                    if shadowed {
                        opts.background * opts.shadow_level
                    } else {
                        opts.background
                    }
                }
            };
            let noise = if opts.speckle { rng.exponential() } else { 1.0 };
            img.set(r, c, (base * gain * noise).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(img.quantized_8bit())
}

/// A sample before its image is produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub class: usize,
    pub scene: SceneParams,
    /// Image file to load instead of synthesizing.
    pub path: Option<PathBuf>,
}

impl Candidate {
    pub fn split(&self) -> Split {
        split_for_depression(self.scene.depression_angle).expect("candidate angles are validated")
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub class: usize,
    pub caption: String,
    pub qa_pairs: Vec<(String, String)>,
    pub split: Split,
    pub scene: SceneParams,
}

impl Sample {
    pub fn class_name(&self) -> &'static str {
        &classes()[self.class].name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Candidates generated per class before undersampling.
    pub train_available: usize,
    pub test_available: usize,
    /// Per-class caps applied by undersampling.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub synth: SynthOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_available: 60,
            test_available: 30,
            train_per_class: 50,
            test_per_class: 25,
            seed: 1995,
            synth: SynthOptions::default(),
        }
    }
}

/// Synthetic candidates for every class: `train_available` at 17° and
/// `test_available` at 15°, each with its own derived seed and aspect.
pub fn plan_candidates(config: &DataConfig) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (ci, class) in classes().iter().enumerate() {
        for (split, count) in [(Split::Train, config.train_available), (Split::Test, config.test_available)] {
            for i in 0..count {
                let seed = derive_seed(config.seed, &[ci as u64, split as u64, i as u64]);
                let mut rng = RngState::new(seed);
                let aspect = rng.uniform() * 360.0;
                out.push(Candidate {
                    id: format!("{}_{}_{i:04}", class.name, split.as_str()),
                    class: ci,
                    scene: SceneParams {
                        depression_angle: split.depression(),
                        aspect_angle: aspect,
                        collection_tag: class.collection.clone(),
                        seed: rng.fork().seed(),
                    },
                    path: None,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitCount {
    pub class: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Candidate>,
    pub test: Vec<Candidate>,
    pub summary: Vec<SplitCount>,
}

/// Keep at most the cap per class and split, chosen uniformly without
/// replacement; kept items stay in input order.
pub fn build_splits(candidates: Vec<Candidate>, train_cap: usize, test_cap: usize, rng: &mut RngState) -> Result<Splits> {
    let n_classes = classes().len();
    let mut buckets: BTreeMap<(usize, Split), Vec<Candidate>> = BTreeMap::new();
    for c in candidates {
        if c.class >= n_classes {
            return Err(invalid(format!("class index {} out of range", c.class)));
        }
        split_for_depression(c.scene.depression_angle)?;
        buckets.entry((c.class, c.split())).or_default().push(c);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut summary = Vec::with_capacity(n_classes);
    for (ci, class) in classes().iter().enumerate() {
        let mut counts = [0usize; 2];
        for (k, split) in [Split::Train, Split::Test].into_iter().enumerate() {
            let items = buckets.remove(&(ci, split)).unwrap_or_default();
            if items.is_empty() {
                return Err(Error::EmptyClass(class.name.clone(), split.as_str().into()));
            }
            let cap = if split == Split::Train { train_cap } else { test_cap };
            let mut keep = rng.sample_indices(items.len(), cap);
            keep.sort_unstable();
            counts[k] = keep.len();
            let dest = if split == Split::Train { &mut train } else { &mut test };
            let mut items: Vec<Option<Candidate>> = items.into_iter().map(Some).collect();
            dest.extend(keep.into_iter().map(|i| items[i].take().expect("indices are distinct")));
        }
        summary.push(SplitCount {
            class: class.name.clone(),
            train: counts[0],
            test: counts[1],
        });
    }
    Ok(Splits { train, test, summary })
}

/// Produce images (synthesized or loaded) for candidates, in order.
pub fn materialize(candidates: &[Candidate], opts: &SynthOptions) -> Result<Vec<Sample>> {
    candidates
        .par_iter()
        .map(|c| {
            let class = &classes()[c.class];
            let image = match &c.path {
                Some(p) => GrayImage::load_pgm(p)?,
                None => synth_generate(class, &c.scene, opts)?,
            };
            Ok(Sample {
                id: c.id.clone(),
                image,
                class: c.class,
                caption: class.caption.clone(),
                qa_pairs: make_vqa_pairs(&class.name)?,
                split: c.split(),
                scene: c.scene.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub class: String,
    pub depression_angle: f64,
    pub collection: String,
    pub split: Split,
    #[serde(default)]
    pub aspect_angle: Option<f64>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<Candidate>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if !seen.insert(e.path.clone()) {
            return Err(invalid(format!("duplicate manifest path {:?}", e.path)));
        }
        let class = class_index(&e.class)?;
        let split = split_for_depression(e.depression_angle)?;
        if split != e.split {
            return Err(invalid(format!(
                "manifest entry {:?} says {} but its depression angle implies {}",
                e.path,
                e.split.as_str(),
                split.as_str()
            )));
        }
        let p = PathBuf::from(&e.path);
        let full = if p.is_absolute() { p } else { dir.join(p) };
        out.push(Candidate {
            id: Path::new(&e.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.path.clone()),
            class,
            scene: SceneParams {
                depression_angle: e.depression_angle,
                aspect_angle: e.aspect_angle.unwrap_or(f64::NAN),
                collection_tag: e.collection,
                seed: 0,
            },
            path: Some(full),
        });
    }
    Ok(out)
}

/// Write PGM images under `dir/images` plus `dir/manifest.json`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestEntry>> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .map(|s| {
            let rel = format!("images/{}.pgm", s.id);
            s.image.save_pgm(&dir.join(&rel))?;
            Ok(ManifestEntry {
                path: rel,
                class: s.class_name().to_string(),
                depression_angle: s.scene.depression_angle,
                collection: s.scene.collection_tag.clone(),
                split: s.split,
                aspect_angle: Some(s.scene.aspect_angle),
            })
        })
        .collect::<Result<_>>()?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
    Ok(entries)
}

/// Per-class counts with a totals line.
pub fn write_split_summary(path: &Path, summary: &[SplitCount]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "class,train_17deg,test_15deg")?;
    for s in summary {
        writeln!(f, "{},{},{}", s.class, s.train, s.test)?;
    }
    let (tr, te) = summary.iter().fold((0, 0), |(a, b), s| (a + s.train, b + s.test));
    writeln!(f, "total,{tr},{te}")?;
    f.flush()?;
    Ok(())
}
