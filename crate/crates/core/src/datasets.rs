//! Dataset loaders (FSC-147, CARPK, stitched multi-class sets) and the
//! multi-class stitcher.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::GroundTruth;
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub gt: GroundTruth,
    /// Exemplar boxes `[x0, y0, x1, y1]`; loaded but never used for counting.
    #[serde(default)]
    pub exemplars: Vec<[f64; 4]>,
    pub split: String,
}

impl DatasetRecord {
    /// Label of the record's first class, `"object"` when it has none.
    pub fn label(&self) -> &str {
        self.gt
            .classes
            .first()
            .map_or("object", |c| c.label.as_str())
    }

    pub fn name(&self) -> String {
        self.image_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::Data(format!("missing image {}", path.display())));
    }
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// File layout of an FSC-147 checkout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fsc147Layout {
    pub image_dir: PathBuf,
    pub annotation_file: PathBuf,
    pub split_file: PathBuf,
    /// Tab-separated `filename<TAB>class`; optional.
    pub class_file: PathBuf,
}

impl Default for Fsc147Layout {
    fn default() -> Self {
        Self {
            image_dir: "images_384_VarV2".into(),
            annotation_file: "annotation_FSC147_384.json".into(),
            split_file: "Train_Test_Val_FSC_147.json".into(),
            class_file: "ImageClasses_FSC147.txt".into(),
        }
    }
}

#[derive(Deserialize)]
struct FscAnnotation {
    points: Vec<[f64; 2]>,
    #[serde(default)]
    box_examples_coordinates: Vec<Vec<[f64; 2]>>,
}

fn corners_to_box(corners: &[[f64; 2]]) -> Option<[f64; 4]> {
    let first = corners.first()?;
    let mut b = [first[0], first[1], first[0], first[1]];
    for c in corners {
        b[0] = b[0].min(c[0]);
        b[1] = b[1].min(c[1]);
        b[2] = b[2].max(c[0]);
        b[3] = b[3].max(c[1]);
    }
    Some(b)
}

/// Records of one FSC-147 split, in split-file order.
pub fn load_fsc147(root: &Path, split: &str, layout: &Fsc147Layout) -> Result<Vec<DatasetRecord>> {
    let splits: HashMap<String, Vec<String>> = read_json(&root.join(&layout.split_file))?;
    let names = splits.get(split).ok_or_else(|| {
        let mut known: Vec<&String> = splits.keys().collect();
        known.sort();
        Error::Data(format!("unknown split {split:?}; available: {known:?}"))
    })?;
    let annotations: HashMap<String, FscAnnotation> = read_json(&root.join(&layout.annotation_file))?;

    let class_path = root.join(&layout.class_file);
    let mut classes: HashMap<String, String> = HashMap::new();
    if class_path.exists() {
        let text = std::fs::read_to_string(&class_path).map_err(|e| Error::io(&class_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.splitn(2, '\t');
            if let (Some(name), Some(class)) = (parts.next(), parts.next()) {
                classes.insert(name.trim().to_string(), class.trim().to_string());
            }
        }
    }

    names
        .iter()
        .map(|name| {
            let ann = annotations
                .get(name)
                .ok_or_else(|| Error::Data(format!("no annotation for {name}")))?;
            let path = root.join(&layout.image_dir).join(name);
            let (width, height) = image_dims(&path)?;
            let label = classes.get(name).map_or("object", String::as_str);
            let mut gt = GroundTruth::default();
            for p in &ann.points {
                gt.add_point(label, *p);
            }
            if gt.classes.is_empty() {
                gt.add_point(label, [0.0, 0.0]);
                gt.classes[0].points.clear();
            }
            gt.check_bounds(width, height)
                .map_err(|e| Error::Data(format!("{name}: {e}")))?;
            Ok(DatasetRecord {
                image_path: path,
                width,
                height,
                gt,
                exemplars: ann
                    .box_examples_coordinates
                    .iter()
                    .filter_map(|c| corners_to_box(c))
                    .collect(),
                split: split.to_string(),
            })
        })
        .collect()
}

/// File layout of a CARPK checkout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarpkLayout {
    pub image_dir: PathBuf,
    pub annotation_dir: PathBuf,
    /// Directory of `<split>.txt` id lists.
    pub split_dir: PathBuf,
    pub image_ext: String,
}

impl Default for CarpkLayout {
    fn default() -> Self {
        Self {
            image_dir: "Images".into(),
            annotation_dir: "Annotations".into(),
            split_dir: "ImageSets".into(),
            image_ext: "png".into(),
        }
    }
}

/// Parse a CARPK annotation file: one `x0 y0 x1 y1 [class]` box per line.
pub fn parse_carpk_annotation(path: &Path, text: &str) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let coords: Option<Vec<f64>> = fields
            .get(..4)
            .map(|f| f.iter().map(|v| v.parse::<f64>().ok()).collect())
            .and_then(|v: Option<Vec<f64>>| v);
        let Some(c) = coords else {
            return Err(Error::Data(format!(
                "{}:{}: expected `x0 y0 x1 y1 [class]`, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        gt.add_box("car", [c[0], c[1], c[2], c[3]]);
    }
    if gt.classes.is_empty() {
        gt.classes.push(crate::evaluation::ClassAnnotation {
            label: "car".into(),
            ..Default::default()
        });
    }
    Ok(gt)
}

pub fn load_carpk(root: &Path, split: &str, layout: &CarpkLayout) -> Result<Vec<DatasetRecord>> {
    let list = root.join(&layout.split_dir).join(format!("{split}.txt"));
    if !list.exists() {
        return Err(Error::Data(format!(
            "unknown split {split:?}: {} not found",
            list.display()
        )));
    }
    let ids = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    ids.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let ann_path = root.join(&layout.annotation_dir).join(format!("{id}.txt"));
            let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            let gt = parse_carpk_annotation(&ann_path, &text)?;
            let path = root
                .join(&layout.image_dir)
                .join(format!("{id}.{}", layout.image_ext));
            let (width, height) = image_dims(&path)?;
            gt.check_bounds(width, height)
                .map_err(|e| Error::Data(format!("{id}: {e}")))?;
            Ok(DatasetRecord {
                image_path: path,
                width,
                height,
                gt,
                exemplars: Vec::new(),
                split: split.to_string(),
            })
        })
        .collect()
}

/// Parameters of one stitched multi-class dataset variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchSpec {
    pub seed: u64,
    pub count: usize,
    pub min_sub_images: usize,
    pub max_sub_images: usize,
    pub columns: usize,
}

impl Default for StitchSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            count: 100,
            min_sub_images: 1,
            max_sub_images: 10,
            columns: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub source: String,
    pub label: String,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug)]
pub struct StitchedImage {
    pub image: Image,
    pub gt: GroundTruth,
    pub placements: Vec<Placement>,
}

/// Row-major cell offsets for images of the given `(width, height)`, packed
/// `columns` per row; each row is as tall as its tallest image. Returns the
/// offsets and the canvas size.
pub fn layout(sizes: &[(u32, u32)], columns: usize) -> (Vec<(u32, u32)>, (u32, u32)) {
    let mut offsets = Vec::with_capacity(sizes.len());
    let (mut canvas_w, mut y) = (0u32, 0u32);
    for row in sizes.chunks(columns.max(1)) {
        let mut x = 0;
        for &(w, _) in row {
            offsets.push((x, y));
            x += w;
        }
        canvas_w = canvas_w.max(x);
        y += row.iter().map(|s| s.1).max().unwrap_or(0);
    }
    (offsets, (canvas_w, y))
}

/// Compose `spec.count` canvases of distinct-class sub-images drawn from
/// `pool`. Canvas `i` uses its own ChaCha stream `i` of the master seed, so
/// canvases are reproducible independently of each other.
pub fn stitch_multiclass<F>(spec: &StitchSpec, pool: &[DatasetRecord], mut load: F) -> Result<Vec<StitchedImage>>
where
    F: FnMut(&DatasetRecord) -> Result<Image>,
{
    if pool.is_empty() {
        return Err(Error::Data("stitching pool is empty".into()));
    }
    if spec.min_sub_images == 0 || spec.min_sub_images > spec.max_sub_images || spec.columns == 0 {
        return Err(Error::Config(format!("invalid stitch spec {spec:?}")));
    }
    let distinct: BTreeSet<&str> = pool.iter().map(DatasetRecord::label).collect();

    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let k = rng.random_range(spec.min_sub_images..=spec.max_sub_images);
            if distinct.len() < k {
                return Err(Error::Data(format!(
                    "canvas {i} needs {k} distinct classes, pool has {}",
                    distinct.len()
                )));
            }
            let mut used: BTreeSet<&str> = BTreeSet::new();
            let mut picks: Vec<&DatasetRecord> = Vec::with_capacity(k);
            while picks.len() < k {
                let rec = &pool[rng.random_range(0..pool.len())];
                if used.insert(rec.label()) {
                    picks.push(rec);
                }
            }
            let images: Vec<Image> = picks.iter().map(|r| load(r)).collect::<Result<_>>()?;
            let sizes: Vec<(u32, u32)> = images.iter().map(Image::dims).collect();
            let (offsets, (cw, ch)) = layout(&sizes, spec.columns);
            let mut canvas = Image::new(cw, ch)?;
            let mut gt = GroundTruth::default();
            let mut placements = Vec::with_capacity(k);
            for ((rec, img), &(x, y)) in picks.iter().zip(&images).zip(&offsets) {
                canvas.paste(img, x, y);
                for class in &rec.gt.classes {
                    for p in &class.points {
                        gt.add_point(&class.label, [p[0] + x as f64, p[1] + y as f64]);
                    }
                    if class.points.is_empty() && gt.class_index(&class.label).is_none() {
                        gt.classes.push(crate::evaluation::ClassAnnotation {
                            label: class.label.clone(),
                            ..Default::default()
                        });
                    }
                }
                placements.push(Placement {
                    source: rec.name(),
                    label: rec.label().to_string(),
                    x,
                    y,
                    width: img.width(),
                    height: img.height(),
                });
            }
            Ok(StitchedImage {
                image: canvas,
                gt,
                placements,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StitchedAnnotation {
    classes: BTreeMap<String, Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchMeta {
    pub seed: u64,
    pub variant: String,
    pub count: usize,
    pub spec: StitchSpec,
    pub placements: BTreeMap<String, Vec<Placement>>,
}

/// Write `images/NNN.png`, `annotations.json` and `meta.json` under `dir`.
pub fn write_stitched(dir: &Path, spec: &StitchSpec, variant: &str, canvases: &[StitchedImage]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut annotations = BTreeMap::new();
    let mut placements = BTreeMap::new();
    for (i, c) in canvases.iter().enumerate() {
        let name = format!("{i:03}.png");
        c.image.save_png(&images.join(&name))?;
        let classes = c
            .gt
            .classes
            .iter()
            .map(|cl| (cl.label.clone(), cl.points.clone()))
            .collect();
        annotations.insert(name.clone(), StitchedAnnotation { classes });
        placements.insert(name, c.placements.clone());
    }
    let ann_path = dir.join("annotations.json");
    std::fs::write(&ann_path, serde_json::to_string_pretty(&annotations)?)
        .map_err(|e| Error::io(&ann_path, e))?;
    let meta = StitchMeta {
        seed: spec.seed,
        variant: variant.to_string(),
        count: canvases.len(),
        spec: spec.clone(),
        placements,
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

/// Load a dataset written by [`write_stitched`] (or any directory with the
/// same `images/` + `annotations.json` layout).
pub fn load_stitched(root: &Path) -> Result<Vec<DatasetRecord>> {
    let annotations: BTreeMap<String, StitchedAnnotation> = read_json(&root.join("annotations.json"))?;
    annotations
        .into_iter()
        .map(|(name, ann)| {
            let path = root.join("images").join(&name);
            let (width, height) = image_dims(&path)?;
            let mut gt = GroundTruth::default();
            for (label, points) in ann.classes {
                gt.classes.push(crate::evaluation::ClassAnnotation {
                    label,
                    points,
                    boxes: Vec::new(),
                });
            }
            gt.check_bounds(width, height)
                .map_err(|e| Error::Data(format!("{name}: {e}")))?;
            Ok(DatasetRecord {
                image_path: path,
                width,
                height,
                gt,
                exemplars: Vec::new(),
                split: "stitched".into(),
            })
        })
        .collect()
}
