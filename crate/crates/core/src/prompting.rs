//! Seed-point grid generation and the segmentation provider contract.
//!
//! A provider turns `(image, seed points)` into up to three masks per point.
//! Three providers ship with the crate: [`MockProvider`] (analytic masks for
//! synthetic scenes), [`FileProvider`] (precomputed masks on disk) and the
//! wire client in [`crate::protocol`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image, RleMask};

/// Upper bound on masks returned per prompt.
pub const MAX_MASKS_PER_POINT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPoint {
    pub x: u32,
    pub y: u32,
}

fn axis_positions(len: u32, spacing: u32) -> Vec<u32> {
    if len < spacing {
        return vec![len / 2];
    }
    (0..)
        .map(|i| spacing / 2 + i * spacing)
        .take_while(|&p| p < len)
        .collect()
}

/// Regular grid of cell centres, `spacing` pixels apart, row-major.
///
/// An axis shorter than `spacing` contributes a single coordinate at its
/// centre, so every image gets at least one prompt.
pub fn generate_seed_grid(width: u32, height: u32, spacing: u32) -> Result<Vec<SeedPoint>> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry(format!(
            "cannot seed a {width}x{height} image"
        )));
    }
    if spacing == 0 {
        return Err(Error::Config("grid spacing must be at least 1".into()));
    }
    let xs = axis_positions(width, spacing);
    let ys = axis_positions(height, spacing);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| SeedPoint { x, y }))
        .collect())
}

/// Short stable digest of a prompt grid, used to key precomputed mask files.
pub fn grid_hash(points: &[SeedPoint]) -> String {
    let mut h = Sha256::new();
    for p in points {
        h.update(p.x.to_le_bytes());
        h.update(p.y.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One raw mask with its provenance.
#[derive(Clone, Debug)]
pub struct RawMask {
    pub point_index: usize,
    /// Position among the masks returned for the same point.
    pub slot: usize,
    pub mask: BinaryMask,
    pub score: f32,
}

#[derive(Clone, Debug, Default)]
pub struct RawMaskSet {
    pub masks: Vec<RawMask>,
    pub point_count: usize,
}

impl RawMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// What a provider can do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCaps {
    pub max_masks_per_point: usize,
    pub batching: bool,
    pub deterministic: bool,
    /// Calls must not overlap; the pipeline funnels them through one lane.
    pub serialized: bool,
}

impl Default for ProviderCaps {
    fn default() -> Self {
        Self {
            max_masks_per_point: MAX_MASKS_PER_POINT,
            batching: true,
            deterministic: true,
            serialized: false,
        }
    }
}

/// A segmentation request. `image_key` identifies the image (and tile) for
/// providers that look results up rather than compute them.
#[derive(Clone, Copy, Debug)]
pub struct SegmentRequest<'a> {
    pub image: &'a Image,
    pub points: &'a [SeedPoint],
    pub image_key: &'a str,
}

pub trait SegmentationProvider: Send + Sync {
    fn caps(&self) -> ProviderCaps;

    /// Raw provider answer; validated by [`segment`].
    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>>;
}

impl<P: SegmentationProvider + ?Sized> SegmentationProvider for &P {
    fn caps(&self) -> ProviderCaps {
        (**self).caps()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        (**self).segment(req)
    }
}

impl<P: SegmentationProvider + ?Sized> SegmentationProvider for Box<P> {
    fn caps(&self) -> ProviderCaps {
        (**self).caps()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        (**self).segment(req)
    }
}

/// Query `provider` and enforce the provider contract on its answer.
pub fn segment<P: SegmentationProvider + ?Sized>(
    provider: &P,
    img: &Image,
    points: &[SeedPoint],
    image_key: &str,
) -> Result<RawMaskSet> {
    if let Some(p) = points
        .iter()
        .find(|p| p.x >= img.width() || p.y >= img.height())
    {
        return Err(Error::Geometry(format!(
            "seed point ({}, {}) outside {}x{} image",
            p.x,
            p.y,
            img.width(),
            img.height()
        )));
    }
    if points.is_empty() {
        return Ok(RawMaskSet::default());
    }
    let masks = provider.segment(&SegmentRequest {
        image: img,
        points,
        image_key,
    })?;
    let mut per_point = vec![0usize; points.len()];
    for m in &masks {
        if m.point_index >= points.len() {
            return Err(Error::Protocol(format!(
                "mask refers to point {} but only {} were sent",
                m.point_index,
                points.len()
            )));
        }
        if m.mask.dims() != img.dims() {
            return Err(Error::Protocol(format!(
                "mask is {:?}, image is {:?}",
                m.mask.dims(),
                img.dims()
            )));
        }
        if !m.score.is_finite() {
            return Err(Error::Protocol("non-finite mask score".into()));
        }
        per_point[m.point_index] += 1;
        if per_point[m.point_index] > MAX_MASKS_PER_POINT {
            return Err(Error::Protocol(format!(
                "more than {MAX_MASKS_PER_POINT} masks for point {}",
                m.point_index
            )));
        }
    }
    Ok(RawMaskSet {
        masks,
        point_count: points.len(),
    })
}

/// Wire/file representation of one provider mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub point_index: usize,
    pub rle: RleMask,
    pub score: f32,
}

/// Decode wire masks, numbering slots per point in arrival order.
pub fn decode_wire_masks(masks: &[WireMask]) -> Result<Vec<RawMask>> {
    let mut slots: HashMap<usize, usize> = HashMap::new();
    masks
        .iter()
        .map(|wm| {
            let mask = wm
                .rle
                .decode()
                .map_err(|e| Error::Protocol(format!("bad mask payload: {e}")))?;
            let slot = slots.entry(wm.point_index).or_insert(0);
            let raw = RawMask {
                point_index: wm.point_index,
                slot: *slot,
                mask,
                score: wm.score,
            };
            *slot += 1;
            Ok(raw)
        })
        .collect()
}

pub fn encode_wire_masks(masks: &[RawMask]) -> Vec<WireMask> {
    masks
        .iter()
        .map(|m| WireMask {
            point_index: m.point_index,
            rle: RleMask::encode(&m.mask),
            score: m.score,
        })
        .collect()
}

/// Analytic provider for synthetic scenes.
///
/// A seed on a non-background pixel yields the 8-connected region of pixels
/// sharing that exact colour. Regions whose bounding box is small relative to
/// the image (`min_relative_size`, long side over the image's long side) are
/// not reported, which mimics a segmenter missing tiny objects at full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockProvider {
    pub background: [u8; 3],
    pub min_relative_size: f64,
    /// Also return the union of all foreground as a second, lower-scored mask.
    pub emit_context_mask: bool,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self {
            background: [0, 0, 0],
            min_relative_size: 0.0,
            emit_context_mask: false,
        }
    }
}

impl MockProvider {
    fn region(&self, img: &Image, labels: &mut [u32], next: &mut u32, x: u32, y: u32) -> u32 {
        let w = img.width() as usize;
        let idx = y as usize * w + x as usize;
        if labels[idx] != 0 {
            return labels[idx];
        }
        let color = img.pixel(x, y);
        let label = *next;
        *next += 1;
        let mut stack = vec![(x, y)];
        labels[idx] = label;
        while let Some((cx, cy)) = stack.pop() {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = cx as i64 + dx;
                    let ny = cy as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= img.width() as i64 || ny >= img.height() as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as u32, ny as u32);
                    let n = ny as usize * w + nx as usize;
                    if labels[n] == 0 && img.pixel(nx, ny) == color {
                        labels[n] = label;
                        stack.push((nx, ny));
                    }
                }
            }
        }
        label
    }
}

impl SegmentationProvider for MockProvider {
    fn caps(&self) -> ProviderCaps {
        ProviderCaps::default()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        let img = req.image;
        let (w, h) = img.dims();
        let mut labels = vec![0u32; w as usize * h as usize];
        let mut next = 1u32;
        let mut cache: HashMap<u32, Option<BinaryMask>> = HashMap::new();
        let long_side = w.max(h) as f64;
        let context = if self.emit_context_mask {
            let m = BinaryMask::from_fn(w, h, |x, y| img.pixel(x, y) != self.background);
            (!m.is_empty()).then_some(m)
        } else {
            None
        };

        let mut out = Vec::new();
        for (i, p) in req.points.iter().enumerate() {
            if img.pixel(p.x, p.y) == self.background {
                continue;
            }
            let label = self.region(img, &mut labels, &mut next, p.x, p.y);
            let mask = cache.entry(label).or_insert_with(|| {
                let m = BinaryMask::from_bits(w, h, labels.iter().map(|&l| l == label).collect())
                    .expect("label map matches image size");
                let bbox = m.bbox()?;
                let rel = bbox.width().max(bbox.height()) as f64 / long_side;
                (rel >= self.min_relative_size).then_some(m)
            });
            let Some(mask) = mask else { continue };
            out.push(RawMask {
                point_index: i,
                slot: 0,
                mask: mask.clone(),
                score: 1.0,
            });
            if let Some(ctx) = &context {
                out.push(RawMask {
                    point_index: i,
                    slot: 1,
                    mask: ctx.clone(),
                    score: 0.5,
                });
            }
        }
        Ok(out)
    }
}

/// Precomputed masks for one image (or tile), as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDocument {
    pub image: String,
    pub grid_hash: String,
    pub masks: Vec<WireMask>,
}

/// Serves masks recorded earlier, keyed by image key and grid hash.
#[derive(Debug, Default)]
pub struct FileProvider {
    docs: HashMap<(String, String), Vec<WireMask>>,
}

impl FileProvider {
    pub fn from_documents(docs: impl IntoIterator<Item = MaskDocument>) -> Self {
        Self {
            docs: docs
                .into_iter()
                .map(|d| ((d.image, d.grid_hash), d.masks))
                .collect(),
        }
    }

    /// Load every `*.json` document in `path` (a directory) or the single
    /// document / array of documents in `path` (a file).
    pub fn open(path: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = Vec::new();
        if path.is_dir() {
            for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
                let p = entry.map_err(|e| Error::io(path, e))?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut docs = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            if value.is_array() {
                docs.extend(
                    serde_json::from_value::<Vec<MaskDocument>>(value)
                        .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?,
                );
            } else {
                docs.push(
                    serde_json::from_value(value)
                        .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?,
                );
            }
        }
        Ok(Self::from_documents(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl SegmentationProvider for FileProvider {
    fn caps(&self) -> ProviderCaps {
        ProviderCaps::default()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        let key = (req.image_key.to_string(), grid_hash(req.points));
        let masks = self.docs.get(&key).ok_or_else(|| {
            Error::Data(format!(
                "no precomputed masks for image {:?} with grid {}",
                key.0, key.1
            ))
        })?;
        decode_wire_masks(masks)
    }
}

/// Wraps a provider and keeps every answer as a [`MaskDocument`], so a run
/// against a live model can be replayed later through [`FileProvider`].
pub struct RecordingProvider<P> {
    inner: P,
    docs: Mutex<Vec<MaskDocument>>,
}

impl<P: SegmentationProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            docs: Mutex::new(Vec::new()),
        }
    }

    pub fn documents(&self) -> Vec<MaskDocument> {
        let mut docs = self.docs.lock().expect("recording lock").clone();
        docs.sort_by(|a, b| (&a.image, &a.grid_hash).cmp(&(&b.image, &b.grid_hash)));
        docs
    }

    /// Write all recorded documents as one JSON array.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.documents())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl<P: SegmentationProvider> SegmentationProvider for RecordingProvider<P> {
    fn caps(&self) -> ProviderCaps {
        self.inner.caps()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        let masks = self.inner.segment(req)?;
        self.docs.lock().expect("recording lock").push(MaskDocument {
            image: req.image_key.to_string(),
            grid_hash: grid_hash(req.points),
            masks: encode_wire_masks(&masks),
        });
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{Disk, Scene};
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = generate_seed_grid(100, 100, 10).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], SeedPoint { x: 5, y: 5 });
        assert_eq!(g[1], SeedPoint { x: 15, y: 5 });

        assert_eq!(
            generate_seed_grid(10, 10, 10).unwrap(),
            vec![SeedPoint { x: 5, y: 5 }]
        );
        assert_eq!(
            generate_seed_grid(7, 7, 10).unwrap(),
            vec![SeedPoint { x: 3, y: 3 }]
        );
        assert!(generate_seed_grid(0, 5, 10).is_err());
        assert!(generate_seed_grid(5, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn grid_matches_closed_form(w in 1u32..200, h in 1u32..200, s in 1u32..40) {
            let g = generate_seed_grid(w, h, s).unwrap();
            let count = |len: u32| -> usize {
                if len < s {
                    1
                } else {
                    ((len - s / 2 - 1) / s + 1) as usize
                }
            };
            prop_assert_eq!(g.len(), count(w) * count(h));
            // direct enumeration
            let mut expected = Vec::new();
            let ys: Vec<u32> = if h < s { vec![h / 2] } else { (s / 2..h).step_by(s as usize).collect() };
            let xs: Vec<u32> = if w < s { vec![w / 2] } else { (s / 2..w).step_by(s as usize).collect() };
            for &y in &ys {
                for &x in &xs {
                    expected.push(SeedPoint { x, y });
                }
            }
            prop_assert_eq!(&g, &expected);
            for p in &g {
                prop_assert!(p.x < w && p.y < h);
            }
            for pair in g.windows(2) {
                if pair[0].y == pair[1].y {
                    prop_assert_eq!(pair[1].x - pair[0].x, s);
                }
            }
        }
    }

    #[test]
    fn empty_points_give_empty_set() {
        let img = Image::new(20, 20).unwrap();
        let set = segment(&MockProvider::default(), &img, &[], "x").unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn mock_returns_disk_masks() {
        let scene = Scene::new(60, 40)
            .with_disk(Disk::new(15, 15, 6, [255, 0, 0], "red"))
            .with_disk(Disk::new(45, 25, 7, [0, 0, 255], "blue"));
        let img = scene.render();
        let points = generate_seed_grid(60, 40, 5).unwrap();
        let set = segment(&MockProvider::default(), &img, &points, "scene").unwrap();
        assert!(!set.is_empty());
        let red = scene.disk_mask(0);
        let blue = scene.disk_mask(1);
        for m in &set.masks {
            let p = points[m.point_index];
            if scene.disks()[0].contains(p.x, p.y) {
                assert_eq!(m.mask, red);
            } else {
                assert!(scene.disks()[1].contains(p.x, p.y));
                assert_eq!(m.mask, blue);
            }
        }
        // every seed inside a disk got a mask; seeds on background none
        let inside = points
            .iter()
            .filter(|p| scene.disks().iter().any(|d| d.contains(p.x, p.y)))
            .count();
        assert_eq!(set.len(), inside);
    }

    #[test]
    fn mock_hides_small_regions() {
        let scene = Scene::new(100, 100).with_disk(Disk::new(50, 50, 2, [0, 255, 0], "g"));
        let img = scene.render();
        let pts = [SeedPoint { x: 50, y: 50 }];
        let hidden = MockProvider {
            min_relative_size: 0.1,
            ..Default::default()
        };
        assert!(segment(&hidden, &img, &pts, "k").unwrap().is_empty());
        assert_eq!(segment(&MockProvider::default(), &img, &pts, "k").unwrap().len(), 1);
    }

    struct Misbehaving(Vec<RawMask>);

    impl SegmentationProvider for Misbehaving {
        fn caps(&self) -> ProviderCaps {
            ProviderCaps::default()
        }

        fn segment(&self, _: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn contract_violations_are_protocol_errors() {
        let img = Image::new(8, 8).unwrap();
        let pts = [SeedPoint { x: 1, y: 1 }];
        let good = BinaryMask::from_pixels(8, 8, [(1, 1)]).unwrap();
        let raw = |point_index, mask: BinaryMask| RawMask {
            point_index,
            slot: 0,
            mask,
            score: 0.9,
        };

        let stray = Misbehaving(vec![raw(3, good.clone())]);
        assert!(matches!(segment(&stray, &img, &pts, "k"), Err(Error::Protocol(_))));

        let wrong_size = Misbehaving(vec![raw(0, BinaryMask::empty(4, 4))]);
        assert!(matches!(segment(&wrong_size, &img, &pts, "k"), Err(Error::Protocol(_))));

        let too_many = Misbehaving(vec![raw(0, good.clone()); 4]);
        assert!(matches!(segment(&too_many, &img, &pts, "k"), Err(Error::Protocol(_))));

        let three = Misbehaving(vec![raw(0, good); 3]);
        assert_eq!(segment(&three, &img, &pts, "k").unwrap().len(), 3);

        let outside = [SeedPoint { x: 8, y: 0 }];
        assert!(matches!(
            segment(&MockProvider::default(), &img, &outside, "k"),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn recorded_masks_replay_through_file_provider() {
        let scene = Scene::new(40, 40).with_disk(Disk::new(20, 20, 8, [9, 9, 200], "b"));
        let img = scene.render();
        let points = generate_seed_grid(40, 40, 10).unwrap();
        let rec = RecordingProvider::new(MockProvider::default());
        let live = segment(&rec, &img, &points, "img.png").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.json");
        rec.write(&path).unwrap();
        let file = FileProvider::open(&path).unwrap();
        let replay = segment(&file, &img, &points, "img.png").unwrap();
        assert_eq!(live.len(), replay.len());
        for (a, b) in live.masks.iter().zip(&replay.masks) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.point_index, b.point_index);
        }

        // a different grid is a different key
        let other = generate_seed_grid(40, 40, 7).unwrap();
        assert!(matches!(
            segment(&file, &img, &other, "img.png"),
            Err(Error::Data(_))
        ));
    }
}
