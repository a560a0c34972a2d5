//! Masked, aspect-preserving crops and the embedder contract.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{crop_and_pad, Image};
use crate::maskproc::CandidateInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub candidate_id: usize,
    pub values: Vec<f32>,
}

/// Per-channel normalisation an embedder applies to its input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// `None` when the embedder consumes raw RGB.
    fn normalization(&self) -> Option<Normalization> {
        None
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn normalization(&self) -> Option<Normalization> {
        (**self).normalization()
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>> {
        (**self).embed_raw(crop)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn normalization(&self) -> Option<Normalization> {
        (**self).normalization()
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>> {
        (**self).embed_raw(crop)
    }
}

/// Zero everything outside the candidate mask, then crop its tight box into a
/// `target x target` canvas.
pub fn prepare_crop(img: &Image, cand: &CandidateInstance, target: u32) -> Result<Image> {
    if cand.mask.dims() != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            found: cand.mask.dims(),
        });
    }
    let b = cand.bbox;
    let mut region = img.crop(b)?;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if !cand.mask.get(x, y) {
                region.put_pixel(x - b.x0, y - b.y0, [0, 0, 0]);
            }
        }
    }
    let full = crate::imaging::BBox::new(0, 0, b.width(), b.height())?;
    crop_and_pad(&region, full, target)
}

/// Embed one crop and check the result against the embedder's contract.
pub fn embed<E: Embedder + ?Sized>(e: &E, crop: &Image, candidate_id: usize) -> Result<FeatureVector> {
    let values = e.embed_raw(crop)?;
    if values.len() != e.dim() {
        return Err(Error::Protocol(format!(
            "embedder returned {} values, declared dimension is {}",
            values.len(),
            e.dim()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Protocol("embedder returned non-finite values".into()));
    }
    Ok(FeatureVector {
        candidate_id,
        values,
    })
}

const HIST_BINS: usize = 16;
const THUMB: usize = 16;

/// Deterministic model-free embedder: three 16-bin colour histograms over the
/// non-black pixels of the crop followed by a 16x16 RGB thumbnail, L2
/// normalised and then multiplied by `gain`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineEmbedder {
    pub gain: f32,
}

impl BaselineEmbedder {
    pub const DIM: usize = 3 * HIST_BINS + THUMB * THUMB * 3;

    /// Gain that puts distances between distinct colour classes on the scale
    /// of the default clustering thresholds.
    pub const DEFAULT_GAIN: f32 = 16.0;
}

impl Default for BaselineEmbedder {
    fn default() -> Self {
        Self {
            gain: Self::DEFAULT_GAIN,
        }
    }
}

/// Unscaled baseline features (unit norm, or all zero for a black crop).
pub fn baseline_embed(crop: &Image) -> Vec<f32> {
    let mut v = vec![0f64; BaselineEmbedder::DIM];
    let (w, h) = crop.dims();

    let mut n = 0u64;
    for y in 0..h {
        for x in 0..w {
            let p = crop.pixel(x, y);
            if p == [0, 0, 0] {
                continue;
            }
            n += 1;
            for c in 0..3 {
                v[c * HIST_BINS + p[c] as usize * HIST_BINS / 256] += 1.0;
            }
        }
    }
    if n > 0 {
        for h in &mut v[..3 * HIST_BINS] {
            *h /= n as f64;
        }
    }

    let thumb = &mut v[3 * HIST_BINS..];
    for ty in 0..THUMB {
        let (y0, y1) = block(ty, h as usize);
        for tx in 0..THUMB {
            let (x0, x1) = block(tx, w as usize);
            let mut sum = [0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = crop.pixel(x as u32, y as u32);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                thumb[(ty * THUMB + tx) * 3 + c] = sum[c] / count / 255.0;
            }
        }
    }

    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| (x / norm) as f32).collect()
    } else {
        v.into_iter().map(|x| x as f32).collect()
    }
}

/// Pixel range of thumbnail block `i` along an axis of length `len`; blocks
/// are nonempty even when `len < THUMB`.
fn block(i: usize, len: usize) -> (usize, usize) {
    let lo = i * len / THUMB;
    let hi = ((i + 1) * len / THUMB).max(lo + 1).min(len);
    (lo.min(len - 1), hi)
}

impl Embedder for BaselineEmbedder {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>> {
        Ok(baseline_embed(crop)
            .into_iter()
            .map(|x| x * self.gain)
            .collect())
    }
}

/// Memoises an embedder by crop content hash.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<[u8; 32], Vec<f32>>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("embedding cache lock").len()
    }
}

fn crop_digest(crop: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(crop.width().to_le_bytes());
    h.update(crop.height().to_le_bytes());
    h.update(crop.as_raw());
    h.finalize().into()
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn normalization(&self) -> Option<Normalization> {
        self.inner.normalization()
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>> {
        let key = crop_digest(crop);
        if let Some(v) = self.cache.lock().expect("embedding cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = self.inner.embed_raw(crop)?;
        self.cache
            .lock()
            .expect("embedding cache lock")
            .insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub candidate_id: usize,
    /// Offset into the binary file, in values (not bytes).
    pub offset: usize,
}

/// JSON side-car describing a little-endian f32 feature dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub dim: usize,
    pub data: String,
    pub entries: Vec<FeatureIndexEntry>,
}

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

/// Write `features` as `<stem>.f32` (raw little-endian f32, one vector after
/// another) plus a `<stem>.json` index.
pub fn write_feature_dump(stem: &Path, features: &[FeatureVector]) -> Result<()> {
    let dim = features.first().map_or(0, |f| f.values.len());
    let (json_path, data_path) = sidecar_paths(stem);
    let mut file = std::fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut entries = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        if f.values.len() != dim {
            return Err(Error::Data("feature vectors differ in dimension".into()));
        }
        let bytes: Vec<u8> = f.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        file.write_all(&bytes).map_err(|e| Error::io(&data_path, e))?;
        entries.push(FeatureIndexEntry {
            candidate_id: f.candidate_id,
            offset: i * dim,
        });
    }
    let index = FeatureIndex {
        dim,
        data: data_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&index)?)
        .map_err(|e| Error::io(&json_path, e))
}

/// Read a dump written by [`write_feature_dump`]. `path` may name the stem,
/// the `.json` index or the `.f32` data file.
pub fn read_feature_dump(path: &Path) -> Result<Vec<FeatureVector>> {
    let (json_path, _) = sidecar_paths(path);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let index: FeatureIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", json_path.display())))?;
    let data_path = json_path.with_file_name(&index.data);
    let mut bytes = Vec::new();
    std::fs::File::open(&data_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of 4",
            data_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    index
        .entries
        .iter()
        .map(|e| {
            let end = e.offset + index.dim;
            if end > values.len() {
                return Err(Error::Data(format!(
                    "feature {} extends past the end of {}",
                    e.candidate_id,
                    data_path.display()
                )));
            }
            Ok(FeatureVector {
                candidate_id: e.candidate_id,
                values: values[e.offset..end].to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BinaryMask;
    use crate::maskproc::Provenance;
    use proptest::prelude::*;

    fn candidate(mask: BinaryMask) -> CandidateInstance {
        CandidateInstance {
            id: 0,
            bbox: mask.bbox().unwrap(),
            mask,
            score: 1.0,
            source: Provenance {
                point_index: 0,
                slot: 0,
                tiles: vec![],
            },
        }
    }

    fn uniform(size: u32, rgb: [u8; 3]) -> Image {
        let mut img = Image::new(size, size).unwrap();
        for y in 0..size {
            for x in 0..size {
                img.put_pixel(x, y, rgb);
            }
        }
        img
    }

    fn dist(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn rectangle_mask_is_plain_crop() {
        let img = Image::from_raw(20, 10, (0..600).map(|v| (v % 200 + 30) as u8).collect()).unwrap();
        let mask = BinaryMask::from_fn(20, 10, |x, y| (4..14).contains(&x) && (2..7).contains(&y));
        let cand = candidate(mask);
        let out = prepare_crop(&img, &cand, 32).unwrap();
        assert_eq!(out, crop_and_pad(&img, cand.bbox, 32).unwrap());
    }

    #[test]
    fn disk_crop_has_black_corners() {
        let img = uniform(40, [255, 200, 10]);
        let mask = BinaryMask::from_fn(40, 40, |x, y| {
            let (dx, dy) = (x as i64 - 20, y as i64 - 20);
            dx * dx + dy * dy <= 100
        });
        let out = prepare_crop(&img, &candidate(mask.clone()), 224).unwrap();
        assert_eq!(out.dims(), (224, 224));
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
        assert_eq!(out.pixel(223, 0), [0, 0, 0]);
        assert_eq!(out.pixel(0, 223), [0, 0, 0]);
        assert_eq!(out.pixel(112, 112), [255, 200, 10]);

        // at native size masked-out pixels stay exactly black
        let native = prepare_crop(&img, &candidate(mask.clone()), 21).unwrap();
        let b = mask.bbox().unwrap();
        for y in 0..21 {
            for x in 0..21 {
                let inside = mask.get(b.x0 + x, b.y0 + y);
                assert_eq!(native.pixel(x, y) != [0, 0, 0], inside);
            }
        }
    }

    #[test]
    fn target_changes_only_canvas() {
        let img = uniform(30, [10, 220, 50]);
        let mask = BinaryMask::from_fn(30, 30, |x, y| x < 20 && y < 10);
        let a = prepare_crop(&img, &candidate(mask.clone()), 224).unwrap();
        let b = prepare_crop(&img, &candidate(mask), 500).unwrap();
        assert_eq!(a.dims(), (224, 224));
        assert_eq!(b.dims(), (500, 500));
        assert_eq!(a.pixel(223, 111), [10, 220, 50]);
        assert_eq!(a.pixel(0, 112), [0, 0, 0]);
        assert_eq!(b.pixel(499, 249), [10, 220, 50]);
        assert_eq!(b.pixel(0, 250), [0, 0, 0]);
    }

    #[test]
    fn black_crop_gives_zero_vector() {
        let e = BaselineEmbedder::default();
        let v = embed(&e, &Image::new(64, 64).unwrap(), 3).unwrap();
        assert_eq!(v.candidate_id, 3);
        assert_eq!(v.values.len(), BaselineEmbedder::DIM);
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn baseline_is_deterministic_and_normalised() {
        let crop = uniform(48, [120, 30, 200]);
        let a = baseline_embed(&crop);
        let b = baseline_embed(&crop);
        assert_eq!(a, b);
        assert_eq!(dist(&a, &b), 0.0);
        let norm = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn red_and_blue_are_far_apart() {
        // Closed form: each uniform crop has three histogram entries of 1 and
        // 256 thumbnail cells of 1 in its colour channel, so norm^2 = 259;
        // the two vectors share only the green bin-0 entry:
        // d^2 = 2 - 2/259.
        let red = baseline_embed(&uniform(32, [255, 0, 0]));
        let blue = baseline_embed(&uniform(32, [0, 0, 255]));
        let d = dist(&red, &blue);
        assert!((d - (2.0 - 2.0 / 259.0f64).sqrt()).abs() < 1e-6, "{d}");
        assert!(d > 0.5);
    }

    #[test]
    fn wrong_dimension_is_fatal() {
        struct Short;
        impl Embedder for Short {
            fn dim(&self) -> usize {
                4
            }
            fn embed_raw(&self, _: &Image) -> Result<Vec<f32>> {
                Ok(vec![0.0; 3])
            }
        }
        assert!(matches!(
            embed(&Short, &uniform(4, [1, 1, 1]), 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn cache_hits_on_identical_crops() {
        let e = CachingEmbedder::new(BaselineEmbedder::default());
        let crop = uniform(16, [3, 4, 5]);
        let a = e.embed_raw(&crop).unwrap();
        let b = e.embed_raw(&crop).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.cached(), 1);
        e.embed_raw(&uniform(16, [9, 9, 9])).unwrap();
        assert_eq!(e.cached(), 2);
    }

    #[test]
    fn feature_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("feats");
        let feats = vec![
            FeatureVector {
                candidate_id: 4,
                values: vec![1.0, -2.5, 3.25],
            },
            FeatureVector {
                candidate_id: 7,
                values: vec![0.0, f32::MIN_POSITIVE, 1e9],
            },
        ];
        write_feature_dump(&stem, &feats).unwrap();
        let bytes = std::fs::read(stem.with_extension("f32")).unwrap();
        assert_eq!(bytes.len(), 6 * 4);
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        assert_eq!(read_feature_dump(&stem).unwrap(), feats);
        assert_eq!(read_feature_dump(&stem.with_extension("json")).unwrap(), feats);
    }

    const SATURATED: [[u8; 3]; 6] = [
        [255, 0, 0],
        [0, 255, 0],
        [0, 0, 255],
        [255, 255, 0],
        [0, 255, 255],
        [255, 0, 255],
    ];

    fn scaled(c: [u8; 3], f: f64) -> [u8; 3] {
        c.map(|v| (v as f64 * f).round() as u8)
    }

    proptest! {
        #[test]
        fn colours_separate_beyond_brightness_jitter(
            i in 0usize..6,
            j in 0usize..6,
            f1 in 0.95f64..=1.0,
            f2 in 0.95f64..=1.0,
            size in 8u32..40,
        ) {
            prop_assume!(i != j);
            let a = baseline_embed(&uniform(size, scaled(SATURATED[i], f1)));
            let a2 = baseline_embed(&uniform(size, scaled(SATURATED[i], f2)));
            let b = baseline_embed(&uniform(size, scaled(SATURATED[j], f1)));
            prop_assert!(dist(&a, &b) > dist(&a, &a2));
        }
    }
}
