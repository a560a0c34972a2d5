//! Rule-based cleanup of raw provider masks into candidate object masks.
//!
//! Order of operations: keep the major connected component of every raw
//! mask, drop duplicates (IoU above threshold), then drop masks that are too
//! large for the image or have a side thinner than `min_bbox_side`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{connected_components, iou, BBox, BinaryMask};
use crate::prompting::{RawMask, RawMaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub iou_dup_threshold: f64,
    pub max_area_frac: f64,
    pub min_bbox_side: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            iou_dup_threshold: 0.1,
            max_area_frac: 0.5,
            min_bbox_side: 2,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_dup_threshold > 0.0 && self.iou_dup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_dup_threshold must be in (0, 1], got {}",
                self.iou_dup_threshold
            )));
        }
        if !(self.max_area_frac > 0.0 && self.max_area_frac <= 1.0) {
            return Err(Error::Config(format!(
                "max_area_frac must be in (0, 1], got {}",
                self.max_area_frac
            )));
        }
        Ok(())
    }
}

/// Where a candidate came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub point_index: usize,
    pub slot: usize,
    /// Tile indices (0..9, row-major) from the outermost refinement level
    /// inwards; empty for the full image.
    pub tiles: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct CandidateInstance {
    pub id: usize,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub score: f32,
    pub source: Provenance,
}

impl CandidateInstance {
    fn new(id: usize, mask: BinaryMask, score: f32, source: Provenance) -> Option<Self> {
        let bbox = mask.bbox()?;
        Some(Self {
            id,
            mask,
            bbox,
            score,
            source,
        })
    }
}

/// Largest 8-connected component of `m` (the whole mask when connected).
pub fn split_major_component(m: &BinaryMask) -> BinaryMask {
    connected_components(m)
        .into_iter()
        .next()
        .unwrap_or_else(|| m.clone())
}

/// Greedy duplicate removal.
///
/// Masks are visited by descending score (stable on ties); a mask whose IoU
/// with any already retained mask exceeds `threshold` is dropped. Returns the
/// indices of retained masks in retention order.
pub fn dedup_masks(masks: &[(&BinaryMask, f32)], threshold: f64) -> Result<Vec<usize>> {
    if let Some((first, _)) = masks.first() {
        if let Some((other, _)) = masks.iter().find(|(m, _)| m.dims() != first.dims()) {
            return Err(Error::DimensionMismatch {
                expected: first.dims(),
                found: other.dims(),
            });
        }
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .1
            .partial_cmp(&masks[a].1)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    'next: for i in order {
        let m = masks[i].0;
        for &k in &kept {
            if iou(m, masks[k].0)? > threshold {
                continue 'next;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

fn passes_size_filters(m: &BinaryMask, cfg: &FilterConfig) -> bool {
    let Some(bbox) = m.bbox() else {
        return false;
    };
    let image_area = m.width() as f64 * m.height() as f64;
    m.area() as f64 <= cfg.max_area_frac * image_area
        && bbox.width() >= cfg.min_bbox_side
        && bbox.height() >= cfg.min_bbox_side
}

/// Dedup + size filters over candidates that already went through component
/// extraction; ids are reassigned in retention order.
pub fn filter_candidates(
    cands: Vec<CandidateInstance>,
    cfg: &FilterConfig,
) -> Result<Vec<CandidateInstance>> {
    let pairs: Vec<(&BinaryMask, f32)> = cands.iter().map(|c| (&c.mask, c.score)).collect();
    let kept = dedup_masks(&pairs, cfg.iou_dup_threshold)?;
    let mut slots: Vec<Option<CandidateInstance>> = cands.into_iter().map(Some).collect();
    Ok(kept
        .into_iter()
        .filter_map(|i| slots[i].take())
        .filter(|c| passes_size_filters(&c.mask, cfg))
        .enumerate()
        .map(|(id, c)| CandidateInstance { id, ..c })
        .collect())
}

fn raw_to_candidate(id: usize, raw: &RawMask, mask: BinaryMask) -> Option<CandidateInstance> {
    CandidateInstance::new(
        id,
        mask,
        raw.score,
        Provenance {
            point_index: raw.point_index,
            slot: raw.slot,
            tiles: Vec::new(),
        },
    )
}

/// Full mask processing: major component, dedup, size filters.
pub fn postprocess(raw: &RawMaskSet, cfg: &FilterConfig) -> Result<Vec<CandidateInstance>> {
    let majors: Vec<CandidateInstance> = raw
        .masks
        .iter()
        .filter_map(|r| raw_to_candidate(0, r, split_major_component(&r.mask)))
        .collect();
    filter_candidates(majors, cfg)
}

/// Mask processing disabled: every nonempty raw mask becomes a candidate.
pub fn passthrough(raw: &RawMaskSet) -> Vec<CandidateInstance> {
    raw.masks
        .iter()
        .filter_map(|r| raw_to_candidate(0, r, r.mask.clone()))
        .enumerate()
        .map(|(id, c)| CandidateInstance { id, ..c })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{Disk, Scene};
    use proptest::prelude::*;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn raw_set(masks: Vec<BinaryMask>) -> RawMaskSet {
        RawMaskSet {
            point_count: masks.len(),
            masks: masks
                .into_iter()
                .enumerate()
                .map(|(i, mask)| RawMask {
                    point_index: i,
                    slot: 0,
                    mask,
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn major_component_examples() {
        let single = rect(10, 10, 2, 2, 6, 6);
        assert_eq!(split_major_component(&single), single);

        // areas 30, 5, 2
        let m = BinaryMask::from_fn(20, 20, |x, y| {
            (x < 6 && y < 5) || (x == 10 && (10..15).contains(&y)) || (x == 18 && y < 2)
        });
        let major = split_major_component(&m);
        assert_eq!(major.area(), 30);
        assert!(major.get(0, 0));

        // equal areas: smaller (min y, min x) wins
        let tie = BinaryMask::from_fn(20, 20, |x, y| {
            ((10..13).contains(&x) && y < 2) || (x < 3 && (5..7).contains(&y))
        });
        let major = split_major_component(&tie);
        assert!(major.get(10, 0));
        assert!(!major.get(0, 5));
    }

    #[test]
    fn dedup_identical_pair() {
        let a = rect(10, 10, 0, 0, 4, 4);
        assert_eq!(dedup_masks(&[(&a, 1.0), (&a, 1.0)], 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn dedup_keeps_low_overlap_pair() {
        // 10x10 squares sharing a 10x1 strip: IoU = 10/190 ≈ 0.053
        let a = rect(40, 40, 0, 0, 10, 10);
        let b = rect(40, 40, 0, 9, 10, 19);
        let v = iou(&a, &b).unwrap();
        assert!((v - 10.0 / 190.0).abs() < 1e-12);
        assert_eq!(dedup_masks(&[(&a, 1.0), (&b, 1.0)], 0.1).unwrap(), vec![0, 1]);
    }

    /// A, B overlap by 0.15, B, C by 0.15, A and C disjoint.
    fn chain() -> (BinaryMask, BinaryMask, BinaryMask) {
        // 20x10 rectangles overlapping by 5 columns: IoU = 50/350
        let a = rect(60, 10, 0, 0, 20, 10);
        let b = rect(60, 10, 15, 0, 35, 10);
        let c = rect(60, 10, 30, 0, 50, 10);
        (a, b, c)
    }

    #[test]
    fn dedup_chain_is_greedy() {
        let (a, b, c) = chain();
        assert!(iou(&a, &b).unwrap() > 0.1);
        assert!(iou(&b, &c).unwrap() > 0.1);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert_eq!(
            dedup_masks(&[(&a, 1.0), (&b, 1.0), (&c, 1.0)], 0.1).unwrap(),
            vec![0, 2]
        );
    }

    #[test]
    fn dedup_orders_by_score() {
        let (a, b, c) = chain();
        // B scored highest: it is kept first and suppresses both neighbours
        assert_eq!(
            dedup_masks(&[(&a, 0.5), (&b, 0.9), (&c, 0.5)], 0.1).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn dedup_rejects_mismatched_dims() {
        let a = BinaryMask::empty(4, 4);
        let b = BinaryMask::empty(4, 5);
        assert!(dedup_masks(&[(&a, 1.0), (&b, 1.0)], 0.1).is_err());
    }

    /// Raising the threshold removes the weakest overlaps first, but greedy
    /// selection is not monotone in general: here B survives at 0.2 and then
    /// suppresses C and D, which survived at 0.1 once B was gone.
    #[test]
    fn dedup_count_is_not_monotone_in_threshold() {
        let w = 60;
        let a = rect(w, 20, 0, 0, 15, 20); // overlaps B by 5/40
        let b = rect(w, 20, 10, 0, 40, 20);
        let c = rect(w, 20, 16, 0, 26, 20); // inside B
        let d = rect(w, 20, 28, 0, 40, 20); // inside B
        let ab = iou(&a, &b).unwrap();
        assert!(ab > 0.1 && ab < 0.2, "{ab}");
        assert!(iou(&b, &c).unwrap() > 0.2);
        assert!(iou(&b, &d).unwrap() > 0.2);
        let set = [(&a, 1.0), (&b, 1.0), (&c, 1.0), (&d, 1.0)];
        assert_eq!(dedup_masks(&set, 0.1).unwrap(), vec![0, 2, 3]);
        assert_eq!(dedup_masks(&set, 0.2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn repeated_disk_is_one_candidate() {
        let scene = Scene::new(50, 50).with_disk(Disk::new(25, 25, 8, [200, 0, 0], "d"));
        let raw = raw_set(vec![scene.disk_mask(0); 5]);
        let out = postprocess(&raw, &FilterConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 0);
        assert_eq!(out[0].mask, scene.disk_mask(0));
    }

    #[test]
    fn full_image_and_slivers_dropped() {
        let full = BinaryMask::from_fn(30, 30, |_, _| true);
        let line = rect(30, 30, 5, 2, 6, 20);
        let flat = rect(30, 30, 10, 25, 20, 26);
        let ok = rect(30, 30, 10, 10, 12, 12);
        let out = postprocess(&raw_set(vec![full, line, flat, ok.clone()]), &FilterConfig::default())
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask, ok);
    }

    #[test]
    fn fragments_enter_the_dedup_pool() {
        // raw 0: two blobs, the larger one equals raw 1
        let big = rect(40, 40, 0, 0, 10, 10);
        let both = BinaryMask::from_fn(40, 40, |x, y| {
            (x < 10 && y < 10) || ((30..33).contains(&x) && (30..33).contains(&y))
        });
        let out = postprocess(&raw_set(vec![both, big.clone()]), &FilterConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask, big);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = FilterConfig {
            iou_dup_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FilterConfig {
            max_area_frac: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    fn arb_rect_masks() -> impl Strategy<Value = Vec<BinaryMask>> {
        proptest::collection::vec((0u32..24, 0u32..24, 1u32..12, 1u32..12), 1..25).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| rect(24, 24, x, y, (x + w).min(24), (y + h).min(24)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn postprocess_invariants(masks in arb_rect_masks(), thr in 0.05f64..0.9) {
            let cfg = FilterConfig { iou_dup_threshold: thr, ..Default::default() };
            let raw = raw_set(masks);
            let out = postprocess(&raw, &cfg).unwrap();
            for (i, a) in out.iter().enumerate() {
                prop_assert_eq!(a.id, i);
                prop_assert_eq!(connected_components(&a.mask).len(), 1);
                prop_assert!(a.bbox.width() >= 2 && a.bbox.height() >= 2);
                prop_assert!(a.mask.area() as f64 <= cfg.max_area_frac * 24.0 * 24.0);
                for b in &out[i + 1..] {
                    prop_assert!(iou(&a.mask, &b.mask).unwrap() <= thr);
                }
            }
            let again = postprocess(&raw, &cfg).unwrap();
            prop_assert_eq!(out.len(), again.len());
            for (a, b) in out.iter().zip(&again) {
                prop_assert_eq!(&a.mask, &b.mask);
            }
        }

        #[test]
        fn dedup_keeps_everything_above_max_iou(masks in arb_rect_masks()) {
            let pairs: Vec<(&BinaryMask, f32)> = masks.iter().map(|m| (m, 1.0)).collect();
            prop_assert_eq!(dedup_masks(&pairs, 1.0).unwrap().len(), masks.len());
        }
    }
}
