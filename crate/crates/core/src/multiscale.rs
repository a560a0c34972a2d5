//! 3x3 tiling refinement for images where the full-scale pass finds too few
//! candidates.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Image};
use crate::maskproc::{filter_candidates, passthrough, postprocess, CandidateInstance, FilterConfig};
use crate::prompting::{generate_seed_grid, segment, SegmentationProvider};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiscaleConfig {
    /// Refine when the base pass yields fewer candidates than this.
    pub min_candidates: usize,
    /// Refinement levels below the full image; 0 disables refinement.
    pub max_depth: u32,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            min_candidates: 10,
            max_depth: 1,
        }
    }
}

impl MultiscaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_candidates == 0 {
            return Err(Error::Config("min_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Settings of the single-scale candidate stage (grid, segment, filter).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateStage {
    pub spacing: u32,
    pub filter: FilterConfig,
    /// When false, raw masks pass through unfiltered.
    pub mask_processing: bool,
}

impl Default for CandidateStage {
    fn default() -> Self {
        Self {
            spacing: 10,
            filter: FilterConfig::default(),
            mask_processing: true,
        }
    }
}

/// Nine non-overlapping tiles, row-major. Tiles are `⌊W/3⌋ x ⌊H/3⌋`; the
/// last row and column absorb the remainder. `None` when the image is too
/// small to split.
pub fn tile_grid(width: u32, height: u32) -> Option<[BBox; 9]> {
    let (tw, th) = (width / 3, height / 3);
    if tw == 0 || th == 0 {
        return None;
    }
    let xs = [0, tw, 2 * tw, width];
    let ys = [0, th, 2 * th, height];
    Some(std::array::from_fn(|i| {
        let (r, c) = (i / 3, i % 3);
        BBox {
            x0: xs[c],
            y0: ys[r],
            x1: xs[c + 1],
            y1: ys[r + 1],
        }
    }))
}

/// Grid, segment and (optionally) filter one image at a single scale.
pub fn base_candidates<P: SegmentationProvider + ?Sized>(
    img: &Image,
    provider: &P,
    stage: &CandidateStage,
    image_key: &str,
) -> Result<Vec<CandidateInstance>> {
    let points = generate_seed_grid(img.width(), img.height(), stage.spacing)?;
    let raw = segment(provider, img, &points, image_key)?;
    if stage.mask_processing {
        postprocess(&raw, &stage.filter)
    } else {
        Ok(passthrough(&raw))
    }
}

/// Candidate masks for `img`, refined over a 3x3 tiling when the base pass
/// finds fewer than `min_candidates`.
///
/// Tile candidates are translated back to image coordinates and merged with
/// the base set; dedup and size filters then run again over the union. When
/// the merge adds nothing the base set is returned unchanged, as it is when
/// any tile fails.
pub fn refine_multiscale<P: SegmentationProvider + ?Sized>(
    img: &Image,
    provider: &P,
    stage: &CandidateStage,
    cfg: &MultiscaleConfig,
    image_key: &str,
) -> Result<Vec<CandidateInstance>> {
    refine_at_depth(img, provider, stage, cfg, image_key, 0)
}

fn refine_at_depth<P: SegmentationProvider + ?Sized>(
    img: &Image,
    provider: &P,
    stage: &CandidateStage,
    cfg: &MultiscaleConfig,
    image_key: &str,
    depth: u32,
) -> Result<Vec<CandidateInstance>> {
    let base = base_candidates(img, provider, stage, image_key)?;
    if base.len() >= cfg.min_candidates || depth >= cfg.max_depth {
        return Ok(base);
    }
    let Some(tiles) = tile_grid(img.width(), img.height()) else {
        return Ok(base);
    };

    let run_tile = |(t, bbox): (usize, &BBox)| -> Result<Vec<CandidateInstance>> {
        let sub = img.crop(*bbox)?;
        let key = format!("{image_key}#{t}");
        let local = refine_at_depth(&sub, provider, stage, cfg, &key, depth + 1)?;
        local
            .into_iter()
            .map(|mut c| {
                c.mask = c
                    .mask
                    .translate_into(img.width(), img.height(), bbox.x0, bbox.y0)?;
                c.bbox = c.bbox.translate(bbox.x0, bbox.y0);
                c.source.tiles.insert(0, t as u8);
                Ok(c)
            })
            .collect()
    };
    let results: Vec<Result<Vec<CandidateInstance>>> = if provider.caps().serialized {
        tiles.iter().enumerate().map(run_tile).collect()
    } else {
        tiles.par_iter().enumerate().map(run_tile).collect()
    };

    let mut pool = base.clone();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(cands) => pool.extend(cands),
            Err(e) => {
                warn!("{image_key}: tile {t} failed ({e}); keeping the full-scale candidates");
                return Ok(base);
            }
        }
    }
    let merged = if stage.mask_processing {
        filter_candidates(pool, &stage.filter)?
    } else {
        pool.into_iter()
            .enumerate()
            .map(|(id, c)| CandidateInstance { id, ..c })
            .collect()
    };
    if merged.len() <= base.len() {
        return Ok(base);
    }
    Ok(merged)
}
