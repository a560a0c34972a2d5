//! Raster and binary-mask primitives: RGB images, bit masks, IoU, connected
//! components, the crop-and-pad geometry used for embedding, and the
//! column-major RLE interchange codec.

use std::collections::VecDeque;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Connectivity used by [`connected_components`]: 8-neighbourhood.
pub const CONNECTIVITY: usize = 8;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    /// All-black image.
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        })
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::Geometry(format!(
                "pixel buffer has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the region covered by `bbox`.
    pub fn crop(&self, bbox: BBox) -> Result<Image> {
        bbox.check_within(self.width, self.height)?;
        let mut out = Image::new(bbox.width(), bbox.height())?;
        let row = bbox.width() as usize * 3;
        for y in bbox.y0..bbox.y1 {
            let src = (y as usize * self.width as usize + bbox.x0 as usize) * 3;
            let dst = (y - bbox.y0) as usize * row;
            out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
        }
        Ok(out)
    }

    /// Paste `other` with its top-left corner at `(x, y)`. Pixels falling
    /// outside `self` are dropped.
    pub fn paste(&mut self, other: &Image, x: u32, y: u32) {
        let w = other.width.min(self.width.saturating_sub(x)) as usize;
        for oy in 0..other.height {
            let ty = y + oy;
            if ty >= self.height {
                break;
            }
            let src = oy as usize * other.width as usize * 3;
            let dst = (ty as usize * self.width as usize + x as usize) * 3;
            self.data[dst..dst + w * 3].copy_from_slice(&other.data[src..src + w * 3]);
        }
    }

    pub fn is_black(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn from_rgb_image(img: image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Image::from_raw(w, h, img.into_raw())
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length is an invariant of Image")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = image::ImageReader::open(path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| Error::io(path, e))?;
        let img = reader.decode().map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Data(format!("cannot decode {}: {other}", path.display())),
        })?;
        Image::from_rgb_image(img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.to_rgb_image()
            .write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)?;
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Image::from_rgb_image(img.to_rgb8())
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Geometry(format!(
                "degenerate box [{x0},{x1})x[{y0},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn translate(&self, dx: u32, dy: u32) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Geometry(format!("degenerate box {self:?}")));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::Geometry(format!(
                "box {self:?} exceeds {width}x{height} image"
            )));
        }
        Ok(())
    }
}

/// Pixel set over a `width x height` grid with cached area and tight box.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    area: u64,
    bbox: Option<BBox>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area)
            .field("bbox", &self.bbox)
            .finish()
    }
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            area: 0,
            bbox: None,
        }
    }

    /// Row-major bit buffer.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Geometry(format!(
                "mask buffer has {} bits, expected {}",
                bits.len(),
                width as usize * height as usize
            )));
        }
        let mut m = Self {
            width,
            height,
            bits,
            area: 0,
            bbox: None,
        };
        m.refresh();
        Ok(m)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        let mut m = Self {
            width,
            height,
            bits,
            area: 0,
            bbox: None,
        };
        m.refresh();
        m
    }

    pub fn from_pixels(
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut bits = vec![false; width as usize * height as usize];
        for (x, y) in pixels {
            if x >= width || y >= height {
                return Err(Error::Geometry(format!(
                    "pixel ({x},{y}) outside {width}x{height} mask"
                )));
            }
            bits[y as usize * width as usize + x as usize] = true;
        }
        Self::from_bits(width, height, bits)
    }

    fn refresh(&mut self) {
        let w = self.width as usize;
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut area = 0u64;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let x = (i % w) as u32;
            let y = (i / w) as u32;
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        self.area = area;
        self.bbox = (area > 0).then_some(BBox { x0, y0, x1, y1 });
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    /// Tight bounding box; `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let bbox = self.bbox.unwrap_or(BBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        });
        (bbox.y0..bbox.y1).flat_map(move |y| {
            (bbox.x0..bbox.x1)
                .filter(move |&x| self.get(x, y))
                .map(move |x| (x, y))
        })
    }

    /// Re-embed this mask into a `width x height` canvas with its origin at
    /// `(dx, dy)`.
    pub fn translate_into(&self, width: u32, height: u32, dx: u32, dy: u32) -> Result<Self> {
        if dx + self.width > width || dy + self.height > height {
            return Err(Error::Geometry(format!(
                "{}x{} mask at ({dx},{dy}) does not fit in {width}x{height}",
                self.width, self.height
            )));
        }
        let mut bits = vec![false; width as usize * height as usize];
        for (x, y) in self.pixels() {
            bits[(y + dy) as usize * width as usize + (x + dx) as usize] = true;
        }
        Ok(Self {
            width,
            height,
            bits,
            area: self.area,
            bbox: self.bbox.map(|b| b.translate(dx, dy)),
        })
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    /// Number of pixels set in both masks.
    pub fn intersection(&self, other: &BinaryMask) -> Result<u64> {
        self.check_same_dims(other)?;
        let (Some(a), Some(b)) = (self.bbox, other.bbox) else {
            return Ok(0);
        };
        let Some(r) = a.intersect(&b) else {
            return Ok(0);
        };
        let w = self.width as usize;
        let mut n = 0u64;
        for y in r.y0..r.y1 {
            let row = y as usize * w;
            let (lo, hi) = (row + r.x0 as usize, row + r.x1 as usize);
            n += self.bits[lo..hi]
                .iter()
                .zip(&other.bits[lo..hi])
                .filter(|(a, b)| **a && **b)
                .count() as u64;
        }
        Ok(n)
    }
}

/// Intersection over union of two equally sized masks; 0 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Maximal 8-connected components, largest first. Equal areas are ordered by
/// the component's first pixel in row-major order.
pub fn connected_components(m: &BinaryMask) -> Vec<BinaryMask> {
    let Some(bbox) = m.bbox() else {
        return Vec::new();
    };
    let (w, h) = (m.width() as i64, m.height() as i64);
    let mut seen = vec![false; m.bits.len()];
    let mut comps: Vec<(u64, usize, Vec<bool>, BBox)> = Vec::new();
    let mut queue = VecDeque::new();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let start = y as usize * w as usize + x as usize;
            if !m.bits[start] || seen[start] {
                continue;
            }
            let mut bits = vec![false; m.bits.len()];
            let mut area = 0u64;
            let mut cb = BBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            };
            seen[start] = true;
            queue.push_back((x as i64, y as i64));
            while let Some((cx, cy)) = queue.pop_front() {
                let idx = cy as usize * w as usize + cx as usize;
                bits[idx] = true;
                area += 1;
                cb.x0 = cb.x0.min(cx as u32);
                cb.y0 = cb.y0.min(cy as u32);
                cb.x1 = cb.x1.max(cx as u32 + 1);
                cb.y1 = cb.y1.max(cy as u32 + 1);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let n = ny as usize * w as usize + nx as usize;
                        if m.bits[n] && !seen[n] {
                            seen[n] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            comps.push((area, start, bits, cb));
        }
    }
    comps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    comps
        .into_iter()
        .map(|(area, _, bits, bbox)| BinaryMask {
            width: m.width,
            height: m.height,
            bits,
            area,
            bbox: Some(bbox),
        })
        .collect()
}

#[inline]
fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor().max(0.0) as u32
}

/// Scale the `bbox` region of `img` so that its long side equals `target`
/// (bilinear), place it at the top-left of a black `target x target` canvas.
pub fn crop_and_pad(img: &Image, bbox: BBox, target: u32) -> Result<Image> {
    if target == 0 {
        return Err(Error::Geometry("crop target must be at least 1".into()));
    }
    bbox.check_within(img.width(), img.height())?;
    let (bw, bh) = (bbox.width(), bbox.height());
    let scale = target as f64 / bw.max(bh) as f64;
    let ow = round_half_up(bw as f64 * scale).clamp(1, target);
    let oh = round_half_up(bh as f64 * scale).clamp(1, target);
    let mut out = Image::new(target, target)?;

    // Per-axis ratios map the rounded content rectangle exactly onto the box.
    let sx = bw as f64 / ow as f64;
    let sy = bh as f64 / oh as f64;
    let max_x = (bw - 1) as f64;
    let max_y = (bh - 1) as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(bh - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(bw - 1);
            let tx = fx - x0 as f64;
            let p00 = img.pixel(bbox.x0 + x0, bbox.y0 + y0);
            let p10 = img.pixel(bbox.x0 + x1, bbox.y0 + y0);
            let p01 = img.pixel(bbox.x0 + x0, bbox.y0 + y1);
            let p11 = img.pixel(bbox.x0 + x1, bbox.y0 + y1);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
                let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, px);
        }
    }
    Ok(out)
}

/// Column-major, background-first run-length encoding of a mask.
/// Serialized as `{"size":[H,W],"counts":[...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    pub fn encode(m: &BinaryMask) -> Self {
        let (w, h) = m.dims();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = m.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        RleMask {
            size: [h, w],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let (h, w) = (self.height(), self.width());
        let total = h as u64 * w as u64;
        let sum: u64 = self.counts.iter().sum();
        if sum != total {
            return Err(Error::MalformedRle {
                expected: total,
                found: sum,
            });
        }
        let mut bits = vec![false; total as usize];
        let mut pos = 0u64;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for k in pos..pos + run {
                    let x = k / h as u64;
                    let y = k % h as u64;
                    bits[y as usize * w as usize + x as usize] = true;
                }
            }
            pos += run;
        }
        BinaryMask::from_bits(w, h, bits)
    }
}
