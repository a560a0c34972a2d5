//! Rendered disk scenes with exact ground truth, for tests and demos.

use crate::evaluation::GroundTruth;
use crate::imaging::{BinaryMask, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct Disk {
    pub cx: u32,
    pub cy: u32,
    pub radius: u32,
    pub color: [u8; 3],
    pub label: String,
}

impl Disk {
    pub fn new(cx: u32, cy: u32, radius: u32, color: [u8; 3], label: &str) -> Self {
        Self {
            cx,
            cy,
            radius,
            color,
            label: label.to_string(),
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        dx * dx + dy * dy <= (self.radius as i64) * (self.radius as i64)
    }
}

/// Hard-edged disks on a black canvas.
#[derive(Clone, Debug)]
pub struct Scene {
    width: u32,
    height: u32,
    disks: Vec<Disk>,
}

impl Scene {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            disks: Vec::new(),
        }
    }

    pub fn with_disk(mut self, disk: Disk) -> Self {
        self.disks.push(disk);
        self
    }

    pub fn disks(&self) -> &[Disk] {
        &self.disks
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn render(&self) -> Image {
        let mut img = Image::new(self.width, self.height).expect("scene has nonzero size");
        for d in &self.disks {
            let x0 = d.cx.saturating_sub(d.radius);
            let y0 = d.cy.saturating_sub(d.radius);
            let x1 = (d.cx + d.radius + 1).min(self.width);
            let y1 = (d.cy + d.radius + 1).min(self.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    if d.contains(x, y) {
                        img.put_pixel(x, y, d.color);
                    }
                }
            }
        }
        img
    }

    pub fn disk_mask(&self, i: usize) -> BinaryMask {
        let d = &self.disks[i];
        BinaryMask::from_fn(self.width, self.height, |x, y| d.contains(x, y))
    }

    /// One class per distinct label, one point per disk centre.
    pub fn ground_truth(&self) -> GroundTruth {
        let mut gt = GroundTruth::default();
        for d in &self.disks {
            gt.add_point(&d.label, [d.cx as f64, d.cy as f64]);
        }
        gt
    }
}

pub const RED: [u8; 3] = [230, 20, 20];
pub const BLUE: [u8; 3] = [20, 40, 230];
pub const GREEN: [u8; 3] = [30, 200, 40];

/// 12 red and 7 blue non-overlapping disks of varying radius on 320x240.
pub fn red_blue_scene() -> Scene {
    let mut scene = Scene::new(320, 240);
    let jitter = [(-3i32, 2i32), (2, -2), (0, 3), (-2, -3), (3, 0)];
    for i in 0..19u32 {
        let (col, row) = (i % 5, i / 5);
        let (jx, jy) = jitter[(i as usize * 3) % jitter.len()];
        let cx = (32 + 64 * col) as i32 + jx;
        let cy = (30 + 60 * row) as i32 + jy;
        let radius = 9 + (i * 5) % 7;
        let (color, label) = if i < 12 { (RED, "red") } else { (BLUE, "blue") };
        scene = scene.with_disk(Disk::new(cx as u32, cy as u32, radius, color, label));
    }
    scene
}

/// 40 radius-4 disks on 300x300, centred on the spacing-10 seed lattice and
/// clear of the 3x3 tile borders. Relative to the full image they are tiny
/// (long side 9/300); relative to a tile they are not (9/100).
pub fn tiny_disk_scene() -> Scene {
    let mut scene = Scene::new(300, 300);
    for i in 0..40u32 {
        let cell = (i * 7) % 100;
        let cx = 15 + 30 * (cell % 10);
        let cy = 15 + 30 * (cell / 10);
        scene = scene.with_disk(Disk::new(cx, cy, 4, GREEN, "green"));
    }
    scene
}

/// `n` (≤ 100) same-coloured radius-6 disks on a 10x10 lattice, 300x300.
pub fn lattice_scene(n: u32) -> Scene {
    assert!(n <= 100);
    let mut scene = Scene::new(300, 300);
    for i in 0..n {
        scene = scene.with_disk(Disk::new(15 + 30 * (i % 10), 15 + 30 * (i / 10), 6, RED, "red"));
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::connected_components;

    #[test]
    fn red_blue_disks_are_separate() {
        let scene = red_blue_scene();
        let img = scene.render();
        let fg = BinaryMask::from_fn(320, 240, |x, y| img.pixel(x, y) != [0, 0, 0]);
        assert_eq!(connected_components(&fg).len(), 19);
        let gt = scene.ground_truth();
        assert_eq!(gt.classes.len(), 2);
        assert_eq!(gt.total(), 19);
    }

    #[test]
    fn tiny_disks_avoid_tile_borders() {
        let scene = tiny_disk_scene();
        let img = scene.render();
        let fg = BinaryMask::from_fn(300, 300, |x, y| img.pixel(x, y) != [0, 0, 0]);
        assert_eq!(connected_components(&fg).len(), 40);
        for d in scene.disks() {
            for border in [100, 200] {
                assert!(d.cx + d.radius < border || d.cx >= border + d.radius);
                assert!(d.cy + d.radius < border || d.cy >= border + d.radius);
            }
            assert_eq!(d.cx % 10, 5);
        }
    }
}
