//! Bit-exact grayscale rasterization of symbolic panels.
//!
//! Geometry is computed in 24.8 fixed point from the integer slot grid and
//! precomputed polygon tables; filling is integer scanline with no
//! anti-aliasing. Polygons are sampled at pixel centers; circles use the
//! midpoint algorithm. Every filled region gets a one-pixel outline at 0.

use crate::puzzle::{Configuration, Entity, PanelSymbolic, PuzzleInstance, Slot, SLOT_UNITS};
use alloc::vec;
use alloc::vec::Vec;

pub const BACKGROUND: u8 = 255;
pub const OUTLINE: u8 = 0;
/// Raster edge lengths the renderer accepts.
pub const SUPPORTED_SIZES: [u32; 2] = [40, 80];

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("unsupported raster size {0} (expected 40 or 80)")]
    UnsupportedSize(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn blank(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    /// Number of non-background pixels.
    pub fn ink(&self) -> usize {
        self.data.iter().filter(|&&v| v != BACKGROUND).count()
    }
}

/// Fill intensity of a color level.
pub fn fill_intensity(color: u8) -> u8 {
    230 - 20 * color
}

/// Integer division rounding half away from zero.
fn div_round(num: i64, den: i64) -> i64 {
    debug_assert!(den != 0);
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Unit polygon vertices (vertex 0 up, clockwise on screen), scaled by 2^16.
const TRIANGLE: [(i64, i64); 3] = [(0, -65536), (56756, 32768), (-56756, 32768)];
const SQUARE: [(i64, i64); 4] = [(0, -65536), (65536, 0), (0, 65536), (-65536, 0)];
const PENTAGON: [(i64, i64); 5] = [
    (0, -65536),
    (62328, -20252),
    (38521, 53020),
    (-38521, 53020),
    (-62328, -20252),
];
const HEXAGON: [(i64, i64); 6] = [
    (0, -65536),
    (56756, -32768),
    (56756, 32768),
    (0, 65536),
    (-56756, 32768),
    (-56756, -32768),
];

struct Mask {
    size: i64,
    bits: Vec<bool>,
}

impl Mask {
    fn new(size: u32) -> Self {
        Self {
            size: size as i64,
            bits: vec![false; (size * size) as usize],
        }
    }

    fn hline(&mut self, y: i64, x0: i64, x1: i64) {
        if y < 0 || y >= self.size {
            return;
        }
        let (x0, x1) = (x0.max(0), x1.min(self.size - 1));
        for x in x0..=x1 {
            self.bits[(y * self.size + x) as usize] = true;
        }
    }

    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.size && y < self.size && self.bits[(y * self.size + x) as usize]
    }
}

/// Scanline fill of a convex polygon given in fixed-point pixels.
fn fill_polygon(mask: &mut Mask, vertices: &[(i64, i64)]) {
    let n = vertices.len();
    for py in 0..mask.size {
        let yc = py * 256 + 128;
        let mut xs: Vec<i64> = Vec::with_capacity(4);
        for i in 0..n {
            let (xa, ya) = vertices[i];
            let (xb, yb) = vertices[(i + 1) % n];
            if ya == yb {
                continue;
            }
            let crosses = (ya <= yc && yc < yb) || (yb <= yc && yc < ya);
            if crosses {
                xs.push(xa + div_round((yc - ya) * (xb - xa), yb - ya));
            }
        }
        xs.sort_unstable();
        for pair in xs.chunks_exact(2) {
            // Pixels whose centers fall inside [x0, x1].
            let first = (pair[0] - 128 + 255).div_euclid(256);
            let last = (pair[1] - 128).div_euclid(256);
            if first <= last {
                mask.hline(py, first, last);
            }
        }
    }
}

/// Filled midpoint circle around an integer pixel.
fn fill_circle(mask: &mut Mask, cx: i64, cy: i64, r: i64) {
    let (mut x, mut y, mut err) = (r, 0i64, 1 - r);
    while x >= y {
        mask.hline(cy + y, cx - x, cx + x);
        mask.hline(cy - y, cx - x, cx + x);
        mask.hline(cy + x, cx - y, cx + y);
        mask.hline(cy - x, cx - y, cx + y);
        y += 1;
        if err < 0 {
            err += 2 * y + 1;
        } else {
            x -= 1;
            err += 2 * (y - x) + 1;
        }
    }
}

fn to_fixed(units: u16, size: u32) -> i64 {
    div_round(units as i64 * size as i64 * 256, SLOT_UNITS as i64)
}

fn draw_entity(raster: &mut Raster, slot: &Slot, entity: &Entity) {
    let size = raster.width;
    let cx = to_fixed(slot.cx, size);
    let cy = to_fixed(slot.cy, size);
    // radius = (0.30 + 0.10·level) · half extent
    let r = div_round(
        (3 + entity.size as i64) * slot.half as i64 * size as i64 * 256,
        10 * SLOT_UNITS as i64,
    );
    let mut mask = Mask::new(size);
    let table: &[(i64, i64)] = match entity.shape {
        0 => &TRIANGLE,
        1 => &SQUARE,
        2 => &PENTAGON,
        3 => &HEXAGON,
        _ => &[],
    };
    if table.is_empty() {
        fill_circle(&mut mask, cx >> 8, cy >> 8, div_round(r, 256));
    } else {
        let vertices: Vec<(i64, i64)> = table
            .iter()
            .map(|&(ux, uy)| (cx + div_round(r * ux, 65536), cy + div_round(r * uy, 65536)))
            .collect();
        fill_polygon(&mut mask, &vertices);
    }
    if !mask.bits.iter().any(|&b| b) {
        mask.hline(cy >> 8, cx >> 8, cx >> 8);
    }
    let fill = fill_intensity(entity.color);
    let s = size as i64;
    for y in 0..s {
        for x in 0..s {
            if !mask.at(x, y) {
                continue;
            }
            let edge = !(mask.at(x - 1, y) && mask.at(x + 1, y) && mask.at(x, y - 1) && mask.at(x, y + 1));
            raster.data[(y * s + x) as usize] = if edge { OUTLINE } else { fill };
        }
    }
}

/// Renders one panel at `size`×`size`.
pub fn render_panel(
    panel: &PanelSymbolic,
    config: Configuration,
    size: u32,
) -> Result<Raster, RenderError> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(RenderError::UnsupportedSize(size));
    }
    let mut raster = Raster::blank(size, size);
    let layouts = config.components();
    for (c, comp) in panel.components.iter().enumerate() {
        let Some(slots) = layouts.get(c) else { break };
        for e in &comp.entities {
            if let Some(slot) = slots.get(e.slot as usize) {
                draw_entity(&mut raster, slot, e);
            }
        }
    }
    Ok(raster)
}

/// The 16 rasters of an instance: context panels then candidates.
pub fn render_instance(instance: &PuzzleInstance, size: u32) -> Result<Vec<Raster>, RenderError> {
    instance
        .panels()
        .map(|p| render_panel(p, instance.config, size))
        .collect()
}
