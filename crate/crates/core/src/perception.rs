//! Visual differences between consecutive screenshots.
//!
//! [`diff_regions`] works on a coarse block grid so that compression and
//! antialiasing noise does not register as change; [`changed_fraction`] is a
//! per-pixel measure used to decide whether two screens are "the same".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Rgb, Screenshot};

/// Per-pixel channel difference at or below this is treated as noise.
pub const PIXEL_NOISE_FLOOR: u8 = 4;

pub const OUTLINE_WIDTH: u32 = 3;
pub const OUTLINE_COLOR: Rgb = Rgb::new(255, 0, 0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerceptionError {
    #[error("screenshots differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("box {0:?} lies outside a {1}x{2} image")]
    OutOfBounds(BoundingBox, u32, u32),
    #[error("invalid diff parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffParams {
    pub block_size: u32,
    /// Mean absolute channel difference over a block above which it counts as changed.
    pub per_block_threshold: f64,
}

impl Default for DiffParams {
    fn default() -> Self {
        Self { block_size: 16, per_block_threshold: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width >= 1 && self.height >= 1 && self.right() <= width && self.bottom() <= height
    }
}

fn check_dims(a: &Screenshot, b: &Screenshot) -> Result<(), PerceptionError> {
    if a.same_dimensions(b) {
        Ok(())
    } else {
        Err(PerceptionError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()))
    }
}

/// Boxes around changed regions, sorted by `(y, x)`.
pub fn diff_regions(
    before: &Screenshot,
    after: &Screenshot,
    params: &DiffParams,
) -> Result<Vec<BoundingBox>, PerceptionError> {
    check_dims(before, after)?;
    if params.block_size == 0 {
        return Err(PerceptionError::InvalidParams("block_size must be >= 1"));
    }
    if !(params.per_block_threshold >= 0.0) {
        return Err(PerceptionError::InvalidParams("per_block_threshold must be >= 0"));
    }

    let (w, h, bs) = (before.width() as usize, before.height() as usize, params.block_size as usize);
    let cols = w.div_ceil(bs);
    let rows = h.div_ceil(bs);

    // Sum of absolute channel differences per block.
    let mut sums = vec![0u64; cols * rows];
    let (pa, pb) = (before.pixels(), after.pixels());
    for y in 0..h {
        let row_base = y * w * 3;
        let block_row = (y / bs) * cols;
        for x in 0..w {
            let i = row_base + x * 3;
            let d = pa[i].abs_diff(pb[i]) as u64
                + pa[i + 1].abs_diff(pb[i + 1]) as u64
                + pa[i + 2].abs_diff(pb[i + 2]) as u64;
            sums[block_row + x / bs] += d;
        }
    }

    let mut marked = vec![false; cols * rows];
    for r in 0..rows {
        let bh = bs.min(h - r * bs);
        for c in 0..cols {
            let bw = bs.min(w - c * bs);
            let mean = sums[r * cols + c] as f64 / (bw * bh * 3) as f64;
            marked[r * cols + c] = mean > params.per_block_threshold;
        }
    }

    let mut boxes = Vec::new();
    let mut seen = vec![false; cols * rows];
    let mut stack = Vec::new();
    for start in 0..marked.len() {
        if !marked[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(cell) = stack.pop() {
            let (r, c) = (cell / cols, cell % cols);
            c0 = c0.min(c);
            r0 = r0.min(r);
            c1 = c1.max(c);
            r1 = r1.max(r);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let n = nr as usize * cols + nc as usize;
                    if marked[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        let x = c0 * bs;
        let y = r0 * bs;
        let right = ((c1 + 1) * bs).min(w);
        let bottom = ((r1 + 1) * bs).min(h);
        boxes.push(BoundingBox::new(x as u32, y as u32, (right - x) as u32, (bottom - y) as u32));
    }
    boxes.sort_by_key(|b| (b.y, b.x));
    Ok(boxes)
}

/// Pixels painted by the outline of `b`: a band [`OUTLINE_WIDTH`] pixels wide
/// just outside the box, clipped to the image.
pub fn outline_contains(b: &BoundingBox, x: u32, y: u32) -> bool {
    let (x, y) = (x as i64, y as i64);
    let ow = OUTLINE_WIDTH as i64;
    let (l, t, r, btm) = (b.x as i64, b.y as i64, b.right() as i64, b.bottom() as i64);
    let in_outer = x >= l - ow && x < r + ow && y >= t - ow && y < btm + ow;
    let in_inner = x >= l && x < r && y >= t && y < btm;
    in_outer && !in_inner
}

/// Copy of `image` with each box outlined in red.
pub fn annotate(image: &Screenshot, boxes: &[BoundingBox]) -> Result<Screenshot, PerceptionError> {
    let (w, h) = (image.width(), image.height());
    if let Some(b) = boxes.iter().find(|b| !b.fits_within(w, h)) {
        return Err(PerceptionError::OutOfBounds(*b, w, h));
    }
    if boxes.is_empty() {
        return Ok(image.clone());
    }
    let mut px = image.pixels().to_vec();
    for b in boxes {
        let x0 = b.x.saturating_sub(OUTLINE_WIDTH);
        let y0 = b.y.saturating_sub(OUTLINE_WIDTH);
        let x1 = (b.right() + OUTLINE_WIDTH).min(w);
        let y1 = (b.bottom() + OUTLINE_WIDTH).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if outline_contains(b, x, y) {
                    let i = (y as usize * w as usize + x as usize) * 3;
                    px[i..i + 3].copy_from_slice(&OUTLINE_COLOR.0);
                }
            }
        }
    }
    let out = Screenshot::from_raw(w, h, px).expect("same dimensions as the input");
    Ok(out.with_meta(image.captured_at, image.step_index))
}

/// Fraction of pixels whose largest channel difference exceeds [`PIXEL_NOISE_FLOOR`].
pub fn changed_fraction(a: &Screenshot, b: &Screenshot) -> Result<f64, PerceptionError> {
    check_dims(a, b)?;
    let changed = a
        .pixels()
        .chunks_exact(3)
        .zip(b.pixels().chunks_exact(3))
        .filter(|(p, q)| {
            p[0].abs_diff(q[0]).max(p[1].abs_diff(q[1])).max(p[2].abs_diff(q[2])) > PIXEL_NOISE_FLOOR
        })
        .count();
    let total = a.width() as usize * a.height() as usize;
    Ok(changed as f64 / total as f64)
}
