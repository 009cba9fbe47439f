//! Rasterizer for simulated screens using the embedded 8x8 bitmap font.

use font8x8::UnicodeFonts;

use crate::domain::{Rgb, Screenshot};
use crate::perception::BoundingBox;

use super::world::ElementKind;

pub const HEADER_HEIGHT: u32 = 48;
const TEXT: Rgb = Rgb::new(0x20, 0x20, 0x20);
const HEADER_TEXT: Rgb = Rgb::new(0xff, 0xff, 0xff);
const FOCUS: Rgb = Rgb::new(0x1a, 0x73, 0xe8);

pub struct Canvas {
    width: u32,
    height: u32,
    px: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: Rgb) -> Self {
        Self { width, height, px: background.0.repeat(width as usize * height as usize) }
    }

    fn put(&mut self, x: u32, y: u32, c: Rgb) {
        if x < self.width && y < self.height {
            let i = (y as usize * self.width as usize + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c.0);
        }
    }

    pub fn fill(&mut self, r: BoundingBox, c: Rgb) {
        for y in r.y..r.bottom().min(self.height) {
            for x in r.x..r.right().min(self.width) {
                self.put(x, y, c);
            }
        }
    }

    pub fn stroke(&mut self, r: BoundingBox, c: Rgb) {
        let (right, bottom) = (r.right() - 1, r.bottom() - 1);
        for x in r.x..=right {
            self.put(x, r.y, c);
            self.put(x, bottom, c);
        }
        for y in r.y..=bottom {
            self.put(r.x, y, c);
            self.put(right, y, c);
        }
    }

    /// Draws `text` left-aligned and vertically centered in `r`, clipped to it.
    pub fn text(&mut self, r: BoundingBox, text: &str, c: Rgb) {
        let scale = if r.height >= 20 { 2 } else { 1 };
        let glyph = 8 * scale;
        let y0 = r.y + r.height.saturating_sub(glyph) / 2;
        let mut x0 = r.x + 6;
        for ch in text.chars() {
            if x0 + glyph > r.right() {
                break;
            }
            let rows = font8x8::BASIC_FONTS.get(ch).or_else(|| font8x8::BASIC_FONTS.get('?'));
            if let Some(rows) = rows {
                for (dy, bits) in rows.iter().enumerate() {
                    for dx in 0..8u32 {
                        if bits & (1 << dx) == 0 {
                            continue;
                        }
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let (x, y) = (x0 + dx * scale + sx, y0 + dy as u32 * scale + sy);
                                if y < r.bottom() {
                                    self.put(x, y, c);
                                }
                            }
                        }
                    }
                }
            }
            x0 += glyph;
        }
    }

    pub fn finish(self) -> Screenshot {
        Screenshot::from_raw(self.width, self.height, self.px).expect("canvas size matches")
    }
}

pub fn header(canvas: &mut Canvas, width: u32, title: &str, color: Rgb) {
    let bar = BoundingBox::new(0, 0, width, HEADER_HEIGHT);
    canvas.fill(bar, color);
    canvas.text(bar, title, HEADER_TEXT);
}

pub fn element(canvas: &mut Canvas, rect: BoundingBox, kind: ElementKind, label: &str, background: Rgb, focused: bool) {
    let (fill, border) = match kind {
        ElementKind::Button => (Rgb::new(0xdf, 0xe6, 0xf0), Rgb::new(0x5a, 0x6b, 0x80)),
        ElementKind::TextField => (Rgb::new(0xff, 0xff, 0xff), Rgb::new(0x88, 0x88, 0x88)),
        ElementKind::ListItem => (Rgb::new(0xf4, 0xf4, 0xf4), Rgb::new(0xcc, 0xcc, 0xcc)),
        ElementKind::Toggle => (Rgb::new(0xe6, 0xf2, 0xe6), Rgb::new(0x6a, 0x8f, 0x6a)),
        ElementKind::Static => (background, Rgb::new(0xe0, 0xe0, 0xe0)),
    };
    canvas.fill(rect, fill);
    canvas.stroke(rect, if focused { FOCUS } else { border });
    canvas.text(rect, label, TEXT);
}
