//! Synthetic figures: labelled boxes joined by arrows on a white canvas.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, CorpusManifest, Split};
use crate::{Error, Result};

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

// 5x7 bitmaps, bit 4 is the leftmost column.
const FONT: [(char, [u8; 7]); 37] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    ('-', [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000]),
];

fn glyph(c: char) -> Option<&'static [u8; 7]> {
    FONT.iter().find(|(g, _)| *g == c.to_ascii_uppercase()).map(|(_, b)| b)
}

/// Characters the built-in font can draw.
pub fn font_charset() -> String {
    FONT.iter().map(|(c, _)| *c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFigureSpec {
    pub width: u32,
    pub height: u32,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub max_arrows: usize,
    /// Label strings are drawn from this list.
    pub glyph_strings: Vec<String>,
    /// Integer glyph scale range, inclusive (1 = 5x7 pixels).
    pub font_scale: (u32, u32),
    /// Stroke and text colors.
    pub ink: Vec<[u8; 3]>,
    /// Box fill colors.
    pub fills: Vec<[u8; 3]>,
    /// A TrueType font request. Only the built-in bitmap font is rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub font: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SynthFigureSpec {
    fn default() -> Self {
        let words = [
            "INPUT", "OUTPUT", "ENCODER", "DECODER", "LOSS", "VQ", "CODEBOOK", "CNN", "GAN", "MLP", "ATTN", "TEXT",
            "OCR", "FEAT", "CONV", "POOL", "X1", "Z", "QKV", "DATA", "MODEL", "NORM", "LAYER", "HEAD", "2D", "3X3",
            "STEP-1", "STEP-2", "LSTM", "RELU",
        ];
        Self {
            width: 96,
            height: 64,
            min_boxes: 2,
            max_boxes: 4,
            max_arrows: 3,
            glyph_strings: words.iter().map(|s| s.to_string()).collect(),
            font_scale: (1, 1),
            ink: vec![[0, 0, 0], [40, 40, 120], [120, 20, 20], [20, 90, 30]],
            fills: vec![[255, 255, 255], [230, 238, 255], [255, 240, 220], [232, 250, 232], [245, 245, 245]],
            font: None,
            seed: 0,
        }
    }
}

impl SynthFigureSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.width < 16 || self.height < 16 {
            return bad("canvas must be at least 16x16");
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return bad("need 1 <= min_boxes <= max_boxes");
        }
        if self.glyph_strings.is_empty() || self.ink.is_empty() || self.fills.is_empty() {
            return bad("glyph_strings, ink and fills must be non-empty");
        }
        if self.font_scale.0 == 0 || self.font_scale.0 > self.font_scale.1 {
            return bad("font_scale must be a non-empty range of positive integers");
        }
        Ok(())
    }
}

/// Pixel box, inclusive start and exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    fn overlaps(&self, o: &PixelBox, margin: u32) -> bool {
        self.x0 < o.x1 + margin && o.x0 < self.x1 + margin && self.y0 < o.y1 + margin && o.y0 < self.y1 + margin
    }

    fn center(&self) -> (i64, i64) {
        (((self.x0 + self.x1) / 2) as i64, ((self.y0 + self.y1) / 2) as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextLabel {
    pub text: String,
    pub bbox: PixelBox,
    /// One box per drawn character, spaces excluded.
    pub glyphs: Vec<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureAnnotation {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<TextLabel>,
}

fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        n * (GLYPH_W + 1) * scale - scale
    }
}

/// Draws `text` with its top-left corner at (x, y). Unknown characters render blank.
pub fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: Rgb<u8>) -> Vec<PixelBox> {
    let mut boxes = Vec::new();
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as u32 * (GLYPH_W + 1) * scale;
        let Some(rows) = glyph(c) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, (gx + col * scale + dx) as i64, (y + r as u32 * scale + dy) as i64, color);
                        }
                    }
                }
            }
        }
        if c != ' ' {
            boxes.push(PixelBox {
                x0: gx,
                y0: y,
                x1: gx + GLYPH_W * scale,
                y1: y + GLYPH_H * scale,
            });
        }
    }
    boxes
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_rect(img: &mut RgbImage, b: &PixelBox, fill: Rgb<u8>, stroke: Rgb<u8>) {
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let edge = x == b.x0 || y == b.y0 || x + 1 == b.x1 || y + 1 == b.y1;
            put(img, x as i64, y as i64, if edge { stroke } else { fill });
        }
    }
}

// Point where the segment from the center of `b` towards `to` leaves the box.
fn exit_point(b: &PixelBox, to: (i64, i64)) -> (i64, i64) {
    let (cx, cy) = b.center();
    let (dx, dy) = ((to.0 - cx) as f64, (to.1 - cy) as f64);
    let hw = (b.x1 - b.x0) as f64 / 2.0;
    let hh = (b.y1 - b.y0) as f64 / 2.0;
    let t = (hw / dx.abs().max(1e-9)).min(hh / dy.abs().max(1e-9));
    ((cx as f64 + dx * t).round() as i64, (cy as f64 + dy * t).round() as i64)
}

fn draw_arrow(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), c: Rgb<u8>) {
    draw_line(img, from, to, c);
    let (dx, dy) = ((to.0 - from.0) as f64, (to.1 - from.1) as f64);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    for side in [-1.0, 1.0] {
        let hx = to.0 as f64 - 4.0 * ux + side * 2.5 * uy;
        let hy = to.1 as f64 - 4.0 * uy - side * 2.5 * ux;
        draw_line(img, to, (hx.round() as i64, hy.round() as i64), c);
    }
}

/// Renders one figure. Pure function of the spec and `index`.
pub fn render_figure(spec: &SynthFigureSpec, index: u64, stream: u64) -> Result<(RgbImage, Vec<TextLabel>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, stream, index]));
    let mut img = RgbImage::from_pixel(spec.width, spec.height, Rgb([255, 255, 255]));
    let n_boxes = rng.gen_range(spec.min_boxes..=spec.max_boxes);
    let mut boxes: Vec<(PixelBox, String, u32)> = Vec::new();
    for _ in 0..n_boxes {
        // a few placement attempts; crowded canvases simply get fewer boxes
        for _ in 0..20 {
            let mut text = spec.glyph_strings.choose(&mut rng).expect("non-empty").clone();
            let mut scale = rng.gen_range(spec.font_scale.0..=spec.font_scale.1);
            while scale > 1 && text_width(&text, scale) + 6 > spec.width {
                scale -= 1;
            }
            while text_width(&text, scale) + 6 > spec.width && text.len() > 1 {
                text.pop();
            }
            let w = text_width(&text, scale) + 6 + rng.gen_range(0..=6);
            let h = GLYPH_H * scale + 6 + rng.gen_range(0..=4);
            if w >= spec.width || h >= spec.height {
                continue;
            }
            let x0 = rng.gen_range(0..spec.width - w);
            let y0 = rng.gen_range(0..spec.height - h);
            let b = PixelBox {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            if boxes.iter().all(|(o, _, _)| !b.overlaps(o, 3)) {
                boxes.push((b, text, scale));
                break;
            }
        }
    }
    let n_arrows = if boxes.len() > 1 {
        rng.gen_range(0..=spec.max_arrows.min(boxes.len() * (boxes.len() - 1) / 2))
    } else {
        0
    };
    for _ in 0..n_arrows {
        let a = rng.gen_range(0..boxes.len());
        let mut b = rng.gen_range(0..boxes.len() - 1);
        if b >= a {
            b += 1;
        }
        let ink = Rgb(*spec.ink.choose(&mut rng).expect("non-empty"));
        let from = exit_point(&boxes[a].0, boxes[b].0.center());
        let to = exit_point(&boxes[b].0, boxes[a].0.center());
        draw_arrow(&mut img, from, to, ink);
    }
    let mut labels = Vec::new();
    for (b, text, scale) in &boxes {
        let fill = Rgb(*spec.fills.choose(&mut rng).expect("non-empty"));
        let ink = Rgb(*spec.ink.choose(&mut rng).expect("non-empty"));
        draw_rect(&mut img, b, fill, ink);
        let tw = text_width(text, *scale);
        let tx = b.x0 + (b.x1 - b.x0 - tw) / 2;
        let ty = b.y0 + (b.y1 - b.y0 - GLYPH_H * scale) / 2;
        let glyphs = draw_text(&mut img, text, tx, ty, *scale, ink);
        labels.push(TextLabel {
            text: text.clone(),
            bbox: PixelBox {
                x0: tx,
                y0: ty,
                x1: tx + tw,
                y1: ty + GLYPH_H * scale,
            },
            glyphs,
        });
    }
    Ok((img, labels))
}

/// Writes `n` figures under `dir/images`, a JSON glyph-box sidecar per figure,
/// and `dir/{split}.manifest`. Returns the manifest path.
pub fn generate_synthetic_corpus(spec: &SynthFigureSpec, n: usize, split: Split, dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus size must be positive".into()));
    }
    if let Some(font) = &spec.font {
        log::warn!(
            "font {} is not rendered; falling back to built-in bitmap glyphs",
            font.display()
        );
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (img, labels) = render_figure(spec, i as u64, stream)?;
        let name = format!("{split}_{i:05}.png");
        let path = images.join(&name);
        super::save_image(&img, &path)?;
        let ann = FigureAnnotation {
            image: format!("images/{name}"),
            width: spec.width,
            height: spec.height,
            labels,
        };
        let side = images.join(format!("{split}_{i:05}.json"));
        let json = serde_json::to_string_pretty(&ann).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        entries.push(PathBuf::from(format!("images/{name}")));
    }
    let manifest = CorpusManifest {
        split,
        root: dir.to_path_buf(),
        entries,
    };
    let path = dir.join(format!("{split}.manifest"));
    manifest.write(&path)?;
    Ok(path)
}
