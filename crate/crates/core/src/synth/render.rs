//! Procedural backgrounds, sprites and occluders.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synth::spec::BackgroundKind;

/// Silhouette of a sprite class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse,
    Rectangle,
    Diamond,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Stripes,
    Checker,
    Rings,
}

/// Appearance of one object; renders at any pixel size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteStyle {
    pub shape: Shape,
    pub pattern: Pattern,
    pub base: [u8; 3],
    pub accent: [u8; 3],
    /// Number of pattern periods across the sprite.
    pub frequency: f64,
}

/// Pixels and coverage mask of a rendered sprite, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
    pub mask: Vec<bool>,
}

impl SpriteImage {
    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn class_hue(class: usize) -> f64 {
    (class as f64 * 0.381_966 + 0.05).fract()
}

/// Saturated colour from a hue in [0, 1).
fn hue_rgb(h: f64, value: f64) -> [u8; 3] {
    let x = h * 6.0;
    let c = value;
    let f = x.fract();
    let (r, g, b) = match x as usize % 6 {
        0 => (c, c * f, 0.0),
        1 => (c * (1.0 - f), c, 0.0),
        2 => (0.0, c, c * f),
        3 => (0.0, c * (1.0 - f), c),
        4 => (c * f, 0.0, c),
        _ => (c, 0.0, c * (1.0 - f)),
    };
    [r, g, b].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

impl SpriteStyle {
    /// Class-dependent silhouette and palette with per-instance jitter. `class` is 1-based.
    pub fn random(class: usize, rng: &mut impl Rng) -> Self {
        let k = class.saturating_sub(1);
        let shape = [Shape::Ellipse, Shape::Rectangle, Shape::Diamond, Shape::Triangle][k % 4];
        let pattern = [Pattern::Rings, Pattern::Checker, Pattern::Stripes][k % 3];
        let hue = (class_hue(k) + rng.random_range(-0.03..0.03) + 1.0).fract();
        let base = hue_rgb(hue, rng.random_range(0.85..1.0));
        let accent = hue_rgb((hue + 0.5).fract(), rng.random_range(0.3..0.5));
        SpriteStyle {
            shape,
            pattern,
            base,
            accent,
            frequency: rng.random_range(2.0..3.5),
        }
    }

    pub fn render(&self, width: usize, height: usize) -> SpriteImage {
        let mut pixels = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for py in 0..height {
            for px in 0..width {
                let u = (px as f64 + 0.5) / width as f64;
                let v = (py as f64 + 0.5) / height as f64;
                let (du, dv) = (u - 0.5, v - 0.5);
                let inside = match self.shape {
                    Shape::Ellipse => du * du + dv * dv <= 0.25,
                    Shape::Rectangle => true,
                    Shape::Diamond => du.abs() + dv.abs() <= 0.5,
                    Shape::Triangle => du.abs() <= 0.5 * v,
                };
                let f = self.frequency;
                let on = match self.pattern {
                    Pattern::Stripes => ((u + v) * f).fract() < 0.5,
                    Pattern::Checker => ((u * f).floor() + (v * f).floor()) as i64 % 2 == 0,
                    Pattern::Rings => ((du * du + dv * dv).sqrt() * 2.0 * f).fract() < 0.5,
                };
                mask.push(inside);
                pixels.push(if on { self.base } else { self.accent });
            }
        }
        SpriteImage {
            width,
            height,
            pixels,
            mask,
        }
    }
}

/// Appearance of an occluder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OccluderLook {
    Flat([u8; 3]),
    Striped {
        base: [u8; 3],
        accent: [u8; 3],
        period: f64,
    },
}

impl OccluderLook {
    pub fn textured(rng: &mut impl Rng) -> Self {
        // Warm skin-like tones, darker stripes: distinct from the saturated sprite palette.
        let base = [
            rng.random_range(180..235),
            rng.random_range(120..170),
            rng.random_range(90..130),
        ];
        let accent = base.map(|c: u8| (c as f64 * 0.6) as u8);
        OccluderLook::Striped {
            base,
            accent,
            period: rng.random_range(5.0..9.0),
        }
    }

    fn color(&self, px: usize, py: usize) -> [u8; 3] {
        match *self {
            OccluderLook::Flat(c) => c,
            OccluderLook::Striped {
                base,
                accent,
                period,
            } => {
                if ((px + py) as f64 / period).fract() < 0.5 {
                    base
                } else {
                    accent
                }
            }
        }
    }
}

/// A background texture wide enough for the camera pan of a whole sequence.
#[derive(Debug, Clone)]
pub struct Background {
    pub image: RgbImage,
    pub mean: [u8; 3],
}

fn muted(rng: &mut impl Rng) -> [u8; 3] {
    let g: i32 = rng.random_range(90..170);
    [0, 1, 2].map(|_| (g + rng.random_range(-15..=15)).clamp(0, 255) as u8)
}

impl Background {
    pub fn generate(kind: BackgroundKind, width: usize, height: usize, view_width: usize, rng: &mut impl Rng) -> Self {
        let base = muted(rng);
        let mut image = RgbImage::from_pixel(width as u32, height as u32, Rgb(base));
        if kind == BackgroundKind::Cluttered {
            let blobs = (width * height / 1200).max(6);
            for _ in 0..blobs {
                let c = muted(rng);
                let (cx, cy) = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
                let (rx, ry) = (rng.random_range(4.0..24.0), rng.random_range(4.0..24.0));
                let rect = rng.random_bool(0.5);
                let x0 = (cx - rx).max(0.0) as usize;
                let x1 = ((cx + rx).ceil() as usize).min(width);
                let y0 = (cy - ry).max(0.0) as usize;
                let y1 = ((cy + ry).ceil() as usize).min(height);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (du, dv) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                        if rect || du * du + dv * dv <= 1.0 {
                            image.put_pixel(x as u32, y as u32, Rgb(c));
                        }
                    }
                }
            }
            // Thin stripes of a darker tone add high-frequency clutter.
            let stripe = base.map(|v| v / 2);
            for _ in 0..rng.random_range(2..5) {
                let horizontal = rng.random_bool(0.5);
                let at = rng.random_range(0..if horizontal { height } else { width });
                for i in 0..if horizontal { width } else { height } {
                    let (x, y) = if horizontal { (i, at) } else { (at, i) };
                    image.put_pixel(x as u32, y as u32, Rgb(stripe));
                }
            }
        }
        let mut sum = [0u64; 3];
        let vw = view_width.min(width);
        for y in 0..height {
            for x in 0..vw {
                let p = image.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    sum[c] += p[c] as u64;
                }
            }
        }
        let n = (vw * height).max(1) as u64;
        let mean = sum.map(|s| ((s + n / 2) / n) as u8);
        Background { image, mean }
    }
}

/// Copies the pixels of `src` where its mask is set, placing its top-left corner at
/// `(left, top)`; parts outside the canvas are dropped.
pub fn paste(canvas: &mut RgbImage, src: &SpriteImage, left: i64, top: i64) {
    for sy in 0..src.height {
        for sx in 0..src.width {
            let i = sy * src.width + sx;
            if !src.mask[i] {
                continue;
            }
            let (x, y) = (left + sx as i64, top + sy as i64);
            if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
                canvas.put_pixel(x as u32, y as u32, Rgb(src.pixels[i]));
            }
        }
    }
}

/// Fills the clipped rectangle `[left, left + w) x [top, top + h)`.
pub fn fill_rect(canvas: &mut RgbImage, look: &OccluderLook, left: i64, top: i64, w: usize, h: usize) {
    let (cw, ch) = (canvas.width() as i64, canvas.height() as i64);
    for y in top.max(0)..(top + h as i64).min(ch) {
        for x in left.max(0)..(left + w as i64).min(cw) {
            let c = look.color((x - left) as usize, (y - top) as usize);
            canvas.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}
