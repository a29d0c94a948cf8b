//! Detection overlays, memory heatmaps and stacked comparison strips.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use occtrack::detector::BBox;
use occtrack::eval::memory_heatmap;
use occtrack::synth::SequenceSample;
use occtrack::video::{persistence_curve, VideoDetector};

use crate::error::CliResult;
use crate::files::write_bytes;

const GT_COLOR: [u8; 3] = [40, 220, 60];
const OCCLUDED_GT_COLOR: [u8; 3] = [250, 220, 40];
const DET_COLOR: [u8; 3] = [230, 30, 30];
const GAP: u32 = 2;

/// Rendered frames of one model over the requested range.
#[derive(Debug, Clone)]
pub struct ModelRow {
    pub overlays: Vec<RgbImage>,
    pub heatmaps: Vec<RgbImage>,
    /// Persistence of the first object over the whole sequence, if it is ever occluded.
    pub persistence: Option<Vec<f64>>,
}

/// Draws a one-pixel rectangle outline clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = (b.x1.floor() as i64).clamp(0, w - 1);
    let y1 = (b.y1.floor() as i64).clamp(0, h - 1);
    let x2 = ((b.x2.ceil() as i64) - 1).clamp(0, w - 1);
    let y2 = ((b.y2.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
        img.put_pixel(x as u32, y2 as u32, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
        img.put_pixel(x2 as u32, y as u32, Rgb(color));
    }
}

fn with_ground_truth(sample: &SequenceSample, t: usize) -> RgbImage {
    let mut img = sample.frames[t].clone();
    for o in &sample.annotations[t].objects {
        let color = if o.occluded { OCCLUDED_GT_COLOR } else { GT_COLOR };
        draw_box(&mut img, &BBox::from_coords(o.bbox), color);
    }
    img
}

pub fn save_png(path: &Path, img: &RgbImage) -> CliResult<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| occtrack::Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_bytes(path, &bytes)
}

/// Runs `model` over the sequence up to `range.end` and writes `overlay_XXXX.png` and
/// `heatmap_XXXX.png` for every frame in `range`.
pub fn render_model(
    model: &VideoDetector<f32>,
    sample: &SequenceSample,
    range: Range<usize>,
    out_dir: &Path,
    score_threshold: f64,
) -> CliResult<ModelRow> {
    let out = model.detect_sequence(&sample.frames[..range.end])?;
    let mut row = ModelRow {
        overlays: Vec::new(),
        heatmaps: Vec::new(),
        persistence: None,
    };
    for t in range {
        let mut overlay = with_ground_truth(sample, t);
        for d in out.detections[t].iter().filter(|d| d.score >= score_threshold) {
            draw_box(&mut overlay, d, DET_COLOR);
        }
        let (w, h) = overlay.dimensions();
        let gray = memory_heatmap(&out.memory[t].memory, w, h);
        let heat = RgbImage::from_fn(w, h, |x, y| {
            let v = gray.get_pixel(x, y).0[0];
            Rgb([v, v, v])
        });
        save_png(&out_dir.join(format!("overlay_{t:04}.png")), &overlay)?;
        save_png(&out_dir.join(format!("heatmap_{t:04}.png")), &heat)?;
        row.overlays.push(overlay);
        row.heatmaps.push(heat);
    }
    let trace: Vec<_> = out.memory.iter().map(|m| m.memory.clone()).collect();
    let partial = SequenceSample {
        frames: Vec::new(),
        annotations: sample.annotations[..trace.len()].to_vec(),
    };
    row.persistence = persistence_curve(0, &partial, &trace, model.frame.config.stride()).map(|c| c.values);
    Ok(row)
}

/// Grid with the input frames on top, then an overlay row and a heatmap row per model.
pub fn compare_figure(sample: &SequenceSample, range: Range<usize>, rows: &[ModelRow]) -> RgbImage {
    let mut grid: Vec<Vec<&RgbImage>> = Vec::new();
    let inputs: Vec<RgbImage> = range.clone().map(|t| with_ground_truth(sample, t)).collect();
    grid.push(inputs.iter().collect());
    for r in rows {
        grid.push(r.overlays.iter().collect());
        grid.push(r.heatmaps.iter().collect());
    }
    let (w, h) = inputs[0].dimensions();
    let cols = inputs.len() as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * w + (cols - 1) * GAP,
        grid.len() as u32 * h + (grid.len() as u32 - 1) * GAP,
        Rgb([255, 255, 255]),
    );
    for (r, line) in grid.iter().enumerate() {
        for (c, img) in line.iter().enumerate() {
            let (ox, oy) = (c as u32 * (w + GAP), r as u32 * (h + GAP));
            for (x, y, p) in img.enumerate_pixels() {
                canvas.put_pixel(ox + x, oy + y, *p);
            }
        }
    }
    canvas
}

/// `frame,<model>...` table of the persistence curves; empty cells where a model has none.
pub fn write_persistence_csv(path: &Path, models: &[(String, PathBuf)], rows: &[ModelRow]) -> CliResult<()> {
    let mut text = String::from("frame");
    for (name, _) in models {
        text.push(',');
        text.push_str(if name.is_empty() { "persistence" } else { name });
    }
    text.push('\n');
    let len = rows.iter().filter_map(|r| r.persistence.as_ref().map(Vec::len)).max().unwrap_or(0);
    for t in 0..len {
        let _ = write!(text, "{t}");
        for r in rows {
            text.push(',');
            if let Some(v) = r.persistence.as_ref().and_then(|p| p.get(t)) {
                let _ = write!(text, "{v:.6}");
            }
        }
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}
