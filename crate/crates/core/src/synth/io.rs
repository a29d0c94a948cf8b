//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/seq_000000/frame_000000.png
//! root/seq_000000/annotations.jsonl   one FrameAnnotation per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::sequence::{FrameAnnotation, SequenceSample};

pub const MANIFEST: &str = "manifest.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
    /// Free-form provenance (generator spec, seed, split name).
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn sequence_dir(i: usize) -> String {
    format!("seq_{i:06}")
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:06}.png")
}

fn write_json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `samples` under `root` (created if needed) with `info` stored in the manifest.
pub fn write_dataset(root: &Path, samples: &[SequenceSample], info: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.frames.len() != s.annotations.len() {
            return Err(Error::contract(format!(
                "sequence {i} has {} frames but {} annotation records",
                s.frames.len(),
                s.annotations.len()
            )));
        }
        let dir = sequence_dir(i);
        let seq_root = root.join(&dir);
        fs::create_dir_all(&seq_root).map_err(|e| Error::io(&seq_root, e))?;
        for (t, frame) in s.frames.iter().enumerate() {
            let path = seq_root.join(frame_file(t));
            frame.save_with_format(&path, image::ImageFormat::Png).map_err(|source| Error::Image { path, source })?;
        }
        let ann_path = seq_root.join(ANNOTATIONS);
        let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &s.annotations {
            let line = serde_json::to_string(rec).expect("annotation records serialise");
            writeln!(out, "{line}").map_err(|e| Error::io(&ann_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&ann_path, e))?;
        entries.push(ManifestEntry {
            dir,
            frames: s.frames.len(),
        });
    }
    let manifest = Manifest {
        sequences: entries,
        info,
    };
    write_json_file(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Parses an annotations file; errors name the file and the 1-based line.
pub fn read_annotations(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let malformed = |msg: String| Error::Malformed {
            path: PathBuf::from(path),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            return Err(malformed("empty record".into()));
        }
        let rec: FrameAnnotation = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.frame != out.len() {
            return Err(malformed(format!("expected frame {}, found {}", out.len(), rec.frame)));
        }
        for o in &rec.objects {
            let [x1, y1, x2, y2] = o.bbox;
            if !(x2 > x1 && y2 > y1) {
                return Err(malformed(format!("degenerate box {:?}", o.bbox)));
            }
            if !(0.0..=1.0).contains(&o.visible_fraction) {
                return Err(malformed(format!("visible_fraction {} outside [0, 1]", o.visible_fraction)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_sequence(seq_root: &Path) -> Result<SequenceSample> {
    let annotations = read_annotations(&seq_root.join(ANNOTATIONS))?;
    let mut frames = Vec::with_capacity(annotations.len());
    for t in 0..annotations.len() {
        let path = seq_root.join(frame_file(t));
        let img = image::open(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        frames.push(img.to_rgb8());
    }
    Ok(SequenceSample {
        frames,
        annotations,
    })
}

pub fn read_dataset(root: &Path) -> Result<Vec<SequenceSample>> {
    let manifest = read_manifest(root)?;
    manifest
        .sequences
        .iter()
        .map(|e| {
            let s = read_sequence(&root.join(&e.dir))?;
            if s.len() != e.frames {
                return Err(Error::Malformed {
                    path: root.join(MANIFEST),
                    line: 0,
                    msg: format!("{} lists {} frames, found {}", e.dir, e.frames, s.len()),
                });
            }
            Ok(s)
        })
        .collect()
}
