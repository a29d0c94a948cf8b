use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    /// Single muted colour with light sensor noise.
    Plain,
    /// Overlapping random blobs and stripes.
    Cluttered,
}

/// Appearance of occluders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderStyle {
    /// Flat fill with the background's mean colour: occluders look like background.
    Untextured,
    /// Distinct patterned surfaces.
    Textured,
    /// Each occluder picks one of the two styles at random.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Plain background, static camera, long occlusions, several classes.
    Staged,
    /// Cluttered background, moving camera, scale variation, one class, mixed occluders.
    Assembly,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(Preset::Staged),
            "assembly" => Ok(Preset::Assembly),
            other => Err(Error::InvalidSpec(format!(
                "unknown preset `{other}` (expected staged or assembly)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Staged => "staged",
            Preset::Assembly => "assembly",
        })
    }
}

impl FromStr for OccluderStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untextured" => Ok(OccluderStyle::Untextured),
            "textured" => Ok(OccluderStyle::Textured),
            "mixed" => Ok(OccluderStyle::Mixed),
            other => Err(Error::InvalidSpec(format!(
                "unknown occluder style `{other}` (expected untextured, textured, mixed)"
            ))),
        }
    }
}

impl FromStr for BackgroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BackgroundKind::Plain),
            "cluttered" => Ok(BackgroundKind::Cluttered),
            other => Err(Error::InvalidSpec(format!(
                "unknown background `{other}` (expected plain or cluttered)"
            ))),
        }
    }
}

/// Everything that parameterises a generated sequence. Ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Number of foreground classes; annotations use labels `1..=num_classes`.
    pub num_classes: usize,
    pub objects: [usize; 2],
    /// Sprite side length in pixels.
    pub sprite_size: [usize; 2],
    /// Object speed in pixels per frame.
    pub speed: [f64; 2],
    /// Object speed multiplier while it is hidden by the planned occluder.
    pub occluded_speed_scale: f64,
    /// Per-frame relative change of sprite size (0 disables scale variation).
    pub scale_drift: f64,
    /// Occluders that wander independently of the objects.
    pub distractors: usize,
    /// Distractor side length in pixels.
    pub occluder_size: [usize; 2],
    pub occluder_speed: [f64; 2],
    /// Length of the planned full occlusion of the first object, in frames.
    pub occlusion_duration: [usize; 2],
    /// Frames the planned occluder takes to slide onto or off the object.
    pub approach_frames: usize,
    /// Extra pixels the planned occluder extends beyond the object on every side.
    pub occluder_margin: usize,
    /// Whether every sequence contains a planned occlusion event.
    pub planned_occlusion: bool,
    pub background: BackgroundKind,
    pub occluder_style: OccluderStyle,
    /// Background pan in pixels per frame.
    pub camera_speed: f64,
    /// Uniform per-pixel noise amplitude, in intensity levels.
    pub noise: u8,
    /// Objects with a visible fraction below this value are flagged occluded.
    pub occluded_threshold: f64,
}

impl SceneSpec {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Staged => SceneSpec {
                width: 128,
                height: 128,
                num_frames: 48,
                num_classes: 3,
                objects: [1, 2],
                sprite_size: [16, 40],
                speed: [0.5, 2.0],
                occluded_speed_scale: 0.25,
                scale_drift: 0.0,
                distractors: 1,
                occluder_size: [24, 48],
                occluder_speed: [0.5, 2.0],
                occlusion_duration: [20, 30],
                approach_frames: 4,
                occluder_margin: 4,
                planned_occlusion: true,
                background: BackgroundKind::Plain,
                occluder_style: OccluderStyle::Textured,
                camera_speed: 0.0,
                noise: 4,
                occluded_threshold: 0.25,
            },
            Preset::Assembly => SceneSpec {
                width: 128,
                height: 128,
                num_frames: 40,
                num_classes: 1,
                objects: [1, 2],
                sprite_size: [16, 40],
                speed: [0.5, 1.5],
                occluded_speed_scale: 0.25,
                scale_drift: 0.01,
                distractors: 2,
                occluder_size: [24, 48],
                occluder_speed: [0.5, 1.5],
                occlusion_duration: [20, 24],
                approach_frames: 4,
                occluder_margin: 4,
                planned_occlusion: true,
                background: BackgroundKind::Cluttered,
                occluder_style: OccluderStyle::Mixed,
                camera_speed: 0.5,
                noise: 4,
                occluded_threshold: 0.25,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return bad("canvas and sequence length must be non-zero".into());
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        for (name, r) in [
            ("objects", self.objects),
            ("sprite_size", self.sprite_size),
            ("occluder_size", self.occluder_size),
            ("occlusion_duration", self.occlusion_duration),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range [{}, {}] is empty", r[0], r[1]));
            }
        }
        for (name, r) in [("speed", self.speed), ("occluder_speed", self.occluder_speed)] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} range [{}, {}] must be non-negative", r[0], r[1]));
            }
        }
        let side = self.width.min(self.height);
        if self.sprite_size[0] < 2 || self.sprite_size[1] > side {
            return bad(format!(
                "sprite sizes {:?} must lie within [2, {side}]",
                self.sprite_size
            ));
        }
        if self.occluder_size[1] > side {
            return bad(format!("occluder sizes {:?} exceed the canvas", self.occluder_size));
        }
        if self.planned_occlusion {
            if self.objects[0] == 0 {
                return bad("a planned occlusion needs at least one object".into());
            }
            if self.sprite_size[1] + 2 * self.occluder_margin > side {
                return bad("planned occluder would not fit in the canvas".into());
            }
            let need = self.occlusion_duration[0] + 2 * self.approach_frames + 2;
            if self.occlusion_duration[0] == 0 || need > self.num_frames {
                return bad(format!(
                    "occlusion of {} frames (plus {} approach frames each way) does not fit in {} frames",
                    self.occlusion_duration[0], self.approach_frames, self.num_frames
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.occluded_threshold) {
            return bad("occluded_threshold must lie in [0, 1]".into());
        }
        if !(self.scale_drift >= 0.0 && self.camera_speed >= 0.0 && self.occluded_speed_scale >= 0.0) {
            return bad("drift, camera speed and occluded speed scale must be non-negative".into());
        }
        Ok(())
    }
}
