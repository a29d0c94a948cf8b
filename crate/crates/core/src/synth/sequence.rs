use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synth::render::{fill_rect, paste, Background, OccluderLook, SpriteStyle};
use crate::synth::spec::{OccluderStyle, SceneSpec};

/// Ground truth for one object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    /// `[x1, y1, x2, y2]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Foreground label, starting at 1.
    pub class: usize,
    pub occluded: bool,
    pub visible_fraction: f64,
}

/// All objects of one frame, listed in the same order in every frame of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub frame: usize,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<FrameAnnotation>,
}

/// Frames compare by dimensions and pixel bytes only, ignoring colour-space metadata.
impl PartialEq for SequenceSample {
    fn eq(&self, other: &Self) -> bool {
        self.annotations == other.annotations
            && self.frames.len() == other.frames.len()
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.dimensions() == b.dimensions() && a.as_raw() == b.as_raw())
    }
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames, or `None` for an empty sequence.
    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width() as usize, f.height() as usize))
    }
}

/// Per-frame placement `[left, top, width, height]` of an object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub class: usize,
    pub style: SpriteStyle,
    pub placements: Vec<[i64; 4]>,
}

/// Per-frame placement of an occluder; `None` while it is off stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OccluderTrack {
    pub look: OccluderLook,
    pub placements: Vec<Option<[i64; 4]>>,
}

/// Complete simulation state of a sequence, ready to render. Objects are drawn in order, then
/// occluders in order, so later entries appear on top.
#[derive(Debug, Clone)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub background: Background,
    /// Horizontal background offset per frame.
    pub camera: Vec<usize>,
    pub objects: Vec<ObjectTrack>,
    pub occluders: Vec<OccluderTrack>,
    pub noise: u8,
    pub noise_seed: u64,
    pub occluded_threshold: f64,
    /// Planned occlusion event of object 0 as `(onset, duration)`, if any.
    pub occlusion_event: Option<(usize, usize)>,
}

const BACKGROUND: i32 = -1;

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.camera.len()
    }

    /// Renders frame `t` and its annotations. Boxes come from the placements, visible fractions
    /// from per-pixel ownership.
    pub fn render_frame(&self, t: usize) -> (RgbImage, FrameAnnotation) {
        let (w, h) = (self.width, self.height);
        let mut canvas = RgbImage::new(w as u32, h as u32);
        let cam = self.camera[t] as u32;
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                canvas.put_pixel(x, y, *self.background.image.get_pixel(x + cam, y));
            }
        }
        let mut owner = vec![BACKGROUND; w * h];
        let mut coverage = vec![0usize; self.objects.len()];
        for (i, obj) in self.objects.iter().enumerate() {
            let [left, top, ow, oh] = obj.placements[t];
            let sprite = obj.style.render(ow as usize, oh as usize);
            paste(&mut canvas, &sprite, left, top);
            for sy in 0..oh {
                for sx in 0..ow {
                    let (x, y) = (left + sx, top + sy);
                    if sprite.mask[(sy * ow + sx) as usize] && x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                        owner[y as usize * w + x as usize] = i as i32;
                        coverage[i] += 1;
                    }
                }
            }
        }
        for (j, occ) in self.occluders.iter().enumerate() {
            let Some([left, top, ow, oh]) = occ.placements[t] else { continue };
            fill_rect(&mut canvas, &occ.look, left, top, ow as usize, oh as usize);
            for y in top.max(0)..(top + oh).min(h as i64) {
                for x in left.max(0)..(left + ow).min(w as i64) {
                    owner[y as usize * w + x as usize] = (self.objects.len() + j) as i32;
                }
            }
        }
        if self.noise > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.noise_seed, &[t as u64]));
            let n = self.noise as i32;
            for (i, px) in canvas.pixels_mut().enumerate() {
                let o = owner[i];
                let d: [i32; 3] = [0, 1, 2].map(|_| rng.random_range(-n..=n));
                if o == BACKGROUND || o >= self.objects.len() as i32 {
                    for c in 0..3 {
                        px.0[c] = (px.0[c] as i32 + d[c]).clamp(0, 255) as u8;
                    }
                }
            }
        }
        let mut visible = vec![0usize; self.objects.len()];
        for &o in &owner {
            if o >= 0 && (o as usize) < self.objects.len() {
                visible[o as usize] += 1;
            }
        }
        let objects = self
            .objects
            .iter()
            .enumerate()
            .map(|(i, obj)| {
                let [left, top, ow, oh] = obj.placements[t];
                let vf = if coverage[i] == 0 {
                    0.0
                } else {
                    visible[i] as f64 / coverage[i] as f64
                };
                ObjectAnnotation {
                    bbox: [left as f64, top as f64, (left + ow) as f64, (top + oh) as f64],
                    class: obj.class,
                    occluded: vf < self.occluded_threshold,
                    visible_fraction: vf,
                }
            })
            .collect();
        (canvas, FrameAnnotation { frame: t, objects })
    }

    pub fn render(&self) -> SequenceSample {
        let (frames, annotations) = (0..self.num_frames()).map(|t| self.render_frame(t)).unzip();
        SequenceSample {
            frames,
            annotations,
        }
    }
}

fn look(style: OccluderStyle, bg: &Background, rng: &mut impl Rng) -> OccluderLook {
    let textured = match style {
        OccluderStyle::Untextured => false,
        OccluderStyle::Textured => true,
        OccluderStyle::Mixed => rng.random_bool(0.5),
    };
    if textured {
        OccluderLook::textured(rng)
    } else {
        OccluderLook::Flat(bg.mean)
    }
}

fn range_usize(r: [usize; 2], rng: &mut impl Rng) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn range_f64(r: [f64; 2], rng: &mut impl Rng) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn velocity(r: [f64; 2], rng: &mut impl Rng) -> (f64, f64) {
    let s = range_f64(r, rng);
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    (s * a.cos(), s * a.sin())
}

/// Moving box that bounces off the canvas borders.
struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Mover {
    fn place(&self, cw: usize, ch: usize) -> [i64; 4] {
        let (w, h) = (self.w.round() as i64, self.h.round() as i64);
        let left = (self.x.round() as i64).clamp(0, (cw as i64 - w).max(0));
        let top = (self.y.round() as i64).clamp(0, (ch as i64 - h).max(0));
        [left, top, w, h]
    }

    fn advance(&mut self, factor: f64, cw: usize, ch: usize) {
        self.x += self.vx * factor;
        self.y += self.vy * factor;
        let (mx, my) = ((cw as f64 - self.w).max(0.0), (ch as f64 - self.h).max(0.0));
        for (p, v, m) in [(&mut self.x, &mut self.vx, mx), (&mut self.y, &mut self.vy, my)] {
            if *p < 0.0 {
                *p = (-*p).min(m);
                *v = -*v;
            } else if *p > m {
                *p = (2.0 * m - *p).max(0.0);
                *v = -*v;
            }
        }
    }

    /// Changes the size by `rate` (relative), reversing direction at the size bounds.
    fn grow(&mut self, rate: &mut f64, lo: f64, hi: f64, cw: usize, ch: usize) {
        let (cx, cy) = (self.x + self.w / 2.0, self.y + self.h / 2.0);
        let s = 1.0 + *rate;
        let (nw, nh) = (self.w * s, self.h * s);
        if nw < lo || nh < lo || nw > hi || nh > hi {
            *rate = -*rate;
            return;
        }
        self.w = nw;
        self.h = nh;
        self.x = (cx - nw / 2.0).clamp(0.0, (cw as f64 - nw).max(0.0));
        self.y = (cy - nh / 2.0).clamp(0.0, (ch as f64 - nh).max(0.0));
    }
}

/// Simulates object, occluder and camera motion for one sequence.
///
/// When `planned_occlusion` is set, object 0 is fully covered by a dedicated occluder for a
/// sampled duration: the occluder slides onto the object over `approach_frames`, stays centred
/// on it (the object slows to `occluded_speed_scale` of its speed meanwhile) and slides off.
pub fn simulate(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cw, ch, nf) = (spec.width, spec.height, spec.num_frames);
    let pan = (spec.camera_speed * (nf - 1) as f64).ceil() as usize;
    let background = Background::generate(spec.background, cw + pan, ch, cw, &mut rng);
    let camera: Vec<usize> = (0..nf).map(|t| (spec.camera_speed * t as f64).floor() as usize).collect();

    let (slo, shi) = (spec.sprite_size[0] as f64, spec.sprite_size[1] as f64);
    let n_obj = range_usize(spec.objects, &mut rng);
    let mut movers = Vec::with_capacity(n_obj);
    let mut objects = Vec::with_capacity(n_obj);
    let mut drift = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = rng.random_range(1..=spec.num_classes);
        let style = SpriteStyle::random(class, &mut rng);
        let w = rng.random_range(slo..=shi);
        let h = (w * rng.random_range(0.8..1.25)).clamp(slo, shi);
        let (vx, vy) = velocity(spec.speed, &mut rng);
        movers.push(Mover {
            x: rng.random_range(0.0..=(cw as f64 - w)),
            y: rng.random_range(0.0..=(ch as f64 - h)),
            vx,
            vy,
            w,
            h,
        });
        drift.push(if spec.scale_drift > 0.0 {
            rng.random_range(-spec.scale_drift..=spec.scale_drift)
        } else {
            0.0
        });
        objects.push(ObjectTrack {
            class,
            style,
            placements: Vec::with_capacity(nf),
        });
    }

    let event = if spec.planned_occlusion {
        let d = range_usize(spec.occlusion_duration, &mut rng);
        let a = spec.approach_frames;
        if d + 2 * a + 2 > nf {
            return Err(Error::InvalidSpec(format!(
                "occlusion of {d} frames does not fit in {nf} frames"
            )));
        }
        let onset = rng.random_range(a + 1..=nf - d - a - 1);
        Some((onset, d))
    } else {
        None
    };
    let in_window = |t: usize| match event {
        Some((on, d)) => t + spec.approach_frames >= on && t < on + d + spec.approach_frames,
        None => false,
    };

    for t in 0..nf {
        for (i, m) in movers.iter_mut().enumerate() {
            objects[i].placements.push(m.place(cw, ch));
            let factor = if i == 0 && in_window(t) { spec.occluded_speed_scale } else { 1.0 };
            m.advance(factor, cw, ch);
            if drift[i] != 0.0 && !(i == 0 && in_window(t)) {
                m.grow(&mut drift[i], slo, shi, cw, ch);
            }
        }
    }

    let mut occluders = Vec::new();
    for _ in 0..spec.distractors {
        let lk = look(spec.occluder_style, &background, &mut rng);
        let w = range_usize(spec.occluder_size, &mut rng) as f64;
        let h = range_usize(spec.occluder_size, &mut rng) as f64;
        let (vx, vy) = velocity(spec.occluder_speed, &mut rng);
        let mut m = Mover {
            x: rng.random_range(0.0..=(cw as f64 - w)),
            y: rng.random_range(0.0..=(ch as f64 - h)),
            vx,
            vy,
            w,
            h,
        };
        let placements = (0..nf)
            .map(|_| {
                let p = m.place(cw, ch);
                m.advance(1.0, cw, ch);
                Some(p)
            })
            .collect();
        occluders.push(OccluderTrack {
            look: lk,
            placements,
        });
    }

    if let Some((onset, d)) = event {
        let lk = look(spec.occluder_style, &background, &mut rng);
        let a = spec.approach_frames;
        let ang_in = rng.random_range(0.0..std::f64::consts::TAU);
        let ang_out = rng.random_range(0.0..std::f64::consts::TAU);
        let m = spec.occluder_margin as i64;
        let placements = (0..nf)
            .map(|t| {
                if !in_window(t) {
                    return None;
                }
                let [l, tp, w, h] = objects[0].placements[t];
                let (ow, oh) = (w + 2 * m, h + 2 * m);
                let far = 0.5 * (ow.max(oh) + w.max(h)) as f64 + 2.0;
                let (frac, ang) = if t < onset {
                    ((onset - t) as f64 / a as f64, ang_in)
                } else if t >= onset + d {
                    ((t + 1 - onset - d) as f64 / a as f64, ang_out)
                } else {
                    (0.0, 0.0)
                };
                let (dx, dy) = (far * frac * ang.cos(), far * frac * ang.sin());
                let cx = l as f64 + w as f64 / 2.0 + dx;
                let cy = tp as f64 + h as f64 / 2.0 + dy;
                Some([
                    (cx - ow as f64 / 2.0).round() as i64,
                    (cy - oh as f64 / 2.0).round() as i64,
                    ow,
                    oh,
                ])
            })
            .collect();
        occluders.push(OccluderTrack {
            look: lk,
            placements,
        });
    }

    Ok(Scene {
        width: cw,
        height: ch,
        background,
        camera,
        objects,
        occluders,
        noise: spec.noise,
        noise_seed: rng.random(),
        occluded_threshold: spec.occluded_threshold,
        occlusion_event: event,
    })
}

/// Deterministic function of `(spec, seed)`.
pub fn generate_sequence(spec: &SceneSpec, seed: u64) -> Result<SequenceSample> {
    Ok(simulate(spec, seed)?.render())
}

/// `n` sequences; sequence `i` uses a seed derived from `(seed, i)`.
pub fn generate_sequences(spec: &SceneSpec, seed: u64, n: usize) -> Result<Vec<SequenceSample>> {
    (0..n)
        .map(|i| generate_sequence(spec, derive_seed(seed, &[i as u64])))
        .collect()
}

/// Still images with sprites pasted at random positions and sizes over a background of the
/// spec's kind. Sprites may overlap each other and the spec's distractor occluders; boxes are
/// tight around each sprite.
pub fn generate_static_composites(spec: &SceneSpec, seed: u64, n: usize) -> Result<Vec<(RgbImage, FrameAnnotation)>> {
    let still = SceneSpec {
        num_frames: 1,
        planned_occlusion: false,
        camera_speed: 0.0,
        objects: [spec.objects[0].max(1), spec.objects[1].max(1)],
        ..spec.clone()
    };
    still.validate()?;
    (0..n)
        .map(|i| {
            let scene = simulate(&still, derive_seed(seed, &[i as u64]))?;
            let (img, mut ann) = scene.render_frame(0);
            ann.frame = 0;
            Ok((img, ann))
        })
        .collect()
}

/// Composites as one-frame sequences, for storage in the sequence layout.
pub fn composites_as_sequences(items: Vec<(RgbImage, FrameAnnotation)>) -> Vec<SequenceSample> {
    items
        .into_iter()
        .map(|(img, ann)| SequenceSample {
            frames: vec![img],
            annotations: vec![ann],
        })
        .collect()
}

/// Mirrors a frame left-right.
pub fn flip_image(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Solid-colour helper used by tests and fixtures.
pub fn solid(width: usize, height: usize, c: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width as u32, height as u32, Rgb(c))
}
