//! Procedural corpus of captioned moving-shape clips with exact subject
//! masks.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Clip, Image, Mask};

macro_rules! attribute {
    ($name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute!(Shape { Square => "square", Circle => "circle", Triangle => "triangle" });
attribute!(Color { Red => "red", Blue => "blue", Green => "green", Yellow => "yellow" });
attribute!(Texture { Solid => "solid", Striped => "striped" });
attribute!(Motion { LeftToRight => "left-to-right", UpToDown => "up-to-down", Diagonal => "diagonal" });
attribute!(Background { Plain => "plain", Gradient => "gradient", Checker => "checker" });

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 70, 225],
            Color::Green => [40, 185, 60],
            Color::Yellow => [235, 215, 40],
        }
    }
}

/// Appearance of the subject: one of 24 classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subject {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
}

impl Subject {
    pub const COUNT: usize = 24;

    pub fn all() -> Vec<Subject> {
        let mut v = Vec::with_capacity(Self::COUNT);
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &texture in Texture::ALL {
                    v.push(Subject { shape, color, texture });
                }
            }
        }
        v
    }

    pub fn class_index(self) -> usize {
        (self.shape.index() * Color::ALL.len() + self.color.index()) * Texture::ALL.len() + self.texture.index()
    }

    /// Noun phrase as used in captions; solid texture is left implicit.
    pub fn phrase(self) -> String {
        match self.texture {
            Texture::Solid => format!("{} {}", self.color, self.shape),
            Texture::Striped => format!("{} striped {}", self.color, self.shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
    pub motion: Motion,
    pub background: Background,
    pub n_frames: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl ClipSpec {
    pub fn subject(&self) -> Subject {
        Subject {
            shape: self.shape,
            color: self.color,
            texture: self.texture,
        }
    }

    pub fn with_subject(mut self, s: Subject) -> Self {
        self.shape = s.shape;
        self.color = s.color;
        self.texture = s.texture;
        self
    }

    /// `a {color} {striped?} {shape} moving on the {background}`.
    pub fn caption(&self) -> String {
        format!("a {} moving on the {}", self.subject().phrase(), self.background)
    }

    /// Caption without colour or texture words.
    pub fn rough_caption(&self) -> String {
        format!("a {} moving on the {}", self.shape, self.background)
    }
}

/// Rendered clip with per-frame subject masks.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedClip {
    pub frames: Vec<Image>,
    pub caption: String,
    pub masks: Vec<Mask>,
}

impl RenderedClip {
    pub fn to_clip(&self) -> Clip {
        Clip {
            frames: self.frames.clone(),
            fps: 8,
            caption: self.caption.clone(),
        }
    }
}

/// Subject geometry for one frame.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    size: f64,
}

fn background_pixel(bg: Background, x: usize, y: usize, res: usize) -> [u8; 3] {
    match bg {
        Background::Plain => [128, 128, 128],
        Background::Gradient => {
            let v = 40.0 + 175.0 * x as f64 / (res.max(2) - 1) as f64;
            let v = v.round() as u8;
            [v, v, v]
        }
        Background::Checker => {
            let cell = (res / 4).max(1);
            if ((x / cell) + (y / cell)).is_multiple_of(2) {
                [90, 90, 90]
            } else {
                [170, 170, 170]
            }
        }
    }
}

fn inside(shape: Shape, pose: Pose, px: f64, py: f64) -> bool {
    let h = pose.size / 2.0;
    let (dx, dy) = (px - pose.cx, py - pose.cy);
    match shape {
        Shape::Square => dx.abs() <= h && dy.abs() <= h,
        Shape::Circle => dx * dx + dy * dy <= h * h,
        Shape::Triangle => {
            // apex up; half-width grows linearly from apex to base
            if dy < -h || dy > h {
                return false;
            }
            let half_width = (dy + h) / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Draws the subject over `img` and returns its mask.
fn draw_subject(img: &mut Image, subject: Subject, pose: Pose) -> Mask {
    let res = img.width;
    let mut mask = Mask::new(img.width, img.height);
    let base = subject.color.rgb();
    let dark = base.map(|c| (c as f64 * 0.3).round() as u8);
    let period = (res / 8).max(4) as f64;
    let top = pose.cy - pose.size / 2.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !inside(subject.shape, pose, px, py) {
                continue;
            }
            mask.set(x, y, true);
            let stripe = match subject.texture {
                Texture::Solid => false,
                Texture::Striped => (((py - top) / (period / 2.0)).floor() as i64).rem_euclid(2) == 1,
            };
            img.put(x, y, if stripe { dark } else { base });
        }
    }
    mask
}

fn poses(spec: &ClipSpec) -> Vec<Pose> {
    let res = spec.resolution as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = (0.34 * res).round() + rng.random_range(-1i32..=1) as f64;
    let margin = size / 2.0 + 1.0;
    let lo = margin + rng.random_range(0.0..0.06) * res;
    let hi = res - margin - rng.random_range(0.0..0.06) * res;
    let cross = rng.random_range(margin..=(res - margin));
    let n = spec.n_frames.max(1);
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let along = lo + f * (hi - lo);
            let (cx, cy) = match spec.motion {
                Motion::LeftToRight => (along, cross),
                Motion::UpToDown => (cross, along),
                Motion::Diagonal => (along, along),
            };
            Pose { cx, cy, size }
        })
        .collect()
}

/// Deterministic render of a clip spec.
pub fn generate_clip(spec: &ClipSpec) -> RenderedClip {
    let res = spec.resolution;
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut masks = Vec::with_capacity(spec.n_frames);
    for pose in poses(spec).into_iter().take(spec.n_frames) {
        let mut img = Image::new(res, res);
        for y in 0..res {
            for x in 0..res {
                img.put(x, y, background_pixel(spec.background, x, y, res));
            }
        }
        masks.push(draw_subject(&mut img, spec.subject(), pose));
        frames.push(img);
    }
    RenderedClip {
        frames,
        caption: spec.caption(),
        masks,
    }
}

/// Centered subject on a plain grey background, with a small pose jitter.
pub fn render_reference(subject: Subject, pose_seed: u64, resolution: usize) -> Image {
    let res = resolution as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed ^ 0x5eed_0f_7e5f);
    let jitter = (res / 16.0).max(1.0);
    let pose = Pose {
        cx: res / 2.0 + rng.random_range(-jitter..=jitter),
        cy: res / 2.0 + rng.random_range(-jitter..=jitter),
        size: (0.4 * res).round() + rng.random_range(-1i32..=1) as f64,
    };
    let mut img = Image::filled(resolution, resolution, [128, 128, 128]);
    draw_subject(&mut img, subject, pose);
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: usize,
    pub spec: ClipSpec,
    pub caption: String,
    pub split: Split,
    /// Directory of the clip relative to the corpus root.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

/// SplitMix64 mix of the corpus seed and a clip id.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick<T: Copy, R: Rng>(rng: &mut R, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Samples one spec per clip from a seed derived from `(seed, id)`.
pub fn sample_spec(seed: u64, id: usize, n_frames: usize, resolution: usize) -> ClipSpec {
    let clip_seed = derive_seed(seed, id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    ClipSpec {
        shape: pick(&mut rng, Shape::ALL),
        color: pick(&mut rng, Color::ALL),
        texture: pick(&mut rng, Texture::ALL),
        motion: pick(&mut rng, Motion::ALL),
        background: pick(&mut rng, Background::ALL),
        n_frames,
        resolution,
        seed: clip_seed,
    }
}

pub fn generate_corpus(
    n_clips: usize,
    seed: u64,
    n_frames: usize,
    resolution: usize,
    val_fraction: f64,
) -> Result<CorpusManifest> {
    if n_clips == 0 {
        return Err(Error::Param("corpus needs at least one clip".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Param(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let n_val = (n_clips as f64 * val_fraction).round() as usize;
    let entries = (0..n_clips)
        .map(|id| {
            let spec = sample_spec(seed, id, n_frames, resolution);
            CorpusEntry {
                id,
                caption: spec.caption(),
                spec,
                split: if id >= n_clips - n_val {
                    Split::Validation
                } else {
                    Split::Train
                },
                path: format!("clips/clip_{id:05}"),
            }
        })
        .collect();
    Ok(CorpusManifest { seed, entries })
}

impl CorpusManifest {
    pub fn train(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| e.split == Split::Validation)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str, seed: u64) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<Vec<CorpusEntry>>>()?;
        Ok(Self { seed, entries })
    }

    /// Writes `manifest.jsonl` plus every clip (frames, masks, clip
    /// manifest) under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::path(root, e))?;
        for e in &self.entries {
            let dir = root.join(&e.path);
            let r = generate_clip(&e.spec);
            r.to_clip().save_dir(&dir)?;
            for (i, m) in r.masks.iter().enumerate() {
                m.to_image().save_png(&dir.join(format!("mask_{i:04}.png")))?;
            }
        }
        let path = root.join("manifest.jsonl");
        std::fs::write(&path, self.to_jsonl()).map_err(|e| Error::path(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        Self::from_jsonl(&text, 0)
    }
}

/// Loads the masks written next to a corpus clip.
pub fn load_masks(dir: &Path, n: usize) -> Result<Vec<Mask>> {
    (0..n)
        .map(|i| Image::load_png(&dir.join(format!("mask_{i:04}.png"))).map(|m| Mask::from_image(&m)))
        .collect()
}
