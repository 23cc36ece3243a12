//! RGB frames and the on-disk clip layout (`frame_0000.png`, ...,
//! `manifest.json`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::path(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::path(path, e))?.to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let uni = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Nearest-neighbour resize by an integer factor.
    pub fn upscale(&self, factor: usize) -> Mask {
        let mut out = Mask::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn to_image(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.get(x, y) { 255 } else { 0 };
                img.put(x, y, [v, v, v]);
            }
        }
        img
    }

    pub fn from_image(img: &Image) -> Mask {
        let mut m = Mask::new(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                m.set(x, y, img.get(x, y)[0] >= 128);
            }
        }
        m
    }
}

/// Per-clip metadata written next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub frames: usize,
    pub fps: u32,
    pub width: usize,
    pub height: usize,
    pub caption: String,
}

/// A sequence of equally sized frames with a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub fps: u32,
    pub caption: String,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0))
    }

    pub fn manifest(&self) -> ClipManifest {
        let (width, height) = self.resolution();
        ClipManifest {
            frames: self.frames.len(),
            fps: self.fps,
            width,
            height,
            caption: self.caption.clone(),
        }
    }

    pub fn frame_name(i: usize) -> String {
        format!("frame_{i:04}.png")
    }

    /// Writes frames and `manifest.json` into `dir`, creating it.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(Self::frame_name(i)))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::path(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        let m: ClipManifest = serde_json::from_str(&text).map_err(|e| Error::path(&path, e))?;
        let mut frames = Vec::with_capacity(m.frames);
        for i in 0..m.frames {
            let f = Image::load_png(&dir.join(Self::frame_name(i)))?;
            if (f.width, f.height) != (m.width, m.height) {
                return Err(Error::path(
                    dir.join(Self::frame_name(i)),
                    format!(
                        "frame is {}x{}, manifest says {}x{}",
                        f.width, f.height, m.width, m.height
                    ),
                ));
            }
            frames.push(f);
        }
        if frames.is_empty() {
            return Err(Error::path(dir, "clip has no frames"));
        }
        Ok(Self {
            frames,
            fps: m.fps,
            caption: m.caption,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Image::filled(4, 3, [10, 20, 30]);
        a.put(1, 2, [255, 0, 7]);
        let clip = Clip {
            frames: vec![a.clone(), Image::filled(4, 3, [1, 2, 3])],
            fps: 8,
            caption: "a red square moving on the plain".into(),
        };
        clip.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("frame_0001.png").exists());
        let back = Clip::load_dir(dir.path()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn mask_iou() {
        let mut a = Mask::new(2, 2);
        let mut b = Mask::new(2, 2);
        assert_eq!(a.iou(&b), 1.0);
        a.set(0, 0, true);
        a.set(1, 0, true);
        b.set(1, 0, true);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(a.upscale(2).count(), 8);
    }
}
