//! Fixed pixel <-> latent maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Grid;
use crate::error::{Error, Result};
use crate::frames::Image;
use crate::latent::LatentClip;
use crate::scalar::Scalar;

/// Pixel rows in `[-1, 1]`, one row per pixel, frame-major.
pub fn image_rows<T: Scalar>(images: &[&Image]) -> Result<Array2<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Param("no images".into()));
    };
    let (w, h) = (first.width, first.height);
    if let Some(bad) = images.iter().find(|i| i.width != w || i.height != h) {
        return Err(Error::Shape(format!(
            "image {}x{} among {w}x{h} images",
            bad.width, bad.height
        )));
    }
    let mut out = Array2::zeros((images.len() * w * h, 3));
    for (n, img) in images.iter().enumerate() {
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[[n * w * h + p, c]] = T::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(out)
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// The image autoencoder is fixed; only the denoiser is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Autoencoder {
    /// 2x2 average pooling down, nearest-neighbour up.
    #[default]
    AvgPool2,
    Identity,
}

impl Autoencoder {
    pub fn factor(self) -> usize {
        match self {
            Autoencoder::AvgPool2 => 2,
            Autoencoder::Identity => 1,
        }
    }

    pub fn encode<T: Scalar>(self, frames: &[Image]) -> Result<LatentClip<T>> {
        let refs: Vec<&Image> = frames.iter().collect();
        let rows = image_rows::<T>(&refs)?;
        let (w, h) = (frames[0].width, frames[0].height);
        let f = self.factor();
        if w % f != 0 || h % f != 0 {
            return Err(Error::Shape(format!("{w}x{h} frames not divisible by {f}")));
        }
        let grid = Grid::new(frames.len(), h / f, w / f);
        let inv = T::one() / T::lit((f * f) as f64);
        let data = Array2::from_shape_fn((grid.rows(), 3), |(r, c)| {
            let n = r / grid.positions();
            let p = r % grid.positions();
            let (y, x) = (p / grid.width, p % grid.width);
            let mut acc = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    acc += rows[[n * w * h + (y * f + dy) * w + x * f + dx, c]];
                }
            }
            acc * inv
        });
        LatentClip::new(grid, data)
    }

    pub fn decode<T: Scalar>(self, latents: &LatentClip<T>) -> Result<Vec<Image>> {
        if latents.channels() != 3 {
            return Err(Error::Shape(format!(
                "decoder expects 3 latent channels, got {}",
                latents.channels()
            )));
        }
        let grid = latents.grid();
        let f = self.factor();
        let (w, h) = (grid.width * f, grid.height * f);
        let data = latents.data();
        Ok((0..grid.frames)
            .map(|n| {
                let mut img = Image::new(w, h);
                for y in 0..h {
                    for x in 0..w {
                        let r = n * grid.positions() + (y / f) * grid.width + x / f;
                        img.put(x, y, [0, 1, 2].map(|c| to_byte(data[[r, c]])));
                    }
                }
                img
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_round_trip_on_blocky_images() {
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let v = if (x / 2 + y / 2) % 2 == 0 { 200 } else { 10 };
                img.put(x, y, [v, 255 - v, 128]);
            }
        }
        let z: LatentClip<f32> = Autoencoder::AvgPool2.encode(&[img.clone()]).unwrap();
        assert_eq!(z.grid(), Grid::new(1, 2, 2));
        assert_eq!(Autoencoder::AvgPool2.decode(&z).unwrap(), vec![img.clone()]);
        let z: LatentClip<f64> = Autoencoder::Identity.encode(&[img.clone()]).unwrap();
        assert_eq!(Autoencoder::Identity.decode(&z).unwrap(), vec![img]);
    }
}
