use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Grid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-frame latent tensors of a clip, stored as one matrix with a row per
/// latent pixel (frame-major, then row-major) and a column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip<T> {
    grid: Grid,
    data: Array2<T>,
}

impl<T: Scalar> LatentClip<T> {
    pub fn new(grid: Grid, data: Array2<T>) -> Result<Self> {
        if data.nrows() != grid.rows() {
            return Err(Error::Shape(format!(
                "latent data has {} rows, grid {}x{}x{} needs {}",
                data.nrows(),
                grid.frames,
                grid.height,
                grid.width,
                grid.rows()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Self {
            grid,
            data: Array2::zeros((grid.rows(), channels)),
        }
    }

    pub fn from_fn(grid: Grid, channels: usize, f: impl FnMut((usize, usize)) -> T) -> Self {
        Self {
            grid,
            data: Array2::from_shape_fn((grid.rows(), channels), f),
        }
    }

    /// Standard normal noise of the given shape.
    pub fn gaussian<R: Rng>(grid: Grid, channels: usize, rng: &mut R) -> Self {
        Self::from_fn(grid, channels, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z)
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.grid.frames
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    /// Rows belonging to one frame.
    pub fn frame(&self, n: usize) -> ArrayView2<'_, T> {
        let hw = self.grid.positions();
        self.data.slice(s![n * hw..(n + 1) * hw, ..])
    }

    /// Clip made of frames `start..start + len`.
    pub fn frames_range(&self, start: usize, len: usize) -> Self {
        let hw = self.grid.positions();
        Self {
            grid: Grid::new(len, self.grid.height, self.grid.width),
            data: self.data.slice(s![start * hw..(start + len) * hw, ..]).to_owned(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid == other.grid && self.data.dim() == other.data.dim()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?}x{} vs {:?}x{}",
                self.grid,
                self.channels(),
                other.grid,
                other.channels()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: T, other: &Self, b: T) -> Self {
        let mut data = self.data.clone();
        Zip::from(&mut data)
            .and(&other.data)
            .for_each(|x, &y| *x = a * *x + b * y);
        Self { grid: self.grid, data }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> T {
        let n = T::lit(self.data.len() as f64);
        Zip::from(&self.data)
            .and(&other.data)
            .fold(T::zero(), |acc, &a, &b| acc + (a - b).abs())
            / n
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(T::zero(), |acc, &a, &b| acc.max((a - b).abs()))
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Bitwise equality of every entry.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> LatentClip<U> {
        LatentClip {
            grid: self.grid,
            data: self.data.mapv(|x| U::lit(x.as_f64())),
        }
    }
}
