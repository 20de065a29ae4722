use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// `H×W×C` latent stored row-major (channels fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err(
                "LatentGrid::new",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Fill from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Reinterpret a tensor of shape `[H, W, C]`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.into_data()),
            _ => Err(shape_err("LatentGrid::from_tensor", format!("{:?}", t.shape()))),
        }
    }

    /// Rebuild a grid from a `[H·W, C]` token matrix.
    pub fn from_tokens(height: usize, width: usize, tokens: Tensor) -> Result<Self> {
        let (n, c) = tokens.dims2()?;
        if n != height * width {
            return Err(shape_err(
                "LatentGrid::from_tokens",
                format!("{n} tokens for a {height}x{width} grid"),
            ));
        }
        Self::new(height, width, c, tokens.into_data())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// `[H·W, C]` token view (copy).
    pub fn tokens(&self) -> Tensor {
        Tensor::new(&[self.height * self.width, self.channels], self.data.clone())
            .expect("grid length is consistent")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone())
            .expect("grid length is consistent")
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.dims() == other.dims()
    }
}
