//! Raster containers shared by the warping, photometric, dataset and I/O code.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `height × width × channels` interleaved `f64` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// `[1, H, W, C]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, self.channels], self.data.clone())
            .expect("image dimensions are consistent")
    }

    /// Stack same-sized images into a `[B, H, W, C]` tensor.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width, im.channels) != (first.height, first.width, first.channels) {
                return Err(Error::invalid("images in a batch must share dimensions"));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), first.height, first.width, first.channels], data)
    }

    /// Split a `[B, H, W, C]` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("expected NHWC tensor, got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        Ok(t.data()
            .chunks(per.max(1))
            .take(s[0])
            .map(|chunk| Image {
                height: s[1],
                width: s[2],
                channels: s[3],
                data: chunk.to_vec(),
            })
            .collect())
    }
}

/// Dense class labels. Classes are `1..=C`; `0` marks an ignored pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const IGNORE_LABEL: u8 = 0;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }
}
