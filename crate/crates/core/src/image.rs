//! Image and cine containers. Pixel (row r, col c) samples the continuous
//! plane at (x = c, y = r); intensities are stored f32.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// A single-slice image sequence with consistent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Cine {
    pub id: String,
    pub pixel_spacing_mm: f64,
    frames: Vec<Image>,
}

impl Cine {
    pub fn new(id: impl Into<String>, pixel_spacing_mm: f64, frames: Vec<Image>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("cine needs at least one frame".into()));
        }
        if !(pixel_spacing_mm.is_finite() && pixel_spacing_mm > 0.0) {
            return Err(Error::Domain(format!(
                "pixel spacing must be positive, got {pixel_spacing_mm}"
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Shape("cine frames differ in size".into()));
        }
        Ok(Cine { id: id.into(), pixel_spacing_mm, frames })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Image {
        &self.frames[t]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}
