use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file};

/// `C×H×W` pixel array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "image",
                format!("{channels}x{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn linf_dist(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn l2_dist(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, &self.shape(), &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (shape, data) = read_tensor_file(path)?;
        match shape.as_slice() {
            &[c, h, w] => Image::new(c, h, w, data),
            other => Err(Error::Format(format!(
                "{}: expected a rank-3 image, got shape {other:?}",
                path.display()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        let a = Image::zeros(1, 1, 2);
        let b = a.with_data(vec![0.3, -0.4]);
        assert!((a.linf_dist(&b) - 0.4).abs() < 1e-7);
        assert!((a.l2_dist(&b) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vft");
        let img = Image::new(3, 2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        img.save(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
