//! Image frames and clips.
//!
//! Frames hold (H, W, 3) f64 tensors. Generator output lives in (-1, 1)
//! (tanh range); PNG serialization quantizes that range to 16-bit, and
//! `quantized()` applies the same rounding in memory so cached values can be
//! made bit-consistent with what a reader of the files would see.

use ndarray::Array3;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub data: Array3<f64>,
}

impl Frame {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    /// (height, width)
    pub fn shape(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    pub fn validate_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical("frame contains non-finite values".into()))
        }
    }

    fn to_u16(v: f64) -> u16 {
        (((v + 1.0) / 2.0 * 65535.0).round()).clamp(0.0, 65535.0) as u16
    }

    fn from_u16(v: u16) -> f64 {
        v as f64 / 65535.0 * 2.0 - 1.0
    }

    /// The frame as it would read back after a save/load round trip.
    pub fn quantized(&self) -> Frame {
        Frame::new(self.data.mapv(|v| Self::from_u16(Self::to_u16(v))))
    }

    /// Write as 16-bit RGB PNG, mapping [-1, 1] to [0, 65535].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.shape();
        let mut buf: Vec<u16> = Vec::with_capacity(h * w * 3);
        for v in self.data.iter() {
            buf.push(Self::to_u16(*v));
        }
        let img: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape");
        img.save(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
            .into_rgb16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let data = Array3::from_shape_vec((h, w, 3), raw.iter().map(|&v| Self::from_u16(v)).collect())
            .expect("raw buffer matches dimensions");
        Ok(Self { data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: u32) -> Self {
        Self { frames, fps }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
