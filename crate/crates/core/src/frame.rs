//! RGB frames and clips in floating point.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

/// An RGB image stored row-major, three interleaved channels per pixel.
///
/// Values loaded from 8-bit files lie in `[0, 1]`; intermediate stages may
/// leave that range (pixel noise is not clamped) and values are only clamped
/// when written back to 8-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Frame {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::mismatch("frame data", expected, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, bbox: BBox) -> Result<Frame> {
        bbox.check_in_frame(self.width, self.height)?;
        Ok(Frame::from_fn(bbox.w, bbox.h, |x, y| {
            self.pixel(bbox.x0 + x, bbox.y0 + y)
        }))
    }

    /// Zeroes every pixel where `mask` is 0.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Frame> {
        if mask.dims() != self.dims() {
            return Err(Error::mismatch(
                "frame/mask",
                format!("{:?}", self.dims()),
                format!("{:?}", mask.dims()),
            ));
        }
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_exact_mut(3).zip(mask.as_slice()) {
            if m == 0 {
                px.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Bilinear resize with pixel-center alignment and edge clamping, no
    /// prefilter. Same-size resizes return an exact copy.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Frame {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |d: u32, scale: f64, len: u32| {
            let f = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = f.floor() as u32;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, f - i0 as f64)
        };
        Frame::from_fn(width, height, |x, y| {
            let (x0, x1, tx) = axis(x, sx, self.width);
            let (y0, y1, ty) = axis(y, sy, self.height);
            let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
            let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
            let mut out = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bot = c[ch] + (d[ch] - c[ch]) * tx;
                out[ch] = top + (bot - top) * ty;
            }
            out
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An ordered sequence of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
    pub fps: f64,
}

pub const DEFAULT_FPS: f64 = 8.0;

impl Clip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("clip has no frames".into()))?;
        let dims = first.dims();
        if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::mismatch(
                "clip frames",
                format!("{dims:?}"),
                format!("{:?}", bad.dims()),
            ));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.frames[0].dims()
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(Frame::is_finite)
    }

    pub fn max_abs_diff(&self, other: &Clip) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Clip) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                sum += (x - y).abs();
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_same_size_is_exact() {
        let f = Frame::from_fn(5, 3, |x, y| [x as f64 * 0.1, y as f64 * 0.3, 0.7]);
        assert_eq!(f.resize_bilinear(5, 3), f);
    }

    #[test]
    fn bilinear_preserves_constants_and_range() {
        let f = Frame::filled(3, 7, [0.25, 0.5, 1.0]);
        let r = f.resize_bilinear(11, 2);
        assert!(r.as_slice().chunks(3).all(|p| p == [0.25, 0.5, 1.0]));

        let g = Frame::from_fn(4, 4, |x, y| [((x + y) % 2) as f64, 0.0, 1.0]);
        let r = g.resize_bilinear(9, 13);
        assert!(r.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bilinear_upsample_2x_matches_hand_values() {
        // 2x1 ramp [0, 1] upsampled to 4x1: centers map to -0.25, 0.25, 0.75, 1.25.
        let f = Frame::from_vec(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = f.resize_bilinear(4, 1);
        let reds: Vec<f64> = r.as_slice().chunks(3).map(|p| p[0]).collect();
        assert_eq!(reds, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn clip_rejects_mixed_dims_and_empty() {
        assert!(Clip::new(vec![], 8.0).is_err());
        let a = Frame::filled(2, 2, [0.0; 3]);
        let b = Frame::filled(3, 2, [0.0; 3]);
        assert!(Clip::new(vec![a, b], 8.0).is_err());
    }
}
