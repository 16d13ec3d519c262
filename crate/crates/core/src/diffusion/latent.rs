use crate::error::{Error, Result};

/// Latents for a whole clip, laid out `N × C × h × w` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentClip {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_vec(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = frames * channels * height * width;
        if data.len() != expected {
            return Err(Error::mismatch("latent data", expected, data.len()));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks per-frame `C × h × w` slices.
    pub fn stack(
        channels: usize,
        height: usize,
        width: usize,
        slices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let per = channels * height * width;
        let frames = slices.len();
        let mut data = Vec::with_capacity(frames * per);
        for s in slices {
            if s.len() != per {
                return Err(Error::mismatch("latent slice", per, s.len()));
            }
            data.extend(s);
        }
        Self::from_vec(frames, channels, height, width, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Cells per frame per channel (`h·w`).
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        let l = self.frame_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [f64] {
        let l = self.frame_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn same_shape(&self, other: &LatentClip) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                "latent shape",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentClip) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}
