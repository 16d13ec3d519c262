//! Pixel noise injection: a convex blend of Gaussian noise into the
//! interaction and object regions of each copy frame. The background is
//! untouched and no model is involved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};
use crate::geometry::RegionPartition;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Noise strength in the interaction area.
    pub sigma1: f64,
    /// Noise strength in the object area.
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma1: 0.4,
            sigma2: 0.1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange { name, value });
            }
        }
        if self.sigma2 > self.sigma1 {
            tracing::warn!(
                sigma1 = self.sigma1,
                sigma2 = self.sigma2,
                "object noise exceeds interaction noise"
            );
        }
        Ok(())
    }
}

/// The noise field used for frame `index`: one standard normal per pixel and
/// channel, shared by the interaction and object terms.
pub fn frame_noise(seed: u64, index: usize, width: u32, height: u32) -> Vec<f64> {
    rng::normals(seed, index as u64, width as usize * height as usize * 3)
}

/// Blends noise into one frame. Output values are not clamped.
pub fn inject_frame(
    frame: &Frame,
    part: &RegionPartition,
    cfg: &NoiseConfig,
    index: usize,
) -> Result<Frame> {
    if part.dims() != frame.dims() {
        return Err(Error::mismatch(
            "partition/frame",
            format!("{:?}", frame.dims()),
            format!("{:?}", part.dims()),
        ));
    }
    let (w, h) = frame.dims();
    let eps = frame_noise(cfg.seed, index, w, h);
    let mut out = frame.clone();
    let regions = part
        .interaction
        .as_slice()
        .iter()
        .zip(part.object.as_slice());
    for (pix, ((&ia, &obj), noise)) in out
        .as_mut_slice()
        .chunks_exact_mut(3)
        .zip(regions.zip(eps.chunks_exact(3)))
    {
        let sigma = match (ia, obj) {
            (0, 0) => continue,
            (1, _) => cfg.sigma1,
            _ => cfg.sigma2,
        };
        for (v, e) in pix.iter_mut().zip(noise) {
            *v = sigma * e + (1.0 - sigma) * *v;
        }
    }
    Ok(out)
}

/// Applies [`inject_frame`] to every frame of the copy clip.
pub fn inject(copy: &Clip, partitions: &[RegionPartition], cfg: &NoiseConfig) -> Result<Clip> {
    cfg.validate()?;
    if partitions.len() != copy.len() {
        return Err(Error::mismatch("partitions", copy.len(), partitions.len()));
    }
    let frames = copy
        .frames()
        .iter()
        .zip(partitions)
        .enumerate()
        .map(|(i, (f, p))| inject_frame(f, p, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames, copy.fps)
}
