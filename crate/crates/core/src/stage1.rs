//! Stage 1: per-frame latent noise injection.
//!
//! Each frame of the copy clip is inverted with an image backend, the
//! inverted latents inside the (latent-resolution) interaction area are
//! replaced with fresh noise, and the result is denoised under the object
//! prompt into the coarse clip.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    decode_clip, encode_clip, invert_on, sample_on, Condition, DiffusionBackend, LatentClip,
    NoHook, DEFAULT_INFERENCE_STEPS,
};
use crate::error::{Error, Result};
use crate::frame::Clip;
use crate::geometry::{BinaryMask, RegionPartition};
use crate::rng;

/// Streams `NOISE_STREAM_BASE + n` carry the replacement noise for frame `n`,
/// keeping them apart from the pixel-noise streams of the same seed.
const NOISE_STREAM_BASE: u64 = 1 << 32;

/// A binary mask at latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask(BinaryMask);

impl LatentMask {
    pub fn new(mask: BinaryMask) -> Self {
        Self(mask)
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width() as usize
    }

    pub fn height(&self) -> usize {
        self.0.height() as usize
    }

    /// Cell `i` in row-major order.
    pub fn cell(&self, i: usize) -> bool {
        self.0.as_slice()[i] != 0
    }
}

/// Downsamples by `factor`; a latent cell is set when any pixel of its tile is.
pub fn rescale_mask(m: &BinaryMask, factor: u32) -> Result<LatentMask> {
    let (w, h) = m.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "mask {w}x{h} is not divisible by the latent factor {factor}"
        )));
    }
    let mut out = BinaryMask::zeros(w / factor, h / factor);
    for y in 0..h {
        for x in 0..w {
            if m.get(x, y) {
                out.set(x / factor, y / factor, true);
            }
        }
    }
    Ok(LatentMask(out))
}

/// Replaces masked cells (all channels) with unit-variance seeded noise.
pub fn inject_latent(xi: &LatentClip, masks: &[LatentMask], seed: u64) -> Result<LatentClip> {
    inject_latent_scaled(xi, masks, seed, 1.0)
}

/// Like [`inject_latent`] with the replacement noise multiplied by `scale`.
pub fn inject_latent_scaled(
    xi: &LatentClip,
    masks: &[LatentMask],
    seed: u64,
    scale: f64,
) -> Result<LatentClip> {
    if masks.len() != xi.frames() {
        return Err(Error::mismatch("latent masks", xi.frames(), masks.len()));
    }
    let (c, cells) = (xi.channels(), xi.cells());
    let mut out = xi.clone();
    for (n, m) in masks.iter().enumerate() {
        if (m.width(), m.height()) != (xi.width(), xi.height()) {
            return Err(Error::mismatch(
                "latent mask",
                format!("{}x{}", xi.width(), xi.height()),
                format!("{}x{}", m.width(), m.height()),
            ));
        }
        if m.0.is_empty() {
            continue;
        }
        let noise = rng::normals(seed, NOISE_STREAM_BASE + n as u64, c * cells);
        let frame = out.frame_mut(n);
        for ch in 0..c {
            for p in (0..cells).filter(|&p| m.cell(p)) {
                frame[ch * cells + p] = scale * noise[ch * cells + p];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LnInjConfig {
    pub steps: usize,
    pub seed: u64,
    /// How many grid steps to invert before injecting; full depth if unset.
    pub invert_steps: Option<usize>,
    /// Invert under the object prompt instead of unconditionally.
    pub conditional_inversion: bool,
    /// Fail when a frame's interaction area is empty.
    pub strict: bool,
}

impl Default for LnInjConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_INFERENCE_STEPS,
            seed: 0,
            invert_steps: None,
            conditional_inversion: false,
            strict: false,
        }
    }
}

impl LnInjConfig {
    pub fn depth(&self) -> Result<usize> {
        let depth = self.invert_steps.unwrap_or(self.steps);
        if self.steps == 0 || depth == 0 || depth > self.steps {
            return Err(Error::InvalidInput(format!(
                "invert steps {depth} must be in 1..={} (steps)",
                self.steps
            )));
        }
        Ok(depth)
    }
}

/// Everything stage 1 computes, for debugging dumps.
#[derive(Debug, Clone)]
pub struct LnInjOutput {
    pub clip: Clip,
    pub inverted: LatentClip,
    /// Latents after injection: the starting point of decoding.
    pub start: LatentClip,
    pub masks: Vec<LatentMask>,
}

pub fn run_ln_inj(
    copy: &Clip,
    partitions: &[RegionPartition],
    cond_obj: &Condition,
    backend: &dyn DiffusionBackend,
    cfg: &LnInjConfig,
) -> Result<Clip> {
    run_ln_inj_detailed(copy, partitions, cond_obj, backend, cfg).map(|o| o.clip)
}

pub fn run_ln_inj_detailed(
    copy: &Clip,
    partitions: &[RegionPartition],
    cond_obj: &Condition,
    backend: &dyn DiffusionBackend,
    cfg: &LnInjConfig,
) -> Result<LnInjOutput> {
    if backend.couples_frames() {
        return Err(Error::Precondition(format!(
            "backend `{}` couples frames; stage 1 needs a per-frame backend",
            backend.id()
        )));
    }
    if partitions.len() != copy.len() {
        return Err(Error::mismatch("partitions", copy.len(), partitions.len()));
    }
    if cfg.strict {
        if let Some(i) = partitions.iter().position(|p| p.interaction.is_empty()) {
            return Err(Error::Precondition(format!(
                "frame {i} has an empty interaction area"
            )));
        }
    }
    let depth = cfg.depth()?;
    let factor = backend.codec().factor();
    let masks = partitions
        .iter()
        .map(|p| rescale_mask(&p.interaction, factor))
        .collect::<Result<Vec<_>>>()?;

    let grid = backend.schedule().subsample(cfg.steps)?;
    let z0 = encode_clip(backend, copy)?;
    let inv_cond = if cfg.conditional_inversion {
        cond_obj.clone()
    } else {
        Condition::unconditional()
    };
    let inverted = invert_on(&grid, &z0, depth, &inv_cond, backend, &mut NoHook)?;
    let scale = (1.0 - grid.alpha_bar(depth)?).sqrt();
    let start = inject_latent_scaled(&inverted, &masks, cfg.seed, scale)?;
    let z = sample_on(&grid, &start, depth, cond_obj, backend, &mut NoHook)?;
    let clip = decode_clip(backend, &z, copy.fps)?;
    tracing::debug!(frames = clip.len(), depth, "stage 1 done");
    Ok(LnInjOutput {
        clip,
        inverted,
        start,
        masks,
    })
}
