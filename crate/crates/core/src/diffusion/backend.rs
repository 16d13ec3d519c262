//! The contract every diffusion backend implements: a noise schedule, a
//! frame codec, a noise predictor and the named activation sites where
//! features can be recorded or overridden during a step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::latent::LatentClip;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};

/// Named activation sites exposed by a backend's noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    SpatialFeature,
    /// Pre-softmax spatial attention scores.
    SpatialAttention,
    /// Pre-softmax temporal attention scores.
    TemporalAttention,
}

impl Site {
    pub const ALL: [Site; 3] = [
        Site::SpatialFeature,
        Site::SpatialAttention,
        Site::TemporalAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::SpatialFeature => "spatial_feature",
            Site::SpatialAttention => "spatial_attention",
            Site::TemporalAttention => "temporal_attention",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown site `{s}`")))
    }
}

/// Conditioning signal: a prompt and, for image-to-video models, the first
/// frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Condition {
    pub text: String,
    pub first_frame: Option<Frame>,
}

impl Condition {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            first_frame: None,
        }
    }

    pub fn with_first_frame(mut self, frame: Frame) -> Self {
        self.first_frame = Some(frame);
        self
    }
}

/// Observer/override point for site activations.
///
/// The predictor calls [`SiteHook::on_site`] right after computing a site's
/// activation for timestep `t` and uses whatever the hook leaves in `values`.
pub trait SiteHook {
    fn on_site(&mut self, t: usize, site: Site, values: &mut Vec<f64>);
}

/// Hook that leaves every activation untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl SiteHook for NoHook {
    fn on_site(&mut self, _: usize, _: Site, _: &mut Vec<f64>) {}
}

/// Runs two hooks in order; the second sees what the first left behind.
pub struct HookChain<'a> {
    pub first: &'a mut dyn SiteHook,
    pub second: &'a mut dyn SiteHook,
}

impl SiteHook for HookChain<'_> {
    fn on_site(&mut self, t: usize, site: Site, values: &mut Vec<f64>) {
        self.first.on_site(t, site, values);
        self.second.on_site(t, site, values);
    }
}

/// Records every activation it sees, in call order.
#[derive(Debug, Default, Clone)]
pub struct TraceHook {
    pub entries: Vec<(usize, Site, Vec<f64>)>,
}

impl TraceHook {
    pub fn get(&self, t: usize, site: Site) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(tt, s, _)| *tt == t && *s == site)
            .map(|(_, _, v)| v.as_slice())
    }
}

impl SiteHook for TraceHook {
    fn on_site(&mut self, t: usize, site: Site, values: &mut Vec<f64>) {
        self.entries.push((t, site, values.clone()));
    }
}

/// Frame ↔ latent mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Codec {
    /// Latent = the RGB pixels, channel-major. Exact round trip.
    Identity,
    /// Average-pools `factor`×`factor` tiles. Channels 0..3 carry RGB; any
    /// further channel carries the tile's mean intensity. Decoding repeats
    /// each tile's RGB.
    Pool { factor: u32, channels: usize },
}

impl Codec {
    pub fn channels(&self) -> usize {
        match *self {
            Codec::Identity => 3,
            Codec::Pool { channels, .. } => channels,
        }
    }

    pub fn factor(&self) -> u32 {
        match *self {
            Codec::Identity => 1,
            Codec::Pool { factor, .. } => factor,
        }
    }

    pub fn latent_dims(&self, width: u32, height: u32) -> Result<(usize, usize)> {
        let f = self.factor();
        if !width.is_multiple_of(f) || !height.is_multiple_of(f) {
            return Err(Error::InvalidInput(format!(
                "frame {width}x{height} is not divisible by the latent factor {f}"
            )));
        }
        Ok(((height / f) as usize, (width / f) as usize))
    }

    /// Encodes a frame into a `C × h × w` slice.
    pub fn encode(&self, frame: &Frame) -> Result<Vec<f64>> {
        let (w, h) = frame.dims();
        let (lh, lw) = self.latent_dims(w, h)?;
        let cells = lh * lw;
        let px = frame.as_slice();
        match *self {
            Codec::Identity => {
                let mut out = vec![0.0; 3 * cells];
                for (i, p) in px.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        out[c * cells + i] = p[c];
                    }
                }
                Ok(out)
            }
            Codec::Pool { factor, channels } => {
                if channels < 3 {
                    return Err(Error::InvalidInput(
                        "pool codec needs at least 3 channels".into(),
                    ));
                }
                let f = factor as usize;
                let norm = (f * f) as f64;
                let mut out = vec![0.0; channels * cells];
                for ty in 0..lh {
                    for tx in 0..lw {
                        let mut acc = [0.0; 3];
                        for y in ty * f..(ty + 1) * f {
                            for x in tx * f..(tx + 1) * f {
                                let o = (y * w as usize + x) * 3;
                                for c in 0..3 {
                                    acc[c] += px[o + c];
                                }
                            }
                        }
                        let cell = ty * lw + tx;
                        let mean = [acc[0] / norm, acc[1] / norm, acc[2] / norm];
                        for c in 0..3 {
                            out[c * cells + cell] = mean[c];
                        }
                        let luma = (mean[0] + mean[1] + mean[2]) / 3.0;
                        for c in 3..channels {
                            out[c * cells + cell] = luma;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Decodes a `C × h × w` slice.
    pub fn decode(&self, latent: &[f64], lh: usize, lw: usize) -> Result<Frame> {
        let cells = lh * lw;
        if latent.len() != self.channels() * cells {
            return Err(Error::mismatch(
                "latent slice",
                self.channels() * cells,
                latent.len(),
            ));
        }
        let f = self.factor() as usize;
        let (w, h) = ((lw * f) as u32, (lh * f) as u32);
        Ok(Frame::from_fn(w, h, |x, y| {
            let cell = (y as usize / f) * lw + x as usize / f;
            [latent[cell], latent[cells + cell], latent[2 * cells + cell]]
        }))
    }
}

/// A diffusion model as seen by the pipeline.
pub trait DiffusionBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Full training-time schedule; inference grids are subsampled from it.
    fn schedule(&self) -> &NoiseSchedule;

    fn codec(&self) -> Codec;

    /// Sites this backend exposes to hooks.
    fn sites(&self) -> &[Site];

    /// True if the predictor mixes information across frames. Per-frame
    /// (image model) stages require `false`.
    fn couples_frames(&self) -> bool;

    /// Noise estimate for latents `z` at timestep `t` of the active inference
    /// grid. Deterministic in its inputs.
    fn predict_noise(
        &self,
        z: &LatentClip,
        t: usize,
        cond: &Condition,
        hook: &mut dyn SiteHook,
    ) -> Result<LatentClip>;

    fn has_site(&self, site: Site) -> bool {
        self.sites().contains(&site)
    }
}

pub fn encode_clip(backend: &dyn DiffusionBackend, clip: &Clip) -> Result<LatentClip> {
    let codec = backend.codec();
    let (w, h) = clip.dims();
    let (lh, lw) = codec.latent_dims(w, h)?;
    let slices = clip
        .frames()
        .iter()
        .map(|f| codec.encode(f))
        .collect::<Result<Vec<_>>>()?;
    LatentClip::stack(codec.channels(), lh, lw, slices)
}

pub fn decode_clip(backend: &dyn DiffusionBackend, z: &LatentClip, fps: f64) -> Result<Clip> {
    let codec = backend.codec();
    if z.channels() != codec.channels() {
        return Err(Error::mismatch(
            "latent channels",
            codec.channels(),
            z.channels(),
        ));
    }
    let frames = (0..z.frames())
        .map(|n| codec.decode(z.frame(n), z.height(), z.width()))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames, fps)
}
