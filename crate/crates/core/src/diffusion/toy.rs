//! Deterministic toy backends for desk-scale verification.
//!
//! | id           | codec            | predictor                                   |
//! |--------------|------------------|---------------------------------------------|
//! | `toy-zero`   | identity         | `ε ≡ 0`                                     |
//! | `toy-const`  | identity         | `ε ≡ k`                                     |
//! | `toy-linear` | 8× pool, 4 ch    | channel mix (+ spatial/temporal attention)  |
//! | `toy-replay` | identity         | replays a fixed ε per frame                 |
//!
//! The replay predictor ignores its input, so DDIM inversion under it traces
//! exactly `√ᾱ_t·z₀ + √(1−ᾱ_t)·ε` and sampling undoes inversion exactly.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::backend::{Codec, Condition, DiffusionBackend, Site, SiteHook};
use super::latent::LatentClip;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CONSTANT: f64 = 0.1;
pub const DEFAULT_LINEAR_SEED: u64 = 0x5eed;
/// Frobenius norm of the channel-mixing matrix; bounds its spectral norm.
const MIX_NORM: f64 = 0.5;
const ATTENTION_WEIGHT: f64 = 0.25;
const CONDITION_GAIN: f64 = 0.05;

/// Whether a backend plays the per-frame image model or the video model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Image,
    Video,
}

#[derive(Debug)]
enum Predictor {
    Zero,
    Constant(f64),
    Linear(LinearParams),
    Replay(Replay),
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    channels: usize,
    /// Row-major `C × C`.
    mix: Vec<f64>,
    query: Vec<f64>,
    key: Vec<f64>,
    spatial: bool,
    temporal: bool,
}

impl LinearParams {
    fn new(channels: usize, seed: u64, role: BackendRole) -> Self {
        let cc = channels * channels;
        let mut mix = rng::normals(seed, 0, cc);
        let norm = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
        mix.iter_mut().for_each(|v| *v *= MIX_NORM / norm);
        let scale = 1.0 / (channels as f64).sqrt();
        let query = rng::normals(seed, 1, cc)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let key = rng::normals(seed, 2, cc)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let video = role == BackendRole::Video;
        Self {
            channels,
            mix,
            query,
            key,
            spatial: video,
            temporal: video,
        }
    }

    /// Channel-mixing matrix, row-major `C × C`.
    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    /// Applies a `C × C` matrix to every cell of `z`.
    fn apply(&self, m: &[f64], z: &LatentClip) -> Vec<f64> {
        let c = self.channels;
        let cells = z.cells();
        let mut out = vec![0.0; z.as_slice().len()];
        for n in 0..z.frames() {
            let zf = z.frame(n);
            let of = &mut out[n * c * cells..(n + 1) * c * cells];
            for co in 0..c {
                for ci in 0..c {
                    let a = m[co * c + ci];
                    let src = &zf[ci * cells..(ci + 1) * cells];
                    for (o, s) in of[co * cells..(co + 1) * cells].iter_mut().zip(src) {
                        *o += a * s;
                    }
                }
            }
        }
        out
    }
}

/// Noise fields keyed by (frame, length).
type NoiseCache = Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>;

#[derive(Debug)]
enum Replay {
    Seeded { seed: u64, cache: NoiseCache },
    Table(LatentClip),
}

impl Replay {
    fn noise(&self, frame: usize, len: usize) -> Result<Arc<Vec<f64>>> {
        match self {
            Replay::Seeded { seed, cache } => {
                let mut cache = cache.lock().unwrap_or_else(|e| e.into_inner());
                Ok(cache
                    .entry((frame, len))
                    .or_insert_with(|| Arc::new(rng::normals(*seed, frame as u64, len)))
                    .clone())
            }
            Replay::Table(table) => {
                if frame >= table.frames() || table.frame_len() != len {
                    return Err(Error::mismatch(
                        "replay table",
                        format!("frame {frame} with {len} values"),
                        format!("{:?}", table.shape()),
                    ));
                }
                Ok(Arc::new(table.frame(frame).to_vec()))
            }
        }
    }
}

/// A toy backend: a schedule, a codec and one of the toy predictors.
#[derive(Debug)]
pub struct ToyBackend {
    id: String,
    schedule: NoiseSchedule,
    codec: Codec,
    predictor: Predictor,
    sites: Vec<Site>,
}

impl ToyBackend {
    fn build(id: &str, codec: Codec, predictor: Predictor, sites: Vec<Site>) -> Self {
        Self {
            id: id.to_string(),
            schedule: NoiseSchedule::default(),
            codec,
            predictor,
            sites,
        }
    }

    pub fn zero() -> Self {
        Self::build(
            "toy-zero",
            Codec::Identity,
            Predictor::Zero,
            vec![Site::SpatialFeature],
        )
    }

    pub fn constant(k: f64) -> Self {
        Self::build(
            "toy-const",
            Codec::Identity,
            Predictor::Constant(k),
            vec![Site::SpatialFeature],
        )
    }

    /// Toy linear backend with the default 8× pooling codec.
    pub fn linear(role: BackendRole) -> Self {
        Self::linear_with(
            role,
            Codec::Pool {
                factor: 8,
                channels: 4,
            },
            DEFAULT_LINEAR_SEED,
        )
    }

    /// The image role mixes channels per cell only. The video role adds
    /// spatial attention within each frame and temporal attention across
    /// frames, and exposes their score arrays as sites.
    pub fn linear_with(role: BackendRole, codec: Codec, seed: u64) -> Self {
        let params = LinearParams::new(codec.channels(), seed, role);
        let sites = match role {
            BackendRole::Image => vec![Site::SpatialFeature],
            BackendRole::Video => Site::ALL.to_vec(),
        };
        Self::build("toy-linear", codec, Predictor::Linear(params), sites)
    }

    /// Replays seeded standard-normal noise, one field per frame index.
    pub fn replay(seed: u64) -> Self {
        Self::build(
            "toy-replay",
            Codec::Identity,
            Predictor::Replay(Replay::Seeded {
                seed,
                cache: Mutex::new(HashMap::new()),
            }),
            vec![Site::SpatialFeature],
        )
    }

    /// Replays an explicit noise table (shape must match the latents).
    pub fn replay_table(table: LatentClip) -> Self {
        Self::build(
            "toy-replay",
            Codec::Identity,
            Predictor::Replay(Replay::Table(table)),
            vec![Site::SpatialFeature],
        )
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Replaces the codec; identity and replay predictors keep their
    /// behaviour, the linear predictor is regenerated for the new channel
    /// count from the default seed.
    pub fn with_codec(mut self, codec: Codec) -> Self {
        if let Predictor::Linear(p) = &self.predictor {
            let role = if p.temporal {
                BackendRole::Video
            } else {
                BackendRole::Image
            };
            self.predictor = Predictor::Linear(LinearParams::new(
                codec.channels(),
                DEFAULT_LINEAR_SEED,
                role,
            ));
        }
        self.codec = codec;
        self
    }

    pub fn linear_params(&self) -> Option<&LinearParams> {
        match &self.predictor {
            Predictor::Linear(p) => Some(p),
            _ => None,
        }
    }

    /// Per-channel bias contributed by the condition.
    fn condition_bias(&self, cond: &Condition) -> Result<Vec<f64>> {
        let c = self.codec.channels();
        let mut bias = vec![0.0; c];
        if !cond.text.is_empty() {
            let digest = Sha256::digest(cond.text.as_bytes());
            let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let dir = rng::normals(seed, 0, c);
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            for (b, d) in bias.iter_mut().zip(dir) {
                *b += CONDITION_GAIN * d / norm;
            }
        }
        if let Some(first) = &cond.first_frame {
            let z = self.codec.encode(first)?;
            let cells = z.len() / c;
            for (ch, b) in bias.iter_mut().enumerate() {
                let mean = z[ch * cells..(ch + 1) * cells].iter().sum::<f64>() / cells as f64;
                *b += CONDITION_GAIN * mean;
            }
        }
        Ok(bias)
    }
}

fn run_hook(hook: &mut dyn SiteHook, t: usize, site: Site, values: &mut Vec<f64>) -> Result<()> {
    let len = values.len();
    hook.on_site(t, site, values);
    if values.len() != len {
        return Err(Error::mismatch(site.name(), len, values.len()));
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-cell query/key vectors, laid out `[n][cell][channel]`.
fn project(m: &[f64], z: &LatentClip) -> Vec<f64> {
    let (c, cells) = (z.channels(), z.cells());
    let mut out = vec![0.0; z.frames() * cells * c];
    for n in 0..z.frames() {
        let zf = z.frame(n);
        for p in 0..cells {
            let o = (n * cells + p) * c;
            for co in 0..c {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += m[co * c + ci] * zf[ci * cells + p];
                }
                out[o + co] = acc;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyBackend {
    fn linear_predict(
        &self,
        params: &LinearParams,
        z: &LatentClip,
        t: usize,
        cond: &Condition,
        hook: &mut dyn SiteHook,
    ) -> Result<LatentClip> {
        let (nf, c, cells) = (z.frames(), z.channels(), z.cells());
        if c != params.channels {
            return Err(Error::mismatch("latent channels", params.channels, c));
        }
        let mut feature = params.apply(&params.mix, z);
        run_hook(hook, t, Site::SpatialFeature, &mut feature)?;
        let mut eps = feature.clone();

        if params.spatial || params.temporal {
            let q = project(&params.query, z);
            let k = project(&params.key, z);

            if params.spatial {
                let mut scores = vec![0.0; nf * cells * cells];
                for n in 0..nf {
                    for p in 0..cells {
                        let qp = &q[(n * cells + p) * c..][..c];
                        for r in 0..cells {
                            let kr = &k[(n * cells + r) * c..][..c];
                            scores[(n * cells + p) * cells + r] = dot(qp, kr);
                        }
                    }
                }
                run_hook(hook, t, Site::SpatialAttention, &mut scores)?;
                for n in 0..nf {
                    let fv = &feature[n * c * cells..(n + 1) * c * cells];
                    for p in 0..cells {
                        let row = &mut scores[(n * cells + p) * cells..][..cells];
                        softmax_in_place(row);
                        for ch in 0..c {
                            let acc = dot(row, &fv[ch * cells..(ch + 1) * cells]);
                            eps[(n * c + ch) * cells + p] += ATTENTION_WEIGHT * acc;
                        }
                    }
                }
            }

            if params.temporal {
                let mut scores = vec![0.0; cells * nf * nf];
                for p in 0..cells {
                    for n in 0..nf {
                        let qn = &q[(n * cells + p) * c..][..c];
                        for m in 0..nf {
                            let km = &k[(m * cells + p) * c..][..c];
                            scores[(p * nf + n) * nf + m] = dot(qn, km);
                        }
                    }
                }
                run_hook(hook, t, Site::TemporalAttention, &mut scores)?;
                for p in 0..cells {
                    for n in 0..nf {
                        let row = &mut scores[(p * nf + n) * nf..][..nf];
                        softmax_in_place(row);
                        for ch in 0..c {
                            let acc: f64 = row
                                .iter()
                                .enumerate()
                                .map(|(m, w)| w * feature[(m * c + ch) * cells + p])
                                .sum();
                            eps[(n * c + ch) * cells + p] += ATTENTION_WEIGHT * acc;
                        }
                    }
                }
            }
        }

        let bias = self.condition_bias(cond)?;
        if bias.iter().any(|&b| b != 0.0) {
            for n in 0..nf {
                for (ch, b) in bias.iter().enumerate() {
                    let start = (n * c + ch) * cells;
                    eps[start..start + cells].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        let [n, c, h, w] = z.shape();
        LatentClip::from_vec(n, c, h, w, eps)
    }
}

impl DiffusionBackend for ToyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn codec(&self) -> Codec {
        self.codec
    }

    fn sites(&self) -> &[Site] {
        &self.sites
    }

    fn couples_frames(&self) -> bool {
        matches!(&self.predictor, Predictor::Linear(p) if p.temporal)
    }

    fn predict_noise(
        &self,
        z: &LatentClip,
        t: usize,
        cond: &Condition,
        hook: &mut dyn SiteHook,
    ) -> Result<LatentClip> {
        let [n, c, h, w] = z.shape();
        let mut out = match &self.predictor {
            Predictor::Linear(p) => return self.linear_predict(p, z, t, cond, hook),
            Predictor::Zero => vec![0.0; z.as_slice().len()],
            Predictor::Constant(k) => vec![*k; z.as_slice().len()],
            Predictor::Replay(r) => {
                let mut v = Vec::with_capacity(z.as_slice().len());
                for frame in 0..n {
                    v.extend_from_slice(&r.noise(frame, z.frame_len())?);
                }
                v
            }
        };
        run_hook(hook, t, Site::SpatialFeature, &mut out)?;
        LatentClip::from_vec(n, c, h, w, out)
    }
}
