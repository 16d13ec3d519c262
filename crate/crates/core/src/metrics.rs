//! Evaluation metrics behind an embedder contract: Clip-I, Clip-T, DINO on
//! box crops and the adversarial prompt-matching score.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::registry::{AdapterKind, PluginRegistry};
use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};
use crate::geometry::TrajectorySequence;
use crate::rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
pub const TOY_EMBEDDER: &str = "toy";

/// Maps frames, prompts and clips into a shared unit-norm space.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn image_embed(&self, frame: &Frame) -> Vec<f64>;

    fn text_embed(&self, text: &str) -> Vec<f64>;

    /// Mean of the frame embeddings, renormalized.
    fn video_embed(&self, clip: &Clip) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for f in clip.frames() {
            for (a, v) in acc.iter_mut().zip(self.image_embed(f)) {
                *a += v;
            }
        }
        normalize(acc)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

const GRID: usize = 8;
const IMAGE_FEATURES: usize = GRID * GRID * 3 + 1;

/// Deterministic stand-in embedder.
///
/// Images: an 8×8 area-average thumbnail plus a constant bias term, through
/// a seeded Gaussian projection. Text: sum of per-token Gaussian vectors
/// seeded by each token's SHA-256.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    dim: usize,
    projection: Vec<f64>,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(64, 0xe4b)
    }
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            projection: rng::normals(seed, 0, dim * IMAGE_FEATURES),
        }
    }

    fn thumbnail(frame: &Frame) -> Vec<f64> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let mut sum = vec![0.0; GRID * GRID * 3];
        let mut count = vec![0usize; GRID * GRID];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * GRID / h) * GRID + x * GRID / w;
                let p = frame.pixel(x as u32, y as u32);
                for c in 0..3 {
                    sum[cell * 3 + c] += p[c];
                }
                count[cell] += 1;
            }
        }
        for cy in 0..GRID {
            for cx in 0..GRID {
                let cell = cy * GRID + cx;
                if count[cell] == 0 {
                    // Frames smaller than the grid: sample the covering pixel.
                    let p = frame.pixel((cx * w / GRID) as u32, (cy * h / GRID) as u32);
                    sum[cell * 3..cell * 3 + 3].copy_from_slice(&p);
                } else {
                    let n = count[cell] as f64;
                    sum[cell * 3..cell * 3 + 3].iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        sum.push(1.0);
        sum
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_seed(token: &str) -> u64 {
    let digest = Sha256::digest(token.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &str {
        TOY_EMBEDDER
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn image_embed(&self, frame: &Frame) -> Vec<f64> {
        let feat = Self::thumbnail(frame);
        let out = self
            .projection
            .chunks_exact(IMAGE_FEATURES)
            .map(|row| row.iter().zip(&feat).map(|(a, b)| a * b).sum())
            .collect();
        normalize(out)
    }

    fn text_embed(&self, text: &str) -> Vec<f64> {
        let mut toks = tokens(text);
        if toks.is_empty() {
            toks.push(String::new());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &toks {
            for (a, v) in acc.iter_mut().zip(rng::normals(token_seed(t), 0, self.dim)) {
                *a += v;
            }
        }
        normalize(acc)
    }
}

pub fn create_embedder(name: &str, registry: &PluginRegistry) -> Result<Box<dyn Embedder>> {
    match name {
        TOY_EMBEDDER => Ok(Box::new(ToyEmbedder::default())),
        n if n.starts_with("external:") => Err(registry.resolve_external(n, AdapterKind::Embedder)),
        n => Err(Error::UnknownEmbedder(n.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub case_id: String,
    pub optimal: String,
    pub fake: String,
}

/// Optimal/fake prompt pairs for every evaluated case.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptLibrary {
    pub entries: Vec<PromptEntry>,
}

impl PromptLibrary {
    pub fn new(entries: Vec<PromptEntry>) -> Result<Self> {
        let lib = Self { entries };
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lib: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate case id `{}`",
                    e.case_id
                )));
            }
            if e.optimal.trim().is_empty() || e.fake.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "case `{}` has an empty prompt",
                    e.case_id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, case_id: &str) -> Option<&PromptEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    /// Optimal then fake prompt of every entry, in library order.
    pub fn combined(&self) -> Vec<&str> {
        self.entries
            .iter()
            .flat_map(|e| [e.optimal.as_str(), e.fake.as_str()])
            .collect()
    }
}

/// Mean per-frame cosine between prediction and reference, ×100.
pub fn clip_i(pred: &Clip, reference: &Clip, emb: &dyn Embedder) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::mismatch(
            "reference clip length",
            pred.len(),
            reference.len(),
        ));
    }
    let total: f64 = pred
        .frames()
        .iter()
        .zip(reference.frames())
        .map(|(a, b)| cosine(&emb.image_embed(a), &emb.image_embed(b)))
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

/// Mean per-frame cosine between each frame and the prompt, ×100.
pub fn clip_t(pred: &Clip, prompt: &str, emb: &dyn Embedder) -> f64 {
    let t = emb.text_embed(prompt);
    let total: f64 = pred
        .frames()
        .iter()
        .map(|f| cosine(&emb.image_embed(f), &t))
        .sum();
    100.0 * total / pred.len() as f64
}

/// Mean cosine between each frame's box crop (resized to the object image)
/// and the object image.
pub fn dino_bbox(
    pred: &Clip,
    traj: &TrajectorySequence,
    object_image: &Frame,
    emb: &dyn Embedder,
) -> Result<f64> {
    if traj.len() != pred.len() {
        return Err(Error::mismatch("trajectory length", pred.len(), traj.len()));
    }
    if traj.frame_dims() != pred.dims() {
        return Err(Error::mismatch(
            "trajectory frame dims",
            format!("{:?}", pred.dims()),
            format!("{:?}", traj.frame_dims()),
        ));
    }
    let reference = emb.image_embed(object_image);
    let (ow, oh) = object_image.dims();
    let mut total = 0.0;
    for (frame, bbox) in pred.frames().iter().zip(traj.boxes()) {
        if bbox.w == 0 || bbox.h == 0 {
            return Err(Error::InvalidInput(format!("degenerate box {bbox}")));
        }
        let crop = frame.crop(*bbox)?.resize_bilinear(ow, oh);
        total += cosine(&emb.image_embed(&crop), &reference);
    }
    Ok(total / pred.len() as f64)
}

/// Softmax over `logit_scale · cos(video, prompt)` for every prompt of the
/// combined library list.
pub fn prompt_distribution(
    video: &[f64],
    library: &PromptLibrary,
    emb: &dyn Embedder,
    logit_scale: f64,
) -> Result<Vec<f64>> {
    if library.entries.is_empty() {
        return Err(Error::Validation("prompt library is empty".into()));
    }
    let logits: Vec<f64> = library
        .combined()
        .iter()
        .map(|p| logit_scale * cosine(video, &emb.text_embed(p)))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// Probability the case's optimal prompt receives among all library prompts.
pub fn adv_viclip(
    pred: &Clip,
    case_id: &str,
    library: &PromptLibrary,
    emb: &dyn Embedder,
    logit_scale: f64,
) -> Result<f64> {
    adv_viclip_from_embedding(&emb.video_embed(pred), case_id, library, emb, logit_scale)
}

pub fn adv_viclip_from_embedding(
    video: &[f64],
    case_id: &str,
    library: &PromptLibrary,
    emb: &dyn Embedder,
    logit_scale: f64,
) -> Result<f64> {
    let idx = library
        .entries
        .iter()
        .position(|e| e.case_id == case_id)
        .ok_or_else(|| Error::MissingCase(case_id.to_string()))?;
    Ok(prompt_distribution(video, library, emb, logit_scale)?[2 * idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino: f64,
    pub adv_viclip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub embedder: String,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino: f64,
    pub adv_viclip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: MetricConfig,
    pub cases: Vec<CaseMetrics>,
    pub mean: MetricMeans,
}

impl MetricReport {
    pub fn new(config: MetricConfig, cases: Vec<CaseMetrics>) -> Self {
        let n = cases.len().max(1) as f64;
        let adv: Vec<f64> = cases.iter().filter_map(|c| c.adv_viclip).collect();
        let mean = MetricMeans {
            clip_i: cases.iter().map(|c| c.clip_i).sum::<f64>() / n,
            clip_t: cases.iter().map(|c| c.clip_t).sum::<f64>() / n,
            dino: cases.iter().map(|c| c.dino).sum::<f64>() / n,
            adv_viclip: (!adv.is_empty()).then(|| adv.iter().sum::<f64>() / adv.len() as f64),
        };
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            cases,
            mean,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }
}

/// Inputs for scoring one case.
pub struct CaseInputs<'a> {
    pub case_id: &'a str,
    pub pred: &'a Clip,
    /// The copy clip the prediction is compared against for Clip-I.
    pub reference: &'a Clip,
    pub prompt: &'a str,
    pub trajectory: &'a TrajectorySequence,
    /// Object crop used as the DINO reference.
    pub object_image: &'a Frame,
    pub library: Option<&'a PromptLibrary>,
}

pub fn evaluate_case(
    inputs: &CaseInputs<'_>,
    emb: &dyn Embedder,
    logit_scale: f64,
) -> Result<CaseMetrics> {
    let adv = match inputs.library {
        Some(lib) => Some(adv_viclip(
            inputs.pred,
            inputs.case_id,
            lib,
            emb,
            logit_scale,
        )?),
        None => None,
    };
    Ok(CaseMetrics {
        case_id: inputs.case_id.to_string(),
        clip_i: clip_i(inputs.pred, inputs.reference, emb)?,
        clip_t: clip_t(inputs.pred, inputs.prompt, emb),
        dino: dino_bbox(inputs.pred, inputs.trajectory, inputs.object_image, emb)?,
        adv_viclip: adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::DEFAULT_FPS;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn random_clip(n: usize, w: u32, h: u32, seed: u64) -> Clip {
        let frames = (0..n)
            .map(|i| {
                let v = rng::normals(seed, i as u64, (w * h * 3) as usize);
                Frame::from_vec(w, h, v.iter().map(|x| 0.5 + 0.2 * x).collect()).unwrap()
            })
            .collect();
        Clip::new(frames, DEFAULT_FPS).unwrap()
    }

    /// Embeds by the mean red value into one of two axes.
    struct AxisEmbedder;

    impl Embedder for AxisEmbedder {
        fn id(&self) -> &str {
            "axis"
        }
        fn dim(&self) -> usize {
            2
        }
        fn image_embed(&self, f: &Frame) -> Vec<f64> {
            if f.pixel(0, 0)[0] > 0.5 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            }
        }
        fn text_embed(&self, t: &str) -> Vec<f64> {
            if t.contains("red") {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            }
        }
    }

    fn lib(entries: &[(&str, &str, &str)]) -> PromptLibrary {
        PromptLibrary::new(
            entries
                .iter()
                .map(|(c, o, f)| PromptEntry {
                    case_id: c.to_string(),
                    optimal: o.to_string(),
                    fake: f.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_embeddings_are_unit_norm() {
        let e = ToyEmbedder::default();
        for f in random_clip(3, 13, 5, 1).frames() {
            let v = e.image_embed(f);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let black = e.image_embed(&Frame::filled(4, 4, [0.0; 3]));
        assert!((black.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        for t in ["a red ball", "", "!!"] {
            let v = e.text_embed(t);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(e.text_embed("A Red  ball"), e.text_embed("a red ball"));
        assert_ne!(e.text_embed("a red ball"), e.text_embed("a blue ball"));
    }

    #[test]
    fn clip_i_cases() {
        let e = ToyEmbedder::default();
        let a = random_clip(4, 16, 16, 2);
        let b = random_clip(4, 16, 16, 3);
        assert!((clip_i(&a, &a, &e).unwrap() - 100.0).abs() < 1e-9);

        let red = Clip::new(vec![Frame::filled(2, 2, [1.0, 0.0, 0.0])], DEFAULT_FPS).unwrap();
        let blue = Clip::new(vec![Frame::filled(2, 2, [0.0, 0.0, 1.0])], DEFAULT_FPS).unwrap();
        assert_eq!(clip_i(&red, &blue, &AxisEmbedder).unwrap(), 0.0);

        let mut expect = 0.0;
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            let (va, vb) = (e.image_embed(fa), e.image_embed(fb));
            let mut dot = 0.0;
            for i in 0..va.len() {
                dot += va[i] * vb[i];
            }
            expect += dot;
        }
        expect = expect / 4.0 * 100.0;
        assert!((clip_i(&a, &b, &e).unwrap() - expect).abs() < 1e-9);
        assert!(clip_i(&a, &random_clip(3, 16, 16, 2), &e).is_err());
    }

    #[test]
    fn clip_t_cases() {
        let red = Clip::new(vec![Frame::filled(2, 2, [1.0, 0.0, 0.0]); 2], DEFAULT_FPS).unwrap();
        assert_eq!(clip_t(&red, "red", &AxisEmbedder), 100.0);
        assert_eq!(clip_t(&red, "blue", &AxisEmbedder), 0.0);

        let e = ToyEmbedder::default();
        let c = random_clip(3, 8, 8, 4);
        let t = e.text_embed("a moving disk");
        let expect = c
            .frames()
            .iter()
            .map(|f| {
                e.image_embed(f)
                    .iter()
                    .zip(&t)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0
            * 100.0;
        assert!((clip_t(&c, "a moving disk", &e) - expect).abs() < 1e-9);
    }

    #[test]
    fn dino_bbox_cases() {
        let e = ToyEmbedder::default();
        let object = Frame::from_fn(4, 4, |x, y| [x as f64 / 4.0, 0.8, y as f64 / 4.0]);
        let boxes = vec![BBox::new(2, 3, 4, 4), BBox::new(6, 5, 4, 4)];
        let traj = TrajectorySequence::new(boxes.clone(), 12, 12).unwrap();
        let mut frames = Vec::new();
        for b in &boxes {
            let mut f = Frame::filled(12, 12, [0.1, 0.2, 0.3]);
            for y in 0..4 {
                for x in 0..4 {
                    f.set_pixel(b.x0 + x, b.y0 + y, object.pixel(x, y));
                }
            }
            frames.push(f);
        }
        let pred = Clip::new(frames, DEFAULT_FPS).unwrap();
        assert!((dino_bbox(&pred, &traj, &object, &e).unwrap() - 1.0).abs() < 1e-12);

        let mut zeroed = pred.clone().into_frames();
        for (f, b) in zeroed.iter_mut().zip(&boxes) {
            for y in 0..4 {
                for x in 0..4 {
                    f.set_pixel(b.x0 + x, b.y0 + y, [0.0; 3]);
                }
            }
        }
        let zeroed = Clip::new(zeroed, DEFAULT_FPS).unwrap();
        let expect = cosine(
            &e.image_embed(&Frame::filled(4, 4, [0.0; 3])),
            &e.image_embed(&object),
        );
        assert!((dino_bbox(&zeroed, &traj, &object, &e).unwrap() - expect).abs() < 1e-12);

        let single = Clip::new(vec![zeroed.frames()[0].clone()], DEFAULT_FPS).unwrap();
        let t1 = TrajectorySequence::new(vec![boxes[0]], 12, 12).unwrap();
        assert!((dino_bbox(&single, &t1, &object, &e).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn adv_viclip_cases() {
        let red = Clip::new(vec![Frame::filled(2, 2, [1.0, 0.0, 0.0])], DEFAULT_FPS).unwrap();
        // Both prompts map to the same axis: equal similarity.
        let tie = lib(&[("c", "red car", "red bus")]);
        assert!((adv_viclip(&red, "c", &tie, &AxisEmbedder, 100.0).unwrap() - 0.5).abs() < 1e-12);

        let dominant = lib(&[("c", "red car", "a bus")]);
        assert!(adv_viclip(&red, "c", &dominant, &AxisEmbedder, 100.0).unwrap() > 1.0 - 1e-12);
        assert!(matches!(
            adv_viclip(&red, "zzz", &dominant, &AxisEmbedder, 100.0),
            Err(Error::MissingCase(_))
        ));
        assert!(
            prompt_distribution(&[1.0, 0.0], &PromptLibrary::default(), &AxisEmbedder, 1.0)
                .is_err()
        );
    }

    #[test]
    fn library_validation() {
        let bad = vec![
            PromptEntry {
                case_id: "a".into(),
                optimal: "x".into(),
                fake: "y".into(),
            };
            2
        ];
        assert!(PromptLibrary::new(bad).is_err());
        let json = r#"[{"case_id":"a","optimal":"x","fake":""}]"#;
        let l: PromptLibrary = serde_json::from_str(json).unwrap();
        assert!(l.validate().is_err());
    }

    #[test]
    fn unknown_embedders() {
        let reg = PluginRegistry::default();
        assert!(create_embedder("toy", &reg).is_ok());
        assert!(matches!(
            create_embedder("clip", &reg),
            Err(Error::UnknownEmbedder(_))
        ));
        assert!(matches!(
            create_embedder("external:vc", &reg),
            Err(Error::UnknownEmbedder(_))
        ));
    }

    fn prompt_pool() -> Vec<String> {
        [
            "a red car",
            "a blue boat",
            "a cat on grass",
            "clouds",
            "a dog jumping",
            "trees",
            "a bird",
            "night sky",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    proptest! {
        #[test]
        fn distribution_sums_to_one_and_is_order_free(seed in 0u64..500, scale in 1.0f64..200.0) {
            let e = ToyEmbedder::default();
            let pool = prompt_pool();
            let entries: Vec<(String, String, String)> = (0..4)
                .map(|i| (format!("case{i}"), pool[2 * i].clone(), pool[2 * i + 1].clone()))
                .collect();
            let refs: Vec<(&str, &str, &str)> = entries.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())).collect();
            let l = lib(&refs);
            let v = e.video_embed(&random_clip(2, 8, 8, seed));
            let d = prompt_distribution(&v, &l, &e, scale).unwrap();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|p| *p > 0.0 && *p < 1.0));

            let mut rev = refs.clone();
            rev.reverse();
            let lr = lib(&rev);
            for (id, _, _) in &refs {
                let a = adv_viclip_from_embedding(&v, id, &l, &e, scale).unwrap();
                let b = adv_viclip_from_embedding(&v, id, &lr, &e, scale).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            let argmax = |d: &[f64]| d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let d2 = prompt_distribution(&v, &l, &e, scale * 3.7).unwrap();
            prop_assert_eq!(argmax(&d), argmax(&d2));
        }

        #[test]
        fn clip_i_self_is_hundred(seed in 0u64..1000, w in 1u32..20, h in 1u32..20) {
            let c = random_clip(2, w, h, seed);
            prop_assert!((clip_i(&c, &c, &ToyEmbedder::default()).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
