//! On-disk formats: PNG frame sequences, mask PNGs, raw float dumps with a
//! JSON header, trajectory and prompt specs, and atomic JSON writes.
//!
//! A clip directory holds `frame_0000.png`, `frame_0001.png`, ... for viewing
//! and, when written by this crate, `clip.json` + `clip.bin` with the exact
//! float values. Loading prefers the raw pair so stage boundaries are
//! lossless.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::LatentClip;
use crate::error::{Error, Result};
use crate::frame::{Clip, Frame, DEFAULT_FPS};
use crate::geometry::{generate_trajectory, BBox, BinaryMask, BoxDelta, TrajectorySequence};

pub const RAW_DTYPE: &str = "f64-le";
const RAW_CLIP_STEM: &str = "clip";

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let p = frame.pixel(x, y);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(Frame::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        [
            p[0] as f64 / 255.0,
            p[1] as f64 / 255.0,
            p[2] as f64 / 255.0,
        ]
    }))
}

/// Writes 0/255 grayscale.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([if mask.get(x, y) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads any image; pixels with luma above 127 are set.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    Ok(BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        img.get_pixel(x, y).0[0] > 127
    }))
}

pub fn save_masks(masks: &[BinaryMask], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        save_mask(m, &dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

pub fn load_masks(dir: &Path) -> Result<Vec<BinaryMask>> {
    frame_paths(dir)?.iter().map(|p| load_mask(p)).collect()
}

/// Sorted `frame_*.png` paths in `dir`.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no frame_*.png files in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// Header of a raw float dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_hash: Option<String>,
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_raw(dir: &Path, stem: &str, header: &RawHeader, data: &[f64]) -> Result<()> {
    let expected: usize = header.shape.iter().product();
    if expected != data.len() {
        return Err(Error::mismatch("raw dump length", expected, data.len()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    write_json_atomic(&dir.join(format!("{stem}.json")), header)
}

pub fn read_raw(dir: &Path, stem: &str) -> Result<(RawHeader, Vec<f64>)> {
    let header: RawHeader = read_json(&dir.join(format!("{stem}.json")))?;
    if header.dtype != RAW_DTYPE {
        return Err(Error::InvalidInput(format!(
            "unsupported dtype `{}`",
            header.dtype
        )));
    }
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected: usize = header.shape.iter().product();
    if bytes.len() != expected * 8 {
        return Err(Error::mismatch("raw dump bytes", expected * 8, bytes.len()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}

pub fn save_latents(
    dir: &Path,
    stem: &str,
    z: &LatentClip,
    schedule_hash: Option<String>,
) -> Result<()> {
    let header = RawHeader {
        shape: z.shape().to_vec(),
        dtype: RAW_DTYPE.into(),
        fps: None,
        schedule_hash,
    };
    write_raw(dir, stem, &header, z.as_slice())
}

pub fn load_latents(dir: &Path, stem: &str) -> Result<LatentClip> {
    let (h, data) = read_raw(dir, stem)?;
    let [n, c, hh, w]: [usize; 4] = h
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidInput(format!("latent shape {:?} is not 4-d", h.shape)))?;
    LatentClip::from_vec(n, c, hh, w, data)
}

/// Writes PNG frames plus the exact raw dump.
pub fn save_clip(clip: &Clip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_png(f, &dir.join(frame_file_name(i)))?;
    }
    let (w, h) = clip.dims();
    let header = RawHeader {
        shape: vec![clip.len(), h as usize, w as usize, 3],
        dtype: RAW_DTYPE.into(),
        fps: Some(clip.fps),
        schedule_hash: None,
    };
    let data: Vec<f64> = clip
        .frames()
        .iter()
        .flat_map(|f| f.as_slice().iter().copied())
        .collect();
    write_raw(dir, RAW_CLIP_STEM, &header, &data)
}

/// Loads the raw dump if present, otherwise the PNG frames.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    if dir.join(format!("{RAW_CLIP_STEM}.json")).exists() {
        let (h, data) = read_raw(dir, RAW_CLIP_STEM)?;
        let [n, hh, w, c]: [usize; 4] = h
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("clip shape {:?} is not 4-d", h.shape)))?;
        if c != 3 || n == 0 {
            return Err(Error::InvalidInput(format!("bad clip shape {:?}", h.shape)));
        }
        let len = hh * w * 3;
        let frames = data
            .chunks_exact(len)
            .map(|chunk| Frame::from_vec(w as u32, hh as u32, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        return Clip::new(frames, h.fps.unwrap_or(DEFAULT_FPS));
    }
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| load_png(p))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames, DEFAULT_FPS)
}

/// Trajectory file: either explicit `boxes` or `init` + `deltas` + `frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<BBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<BoxDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BBox>>,
}

impl TrajectorySpec {
    pub fn from_deltas(
        init: BBox,
        deltas: Vec<BoxDelta>,
        frames: usize,
        width: u32,
        height: u32,
    ) -> Self {
        Self {
            width,
            height,
            frames: Some(frames),
            init: Some(init),
            deltas,
            boxes: None,
        }
    }

    pub fn from_sequence(traj: &TrajectorySequence) -> Self {
        let (width, height) = traj.frame_dims();
        Self {
            width,
            height,
            frames: None,
            init: None,
            deltas: Vec::new(),
            boxes: Some(traj.boxes().to_vec()),
        }
    }

    pub fn resolve(&self) -> Result<TrajectorySequence> {
        match (&self.boxes, self.init) {
            (Some(boxes), None) => TrajectorySequence::new(boxes.clone(), self.width, self.height),
            (None, Some(init)) => {
                let n = self.frames.ok_or_else(|| {
                    Error::Validation("trajectory with `init` needs `frames`".into())
                })?;
                generate_trajectory(init, &self.deltas, n, self.width, self.height)
            }
            _ => Err(Error::Validation(
                "trajectory needs exactly one of `boxes` or `init`".into(),
            )),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Per-case prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrompts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    /// Stage-1 prompt.
    pub object_prompt: String,
    /// Stage-2 prompt.
    pub align_prompt: String,
    #[serde(default)]
    pub optimal: String,
    #[serde(default)]
    pub fake: String,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty-prints to a temporary sibling and renames it into place.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash over the sorted relative paths and contents of every file under `dir`.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let p = dir.join(&rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_round_trips_exactly_through_raw_dump() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3)
            .map(|i| {
                Frame::from_fn(5, 4, |x, y| {
                    [x as f64 * 0.11 + i as f64, -0.3, y as f64 / 7.0]
                })
            })
            .collect();
        let clip = Clip::new(frames, 12.0).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        assert_eq!(load_clip(dir.path()).unwrap(), clip);
        assert_eq!(frame_paths(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn png_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_fn(4, 4, |x, y| [x as f64 / 3.0, y as f64 / 3.0, 1.7]);
        let p = dir.path().join("f.png");
        save_png(&f, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in back.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        save_masks(std::slice::from_ref(&m), dir.path()).unwrap();
        assert_eq!(load_masks(dir.path()).unwrap(), vec![m]);
    }

    #[test]
    fn latents_round_trip_and_bad_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let z = LatentClip::from_vec(1, 2, 1, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap();
        save_latents(dir.path(), "z", &z, Some("abc".into())).unwrap();
        assert_eq!(load_latents(dir.path(), "z").unwrap(), z);
        let (h, _) = read_raw(dir.path(), "z").unwrap();
        assert_eq!(h.schedule_hash.as_deref(), Some("abc"));

        let bad = RawHeader {
            dtype: "f32".into(),
            ..h
        };
        write_json_atomic(&dir.path().join("z.json"), &bad).unwrap();
        assert!(load_latents(dir.path(), "z").is_err());
    }

    #[test]
    fn trajectory_specs_resolve() {
        let spec: TrajectorySpec = serde_json::from_str(
            r#"{"width":32,"height":32,"frames":3,"init":{"x0":0,"y0":0,"w":8,"h":8},"deltas":[{"dx":4}]}"#,
        )
        .unwrap();
        let t = spec.resolve().unwrap();
        assert_eq!(t.boxes()[2], BBox::new(8, 0, 8, 8));
        let again = TrajectorySpec::from_sequence(&t).resolve().unwrap();
        assert_eq!(again, t);

        let both = TrajectorySpec {
            boxes: Some(vec![BBox::new(0, 0, 1, 1)]),
            ..spec.clone()
        };
        assert!(both.resolve().is_err());
        let no_frames = TrajectorySpec {
            frames: None,
            ..spec
        };
        assert!(no_frames.resolve().is_err());
    }

    #[test]
    fn dir_hash_sees_content_changes() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a/b.txt"), b"one").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, hash_dir(dir.path()).unwrap());
        write_atomic(&dir.path().join("a/b.txt"), b"two").unwrap();
        assert_ne!(h1, hash_dir(dir.path()).unwrap());
    }
}
