use std::path::{Path, PathBuf};

use crate::compositor::ObjectAsset;
use crate::error::{Error, Result};
use crate::frame::{Clip, Frame, DEFAULT_FPS};
use crate::geometry::{BBox, BinaryMask, BoxDelta};
use crate::io::{
    frame_file_name, save_mask, save_png, write_json_atomic, CasePrompts, TrajectorySpec,
};

/// Writes a case in the canonical layout:
///
/// ```text
/// <dir>/background/frame_0000.png ...
/// <dir>/object.png
/// <dir>/object_mask.png
/// <dir>/trajectory.json
/// <dir>/prompts.json
/// ```
pub fn make_dataset_case(
    dir: &Path,
    background: &Clip,
    asset: &ObjectAsset,
    trajectory: &TrajectorySpec,
    prompts: &CasePrompts,
) -> Result<PathBuf> {
    let traj = trajectory.resolve()?;
    if traj.len() != background.len() || traj.frame_dims() != background.dims() {
        return Err(Error::Validation(format!(
            "trajectory ({} boxes, {:?}) does not match background ({} frames, {:?})",
            traj.len(),
            traj.frame_dims(),
            background.len(),
            background.dims()
        )));
    }
    let bg = dir.join("background");
    std::fs::create_dir_all(&bg).map_err(|e| Error::io(&bg, e))?;
    for (i, f) in background.frames().iter().enumerate() {
        save_png(f, &bg.join(frame_file_name(i)))?;
    }
    save_png(asset.image(), &dir.join("object.png"))?;
    save_mask(asset.mask(), &dir.join("object_mask.png"))?;
    write_json_atomic(&dir.join("trajectory.json"), trajectory)?;
    write_json_atomic(&dir.join("prompts.json"), prompts)?;
    Ok(dir.to_path_buf())
}

pub const SYNTHETIC_CASE_ID: &str = "synthetic-disk";
pub const SYNTHETIC_FRAMES: usize = 16;
pub const SYNTHETIC_SIZE: u32 = 64;

/// Bundled test case: a horizontally scrolling gradient and a shaded red
/// disk moving right with a small vertical wobble.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub background: Clip,
    pub asset: ObjectAsset,
    pub trajectory: TrajectorySpec,
    pub prompts: CasePrompts,
}

pub fn synthetic_case() -> SyntheticCase {
    let s = SYNTHETIC_SIZE;
    let frames = (0..SYNTHETIC_FRAMES)
        .map(|n| {
            Frame::from_fn(s, s, |x, y| {
                let r = ((x as usize + 3 * n) % s as usize) as f64 / (s - 1) as f64;
                [r, y as f64 / (s - 1) as f64, 0.35]
            })
        })
        .collect();
    let background = Clip::new(frames, DEFAULT_FPS).expect("uniform synthetic frames");

    let d = 16u32;
    let c = (d as f64 - 1.0) / 2.0;
    let inside = |x: u32, y: u32| (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= 7.0f64.powi(2);
    let image = Frame::from_fn(d, d, |x, y| {
        if inside(x, y) {
            let shade = 1.0 - 0.04 * (x as f64 + y as f64 - 2.0 * c).abs();
            [0.9 * shade, 0.15, 0.12]
        } else {
            [0.5, 0.5, 0.5]
        }
    });
    let mask = BinaryMask::from_fn(d, d, inside);
    let asset = ObjectAsset::new(image, mask).expect("non-empty disk mask");

    let deltas = (0..SYNTHETIC_FRAMES - 1)
        .map(|i| BoxDelta::shift(2, if i % 4 < 2 { 1 } else { -1 }))
        .collect();
    let trajectory =
        TrajectorySpec::from_deltas(BBox::new(4, 24, d, d), deltas, SYNTHETIC_FRAMES, s, s);
    let prompt = "a red ball rolling across a striped floor".to_string();
    let prompts = CasePrompts {
        case_id: Some(SYNTHETIC_CASE_ID.into()),
        object_prompt: prompt.clone(),
        align_prompt: prompt.clone(),
        optimal: prompt,
        fake: "a blue kite flying over the sea".into(),
    };
    SyntheticCase {
        background,
        asset,
        trajectory,
        prompts,
    }
}

/// Writes the synthetic case under `dir`.
pub fn write_synthetic_case(dir: &Path) -> Result<PathBuf> {
    let c = synthetic_case();
    make_dataset_case(dir, &c.background, &c.asset, &c.trajectory, &c.prompts)
}
