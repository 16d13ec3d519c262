//! Boxes, binary masks, trajectories and the mask algebra used by every
//! later stage.
//!
//! A trajectory is one box per frame. Rasterizing it gives the per-frame
//! trajectory masks; resizing the object mask into each box gives the merged
//! masks; their XOR is the interaction area. The three disjoint regions
//! (background, interaction, object) form a [`RegionPartition`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in integer pixel coordinates. `(x0, y0)` is the inclusive
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, w: u32, h: u32) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn x1(&self) -> u32 {
        self.x0 + self.w
    }

    pub fn y1(&self) -> u32 {
        self.y0 + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    /// Errors unless the box is non-degenerate and lies inside a
    /// `width`x`height` frame.
    pub fn check_in_frame(&self, width: u32, height: u32) -> Result<()> {
        let fits = self.w >= 1
            && self.h >= 1
            && self.x0 as u64 + self.w as u64 <= width as u64
            && self.y0 as u64 + self.h as u64 <= height as u64;
        if fits {
            Ok(())
        } else {
            Err(Error::OutOfFrame {
                bbox: self.to_string(),
                width,
                height,
            })
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x0, self.y0, self.w, self.h)
    }
}

/// Per-frame change applied by [`generate_trajectory`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxDelta {
    #[serde(default)]
    pub dx: i32,
    #[serde(default)]
    pub dy: i32,
    #[serde(default)]
    pub dw: i32,
    #[serde(default)]
    pub dh: i32,
}

impl BoxDelta {
    pub fn shift(dx: i32, dy: i32) -> Self {
        Self {
            dx,
            dy,
            ..Default::default()
        }
    }
}

/// Dense single-channel mask, one byte per pixel, values exactly 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![1; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds a mask from row-major values; any nonzero value counts as 1.
    pub fn from_values(width: u32, height: u32, values: &[u8]) -> Result<Self> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(Error::mismatch("mask data", expected, values.len()));
        }
        Ok(Self {
            width,
            height,
            data: values.iter().map(|&v| (v != 0) as u8).collect(),
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

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[(y * self.width + x) as usize] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight bounding box of the 1-pixels, or `None` for an empty mask.
    pub fn support_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// Pointwise `self <= other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn crop(&self, bbox: BBox) -> Result<BinaryMask> {
        bbox.check_in_frame(self.width, self.height)?;
        Ok(BinaryMask::from_fn(bbox.w, bbox.h, |x, y| {
            self.get(bbox.x0 + x, bbox.y0 + y)
        }))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::mismatch(
                "mask pair",
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Source index for nearest-neighbor resampling with pixel-center alignment.
pub(crate) fn nearest_index(dst: u32, dst_len: u32, src_len: u32) -> u32 {
    let idx = ((2 * dst as u64 + 1) * src_len as u64) / (2 * dst_len as u64);
    (idx as u32).min(src_len - 1)
}

/// Nearest-neighbor resize of a mask to `width`x`height`.
pub fn resize_nearest(mask: &BinaryMask, width: u32, height: u32) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| {
        mask.get(
            nearest_index(x, width, mask.width),
            nearest_index(y, height, mask.height),
        )
    })
}

/// Per-frame boxes describing where the inserted object should be.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySequence {
    boxes: Vec<BBox>,
    frame_width: u32,
    frame_height: u32,
}

impl TrajectorySequence {
    pub fn new(boxes: Vec<BBox>, frame_width: u32, frame_height: u32) -> Result<Self> {
        if frame_width == 0 || frame_height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame dims must be positive, got {frame_width}x{frame_height}"
            )));
        }
        if boxes.is_empty() {
            return Err(Error::InvalidInput("trajectory has no boxes".into()));
        }
        for b in &boxes {
            b.check_in_frame(frame_width, frame_height)?;
        }
        Ok(Self {
            boxes,
            frame_width,
            frame_height,
        })
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frame_dims(&self) -> (u32, u32) {
        (self.frame_width, self.frame_height)
    }
}

/// Disjoint background / interaction / object regions of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    pub background: BinaryMask,
    pub interaction: BinaryMask,
    pub object: BinaryMask,
}

impl RegionPartition {
    pub fn dims(&self) -> (u32, u32) {
        self.background.dims()
    }

    /// The trajectory mask this partition was built from (`interaction ∪ object`).
    pub fn trajectory(&self) -> BinaryMask {
        self.background.complement()
    }

    /// Checks sum-to-one and pairwise disjointness at every pixel.
    pub fn check(&self) -> Result<()> {
        let d = self.dims();
        if self.interaction.dims() != d || self.object.dims() != d {
            return Err(Error::mismatch(
                "region partition",
                format!("{d:?}"),
                format!("{:?}/{:?}", self.interaction.dims(), self.object.dims()),
            ));
        }
        let b = self.background.as_slice();
        let i = self.interaction.as_slice();
        let o = self.object.as_slice();
        for k in 0..b.len() {
            if b[k] + i[k] + o[k] != 1 {
                return Err(Error::Precondition(format!(
                    "regions do not partition pixel {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Generates a trajectory by applying per-frame deltas to `init`.
///
/// `deltas` may be empty (static box), a single entry (applied every frame)
/// or exactly `n_frames - 1` entries. After each delta the size is clamped to
/// `[1, frame]` and the position so that the box stays inside the frame.
pub fn generate_trajectory(
    init: BBox,
    deltas: &[BoxDelta],
    n_frames: usize,
    frame_width: u32,
    frame_height: u32,
) -> Result<TrajectorySequence> {
    if frame_width == 0 || frame_height == 0 {
        return Err(Error::InvalidInput(format!(
            "frame dims must be positive, got {frame_width}x{frame_height}"
        )));
    }
    if n_frames == 0 {
        return Err(Error::InvalidInput("n_frames must be at least 1".into()));
    }
    init.check_in_frame(frame_width, frame_height)?;
    if deltas.len() > 1 && deltas.len() != n_frames - 1 {
        return Err(Error::mismatch(
            "trajectory deltas",
            n_frames - 1,
            deltas.len(),
        ));
    }

    let mut boxes = Vec::with_capacity(n_frames);
    boxes.push(init);
    let (fw, fh) = (frame_width as i64, frame_height as i64);
    for i in 0..n_frames - 1 {
        let d = match deltas.len() {
            0 => BoxDelta::default(),
            1 => deltas[0],
            _ => deltas[i],
        };
        let prev = boxes[i];
        let w = (prev.w as i64 + d.dw as i64).clamp(1, fw);
        let h = (prev.h as i64 + d.dh as i64).clamp(1, fh);
        let x0 = (prev.x0 as i64 + d.dx as i64).clamp(0, fw - w);
        let y0 = (prev.y0 as i64 + d.dy as i64).clamp(0, fh - h);
        boxes.push(BBox::new(x0 as u32, y0 as u32, w as u32, h as u32));
    }
    TrajectorySequence::new(boxes, frame_width, frame_height)
}

/// Mask with ones exactly inside `bbox`.
pub fn rasterize_box(bbox: BBox, width: u32, height: u32) -> Result<BinaryMask> {
    bbox.check_in_frame(width, height)?;
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        bbox.contains(x, y)
    }))
}

/// Per-frame trajectory masks.
pub fn rasterize(traj: &TrajectorySequence) -> Vec<BinaryMask> {
    let (w, h) = traj.frame_dims();
    traj.boxes()
        .iter()
        .map(|&b| BinaryMask::from_fn(w, h, |x, y| b.contains(x, y)))
        .collect()
}

/// Resizes the tight crop of `obj_mask`'s support into `bbox` (nearest
/// neighbor) and places it in an otherwise empty frame-sized mask.
pub fn merge_mask(
    obj_mask: &BinaryMask,
    bbox: BBox,
    frame_width: u32,
    frame_height: u32,
) -> Result<BinaryMask> {
    bbox.check_in_frame(frame_width, frame_height)?;
    let crop = obj_mask
        .support_bbox()
        .ok_or(Error::EmptyMask("object mask"))?;
    let mut merged = BinaryMask::zeros(frame_width, frame_height);
    for dy in 0..bbox.h {
        let sy = crop.y0 + nearest_index(dy, bbox.h, crop.h);
        for dx in 0..bbox.w {
            let sx = crop.x0 + nearest_index(dx, bbox.w, crop.w);
            if obj_mask.get(sx, sy) {
                merged.set(bbox.x0 + dx, bbox.y0 + dy, true);
            }
        }
    }
    if merged.is_empty() {
        return Err(Error::EmptyMask("merged mask after resize"));
    }
    Ok(merged)
}

/// Interaction area: pointwise XOR of the merged and trajectory masks.
pub fn interaction_mask(merge: &BinaryMask, traj: &BinaryMask) -> Result<BinaryMask> {
    merge.xor(traj)
}

/// Splits a frame into background (outside the trajectory box), interaction
/// (box minus object) and object regions.
pub fn partition(merge: &BinaryMask, traj: &BinaryMask) -> Result<RegionPartition> {
    if merge.dims() != traj.dims() {
        return Err(Error::mismatch(
            "partition masks",
            format!("{:?}", traj.dims()),
            format!("{:?}", merge.dims()),
        ));
    }
    if !merge.is_subset_of(traj) {
        return Err(Error::Precondition(
            "merged mask extends outside the trajectory mask".into(),
        ));
    }
    Ok(RegionPartition {
        background: traj.complement(),
        interaction: interaction_mask(merge, traj)?,
        object: merge.clone(),
    })
}
