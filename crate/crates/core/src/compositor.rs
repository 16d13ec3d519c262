//! Builds the copy sequence: the object is cut out of its image and hard
//! pasted into every background frame along the trajectory.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};
use crate::geometry::{self, BBox, BinaryMask, RegionPartition, TrajectorySequence};

/// Object image plus its segmentation mask.
#[derive(Debug, Clone)]
pub struct ObjectAsset {
    image: Frame,
    mask: BinaryMask,
}

impl ObjectAsset {
    pub fn new(image: Frame, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::mismatch(
                "object image/mask",
                format!("{:?}", image.dims()),
                format!("{:?}", mask.dims()),
            ));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask("object mask"));
        }
        Ok(Self { image, mask })
    }

    pub fn image(&self) -> &Frame {
        &self.image
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// The extracted object cropped to the mask support. This is the
    /// reference image used by the box-fidelity metric.
    pub fn reference_crop(&self) -> Result<Frame> {
        let support = self
            .mask
            .support_bbox()
            .ok_or(Error::EmptyMask("object mask"))?;
        extract_object(self)?.crop(support)
    }
}

/// `image ⊙ mask`: zero outside the mask, unchanged inside.
pub fn extract_object(asset: &ObjectAsset) -> Result<Frame> {
    asset.image.masked(&asset.mask)
}

/// Pastes `obj` into `background` at `bbox`.
///
/// The tight crop of `obj_mask`'s support is resized into the box, bilinear
/// for pixels and nearest neighbor for the mask. Returns the composited frame
/// and the merged mask; wherever the merged mask is 0 the output is the
/// background pixel, bit for bit.
pub fn paste(
    obj: &Frame,
    obj_mask: &BinaryMask,
    background: &Frame,
    bbox: BBox,
) -> Result<(Frame, BinaryMask)> {
    if obj.dims() != obj_mask.dims() {
        return Err(Error::mismatch(
            "object/mask",
            format!("{:?}", obj.dims()),
            format!("{:?}", obj_mask.dims()),
        ));
    }
    let (fw, fh) = background.dims();
    bbox.check_in_frame(fw, fh)?;
    let support = obj_mask
        .support_bbox()
        .ok_or(Error::EmptyMask("object mask"))?;
    let merged = geometry::merge_mask(obj_mask, bbox, fw, fh)?;
    let resized = obj.crop(support)?.resize_bilinear(bbox.w, bbox.h);

    let mut out = background.clone();
    for y in bbox.y0..bbox.y1() {
        for x in bbox.x0..bbox.x1() {
            if merged.get(x, y) {
                out.set_pixel(x, y, resized.pixel(x - bbox.x0, y - bbox.y0));
            }
        }
    }
    Ok((out, merged))
}

/// Pastes the object into every background frame and derives the per-frame
/// region partitions.
pub fn make_copy_sequence(
    asset: &ObjectAsset,
    background: &Clip,
    traj: &TrajectorySequence,
) -> Result<(Clip, Vec<RegionPartition>)> {
    if traj.len() != background.len() {
        return Err(Error::mismatch(
            "trajectory length",
            background.len(),
            traj.len(),
        ));
    }
    if traj.frame_dims() != background.dims() {
        return Err(Error::mismatch(
            "trajectory frame dims",
            format!("{:?}", background.dims()),
            format!("{:?}", traj.frame_dims()),
        ));
    }
    let obj = extract_object(asset)?;
    let traj_masks = geometry::rasterize(traj);

    let per_frame: Vec<(Frame, RegionPartition)> = background
        .frames()
        .par_iter()
        .zip(traj.boxes().par_iter())
        .zip(traj_masks.par_iter())
        .map(|((bg, &bbox), traj_mask)| {
            let (frame, merged) = paste(&obj, &asset.mask, bg, bbox)?;
            let part = geometry::partition(&merged, traj_mask)?;
            Ok((frame, part))
        })
        .collect::<Result<_>>()?;

    let (frames, parts): (Vec<_>, Vec<_>) = per_frame.into_iter().unzip();
    Ok((Clip::new(frames, background.fps)?, parts))
}
