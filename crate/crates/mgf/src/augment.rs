//! Deterministic dataset expansion for image/mask pairs.
//!
//! Every input pair is expanded by the full enumeration
//! {0°, 90°, 180°, 270°} x {none, h-flip, v-flip} x sliding crops, with the
//! mask transformed identically to its image. Rotation is clockwise: a pixel
//! at (r, c) of an h-row image lands at (c, h - 1 - r).

use crate::error::{MgfError, Result};
use crate::img::{BinaryMask, GrayImage};

#[derive(Clone, Copy, Debug)]
pub struct AugmentSpec {
    /// Side length of the square sliding crop.
    pub crop: usize,
    /// Step between crop origins.
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

const FLIPS: [Flip; 3] = [Flip::None, Flip::Horizontal, Flip::Vertical];

pub struct Augmented {
    pub images: Vec<GrayImage>,
    pub masks: Vec<BinaryMask>,
    /// Output pairs per input pair.
    pub expansion_factor: usize,
}

/// Map a source pixel through `quarter_turns` clockwise rotations then a
/// flip, returning its position in the transformed frame.
pub fn map_pixel(
    quarter_turns: usize,
    flip: Flip,
    h: usize,
    w: usize,
    r: usize,
    c: usize,
) -> (usize, usize) {
    let (mut h, mut w, mut r, mut c) = (h, w, r, c);
    for _ in 0..quarter_turns % 4 {
        let (nr, nc) = (c, h - 1 - r);
        std::mem::swap(&mut h, &mut w);
        r = nr;
        c = nc;
    }
    match flip {
        Flip::None => (r, c),
        Flip::Horizontal => (r, w - 1 - c),
        Flip::Vertical => (h - 1 - r, c),
    }
}

fn rotated_dims(quarter_turns: usize, h: usize, w: usize) -> (usize, usize) {
    if quarter_turns % 2 == 0 {
        (h, w)
    } else {
        (w, h)
    }
}

fn transform_gray(img: &GrayImage, quarter_turns: usize, flip: Flip) -> GrayImage {
    let (oh, ow) = rotated_dims(quarter_turns, img.h, img.w);
    let mut out = GrayImage::constant(oh, ow, 0.0, img.pixel_scale_um);
    for r in 0..img.h {
        for c in 0..img.w {
            let (tr, tc) = map_pixel(quarter_turns, flip, img.h, img.w, r, c);
            out.set(tr, tc, img.get(r, c));
        }
    }
    out
}

fn transform_mask(mask: &BinaryMask, quarter_turns: usize, flip: Flip) -> BinaryMask {
    let (oh, ow) = rotated_dims(quarter_turns, mask.h, mask.w);
    let mut out = BinaryMask::empty(oh, ow);
    for r in 0..mask.h {
        for c in 0..mask.w {
            if mask.get(r, c) {
                let (tr, tc) = map_pixel(quarter_turns, flip, mask.h, mask.w, r, c);
                out.set(tr, tc, true);
            }
        }
    }
    out
}

fn crop_origins(extent: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut p = 0;
    while p + crop <= extent {
        v.push(p);
        p += stride;
    }
    v
}

fn crop_gray(img: &GrayImage, r0: usize, c0: usize, k: usize) -> GrayImage {
    let mut out = GrayImage::constant(k, k, 0.0, img.pixel_scale_um);
    for r in 0..k {
        for c in 0..k {
            out.set(r, c, img.get(r0 + r, c0 + c));
        }
    }
    out
}

fn crop_mask(mask: &BinaryMask, r0: usize, c0: usize, k: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(k, k);
    for r in 0..k {
        for c in 0..k {
            out.set(r, c, mask.get(r0 + r, c0 + c));
        }
    }
    out
}

/// Expand aligned image/mask pairs. The first output pair of every input is
/// the identity transform (no rotation, no flip, origin crop).
pub fn augment(
    images: &[GrayImage],
    masks: &[BinaryMask],
    spec: &AugmentSpec,
) -> Result<Augmented> {
    if images.len() != masks.len() {
        return Err(MgfError::invalid_argument(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    if spec.crop == 0 || spec.stride == 0 {
        return Err(MgfError::invalid_argument(
            "crop and stride must be positive",
        ));
    }
    let mut out_images = Vec::new();
    let mut out_masks = Vec::new();
    for (img, mask) in images.iter().zip(masks) {
        if mask.h != img.h || mask.w != img.w {
            return Err(MgfError::shape_mismatch(format!(
                "mask {}x{} does not match image {}x{}",
                mask.h, mask.w, img.h, img.w
            )));
        }
        if spec.crop > img.h.min(img.w) {
            return Err(MgfError::invalid_argument(format!(
                "crop {} larger than image {}x{}",
                spec.crop, img.h, img.w
            )));
        }
        for quarter_turns in 0..4 {
            for flip in FLIPS {
                let timg = transform_gray(img, quarter_turns, flip);
                let tmask = transform_mask(mask, quarter_turns, flip);
                for &r0 in &crop_origins(timg.h, spec.crop, spec.stride) {
                    for &c0 in &crop_origins(timg.w, spec.crop, spec.stride) {
                        out_images.push(crop_gray(&timg, r0, c0, spec.crop));
                        out_masks.push(crop_mask(&tmask, r0, c0, spec.crop));
                    }
                }
            }
        }
    }
    let expansion_factor = if images.is_empty() {
        0
    } else {
        out_images.len() / images.len()
    };
    Ok(Augmented {
        images: out_images,
        masks: out_masks,
        expansion_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_pair(h: usize, w: usize, seed: u64) -> (GrayImage, BinaryMask) {
        let mut rng = Rng::new(seed);
        let mut img = GrayImage::constant(h, w, 0.0, 1.0);
        let mut mask = BinaryMask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set(r, c, rng.uniform());
                mask.set(r, c, rng.uniform() < 0.2);
            }
        }
        (img, mask)
    }

    #[test]
    fn identity_transform_is_first() {
        let (img, mask) = sample_pair(6, 6, 1);
        let out = augment(
            std::slice::from_ref(&img),
            std::slice::from_ref(&mask),
            &AugmentSpec { crop: 6, stride: 6 },
        )
        .unwrap();
        assert_eq!(out.images[0], img);
        assert_eq!(out.masks[0], mask);
    }

    #[test]
    fn expansion_factor_is_twelve_times_crops() {
        let (img, mask) = sample_pair(8, 8, 2);
        // crop 4, stride 2 -> 3 origins per axis -> 9 crops
        let out = augment(&[img], &[mask], &AugmentSpec { crop: 4, stride: 2 }).unwrap();
        assert_eq!(out.expansion_factor, 12 * 9);
        assert_eq!(out.images.len(), 12 * 9);
        assert_eq!(out.masks.len(), out.images.len());
    }

    #[test]
    fn rotation_maps_pixels_consistently() {
        let (img, mut mask) = sample_pair(5, 7, 3);
        mask.set(1, 2, true);
        let timg = transform_gray(&img, 1, Flip::None);
        let tmask = transform_mask(&mask, 1, Flip::None);
        // (r, c) -> (c, h - 1 - r)
        assert_eq!(timg.h, 7);
        assert_eq!(timg.w, 5);
        assert!((timg.get(2, 5 - 1 - 1) - img.get(1, 2)).abs() < 1e-15);
        assert!(tmask.get(2, 5 - 1 - 1));
        assert_eq!(tmask.count_on(), mask.count_on());
    }

    #[test]
    fn crop_larger_than_image_rejected() {
        let (img, mask) = sample_pair(4, 4, 4);
        assert!(augment(&[img], &[mask], &AugmentSpec { crop: 5, stride: 1 }).is_err());
    }
}
