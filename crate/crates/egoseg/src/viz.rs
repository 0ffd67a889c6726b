//! PNG overlays and attention dumps.

use crate::cods::FinalMasks;
use crate::error::Result;
use crate::hofe::AttentionMatrix;
use crate::mask::{BinaryMask, ImageRaster};
use crate::tape::Real;
use ndarray::Array2;
use std::path::Path;

/// Fixed overlay palette.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("left_hand", [255, 0, 0]),
    ("right_hand", [0, 0, 255]),
    ("left_object", [255, 255, 0]),
    ("right_object", [0, 255, 0]),
    ("two_hand_object", [255, 0, 255]),
    ("contact_boundary", [255, 255, 255]),
];

fn blend(img: &mut ImageRaster, mask_at: impl Fn(usize, usize) -> bool, color: [u8; 3], alpha: f64) {
    let (h, w) = (img.height(), img.width());
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            if mask_at(y, x) {
                for c in 0..3 {
                    let v = data[[y, x, c]] as f64;
                    data[[y, x, c]] = ((1.0 - alpha) * v + alpha * color[c] as f64).round() as u8;
                }
            }
        }
    }
}

/// Alpha-blends the final masks over the image: objects first, then hands,
/// then the contact boundary.
pub fn overlay(image: &ImageRaster, masks: &FinalMasks, alpha: f64) -> ImageRaster {
    let mut out = image.clone();
    let layers: [(&BinaryMask, [u8; 3]); 4] = [
        (&masks.m_o_l, PALETTE[2].1),
        (&masks.m_o_r, PALETTE[3].1),
        (&masks.m_o_t, PALETTE[4].1),
        (&masks.m_cb, PALETTE[5].1),
    ];
    blend(&mut out, |y, x| masks.m_hand[[y, x]] == 1, PALETTE[0].1, alpha);
    blend(&mut out, |y, x| masks.m_hand[[y, x]] == 2, PALETTE[1].1, alpha);
    for (mask, color) in layers {
        let m = mask.clone();
        blend(&mut out, move |y, x| m.get(y, x), color, alpha);
    }
    out
}

/// Writes the overlay PNG.
pub fn visualize(image: &ImageRaster, masks: &FinalMasks, alpha: f64, out: &Path) -> Result<()> {
    overlay(image, masks, alpha).save_png(out)
}

/// Dumps an attention matrix as a grayscale PNG, rows (hand positions) down
/// the image, normalized by the matrix maximum.
pub fn attention_png<T: Real>(attn: &AttentionMatrix<T>, out: &Path) -> Result<()> {
    let data: &Array2<T> = attn.data();
    let (rows, cols) = data.dim();
    let maxv = data.iter().fold(T::zero(), |m, &v| m.max(v));
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for y in 0..rows {
        for x in 0..cols {
            let v: f64 = num_traits::cast(data[[y, x]] / maxv.max(T::epsilon())).unwrap_or(0.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    img.save(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn empty_masks(h: usize, w: usize) -> FinalMasks {
        FinalMasks {
            m_hand: Array2::zeros((h, w)),
            m_o_l: BinaryMask::zeros(h, w),
            m_o_r: BinaryMask::zeros(h, w),
            m_o_t: BinaryMask::zeros(h, w),
            m_cb: BinaryMask::zeros(h, w),
        }
    }

    #[test]
    fn empty_masks_leave_image_unchanged() {
        let img = ImageRaster::new(Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            (y * 31 + x * 7 + c * 3) as u8
        }))
        .unwrap();
        let out = overlay(&img, &empty_masks(8, 8), 0.6);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn full_frame_two_hand_mask_at_alpha_one_is_solid_magenta() {
        let img = ImageRaster::zeros(4, 4);
        let mut masks = empty_masks(4, 4);
        masks.m_o_t = BinaryMask::from_fn(4, 4, |_, _| true);
        let out = overlay(&img, &masks, 1.0);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(
                    [out.data()[[y, x, 0]], out.data()[[y, x, 1]], out.data()[[y, x, 2]]],
                    [255, 0, 255]
                );
            }
        }
    }

    #[test]
    fn overlay_bytes_are_stable() {
        // Golden byte check: palette and blending must not drift.
        let img = ImageRaster::new(Array3::from_elem((2, 2, 3), 100)).unwrap();
        let mut masks = empty_masks(2, 2);
        masks.m_hand[[0, 0]] = 1;
        masks.m_hand[[0, 1]] = 2;
        masks.m_o_l.set(1, 0, true);
        masks.m_cb.set(1, 1, true);
        let out = overlay(&img, &masks, 0.5);
        let px = |y: usize, x: usize| {
            [out.data()[[y, x, 0]], out.data()[[y, x, 1]], out.data()[[y, x, 2]]]
        };
        assert_eq!(px(0, 0), [178, 50, 50]);
        assert_eq!(px(0, 1), [50, 50, 178]);
        assert_eq!(px(1, 0), [178, 178, 50]);
        assert_eq!(px(1, 1), [178, 178, 178]);
    }
}
