//! Contact-centric object decoupling.
//!
//! Training never sees the two-hand-object class: the left/right object
//! branches are supervised with the unions "everything the left hand touches"
//! and "everything the right hand touches". At inference the three original
//! object categories are recovered by intersection and set difference, so the
//! outputs are pairwise disjoint by construction.

use crate::error::{Error, Result};
use crate::mask::{binary_set_op, BinaryMask, ClassId, LabelRaster, SetOp};
use ndarray::Array2;

/// Training targets derived from one `LabelRaster`.
#[derive(Debug, Clone)]
pub struct DecoupledTargets {
    /// Union of left-hand objects and two-hand objects.
    pub g_lo_prime: BinaryMask,
    /// Union of right-hand objects and two-hand objects.
    pub g_ro_prime: BinaryMask,
    /// 3-class raster: 0 background, 1 left hand, 2 right hand.
    pub g_hand: Array2<u8>,
    /// Contact boundary target.
    pub g_cb: BinaryMask,
}

/// Final per-category masks after recombination.
#[derive(Debug, Clone)]
pub struct FinalMasks {
    /// 3-class raster: 0 background, 1 left hand, 2 right hand.
    pub m_hand: Array2<u8>,
    pub m_o_l: BinaryMask,
    pub m_o_r: BinaryMask,
    pub m_o_t: BinaryMask,
    pub m_cb: BinaryMask,
}

/// Default square structuring-element radius for the contact boundary.
pub const DEFAULT_CB_RADIUS: usize = 1;
/// Default number of dilation passes for the contact boundary.
pub const DEFAULT_CB_ITERATIONS: usize = 3;

/// Builds the decoupled supervision set for one labeled sample.
///
/// `g_lo_prime = mask(3) ∪ mask(5)` and `g_ro_prime = mask(4) ∪ mask(5)`,
/// so both are supersets of the original single-hand object masks.
pub fn decouple_targets(labels: &LabelRaster) -> DecoupledTargets {
    decouple_targets_with(labels, DEFAULT_CB_RADIUS, DEFAULT_CB_ITERATIONS)
}

pub fn decouple_targets_with(
    labels: &LabelRaster,
    cb_radius: usize,
    cb_iterations: usize,
) -> DecoupledTargets {
    let lo = labels.class_mask(ClassId::LeftObject);
    let ro = labels.class_mask(ClassId::RightObject);
    let to = labels.class_mask(ClassId::TwoHandObject);
    let g_lo_prime = binary_set_op(&lo, &to, SetOp::Union).expect("same raster shape");
    let g_ro_prime = binary_set_op(&ro, &to, SetOp::Union).expect("same raster shape");
    let g_hand = labels.data().mapv(|v| if v == 1 || v == 2 { v } else { 0 });
    let g_cb = make_contact_boundary(labels, cb_radius, cb_iterations)
        .expect("default radius is >= 1");
    DecoupledTargets {
        g_lo_prime,
        g_ro_prime,
        g_hand,
        g_cb,
    }
}

/// Recovers the three object categories from the two decoupled predictions.
///
/// `m_o_t = m_lo ∩ m_ro`, `m_o_l = m_lo \ m_o_t`, `m_o_r = m_ro \ m_o_t`.
pub fn recombine(m_lo: &BinaryMask, m_ro: &BinaryMask) -> Result<(BinaryMask, BinaryMask, BinaryMask)> {
    let m_o_t = binary_set_op(m_lo, m_ro, SetOp::Intersection)?;
    let m_o_l = binary_set_op(m_lo, &m_o_t, SetOp::Difference)?;
    let m_o_r = binary_set_op(m_ro, &m_o_t, SetOp::Difference)?;
    Ok((m_o_t, m_o_l, m_o_r))
}

/// Dilates a mask with a square structuring element of side `2r+1`,
/// repeated `iterations` times.
pub fn dilate(mask: &BinaryMask, radius: usize, iterations: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut cur = mask.data().clone();
    let r = radius as isize;
    for _ in 0..iterations {
        let prev = cur.clone();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if prev[[y as usize, x as usize]] != 0 {
                    continue;
                }
                let mut hit = false;
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0
                            && nx >= 0
                            && ny < h as isize
                            && nx < w as isize
                            && prev[[ny as usize, nx as usize]] != 0
                        {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                if hit {
                    cur[[y as usize, x as usize]] = 1;
                }
            }
        }
    }
    BinaryMask::new(cur).expect("dilation preserves binary values")
}

/// Contact boundary: the overlap of the dilated hand pixels and the dilated
/// object pixels (classes 3, 4, 5).
pub fn make_contact_boundary(
    labels: &LabelRaster,
    radius: usize,
    iterations: usize,
) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::Config("contact boundary radius must be >= 1".into()));
    }
    let hands = BinaryMask::new(labels.data().mapv(|v| (v == 1 || v == 2) as u8))
        .expect("binary by construction");
    let objects = BinaryMask::new(labels.data().mapv(|v| (v >= 3) as u8))
        .expect("binary by construction");
    let dh = dilate(&hands, radius, iterations);
    let dobj = dilate(&objects, radius, iterations);
    binary_set_op(&dh, &dobj, SetOp::Intersection)
}
