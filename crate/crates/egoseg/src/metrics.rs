//! Segmentation metrics: per-class IoU and pixel accuracy, accumulated as
//! dataset-level confusion counts (sum first, divide once).
//!
//! Accuracy is per-class recall, TP / (TP + FN). Classes with zero ground
//! truth support across the split are reported as undefined and excluded
//! from the means.

use crate::cods::FinalMasks;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ClassId, LabelRaster};
use serde::{Deserialize, Serialize};

/// Confusion counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        if self.support() == 0 {
            None
        } else {
            Some(self.tp as f64 / denom.max(1) as f64)
        }
    }

    pub fn acc(&self) -> Option<f64> {
        if self.support() == 0 {
            None
        } else {
            Some(self.tp as f64 / self.support() as f64)
        }
    }
}

/// Score for one foreground class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_name: String,
    pub class_id: u8,
    /// None when the class has no ground-truth support in the split.
    pub iou: Option<f64>,
    pub acc: Option<f64>,
    pub support: u64,
}

/// Whole-split evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub macc: f64,
    pub n_images: u64,
    pub config_hash: String,
}

impl EvalReport {
    /// Plain-text table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>12}\n",
            "class", "IoU", "Acc", "support"
        ));
        for s in &self.per_class {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{:.4}", x),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{:<16} {:>10} {:>10} {:>12}\n",
                s.class_name,
                fmt(s.iou),
                fmt(s.acc),
                s.support
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>10.4} {:>10.4} {:>12}\n",
            "mean", self.miou, self.macc, self.n_images
        ));
        out
    }
}

/// Streaming accumulator over (prediction, ground truth) pairs.
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    counts: [ClassCounts; 5],
    n_images: u64,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image. Prediction and ground truth must share a shape.
    pub fn add(&mut self, pred: &FinalMasks, gt: &LabelRaster) -> Result<()> {
        let (h, w) = (gt.height(), gt.width());
        if pred.m_hand.dim() != (h, w) {
            return Err(Error::shape(
                "score",
                format!("{}x{}", h, w),
                format!("{:?}", pred.m_hand.dim()),
            ));
        }
        for m in [&pred.m_o_l, &pred.m_o_r, &pred.m_o_t] {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape(
                    "score",
                    format!("{}x{}", h, w),
                    format!("{}x{}", m.height(), m.width()),
                ));
            }
        }
        for (i, cls) in ClassId::FOREGROUND.iter().enumerate() {
            let cv = cls.as_u8();
            let c = &mut self.counts[i];
            for y in 0..h {
                for x in 0..w {
                    let in_gt = gt.get(y, x).as_u8() == cv;
                    let in_pred = match cls {
                        ClassId::LeftHand => pred.m_hand[[y, x]] == 1,
                        ClassId::RightHand => pred.m_hand[[y, x]] == 2,
                        ClassId::LeftObject => pred.m_o_l.get(y, x),
                        ClassId::RightObject => pred.m_o_r.get(y, x),
                        ClassId::TwoHandObject => pred.m_o_t.get(y, x),
                        ClassId::Background => unreachable!(),
                    };
                    match (in_pred, in_gt) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        self.n_images += 1;
        Ok(())
    }

    /// Merges counts from another accumulator (associative, order-free).
    pub fn merge(&mut self, other: &ScoreAccumulator) {
        for i in 0..5 {
            self.counts[i].tp += other.counts[i].tp;
            self.counts[i].fp += other.counts[i].fp;
            self.counts[i].fn_ += other.counts[i].fn_;
        }
        self.n_images += other.n_images;
    }

    pub fn counts(&self) -> &[ClassCounts; 5] {
        &self.counts
    }

    pub fn report(&self, config_hash: &str) -> EvalReport {
        let mut per_class = Vec::with_capacity(5);
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut defined = 0u32;
        for (i, cls) in ClassId::FOREGROUND.iter().enumerate() {
            let c = self.counts[i];
            let (iou, acc) = (c.iou(), c.acc());
            if let (Some(i_), Some(a_)) = (iou, acc) {
                iou_sum += i_;
                acc_sum += a_;
                defined += 1;
            }
            per_class.push(ClassScore {
                class_name: cls.name().to_string(),
                class_id: cls.as_u8(),
                iou,
                acc,
                support: c.support(),
            });
        }
        let d = defined.max(1) as f64;
        EvalReport {
            per_class,
            miou: iou_sum / d,
            macc: acc_sum / d,
            n_images: self.n_images,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Scores aligned streams of predictions and ground truths.
pub fn score<'a, P, G>(preds: P, gts: G, config_hash: &str) -> Result<EvalReport>
where
    P: IntoIterator<Item = &'a FinalMasks>,
    G: IntoIterator<Item = &'a LabelRaster>,
{
    let mut acc = ScoreAccumulator::new();
    let mut preds = preds.into_iter();
    let mut gts = gts.into_iter();
    loop {
        match (preds.next(), gts.next()) {
            (Some(p), Some(g)) => acc.add(p, g)?,
            (None, None) => break,
            _ => {
                return Err(Error::Dataset(
                    "prediction and ground-truth streams have different lengths".into(),
                ))
            }
        }
    }
    Ok(acc.report(config_hash))
}

/// Builds a `FinalMasks` where every object/CB mask is empty except the
/// provided ones; convenient for tests and external-mask scoring.
pub fn masks_from_parts(
    m_hand: ndarray::Array2<u8>,
    m_o_l: BinaryMask,
    m_o_r: BinaryMask,
    m_o_t: BinaryMask,
) -> FinalMasks {
    let (h, w) = m_hand.dim();
    FinalMasks {
        m_hand,
        m_o_l,
        m_o_r,
        m_o_t,
        m_cb: BinaryMask::zeros(h, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (FinalMasks, LabelRaster) {
        let gt = LabelRaster::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..=5u8))).unwrap();
        let m_hand = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..=2u8));
        let mk = |rng: &mut ChaCha8Rng| {
            BinaryMask::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..=1u8))).unwrap()
        };
        let (l, r, t) = (mk(rng), mk(rng), mk(rng));
        (masks_from_parts(m_hand, l, r, t), gt)
    }

    /// Naive per-pixel double loop, independent of ScoreAccumulator.
    fn oracle_counts(pred: &FinalMasks, gt: &LabelRaster) -> [ClassCounts; 5] {
        let mut out = [ClassCounts::default(); 5];
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                let g = gt.get(y, x).as_u8();
                let preds = [
                    pred.m_hand[[y, x]] == 1,
                    pred.m_hand[[y, x]] == 2,
                    pred.m_o_l.get(y, x),
                    pred.m_o_r.get(y, x),
                    pred.m_o_t.get(y, x),
                ];
                for cls in 1..=5u8 {
                    let p = preds[(cls - 1) as usize];
                    let t = g == cls;
                    let c = &mut out[(cls - 1) as usize];
                    if p && t {
                        c.tp += 1;
                    } else if p {
                        c.fp += 1;
                    } else if t {
                        c.fn_ += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = LabelRaster::new(Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) % 6) as u8))
            .unwrap();
        let m_hand = gt.data().mapv(|v| if v == 1 || v == 2 { v } else { 0 });
        let pred = masks_from_parts(
            m_hand,
            gt.class_mask(ClassId::LeftObject),
            gt.class_mask(ClassId::RightObject),
            gt.class_mask(ClassId::TwoHandObject),
        );
        let report = score([&pred], [&gt], "test").unwrap();
        for s in &report.per_class {
            assert_eq!(s.iou, Some(1.0), "{}", s.class_name);
            assert_eq!(s.acc, Some(1.0), "{}", s.class_name);
        }
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.macc, 1.0);
    }

    #[test]
    fn overlap_example_iou_third_acc_half() {
        // pred 2px, gt 2px, overlap 1px -> IoU 1/3, Acc 1/2.
        let mut gt = LabelRaster::zeros(1, 4);
        gt.set(0, 0, ClassId::LeftObject);
        gt.set(0, 1, ClassId::LeftObject);
        let mut pred_l = BinaryMask::zeros(1, 4);
        pred_l.set(0, 1, true);
        pred_l.set(0, 2, true);
        let pred = masks_from_parts(
            Array2::zeros((1, 4)),
            pred_l,
            BinaryMask::zeros(1, 4),
            BinaryMask::zeros(1, 4),
        );
        let report = score([&pred], [&gt], "test").unwrap();
        let lo = &report.per_class[2];
        assert!((lo.iou.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((lo.acc.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_random_rasters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let h = rng.gen_range(1..=32);
            let w = rng.gen_range(1..=32);
            let (pred, gt) = random_case(&mut rng, h, w);
            let mut acc = ScoreAccumulator::new();
            acc.add(&pred, &gt).unwrap();
            assert_eq!(acc.counts(), &oracle_counts(&pred, &gt));
        }
    }

    #[test]
    fn zero_support_class_excluded_from_means() {
        // Ground truth only has left hand; all other classes undefined.
        let mut gt = LabelRaster::zeros(2, 2);
        gt.set(0, 0, ClassId::LeftHand);
        let mut m_hand = Array2::zeros((2, 2));
        m_hand[[0, 0]] = 1;
        let pred = masks_from_parts(
            m_hand,
            BinaryMask::zeros(2, 2),
            BinaryMask::zeros(2, 2),
            BinaryMask::zeros(2, 2),
        );
        let report = score([&pred], [&gt], "test").unwrap();
        assert_eq!(report.per_class[0].iou, Some(1.0));
        assert_eq!(report.per_class[1].iou, None);
        assert_eq!(report.miou, 1.0);
    }

    #[test]
    fn stream_length_mismatch_is_error() {
        let gt = LabelRaster::zeros(2, 2);
        let pred = masks_from_parts(
            Array2::zeros((2, 2)),
            BinaryMask::zeros(2, 2),
            BinaryMask::zeros(2, 2),
            BinaryMask::zeros(2, 2),
        );
        assert!(score([&pred], [&gt, &gt], "test").is_err());
    }

    #[test]
    fn removing_pred_pixels_never_raises_fp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (pred, gt) = random_case(&mut rng, 12, 12);
            let mut acc0 = ScoreAccumulator::new();
            acc0.add(&pred, &gt).unwrap();

            // Drop every predicted left-object pixel in the top half.
            let mut smaller = pred.clone();
            let mut m = smaller.m_o_l.clone();
            for y in 0..6 {
                for x in 0..12 {
                    m.set(y, x, false);
                }
            }
            smaller.m_o_l = m;
            let mut acc1 = ScoreAccumulator::new();
            acc1.add(&smaller, &gt).unwrap();
            assert!(acc1.counts()[2].fp <= acc0.counts()[2].fp);
        }
    }

    #[test]
    fn iou_never_exceeds_acc() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (pred, gt) = random_case(&mut rng, 16, 16);
            let mut acc = ScoreAccumulator::new();
            acc.add(&pred, &gt).unwrap();
            for c in acc.counts() {
                if let (Some(i), Some(a)) = (c.iou(), c.acc()) {
                    assert!(i <= a + 1e-15);
                }
            }
        }
    }
}
