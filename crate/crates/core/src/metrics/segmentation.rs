use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Overlap scores of predicted masks against ground truth.
///
/// `image_iou` aggregates intersection and union over the whole set;
/// `dataset_iou` (mIOU) is the mean of per-image IoU values. Dice, precision
/// and recall come from the aggregate TP/FP/FN counts. A ratio with a zero
/// denominator is taken as 1 (nothing to get wrong).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub image_iou: f64,
    pub dataset_iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou_suite(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<SegMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no masks to score".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let mut iou_sum = 0.0;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::Shape(format!(
                "pair {i}: prediction {:?} vs ground truth {:?}",
                p.dims(),
                g.dims()
            )));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in p.data().iter().zip(g.data()) {
            match (a, b) {
                (1, 1) => {
                    tp += 1;
                    inter += 1;
                    union += 1;
                }
                (1, 0) => {
                    fp += 1;
                    union += 1;
                }
                (0, 1) => {
                    fn_ += 1;
                    union += 1;
                }
                _ => {}
            }
        }
        iou_sum += ratio(inter, union);
    }
    Ok(SegMetrics {
        image_iou: ratio(tp, tp + fp + fn_),
        dataset_iou: iou_sum / preds.len() as f64,
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(w: usize, from: usize, to: usize) -> BinaryMask {
        BinaryMask::from_fn(w, 1, |x, _| (from..to).contains(&x))
    }

    #[test]
    fn worked_example_aggregate_vs_mean() {
        // Pair 1: identical 10-pixel masks. Pair 2: 10 vs 10 pixels, 5 overlapping.
        let preds = [strip(20, 0, 10), strip(20, 0, 10)];
        let gts = [strip(20, 0, 10), strip(20, 5, 15)];
        let m = iou_suite(&preds, &gts).unwrap();
        assert!((m.dataset_iou - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.image_iou - 0.6).abs() < 1e-12);
        // TP = 15, FP = 5, FN = 5.
        assert!((m.dice - 30.0 / 40.0).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_pair_counts_as_perfect_in_mean_only() {
        let preds = [BinaryMask::zeros(4, 4), strip(16, 0, 4)];
        let gts = [BinaryMask::zeros(4, 4), strip(16, 2, 6)];
        let m = iou_suite(&preds, &gts).unwrap();
        assert!((m.dataset_iou - (1.0 + 2.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((m.image_iou - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let masks = [strip(9, 1, 4), BinaryMask::ones(3, 3), BinaryMask::zeros(2, 2)];
        let m = iou_suite(&masks, &masks).unwrap();
        for v in [m.image_iou, m.dataset_iou, m.dice, m.precision, m.recall] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            iou_suite(&[strip(4, 0, 1)], &[]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            iou_suite(&[strip(4, 0, 1)], &[strip(5, 0, 1)]),
            Err(Error::Shape(_))
        ));
    }

    use proptest::prelude::*;

    fn arb_pairs() -> impl Strategy<Value = (Vec<BinaryMask>, Vec<BinaryMask>)> {
        (1usize..5, 1usize..9, 1usize..9).prop_flat_map(|(n, w, h)| {
            let mask = proptest::collection::vec(0u8..=1, w * h).prop_map(move |d| BinaryMask::new(w, h, d).unwrap());
            (
                proptest::collection::vec(mask.clone(), n),
                proptest::collection::vec(mask, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rates_are_bounded_and_symmetric((preds, gts) in arb_pairs()) {
            let m = iou_suite(&preds, &gts).unwrap();
            for v in [m.image_iou, m.dataset_iou, m.dice, m.precision, m.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.image_iou <= m.dice + 1e-12);
            let swapped = iou_suite(&gts, &preds).unwrap();
            prop_assert_eq!(swapped.image_iou, m.image_iou);
            prop_assert_eq!(swapped.dataset_iou, m.dataset_iou);
            prop_assert_eq!(swapped.precision, m.recall);
        }

        #[test]
        fn self_comparison_is_perfect((preds, _) in arb_pairs()) {
            let m = iou_suite(&preds, &preds).unwrap();
            prop_assert_eq!([m.image_iou, m.dataset_iou, m.dice, m.precision, m.recall], [1.0; 5]);
        }
    }
}
