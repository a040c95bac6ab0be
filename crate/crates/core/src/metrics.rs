//! Confusion-matrix accumulation and mean IoU.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::tensor_io::{SegMask, IGNORE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("prediction is {pred}, ground truth is {gt}")]
    Dimensions { pred: String, gt: String },
    #[error("prediction contains ignore on scored pixel {pixel}")]
    IgnorePrediction { pixel: usize },
    #[error("label {label} at pixel {pixel} is not below class count {classes}")]
    OutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("no class is present in ground truth or prediction")]
    NoPresentClasses,
}

/// `counts[g * C + p]` = scored pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. On error the matrix is unchanged.
    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<(), MetricsError> {
        if !pred.same_dims(gt) {
            return Err(MetricsError::Dimensions {
                pred: format!("{}x{}", pred.height(), pred.width()),
                gt: format!("{}x{}", gt.height(), gt.width()),
            });
        }
        let c = self.classes;
        let mut local = vec![0u64; c * c];
        for (pixel, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                return Err(MetricsError::IgnorePrediction { pixel });
            }
            for label in [g, p] {
                if label as usize >= c {
                    return Err(MetricsError::OutOfRange {
                        label,
                        pixel,
                        classes: c,
                    });
                }
            }
            local[g as usize * c + p as usize] += 1;
        }
        for (a, b) in self.counts.iter_mut().zip(local) {
            *a += b;
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix, MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::ClassMismatch(self.classes, other.classes));
        }
        Ok(ConfusionMatrix {
            classes: self.classes,
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `(TP, TP + FP + FN)` for one class.
    pub fn intersection_union(&self, class: usize) -> (u64, u64) {
        let c = self.classes;
        let tp = self.get(class, class);
        let row: u64 = (0..c).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..c).map(|g| self.get(g, class)).sum();
        (tp, row + col - tp)
    }
}

/// An unreduced integer ratio `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IouRatio {
    pub num: u64,
    pub den: u64,
}

impl IouRatio {
    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn to_rational(self) -> BigRational {
        BigRational::new(BigInt::from(self.num), BigInt::from(self.den))
    }
}

impl fmt::Display for IouRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIou {
    pub class: usize,
    /// `None` when the class never occurs in ground truth or prediction.
    pub iou: Option<IouRatio>,
}

/// Which classes the mean runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanOver {
    /// Classes with a non-zero union.
    #[default]
    Present,
    /// Every class; absent ones count as zero.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// Exact mean, reduced.
    pub mean: BigRational,
    pub mean_f64: f64,
    pub per_class: Vec<ClassIou>,
    pub present: usize,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport, MetricsError> {
    miou_with(cm, MeanOver::Present)
}

pub fn miou_with(cm: &ConfusionMatrix, over: MeanOver) -> Result<MiouReport, MetricsError> {
    let per_class: Vec<ClassIou> = (0..cm.classes())
        .map(|class| {
            let (num, den) = cm.intersection_union(class);
            ClassIou {
                class,
                iou: (den > 0).then_some(IouRatio { num, den }),
            }
        })
        .collect();
    let present = per_class.iter().filter(|c| c.iou.is_some()).count();
    if present == 0 {
        return Err(MetricsError::NoPresentClasses);
    }
    let sum = per_class
        .iter()
        .filter_map(|c| c.iou.map(IouRatio::to_rational))
        .fold(BigRational::zero(), |a, b| a + b);
    let divisor = match over {
        MeanOver::Present => present,
        MeanOver::All => cm.classes(),
    };
    let mean = sum / BigRational::from_integer(BigInt::from(divisor));
    let mean_f64 = mean.to_f64().unwrap_or(f64::NAN);
    Ok(MiouReport {
        mean,
        mean_f64,
        per_class,
        present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(labels: &[u8]) -> SegMask {
        SegMask::new(labels.len(), 1, labels.to_vec()).unwrap()
    }

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn hand_tally() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&row(&[0, 0, 1, 1]), &row(&[0, 1, 1, 1]))
            .unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)),
            (1, 0, 1, 2)
        );
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class[0].iou, Some(IouRatio { num: 1, den: 2 }));
        assert_eq!(r.per_class[1].iou, Some(IouRatio { num: 2, den: 3 }));
        assert_eq!(r.mean, ratio(7, 12));
        assert!((r.mean_f64 - 0.583333).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_absent() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&row(&[0, 2, 2]), &row(&[0, 2, 2])).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(2, 2), 3);
        let r = miou(&cm).unwrap();
        assert_eq!(r.mean, ratio(1, 1));
        assert_eq!(r.present, 2);
        assert_eq!(r.per_class[1].iou, None);
        assert_eq!(miou_with(&cm, MeanOver::All).unwrap().mean, ratio(1, 2));
    }

    #[test]
    fn ignored_gt_and_errors() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&row(&[0, 1]), &row(&[IGNORE, IGNORE]))
            .unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert_eq!(miou(&cm).unwrap_err(), MetricsError::NoPresentClasses);
        assert_eq!(
            cm.accumulate(&row(&[IGNORE, 1]), &row(&[0, 1]))
                .unwrap_err(),
            MetricsError::IgnorePrediction { pixel: 0 }
        );
        assert!(matches!(
            cm.accumulate(&row(&[0, 2]), &row(&[0, 1])),
            Err(MetricsError::OutOfRange {
                label: 2,
                pixel: 1,
                ..
            })
        ));
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.accumulate(&row(&[0]), &row(&[0, 1])).is_err());
        assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
    }

    fn arb_frames() -> impl Strategy<Value = Vec<(SegMask, SegMask)>> {
        let frame = (
            proptest::collection::vec(0u8..4, 16),
            proptest::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], 16),
        )
            .prop_map(|(p, g)| {
                (
                    SegMask::new(4, 4, p).unwrap(),
                    SegMask::new(4, 4, g).unwrap(),
                )
            });
        proptest::collection::vec(frame, 4)
    }

    proptest! {
        #[test]
        fn merge_is_sharding_invariant(frames in arb_frames()) {
            let mut all = ConfusionMatrix::new(4);
            let mut merged = ConfusionMatrix::new(4);
            for (p, g) in &frames {
                all.accumulate(p, g).unwrap();
                let mut one = ConfusionMatrix::new(4);
                one.accumulate(p, g).unwrap();
                merged = merged.merge(&one).unwrap();
                prop_assert_eq!(one.merge(&ConfusionMatrix::new(4)).unwrap(), one.clone());
            }
            prop_assert_eq!(&merged, &all);
            prop_assert_eq!(all.merge(&merged).unwrap(), merged.merge(&all).unwrap());
            if let (Ok(a), Ok(b)) = (miou(&all), miou(&merged)) {
                prop_assert_eq!(a.mean, b.mean);
                prop_assert!((0.0..=1.0).contains(&a.mean_f64));
            }
        }
    }
}
