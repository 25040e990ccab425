//! Pixel confusion counts and the overlap metrics derived from them.
//!
//! Every ratio whose denominator is zero evaluates to 1: a zero denominator
//! means the error counts in it are zero as well, so the score is vacuously
//! perfect.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability at or above which a pixel counts as foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts one image given as flat prediction and ground-truth slices.
    pub fn from_slices<T: Scalar>(pred: &[T], gt: &[T], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p.to_f64() >= threshold, g.to_f64() >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// Per-image confusion counts of N×1×H×W predictions against binary masks.
pub fn confusion<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Vec<Confusion>> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "confusion",
            "shape",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (n, c, _, _) = pred.dims4("confusion")?;
    if c != 1 {
        return Err(Error::dim("confusion", "C", format!("expected 1 channel, got {}", c)));
    }
    let plane = pred.numel() / n.max(1);
    Ok(pred
        .data()
        .chunks(plane)
        .zip(gt.data().chunks(plane))
        .map(|(p, g)| Confusion::from_slices(p, g, threshold))
        .collect())
}

/// Accuracy, sensitivity, specificity, Jaccard, Dice and precision.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub sn: f64,
    pub sp: f64,
    pub j: f64,
    pub d: f64,
    pub pr: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from(c: &Confusion) -> Metrics {
    Metrics {
        acc: ratio(c.tp + c.tn, c.total()),
        sn: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        j: ratio(c.tp, c.tp + c.fp + c.fn_),
        d: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        pr: ratio(c.tp, c.tp + c.fp),
    }
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["acc", "sn", "sp", "j", "d", "pr"];

    pub fn values(&self) -> [f64; 6] {
        [self.acc, self.sn, self.sp, self.j, self.d, self.pr]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Metrics {
            acc: v[0],
            sn: v[1],
            sp: v[2],
            j: v[3],
            d: v[4],
            pr: v[5],
        }
    }
}

/// Mean and population standard deviation of each metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: Metrics,
    pub std: Metrics,
    pub count: usize,
}

impl Summary {
    pub fn of<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Result<Self> {
        let rows: Vec<[f64; 6]> = items.into_iter().map(Metrics::values).collect();
        if rows.is_empty() {
            return Err(Error::Usage("cannot aggregate zero images".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 6];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 6];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.map(|s| libm::sqrt(s / n));
        Ok(Summary {
            mean: Metrics::from_values(mean),
            std: Metrics::from_values(std),
            count: rows.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `(id, metrics)` in input order.
    pub per_image: Vec<(String, Metrics)>,
    pub aggregate: Summary,
    /// One summary per fold, in fold order.
    pub folds: Option<Vec<Summary>>,
}

/// Macro-averages per-image metrics. With `folds`, each fold (a list of
/// image ids) is summarized separately as well.
pub fn aggregate(per_image: Vec<(String, Metrics)>, folds: Option<&[Vec<String>]>) -> Result<MetricsReport> {
    let aggregate = Summary::of(per_image.iter().map(|(_, m)| m))?;
    let folds = match folds {
        None => None,
        Some(folds) => {
            let index: BTreeMap<&str, &Metrics> = per_image.iter().map(|(id, m)| (id.as_str(), m)).collect();
            let mut out = Vec::with_capacity(folds.len());
            for (k, fold) in folds.iter().enumerate() {
                let members = fold
                    .iter()
                    .map(|id| {
                        index
                            .get(id.as_str())
                            .copied()
                            .ok_or_else(|| Error::Usage(format!("fold {} lists unknown image id `{}`", k, id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(Summary::of(members)?);
            }
            Some(out)
        }
    };
    Ok(MetricsReport {
        per_image,
        aggregate,
        folds,
    })
}

/// Scores a batch of predictions: one `(id, metrics)` row per image.
pub fn evaluate<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, ids: &[String]) -> Result<Vec<(String, Metrics)>> {
    let counts = confusion(pred, gt, THRESHOLD)?;
    if counts.len() != ids.len() {
        return Err(Error::Usage(format!("{} ids for {} images", ids.len(), counts.len())));
    }
    Ok(ids.iter().cloned().zip(counts.iter().map(metrics_from)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn mask(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, v.len() / 2], v).unwrap()
    }

    #[test]
    fn four_pixel_example() {
        let c = confusion(&mask(&[1.0, 1.0, 0.0, 0.0]), &mask(&[1.0, 0.0, 1.0, 0.0]), THRESHOLD).unwrap();
        assert_eq!(c, vec![Confusion { tp: 1, tn: 1, fp: 1, fn_: 1 }]);
        let m = metrics_from(&c[0]);
        assert_eq!((m.acc, m.sn, m.sp, m.j, m.d), (0.5, 0.5, 0.5, 1.0 / 3.0, 0.5));
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion(&mask(&[0.5, 0.4999]), &mask(&[1.0, 1.0]), THRESHOLD).unwrap();
        assert_eq!((c[0].tp, c[0].fn_), (1, 1));
    }

    #[test]
    fn extreme_masks() {
        let ones = mask(&[1.0; 4]);
        let zeros = mask(&[0.0; 4]);
        assert_eq!(confusion(&ones, &ones, THRESHOLD).unwrap()[0].tp, 4);
        assert_eq!(confusion(&zeros, &ones, THRESHOLD).unwrap()[0].fn_, 4);
        let perfect = metrics_from(&confusion(&zeros, &zeros, THRESHOLD).unwrap()[0]);
        assert_eq!(perfect.values(), [1.0; 6]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let r = confusion(&mask(&[0.0; 4]), &mask(&[0.0; 6]), THRESHOLD);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn population_std() {
        let rows = [0.2, 0.4]
            .iter()
            .enumerate()
            .map(|(i, &j)| (i.to_string(), Metrics { j, ..Metrics::default() }))
            .collect();
        let r = aggregate(rows, None).unwrap();
        assert!((r.aggregate.mean.j - 0.3).abs() < 1e-15);
        assert!((r.aggregate.std.j - 0.1).abs() < 1e-15);
    }

    #[test]
    fn folds_and_empty_input() {
        let m = metrics_from(&Confusion { tp: 3, tn: 5, fp: 1, fn_: 0 });
        let rows = vec![("a".to_string(), m), ("b".to_string(), m)];
        let folds = vec![vec!["a".to_string()], vec!["b".to_string()]];
        let r = aggregate(rows, Some(&folds)).unwrap();
        assert_eq!(r.aggregate.mean, m);
        assert_eq!(r.aggregate.std, Metrics::default());
        assert_eq!(r.folds.unwrap()[1].mean, m);
        assert!(matches!(aggregate(Vec::new(), None), Err(Error::Usage(_))));
        let bad = vec![vec!["zz".to_string()]];
        assert!(aggregate(vec![("a".into(), m)], Some(&bad)).is_err());
    }
}
