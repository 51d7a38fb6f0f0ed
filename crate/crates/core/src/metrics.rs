//! Hard-threshold confusion counts, the four overlap metrics, and per-class aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn scaled(&self, k: u64) -> Self {
        ConfusionCounts {
            tp: self.tp * k,
            fp: self.fp * k,
            fn_: self.fn_ * k,
            tn: self.tn * k,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn tally<T: Real>(pred: &[T], gt: &[T], threshold: T) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p > threshold, g > T::zero()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Pixels with `pred > threshold` count as positive; ground truth is positive where `> 0`.
pub fn confusion<T: Real>(pred: &Tensor4<T>, gt: &Tensor4<T>, threshold: f64) -> Result<ConfusionCounts> {
    gt.shape().expect("confusion", pred.shape())?;
    Ok(tally(pred.data(), gt.data(), T::from_f64(threshold)))
}

/// One [`ConfusionCounts`] per batch entry.
pub fn confusion_per_image<T: Real>(
    pred: &Tensor4<T>,
    gt: &Tensor4<T>,
    threshold: f64,
) -> Result<Vec<ConfusionCounts>> {
    gt.shape().expect("confusion", pred.shape())?;
    let per = pred.len() / pred.shape().n;
    let th = T::from_f64(threshold);
    Ok(pred
        .data()
        .chunks(per)
        .zip(gt.data().chunks(per))
        .map(|(p, g)| tally(p, g, th))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSet {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Ratio with the empty-set rule: `0/0` is `empty`.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Dice and Jaccard of an empty union are 1; precision and recall with a zero denominator are 0.
pub fn metrics(c: &ConfusionCounts) -> MetricSet {
    MetricSet {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0),
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_, 1.0),
        precision: ratio(c.tp, c.tp + c.fp, 0.0),
        recall: ratio(c.tp, c.tp + c.fn_, 0.0),
    }
}

/// Order-independent mean: values are summed in sorted order.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_set(sets: &[MetricSet]) -> MetricSet {
    let col = |f: fn(&MetricSet) -> f64| mean(&mut sets.iter().map(f).collect::<Vec<_>>());
    MetricSet {
        dice: col(|m| m.dice),
        jaccard: col(|m| m.jaccard),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// `(class, mean metrics, image count)` sorted by class name.
    pub classes: Vec<(String, MetricSet, usize)>,
    /// Unweighted mean over every image of every class.
    pub overall: MetricSet,
}

/// Per-class and overall unweighted means of per-image metrics.
pub fn aggregate(per_image: &[(String, MetricSet)]) -> Result<Report> {
    if per_image.is_empty() {
        return Err(Error::Dataset("no images to aggregate".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<MetricSet>> = BTreeMap::new();
    for (class, m) in per_image {
        by_class.entry(class.as_str()).or_default().push(*m);
    }
    let classes = by_class
        .into_iter()
        .map(|(c, sets)| (c.to_string(), mean_set(&sets), sets.len()))
        .collect();
    let all: Vec<MetricSet> = per_image.iter().map(|p| p.1).collect();
    Ok(Report {
        classes,
        overall: mean_set(&all),
    })
}

impl Report {
    fn rows(&self) -> impl Iterator<Item = (&str, &MetricSet)> {
        self.classes
            .iter()
            .map(|(c, m, _)| (c.as_str(), m))
            .chain(std::iter::once(("overall", &self.overall)))
    }

    /// Fixed-width table, one row per class and a final `overall` row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20} {:>9} {:>9} {:>9} {:>9}\n", "class", "dice", "jaccard", "precision", "recall");
        for (c, m) in self.rows() {
            let _ = writeln!(
                s,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                c, m.dice, m.jaccard, m.precision, m.recall
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice,jaccard,precision,recall\n");
        for (c, m) in self.rows() {
            let _ = writeln!(s, "{c},{},{},{},{}", m.dice, m.jaccard, m.precision, m.recall);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn row(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counts() {
        let c = confusion(&row(&[1.0, 1.0, 0.0, 0.0]), &row(&[1.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let m = metrics(&c);
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.jaccard, 1.0 / 3.0);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn degenerate_predictor() {
        let c = confusion(&row(&[0.0; 5]), &row(&[1.0, 1.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 3));
        let m = metrics(&c);
        assert_eq!((m.dice, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_union() {
        let m = metrics(&ConfusionCounts { tn: 9, ..Default::default() });
        assert_eq!((m.dice, m.jaccard, m.precision, m.recall), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_counts() {
        let m = metrics(&ConfusionCounts { tp: 7, tn: 3, ..Default::default() });
        assert_eq!(m, MetricSet { dice: 1.0, jaccard: 1.0, precision: 1.0, recall: 1.0 });
    }

    #[test]
    fn aggregation() {
        let m = |d| MetricSet { dice: d, ..Default::default() };
        let r = aggregate(&[("a".into(), m(0.4)), ("a".into(), m(0.6)), ("b".into(), m(1.0))]).unwrap();
        assert_eq!(r.classes[0].1.dice, 0.5);
        assert_eq!(r.classes[1].1.dice, 1.0);
        assert!((r.overall.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.to_csv().lines().count(), 1 + 3);
        assert!(aggregate(&[]).is_err());
    }
}
