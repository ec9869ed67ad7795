//! Confusion-matrix segmentation metrics.

use std::io::Write;

use crate::error::{Error, Result};

/// `counts[i*K + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// A ratio whose denominator may vanish; `absent` marks the `0/0` case,
/// reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub absent: bool,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes > 0, "confusion matrix needs at least one class");
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds `pred` against `truth`. Validates every label before counting so
    /// a bad batch leaves the matrix untouched.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= k) {
            return Err(Error::Label(format!("class id {bad} outside 0..{k}")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, FP, FN)` of class `k`.
    pub fn tp_fp_fn(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.get(k, k);
        let predicted: u64 = (0..self.classes).map(|t| self.get(t, k)).sum();
        let actual: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
        (tp, predicted - tp, actual - tp)
    }

    /// `2PR/(P+R)`, which reduces to `2TP/(2TP+FP+FN)`.
    pub fn f1(&self, k: usize) -> Score {
        let (tp, fp, fn_) = self.tp_fp_fn(k);
        ratio(2 * tp, 2 * tp + fp + fn_)
    }

    pub fn iou(&self, k: usize) -> Score {
        let (tp, fp, fn_) = self.tp_fp_fn(k);
        ratio(tp, tp + fp + fn_)
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::usage("overall accuracy of an empty confusion matrix")),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        let overall_accuracy = self.overall_accuracy()?;
        let f1: Vec<Score> = (0..self.classes).map(|k| self.f1(k)).collect();
        let iou: Vec<Score> = (0..self.classes).map(|k| self.iou(k)).collect();
        let fg = if self.classes > 1 { &f1[1..] } else { &f1[..] };
        Ok(MetricSummary {
            mean_f1: mean(fg.iter().map(|s| s.value)),
            mean_iou: mean(iou.iter().map(|s| s.value)),
            overall_accuracy,
            f1,
            iou,
        })
    }
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score {
            value: 0.0,
            absent: true,
        }
    } else {
        Score {
            value: num as f64 / den as f64,
            absent: false,
        }
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Mean F1 covers foreground classes `1..K` (class 0 is background);
/// mIoU and OA cover every class.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub f1: Vec<Score>,
    pub iou: Vec<Score>,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub overall_accuracy: f64,
}

impl MetricSummary {
    /// `class,F1,IoU` rows followed by `meanF1`, `mIoU` and `OA` footers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let row = |w: &mut csv::Writer<W>, cells: [String; 3]| {
            w.write_record(&cells).map_err(csv_err)
        };
        row(&mut w, ["class".into(), "F1".into(), "IoU".into()])?;
        for (k, (f, i)) in self.f1.iter().zip(&self.iou).enumerate() {
            row(&mut w, [k.to_string(), fmt(f.value), fmt(i.value)])?;
        }
        row(&mut w, ["meanF1".into(), fmt(self.mean_f1), String::new()])?;
        row(&mut w, ["mIoU".into(), String::new(), fmt(self.mean_iou)])?;
        row(&mut w, ["OA".into(), fmt(self.overall_accuracy), String::new()])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Evaluation(format!("csv: {other:?}")),
    }
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` scores, ties going to
/// the lowest class index. Output is `B·H·W` ids in row-major order.
pub fn argmax_classes(data: &[f64], dims: &[usize]) -> Vec<usize> {
    let (b, k, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * k * hw;
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if data[base + c * hw + i] > data[base + best * hw + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_matrix() -> ConfusionMatrix {
        // class 1: TP 3, FP 1, FN 1
        let truth = [1, 1, 1, 1, 0, 0];
        let pred = [1, 1, 1, 0, 1, 0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        cm
    }

    #[test]
    fn hand_values() {
        let cm = hand_matrix();
        assert_eq!(cm.tp_fp_fn(1), (3, 1, 1));
        assert_eq!(cm.f1(1).value, 0.75);
        assert_eq!(cm.iou(1).value, 0.6);
        assert_eq!(cm.overall_accuracy().unwrap(), 4.0 / 6.0);
    }

    #[test]
    fn perfect_and_absent() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.f1(1).value, 1.0);
        assert_eq!(cm.iou(0).value, 1.0);
        let s = cm.f1(2);
        assert!(s.absent && s.value == 0.0);
        assert!(cm.iou(2).absent);
        assert_eq!(cm.overall_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn disjoint_prediction_has_zero_iou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1], &[0, 0]).unwrap();
        assert_eq!(cm.iou(0).value, 0.0);
        assert!(!cm.iou(0).absent);
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.overall_accuracy(), Err(Error::Usage(_))));
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.accumulate(&[0, 2], &[0, 0]), Err(Error::Label(_))));
        assert_eq!(cm.total(), 0);
        assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = hand_matrix().summary().unwrap().to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,F1,IoU");
        assert_eq!(lines[2], "1,0.750000,0.600000");
        assert_eq!(lines[3], "meanF1,0.750000,");
        assert!(lines[5].starts_with("OA,0.666667"));
    }

    #[test]
    fn argmax_ties_go_low() {
        let scores = [1.0, 2.0, 1.0, 2.0];
        assert_eq!(argmax_classes(&scores, &[1, 2, 1, 2]), vec![0, 0]);
    }
}
