//! Confusion matrix with per-class IoU, mean IoU and overall accuracy.

use crate::{ModelError, Result};

/// Counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        assert!(truth < self.classes && pred < self.classes, "class index out of range");
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(ModelError::Config(format!("{} labels but {} predictions", truth.len(), pred.len())));
        }
        if let Some((t, p)) = truth.iter().zip(pred).find(|(t, p)| **t >= self.classes || **p >= self.classes) {
            return Err(ModelError::Config(format!("class pair ({t}, {p}) out of range for {}", self.classes)));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(ModelError::Empty("confusion matrix has no entries"));
        }
        let iou: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let union = tp + self.false_positives(c) + self.false_negatives(c);
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        let miou_all = iou.iter().map(|x| x.unwrap_or(0.0)).sum::<f64>() / self.classes as f64;
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(Metrics { iou, miou, miou_all_classes: miou_all, oa: trace as f64 / total as f64, points: total })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes absent from both ground truth and prediction.
    pub iou: Vec<Option<f64>>,
    /// Mean over classes with a nonzero union.
    pub miou: f64,
    /// Mean over all classes, absent ones counted as 0.
    pub miou_all_classes: f64,
    pub oa: f64,
    pub points: u64,
}

impl Metrics {
    /// `points,oa,miou,miou_all,iou_0,...`; undefined IoUs are left empty.
    pub fn csv_header(classes: usize) -> String {
        let mut s = String::from("points,oa,miou,miou_all");
        for c in 0..classes {
            s.push_str(&format!(",iou_{c}"));
        }
        s
    }

    pub fn csv_fields(&self) -> String {
        let mut s = format!("{},{:.6},{:.6},{:.6}", self.points, self.oa, self.miou, self.miou_all_classes);
        for x in &self.iou {
            match x {
                Some(v) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s
    }
}
