//! Confusion matrices and segmentation metrics on HR reference maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scenegen::Bag;
use crate::train::Network;

/// `C x C` pixel counts; rows are reference classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_total(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    /// Tallies every pixel where `mask` is true (all pixels without a mask).
    pub fn accumulate(
        &mut self,
        predicted: &[u16],
        reference: &[u16],
        mask: Option<&[bool]>,
    ) -> Result<()> {
        if predicted.len() != reference.len() || mask.is_some_and(|m| m.len() != predicted.len()) {
            return Err(Error::ShapeMismatch {
                op: "accumulate_confusion",
                lhs: vec![predicted.len()],
                rhs: vec![reference.len()],
            });
        }
        let c = self.classes;
        if let Some(bad) = predicted
            .iter()
            .chain(reference)
            .find(|y| **y as usize >= c)
        {
            return Err(Error::data(format!(
                "class id {bad} out of range for {c} classes"
            )));
        }
        for (p, (&yp, &yr)) in predicted.iter().zip(reference).enumerate() {
            if mask.is_none_or(|m| m[p]) {
                self.counts[yr as usize * c + yp as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "merge_confusion",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class producer's accuracy and IoU plus their means. Classes absent
/// from the reference have `None` and are left out of the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pa: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub aa: f64,
    pub miou: f64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let c = cm.classes();
    let mut pa = Vec::with_capacity(c);
    let mut iou = Vec::with_capacity(c);
    for i in 0..c {
        let row = cm.row_total(i);
        let hit = cm.get(i, i);
        if row == 0 {
            pa.push(None);
            iou.push(None);
        } else {
            pa.push(Some(hit as f64 / row as f64));
            iou.push(Some(hit as f64 / (row + cm.col_total(i) - hit) as f64));
        }
    }
    let aa =
        defined_mean(&pa).ok_or_else(|| Error::data("confusion matrix has no reference pixels"))?;
    let miou = defined_mean(&iou).unwrap_or(0.0);
    Ok(Metrics { pa, iou, aa, miou })
}

/// Mean of the defined entries.
pub fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Row-wise argmax of `[K, C]` scores; ties go to the lowest class id.
pub fn argmax_rows(scores: &Tensor) -> Vec<u16> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

/// Per-pixel class map of one bag: the argmax of the pixel classifiers.
pub fn predict_hr(net: &Network, bag: &Bag) -> Result<Vec<u16>> {
    Ok(argmax_rows(&net.pixel_scores(bag.pixels())?))
}

/// HR confusion matrix and metrics of `net` over `bags`.
pub fn evaluate(net: &Network, bags: &[Bag]) -> Result<(ConfusionMatrix, Metrics)> {
    let preds: Vec<Vec<u16>> = bags
        .par_iter()
        .map(|b| predict_hr(net, b))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(net.classes());
    for (p, b) in preds.iter().zip(bags) {
        cm.accumulate(p, b.hr_reference_for_eval(), None)?;
    }
    let m = metrics(&cm)?;
    Ok((cm, m))
}
