use log::warn;
use rand::Rng;

use super::Dihedral;
use crate::error::{Error, Result};

/// Draws bags uniformly over LR classes, then uniformly within the class,
/// each with a random dihedral transform. Sampling is with replacement.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(lr_labels: &[usize], classes: usize) -> Result<Self> {
        if lr_labels.is_empty() {
            return Err(Error::data("cannot sample from an empty dataset"));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in lr_labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| {
                    Error::data(format!("label {y} out of range for {classes} classes"))
                })?
                .push(i);
        }
        let missing: Vec<usize> = (0..classes).filter(|c| by_class[*c].is_empty()).collect();
        if !missing.is_empty() {
            warn!("LR classes {missing:?} have no bags; sampling among the present classes");
        }
        by_class.retain(|v| !v.is_empty());
        Ok(BalancedSampler { by_class })
    }

    pub fn present_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Dihedral) {
        let class = &self.by_class[rng.random_range(0..self.by_class.len())];
        let bag = class[rng.random_range(0..class.len())];
        (bag, Dihedral::from_index(rng.random_range(0..8u8)))
    }

    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<(usize, Dihedral)> {
        (0..size).map(|_| self.draw(rng)).collect()
    }
}
