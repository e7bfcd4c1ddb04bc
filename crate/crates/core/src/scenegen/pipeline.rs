use serde::{Deserialize, Serialize};

use super::{IndexBands, Scene, REFLECTANCE_MAX};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Clips raw bands to `[0, 1e4]`, rescales them to `[0, 1]` and appends
/// four normalized-difference indices. Input `H x W x B`, output
/// `H x W x (B + 4)`.
pub fn preprocess_spectral(image: &[f64], bands: usize, index: &IndexBands) -> Result<Vec<f64>> {
    index.validate(bands)?;
    if bands == 0 || !image.len().is_multiple_of(bands) {
        return Err(Error::data(format!(
            "image length {} is not a multiple of {bands} bands",
            image.len()
        )));
    }
    let pairs = index.pairs();
    let mut out = Vec::with_capacity(image.len() / bands * (bands + 4));
    for px in image.chunks_exact(bands) {
        let start = out.len();
        out.extend(
            px.iter()
                .map(|v| v.clamp(0.0, REFLECTANCE_MAX) / REFLECTANCE_MAX),
        );
        for (a, b) in pairs {
            let (a, b) = (out[start + a], out[start + b]);
            out.push(if a + b == 0.0 { 0.0 } else { (a - b) / (a + b) });
        }
    }
    Ok(out)
}

/// Modal class of every `k x k` block; ties go to the lowest class id.
pub fn majority_downsample(
    labels: &[u16],
    height: usize,
    width: usize,
    k: usize,
    classes: usize,
) -> Vec<u16> {
    assert!(
        k > 0 && height.is_multiple_of(k) && width.is_multiple_of(k),
        "extent not divisible by the cell size"
    );
    let (bh, bw) = (height / k, width / k);
    let mut out = Vec::with_capacity(bh * bw);
    let mut counts = vec![0usize; classes.max(1)];
    for u in 0..bh {
        for v in 0..bw {
            counts.iter_mut().for_each(|c| *c = 0);
            for i in u * k..(u + 1) * k {
                for &y in &labels[i * width + v * k..i * width + (v + 1) * k] {
                    let y = y as usize;
                    if y >= counts.len() {
                        counts.resize(y + 1, 0);
                    }
                    counts[y] += 1;
                }
            }
            out.push(modal(&counts));
        }
    }
    out
}

/// Index of the largest count, lowest index on ties.
pub(crate) fn modal(counts: &[usize]) -> u16 {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best as u16
}

/// Nearest-neighbour enlargement of a label map by an integer factor.
pub fn upsample_nearest(lr: &[u16], height: usize, width: usize, factor: usize) -> Vec<u16> {
    assert!(factor >= 1, "upsampling factor must be at least 1");
    assert_eq!(lr.len(), height * width);
    let ow = width * factor;
    let mut out = Vec::with_capacity(lr.len() * factor * factor);
    for i in 0..height * factor {
        let row = &lr[(i / factor) * width..(i / factor + 1) * width];
        out.extend((0..ow).map(|j| row[j / factor]));
    }
    out
}

/// Relabels an LR class that has no HR counterpart, depending on whether
/// another class occurs anywhere in the tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemapRule {
    pub absent_id: u16,
    /// Used when `trigger_id` occurs in the tile.
    pub fallback_a: u16,
    /// Used otherwise.
    pub fallback_b: u16,
    pub trigger_id: u16,
}

impl RemapRule {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for id in [
            self.absent_id,
            self.fallback_a,
            self.fallback_b,
            self.trigger_id,
        ] {
            if id as usize >= classes {
                return Err(Error::config(format!(
                    "remap class id {id} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}

pub fn remap_absent_class(lr_tile: &[u16], rule: &RemapRule) -> Vec<u16> {
    let fallback = if lr_tile.contains(&rule.trigger_id) {
        rule.fallback_a
    } else {
        rule.fallback_b
    };
    lr_tile
        .iter()
        .map(|&y| if y == rule.absent_id { fallback } else { y })
        .collect()
}

/// One `k x k` patch with a single LR label.
///
/// The HR reference map travels with the bag for evaluation and prior
/// estimation only; training code reads [`Bag::pixels`] and
/// [`Bag::lr_label`].
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pixels: Tensor,
    lr_label: usize,
    hr_reference: Vec<u16>,
}

impl Bag {
    pub fn new(pixels: Tensor, lr_label: usize, hr_reference: Vec<u16>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] * s[1] != hr_reference.len() {
            return Err(Error::data(format!(
                "bag pixels {:?} do not match {} reference labels",
                s,
                hr_reference.len()
            )));
        }
        Ok(Bag {
            pixels,
            lr_label,
            hr_reference,
        })
    }

    /// `k x k x channels` preprocessed values.
    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn lr_label(&self) -> usize {
        self.lr_label
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Pixel-level reference labels. Evaluation only.
    pub fn hr_reference_for_eval(&self) -> &[u16] {
        &self.hr_reference
    }

    /// The bag under a dihedral transform; the LR label is unchanged.
    pub fn transformed(&self, t: Dihedral) -> Bag {
        let s = self.pixels.shape();
        let (n, ch) = (s[0], s[2]);
        let pixels = t.apply(self.pixels.data(), n, ch);
        Bag {
            pixels: Tensor::new(s.to_vec(), pixels).expect("same shape"),
            lr_label: self.lr_label,
            hr_reference: t.apply(&self.hr_reference, n, 1),
        }
    }
}

/// Cuts a scene into its `k x k` cells in row-major order, preprocessing
/// the imagery. Bag `(u, v)` carries `lr_labels[u, v]`.
pub fn split_into_bags(scene: &Scene, k: usize, index: &IndexBands) -> Result<Vec<Bag>> {
    let (h, w) = (scene.height, scene.width);
    if k == 0 || h % k != 0 || w % k != 0 || scene.lr_labels.len() != (h / k) * (w / k) {
        return Err(Error::data(format!(
            "{h}x{w} scene does not split into {k}x{k} cells"
        )));
    }
    if scene.image.len() != h * w * scene.bands || scene.hr_labels.len() != h * w {
        return Err(Error::data("scene arrays do not match its extent"));
    }
    let pre = preprocess_spectral(&scene.image, scene.bands, index)?;
    let ch = scene.bands + 4;
    let mut bags = Vec::with_capacity(scene.lr_labels.len());
    for u in 0..h / k {
        for v in 0..w / k {
            let mut px = Vec::with_capacity(k * k * ch);
            let mut hr = Vec::with_capacity(k * k);
            for i in u * k..(u + 1) * k {
                let row = i * w + v * k;
                px.extend_from_slice(&pre[row * ch..(row + k) * ch]);
                hr.extend_from_slice(&scene.hr_labels[row..row + k]);
            }
            let label = scene.lr_labels[u * (w / k) + v] as usize;
            bags.push(Bag::new(Tensor::new(vec![k, k, ch], px)?, label, hr)?);
        }
    }
    Ok(bags)
}

/// One of the eight symmetries of the square: `rotations` quarter turns
/// counter-clockwise, then an optional left-right flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotations: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::from_index(i as u8))
    }

    pub fn from_index(i: u8) -> Dihedral {
        Dihedral {
            rotations: i % 4,
            flip: i >= 4,
        }
    }

    pub fn index(self) -> u8 {
        self.rotations % 4 + if self.flip { 4 } else { 0 }
    }

    /// Source pixel `(row, col)` of output pixel `(i, j)` on an `n x n` grid.
    fn source(self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let j = if self.flip { n - 1 - j } else { j };
        let (mut r, mut c) = (i, j);
        for _ in 0..self.rotations % 4 {
            // A counter-clockwise turn maps input (r, c) to (n-1-c, r).
            (r, c) = (c, n - 1 - r);
        }
        (r, c)
    }

    /// Applies the transform to an `n x n x ch` row-major grid.
    pub fn apply<T: Copy>(self, data: &[T], n: usize, ch: usize) -> Vec<T> {
        assert_eq!(data.len(), n * n * ch);
        let mut out = Vec::with_capacity(data.len());
        for i in 0..n {
            for j in 0..n {
                let (r, c) = self.source(i, j, n);
                out.extend_from_slice(&data[(r * n + c) * ch..(r * n + c + 1) * ch]);
            }
        }
        out
    }
}
