//! Synthetic multispectral scenes and the patch pipeline.
//!
//! A scene is a raster of `B` reflectance-like bands with an HR label map.
//! Labels come from the argmax of `C` smoothed random fields, imagery from
//! per-class mean spectra plus Gaussian noise. The LR map is the majority
//! vote over `k x k` cells, and every cell becomes one bag.

mod pipeline;
mod sampler;
mod store;

pub use pipeline::{
    majority_downsample, preprocess_spectral, remap_absent_class, split_into_bags,
    upsample_nearest, Bag, Dihedral, RemapRule,
};
pub use sampler::BalancedSampler;
pub use store::{bag_priors, SceneEntry, SceneSet, SceneSetManifest, SplitInfo, FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the raw reflectance scale.
pub const REFLECTANCE_MAX: f64 = 1e4;

/// Band positions used by the normalized-difference indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexBands {
    pub red: usize,
    pub green: usize,
    pub nir: usize,
    pub swir1: usize,
    pub swir2: usize,
}

impl Default for IndexBands {
    fn default() -> Self {
        // Sentinel-2 order without the 60 m bands: B2 B3 B4 B5 B6 B7 B8 B8A B11 B12.
        IndexBands {
            red: 2,
            green: 1,
            nir: 6,
            swir1: 8,
            swir2: 9,
        }
    }
}

impl IndexBands {
    /// `(a, b)` band pairs of the indices `(a - b) / (a + b)`, in output order:
    /// vegetation, water, moisture, built-up.
    pub fn pairs(&self) -> [(usize, usize); 4] {
        [
            (self.nir, self.red),
            (self.green, self.nir),
            (self.nir, self.swir1),
            (self.swir2, self.nir),
        ]
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        for (name, b) in [
            ("red", self.red),
            ("green", self.green),
            ("nir", self.nir),
            ("swir1", self.swir1),
            ("swir2", self.swir2),
        ] {
            if b >= bands {
                return Err(Error::config(format!(
                    "{name} band {b} not among the {bands} bands"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "SceneGenFile")]
pub struct SceneGenConfig {
    pub classes: usize,
    pub bands: usize,
    /// Tile side in pixels.
    pub tile_size: usize,
    /// LR cell side in pixels; also the bag side.
    pub cell: usize,
    pub train_tiles: usize,
    pub test_tiles: usize,
    pub val_tiles: usize,
    /// Side of the box filter that smooths the label fields (applied twice).
    pub blob_scale: usize,
    /// Per-band standard deviation of the pixel noise, in raw units.
    pub noise_sd: f64,
    /// Range of the class mean spectra, in raw units.
    pub mean_range: [f64; 2],
    /// Minimum Euclidean distance between any two class mean spectra.
    pub min_separation: f64,
    /// Offset added to each class's label field (in field standard
    /// deviations); negative values make a class rarer. Empty means zero.
    /// When omitted from a config file it defaults to
    /// [`default_class_bias`] for the given class count.
    pub class_bias: Vec<f64>,
    pub index_bands: IndexBands,
    pub remap: Option<RemapRule>,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            classes: 6,
            bands: 10,
            tile_size: 256,
            cell: 64,
            train_tiles: 64,
            test_tiles: 16,
            val_tiles: 0,
            blob_scale: 24,
            noise_sd: 600.0,
            mean_range: [500.0, 6000.0],
            min_separation: 2000.0,
            class_bias: default_class_bias(6),
            index_bands: IndexBands::default(),
            remap: None,
        }
    }
}

/// Label-field offsets used when a config does not set `class_bias`: a
/// fixed imbalance for six classes, none otherwise.
pub fn default_class_bias(classes: usize) -> Vec<f64> {
    match classes {
        6 => vec![0.3, 0.2, 0.1, 0.0, -0.2, -0.4],
        _ => Vec::new(),
    }
}

/// On-disk form of [`SceneGenConfig`]; a missing `class_bias` follows the
/// class count.
#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SceneGenFile {
    classes: usize,
    bands: usize,
    tile_size: usize,
    cell: usize,
    train_tiles: usize,
    test_tiles: usize,
    val_tiles: usize,
    blob_scale: usize,
    noise_sd: f64,
    mean_range: [f64; 2],
    min_separation: f64,
    class_bias: Option<Vec<f64>>,
    index_bands: IndexBands,
    remap: Option<RemapRule>,
}

impl Default for SceneGenFile {
    fn default() -> Self {
        let d = SceneGenConfig::default();
        SceneGenFile {
            classes: d.classes,
            bands: d.bands,
            tile_size: d.tile_size,
            cell: d.cell,
            train_tiles: d.train_tiles,
            test_tiles: d.test_tiles,
            val_tiles: d.val_tiles,
            blob_scale: d.blob_scale,
            noise_sd: d.noise_sd,
            mean_range: d.mean_range,
            min_separation: d.min_separation,
            class_bias: None,
            index_bands: d.index_bands,
            remap: d.remap,
        }
    }
}

impl From<SceneGenFile> for SceneGenConfig {
    fn from(f: SceneGenFile) -> Self {
        SceneGenConfig {
            class_bias: f
                .class_bias
                .unwrap_or_else(|| default_class_bias(f.classes)),
            classes: f.classes,
            bands: f.bands,
            tile_size: f.tile_size,
            cell: f.cell,
            train_tiles: f.train_tiles,
            test_tiles: f.test_tiles,
            val_tiles: f.val_tiles,
            blob_scale: f.blob_scale,
            noise_sd: f.noise_sd,
            mean_range: f.mean_range,
            min_separation: f.min_separation,
            index_bands: f.index_bands,
            remap: f.remap,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::config("too many classes for 16-bit labels"));
        }
        if self.bands < 4 {
            return Err(Error::config("need at least four bands"));
        }
        if self.cell == 0 || self.tile_size == 0 || !self.tile_size.is_multiple_of(self.cell) {
            return Err(Error::config(format!(
                "tile size {} must be a positive multiple of the cell size {}",
                self.tile_size, self.cell
            )));
        }
        if self.blob_scale == 0 || self.blob_scale >= self.tile_size {
            return Err(Error::config(format!(
                "blob_scale {} must be in [1, tile size {})",
                self.blob_scale, self.tile_size
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd must be finite and non-negative"));
        }
        let [lo, hi] = self.mean_range;
        if !(0.0 <= lo && lo < hi && hi <= REFLECTANCE_MAX) {
            return Err(Error::config(format!(
                "mean_range must satisfy 0 <= lo < hi <= {REFLECTANCE_MAX}"
            )));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(Error::config(
                "min_separation must be finite and non-negative",
            ));
        }
        if !self.class_bias.is_empty() && self.class_bias.len() != self.classes {
            return Err(Error::config("class_bias needs one entry per class"));
        }
        if self.class_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("class_bias must be finite"));
        }
        self.index_bands.validate(self.bands)?;
        if let Some(rule) = &self.remap {
            rule.validate(self.classes)?;
        }
        if self.train_tiles == 0 || self.test_tiles == 0 {
            return Err(Error::config(
                "train and test splits need at least one tile",
            ));
        }
        Ok(())
    }

    /// Channels after preprocessing: the bands plus four indices.
    pub fn channels(&self) -> usize {
        self.bands + 4
    }

    pub fn bags_per_tile(&self) -> usize {
        let n = self.tile_size / self.cell;
        n * n
    }

    fn bias(&self, class: usize) -> f64 {
        self.class_bias.get(class).copied().unwrap_or(0.0)
    }
}

/// One generated or imported tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `H x W x B`, raw units.
    pub image: Vec<f64>,
    /// `H x W`.
    pub hr_labels: Vec<u16>,
    /// `(H / k) x (W / k)`.
    pub lr_labels: Vec<u16>,
    /// Dataset seed and ChaCha stream the scene was drawn from.
    pub seed: u64,
    pub stream: u64,
}

/// Dataset-level generator state: the configuration and the class spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenerator {
    cfg: SceneGenConfig,
    seed: u64,
    means: Vec<Vec<f64>>,
}

/// Stream reserved for the class spectra; scenes use streams from 1 up.
const MEANS_STREAM: u64 = 0;

/// Random stream of one scene: the dataset seed picks the key, and
/// `(split, index)` picks a ChaCha stream, so scenes are independent of
/// generation order.
pub fn scene_rng(dataset_seed: u64, split: u32, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(scene_stream(split, index));
    rng
}

fn scene_stream(split: u32, index: u32) -> u64 {
    ((split as u64 + 1) << 32) | index as u64
}

impl SceneGenerator {
    pub fn new(cfg: SceneGenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let means = draw_class_means(&cfg, seed)?;
        Ok(SceneGenerator { cfg, seed, means })
    }

    pub fn config(&self) -> &SceneGenConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `C x B` class mean spectra.
    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn generate(&self, split: u32, index: u32) -> Scene {
        let mut rng = scene_rng(self.seed, split, index);
        let mut scene = generate_scene_with(&self.cfg, &self.means, &mut rng);
        scene.seed = self.seed;
        scene.stream = scene_stream(split, index);
        scene
    }
}

/// Generates one scene from a standalone seed.
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene> {
    SceneGenerator::new(cfg.clone(), seed).map(|g| g.generate(0, 0))
}

fn draw_class_means(cfg: &SceneGenConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MEANS_STREAM);
    let [lo, hi] = cfg.mean_range;
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let means: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|_| (0..cfg.bands).map(|_| rng.random_range(lo..hi)).collect())
            .collect();
        let separated = (0..cfg.classes).all(|a| {
            (a + 1..cfg.classes).all(|b| {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                d2.sqrt() >= cfg.min_separation
            })
        });
        if separated {
            return Ok(means);
        }
    }
    Err(Error::config(format!(
        "could not draw {} class spectra separated by {} within {:?}",
        cfg.classes, cfg.min_separation, cfg.mean_range
    )))
}

fn generate_scene_with(cfg: &SceneGenConfig, means: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Scene {
    let n = cfg.tile_size;
    let mut best = vec![f64::NEG_INFINITY; n * n];
    let mut hr = vec![0u16; n * n];
    for class in 0..cfg.classes {
        let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let field = smooth_field(&noise, n, n, cfg.blob_scale);
        let bias = cfg.bias(class);
        for (p, v) in field.into_iter().enumerate() {
            // Strict comparison keeps the lowest class id on ties.
            if v + bias > best[p] {
                best[p] = v + bias;
                hr[p] = class as u16;
            }
        }
    }
    let mut image = Vec::with_capacity(n * n * cfg.bands);
    for &label in &hr {
        for &mu in &means[label as usize] {
            let noise: f64 = if cfg.noise_sd > 0.0 {
                rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd
            } else {
                0.0
            };
            image.push((mu + noise).clamp(0.0, REFLECTANCE_MAX));
        }
    }
    let mut lr = majority_downsample(&hr, n, n, cfg.cell, cfg.classes);
    if let Some(rule) = &cfg.remap {
        lr = remap_absent_class(&lr, rule);
    }
    Scene {
        height: n,
        width: n,
        bands: cfg.bands,
        image,
        hr_labels: hr,
        lr_labels: lr,
        seed: 0,
        stream: 0,
    }
}

/// Two passes of the `s x s` box filter, scaled to unit variance in the
/// interior. A single pass leaves pixel-scale roughness that turns the
/// class argmax into speckle.
fn smooth_field(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let s2 = (s * s) as f64;
    let g: f64 = (1 - s as i64..s as i64)
        .map(|d| {
            let k = (s as i64 - d.abs()) as f64;
            k * k / s2
        })
        .sum();
    box_smooth(&box_smooth(x, h, w, s), h, w, s)
        .into_iter()
        .map(|v| v / g)
        .collect()
}

/// Centered `s x s` box sum of white noise, divided by the square root of
/// the number of pixels inside the (edge-clipped) window so every output
/// has unit variance.
fn box_smooth(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += x[i * w + j];
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let half = s / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let r0 = i.saturating_sub(half);
        let r1 = (i + s - half).min(h);
        for j in 0..w {
            let c0 = j.saturating_sub(half);
            let c1 = (j + s - half).min(w);
            let total = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                + sat[r0 * (w + 1) + c0];
            out.push(total / (((r1 - r0) * (c1 - c0)) as f64).sqrt());
        }
    }
    out
}
