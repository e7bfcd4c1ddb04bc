//! On-disk scene sets: `manifest.json` plus one raw little-endian file per
//! scene holding the `f64` imagery, then the `u16` HR labels, then the
//! `u16` LR labels, all row-major. Offsets and byte lengths are recorded in
//! the manifest, so externally converted data can use the same layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{split_into_bags, Bag, Scene, SceneGenConfig, SceneGenerator};
use crate::error::{Error, Result};
use crate::risk::{balanced_weights, class_presence, estimate_bag_priors, ClassPriors};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Split names in generation order; the position is the split's stream id.
const SPLITS: [&str; 3] = ["train", "test", "val"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
    pub stream: u64,
    pub image_offset: u64,
    pub image_bytes: u64,
    pub hr_offset: u64,
    pub hr_bytes: u64,
    pub lr_offset: u64,
    pub lr_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub scenes: Vec<SceneEntry>,
    pub bags: usize,
    /// Bag-level class priors under the balanced sampler.
    pub priors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetManifest {
    pub format_version: u32,
    /// Generation seed; absent for imported data.
    pub seed: Option<u64>,
    pub config: SceneGenConfig,
    pub classes: usize,
    pub bands: usize,
    pub channels: usize,
    pub cell: usize,
    /// Priors of the training split.
    pub priors: Vec<f64>,
    pub class_means: Vec<Vec<f64>>,
    pub splits: BTreeMap<String, SplitInfo>,
}

/// A manifest together with its scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub manifest: SceneSetManifest,
    scenes: BTreeMap<String, Vec<Scene>>,
}

impl SceneSet {
    /// Generates every split of a synthetic dataset.
    pub fn generate(cfg: &SceneGenConfig, seed: u64) -> Result<Self> {
        let generator = SceneGenerator::new(cfg.clone(), seed)?;
        let counts = [cfg.train_tiles, cfg.test_tiles, cfg.val_tiles];
        let mut scenes = BTreeMap::new();
        let mut splits = BTreeMap::new();
        for (id, (&name, &n)) in SPLITS.iter().zip(&counts).enumerate() {
            if n == 0 {
                continue;
            }
            let list: Vec<Scene> = (0..n as u32)
                .into_par_iter()
                .map(|i| generator.generate(id as u32, i))
                .collect();
            let entries = list
                .iter()
                .enumerate()
                .map(|(i, s)| scene_entry(format!("{name}_{i:04}.bin"), s))
                .collect();
            let bags = list.len() * cfg.bags_per_tile();
            let priors = split_priors(&list, cfg)?;
            splits.insert(
                name.to_string(),
                SplitInfo {
                    scenes: entries,
                    bags,
                    priors: priors.as_slice().to_vec(),
                },
            );
            scenes.insert(name.to_string(), list);
        }
        let manifest = SceneSetManifest {
            format_version: FORMAT_VERSION,
            seed: Some(seed),
            config: cfg.clone(),
            classes: cfg.classes,
            bands: cfg.bands,
            channels: cfg.channels(),
            cell: cfg.cell,
            priors: splits["train"].priors.clone(),
            class_means: generator.class_means().to_vec(),
            splits,
        };
        Ok(SceneSet { manifest, scenes })
    }

    /// Writes the set into `dir`; a non-empty directory needs `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() {
            let non_empty = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .next()
                .is_some();
            if non_empty && !force {
                return Err(Error::config(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, info) in &self.manifest.splits {
            for (entry, scene) in info.scenes.iter().zip(&self.scenes[name]) {
                let path = dir.join(&entry.file);
                let mut bytes = Vec::with_capacity((entry.lr_offset + entry.lr_bytes) as usize);
                bytes.extend(scene.image.iter().flat_map(|v| v.to_le_bytes()));
                bytes.extend(scene.hr_labels.iter().flat_map(|v| v.to_le_bytes()));
                bytes.extend(scene.lr_labels.iter().flat_map(|v| v.to_le_bytes()));
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<SceneSetManifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.clone(),
                what: "dataset manifest".into(),
            },
            _ => Error::io(&path, e),
        })?;
        let manifest: SceneSetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "dataset format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.config.index_bands.validate(manifest.bands)?;
        if manifest.channels != manifest.bands + 4 || manifest.priors.len() != manifest.classes {
            return Err(Error::data(
                "manifest channel or prior count is inconsistent",
            ));
        }
        if !manifest.splits.contains_key("train") || !manifest.splits.contains_key("test") {
            return Err(Error::data("dataset needs train and test splits"));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut scenes = BTreeMap::new();
        for (name, info) in &manifest.splits {
            let list = info
                .scenes
                .iter()
                .map(|e| read_scene(dir, e, &manifest))
                .collect::<Result<Vec<_>>>()?;
            scenes.insert(name.clone(), list);
        }
        Ok(SceneSet { manifest, scenes })
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.scenes.contains_key(split)
    }

    pub fn scenes(&self, split: &str) -> Result<&[Scene]> {
        self.scenes
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::data(format!("dataset has no {split} split")))
    }

    /// Bags of a range of tiles of one split, tile by tile.
    pub fn bags(&self, split: &str, tiles: std::ops::Range<usize>) -> Result<Vec<Bag>> {
        let scenes = self.scenes(split)?;
        if tiles.end > scenes.len() {
            return Err(Error::data(format!(
                "tiles {tiles:?} out of range for the {} tiles of {split}",
                scenes.len()
            )));
        }
        let mut out = Vec::new();
        for s in &scenes[tiles] {
            out.extend(split_into_bags(
                s,
                self.manifest.cell,
                &self.manifest.config.index_bands,
            )?);
        }
        Ok(out)
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn channels(&self) -> usize {
        self.manifest.channels
    }
}

/// Priors of a bag collection under the balanced sampler.
pub fn bag_priors(bags: &[Bag], classes: usize) -> Result<ClassPriors> {
    let labels: Vec<usize> = bags.iter().map(|b| b.lr_label()).collect();
    let weights = balanced_weights(&labels, classes)?;
    let presence: Vec<Vec<bool>> = bags
        .iter()
        .map(|b| class_presence(b.hr_reference_for_eval(), classes))
        .collect();
    estimate_bag_priors(&presence, &weights, classes)
}

fn split_priors(scenes: &[Scene], cfg: &SceneGenConfig) -> Result<ClassPriors> {
    let mut bags = Vec::new();
    for s in scenes {
        bags.extend(split_into_bags(s, cfg.cell, &cfg.index_bands)?);
    }
    bag_priors(&bags, cfg.classes)
}

fn scene_entry(file: String, s: &Scene) -> SceneEntry {
    let image_bytes = (s.image.len() * 8) as u64;
    let hr_bytes = (s.hr_labels.len() * 2) as u64;
    let lr_bytes = (s.lr_labels.len() * 2) as u64;
    SceneEntry {
        file,
        height: s.height,
        width: s.width,
        bands: s.bands,
        seed: s.seed,
        stream: s.stream,
        image_offset: 0,
        image_bytes,
        hr_offset: image_bytes,
        hr_bytes,
        lr_offset: image_bytes + hr_bytes,
        lr_bytes,
    }
}

fn read_scene(dir: &Path, e: &SceneEntry, m: &SceneSetManifest) -> Result<Scene> {
    let path: PathBuf = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| match err.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.clone(),
            what: "scene array file".into(),
        },
        _ => Error::io(&path, err),
    })?;
    let (h, w) = (e.height, e.width);
    if m.cell == 0 || h % m.cell != 0 || w % m.cell != 0 || e.bands != m.bands {
        return Err(Error::data(format!(
            "{}: extent does not fit the manifest",
            e.file
        )));
    }
    let lr_len = (h / m.cell) * (w / m.cell);
    let expected = [
        (e.image_bytes, (h * w * e.bands * 8) as u64),
        (e.hr_bytes, (h * w * 2) as u64),
        (e.lr_bytes, (lr_len * 2) as u64),
    ];
    if expected.iter().any(|(a, b)| a != b) {
        return Err(Error::data(format!(
            "{}: declared byte lengths do not match the extent",
            e.file
        )));
    }
    let section = |offset: u64, len: u64| -> Result<&[u8]> {
        bytes
            .get(offset as usize..(offset + len) as usize)
            .ok_or_else(|| Error::data(format!("{}: file shorter than declared", e.file)))
    };
    let image = section(e.image_offset, e.image_bytes)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = |offset, len| -> Result<Vec<u16>> {
        let out: Vec<u16> = section(offset, len)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(y) = out.iter().find(|y| **y as usize >= m.classes) {
            return Err(Error::data(format!("{}: label {y} out of range", e.file)));
        }
        Ok(out)
    };
    Ok(Scene {
        height: h,
        width: w,
        bands: e.bands,
        image,
        hr_labels: labels(e.hr_offset, e.hr_bytes)?,
        lr_labels: labels(e.lr_offset, e.lr_bytes)?,
        seed: e.seed,
        stream: e.stream,
    })
}
