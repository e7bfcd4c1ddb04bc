use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::milpool::{dmil_forward, AttentionParams, PoolingKind};
use crate::model::{BoundParams, FeatureExtractor, ParamStore, PixelClassifierBank};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Feature extractor, classifier bank and (for attention kinds) the
/// per-class attention layers, with their parameters.
#[derive(Clone, Debug)]
pub struct Network {
    config: TrainConfig,
    classes: usize,
    pooling: Option<PoolingKind>,
    store: ParamStore,
    extractor: FeatureExtractor,
    bank: PixelClassifierBank,
    attention: Option<AttentionParams>,
}

/// Bag and pixel scores of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// `[C]`, absent for the pixel-wise baseline.
    pub bag_scores: Option<Var>,
    /// `[K, C]`
    pub pixel_scores: Var,
}

impl Network {
    pub fn new(config: &TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let extractor = FeatureExtractor::init(&config.model, &mut store, &mut rng)?;
        let bank =
            PixelClassifierBank::init(config.model.embed_dim, classes, &mut store, &mut rng)?;
        let pooling = config.pooling();
        let attention = match pooling.and_then(|p| p.attention_variant()) {
            Some(variant) => Some(AttentionParams::init(
                variant,
                config.model.embed_dim,
                config.attention_hidden,
                classes,
                &mut store,
                &mut rng,
            )?),
            None => None,
        };
        Ok(Network {
            config: config.clone(),
            classes,
            pooling,
            store,
            extractor,
            bank,
            attention,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        self.attention.as_ref()
    }

    /// Scores of one bag `pixels: [k, k, channels]` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        pixels: Var,
    ) -> Result<NetworkOutput> {
        let h = self.extractor.extract_features(tape, params, pixels)?;
        match self.pooling {
            None => Ok(NetworkOutput {
                bag_scores: None,
                pixel_scores: self.bank.pixel_scores(tape, params, h)?,
            }),
            Some(kind) => {
                let attn = self.attention.as_ref().map(|a| a.bind(params));
                let out = dmil_forward(tape, h, kind, attn.as_ref(), &self.bank, params)?;
                Ok(NetworkOutput {
                    bag_scores: Some(out.bag_scores),
                    pixel_scores: out.pixel_scores,
                })
            }
        }
    }

    /// `[k * k, C]` pixel scores of one bag, without gradients.
    pub fn pixel_scores(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let x = tape.constant(pixels.clone());
        let h = self.extractor.extract_features(&mut tape, &params, x)?;
        let s = self.bank.pixel_scores(&mut tape, &params, h)?;
        Ok(tape.value(s).clone())
    }

    /// Writes `<path>` (JSON header) and `<path>.bin` (little-endian `f64`
    /// parameters in header order).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.store.num_scalars() * 8);
        let mut params = Vec::with_capacity(self.store.len());
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            params.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            classes: self.classes,
            config: self.config.clone(),
            data_file: data_file_name(path),
            data_sha256: hex::encode(Sha256::digest(&bytes)),
            params,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bin = data_path(path);
        fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&header)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e, "checkpoint"))?;
        let header: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format version {} is not supported",
                header.format_version
            )));
        }
        let bin = path.with_file_name(&header.data_file);
        let bytes = fs::read(&bin).map_err(|e| missing_or_io(&bin, e, "checkpoint data"))?;
        if hex::encode(Sha256::digest(&bytes)) != header.data_sha256 {
            return Err(Error::data(format!("{}: checksum mismatch", bin.display())));
        }
        let mut net = Network::new(&header.config, header.classes)?;
        if header.params.len() != net.store.len() {
            return Err(Error::data(
                "checkpoint parameter list does not match the model",
            ));
        }
        for (i, entry) in header.params.iter().enumerate() {
            let name_matches = net.store.names()[i] == entry.name;
            let t = &mut net.store.tensors_mut()[i];
            if !name_matches || t.shape() != entry.shape.as_slice() {
                return Err(Error::data(format!(
                    "checkpoint parameter {} does not match the model",
                    entry.name
                )));
            }
            let start = entry.offset as usize;
            let end = start + t.numel() * 8;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| Error::data("checkpoint data shorter than declared"))?;
            for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(net)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    classes: usize,
    config: TrainConfig,
    data_file: String,
    data_sha256: String,
    params: Vec<ParamEntry>,
}

fn data_file_name(path: &Path) -> String {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    name.to_string_lossy().into_owned()
}

fn data_path(path: &Path) -> PathBuf {
    path.with_file_name(data_file_name(path))
}

fn missing_or_io(path: &Path, e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            what: what.into(),
        }
    } else {
        Error::io(path, e)
    }
}
