//! Pixel feature extractor and the per-class linear classifiers.
//!
//! The extractor is two 3x3 convolutions (5x5 combined receptive field)
//! followed by a residual stack of 1x1 convolutions. Because every layer
//! after the first two is pointwise, the stack runs on the flattened
//! `[K, M]` pixel matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Spectral bands plus derived indices.
    pub in_channels: usize,
    pub conv_channels: usize,
    /// Embedding width `M`.
    pub embed_dim: usize,
    /// Each block is two 1x1 layers.
    pub res_blocks: usize,
    /// Spatial extent of each of the two initial convolutions.
    pub kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            in_channels: 14,
            conv_channels: 8,
            embed_dim: 8,
            res_blocks: 5,
            kernel: 3,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("conv_channels", self.conv_channels),
            ("embed_dim", self.embed_dim),
            ("kernel", self.kernel),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("extractor {name} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("extractor kernel must be odd"));
        }
        Ok(())
    }

    /// Side of the input window that influences one output pixel.
    pub fn receptive_field(&self) -> usize {
        2 * (self.kernel - 1) + 1
    }

    pub fn residual_depth(&self) -> usize {
        2 * self.res_blocks
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], aligned with its order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ResBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Layout of the extractor's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    blocks: Vec<ResBlock>,
}

impl FeatureExtractor {
    pub fn init(
        cfg: &ExtractorConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let (cin, cc, m) = (cfg.in_channels, cfg.conv_channels, cfg.embed_dim);
        let conv1_w = store.add(
            "extractor.conv1.weight",
            uniform_init(rng, &[k, k, cin, cc], k * k * cin),
        );
        let conv1_b = store.add("extractor.conv1.bias", Tensor::zeros(&[cc]));
        let conv2_w = store.add(
            "extractor.conv2.weight",
            uniform_init(rng, &[k, k, cc, m], k * k * cc),
        );
        let conv2_b = store.add("extractor.conv2.bias", Tensor::zeros(&[m]));
        let blocks = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                w1: store.add(
                    format!("extractor.res{i}.w1"),
                    uniform_init(rng, &[m, m], m),
                ),
                b1: store.add(format!("extractor.res{i}.b1"), Tensor::zeros(&[m])),
                w2: store.add(
                    format!("extractor.res{i}.w2"),
                    uniform_init(rng, &[m, m], m),
                ),
                b2: store.add(format!("extractor.res{i}.b2"), Tensor::zeros(&[m])),
            })
            .collect();
        Ok(FeatureExtractor {
            cfg: cfg.clone(),
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            blocks,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    /// Per-pixel embeddings `[H*W, M]` of an `[H, W, in_channels]` patch.
    ///
    /// Reflection padding keeps the output grid equal to the input grid.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        patch: Var,
    ) -> Result<Var> {
        let shape = tape.value(patch).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: shape,
                rhs: vec![self.cfg.in_channels],
            });
        }
        let rf = self.cfg.receptive_field();
        if shape[0] < rf || shape[1] < rf {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: shape,
                rhs: vec![rf, rf],
            });
        }
        let pad = Padding::Reflect(self.cfg.kernel / 2);
        let x = tape.conv2d(patch, params.var(self.conv1_w), pad)?;
        let x = tape.add(x, params.var(self.conv1_b))?;
        let x = tape.gelu(x)?;
        let x = tape.conv2d(x, params.var(self.conv2_w), pad)?;
        let x = tape.add(x, params.var(self.conv2_b))?;
        let x = tape.gelu(x)?;
        let mut h = tape.reshape(x, &[shape[0] * shape[1], self.cfg.embed_dim])?;
        for block in &self.blocks {
            let t = tape.matmul(h, params.var(block.w1))?;
            let t = tape.add(t, params.var(block.b1))?;
            let t = tape.gelu(t)?;
            let t = tape.matmul(t, params.var(block.w2))?;
            let t = tape.add(t, params.var(block.b2))?;
            h = tape.add(h, t)?;
        }
        Ok(h)
    }
}

/// `C` affine maps `f_i(h) = w_i . h + b_i`, stored as `W: [M, C]`, `b: [C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifierBank {
    classes: usize,
    embed_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl PixelClassifierBank {
    pub fn init(
        embed_dim: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embed_dim == 0 || classes == 0 {
            return Err(Error::config(
                "classifier bank needs positive width and class count",
            ));
        }
        let weight = store.add(
            "classifier.weight",
            uniform_init(rng, &[embed_dim, classes], embed_dim),
        );
        let bias = store.add("classifier.bias", Tensor::zeros(&[classes]));
        Ok(PixelClassifierBank {
            classes,
            embed_dim,
            weight,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Raw class scores `[K, C]` for pixel embeddings `[K, M]`.
    pub fn pixel_scores(&self, tape: &mut Tape, params: &BoundParams, h: Var) -> Result<Var> {
        let s = tape.value(h).shape();
        if s.len() != 2 || s[1] != self.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "pixel_scores",
                lhs: s.to_vec(),
                rhs: vec![self.embed_dim, self.classes],
            });
        }
        let scores = tape.matmul(h, params.var(self.weight))?;
        tape.add(scores, params.var(self.bias))
    }

    /// Scores `[C]` where row `i` of `z: [C, M]` is scored by classifier `i` only.
    pub fn diagonal_scores(&self, tape: &mut Tape, params: &BoundParams, z: Var) -> Result<Var> {
        let s = tape.value(z).shape();
        if s != [self.classes, self.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "diagonal_scores",
                lhs: s.to_vec(),
                rhs: vec![self.classes, self.embed_dim],
            });
        }
        let wt = tape.transpose(params.var(self.weight))?;
        let prod = tape.mul(z, wt)?;
        let dots = tape.sum(prod, Some(1))?;
        tape.add(dots, params.var(self.bias))
    }
}

/// Extractor plus classifier bank with freshly initialized parameters.
pub fn build_model(
    cfg: &ExtractorConfig,
    classes: usize,
    seed: u64,
) -> Result<(ParamStore, FeatureExtractor, PixelClassifierBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let extractor = FeatureExtractor::init(cfg, &mut store, &mut rng)?;
    let bank = PixelClassifierBank::init(cfg.embed_dim, classes, &mut store, &mut rng)?;
    Ok((store, extractor, bank))
}
