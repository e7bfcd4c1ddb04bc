//! Optimization: Adam, the training loop for the pixel-wise baseline and
//! the DMIL variants, random hyperparameter search and median-of-n
//! replicate selection.

mod adam;
mod network;
mod protocol;
mod search;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use network::{Network, NetworkOutput, CHECKPOINT_VERSION};
pub use protocol::{
    final_config, holdout_tiles, tune_kind, ExperimentData, TuneSplit, FINAL_EPOCHS,
    HOLDOUT_FRACTION, TUNE_EPOCHS,
};
pub use search::{
    random_search, replicate_and_select, write_replicate_log, write_trial_log, ReplicateRecord,
    SearchOutcome, SearchSpace, Selection, TrialRecord, TrialStatus,
};

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalx::evaluate;
use crate::milpool::PoolingKind;
use crate::model::{BoundParams, ExtractorConfig};
use crate::risk::{one_hot, risk_combined, risk_mc, ClassPriors, RiskConfig};
use crate::scenegen::{upsample_nearest, Bag, BalancedSampler, Dihedral};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Pixel classifier trained on upsampled LR labels.
    Std,
    Mean,
    Lse,
    Attn,
    Gattn,
    /// Gated attention with GeLU branches.
    Prop,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Std,
        ModelKind::Mean,
        ModelKind::Lse,
        ModelKind::Attn,
        ModelKind::Gattn,
        ModelKind::Prop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Std => "std",
            ModelKind::Mean => "mean",
            ModelKind::Lse => "lse",
            ModelKind::Attn => "attn",
            ModelKind::Gattn => "gattn",
            ModelKind::Prop => "prop",
        }
    }

    /// Column title used in reports.
    pub fn title(self) -> &'static str {
        match self {
            ModelKind::Std => "Std",
            ModelKind::Mean => "Mean",
            ModelKind::Lse => "LSE",
            ModelKind::Attn => "Attn",
            ModelKind::Gattn => "GAttn",
            ModelKind::Prop => "Prop",
        }
    }

    pub fn is_dmil(self) -> bool {
        self != ModelKind::Std
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ModelKind::Attn | ModelKind::Gattn | ModelKind::Prop)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model kind {s:?} (expected std, mean, lse, attn, gattn or prop)"
                ))
            })
    }
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    64
}

fn default_attention_hidden() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the multi-class risk; DMIL kinds only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Log-sum-exp sharpness; `lse` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to `ceil(bags / batch_size)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ExtractorConfig,
    /// Hidden width `L` of each class's attention layer.
    #[serde(default = "default_attention_hidden")]
    pub attention_hidden: usize,
}

impl TrainConfig {
    /// A configuration with default schedule and architecture.
    pub fn new(
        kind: ModelKind,
        lr: f64,
        weight_decay: f64,
        beta: Option<f64>,
        r: Option<f64>,
    ) -> Self {
        TrainConfig {
            kind,
            lr,
            weight_decay,
            beta,
            r,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            steps_per_epoch: None,
            seed: 0,
            model: ExtractorConfig::default(),
            attention_hidden: default_attention_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight decay must be finite and non-negative",
            ));
        }
        match (self.kind, self.beta) {
            (ModelKind::Std, Some(_)) => {
                return Err(Error::config("beta does not apply to the std model"))
            }
            (ModelKind::Std, None) => {}
            (_, None) => return Err(Error::config(format!("{} needs beta", self.kind))),
            (_, Some(b)) if !(0.0..=1.0).contains(&b) => {
                return Err(Error::config(format!("beta {b} outside [0, 1]")));
            }
            _ => {}
        }
        match (self.kind, self.r) {
            (ModelKind::Lse, None) => return Err(Error::config("lse needs r")),
            (ModelKind::Lse, Some(r)) if !(r > 0.0 && r.is_finite()) => {
                return Err(Error::config(format!("r {r} must be positive")));
            }
            (ModelKind::Lse, _) => {}
            (_, Some(_)) => {
                return Err(Error::config(format!("r does not apply to {}", self.kind)))
            }
            (_, None) => {}
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config(
                "batch size and steps per epoch must be positive",
            ));
        }
        if self.kind.is_attention() && self.attention_hidden == 0 {
            return Err(Error::config("attention hidden width must be positive"));
        }
        self.model.validate()
    }

    pub fn pooling(&self) -> Option<PoolingKind> {
        match self.kind {
            ModelKind::Std => None,
            ModelKind::Mean => Some(PoolingKind::Mean),
            ModelKind::Lse => Some(PoolingKind::Lse {
                r: self.r.unwrap_or(1.0),
            }),
            ModelKind::Attn => Some(PoolingKind::Attention),
            ModelKind::Gattn => Some(PoolingKind::GatedAttention),
            ModelKind::Prop => Some(PoolingKind::GeluGatedAttention),
        }
    }

    /// Short digest identifying the configuration in logs and errors.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Seed number `index` derived from `seed`, independent for every index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng.next_u64()
}

/// Training bags with their class count and bag-level priors.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub bags: &'a [Bag],
    pub classes: usize,
    pub priors: &'a ClassPriors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training risk over the epoch's steps.
    pub risk: f64,
    /// HR average accuracy on the evaluation bags, when given.
    pub eval_aa: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
}

fn transformed_pixels(bag: &Bag, t: Dihedral) -> Tensor {
    if t == Dihedral::IDENTITY {
        return bag.pixels().clone();
    }
    let s = bag.pixels().shape();
    Tensor::new(s.to_vec(), t.apply(bag.pixels().data(), s[0], s[2])).expect("same shape")
}

/// Risk of one batch and the gradient of every parameter.
///
/// Only one bag's graph is alive at a time. For DMIL kinds the batch risk
/// is differentiated with respect to the `[B, C]` bag scores first; each
/// bag is then replayed with its row of that gradient as the seed.
fn batch_gradients(
    net: &Network,
    cfg: &TrainConfig,
    data: &TrainData,
    batch: &[(usize, Dihedral)],
    pixel_labels: &mut [Option<Tensor>],
) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = net
        .store()
        .tensors()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let inputs: Vec<Tensor> = batch
        .iter()
        .map(|&(idx, t)| transformed_pixels(&data.bags[idx], t))
        .collect();
    let labels: Vec<usize> = batch
        .iter()
        .map(|&(idx, _)| data.bags[idx].lr_label())
        .collect();
    let accumulate = |grads: &mut Vec<Tensor>, tape: &Tape, params: &BoundParams| {
        for (acc, v) in grads.iter_mut().zip(params.vars()) {
            if let Some(g) = tape.grad(*v) {
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    };

    if !cfg.kind.is_dmil() {
        let weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (x, &y) in inputs.into_iter().zip(&labels) {
            let target = match &pixel_labels[y] {
                Some(t) => t.clone(),
                None => {
                    let k = data.bags[0].side();
                    let hr_like: Vec<usize> = upsample_nearest(&[y as u16], 1, 1, k)
                        .into_iter()
                        .map(usize::from)
                        .collect();
                    let t = one_hot(&hr_like, data.classes)?;
                    pixel_labels[y] = Some(t.clone());
                    t
                }
            };
            let mut tape = Tape::new();
            let params = net.store().bind(&mut tape);
            let x = tape.constant(x);
            let out = net.forward(&mut tape, &params, x)?;
            let loss = risk_mc(&mut tape, out.pixel_scores, &target)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Ok((value, Vec::new()));
            }
            total += value;
            let loss = tape.scale(loss, weight)?;
            tape.backward(loss)?;
            accumulate(&mut grads, &tape, &params);
        }
        return Ok((total * weight, grads));
    }

    let mut scores = Vec::with_capacity(batch.len() * data.classes);
    for x in &inputs {
        let mut tape = Tape::new();
        let params = net.store().bind_frozen(&mut tape);
        let x = tape.constant(x.clone());
        let out = net.forward(&mut tape, &params, x)?;
        scores.extend_from_slice(tape.value(out.bag_scores.expect("dmil scores")).data());
    }
    let mut risk_tape = Tape::new();
    let s = risk_tape.leaf(Tensor::new(vec![batch.len(), data.classes], scores)?);
    let y = one_hot(&labels, data.classes)?;
    let risk_cfg = RiskConfig::new(cfg.beta.unwrap_or(1.0), data.priors.clone())?;
    let risk = risk_combined(&mut risk_tape, s, &y, &risk_cfg)?;
    let value = risk_tape.value(risk).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    risk_tape.backward(risk)?;
    let seed = match risk_tape.grad(s) {
        Some(g) => g.clone(),
        None => return Ok((value, grads)),
    };
    for (x, row) in inputs
        .into_iter()
        .zip(seed.data().chunks_exact(data.classes))
    {
        let mut tape = Tape::new();
        let params = net.store().bind(&mut tape);
        let x = tape.constant(x);
        let out = net.forward(&mut tape, &params, x)?;
        let g = tape.constant(Tensor::vector(row.to_vec()));
        let weighted = tape.mul(out.bag_scores.expect("dmil scores"), g)?;
        let surrogate = tape.sum(weighted, None)?;
        tape.backward(surrogate)?;
        accumulate(&mut grads, &tape, &params);
    }
    Ok((value, grads))
}

/// Trains a freshly initialized network. Non-finite risks or gradients
/// abort with [`Error::Diverged`].
pub fn run_training(
    cfg: &TrainConfig,
    data: &TrainData,
    eval: Option<&[Bag]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.bags.is_empty() {
        return Err(Error::data("no training bags"));
    }
    if data.priors.len() != data.classes {
        return Err(Error::data("priors do not match the class count"));
    }
    let mut net = Network::new(cfg, data.classes)?;
    let labels: Vec<usize> = data.bags.iter().map(|b| b.lr_label()).collect();
    let sampler = BalancedSampler::new(&labels, data.classes)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| data.bags.len().div_ceil(cfg.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(net.store().tensors(), cfg.lr, cfg.weight_decay);
    let mut pixel_labels = vec![None; data.classes];
    let mut history = Vec::with_capacity(cfg.epochs);
    let diverged = |step: u64| Error::Diverged {
        step,
        config_hash: cfg.hash(),
    };
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sampler.batch(cfg.batch_size, &mut rng);
            let step = adam.steps() + 1;
            // The config is validated, so a domain error here comes from
            // parameters that have blown up.
            let (risk, grads) = match batch_gradients(&net, cfg, data, &batch, &mut pixel_labels) {
                Err(Error::Domain { op, detail }) => {
                    debug!("{op} failed at step {step}: {detail}");
                    return Err(diverged(step));
                }
                other => other?,
            };
            if !risk.is_finite() {
                return Err(diverged(step));
            }
            match adam.step(net.store_mut().tensors_mut(), &grads) {
                Err(Error::NonFiniteGradient { step }) => return Err(diverged(step)),
                other => other?,
            }
            if !net.store().tensors().iter().all(|t| t.all_finite()) {
                return Err(diverged(step));
            }
            total += risk;
        }
        let eval_aa = match eval {
            Some(bags) => Some(evaluate(&net, bags)?.1.aa),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            risk: total / steps as f64,
            eval_aa,
        };
        debug!(
            "{} epoch {}: risk {:.5} aa {:?}",
            cfg.kind, record.epoch, record.risk, record.eval_aa
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        network: net,
        history,
    })
}
