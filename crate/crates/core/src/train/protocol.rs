use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{random_search, ModelKind, SearchOutcome, SearchSpace, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::risk::ClassPriors;
use crate::scenegen::{bag_priors, Bag, SceneSet};

/// Epochs of every tuning trial.
pub const TUNE_EPOCHS: usize = 5;
/// Epochs of the final replicates.
pub const FINAL_EPOCHS: usize = 10;
/// Fraction of training tiles set aside for tuning under [`TuneSplit::Holdout20`].
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Where hyperparameters are tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneSplit {
    /// Train on the whole training split, score on the separate `val` split.
    External,
    /// Train and score on the first 20% of training tiles; final models use
    /// the remaining 80%.
    Holdout20,
}

impl fmt::Display for TuneSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuneSplit::External => "external",
            TuneSplit::Holdout20 => "holdout20",
        })
    }
}

impl FromStr for TuneSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(TuneSplit::External),
            "holdout20" => Ok(TuneSplit::Holdout20),
            _ => Err(Error::config(format!(
                "unknown tune split {s:?} (expected external or holdout20)"
            ))),
        }
    }
}

/// Bags of one dataset arranged for tuning, final training and testing.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    split: TuneSplit,
    classes: usize,
    train: Vec<Bag>,
    test: Vec<Bag>,
    val: Vec<Bag>,
    holdout: usize,
    tune_priors: ClassPriors,
    final_priors: ClassPriors,
}

impl ExperimentData {
    pub fn new(set: &SceneSet, split: TuneSplit) -> Result<Self> {
        let classes = set.classes();
        let tiles = set.scenes("train")?.len();
        let train = set.bags("train", 0..tiles)?;
        let test = set.bags("test", 0..set.scenes("test")?.len())?;
        let (val, holdout) = match split {
            TuneSplit::External => {
                if !set.has_split("val") {
                    return Err(Error::data(
                        "tune split external needs a val split in the dataset",
                    ));
                }
                (set.bags("val", 0..set.scenes("val")?.len())?, 0)
            }
            TuneSplit::Holdout20 => {
                let held = holdout_tiles(tiles)?;
                (Vec::new(), held * train.len() / tiles)
            }
        };
        let mut data = ExperimentData {
            split,
            classes,
            train,
            test,
            val,
            holdout,
            tune_priors: ClassPriors::new(vec![1.0; classes])?,
            final_priors: ClassPriors::new(vec![1.0; classes])?,
        };
        data.tune_priors = bag_priors(data.tune_bags(), classes)?;
        data.final_priors = bag_priors(data.final_bags(), classes)?;
        Ok(data)
    }

    pub fn split(&self) -> TuneSplit {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tune_bags(&self) -> &[Bag] {
        match self.split {
            TuneSplit::External => &self.train,
            TuneSplit::Holdout20 => &self.train[..self.holdout],
        }
    }

    /// Bags whose HR reference scores tuning trials.
    pub fn score_bags(&self) -> &[Bag] {
        match self.split {
            TuneSplit::External => &self.val,
            TuneSplit::Holdout20 => &self.train[..self.holdout],
        }
    }

    pub fn final_bags(&self) -> &[Bag] {
        &self.train[self.holdout..]
    }

    pub fn test_bags(&self) -> &[Bag] {
        &self.test
    }

    pub fn tune_data(&self) -> TrainData<'_> {
        TrainData {
            bags: self.tune_bags(),
            classes: self.classes,
            priors: &self.tune_priors,
        }
    }

    pub fn final_data(&self) -> TrainData<'_> {
        TrainData {
            bags: self.final_bags(),
            classes: self.classes,
            priors: &self.final_priors,
        }
    }
}

/// Number of leading training tiles used for tuning.
pub fn holdout_tiles(tiles: usize) -> Result<usize> {
    if tiles < 2 {
        return Err(Error::data("holdout20 needs at least two training tiles"));
    }
    Ok(((tiles as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, tiles - 1))
}

/// Random search for `kind` with [`TUNE_EPOCHS`]-epoch trials.
pub fn tune_kind(
    data: &ExperimentData,
    kind: ModelKind,
    base: Option<&TrainConfig>,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<SearchOutcome> {
    let mut cfg = match base {
        Some(b) if b.kind == kind => b.clone(),
        Some(_) => {
            return Err(Error::config(
                "base config kind does not match the tuned kind",
            ))
        }
        None => TrainConfig::new(kind, space.lr[0], space.weight_decay[0], None, None),
    };
    cfg.epochs = TUNE_EPOCHS;
    random_search(
        space,
        &cfg,
        trials,
        &data.tune_data(),
        data.score_bags(),
        seed,
        jobs,
    )
}

/// The tuned configuration with the final epoch count.
pub fn final_config(tuned: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: FINAL_EPOCHS,
        ..tuned.clone()
    }
}
