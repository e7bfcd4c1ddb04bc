use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, run_training, ModelKind, Network, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::evalx::evaluate;
use crate::scenegen::Bag;

/// Sampling distributions of the tuned hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Log-uniform bounds.
    pub lr: [f64; 2],
    /// Log-uniform bounds.
    pub weight_decay: [f64; 2],
    /// Log-uniform bounds.
    pub r: [f64; 2],
    /// Uniform bounds.
    pub beta: [f64; 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: [1e-5, 1e-2],
            weight_decay: [1e-6, 1e-2],
            r: [1e-4, 1e5],
            beta: [0.0, 1.0],
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let v = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    v.clamp(lo, hi)
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("r", self.r),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!(
                    "{name} range must satisfy 0 < lo <= hi"
                )));
            }
        }
        let [lo, hi] = self.beta;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("beta range must lie inside [0, 1]"));
        }
        Ok(())
    }

    /// Draws `(lr, weight_decay, beta, r)`, leaving out what `kind` does not use.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        kind: ModelKind,
        rng: &mut R,
    ) -> (f64, f64, Option<f64>, Option<f64>) {
        let lr = log_uniform(rng, self.lr);
        let wd = log_uniform(rng, self.weight_decay);
        let beta = kind
            .is_dmil()
            .then(|| self.beta[0] + rng.random::<f64>() * (self.beta[1] - self.beta[0]));
        let r = (kind == ModelKind::Lse).then(|| log_uniform(rng, self.r));
        (lr, wd, beta, r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lr: f64,
    pub wd: f64,
    pub beta: Option<f64>,
    pub r: Option<f64>,
    #[serde(rename = "tune_AA")]
    pub tune_aa: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub best_trial: usize,
    pub log: Vec<TrialRecord>,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Seeded random search. Every trial trains `base` (with sampled
/// hyperparameters and a derived seed) on `tune`, then scores HR average
/// accuracy on `score_bags`. The trial sequence depends only on `seed`;
/// `jobs` only changes how many trials run at once.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    trials: usize,
    tune: &TrainData,
    score_bags: &[Bag],
    seed: u64,
    jobs: usize,
) -> Result<SearchOutcome> {
    space.validate()?;
    if trials == 0 {
        return Err(Error::config("at least one trial is needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<TrainConfig> = (0..trials)
        .map(|t| {
            let (lr, wd, beta, r) = space.sample(base.kind, &mut rng);
            TrainConfig {
                lr,
                weight_decay: wd,
                beta,
                r,
                seed: derive_seed(seed, t as u64),
                ..base.clone()
            }
        })
        .collect();
    let results: Vec<Result<Option<f64>>> = thread_pool(jobs)?.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(t, cfg)| match run_training(cfg, tune, None) {
                Ok(outcome) => {
                    let aa = evaluate(&outcome.network, score_bags)?.1.aa;
                    info!("{} trial {t}: AA {:.4}", cfg.kind, aa);
                    Ok(Some(aa))
                }
                Err(Error::Diverged { step, config_hash }) => {
                    warn!(
                        "{} trial {t} diverged at step {step} ({config_hash})",
                        cfg.kind
                    );
                    Ok(None)
                }
                Err(e) => Err(e),
            })
            .collect()
    });
    let mut log = Vec::with_capacity(trials);
    for (t, (cfg, res)) in configs.iter().zip(results).enumerate() {
        let aa = res?;
        log.push(TrialRecord {
            trial: t,
            lr: cfg.lr,
            wd: cfg.weight_decay,
            beta: cfg.beta,
            r: cfg.r,
            tune_aa: aa,
            status: if aa.is_some() {
                TrialStatus::Ok
            } else {
                TrialStatus::Diverged
            },
        });
    }
    let best = log
        .iter()
        .filter_map(|r| r.tune_aa.map(|aa| (r.trial, aa)))
        .fold(None, |best: Option<(usize, f64)>, (t, aa)| match best {
            Some((_, b)) if b >= aa => best,
            _ => Some((t, aa)),
        });
    match best {
        Some((t, _)) => Ok(SearchOutcome {
            best: configs[t].clone(),
            best_trial: t,
            log,
        }),
        None => Err(Error::SearchExhausted { trials, log }),
    }
}

pub fn write_trial_log(path: &Path, log: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["trial", "lr", "wd", "beta", "r", "tune_AA", "status"])
        .map_err(|e| csv_error(path, e))?;
    for r in log {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        w.write_record([
            r.trial.to_string(),
            format!("{:e}", r.lr),
            format!("{:e}", r.wd),
            opt(r.beta),
            opt(r.r),
            r.tune_aa.map(|x| format!("{x:.6}")).unwrap_or_default(),
            match r.status {
                TrialStatus::Ok => "ok".into(),
                TrialStatus::Diverged => "diverged".into(),
            },
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub test_aa: Option<f64>,
    pub test_miou: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub network: Network,
    pub chosen: usize,
    pub records: Vec<ReplicateRecord>,
    pub history: Vec<super::EpochRecord>,
}

type ReplicateRun = Option<(Network, Vec<super::EpochRecord>, f64, f64)>;

/// Trains `n` replicates with derived seeds and keeps the one whose HR
/// average accuracy on `eval_bags` is the median. Diverged runs are left
/// out; with an even number of survivors the worst is dropped as well.
pub fn replicate_and_select(
    cfg: &TrainConfig,
    data: &TrainData,
    eval_bags: &[Bag],
    n: usize,
    jobs: usize,
) -> Result<Selection> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::config(format!(
            "replicate count must be odd, got {n}"
        )));
    }
    let seeds: Vec<u64> = (0..n)
        .map(|i| derive_seed(cfg.seed, 1000 + i as u64))
        .collect();
    let runs: Vec<Result<ReplicateRun>> =
        thread_pool(jobs)?.install(|| {
            seeds
            .par_iter()
            .map(|&seed| {
                let run_cfg = TrainConfig { seed, ..cfg.clone() };
                match run_training(&run_cfg, data, None) {
                    Ok(out) => {
                        let (_, m) = evaluate(&out.network, eval_bags)?;
                        Ok(Some((out.network, out.history, m.aa, m.miou)))
                    }
                    Err(Error::Diverged { step, config_hash }) => {
                        warn!("replicate with seed {seed} diverged at step {step} ({config_hash})");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
        });
    let mut records = Vec::with_capacity(n);
    let mut survivors = Vec::new();
    for (i, (seed, run)) in seeds.iter().zip(runs).enumerate() {
        let run = run?;
        records.push(ReplicateRecord {
            replicate: i,
            seed: *seed,
            test_aa: run.as_ref().map(|r| r.2),
            test_miou: run.as_ref().map(|r| r.3),
            status: if run.is_some() {
                TrialStatus::Ok
            } else {
                TrialStatus::Diverged
            },
        });
        if let Some(r) = run {
            survivors.push((i, r));
        }
    }
    if survivors.is_empty() {
        return Err(Error::Diverged {
            step: 0,
            config_hash: cfg.hash(),
        });
    }
    survivors.sort_by(|a, b| a.1 .2.total_cmp(&b.1 .2).then(a.0.cmp(&b.0)));
    if survivors.len() % 2 == 0 {
        survivors.remove(0);
    }
    let mid = survivors.len() / 2;
    let (chosen, (network, history, _, _)) = survivors.swap_remove(mid);
    Ok(Selection {
        network,
        chosen,
        records,
        history,
    })
}

pub fn write_replicate_log(path: &Path, records: &[ReplicateRecord], chosen: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "replicate",
        "seed",
        "test_AA",
        "test_mIoU",
        "status",
        "selected",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in records {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record([
            r.replicate.to_string(),
            r.seed.to_string(),
            opt(r.test_aa),
            opt(r.test_miou),
            match r.status {
                TrialStatus::Ok => "ok".into(),
                TrialStatus::Diverged => "diverged".into(),
            },
            (r.replicate == chosen).to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
