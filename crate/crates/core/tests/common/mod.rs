#![allow(dead_code)]

use dmil::diffcore::{finite_diff_check_many, Tape, Tensor, Var, DEFAULT_EPS};
use dmil::milpool::{dmil_forward, AttentionVars, PoolingKind};
use dmil::model::{BoundParams, ParamStore, PixelClassifierBank};
use dmil::risk::{risk_combined, risk_mc, risk_ml, ClassPriors, RiskConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POOLINGS: [PoolingKind; 6] = [
    PoolingKind::Max,
    PoolingKind::Mean,
    PoolingKind::Lse { r: 0.7 },
    PoolingKind::Attention,
    PoolingKind::GatedAttention,
    PoolingKind::GeluGatedAttention,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// `[K, M]` embeddings whose entries in each column differ by at least 0.05,
/// so the column maxima are unique.
pub fn separated(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; k * m];
    for j in 0..m {
        let mut col: Vec<f64> = (0..k).map(|i| i as f64 * 0.3 - 0.5).collect();
        for i in (1..k).rev() {
            col.swap(i, rng.random_range(0..=i));
        }
        for (i, v) in col.into_iter().enumerate() {
            data[i * m + j] = v + rng.random_range(-0.1..0.1);
        }
    }
    Tensor::matrix(k, m, data).unwrap()
}

/// One random DMIL head: bag embeddings plus every parameter it reads.
#[derive(Clone)]
pub struct HeadCase {
    pub kind: PoolingKind,
    pub classes: usize,
    pub hidden: usize,
    pub bags: Vec<Tensor>,
    pub bank_w: Tensor,
    pub bank_b: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub w: Tensor,
    pub labels: Vec<usize>,
    pub priors: Vec<f64>,
    pub beta: f64,
}

impl HeadCase {
    pub fn random(kind: PoolingKind, seed: u64) -> Self {
        let mut r = rng(seed);
        let (m, c, l, b) = (
            r.random_range(2..5),
            r.random_range(2..5),
            r.random_range(1..4),
            r.random_range(2..5),
        );
        let bags = (0..b)
            .map(|_| {
                let k = r.random_range(1..7);
                separated(k, m, &mut r)
            })
            .collect();
        HeadCase {
            kind,
            classes: c,
            hidden: l,
            bags,
            bank_w: random(&[m, c], &mut r, -1.0, 1.0),
            bank_b: random(&[c], &mut r, -0.5, 0.5),
            v: random(&[m, c * l], &mut r, -1.0, 1.0),
            u: random(&[m, c * l], &mut r, -1.0, 1.0),
            w: random(&[c * l], &mut r, -1.0, 1.0),
            labels: (0..b).map(|_| r.random_range(0..c)).collect(),
            priors: (0..c).map(|_| r.random_range(0.05..1.0)).collect(),
            beta: r.random_range(0.0..1.0),
        }
    }

    pub fn bank(&self) -> PixelClassifierBank {
        let mut store = ParamStore::new();
        PixelClassifierBank::init(
            self.bank_w.shape()[0],
            self.classes,
            &mut store,
            &mut rng(0),
        )
        .unwrap()
    }

    /// Every differentiable input, bags first.
    pub fn inputs(&self) -> Vec<Tensor> {
        let mut xs = self.bags.clone();
        xs.extend([
            self.bank_w.clone(),
            self.bank_b.clone(),
            self.v.clone(),
            self.u.clone(),
            self.w.clone(),
        ]);
        xs
    }

    /// Bag scores `[B, C]` of the inputs laid out as in [`HeadCase::inputs`].
    pub fn scores(&self, tape: &mut Tape, xs: &[Var]) -> dmil::Result<Var> {
        let nb = self.bags.len();
        let bank = self.bank();
        let params = BoundParams::from_vars(vec![xs[nb], xs[nb + 1]]);
        let gated = self.kind.attention_variant().is_some_and(|v| v.is_gated());
        let attn = AttentionVars {
            v: xs[nb + 2],
            u: gated.then_some(xs[nb + 3]),
            w: xs[nb + 4],
            classes: self.classes,
            hidden: self.hidden,
        };
        let mut rows = Vec::with_capacity(nb);
        for h in &xs[..nb] {
            let out = dmil_forward(tape, *h, self.kind, Some(&attn), &bank, &params)?;
            rows.push(out.bag_scores);
        }
        let s = tape.concat(&rows, 0)?;
        tape.reshape(s, &[nb, self.classes])
    }

    pub fn label_matrix(&self) -> Tensor {
        dmil::risk::one_hot(&self.labels, self.classes).unwrap()
    }

    pub fn risk_config(&self) -> RiskConfig {
        RiskConfig::new(self.beta, ClassPriors::new(self.priors.clone()).unwrap()).unwrap()
    }

    /// Worst relative finite-difference error of the combined risk.
    pub fn gradient_error(&self) -> f64 {
        let y = self.label_matrix();
        let cfg = self.risk_config();
        finite_diff_check_many(
            |t, xs| {
                let s = self.scores(t, xs)?;
                risk_combined(t, s, &y, &cfg)
            },
            &self.inputs(),
            DEFAULT_EPS,
        )
        .unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskKind {
    Mc,
    Ml,
    Combined,
}

/// A random `[B, C]` batch. With `clamp`, positives score high and the
/// rest low, so the non-negativity clamp fires for every present class.
pub struct RiskCase {
    pub batch: usize,
    pub classes: usize,
    pub scores: Tensor,
    pub labels: Vec<usize>,
    pub priors: Vec<f64>,
    pub beta: f64,
}

impl RiskCase {
    pub fn random(seed: u64, clamp: bool) -> Self {
        let mut r = rng(seed);
        let (b, c) = (r.random_range(2..9), r.random_range(1..5));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let mut scores = Vec::with_capacity(b * c);
        for &y in &labels {
            for i in 0..c {
                scores.push(match (clamp, i == y) {
                    (false, _) => r.random_range(-3.0..3.0),
                    (true, true) => r.random_range(2.0..4.0),
                    (true, false) => r.random_range(-4.0..-2.0),
                });
            }
        }
        let priors = (0..c)
            .map(|_| {
                if clamp {
                    r.random_range(0.6..1.0)
                } else {
                    r.random_range(0.05..1.0)
                }
            })
            .collect();
        RiskCase {
            batch: b,
            classes: c,
            scores: Tensor::matrix(b, c, scores).unwrap(),
            labels,
            priors,
            beta: r.random_range(0.0..1.0),
        }
    }

    pub fn label_matrix(&self) -> Tensor {
        dmil::risk::one_hot(&self.labels, self.classes).unwrap()
    }

    pub fn priors(&self) -> ClassPriors {
        ClassPriors::new(self.priors.clone()).unwrap()
    }

    pub fn value(&self, kind: RiskKind) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(self.scores.clone());
        let r = self.apply(&mut tape, s, kind).unwrap();
        tape.value(r).item()
    }

    pub fn apply(&self, tape: &mut Tape, s: Var, kind: RiskKind) -> dmil::Result<Var> {
        let y = self.label_matrix();
        match kind {
            RiskKind::Mc => risk_mc(tape, s, &y),
            RiskKind::Ml => risk_ml(tape, s, &y, &self.priors()),
            RiskKind::Combined => risk_combined(
                tape,
                s,
                &y,
                &RiskConfig::new(self.beta, self.priors()).unwrap(),
            ),
        }
    }

    pub fn gradient_error(&self, kind: RiskKind) -> f64 {
        finite_diff_check_many(
            |t, xs| self.apply(t, xs[0], kind),
            std::slice::from_ref(&self.scores),
            DEFAULT_EPS,
        )
        .unwrap()
    }

    /// Classes whose clamp fires under [`pu_oracle`].
    pub fn fired(&self) -> usize {
        let labels = self.label_matrix();
        pu_oracle(
            self.scores.data(),
            labels.data(),
            self.batch,
            self.classes,
            &self.priors,
        )
        .1
        .iter()
        .filter(|t| **t < 0.0)
        .count()
    }
}

/// `1 / (1 + exp(y z))`, written out directly.
pub fn oracle_sigmoid_loss(z: f64, y: f64) -> f64 {
    1.0 / (1.0 + (y * z).exp())
}

/// Unbiased positive-unlabeled risk assembled class by class: positive risk
/// weighted by the prior, plus the unlabeled negative risk, minus the
/// prior-weighted negative risk of the positives; averaged over classes.
/// Also returns each class's (unclamped) negative part.
pub fn pu_oracle(
    scores: &[f64],
    labels: &[f64],
    b: usize,
    c: usize,
    priors: &[f64],
) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut negatives = Vec::with_capacity(c);
    for i in 0..c {
        let positives: Vec<f64> = (0..b)
            .filter(|m| labels[m * c + i] == 1.0)
            .map(|m| scores[m * c + i])
            .collect();
        let unlabeled: Vec<f64> = (0..b)
            .filter(|m| labels[m * c + i] != 1.0)
            .map(|m| scores[m * c + i])
            .collect();
        let pi = priors[i];
        let mean = |v: &[f64], y: f64| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|z| oracle_sigmoid_loss(*z, y)).sum::<f64>() / v.len() as f64
            }
        };
        let r_pos_plus = mean(&positives, 1.0);
        let r_pos_minus = mean(&positives, -1.0);
        let r_unl_minus = mean(&unlabeled, -1.0);
        let negative = r_unl_minus - pi * r_pos_minus;
        total += pi * r_pos_plus + negative;
        negatives.push(negative);
    }
    (total / c as f64, negatives)
}

/// Most frequent label; ties go to the lowest id.
pub fn modal_oracle(labels: &[u16], classes: usize) -> u16 {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y as usize] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|n| *n == best).unwrap() as u16
}

/// `[C, M]` attention weights of every class in a head case, for one bag.
pub fn head_alphas(case: &HeadCase, bag: &Tensor) -> Option<Tensor> {
    let mut tape = Tape::new();
    let mut xs: Vec<Var> = vec![tape.constant(bag.clone())];
    for t in case.inputs().into_iter().skip(case.bags.len()) {
        xs.push(tape.constant(t));
    }
    let bank = case.bank();
    let params = BoundParams::from_vars(vec![xs[1], xs[2]]);
    let gated = case.kind.attention_variant().is_some_and(|v| v.is_gated());
    let attn = AttentionVars {
        v: xs[3],
        u: gated.then_some(xs[4]),
        w: xs[5],
        classes: case.classes,
        hidden: case.hidden,
    };
    let out = dmil_forward(&mut tape, xs[0], case.kind, Some(&attn), &bank, &params).unwrap();
    out.alphas.map(|a| tape.value(a).clone())
}

/// Bag scores `[C]` of one bag under a head case's parameters.
pub fn head_scores(case: &HeadCase, bag: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut xs: Vec<Var> = vec![tape.constant(bag.clone())];
    for t in case.inputs().into_iter().skip(case.bags.len()) {
        xs.push(tape.constant(t));
    }
    let one = HeadCase {
        bags: vec![bag.clone()],
        labels: vec![0],
        ..case.clone()
    };
    let s = one.scores(&mut tape, &xs).unwrap();
    tape.value(s).data().to_vec()
}

/// Rows of `t: [K, M]` reordered by `perm`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let m = t.shape()[1];
    let mut data = Vec::with_capacity(t.numel());
    for &i in perm {
        data.extend_from_slice(&t.data()[i * m..(i + 1) * m]);
    }
    Tensor::matrix(t.shape()[0], m, data).unwrap()
}

pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Checks `lr_label == modal(hr_reference)` on at least `n` bags cut from
/// generated default scenes. Returns `(bags checked, mismatches)`.
pub fn modal_label_sweep(n: usize, seed: u64) -> (usize, usize) {
    use dmil::scenegen::{split_into_bags, SceneGenConfig, SceneGenerator};
    let cfg = SceneGenConfig::default();
    let generator = SceneGenerator::new(cfg.clone(), seed).unwrap();
    let (mut checked, mut bad) = (0, 0);
    let mut index = 0u32;
    while checked < n {
        let scene = generator.generate(0, index);
        for bag in split_into_bags(&scene, cfg.cell, &cfg.index_bands).unwrap() {
            checked += 1;
            bad += (bag.lr_label() as u16 != modal_oracle(bag.hr_reference_for_eval(), cfg.classes))
                as usize;
        }
        index += 1;
    }
    (checked, bad)
}

/// Largest gap between a class's share of sampled bags and `1 / present`.
pub fn sampler_class_gap(draws: usize, seed: u64) -> f64 {
    use dmil::scenegen::BalancedSampler;
    let mut r = rng(seed);
    let classes = 6;
    // Heavily unbalanced labels with one class missing.
    let labels: Vec<usize> = (0..500)
        .map(|i| match i % 50 {
            0 => 4,
            1..=3 => 3,
            4..=12 => 2,
            13..=27 => 1,
            _ => 0,
        })
        .collect();
    let sampler = BalancedSampler::new(&labels, classes).unwrap();
    let mut counts = vec![0usize; classes];
    for _ in 0..draws {
        counts[labels[sampler.draw(&mut r).0]] += 1;
    }
    let present = sampler.present_classes() as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| (*c as f64 / draws as f64 - 1.0 / present).abs())
        .fold(0.0, f64::max)
}

/// Largest gap between estimated bag priors of generated training bags and
/// the presence frequencies of bags drawn by the balanced sampler.
pub fn prior_simulation_gap(draws: usize, seed: u64) -> f64 {
    use dmil::risk::class_presence;
    use dmil::scenegen::{bag_priors, BalancedSampler, SceneGenConfig, SceneSet};
    let cfg = SceneGenConfig {
        train_tiles: 8,
        test_tiles: 1,
        ..SceneGenConfig::default()
    };
    let set = SceneSet::generate(&cfg, seed).unwrap();
    let bags = set.bags("train", 0..cfg.train_tiles).unwrap();
    let pi = bag_priors(&bags, cfg.classes).unwrap();
    let labels: Vec<usize> = bags.iter().map(|b| b.lr_label()).collect();
    let sampler = BalancedSampler::new(&labels, cfg.classes).unwrap();
    let presence: Vec<Vec<bool>> = bags
        .iter()
        .map(|b| class_presence(b.hr_reference_for_eval(), cfg.classes))
        .collect();
    let mut r = rng(seed);
    let mut hits = vec![0usize; cfg.classes];
    for _ in 0..draws {
        let (idx, _) = sampler.draw(&mut r);
        for (h, p) in hits.iter_mut().zip(&presence[idx]) {
            *h += *p as usize;
        }
    }
    pi.as_slice()
        .iter()
        .zip(&hits)
        .map(|(p, h)| (p - (*h as f64 / draws as f64).max(dmil::risk::PRIOR_FLOOR)).abs())
        .fold(0.0, f64::max)
}

/// Published per-class producer's accuracies and average accuracy (%) of
/// the six models on the full test set and with 80% of the training data.
/// Classes: Forest, Shrubland, Grassland, Wetlands, Croplands, Built-up,
/// Barren, Water.
pub const PUBLISHED_ROWS: [(&str, [f64; 8], f64); 12] = [
    (
        "std/full",
        [0.74, 0.20, 0.47, 0.55, 0.65, 0.79, 0.08, 0.92],
        54.8,
    ),
    (
        "mean/full",
        [0.75, 0.18, 0.52, 0.53, 0.68, 0.72, 0.08, 0.94],
        55.0,
    ),
    (
        "lse/full",
        [0.77, 0.19, 0.51, 0.49, 0.68, 0.76, 0.05, 0.93],
        54.8,
    ),
    (
        "attn/full",
        [0.80, 0.19, 0.29, 0.37, 0.66, 0.75, 0.01, 0.96],
        50.3,
    ),
    (
        "gattn/full",
        [0.74, 0.16, 0.60, 0.53, 0.68, 0.77, 0.09, 0.92],
        56.1,
    ),
    (
        "prop/full",
        [0.74, 0.19, 0.54, 0.53, 0.73, 0.77, 0.00, 1.00],
        56.3,
    ),
    (
        "std/80",
        [0.67, 0.20, 0.58, 0.58, 0.58, 0.82, 0.07, 0.90],
        55.0,
    ),
    (
        "mean/80",
        [0.77, 0.21, 0.44, 0.63, 0.72, 0.74, 0.06, 0.92],
        56.1,
    ),
    (
        "lse/80",
        [0.75, 0.18, 0.51, 0.55, 0.75, 0.70, 0.10, 0.94],
        56.1,
    ),
    (
        "attn/80",
        [0.83, 0.27, 0.50, 0.51, 0.62, 0.77, 0.03, 0.96],
        56.3,
    ),
    (
        "gattn/80",
        [0.80, 0.20, 0.53, 0.60, 0.68, 0.76, 0.01, 0.95],
        56.7,
    ),
    (
        "prop/80",
        [0.80, 0.21, 0.64, 0.53, 0.61, 0.77, 0.00, 0.98],
        56.9,
    ),
];

/// Confusion matrix with 100 reference pixels per class whose diagonal is
/// `100 * pa`; misses go to the next class.
pub fn confusion_from_accuracies(pa: &[f64]) -> dmil::evalx::ConfusionMatrix {
    let c = pa.len();
    let mut cm = dmil::evalx::ConfusionMatrix::new(c);
    for (i, p) in pa.iter().enumerate() {
        let hits = (p * 100.0).round() as usize;
        let reference = vec![i as u16; 100];
        let mut predicted = vec![i as u16; hits];
        predicted.resize(100, ((i + 1) % c) as u16);
        cm.accumulate(&predicted, &reference, None).unwrap();
    }
    cm
}

/// Largest gap (percentage points) between the metric AA of a published
/// row and its reported AA.
pub fn published_aa_gap() -> f64 {
    PUBLISHED_ROWS
        .iter()
        .map(|(_, pa, aa)| {
            let m = dmil::evalx::metrics(&confusion_from_accuracies(pa)).unwrap();
            (m.aa * 100.0 - aa).abs()
        })
        .fold(0.0, f64::max)
}
