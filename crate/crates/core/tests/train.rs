mod common;

use common::*;
use dmil::diffcore::{Tape, Tensor};
use dmil::error::Error;
use dmil::risk::{one_hot, risk_combined, risk_mc, ClassPriors, RiskConfig};
use dmil::scenegen::{bag_priors, Bag, BalancedSampler, SceneGenConfig, SceneSet};
use dmil::train::{
    final_config, holdout_tiles, random_search, replicate_and_select, run_training, AdamState,
    ExperimentData, ModelKind, Network, SearchSpace, TrainConfig, TrainData, TuneSplit, BETA1,
    BETA2, EPSILON, FINAL_EPOCHS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_set(seed: u64, val: usize) -> SceneSet {
    let cfg = SceneGenConfig {
        tile_size: 64,
        cell: 16,
        train_tiles: 3,
        test_tiles: 1,
        val_tiles: val,
        ..SceneGenConfig::default()
    };
    SceneSet::generate(&cfg, seed).unwrap()
}

struct Fixture {
    bags: Vec<Bag>,
    test: Vec<Bag>,
    priors: ClassPriors,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let set = small_set(seed, 0);
        let bags = set.bags("train", 0..3).unwrap();
        let priors = bag_priors(&bags, 6).unwrap();
        let test = set.bags("test", 0..1).unwrap();
        Fixture { bags, test, priors }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            bags: &self.bags,
            classes: 6,
            priors: &self.priors,
        }
    }
}

fn config(kind: ModelKind, epochs: usize, steps: usize) -> TrainConfig {
    let beta = kind.is_dmil().then_some(0.5);
    let r = (kind == ModelKind::Lse).then_some(1.0);
    TrainConfig {
        epochs,
        batch_size: 8,
        steps_per_epoch: Some(steps),
        seed: 17,
        ..TrainConfig::new(kind, 3e-3, 1e-5, beta, r)
    }
}

#[test]
fn zero_epochs_leave_the_initial_network() {
    let fx = Fixture::new(1);
    let cfg = config(ModelKind::Attn, 0, 3);
    let out = run_training(&cfg, &fx.data(), None).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(
        out.network.store().tensors(),
        Network::new(&cfg, 6).unwrap().store().tensors()
    );
}

/// With beta = 1 the attention model's first-step risk is the multi-class
/// risk of the initial network on the first sampled batch.
#[test]
fn beta_one_risk_is_the_multi_class_risk() {
    let fx = Fixture::new(2);
    let cfg = TrainConfig {
        beta: Some(1.0),
        ..config(ModelKind::Attn, 1, 1)
    };
    let got = run_training(&cfg, &fx.data(), None).unwrap().history[0].risk;

    let net = Network::new(&cfg, 6).unwrap();
    let labels: Vec<usize> = fx.bags.iter().map(|b| b.lr_label()).collect();
    let sampler = BalancedSampler::new(&labels, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let batch = sampler.batch(cfg.batch_size, &mut rng);
    let mut scores = Vec::new();
    for &(idx, t) in &batch {
        let bag = fx.bags[idx].transformed(t);
        let mut tape = Tape::new();
        let params = net.store().bind_frozen(&mut tape);
        let x = tape.constant(bag.pixels().clone());
        let out = net.forward(&mut tape, &params, x).unwrap();
        scores.extend_from_slice(tape.value(out.bag_scores.unwrap()).data());
    }
    let y = one_hot(
        &batch.iter().map(|(i, _)| labels[*i]).collect::<Vec<_>>(),
        6,
    )
    .unwrap();
    let s = Tensor::matrix(batch.len(), 6, scores).unwrap();
    let mut tape = Tape::new();
    let sv = tape.constant(s);
    let mc = risk_mc(&mut tape, sv, &y).unwrap();
    let mc = tape.value(mc).item();
    let cfg1 = RiskConfig::new(1.0, ClassPriors::new(vec![0.3; 6]).unwrap()).unwrap();
    let combined = risk_combined(&mut tape, sv, &y, &cfg1).unwrap();
    assert_eq!(tape.value(combined).item(), mc);
    assert!((got - mc).abs() < 1e-12, "{got} vs {mc}");
}

#[test]
fn training_is_deterministic() {
    let fx = Fixture::new(3);
    for kind in [ModelKind::Std, ModelKind::Prop] {
        let cfg = config(kind, 2, 2);
        let a = run_training(&cfg, &fx.data(), Some(&fx.test)).unwrap();
        let b = run_training(&cfg, &fx.data(), Some(&fx.test)).unwrap();
        assert_eq!(a.history, b.history);
        let bits = |n: &Network| -> Vec<u64> {
            n.store()
                .tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a.network), bits(&b.network));
        assert!(a.history.iter().all(|r| r.eval_aa.is_some()));
    }
}

#[test]
fn mean_pooling_lowers_its_risk() {
    let fx = Fixture::new(4);
    let cfg = TrainConfig {
        batch_size: 16,
        ..config(ModelKind::Mean, 10, 4)
    };
    let h = run_training(&cfg, &fx.data(), None).unwrap().history;
    assert_eq!(h.len(), 10);
    assert!(h[9].risk < h[0].risk, "{:?}", h);
}

#[test]
fn invalid_training_inputs_are_rejected() {
    let fx = Fixture::new(5);
    let bad = TrainConfig {
        beta: None,
        ..config(ModelKind::Gattn, 1, 1)
    };
    assert!(matches!(
        run_training(&bad, &fx.data(), None),
        Err(Error::Config(_))
    ));
    let cfg = config(ModelKind::Std, 1, 1);
    let empty = TrainData {
        bags: &[],
        ..fx.data()
    };
    assert!(run_training(&cfg, &empty, None).is_err());
    assert!("fancy".parse::<ModelKind>().is_err());
    assert_eq!("GATTN".parse::<ModelKind>().unwrap(), ModelKind::Gattn);
}

/// Reference Adam on one flat parameter vector.
fn adam_oracle(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64, wd: f64) {
    for i in 0..x.len() {
        let gi = g[i] + wd * x[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
        let mh = m[i] / (1.0 - BETA1.powi(t));
        let vh = v[i] / (1.0 - BETA2.powi(t));
        x[i] -= lr * mh / (vh.sqrt() + EPSILON);
    }
}

#[test]
fn adam_descends_quadratic_bowls() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let wd = if seed % 2 == 0 { 0.0 } else { 1e-3 };
        let start: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut p = vec![Tensor::vector(start.clone())];
        let mut adam = AdamState::new(&p, 0.05, wd);
        let (mut x, mut m, mut v) = (start, vec![0.0; n], vec![0.0; n]);
        let grad = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect() };
        for t in 1..=3000 {
            let g = grad(p[0].data());
            adam.step(&mut p, &[Tensor::vector(g.clone())]).unwrap();
            let go = grad(&x);
            adam_oracle(&mut x, &go, &mut m, &mut v, t, 0.05, wd);
        }
        assert_eq!(adam.steps(), 3000);
        assert_eq!(p[0].data(), x.as_slice(), "seed {seed}");
        for i in 0..n {
            // Weight decay moves the optimum to a c / (a + wd / 2).
            let opt = 2.0 * a[i] * c[i] / (2.0 * a[i] + wd);
            assert!((x[i] - opt).abs() < 0.05, "seed {seed}: {} vs {opt}", x[i]);
        }
    }
}

#[test]
fn adam_first_step_example() {
    let mut p = vec![Tensor::vector(vec![1.0, -1.0])];
    let mut adam = AdamState::new(&p, 0.1, 0.0);
    adam.step(&mut p, &[Tensor::vector(vec![4.0, -0.5])])
        .unwrap();
    let expect = [
        1.0 - 0.1 * 4.0 / (4.0 + EPSILON),
        -1.0 + 0.1 * 0.5 / (0.5 + EPSILON),
    ];
    for (a, b) in p[0].data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    let mut q = vec![Tensor::scalar(0.0)];
    assert!(adam.step(&mut q, &[Tensor::scalar(1.0)]).is_err());
    assert!(adam
        .step(&mut p, &[Tensor::vector(vec![f64::NAN, 0.0])])
        .is_err());
    assert_eq!(adam.steps(), 1);
}

#[test]
fn search_space_draws_stay_in_bounds() {
    let space = SearchSpace::default();
    let mut r = rng(8);
    let mut logs = Vec::new();
    for _ in 0..10_000 {
        let (lr, wd, beta, rr) = space.sample(ModelKind::Lse, &mut r);
        assert!((1e-5..=1e-2).contains(&lr));
        assert!((1e-6..=1e-2).contains(&wd));
        assert!((0.0..=1.0).contains(&beta.unwrap()));
        assert!((1e-4..=1e5).contains(&rr.unwrap()));
        logs.push(lr.log10());
    }
    // Log-uniform: the mean exponent sits halfway between -5 and -2.
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    assert!((mean + 3.5).abs() < 0.05, "{mean}");
    let (_, _, beta, r) = space.sample(ModelKind::Std, &mut rng(0));
    assert!(beta.is_none() && r.is_none());
    let bad = SearchSpace {
        lr: [0.0, 1.0],
        ..space
    };
    assert!(bad.validate().is_err());
}

#[test]
fn search_is_seeded_and_independent_of_jobs() {
    let fx = Fixture::new(6);
    let base = config(ModelKind::Mean, 1, 1);
    let space = SearchSpace::default();
    let one = random_search(&space, &base, 1, &fx.data(), &fx.test, 3, 1).unwrap();
    assert_eq!(one.best_trial, 0);
    assert_eq!(one.log.len(), 1);
    assert!(random_search(&space, &base, 0, &fx.data(), &fx.test, 3, 1).is_err());

    let a = random_search(&space, &base, 4, &fx.data(), &fx.test, 9, 1).unwrap();
    let b = random_search(&space, &base, 4, &fx.data(), &fx.test, 9, 2).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    let best = a
        .log
        .iter()
        .filter_map(|r| r.tune_aa)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.log[a.best_trial].tune_aa, Some(best));
    let first = random_search(&space, &base, 1, &fx.data(), &fx.test, 9, 1).unwrap();
    assert_eq!(first.log[0], a.log[0]);
    assert_ne!(one.log[0].lr, a.log[0].lr);
}

#[test]
fn replicates_select_the_median() {
    let fx = Fixture::new(7);
    let cfg = config(ModelKind::Std, 1, 2);
    let sel = replicate_and_select(&cfg, &fx.data(), &fx.test, 3, 1).unwrap();
    let mut aas: Vec<f64> = sel.records.iter().map(|r| r.test_aa.unwrap()).collect();
    let chosen = sel.records[sel.chosen].test_aa.unwrap();
    aas.sort_by(f64::total_cmp);
    assert_eq!(chosen, aas[1]);
    let (_, m) = dmil::evalx::evaluate(&sel.network, &fx.test).unwrap();
    assert_eq!(m.aa, chosen);
    assert!(replicate_and_select(&cfg, &fx.data(), &fx.test, 2, 1).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let fx = Fixture::new(8);
    let cfg = config(ModelKind::Gattn, 1, 1);
    let net = run_training(&cfg, &fx.data(), None).unwrap().network;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.store().tensors(), net.store().tensors());
    let px = fx.test[0].pixels();
    assert_eq!(
        back.pixel_scores(px).unwrap(),
        net.pixel_scores(px).unwrap()
    );

    let bin = dir.path().join("model.json.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(Network::load(&path), Err(Error::Data(_))));
    std::fs::remove_file(&bin).unwrap();
    assert!(matches!(
        Network::load(&path),
        Err(Error::MissingArtifact { .. })
    ));
    assert!(matches!(
        Network::load(&dir.path().join("absent.json")),
        Err(Error::MissingArtifact { .. })
    ));
}

#[test]
fn tuning_splits() {
    assert_eq!(holdout_tiles(64).unwrap(), 13);
    assert_eq!(holdout_tiles(2).unwrap(), 1);
    assert_eq!(holdout_tiles(3).unwrap(), 1);
    assert!(holdout_tiles(1).is_err());
    assert_eq!(
        "holdout20".parse::<TuneSplit>().unwrap(),
        TuneSplit::Holdout20
    );
    assert!("test".parse::<TuneSplit>().is_err());

    let set = small_set(9, 0);
    assert!(matches!(
        ExperimentData::new(&set, TuneSplit::External),
        Err(Error::Data(_))
    ));
    let data = ExperimentData::new(&set, TuneSplit::Holdout20).unwrap();
    assert_eq!(data.tune_bags().len(), 16);
    assert_eq!(data.score_bags(), data.tune_bags());
    assert_eq!(data.final_bags().len(), 32);
    assert_eq!(data.test_bags().len(), 16);

    let set = small_set(9, 1);
    let data = ExperimentData::new(&set, TuneSplit::External).unwrap();
    assert_eq!(data.tune_bags().len(), 48);
    assert_eq!(data.final_bags().len(), 48);
    assert_eq!(data.score_bags(), set.bags("val", 0..1).unwrap().as_slice());

    let tuned = config(ModelKind::Mean, 5, 1);
    assert_eq!(final_config(&tuned).epochs, FINAL_EPOCHS);
}
