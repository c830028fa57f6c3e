use csmil::embedder::FeatureSet;
use csmil::net::CsMilParams;
use csmil::optim::{Adam, AdamConfig};
use csmil::trainer::{bag_inputs, evaluate, train, TrainConfig};
use csmil::toydata::{derive_seed, Scale, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DIM: usize = 6;

/// Regions of 16 patches on a 4×4 grid. Positive regions carry a shift of
/// `signal` on the first feature at every scale.
fn features(seed: u64, per_split: [usize; 3], signal: f64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fs = FeatureSet {
        dim: DIM,
        feats: [Vec::new(), Vec::new(), Vec::new()],
        labels: Vec::new(),
        region_ids: Vec::new(),
        splits: Vec::new(),
        centers: Vec::new(),
    };
    let mut region = 0;
    for (split, &n) in [Split::Train, Split::Val, Split::Test].iter().zip(&per_split) {
        for r in 0..2 * n {
            let label = (r % 2) as u8;
            for k in 0..16 {
                for s in 0..3 {
                    for j in 0..DIM {
                        let z: f64 = rng.sample(StandardNormal);
                        let shift = if j == 0 && label == 1 { signal } else { 0.0 };
                        fs.feats[s].push(z + shift);
                    }
                }
                fs.labels.push(label);
                fs.region_ids.push(region);
                fs.splits.push(*split);
                fs.centers.push((32 + 64 * (k / 4), 32 + 64 * (k % 4)));
            }
            region += 1;
        }
    }
    fs
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        bags_per_group: 4,
        eval_every: 2,
        val_bags: 4,
        seed,
        use_clusters: false,
        hidden: 8,
        att_dim: 4,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let fs = features(0, [3, 1, 1], 2.0);
    let mut cfg = quick(5);
    cfg.adam.lr = 0.0;
    cfg.adam.weight_decay = 1e-2;
    let out = train(&fs, None, &cfg).unwrap();
    let init = CsMilParams::init(cfg.net_config(DIM), derive_seed(5, 0x696e_6974, 0)).unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn separable_regions_are_fit() {
    let fs = features(1, [1, 1, 1], 4.0);
    let mut cfg = quick(0);
    cfg.epochs = 60;
    cfg.eval_every = 10;
    cfg.bags_per_group = 8;
    cfg.adam.lr = 1e-2;
    let out = train(&fs, None, &cfg).unwrap();
    let last = *out.log.train_losses().last().unwrap();
    assert!(last < 0.1, "final train loss {last}");
}

#[test]
fn one_small_step_does_not_raise_the_bag_loss() {
    let fs = features(2, [2, 1, 1], 1.0);
    let mut ok = 0;
    for seed in 0..20 {
        let cfg = quick(seed);
        let mut p = CsMilParams::init(cfg.net_config(DIM), seed).unwrap();
        let start = (seed as usize % 4) * 16;
        let bag: Vec<usize> = (start..start + 8).collect();
        let x = bag_inputs(&fs, &Scale::ALL, &bag);
        let label = fs.labels[start];
        let (before, grads) = p.loss_and_grads(&x, label).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p.tensors);
        opt.step(&mut p.tensors, &grads);
        let (after, _) = p.loss_and_grads(&x, label).unwrap();
        if after <= before {
            ok += 1;
        }
    }
    assert!(ok >= 18, "{ok}/20");
}

#[test]
fn fixed_seed_reproduces_the_trajectory() {
    let fs = features(3, [2, 1, 1], 1.0);
    let a = train(&fs, None, &quick(9)).unwrap();
    let b = train(&fs, None, &quick(9)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    let c = train(&fs, None, &quick(10)).unwrap();
    assert_ne!(a.log.train_losses(), c.log.train_losses());
}

#[test]
fn selected_checkpoint_has_the_earliest_lowest_val_loss() {
    let fs = features(4, [2, 2, 1], 0.8);
    for seed in 0..3 {
        let mut cfg = quick(seed);
        cfg.epochs = 12;
        cfg.eval_every = 3;
        cfg.adam.lr = 5e-3;
        let out = train(&fs, None, &cfg).unwrap();
        let vals: Vec<_> = out.log.val_records().collect();
        assert_eq!(vals.len(), 4);
        let min = vals.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let first = vals.iter().find(|r| r.loss == min).unwrap();
        assert_eq!(out.log.best_epoch, first.epoch);
        assert_eq!(out.log.best_val_loss, min);
        let ev = evaluate(&out.params, &fs, Split::Val, cfg.val_bags, derive_seed(seed, 0x7661_6c00, 0)).unwrap();
        assert_eq!(ev.loss, min);
    }
}

#[test]
fn cluster_mode_needs_labels() {
    let fs = features(5, [1, 1, 1], 1.0);
    let mut cfg = quick(0);
    cfg.use_clusters = true;
    assert!(train(&fs, None, &cfg).is_err());
    assert!(train(&fs, Some(&[0, 1]), &cfg).is_err());
    let cl: Vec<usize> = (0..fs.len()).map(|i| i % 3).collect();
    assert!(train(&fs, Some(&cl), &cfg).is_ok());
}
