use csmil::gradcheck::finite_diff_check;
use csmil::net::{forward_vars, Activation, CsMilParams, FusionMode, NetConfig, NLL_FLOOR};
use csmil::tape::{Tape, Var};
use csmil::tensor::Tensor;
use csmil::toydata::Scale;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: FusionMode, act: Activation, shared: bool, s: usize, d: usize) -> NetConfig {
    NetConfig {
        mode,
        activation: act,
        shared,
        in_dim: d,
        hidden: 7,
        att_dim: 5,
        scales: Scale::ALL[..s].to_vec(),
        bag_size: 8,
    }
}

fn inputs(n: usize, d: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..s)
        .map(|_| Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
        .collect()
}

/// Parameters drawn uniformly in ±1, biases included.
fn random_params(cfg: NetConfig, rng: &mut ChaCha8Rng) -> CsMilParams {
    let mut p = CsMilParams::init(cfg, 0).unwrap();
    for t in &mut p.tensors {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    p
}

fn modes() -> impl Strategy<Value = (FusionMode, Activation, bool)> {
    (
        prop_oneof![Just(FusionMode::Cs), Just(FusionMode::Mean), Just(FusionMode::Concat)],
        prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)],
        any::<bool>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn attention_is_normalized((mode, act, shared) in modes(), s in 1usize..=3, d in 1usize..9, n in 1usize..14, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(config(mode, act, shared, s, d), &mut rng);
        let tr = p.forward_bag(&inputs(n, d, s, &mut rng)).unwrap();
        for i in 0..n {
            let a = tr.attention(i);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        prop_assert!((tr.instance_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!((tr.probs[0] + tr.probs[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn prediction_ignores_instance_order((mode, act, shared) in modes(), n in 2usize..10, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(config(mode, act, shared, 3, 4), &mut rng);
        let x = inputs(n, 4, 3, &mut rng);
        let perm: Vec<usize> = (0..n).rev().collect();
        let px: Vec<Tensor> = x
            .iter()
            .map(|t| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()))
            .collect();
        let a = p.forward_bag(&x).unwrap();
        let b = p.forward_bag(&px).unwrap();
        prop_assert!((a.probs[1] - b.probs[1]).abs() <= 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((a.instance_weights[i] - b.instance_weights[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn sharing_saves_one_encoder_per_extra_scale(s in 1usize..=3, d in 1usize..20, l in 1usize..20) {
        let mut sep = config(FusionMode::Cs, Activation::Relu, false, s, d);
        sep.hidden = l;
        let mut sh = sep.clone();
        sh.shared = true;
        let a = CsMilParams::init(sep, 0).unwrap().parameter_count();
        let b = CsMilParams::init(sh, 0).unwrap().parameter_count();
        prop_assert_eq!(a - b, (s - 1) * (d * l + l));
    }

    #[test]
    fn checkpoint_reproduces_forward((mode, act, shared) in modes(), seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(config(mode, act, shared, 3, 5), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.csml");
        p.save(&path).unwrap();
        let q = CsMilParams::load(&path).unwrap();
        let x = inputs(6, 5, 3, &mut rng);
        prop_assert_eq!(p.forward_bag(&x).unwrap(), q.forward_bag(&x).unwrap());
    }
}

/// Fused representation of a bag on a fresh tape.
fn fused(p: &CsMilParams, x: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let pv = p.record(&mut tape);
    let xs: Vec<Var> = x.iter().map(|t| tape.constant(t.clone())).collect();
    let fv = forward_vars(&p.config, &mut tape, &pv, &xs).unwrap();
    tape.value(fv.fused).clone()
}

/// Equal attention logits put cross-scale fusion on the mean-vector fixed
/// point, down to the classifier output.
pub fn equal_logits_match_mean(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = config(FusionMode::Cs, Activation::Relu, rng.gen(), 3, 6);
    let mut cs = random_params(cfg.clone(), &mut rng);
    cs.get_mut("att.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut mean = CsMilParams::init(NetConfig { mode: FusionMode::Mean, ..cfg }, 0).unwrap();
    let names: Vec<String> = mean.config.layout().into_iter().map(|(n, _)| n).collect();
    for n in &names {
        *mean.get_mut(n).unwrap() = cs.get(n).unwrap().clone();
    }
    let x = inputs(rng.gen_range(1..10), 6, 3, &mut rng);
    let a = fused(&cs, &x);
    let b = fused(&mean, &x);
    let ta = cs.forward_bag(&x).unwrap();
    let tb = mean.forward_bag(&x).unwrap();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(u, v)| (u - v).abs())
        .chain([(ta.probs[1] - tb.probs[1]).abs()])
        .fold(0.0, f64::max)
}

#[test]
fn equal_attention_logits_reduce_to_mean_fusion() {
    for seed in 0..100 {
        let err = equal_logits_match_mean(seed);
        assert!(err <= 1e-12, "seed {seed}: {err}");
    }
}

#[test]
fn bag_loss_gradient_matches_finite_differences() {
    for (k, (mode, act, shared)) in [
        (FusionMode::Cs, Activation::Relu, true),
        (FusionMode::Cs, Activation::Tanh, true),
        (FusionMode::Cs, Activation::Relu, false),
        (FusionMode::Mean, Activation::Tanh, false),
        (FusionMode::Concat, Activation::Relu, true),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let p = random_params(config(mode, act, shared, 3, 6), &mut rng);
        let x = inputs(8, 6, 3, &mut rng);
        let label = k % 2;
        let err = finite_diff_check(&p.tensors, 1e-6, |tape, pv| {
            let xs: Vec<Var> = x.iter().map(|t| tape.constant(t.clone())).collect();
            let fv = forward_vars(&p.config, tape, pv, &xs)?;
            tape.nll(fv.probs, label, NLL_FLOOR)
        })
        .unwrap();
        assert!(err < 1e-4, "{mode} {act} shared={shared}: {err}");
    }
}
