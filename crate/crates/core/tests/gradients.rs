mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use tal::backbone::{FeatureMapSet, StreamTag};
use tal::loss::{batch_hard_triplet, LabeledSimilarityBatch};
use tal::matching::{msda_qaconv_scores, DomainAttention, MatchConfig, MixWeights, SimilarityHead};
use tal::nn::{BnMode, Grad};
use tal::norm::{DabnHead, DsbnBank};

const DEV: Device = Device::Cpu;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn var(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var {
    let n = shape.iter().product();
    Var::from_tensor(&tensor(&uniform_vec(r, n, lo, hi), shape)).unwrap()
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> Tensor {
    t.mul(w).unwrap().sum_all().unwrap()
}

#[test]
fn dabn_head_gradients() {
    let mut r = rng(11);
    let (b, c, k) = (3, 6, 3);
    let bank = DsbnBank::new(k, c, DType::F64, &DEV).unwrap();
    for i in 0..k {
        Expert::random(&mut r, c).install(&bank, i);
    }
    let head = DabnHead::new(c, k, 2, &mut r, DType::F64, &DEV).unwrap();
    let x = var(&mut r, &[b, c, 2, 2], -2.0, 2.0);
    let w = tensor(&uniform_vec(&mut r, b * c * 4, -1.0, 1.0), &[b, c, 2, 2]);
    let f = || weighted_sum(&head.forward(x.as_tensor(), &bank, Grad::Track).unwrap(), &w);
    let vars = [&head.fc1.weight, &head.fc1.bias, &head.fc2.weight, &head.fc2.bias, &x];
    let err = grad_check(&vars, H, f);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn dabn_never_reaches_the_bank() {
    let mut r = rng(12);
    let bank = DsbnBank::new(2, 4, DType::F64, &DEV).unwrap();
    let head = DabnHead::new(4, 2, 2, &mut r, DType::F64, &DEV).unwrap();
    let x = tensor(&uniform_vec(&mut r, 2 * 4 * 2 * 2, -1.0, 1.0), &[2, 4, 2, 2]);
    let grads = head.forward(&x, &bank, Grad::Track).unwrap().sum_all().unwrap().backward().unwrap();
    assert!(grads.get(head.fc1.weight.as_tensor()).is_some());
    for i in 0..2 {
        assert!(grads.get(bank.gamma(i).as_tensor()).is_none());
        assert!(grads.get(bank.beta(i).as_tensor()).is_none());
    }
}

#[test]
fn dsbn_train_mode_gradients() {
    let mut r = rng(13);
    let bank = DsbnBank::new(2, 3, DType::F64, &DEV).unwrap();
    Expert::random(&mut r, 3).install(&bank, 1);
    let x = var(&mut r, &[4, 3, 2, 2], -2.0, 2.0);
    let w = tensor(&uniform_vec(&mut r, 48, -1.0, 1.0), &[4, 3, 2, 2]);
    let f = || weighted_sum(&bank.forward(x.as_tensor(), 1, BnMode::Train, Grad::Track).unwrap(), &w);
    let err = grad_check(&[bank.gamma(1), bank.beta(1), &x], H, f);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn attention_gradients() {
    let mut r = rng(14);
    let (k, d) = (3, 4);
    let att = DomainAttention::new(k, d, 3, &mut r, DType::F64, &DEV).unwrap();
    let resp: Vec<Var> = (0..k).map(|_| var(&mut r, &[2, 3, d], 0.0, 1.0)).collect();
    let w = tensor(&uniform_vec(&mut r, 2 * 3 * k, -1.0, 1.0), &[2, 3, k]);
    let f = || {
        let ts: Vec<Tensor> = resp.iter().map(|v| v.as_tensor().clone()).collect();
        weighted_sum(&att.weights(&ts, Grad::Track).unwrap(), &w)
    };
    let mut vars = vec![&att.fc1.weight, &att.fc1.bias, &att.fc2.weight, &att.fc2.bias];
    vars.extend(resp.iter());
    let err = grad_check(&vars, H, f);
    assert!(err < TOL, "relative error {err}");
}

fn randomize_head(head: &SimilarityHead, r: &mut rand_chacha::ChaCha8Rng) {
    for b in head.blocks() {
        let n = b.fc.in_dim();
        b.fc.weight.set(&tensor(&uniform_vec(r, n, -1.0, 1.0), &[1, n])).unwrap();
        b.pre.gamma.set(&tensor(&uniform_vec(r, 1, 0.5, 1.5), &[1])).unwrap();
        b.post.beta.set(&tensor(&uniform_vec(r, 1, -0.5, 0.5), &[1])).unwrap();
    }
}

#[test]
fn similarity_head_gradients() {
    let mut r = rng(15);
    for per_scale in [false, true] {
        let head = SimilarityHead::new(&[5, 3], per_scale, DType::F64, &DEV).unwrap();
        randomize_head(&head, &mut r);
        let x = var(&mut r, &[3, 4, 8], 0.0, 1.0);
        let w = tensor(&uniform_vec(&mut r, 12, -1.0, 1.0), &[3, 4]);
        for mode in [BnMode::Train, BnMode::Eval] {
            let f = || weighted_sum(&head.forward(x.as_tensor(), mode, Grad::Track).unwrap(), &w);
            let mut vars = vec![&x];
            for b in head.blocks() {
                vars.extend([&b.pre.gamma, &b.pre.beta, &b.fc.weight, &b.fc.bias, &b.post.gamma, &b.post.beta]);
            }
            if mode == BnMode::Train {
                // the post-norm cancels the pre-norm affine and the linear bias
                // (up to eps), leaving gradients that are pure noise
                vars.retain(|v| {
                    !head.blocks().iter().any(|b| {
                        [&b.pre.gamma, &b.pre.beta, &b.fc.bias].iter().any(|p| std::ptr::eq(*v, *p))
                    })
                });
            }
            let err = grad_check(&vars, H, f);
            assert!(err < TOL, "per_scale {per_scale} {mode:?}: relative error {err}");
        }
    }
}

#[test]
fn msda_end_to_end_gradients() {
    let mut r = rng(16);
    let cfg = MatchConfig::default();
    let set = |r: &mut rand_chacha::ChaCha8Rng, n: usize| FeatureMapSet {
        maps: vec![
            tensor(&uniform_vec(r, n * 3 * 2 * 2, -1.0, 1.0), &[n, 3, 2, 2]),
            tensor(&uniform_vec(r, n * 4 * 2, -1.0, 1.0), &[n, 4, 2, 1]),
        ],
        tag: StreamTag::Invariant,
    };
    let qs: Vec<FeatureMapSet> = (0..2).map(|_| set(&mut r, 2)).collect();
    let gs: Vec<FeatureMapSet> = (0..2).map(|_| set(&mut r, 3)).collect();
    let head = SimilarityHead::new(&[8, 4], false, DType::F64, &DEV).unwrap();
    randomize_head(&head, &mut r);
    let att = DomainAttention::new(2, 12, 4, &mut r, DType::F64, &DEV).unwrap();
    let w = tensor(&uniform_vec(&mut r, 6, -1.0, 1.0), &[2, 3]);
    let f = || {
        let s = msda_qaconv_scores(&qs, &gs, MixWeights::Learned(&att), &head, &cfg, BnMode::Eval, Grad::Track).unwrap();
        weighted_sum(&s, &w)
    };
    let err = grad_check(&[&att.fc1.weight, &att.fc2.weight, &att.fc2.bias, &head.blocks()[0].fc.weight], H, f);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn triplet_gradients_away_from_kinks() {
    let mut r = rng(17);
    let labels = [0, 0, 0, 1, 1, 1, 2, 2];
    for _ in 0..10 {
        let s = var(&mut r, &[8, 8], -1.0, 1.0);
        let margin = 5.0; // every anchor active
        let f = || {
            batch_hard_triplet(&LabeledSimilarityBatch { scores: s.as_tensor(), labels: &labels, margin })
                .unwrap()
                .loss
        };
        let err = grad_check(&[&s], 1e-6, f);
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn triplet_gradient_is_sparse_and_signed() {
    let mut r = rng(18);
    let labels = [0, 0, 1, 1];
    let s = var(&mut r, &[4, 4], -1.0, 1.0);
    let out = batch_hard_triplet(&LabeledSimilarityBatch { scores: s.as_tensor(), labels: &labels, margin: 4.0 }).unwrap();
    let g = values(out.loss.backward().unwrap().get(s.as_tensor()).unwrap());
    for (i, a) in out.anchors.iter().enumerate() {
        for j in 0..4 {
            let want = if j == a.positive {
                -1.0
            } else if j == a.negative {
                1.0
            } else {
                0.0
            };
            assert_eq!(g[i * 4 + j], want);
        }
    }
}
