//! Randomized scenarios that return the worst observed error, shared by the
//! reduction tests and the acceptance report.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tal::backbone::{FeatureMapSet, ForwardOptions, StreamTag};
use tal::evaluation::{average_precision, compute_map_cmc, RetrievalLabels};
use tal::loss::{batch_hard_triplet, LabeledSimilarityBatch};
use tal::matching::{
    ms_qaconv_scores, msda_qaconv_scores, pairwise_responses, Direction, DomainAttention, MatchConfig, MixWeights,
    ScoreMatrix, SimilarityHead,
};
use tal::nn::{BnMode, Grad};
use tal::norm::{DabnHead, DsbnBank, NormMode};
use tal::{Backbone, BackboneConfig};

use super::*;

const DEV: Device = Device::Cpu;

fn bank(r: &mut ChaCha8Rng, k: usize, c: usize) -> (DsbnBank, Vec<Expert>) {
    let bank = DsbnBank::new(k, c, DType::F64, &DEV).unwrap();
    let experts: Vec<Expert> = (0..k).map(|_| Expert::random(r, c)).collect();
    for (i, e) in experts.iter().enumerate() {
        e.install(&bank, i);
    }
    (bank, experts)
}

fn dims(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.random_range(2..5), r.random_range(1..9), r.random_range(1..5), r.random_range(1..5)]
}

fn var(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var {
    let n = shape.iter().product();
    Var::from_tensor(&tensor(&uniform_vec(r, n, lo, hi), shape)).unwrap()
}

fn weighted(t: &Tensor, w: &Tensor) -> Tensor {
    t.mul(w).unwrap().sum_all().unwrap()
}

/// Per-domain BN in eval and train mode, running statistics included.
pub fn dsbn_fidelity(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let s = dims(&mut r);
        let k = r.random_range(1..4);
        let (bank, experts) = bank(&mut r, k, s[1]);
        let x = uniform_vec(&mut r, s.iter().product(), -3.0, 3.0);
        let d = r.random_range(0..k);
        let eval = bank.forward(&tensor(&x, &s), d, BnMode::Eval, Grad::Stop).unwrap();
        worst = worst.max(max_abs_diff(&values(&eval), &dsbn_eval(&x, s, &experts[d])));
        let train = bank.forward(&tensor(&x, &s), d, BnMode::Train, Grad::Stop).unwrap();
        let (out, rm, rv) = dsbn_train(&x, s, &experts[d], bank.momentum());
        worst = worst
            .max(max_abs_diff(&values(&train), &out))
            .max(max_abs_diff(&values(bank.running_mean(d).as_tensor()), &rm))
            .max(max_abs_diff(&values(bank.running_var(d).as_tensor()), &rv));
    }
    worst
}

/// `(weights error, mixture error)` of the adaptive normalization.
pub fn dabn_fidelity(trials: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut wa, mut wf) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let s = dims(&mut r);
        let k = r.random_range(1..5);
        let (bank, experts) = bank(&mut r, k, s[1]);
        let head = DabnHead::new(s[1], k, r.random_range(1..5), &mut r, DType::F64, &DEV).unwrap();
        let x = uniform_vec(&mut r, s.iter().product(), -2.0, 2.0);
        let xt = tensor(&x, &s);
        let alpha = dabn_weights(&x, s, &head.fc1, &head.fc2);
        wa = wa.max(max_abs_diff(&values(&head.weights(&xt, Grad::Stop).unwrap()), &alpha.concat()));
        let got = head.forward(&xt, &bank, Grad::Stop).unwrap();
        wf = wf.max(max_abs_diff(&values(&got), &dabn_forward(&x, s, &alpha, &experts)));
    }
    (wa, wf)
}

pub fn triplet_fidelity(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let ids = r.random_range(2..6);
        let per = r.random_range(2..5);
        let labels: Vec<usize> = (0..ids * per).map(|i| i / per).collect();
        let b = labels.len();
        let s: Vec<Vec<f64>> = (0..b).map(|_| uniform_vec(&mut r, b, -2.0, 2.0)).collect();
        let margin = r.random_range(0.05..3.0);
        let t = tensor(&s.concat(), &[b, b]);
        let out = batch_hard_triplet(&LabeledSimilarityBatch { scores: &t, labels: &labels, margin }).unwrap();
        let want = triplet_exhaustive(&s, &labels, margin);
        worst = worst.max((out.value - want).abs()).max((values(&out.loss)[0] - want).abs());
    }
    worst
}

pub fn dabn_gradients(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, k) = (2, 4, 3);
    let (bank, _) = bank(&mut r, k, c);
    let head = DabnHead::new(c, k, 2, &mut r, DType::F64, &DEV).unwrap();
    let x = tensor(&uniform_vec(&mut r, b * c * 9, -2.0, 2.0), &[b, c, 3, 3]);
    let w = tensor(&uniform_vec(&mut r, b * c * 9, -1.0, 1.0), &[b, c, 3, 3]);
    let f = || weighted(&head.forward(&x, &bank, Grad::Track).unwrap(), &w);
    grad_check(&[&head.fc1.weight, &head.fc1.bias, &head.fc2.weight, &head.fc2.bias], 1e-4, f)
}

pub fn attention_gradients(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, d) = (3, 5);
    let att = DomainAttention::new(k, d, 4, &mut r, DType::F64, &DEV).unwrap();
    let resp: Vec<Tensor> = (0..k).map(|_| tensor(&uniform_vec(&mut r, 2 * 3 * d, 0.0, 1.0), &[2, 3, d])).collect();
    let w = tensor(&uniform_vec(&mut r, 2 * 3 * k, -1.0, 1.0), &[2, 3, k]);
    let f = || weighted(&att.weights(&resp, Grad::Track).unwrap(), &w);
    grad_check(&[&att.fc1.weight, &att.fc1.bias, &att.fc2.weight, &att.fc2.bias], 1e-5, f)
}

/// Head parameters that the output actually depends on, in eval and train
/// mode.
pub fn head_gradients(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for per_scale in [false, true] {
        let head = SimilarityHead::new(&[5, 3], per_scale, DType::F64, &DEV).unwrap();
        for b in head.blocks() {
            let n = b.fc.in_dim();
            b.fc.weight.set(&tensor(&uniform_vec(&mut r, n, -1.0, 1.0), &[1, n])).unwrap();
            b.pre.gamma.set(&tensor(&uniform_vec(&mut r, 1, 0.5, 1.5), &[1])).unwrap();
        }
        let x = tensor(&uniform_vec(&mut r, 3 * 4 * 8, 0.0, 1.0), &[3, 4, 8]);
        let w = tensor(&uniform_vec(&mut r, 12, -1.0, 1.0), &[3, 4]);
        for mode in [BnMode::Eval, BnMode::Train] {
            let f = || weighted(&head.forward(&x, mode, Grad::Track).unwrap(), &w);
            let mut vars: Vec<&Var> = Vec::new();
            for b in head.blocks() {
                vars.extend([&b.fc.weight, &b.post.gamma, &b.post.beta]);
                if mode == BnMode::Eval {
                    vars.extend([&b.pre.gamma, &b.pre.beta, &b.fc.bias]);
                }
            }
            worst = worst.max(grad_check(&vars, 1e-5, f));
        }
    }
    worst
}

pub fn triplet_gradients(seed: u64) -> f64 {
    let mut r = rng(seed);
    let labels = [0, 0, 0, 1, 1, 1, 2, 2];
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let s = var(&mut r, &[8, 8], -1.0, 1.0);
        let f = || {
            batch_hard_triplet(&LabeledSimilarityBatch { scores: s.as_tensor(), labels: &labels, margin: 5.0 })
                .unwrap()
                .loss
        };
        worst = worst.max(grad_check(&[&s], 1e-6, f));
    }
    worst
}

/// Single-domain invariant stream against expert 1 through a whole backbone.
pub fn single_domain_dabn_is_dsbn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = BackboneConfig {
        input_height: 16,
        input_width: 8,
        stem_channels: vec![4],
        stem_strides: vec![2],
        stage_channels: vec![6, 8],
        stage_strides: vec![1, 2],
        norm_mode: NormMode::Adaptive,
        reduction: 2,
    };
    let net = Backbone::new(&cfg, 1, &mut r, DType::F64, &DEV).unwrap();
    for site in net.sites() {
        let c = site.dsbn.channels();
        Expert::random(&mut r, c).install(&site.dsbn, 0);
    }
    let x = tensor(&uniform_vec(&mut r, 2 * 3 * 16 * 8, -1.0, 1.0), &[2, 3, 16, 8]);
    let a = net.extract_expert(&x, 0, ForwardOptions::EVAL).unwrap();
    let b = net.extract_invariant(&x, ForwardOptions::EVAL).unwrap();
    a.maps.iter().zip(&b.maps).map(|(p, q)| max_abs_diff(&values(p), &values(q))).fold(0.0, f64::max)
}

fn feature_set(r: &mut ChaCha8Rng, n: usize) -> FeatureMapSet {
    FeatureMapSet {
        maps: vec![
            tensor(&uniform_vec(r, n * 4 * 4 * 2, -1.0, 1.0), &[n, 4, 4, 2]),
            tensor(&uniform_vec(r, n * 6 * 2, -1.0, 1.0), &[n, 6, 2, 1]),
        ],
        tag: StreamTag::Invariant,
    }
}

/// Attention forced onto each expert in turn against plain multi-scale
/// matching of that expert.
pub fn one_hot_msda_is_ms(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = MatchConfig::default();
    let qs: Vec<FeatureMapSet> = (0..3).map(|_| feature_set(&mut r, 2)).collect();
    let gs: Vec<FeatureMapSet> = (0..3).map(|_| feature_set(&mut r, 3)).collect();
    let head = SimilarityHead::new(&[16, 4], false, DType::F64, &DEV).unwrap();
    let att = DomainAttention::new(3, 20, 16, &mut r, DType::F64, &DEV).unwrap();
    att.fc2.weight.set(&att.fc2.weight.as_tensor().zeros_like().unwrap()).unwrap();
    let mut worst = 0.0f64;
    for sel in 0..3 {
        let mut bias = vec![-200.0; 3];
        bias[sel] = 200.0;
        att.fc2.bias.set(&tensor(&bias, &[3])).unwrap();
        let got = msda_qaconv_scores(&qs, &gs, MixWeights::Learned(&att), &head, &cfg, BnMode::Eval, Grad::Stop).unwrap();
        let want = ms_qaconv_scores(&qs[sel], &gs[sel], &head, &cfg, BnMode::Eval, Grad::Stop).unwrap();
        worst = worst.max(max_abs_diff(&values(&got), &values(&want)));
    }
    worst
}

/// Multi-scale matching restricted to one scale against the head applied to
/// that scale's base responses.
pub fn single_scale_ms_is_qaconv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let q = feature_set(&mut r, 2);
    let g = feature_set(&mut r, 3);
    let mut worst = 0.0f64;
    for (scale, dim) in [(0, 16), (1, 4)] {
        let cfg = MatchConfig { scales: vec![scale], ..MatchConfig::default() };
        let head = SimilarityHead::new(&[dim], false, DType::F64, &DEV).unwrap();
        let w = uniform_vec(&mut r, dim, -1.0, 1.0);
        head.blocks()[0].fc.weight.set(&tensor(&w, &[1, dim])).unwrap();
        let got = ms_qaconv_scores(&q, &g, &head, &cfg, BnMode::Eval, Grad::Stop).unwrap();
        let base = pairwise_responses(&q.maps[scale], &g.maps[scale], Direction::Bidirectional).unwrap();
        let want = head.forward(&base, BnMode::Eval, Grad::Stop).unwrap();
        worst = worst.max(max_abs_diff(&values(&got), &values(&want)));
    }
    worst
}

/// Worst mAP/CMC disagreement with the counting oracle over random
/// instances with ties, repeated identities and shared cameras.
pub fn metric_oracle(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (q, g) = (r.random_range(1..=10), r.random_range(1..=30));
        let scores: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| f64::from(r.random_range(0..8))).collect()).collect();
        let qid: Vec<i64> = (0..q).map(|_| r.random_range(0..5)).collect();
        let gid: Vec<i64> = (0..g).map(|_| r.random_range(0..5)).collect();
        let qcam: Vec<u32> = (0..q).map(|_| r.random_range(1..3)).collect();
        let gcam: Vec<u32> = (0..g).map(|_| r.random_range(1..3)).collect();
        let labels = RetrievalLabels { query_ids: &qid, gallery_ids: &gid, query_cams: &qcam, gallery_cams: &gcam };
        let m = ScoreMatrix::new(q, g, scores.concat()).unwrap();
        let res = compute_map_cmc(&m, &labels).unwrap();
        let (map, cmc, evaluated) = map_cmc_bruteforce(&scores, &qid, &gid, &qcam, &gcam);
        if evaluated != res.evaluated {
            return f64::INFINITY;
        }
        worst = worst.max((map - res.map).abs());
        for (k, v) in cmc.iter().enumerate() {
            worst = worst.max((v - res.top(k + 1)).abs());
        }
    }
    worst
}

/// AP of the ranking `[hit, miss, hit]`, which is exactly `(1 + 2/3) / 2`.
pub fn hand_ap() -> f64 {
    average_precision(&[true, false, true]).unwrap()
}
