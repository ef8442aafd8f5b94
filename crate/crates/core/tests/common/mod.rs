//! Straight-line reference implementations and helpers shared by the
//! integration tests. Everything here works on plain `f64` slices in
//! row-major `[B, C, H, W]` order and shares no code with the library.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use tal::data::generate_synthetic;
use tal::nn::Linear;
use tal::training::TrainData;
use tal::ExperimentConfig;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Expert {
    pub fn random(rng: &mut ChaCha8Rng, c: usize) -> Self {
        Self {
            gamma: uniform_vec(rng, c, 0.5, 2.0),
            beta: uniform_vec(rng, c, -1.0, 1.0),
            mean: uniform_vec(rng, c, -1.0, 1.0),
            var: uniform_vec(rng, c, 0.2, 3.0),
        }
    }

    pub fn install(&self, bank: &tal::DsbnBank, domain: usize) {
        let c = self.gamma.len();
        bank.set_domain(
            domain,
            &tensor(&self.gamma, &[c]),
            &tensor(&self.beta, &[c]),
            &tensor(&self.mean, &[c]),
            &tensor(&self.var, &[c]),
        )
        .unwrap();
    }
}

/// `γ (x − μ) / sqrt(σ² + ε) + β` per channel with stored statistics.
pub fn dsbn_eval(x: &[f64], shape: [usize; 4], e: &Expert) -> Vec<f64> {
    let [_, c, h, w] = shape;
    let plane = h * w;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            e.gamma[ch] * (v - e.mean[ch]) / (e.var[ch] + EPS).sqrt() + e.beta[ch]
        })
        .collect()
}

/// Batch-statistics normalization (biased variance) plus the running
/// estimates it leaves behind with momentum `m` (unbiased variance).
pub fn dsbn_train(x: &[f64], shape: [usize; 4], e: &Expert, m: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                s += x[(bi * c + ch) * plane + p];
            }
        }
        mean[ch] = s / n;
        let mut q = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                q += (x[(bi * c + ch) * plane + p] - mean[ch]).powi(2);
            }
        }
        var[ch] = q / n;
    }
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            e.gamma[ch] * (v - mean[ch]) / (var[ch] + EPS).sqrt() + e.beta[ch]
        })
        .collect();
    let rm = (0..c).map(|ch| (1.0 - m) * e.mean[ch] + m * mean[ch]).collect();
    let rv = (0..c)
        .map(|ch| (1.0 - m) * e.var[ch] + m * var[ch] * n / (n - 1.0))
        .collect();
    (out, rm, rv)
}

pub fn linear_params(l: &Linear) -> (Vec<f64>, Vec<f64>, usize, usize) {
    (values(l.weight.as_tensor()), values(l.bias.as_tensor()), l.in_dim(), l.out_dim())
}

fn dense(x: &[f64], w: &[f64], b: &[f64], inp: usize, out: usize) -> Vec<f64> {
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax(W₂ relu(W₁ GAP(x)))`, one row per sample.
pub fn dabn_weights(x: &[f64], shape: [usize; 4], fc1: &Linear, fc2: &Linear) -> Vec<Vec<f64>> {
    let [b, c, h, w] = shape;
    let plane = h * w;
    let (w1, b1, i1, o1) = linear_params(fc1);
    let (w2, b2, i2, o2) = linear_params(fc2);
    (0..b)
        .map(|bi| {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| (0..plane).map(|p| x[(bi * c + ch) * plane + p]).sum::<f64>() / plane as f64)
                .collect();
            let hidden: Vec<f64> = dense(&pooled, &w1, &b1, i1, o1).into_iter().map(|v| v.max(0.0)).collect();
            softmax(&dense(&hidden, &w2, &b2, i2, o2))
        })
        .collect()
}

/// `Σ_k α_k DSBN_k(x)` with every expert evaluated in full.
pub fn dabn_forward(x: &[f64], shape: [usize; 4], alpha: &[Vec<f64>], experts: &[Expert]) -> Vec<f64> {
    let [_, c, h, w] = shape;
    let per_sample = c * h * w;
    let outs: Vec<Vec<f64>> = experts.iter().map(|e| dsbn_eval(x, shape, e)).collect();
    (0..x.len())
        .map(|i| {
            let bi = i / per_sample;
            (0..experts.len()).map(|k| alpha[bi][k] * outs[k][i]).sum()
        })
        .collect()
}

/// Batch-hard loss by exhaustive search over every (anchor, positive,
/// negative) triple.
pub fn triplet_exhaustive(s: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut worst = 0.0f64;
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                worst = worst.max(margin - s[a][p] + s[a][n]);
            }
        }
        total += worst;
    }
    total
}

/// Unit-normalized location vectors of one `[C, H, W]` map.
fn locations(map: &[f64], c: usize, l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|p| {
            let v: Vec<f64> = (0..c).map(|ch| map[ch * l + p]).collect();
            let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Query-side best responses, then gallery-side ones when `both`.
pub fn qaconv_naive(q: &[f64], g: &[f64], c: usize, lq: usize, lg: usize, both: bool) -> Vec<f64> {
    let qv = locations(q, c, lq);
    let gv = locations(g, c, lg);
    let sim: Vec<Vec<f64>> = qv
        .iter()
        .map(|a| gv.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let mut out: Vec<f64> = sim.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    if both {
        out.extend((0..lg).map(|j| sim.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)));
    }
    out
}

/// `(mAP, CMC)` by counting, from the definitions: rank of a gallery entry
/// is one plus the number of valid entries ordered before it (higher score,
/// or equal score and lower index).
pub fn map_cmc_bruteforce(
    scores: &[Vec<f64>],
    qid: &[i64],
    gid: &[i64],
    qcam: &[u32],
    gcam: &[u32],
) -> (f64, Vec<f64>, usize) {
    let gn = gid.len();
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut cmc = vec![0.0; gn];
    for q in 0..qid.len() {
        let valid = |g: usize| !(gid[g] == qid[q] && gcam[g] == qcam[q]);
        let before = |a: usize, b: usize| scores[q][a] > scores[q][b] || (scores[q][a] == scores[q][b] && a < b);
        let rank = |g: usize| 1 + (0..gn).filter(|&o| o != g && valid(o) && before(o, g)).count();
        let positives: Vec<usize> = (0..gn).filter(|&g| valid(g) && gid[g] == qid[q]).collect();
        if positives.is_empty() {
            continue;
        }
        evaluated += 1;
        let mut ap = 0.0;
        for &p in &positives {
            let r = rank(p);
            let hits = positives.iter().filter(|&&o| rank(o) <= r).count();
            ap += hits as f64 / r as f64;
        }
        ap_sum += ap / positives.len() as f64;
        let best = positives.iter().map(|&p| rank(p)).min().unwrap();
        for (k, slot) in cmc.iter_mut().enumerate() {
            if best <= k + 1 {
                *slot += 1.0;
            }
        }
    }
    let d = evaluated.max(1) as f64;
    (ap_sum / d, cmc.into_iter().map(|v| v / d).collect(), evaluated)
}

/// Central finite differences of `f` with respect to every element of `var`.
pub fn finite_diff(var: &Var, h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let base = values(var.as_tensor());
    let shape = var.dims().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        var.set(&tensor(&v, &shape)).unwrap();
        let up = f();
        v[i] = base[i] - h;
        var.set(&tensor(&v, &shape)).unwrap();
        let down = f();
        out.push((up - down) / (2.0 * h));
    }
    var.set(&tensor(&base, &shape)).unwrap();
    out
}

/// Worst relative error between backprop and central differences of a
/// scalar function over the given variables. `f` must build its graph from
/// the variables' tensors so gradients reach them.
pub fn grad_check(vars: &[&Var], h: f64, f: impl Fn() -> Tensor) -> f64 {
    let grads = f().backward().unwrap();
    vars.iter()
        .map(|v| {
            let analytic = values(grads.get(v.as_tensor()).expect("variable has a gradient"));
            let numeric = finite_diff(v, h, || values(&f())[0]);
            rel_error(&analytic, &numeric, 1e-8)
        })
        .fold(0.0, f64::max)
}

/// Profile small enough for a test: three 10-identity domains, 16-image
/// batches, two epochs of two steps per phase.
pub fn micro_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        syn_ids_per_domain: 10,
        syn_images_per_id: 4,
        syn_target_ids: 6,
        syn_target_images_per_id: 4,
        batch_size: 16,
        ids_per_batch: 4,
        instances_per_id: 4,
        graph_neighbors: 3,
        epochs: 2,
        lr_decay_epoch: 1,
        steps_per_epoch: 2,
        verify_isolation: true,
        ..ExperimentConfig::tiny()
    }
}

pub fn micro_data(cfg: &ExperimentConfig) -> TrainData {
    TrainData::new(generate_synthetic(&cfg.synthetic_config()).unwrap().train).unwrap()
}

/// Writes `cfg` as `<dir>/config.toml` and returns the path.
pub fn write_config(cfg: &ExperimentConfig, dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}
pub mod checks;
