#![allow(dead_code)]
//! Straight-line reference evaluations over plain nested vectors, plus
//! randomized trials comparing them with the graph implementation.

use mea::config::RunConfig;
use mea::data::{generate_synthetic, make_batches, Batch, DatasetInfo, GeneratorSpec};
use mea::decouple::{
    adversarial_losses, disparity_loss, hsic as graph_hsic, ImportanceDiscriminator, ModalityDiscriminator,
};
use mea::fusion::GraphFusion;
use mea::hca::{HcaOptions, HcaTarget, Mru};
use mea::model::Mea;
use mea::nn::{Attention, FeedForward, LayerNorm, Linear};
use mea::params::{ParamBuilder, ParamId, ParamStore};
use mea::psa::{MapPredictor, PsaLayer, PsaOptions, WeightedAttention};
use mea::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;
pub const ORACLE_TRIALS: u64 = 100;
pub const ORACLE_TOLERANCE: f64 = 1e-9;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- matrices

pub fn rows(t: &Tensor) -> Mat {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    t.data().chunks(s[1]).map(|r| r.to_vec()).collect()
}

/// Sample `b` of a `[n, t, d]` tensor.
pub fn sample(t: &Tensor, b: usize) -> Mat {
    let s = t.shape();
    let per = s[1] * s[2];
    t.data()[b * per..(b + 1) * per].chunks(s[2]).map(|r| r.to_vec()).collect()
}

/// Head maps of sample `b` from a `[n, K, t_q, t_k]` tensor.
pub fn maps(t: &Tensor, b: usize) -> Vec<Mat> {
    let s = t.shape();
    let plane = s[2] * s[3];
    (0..s[1])
        .map(|k| {
            let start = (b * s[1] + k) * plane;
            t.data()[start..start + plane].chunks(s[3]).map(|r| r.to_vec()).collect()
        })
        .collect()
}

pub fn mask_row(mask: &Tensor, b: usize) -> Vec<f64> {
    let t = mask.shape()[1];
    mask.data()[b * t..(b + 1) * t].to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, |r| r.len());
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn max_diff_maps(a: &[Mat], b: &[Mat]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_diff(x, y)).fold(0.0, f64::max)
}

pub fn param(store: &ParamStore, id: ParamId) -> Mat {
    rows(&store.get(id).value)
}

pub fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

/// Softmax over the entries whose `keep` flag is nonzero; the rest are 0.
pub fn masked_softmax(row: &[f64], keep: &[f64]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k != 0.0)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(keep)
        .map(|(v, &k)| if k != 0.0 { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    masked_softmax(row, &vec![1.0; row.len()])
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

// ------------------------------------------------------------------ layers

pub fn linear(store: &ParamStore, lin: &Linear, x: &Mat) -> Mat {
    let mut y = matmul(x, &param(store, lin.w));
    if let Some(b) = lin.b {
        let b = param_vec(store, b);
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let gain = param_vec(store, ln.gain);
    let shift = param_vec(store, ln.shift);
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * gain[i] + shift[i])
                .collect()
        })
        .collect()
}

pub fn feed_forward(store: &ParamStore, ff: &FeedForward, x: &Mat) -> Mat {
    let h: Mat = linear(store, &ff.l1, x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &ff.l2, &h)
}

/// Raw per-head logits `Q Kᵀ / √d_k` and the value rows.
pub fn attention_logits(store: &ParamStore, att: &Attention, query: &Mat, source: &Mat) -> (Vec<Mat>, Mat) {
    let q = linear(store, &att.wq, query);
    let k = linear(store, &att.wk, source);
    let v = linear(store, &att.wv, source);
    let dk = att.dim / att.heads;
    let logits = (0..att.heads)
        .map(|h| {
            q.iter()
                .map(|qi| {
                    k.iter()
                        .map(|kj| (0..dk).map(|c| qi[h * dk + c] * kj[h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                        .collect()
                })
                .collect()
        })
        .collect();
    (logits, v)
}

/// Weighted values per head, concatenated and projected by the output map.
pub fn attend(store: &ParamStore, att: &Attention, weights: &[Mat], v: &Mat) -> Mat {
    let dk = att.dim / att.heads;
    let t_q = weights[0].len();
    let mut merged = vec![vec![0.0; att.dim]; t_q];
    for (h, a) in weights.iter().enumerate() {
        for i in 0..t_q {
            for (j, vj) in v.iter().enumerate() {
                for c in 0..dk {
                    merged[i][h * dk + c] += a[i][j] * vj[h * dk + c];
                }
            }
        }
    }
    linear(store, &att.wo, &merged)
}

fn zero_padded(mut z: Mat, mask: &[f64]) -> Mat {
    for (row, &m) in z.iter_mut().zip(mask) {
        if m == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    z
}

// --------------------------------------------------------------------- psa

/// `GeLU(Conv3×3(A_prev) + bias)` with padded rows and columns of `A_prev`
/// treated as zero.
pub fn predicted_maps(store: &ParamStore, pred: &MapPredictor, prev: &[Mat], mask: &[f64]) -> Vec<Mat> {
    let kernel = &store.get(pred.kernel).value;
    let bias = param_vec(store, pred.bias);
    let heads = prev.len();
    let t = mask.len();
    (0..heads)
        .map(|o| {
            (0..t)
                .map(|i| {
                    (0..t)
                        .map(|j| {
                            let mut s = bias[o];
                            for (c, map) in prev.iter().enumerate() {
                                for di in 0..3 {
                                    for dj in 0..3 {
                                        let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                        if ii < 0 || jj < 0 || ii >= t as isize || jj >= t as isize {
                                            continue;
                                        }
                                        let (ii, jj) = (ii as usize, jj as usize);
                                        s += kernel.at(&[o, c, di, dj]) * map[ii][jj] * mask[ii] * mask[jj];
                                    }
                                }
                            }
                            gelu(s)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub struct LayerOracle {
    pub z: Mat,
    pub logits: Vec<Mat>,
    pub weights: Vec<Mat>,
}

/// One predictive self-attention layer on one sample. With `prev` present the
/// maps are `softmax(μ·GeLU(Conv(A_prev)) + (1-μ)·C)` where `C` is the
/// softmaxed current logits when `literal`, else the raw logits.
pub fn psa_layer(
    store: &ParamStore,
    layer: &PsaLayer,
    z: &Mat,
    mask: &[f64],
    prev: Option<&[Mat]>,
    mu: f64,
    literal: bool,
) -> LayerOracle {
    let h = layer_norm(store, &layer.ln_in, z);
    let (logits, v) = attention_logits(store, &layer.attention, &h, &h);
    let weights: Vec<Mat> = match (prev, &layer.predictor) {
        (Some(prev), Some(pred)) => {
            let p = predicted_maps(store, pred, prev, mask);
            logits
                .iter()
                .zip(&p)
                .map(|(cur, pk)| {
                    cur.iter()
                        .zip(pk)
                        .map(|(crow, prow)| {
                            let c = if literal { masked_softmax(crow, mask) } else { crow.clone() };
                            let mixed: Vec<f64> = prow.iter().zip(&c).map(|(a, b)| mu * a + (1.0 - mu) * b).collect();
                            masked_softmax(&mixed, mask)
                        })
                        .collect()
                })
                .collect()
        }
        _ => logits
            .iter()
            .map(|cur| cur.iter().map(|r| masked_softmax(r, mask)).collect())
            .collect(),
    };
    let ze = add(&h, &attend(store, &layer.attention, &weights, &v));
    let f = feed_forward(store, &layer.ffn, &layer_norm(store, &layer.ln_ffn, &ze));
    LayerOracle {
        z: zero_padded(add(&f, &ze), mask),
        logits,
        weights,
    }
}

/// Modality weights `ψ = softmax_m(p_mᵀ tanh(W_m vec(Z_m) + b_m))`.
pub fn wal_psi(store: &ParamStore, wal: &WeightedAttention, z: &[Mat; 3]) -> Vec<f64> {
    let gamma: Vec<f64> = (0..3)
        .map(|m| {
            let flat: Mat = vec![z[m].iter().flatten().cloned().collect()];
            let hidden = linear(store, &wal.proj[m], &flat);
            let p = param_vec(store, wal.score[m]);
            hidden[0].iter().zip(&p).map(|(h, w)| h.tanh() * w).sum()
        })
        .collect();
    softmax(&gamma)
}

// --------------------------------------------------------------------- hca

/// Target queries attend over source keys and values, then residual and FFN.
pub fn mru(store: &ParamStore, unit: &Mru, source: &Mat, source_mask: &[f64], target: &Mat, target_mask: &[f64]) -> (Mat, Vec<Mat>) {
    let q = layer_norm(store, &unit.ln_target, target);
    let kv = layer_norm(store, &unit.ln_source, source);
    let (logits, v) = attention_logits(store, &unit.attention, &q, &kv);
    let weights: Vec<Mat> = logits
        .iter()
        .map(|m| m.iter().map(|r| masked_softmax(r, source_mask)).collect())
        .collect();
    let za = add(&q, &attend(store, &unit.attention, &weights, &v));
    let f = feed_forward(store, &unit.ffn, &layer_norm(store, &unit.ln_ffn, &za));
    (zero_padded(add(&f, &za), target_mask), weights)
}

fn concat_rows(parts: &[&Mat]) -> Mat {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

fn concat_masks(parts: &[&Vec<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

/// Mixed, coarse and fine stages for one target modality.
pub fn hca_target(store: &ParamStore, unit: &HcaTarget, z: &[Mat; 3], masks: &[Vec<f64>; 3]) -> Mat {
    let t = unit.target;
    let (o1, o2) = match t {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let all = concat_rows(&[&z[0], &z[1], &z[2]]);
    let all_mask = concat_masks(&[&masks[0], &masks[1], &masks[2]]);
    let (mixed, _) = mru(store, &unit.mixed, &all, &all_mask, &z[t], &masks[t]);
    let pair = concat_rows(&[&z[o1], &z[o2]]);
    let pair_mask = concat_masks(&[&masks[o1], &masks[o2]]);
    let (coarse, _) = mru(store, &unit.coarse, &pair, &pair_mask, &mixed, &masks[t]);
    let (f1, _) = mru(store, &unit.fine, &z[o1], &masks[o1], &coarse, &masks[t]);
    let (f2, _) = mru(store, &unit.fine, &z[o2], &masks[o2], &coarse, &masks[t]);
    add(&f1, &f2)
}

// ---------------------------------------------------------------- decouple

/// `Tr(U K₁ U K₂) / (n-1)²` with `K = H Hᵀ` and `U = I - eeᵀ/n`.
pub fn hsic(h1: &Mat, h2: &Mat) -> f64 {
    let n = h1.len();
    let k1 = matmul(h1, &transpose(h1));
    let k2 = matmul(h2, &transpose(h2));
    let u: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
        .collect();
    let prod = matmul(&matmul(&matmul(&u, &k1), &u), &k2);
    let trace: f64 = (0..n).map(|i| prod[i][i]).sum();
    trace / ((n - 1) * (n - 1)) as f64
}

pub fn disparity(he: &[Mat; 3], ha: &[Mat; 3]) -> f64 {
    (0..3).map(|m| hsic(&he[m], &ha[m])).sum::<f64>() / 3.0
}

pub fn importance_probs(store: &ParamStore, di: &ImportanceDiscriminator, ha: &Mat) -> Mat {
    matmul(ha, &param(store, di.w)).iter().map(|r| softmax(r)).collect()
}

/// `ω = 1 - D_i(h)_m` per sample.
pub fn omega(store: &ParamStore, di: &ImportanceDiscriminator, ha: &Mat, m: usize) -> Vec<f64> {
    importance_probs(store, di, ha).iter().map(|p| 1.0 - p[m]).collect()
}

/// Mean cross-entropy of `D_i` over samples and modalities.
pub fn importance_loss(store: &ParamStore, di: &ImportanceDiscriminator, ha: &[Mat; 3]) -> f64 {
    let n = ha[0].len();
    let mut s = 0.0;
    for (m, h) in ha.iter().enumerate() {
        for p in importance_probs(store, di, h) {
            s -= p[m].ln();
        }
    }
    s / (3 * n) as f64
}

pub fn discriminator_log_probs(store: &ParamStore, dm: &ModalityDiscriminator, h: &Mat) -> Mat {
    feed_forward(store, &dm.mlp, h).iter().map(|r| log_softmax(r)).collect()
}

/// `(L_agn, L_exc)` with one-hot modality labels.
pub fn adversarial(store: &ParamStore, dm: &ModalityDiscriminator, he: &[Mat; 3], ha: &[Mat; 3], omega: &[Vec<f64>; 3]) -> (f64, f64) {
    let n = he[0].len() as f64;
    let (mut agn, mut exc) = (0.0, 0.0);
    for m in 0..3 {
        let y = [0, 1, 2].map(|k| if k == m { 1.0 } else { 0.0 });
        for (row, w) in discriminator_log_probs(store, dm, &ha[m]).iter().zip(&omega[m]) {
            agn -= w * (0..3).map(|k| y[k] * row[k]).sum::<f64>();
        }
        for row in discriminator_log_probs(store, dm, &he[m]) {
            exc -= (0..3).map(|k| y[k] * row[k]).sum::<f64>();
        }
    }
    (agn / n, exc / n)
}

// ------------------------------------------------------------------ fusion

/// Fused vector and the 3×3 transfer coefficients for one sample.
pub fn graph_fuse(store: &ParamStore, gf: &GraphFusion, nodes: [&[f64]; 3], self_loops: bool) -> (Vec<f64>, Mat) {
    let w = param(store, gf.w_e);
    let qa = param_vec(store, gf.q_a);
    let qb = param_vec(store, gf.q_b);
    let b = param_vec(store, gf.bias)[0];
    let p: Mat = nodes.iter().map(|h| matmul(&vec![h.to_vec()], &w).remove(0)).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>();
    let mut xi = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        let score: Vec<f64> = (0..3)
            .map(|j| {
                let concat: Vec<f64> = p[i].iter().chain(&p[j]).cloned().collect();
                let q: Vec<f64> = qa.iter().chain(&qb).cloned().collect();
                gelu(dot(&concat, &q) + b)
            })
            .collect();
        let allowed: Vec<f64> = (0..3).map(|j| if self_loops || i != j { 1.0 } else { 0.0 }).collect();
        let denom: f64 = (0..3).filter(|&j| allowed[j] != 0.0).map(|j| score[j].exp()).sum();
        for j in 0..3 {
            if allowed[j] != 0.0 {
                xi[i][j] = score[j].exp() / denom;
            }
        }
    }
    let d = p[0].len();
    let mut fin = vec![0.0; d];
    for i in 0..3 {
        for c in 0..d {
            fin[c] += sigmoid((0..3).map(|j| xi[i][j] * p[j][c]).sum());
        }
    }
    (fin, xi)
}

// ----------------------------------------------------------------- metrics

#[derive(Debug)]
pub struct RegressionOracle {
    pub acc7: f64,
    pub acc2: Option<f64>,
    pub f1: Option<f64>,
    pub mae: f64,
    pub corr: Option<f64>,
}

fn seven(x: f64) -> i64 {
    let r = x.signum() * (x.abs() + 0.5).floor();
    r.max(-3.0).min(3.0) as i64
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn regression_oracle(preds: &[f64], labels: &[f64]) -> RegressionOracle {
    let n = preds.len() as f64;
    let mut hits = 0.0;
    let mut abs = 0.0;
    for i in 0..preds.len() {
        if seven(preds[i]) == seven(labels[i]) {
            hits += 1.0;
        }
        abs += (preds[i] - labels[i]).abs();
    }
    let nz: Vec<usize> = (0..preds.len()).filter(|&i| labels[i] != 0.0).collect();
    let (acc2, f1) = if nz.is_empty() {
        (None, None)
    } else {
        let correct = nz.iter().filter(|&&i| (preds[i] > 0.0) == (labels[i] > 0.0)).count();
        let tp = nz.iter().filter(|&&i| preds[i] > 0.0 && labels[i] > 0.0).count();
        let fp = nz.iter().filter(|&&i| preds[i] > 0.0 && labels[i] < 0.0).count();
        let fn_ = nz.iter().filter(|&&i| preds[i] <= 0.0 && labels[i] > 0.0).count();
        (Some(correct as f64 / nz.len() as f64), Some(f1_from_counts(tp, fp, fn_)))
    };
    let mp = preds.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let cov: f64 = preds.iter().zip(labels).map(|(p, l)| (p - mp) * (l - ml)).sum::<f64>() / n;
    let vp: f64 = preds.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / n;
    let vl: f64 = labels.iter().map(|l| (l - ml).powi(2)).sum::<f64>() / n;
    let corr = if vp == 0.0 || vl == 0.0 {
        None
    } else {
        Some(cov / (vp * vl).sqrt())
    };
    RegressionOracle {
        acc7: hits / n,
        acc2,
        f1,
        mae: abs / n,
        corr,
    }
}

#[derive(Debug)]
pub struct ClassificationOracle {
    pub accuracy: f64,
    pub class_acc: Vec<f64>,
    pub class_f1: Vec<f64>,
    pub mean_f1: f64,
}

/// One-vs-rest accuracy and F1 per class.
pub fn classification_oracle(preds: &[usize], labels: &[usize], classes: usize) -> ClassificationOracle {
    let n = preds.len();
    let accuracy = (0..n).filter(|&i| preds[i] == labels[i]).count() as f64 / n as f64;
    let mut class_acc = Vec::new();
    let mut class_f1 = Vec::new();
    for c in 0..classes {
        let agree = (0..n).filter(|&i| (preds[i] == c) == (labels[i] == c)).count();
        class_acc.push(agree as f64 / n as f64);
        let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count();
        let fp = (0..n).filter(|&i| preds[i] == c && labels[i] != c).count();
        let fn_ = (0..n).filter(|&i| preds[i] != c && labels[i] == c).count();
        class_f1.push(f1_from_counts(tp, fp, fn_));
    }
    let mean_f1 = class_f1.iter().sum::<f64>() / classes as f64;
    ClassificationOracle {
        accuracy,
        class_acc,
        class_f1,
        mean_f1,
    }
}

// ------------------------------------------------------------ random cases

pub fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with uniform noise so zero-initialized biases
/// and unit gains are exercised too.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = random_tensor(rng, &shape, scale);
    }
}

/// `[n, t]` mask with random valid lengths in `1..=t`; sample 0 is full.
pub fn ragged_mask(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; n * t];
    for b in 0..n {
        let len = if b == 0 { t } else { rng.random_range(1..=t) };
        data[b * t..b * t + len].iter_mut().for_each(|v| *v = 1.0);
    }
    Tensor::new(vec![n, t], data).unwrap()
}

/// Random `[n, t, d]` features zeroed at padded steps.
pub fn masked_input(rng: &mut ChaCha8Rng, mask: &Tensor, d: usize) -> Tensor {
    let (n, t) = (mask.shape()[0], mask.shape()[1]);
    let mut x = random_tensor(rng, &[n, t, d], 1.5);
    for b in 0..n {
        for i in 0..t {
            if mask.data()[b * t + i] == 0.0 {
                x.data_mut()[(b * t + i) * d..(b * t + i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    x
}

pub fn build<T>(store: &mut ParamStore, rng: &mut ChaCha8Rng, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> T {
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let mut pb = ParamBuilder::new(store, &mut init);
    f(&mut pb)
}

pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d = 8;
    c.model.d_h = 6;
    c.model.heads = 2;
    c.psa.layers = 2;
    c.psa.wal_hidden = 4;
    c.hca.layers = 1;
    c
}

pub fn tiny_spec() -> GeneratorSpec {
    GeneratorSpec {
        dims: [3, 2, 2],
        lengths: [(3, 4), (4, 5), (5, 6)],
        visual_lag: (1, 2),
        audio_window: (2, 3),
        ..Default::default()
    }
}

pub fn tiny_batch(n: usize, seed: u64) -> (DatasetInfo, Batch) {
    let spec = tiny_spec();
    let samples = generate_synthetic(n, seed, &spec).unwrap();
    let info = spec.info();
    let b = make_batches(&samples, &info, n.max(2), 0, false).unwrap().remove(0);
    (info, b)
}

// ------------------------------------------------------------------ trials

const D: usize = 4;
const HEADS: usize = 2;

/// Two chained layers: the second predicts its maps from the first's logits.
pub fn psa_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 1);
    let mut store = ParamStore::new();
    let (l0, l1) = build(&mut store, &mut rng, |pb| {
        (
            PsaLayer::new(&mut pb.sub("l0"), D, HEADS, 3 * D, false).unwrap(),
            PsaLayer::new(&mut pb.sub("l1"), D, HEADS, 3 * D, true).unwrap(),
        )
    });
    randomize(&mut store, &mut rng, 0.8);
    let (n, t) = (rng.random_range(1..=3), rng.random_range(1..=5));
    let mask = ragged_mask(&mut rng, n, t);
    let x = masked_input(&mut rng, &mask, D);
    let opts = PsaOptions {
        mu: rng.random_range(0.0..=1.0),
        literal: rng.random_bool(0.5),
        chain: true,
        wal: true,
    };

    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let o0 = l0.forward(&mut g, xv, &mask, None, &opts).unwrap();
    let o1 = l1.forward(&mut g, o0.z, &mask, Some(o0.logits), &opts).unwrap();

    let mut err: f64 = 0.0;
    for b in 0..n {
        let m = mask_row(&mask, b);
        let r0 = psa_layer(&store, &l0, &sample(&x, b), &m, None, opts.mu, opts.literal);
        let r1 = psa_layer(&store, &l1, &r0.z, &m, Some(&r0.logits), opts.mu, opts.literal);
        err = err
            .max(max_diff(&r0.z, &sample(g.value(o0.z), b)))
            .max(max_diff_maps(&r0.weights, &maps(g.value(o0.weights), b)))
            .max(max_diff_maps(&r1.logits, &maps(g.value(o1.logits), b)))
            .max(max_diff_maps(&r1.weights, &maps(g.value(o1.weights), b)))
            .max(max_diff(&r1.z, &sample(g.value(o1.z), b)));
    }
    err
}

pub fn wal_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 2);
    let mut store = ParamStore::new();
    let lens = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let hidden = rng.random_range(0..=3);
    let wal = build(&mut store, &mut rng, |pb| WeightedAttention::new(pb, lens.map(|t| t * D), hidden).unwrap());
    randomize(&mut store, &mut rng, 0.8);
    let n = rng.random_range(1..=3);
    let z: Vec<Tensor> = lens.iter().map(|&t| random_tensor(&mut rng, &[n, t, D], 1.0)).collect();
    let mut g = Graph::with_params(&store);
    let zv = [0, 1, 2].map(|m| g.constant(z[m].clone()));
    let (psi, weighted) = wal.forward(&mut g, &zv).unwrap();
    let psi = rows(g.value(psi));
    let mut err: f64 = 0.0;
    for b in 0..n {
        let zb = [0, 1, 2].map(|m| sample(&z[m], b));
        let expect = wal_psi(&store, &wal, &zb);
        err = err.max(max_diff(&vec![expect.clone()], &vec![psi[b].clone()]));
        for m in 0..3 {
            let scaled: Mat = zb[m].iter().map(|r| r.iter().map(|v| v * expect[m]).collect()).collect();
            err = err.max(max_diff(&scaled, &sample(g.value(weighted[m]), b)));
        }
    }
    err
}

pub fn mru_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 3);
    let mut store = ParamStore::new();
    let unit = build(&mut store, &mut rng, |pb| Mru::new(pb, D, HEADS).unwrap());
    randomize(&mut store, &mut rng, 0.8);
    let n = rng.random_range(1..=3);
    let (ts, tt) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let sm = ragged_mask(&mut rng, n, ts);
    let tm = ragged_mask(&mut rng, n, tt);
    let s = masked_input(&mut rng, &sm, D);
    let t = masked_input(&mut rng, &tm, D);
    let mut g = Graph::with_params(&store);
    let (sv, tv) = (g.constant(s.clone()), g.constant(t.clone()));
    let out = unit.forward(&mut g, sv, &sm, tv, &tm).unwrap();
    let mut err: f64 = 0.0;
    for b in 0..n {
        let (z, w) = mru(&store, &unit, &sample(&s, b), &mask_row(&sm, b), &sample(&t, b), &mask_row(&tm, b));
        err = err
            .max(max_diff(&z, &sample(g.value(out.z), b)))
            .max(max_diff_maps(&w, &maps(g.value(out.weights), b)));
    }
    err
}

pub fn hierarchy_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 4);
    let mut store = ParamStore::new();
    let target = rng.random_range(0..3);
    let unit = build(&mut store, &mut rng, |pb| HcaTarget::new(pb, target, D, HEADS).unwrap());
    randomize(&mut store, &mut rng, 0.6);
    let n = rng.random_range(1..=3);
    let masks: [Tensor; 3] = [0, 1, 2].map(|_| {
        let t = rng.random_range(1..=4);
        ragged_mask(&mut rng, n, t)
    });
    let z: [Tensor; 3] = [0, 1, 2].map(|m| masked_input(&mut rng, &masks[m], D));
    let mut g = Graph::with_params(&store);
    let zv = [0, 1, 2].map(|m| g.constant(z[m].clone()));
    let out = unit.forward(&mut g, &zv, &masks, &HcaOptions::default()).unwrap();
    let mut err: f64 = 0.0;
    for b in 0..n {
        let zb = [0, 1, 2].map(|m| sample(&z[m], b));
        let mb = [0, 1, 2].map(|m| mask_row(&masks[m], b));
        err = err.max(max_diff(&hca_target(&store, &unit, &zb, &mb), &sample(g.value(out.z), b)));
    }
    err
}

pub fn hsic_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 5);
    let n = rng.random_range(2..=6);
    let (d1, d2) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let h1 = random_tensor(&mut rng, &[n, d1], 2.0);
    let h2 = random_tensor(&mut rng, &[n, d2], 2.0);
    let mut g = Graph::new();
    let (a, b) = (g.constant(h1.clone()), g.constant(h2.clone()));
    let v = graph_hsic(&mut g, a, b).unwrap().unwrap();
    (g.value(v).item() - hsic_ref(&h1, &h2)).abs()
}

fn hsic_ref(h1: &Tensor, h2: &Tensor) -> f64 {
    hsic(&rows(h1), &rows(h2))
}

/// Disparity, importance weights, both adversarial terms and the importance
/// discriminator's own loss on random representations.
pub fn losses_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 6);
    let mut store = ParamStore::new();
    let d_h = rng.random_range(2..=5);
    let (dm, di) = build(&mut store, &mut rng, |pb| {
        (
            ModalityDiscriminator::new(&mut pb.sub("dm"), d_h).unwrap(),
            ImportanceDiscriminator::new(&mut pb.sub("di"), d_h).unwrap(),
        )
    });
    randomize(&mut store, &mut rng, 1.0);
    let n = rng.random_range(2..=5);
    let he: [Tensor; 3] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[n, d_h], 1.5));
    let ha: [Tensor; 3] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[n, d_h], 1.5));
    let mut g = Graph::with_params(&store);
    let hev = [0, 1, 2].map(|m| g.constant(he[m].clone()));
    let hav = [0, 1, 2].map(|m| g.constant(ha[m].clone()));
    let dis = disparity_loss(&mut g, &hev, &hav).unwrap();
    let omegas: [Tensor; 3] = [0, 1, 2].map(|m| di.importance(&mut g, hav[m], m).unwrap().1);
    let (agn, exc) = adversarial_losses(&mut g, &dm, &hev, &hav, &omegas, 1.0).unwrap();
    let imp = di.training_loss(&mut g, &hav).unwrap();

    let her = [0, 1, 2].map(|m| rows(&he[m]));
    let har = [0, 1, 2].map(|m| rows(&ha[m]));
    let om = [0, 1, 2].map(|m| omega(&store, &di, &har[m], m));
    let (ragn, rexc) = adversarial(&store, &dm, &her, &har, &om);
    let mut err = (g.value(dis).item() - disparity(&her, &har)).abs();
    for m in 0..3 {
        err = err.max(max_diff(&vec![om[m].clone()], &vec![omegas[m].data().to_vec()]));
    }
    err.max((g.value(agn).item() - ragn).abs())
        .max((g.value(exc).item() - rexc).abs())
        .max((g.value(imp).item() - importance_loss(&store, &di, &har)).abs())
}

pub fn dgf_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 7);
    let mut store = ParamStore::new();
    let d_h = rng.random_range(1..=5);
    let gf = build(&mut store, &mut rng, |pb| GraphFusion::new(pb, d_h).unwrap());
    randomize(&mut store, &mut rng, 1.0);
    let n = rng.random_range(1..=4);
    let self_loops = rng.random_bool(0.7);
    let nodes: [Tensor; 3] = [0, 1, 2].map(|_| random_tensor(&mut rng, &[n, d_h], 1.5));
    let mut g = Graph::with_params(&store);
    let nv = [0, 1, 2].map(|m| g.constant(nodes[m].clone()));
    let out = gf.forward(&mut g, &nv, self_loops).unwrap();
    let h = rows(g.value(out.h));
    let xi = g.value(out.xi.unwrap()).clone();
    let mut err: f64 = 0.0;
    for b in 0..n {
        let nb = [0, 1, 2].map(|m| nodes[m].data()[b * d_h..(b + 1) * d_h].to_vec());
        let (fin, rxi) = graph_fuse(&store, &gf, [&nb[0], &nb[1], &nb[2]], self_loops);
        let gxi: Mat = xi.data()[b * 9..(b + 1) * 9].chunks(3).map(|r| r.to_vec()).collect();
        err = err.max(max_diff(&vec![fin], &vec![h[b].clone()])).max(max_diff(&rxi, &gxi));
    }
    err
}

/// The full objective of a randomly initialized tiny model recomposed from
/// its representations and predictions.
pub fn total_trial(seed: u64) -> f64 {
    let mut rng = rng(seed, 8);
    let mut cfg = tiny_config();
    cfg.train.seed = seed;
    cfg.loss.alpha = rng.random_range(0.0..1.0);
    cfg.loss.beta = rng.random_range(0.0..1.0);
    let n = rng.random_range(2..=4);
    let (info, batch) = tiny_batch(n, seed);
    let mut store = ParamStore::new();
    let model = Mea::new(&cfg, &info, &mut store).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let mut g = Graph::with_params(&store);
    let fwd = model.forward(&mut g, &batch).unwrap();
    let losses = model.losses(&mut g, &fwd, &batch).unwrap();

    let pred = g.value(fwd.pred).data().to_vec();
    let y: Vec<f64> = batch.labels.iter().map(|l| l.as_f64()).collect();
    let task = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
    let he = [0, 1, 2].map(|m| rows(g.value(fwd.he[m])));
    let ha = [0, 1, 2].map(|m| rows(g.value(fwd.ha[m])));
    let dis = disparity(&he, &ha);
    let om = [0, 1, 2].map(|m| omega(&store, &model.importance, &ha[m], m));
    let (agn, exc) = adversarial(&store, &model.discriminator, &he, &ha, &om);
    let all = task + cfg.loss.alpha * dis + cfg.loss.beta * (agn + exc);
    let objective = all + importance_loss(&store, &model.importance, &ha);
    let t = &losses.terms;
    [
        (t.task, task),
        (t.dis, dis),
        (t.agn, agn),
        (t.exc, exc),
        (t.all, all),
        (losses.objective, objective),
    ]
    .iter()
    .map(|&(v, r)| (g.value(v).item() - r).abs())
    .fold(0.0, f64::max)
}

pub type Trial = fn(u64) -> f64;

pub const ORACLES: [(&str, Trial); 8] = [
    ("psa", psa_trial),
    ("wal", wal_trial),
    ("mru", mru_trial),
    ("hierarchy", hierarchy_trial),
    ("hsic", hsic_trial),
    ("losses", losses_trial),
    ("graph_fusion", dgf_trial),
    ("total", total_trial),
];

pub fn worst_over_trials(trial: Trial) -> f64 {
    (0..ORACLE_TRIALS).map(trial).fold(0.0, f64::max)
}

// -------------------------------------------------------------- invariants

#[derive(Debug, Default)]
pub struct NormalizationReport {
    /// Largest `|Σ row - 1|` over attention rows, ψ and ξ.
    pub row_error: f64,
    /// Largest weight placed on a masked key.
    pub masked_max: f64,
    pub rows: usize,
}

impl NormalizationReport {
    fn row(&mut self, row: &[f64], keep: &[f64]) {
        self.row_error = self.row_error.max((row.iter().sum::<f64>() - 1.0).abs());
        for (w, &k) in row.iter().zip(keep) {
            if k == 0.0 {
                self.masked_max = self.masked_max.max(w.abs());
            }
        }
        self.rows += 1;
    }

    /// Rows of `[n, K, t_q, t_k]` weights against per-sample key masks.
    fn maps(&mut self, weights: &Tensor, key_mask: &Tensor) {
        for b in 0..weights.shape()[0] {
            let keep = mask_row(key_mask, b);
            for map in maps(weights, b) {
                for r in &map {
                    self.row(r, &keep);
                }
            }
        }
    }

    fn simplex_rows(&mut self, t: &Tensor, width: usize) {
        let ones = vec![1.0; width];
        for r in t.data().chunks(width) {
            self.row(r, &ones);
        }
    }

    pub fn merge(&mut self, other: NormalizationReport) {
        self.row_error = self.row_error.max(other.row_error);
        self.masked_max = self.masked_max.max(other.masked_max);
        self.rows += other.rows;
    }
}

fn concat_mask_tensor(masks: &[&Tensor]) -> Tensor {
    let n = masks[0].shape()[0];
    let mut data = Vec::new();
    for b in 0..n {
        for m in masks {
            data.extend(mask_row(m, b));
        }
    }
    let total = masks.iter().map(|m| m.shape()[1]).sum();
    Tensor::new(vec![n, total], data).unwrap()
}

/// Every attention map, ψ and ξ of a randomized tiny model on a ragged batch,
/// plus a mixed-granularity unit over concatenated sources.
pub fn normalization_report(seed: u64) -> NormalizationReport {
    let mut rng = rng(seed, 9);
    let mut cfg = tiny_config();
    cfg.train.seed = seed;
    let (info, batch) = tiny_batch(4, seed);
    let mut store = ParamStore::new();
    let model = Mea::new(&cfg, &info, &mut store).unwrap();
    randomize(&mut store, &mut rng, 0.7);
    let mut g = Graph::with_params(&store);
    let fwd = model.forward(&mut g, &batch).unwrap();
    let mut report = NormalizationReport::default();
    for layer in &fwd.psa_weights {
        for m in 0..3 {
            report.maps(g.value(layer[m]), &batch.masks[m]);
        }
    }
    for m in 0..3 {
        let sources = mea::hca::others(m);
        assert_eq!(fwd.hca_fine_weights[m].len(), 2);
        for (w, &s) in fwd.hca_fine_weights[m].iter().zip(&sources) {
            report.maps(g.value(*w), &batch.masks[s]);
        }
    }
    for &psi in &fwd.psi {
        report.simplex_rows(g.value(psi), 3);
    }
    for xi in fwd.xi.iter().flatten() {
        report.simplex_rows(g.value(*xi), 3);
    }

    let mut store = ParamStore::new();
    let unit = build(&mut store, &mut rng, |pb| Mru::new(pb, D, HEADS).unwrap());
    randomize(&mut store, &mut rng, 0.8);
    let n = 3;
    let parts: Vec<Tensor> = (0..3)
        .map(|_| {
            let t = rng.random_range(1..=4);
            ragged_mask(&mut rng, n, t)
        })
        .collect();
    let source_mask = concat_mask_tensor(&[&parts[0], &parts[1], &parts[2]]);
    let target_mask = ragged_mask(&mut rng, n, 3);
    let source = masked_input(&mut rng, &source_mask, D);
    let target = masked_input(&mut rng, &target_mask, D);
    let mut g = Graph::with_params(&store);
    let (s, t) = (g.constant(source), g.constant(target));
    let out = unit.forward(&mut g, s, &source_mask, t, &target_mask).unwrap();
    report.maps(g.value(out.weights), &source_mask);
    report
}

/// `(HSIC(H1, H2), HSIC(H2, H1))` on a random batch.
pub fn hsic_pair(seed: u64) -> (f64, f64) {
    let mut rng = rng(seed, 10);
    let n = rng.random_range(2..=8);
    let (d1, d2) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let scale = rng.random_range(0.1..3.0);
    let h1 = random_tensor(&mut rng, &[n, d1], scale);
    let h2 = random_tensor(&mut rng, &[n, d2], scale);
    let mut g = Graph::new();
    let (a, b) = (g.constant(h1), g.constant(h2));
    let ab = graph_hsic(&mut g, a, b).unwrap().unwrap();
    let ba = graph_hsic(&mut g, b, a).unwrap().unwrap();
    (g.value(ab).item(), g.value(ba).item())
}

/// Largest output difference between a three-layer stack at `μ = 0` and the
/// same stack with the prediction chain removed.
pub fn mu_zero_gap(seed: u64) -> f64 {
    let mut rng = rng(seed, 11);
    let n = 3;
    let masks: [Tensor; 3] = [0, 1, 2].map(|_| {
        let t = rng.random_range(1..=5);
        ragged_mask(&mut rng, n, t)
    });
    let max_lengths = [0, 1, 2].map(|m| masks[m].shape()[1]);
    let mut store = ParamStore::new();
    let stack = build(&mut store, &mut rng, |pb| mea::psa::PsaStack::new(pb, 3, D, HEADS, max_lengths, 3).unwrap());
    randomize(&mut store, &mut rng, 0.8);
    let z: [Tensor; 3] = [0, 1, 2].map(|m| masked_input(&mut rng, &masks[m], D));
    let run = |chain: bool| {
        let opts = PsaOptions {
            mu: 0.0,
            literal: false,
            chain,
            wal: true,
        };
        let mut g = Graph::with_params(&store);
        let zv = [0, 1, 2].map(|m| g.constant(z[m].clone()));
        let out = stack.forward(&mut g, zv, &masks, &opts).unwrap();
        let mut values: Vec<Tensor> = out.z.iter().map(|&v| g.value(v).clone()).collect();
        values.extend(out.weights.iter().flatten().map(|&v| g.value(v).clone()));
        values
    };
    run(true)
        .iter()
        .zip(&run(false))
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max)
}

/// Whether `L_all` equals `L_task` bit for bit when `α = β = 0`.
pub fn zero_tradeoff_is_task_only(seed: u64) -> bool {
    let mut rng = rng(seed, 12);
    let mut cfg = tiny_config();
    cfg.train.seed = seed;
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    let (info, batch) = tiny_batch(rng.random_range(2..=5), seed);
    let mut store = ParamStore::new();
    let model = Mea::new(&cfg, &info, &mut store).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let mut g = Graph::with_params(&store);
    let fwd = model.forward(&mut g, &batch).unwrap();
    let l = model.losses(&mut g, &fwd, &batch).unwrap();
    let (all, task) = (g.value(l.terms.all).item(), g.value(l.terms.task).item());
    all.to_bits() == task.to_bits() && g.value(l.terms.dis).item() != 0.0
}
