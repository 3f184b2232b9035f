//! Finite-difference check of every differentiable model component on tiny
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TaskMode;
use crate::decouple::{adversarial_losses, disparity_loss, hsic, Encoder, ModalityDiscriminator, Pooling};
use crate::error::Result;
use crate::fusion::{task_loss, total_loss, GraphFusion, Head};
use crate::gradcheck::{grad_check_params, GradCheckOptions};
use crate::hca::{HcaOptions, HcaTarget, Mru};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::psa::{PsaLayer, PsaOptions, WeightedAttention};
use crate::tensor::{Graph, Tensor, Var};
use crate::unimodal::UnimodalExtractor;

/// Components in report order.
pub const COMPONENTS: [&str; 12] = [
    "unimodal",
    "psa_layer",
    "wal",
    "mru",
    "hca_target",
    "encoders",
    "hsic",
    "disparity",
    "adversarial_losses",
    "graph_fuse",
    "predict",
    "total_loss",
];

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub seed: u64,
    pub components: Vec<ComponentResult>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

const N: usize = 3;
const D: usize = 4;
const HEADS: usize = 2;
const LENS: [usize; 3] = [3, 4, 5];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// `[N, t]` mask with valid lengths `t, t-1, ..`, never below 1.
fn mask(t: usize) -> Tensor {
    let mut m = vec![0.0; N * t];
    for b in 0..N {
        for i in 0..t.saturating_sub(b).max(1) {
            m[b * t + i] = 1.0;
        }
    }
    Tensor::new(vec![N, t], m).expect("shape matches")
}

/// Contracts `out` with a fixed random tensor so every entry matters.
fn readout(g: &mut Graph<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

struct Case {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64, salt: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt)),
        }
    }

    fn build<T>(&mut self, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> Result<T> {
        let mut init = ChaCha8Rng::seed_from_u64(self.rng.random());
        let mut pb = ParamBuilder::new(&mut self.store, &mut init);
        f(&mut pb)
    }

    fn random(&mut self, shape: &[usize]) -> Tensor {
        random(&mut self.rng, shape)
    }

    fn check<F>(&self, name: &'static str, f: F, inputs: &[Tensor]) -> Result<ComponentResult>
    where
        F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
    {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        let r = grad_check_params(&self.store, &ids, f, inputs, GradCheckOptions::default())?;
        Ok(ComponentResult {
            name,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        })
    }
}

fn vars3(v: &[Var], from: usize) -> [Var; 3] {
    [v[from], v[from + 1], v[from + 2]]
}

fn check_component(name: &'static str, seed: u64, salt: u64) -> Result<ComponentResult> {
    let mut c = Case::new(seed, salt);
    let masks = LENS.map(mask);
    match name {
        "unimodal" => {
            let ext = c.build(|pb| UnimodalExtractor::new(pb, 3, D, 3))?;
            let x = c.random(&[N, 4, 3]);
            let w = c.random(&[N, 4, D]);
            let m = masks[1].clone();
            c.check(name, move |g, v| {
                let z = ext.forward(g, v[0], &m)?;
                readout(g, z, &w)
            }, &[x])
        }
        "psa_layer" => {
            let layer = c.build(|pb| PsaLayer::new(pb, D, HEADS, 2 * D, true))?;
            let t = 4;
            let z = c.random(&[N, t, D]);
            let prev = c.random(&[N, HEADS, t, t]);
            let w = c.random(&[N, t, D]);
            let wl = c.random(&[N, HEADS, t, t]);
            let m = masks[1].clone();
            let opts = PsaOptions {
                mu: 0.3,
                literal: false,
                chain: true,
                wal: true,
            };
            c.check(name, move |g, v| {
                let out = layer.forward(g, v[0], &m, Some(v[1]), &opts)?;
                let a = readout(g, out.z, &w)?;
                let b = readout(g, out.logits, &wl)?;
                g.add(a, b)
            }, &[z, prev])
        }
        "wal" => {
            let wal = c.build(|pb| WeightedAttention::new(pb, LENS.map(|t| t * D), 3))?;
            let z: Vec<Tensor> = LENS.iter().map(|&t| c.random(&[N, t, D])).collect();
            let w: Vec<Tensor> = LENS.iter().map(|&t| c.random(&[N, t, D])).collect();
            let wp = c.random(&[N, 3]);
            c.check(name, move |g, v| {
                let (psi, out) = wal.forward(g, &vars3(v, 0))?;
                let mut acc = readout(g, psi, &wp)?;
                for m in 0..3 {
                    let r = readout(g, out[m], &w[m])?;
                    acc = g.add(acc, r)?;
                }
                Ok(acc)
            }, &z)
        }
        "mru" => {
            let mru = c.build(|pb| Mru::new(pb, D, HEADS))?;
            let src = c.random(&[N, 5, D]);
            let tgt = c.random(&[N, 3, D]);
            let w = c.random(&[N, 3, D]);
            let (sm, tm) = (masks[2].clone(), masks[0].clone());
            c.check(name, move |g, v| {
                let out = mru.forward(g, v[0], &sm, v[1], &tm)?;
                readout(g, out.z, &w)
            }, &[src, tgt])
        }
        "hca_target" => {
            let target = c.build(|pb| HcaTarget::new(pb, 1, D, HEADS))?;
            let z: Vec<Tensor> = LENS.iter().map(|&t| c.random(&[N, t, D])).collect();
            let w = c.random(&[N, LENS[1], D]);
            let opts = HcaOptions {
                mixed: true,
                coarse: true,
                fine: true,
            };
            c.check(name, move |g, v| {
                let out = target.forward(g, &vars3(v, 0), &masks, &opts)?;
                readout(g, out.z, &w)
            }, &z)
        }
        "encoders" => {
            let (exc, agn) = c.build(|pb| Ok((Encoder::new(pb, "exclusive", D, 3)?, Encoder::new(pb, "agnostic", D, 3)?)))?;
            let z = c.random(&[N, 4, D]);
            let w = c.random(&[N, 3]);
            let m = masks[1].clone();
            c.check(name, move |g, v| {
                let a = exc.forward(g, v[0], &m, Pooling::Mean)?;
                let b = agn.forward(g, v[0], &m, Pooling::Mean)?;
                let s = g.sub(a, b)?;
                let p = g.mul(s, a)?;
                readout(g, p, &w)
            }, &[z])
        }
        "hsic" => {
            let h1 = c.random(&[N + 1, 3]);
            let h2 = c.random(&[N + 1, 2]);
            c.check(name, |g, v| Ok(hsic(g, v[0], v[1])?.expect("n >= 2")), &[h1, h2])
        }
        "disparity" => {
            let hs: Vec<Tensor> = (0..6).map(|_| c.random(&[N, 3])).collect();
            c.check(name, |g, v| disparity_loss(g, &vars3(v, 0), &vars3(v, 3)), &hs)
        }
        "adversarial_losses" => {
            let dm = c.build(|pb| ModalityDiscriminator::new(pb, 3))?;
            let hs: Vec<Tensor> = (0..6).map(|_| c.random(&[N, 3])).collect();
            let omega: [Tensor; 3] = [(); 3].map(|_| random(&mut c.rng, &[N, 1]).map(|x| 0.5 + 0.5 * x));
            // λ = -1 turns the reversal into the identity so finite differences apply
            c.check(name, move |g, v| {
                let (agn, exc) = adversarial_losses(g, &dm, &vars3(v, 0), &vars3(v, 3), &omega, -1.0)?;
                let agn = g.scale(agn, 0.7);
                g.add(agn, exc)
            }, &hs)
        }
        "graph_fuse" => {
            let dgf = c.build(|pb| GraphFusion::new(pb, 3))?;
            let hs: Vec<Tensor> = (0..3).map(|_| c.random(&[N, 3])).collect();
            let w = c.random(&[N, 3]);
            c.check(name, move |g, v| {
                let out = dgf.forward(g, &vars3(v, 0), true)?;
                readout(g, out.h, &w)
            }, &hs)
        }
        "predict" => {
            let (reg, cls) = c.build(|pb| Ok((Head::new(&mut pb.sub("reg"), 6, 4, 1, 2)?, Head::new(&mut pb.sub("cls"), 6, 4, 4, 2)?)))?;
            let h = c.random(&[N, 6]);
            let y: Vec<f64> = (0..N).map(|_| c.rng.random_range(-3.0..3.0)).collect();
            let k: Vec<f64> = (0..N).map(|i| (i % 4) as f64).collect();
            c.check(name, move |g, v| {
                let p = reg.forward(g, v[0])?;
                let a = task_loss(g, p, TaskMode::Regression, &y)?;
                let q = cls.forward(g, v[0])?;
                let b = task_loss(g, q, TaskMode::Classification { classes: 4 }, &k)?;
                g.add(a, b)
            }, &[h])
        }
        "total_loss" => {
            let terms: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(c.rng.random_range(0.1..2.0))).collect();
            let (alpha, beta) = (c.rng.random_range(0.0..1.0), c.rng.random_range(0.0..1.0));
            c.check(name, move |g, v| {
                let sq: Vec<Var> = v.iter().map(|&x| g.mul(x, x)).collect::<Result<_>>()?;
                Ok(total_loss(g, sq[0], sq[1], sq[2], sq[3], alpha, beta)?.all)
            }, &terms)
        }
        other => unreachable!("unknown component {other}"),
    }
}

/// Checks every component once at `seed`.
pub fn gradcheck_all(seed: u64) -> Result<SuiteReport> {
    let components = COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, name)| check_component(name, seed, i as u64))
        .collect::<Result<_>>()?;
    Ok(SuiteReport { seed, components })
}
