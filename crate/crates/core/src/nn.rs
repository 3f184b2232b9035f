//! Layers shared by the model blocks.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Adds a `[c]` vector along the last axis of `x`.
pub fn add_bias(g: &mut Graph<'_>, x: Var, bias: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let c = g.shape(bias)[0];
    let mut shape = vec![1; rank];
    shape[rank - 1] = c;
    let b = g.reshape(bias, &shape)?;
    g.add(x, b)
}

/// Multiplies `x: [n, t, c]` by a `[n, t]` mask, zeroing padded steps.
pub fn mask_steps(g: &mut Graph<'_>, x: Var, mask: &Tensor) -> Result<Var> {
    let s = mask.shape();
    let m = g.constant(mask.clone().reshape(&[s[0], s[1], 1])?);
    g.mul(x, m)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            w: sub.weight("w", fan_in, fan_out)?,
            b: Some(sub.zeros("b", &[fan_out])?),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: pb.weight(name, fan_in, fan_out)?,
            b: None,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                add_bias(g, y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gain: sub.ones("gain", &[dim])?,
            shift: sub.zeros("shift", &[dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS);
        let rank = g.shape(y).len();
        let dim = g.shape(y)[rank - 1];
        let mut shape = vec![1; rank];
        shape[rank - 1] = dim;
        let gain = g.param(self.gain);
        let gain = g.reshape(gain, &shape)?;
        let y = g.mul(y, gain)?;
        let shift = g.param(self.shift);
        add_bias(g, y, shift)
    }
}

/// Two affine maps with GeLU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            l1: Linear::new(&mut sub, "l1", d_in, hidden)?,
            l2: Linear::new(&mut sub, "l2", hidden, d_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with a `d × d` output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::no_bias(pb, "wq", dim, dim)?,
            wk: Linear::no_bias(pb, "wk", dim, dim)?,
            wv: Linear::no_bias(pb, "wv", dim, dim)?,
            wo: Linear::no_bias(pb, "wo", dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[n, t, d] -> [n, K, t, d_k]`
    fn split_heads(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim()])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Raw logits `Q Kᵀ / √d_k` of shape `[n, K, t_q, t_k]` and the split
    /// values `[n, K, t_k, d_k]`.
    pub fn logits(&self, g: &mut Graph<'_>, query: Var, source: Var) -> Result<(Var, Var)> {
        let (sq, ss) = (g.shape(query).to_vec(), g.shape(source).to_vec());
        if sq.len() != 3 || ss.len() != 3 || sq[0] != ss[0] || sq[2] != self.dim || ss[2] != self.dim {
            return Err(Error::mismatch("attention", &sq, &ss));
        }
        let q = self.wq.forward(g, query)?;
        let q = self.split_heads(g, q)?;
        let k = self.wk.forward(g, source)?;
        let k = self.split_heads(g, k)?;
        let v = self.wv.forward(g, source)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.head_dim() as f64).sqrt());
        Ok((logits, v))
    }

    /// Applies attention weights `[n, K, t_q, t_k]` to values and merges heads
    /// back to `[n, t_q, d]`.
    pub fn merge(&self, g: &mut Graph<'_>, weights: Var, v: Var) -> Result<Var> {
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let s = g.shape(out).to_vec();
        let out = g.reshape(out, &[s[0], s[1], self.dim])?;
        self.wo.forward(g, out)
    }
}

/// `[n, 1, 1, t]` key mask for attention logits from a `[n, t]` step mask.
pub fn key_mask(mask: &Tensor) -> Result<Tensor> {
    let s = mask.shape();
    mask.clone().reshape(&[s[0], 1, 1, s[1]])
}

/// Fixed sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("positive extents")
}

/// Masked mean over time: `[n, t, c]` with `[n, t]` mask -> `[n, c]`.
pub fn masked_mean(g: &mut Graph<'_>, x: Var, mask: &Tensor) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, t) = (s[0], s[1]);
    let mut inv = vec![0.0; n * t];
    for b in 0..n {
        let row = &mask.data()[b * t..(b + 1) * t];
        let count: f64 = row.iter().sum();
        if count == 0.0 {
            return Err(Error::InvalidArgument(format!("sample {b} has no valid steps")));
        }
        for (dst, m) in inv[b * t..(b + 1) * t].iter_mut().zip(row) {
            *dst = m / count;
        }
    }
    let w = g.constant(Tensor::new(vec![n, t, 1], inv)?);
    let weighted = g.mul(x, w)?;
    let pooled = g.sum_axis(weighted, 1)?;
    g.reshape(pooled, &[n, s[2]])
}

/// Features at the last valid step: `[n, t, c]` -> `[n, c]`.
pub fn last_valid(g: &mut Graph<'_>, x: Var, mask: &Tensor) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, t) = (s[0], s[1]);
    let mut sel = vec![0.0; n * t];
    for b in 0..n {
        let len = mask.data()[b * t..(b + 1) * t].iter().filter(|&&m| m != 0.0).count();
        if len == 0 {
            return Err(Error::InvalidArgument(format!("sample {b} has no valid steps")));
        }
        sel[b * t + len - 1] = 1.0;
    }
    let w = g.constant(Tensor::new(vec![n, t, 1], sel)?);
    let picked = g.mul(x, w)?;
    let pooled = g.sum_axis(picked, 1)?;
    g.reshape(pooled, &[n, s[2]])
}
