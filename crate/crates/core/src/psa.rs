//! Predictive self-attention: per-modality self-attention layers whose maps
//! are refined by a convolutional prediction of the previous layer's logits,
//! followed by a weighting layer that rescales the three modality streams.

use crate::error::{Error, Result};
use crate::nn::{key_mask, mask_steps, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsaOptions {
    pub mu: f64,
    /// Softmax the current logits before mixing them with the prediction.
    pub literal: bool,
    pub chain: bool,
    pub wal: bool,
}

impl Default for PsaOptions {
    fn default() -> Self {
        Self {
            mu: 0.25,
            literal: false,
            chain: true,
            wal: true,
        }
    }
}

/// 3×3 convolution over the `K` head maps with `K` output channels.
#[derive(Clone, Debug)]
pub struct MapPredictor {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl MapPredictor {
    pub fn new(pb: &mut ParamBuilder<'_>, heads: usize) -> Result<Self> {
        let fan = heads * 9;
        Ok(Self {
            kernel: pb.tensor("kernel", &[heads, heads, 3, 3], Init::FanUniform { fan_in: fan, fan_out: fan })?,
            bias: pb.zeros("bias", &[heads])?,
        })
    }

    /// `GeLU(Conv3×3(A_prev))` with padded rows and columns of `A_prev` zeroed.
    pub fn forward(&self, g: &mut Graph<'_>, prev: Var, mask: &Tensor) -> Result<Var> {
        let (n, t) = (mask.shape()[0], mask.shape()[1]);
        let md = mask.data();
        let mut pair = vec![0.0; n * t * t];
        for b in 0..n {
            for i in 0..t {
                for j in 0..t {
                    pair[(b * t + i) * t + j] = md[b * t + i] * md[b * t + j];
                }
            }
        }
        let pair = g.constant(Tensor::new(vec![n, 1, t, t], pair)?);
        let prev = g.mul(prev, pair)?;
        let k = g.param(self.kernel);
        let y = g.conv2d(prev, k)?;
        let heads = g.shape(y)[1];
        let b = g.param(self.bias);
        let b = g.reshape(b, &[1, heads, 1, 1])?;
        let y = g.add(y, b)?;
        Ok(g.gelu(y))
    }
}

#[derive(Clone, Debug)]
pub struct PsaLayer {
    pub ln_in: LayerNorm,
    pub attention: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub predictor: Option<MapPredictor>,
}

/// Result of one layer on one modality.
#[derive(Clone, Copy, Debug)]
pub struct PsaLayerOutput {
    pub z: Var,
    /// Raw `Q Kᵀ / √d_k` logits, `[n, K, t, t]`, fed to the next predictor.
    pub logits: Var,
    /// Attention weights actually applied, `[n, K, t, t]`.
    pub weights: Var,
}

impl PsaLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ffn_hidden: usize, predictive: bool) -> Result<Self> {
        Ok(Self {
            ln_in: LayerNorm::new(pb, "ln_in", dim)?,
            attention: Attention::new(&mut pb.sub("attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(pb, "ln_ffn", dim)?,
            ffn: FeedForward::new(pb, "ffn", dim, ffn_hidden, dim)?,
            predictor: if predictive {
                Some(MapPredictor::new(&mut pb.sub("chain"), heads)?)
            } else {
                None
            },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        mask: &Tensor,
        prev_logits: Option<Var>,
        opts: &PsaOptions,
    ) -> Result<PsaLayerOutput> {
        let h = self.ln_in.forward(g, z)?;
        let (logits, v) = self.attention.logits(g, h, h)?;
        let km = key_mask(mask)?;
        let weights = match (prev_logits, &self.predictor, opts.chain) {
            (Some(prev), Some(pred), true) => {
                if g.shape(prev) != g.shape(logits) {
                    return Err(Error::mismatch("psa chain", g.shape(prev), g.shape(logits)));
                }
                let predicted = pred.forward(g, prev, mask)?;
                let current = if opts.literal {
                    g.masked_softmax(logits, &km)?
                } else {
                    logits
                };
                let a = g.scale(predicted, opts.mu);
                let b = g.scale(current, 1.0 - opts.mu);
                let mixed = g.add(a, b)?;
                g.masked_softmax(mixed, &km)?
            }
            _ => g.masked_softmax(logits, &km)?,
        };
        let attended = self.attention.merge(g, weights, v)?;
        let z_e = g.add(h, attended)?;
        let f = self.ln_ffn.forward(g, z_e)?;
        let f = self.ffn.forward(g, f)?;
        let z_e = g.add(f, z_e)?;
        let z_e = mask_steps(g, z_e, mask)?;
        Ok(PsaLayerOutput { z: z_e, logits, weights })
    }
}

/// Weighted attention layer: one score per modality from its flattened
/// `[t̂_m · d]` representation, normalized across the three modalities.
#[derive(Clone, Debug)]
pub struct WeightedAttention {
    pub proj: [Linear; 3],
    pub score: [ParamId; 3],
}

impl WeightedAttention {
    /// `hidden == 0` uses the full flattened width as the hidden size.
    pub fn new(pb: &mut ParamBuilder<'_>, widths: [usize; 3], hidden: usize) -> Result<Self> {
        let mut proj = Vec::new();
        let mut score = Vec::new();
        for (m, &w) in ["L", "V", "A"].iter().zip(&widths) {
            let hid = if hidden == 0 { w } else { hidden };
            let mut sub = pb.sub(m);
            proj.push(Linear::new(&mut sub, "w", w, hid)?);
            score.push(sub.weight("p", hid, 1)?);
        }
        Ok(Self {
            proj: proj.try_into().expect("three modalities"),
            score: score.try_into().expect("three modalities"),
        })
    }

    /// `γ_m = Pᵀ tanh(W z̃ + b)` for each modality, as `[n, 3]`.
    pub fn scores(&self, g: &mut Graph<'_>, z: &[Var; 3]) -> Result<Var> {
        let mut gammas = Vec::with_capacity(3);
        for m in 0..3 {
            let s = g.shape(z[m]).to_vec();
            let flat = g.reshape(z[m], &[s[0], s[1] * s[2]])?;
            let h = self.proj[m].forward(g, flat)?;
            let h = g.tanh(h);
            let p = g.param(self.score[m]);
            gammas.push(g.matmul(h, p)?);
        }
        g.concat(&gammas, 1)
    }

    /// Returns `ψ: [n, 3]` and the rescaled representations.
    pub fn forward(&self, g: &mut Graph<'_>, z: &[Var; 3]) -> Result<(Var, [Var; 3])> {
        let gamma = self.scores(g, z)?;
        let psi = g.softmax(gamma)?;
        let n = g.shape(psi)[0];
        let mut out = *z;
        for (m, o) in out.iter_mut().enumerate() {
            let w = g.narrow(psi, 1, m, 1)?;
            let w = g.reshape(w, &[n, 1, 1])?;
            *o = g.mul(z[m], w)?;
        }
        Ok((psi, out))
    }
}

#[derive(Clone, Debug)]
pub struct PsaStack {
    /// `layers[l][m]` for layer `l` and modality `m`.
    pub layers: Vec<[PsaLayer; 3]>,
    pub wal: Vec<WeightedAttention>,
}

#[derive(Clone, Debug)]
pub struct PsaOutput {
    pub z: [Var; 3],
    /// Applied attention weights per layer and modality.
    pub weights: Vec<[Var; 3]>,
    /// `ψ` per layer, `[n, 3]`; empty when the weighting layer is off.
    pub psi: Vec<Var>,
}

impl PsaStack {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        layers: usize,
        dim: usize,
        heads: usize,
        max_lengths: [usize; 3],
        wal_hidden: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("at least one PSA layer is required".into()));
        }
        let mut stack = Vec::with_capacity(layers);
        let mut wal = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut lb = pb.sub(&format!("layer{l}"));
            let mut mods = Vec::with_capacity(3);
            for m in ["L", "V", "A"] {
                mods.push(PsaLayer::new(&mut lb.sub(m), dim, heads, 4 * dim, l > 0)?);
            }
            stack.push(mods.try_into().expect("three modalities"));
            let widths = max_lengths.map(|t| t * dim);
            wal.push(WeightedAttention::new(&mut lb.sub("wal"), widths, wal_hidden)?);
        }
        Ok(Self { layers: stack, wal })
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: [Var; 3], masks: &[Tensor; 3], opts: &PsaOptions) -> Result<PsaOutput> {
        let mut z = z;
        let mut prev: [Option<Var>; 3] = [None; 3];
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut psi = Vec::new();
        for (layer, wal) in self.layers.iter().zip(&self.wal) {
            let mut maps = z;
            for m in 0..3 {
                let out = layer[m].forward(g, z[m], &masks[m], prev[m], opts)?;
                z[m] = out.z;
                prev[m] = Some(out.logits);
                maps[m] = out.weights;
            }
            weights.push(maps);
            if opts.wal {
                let (p, weighted) = wal.forward(g, &z)?;
                psi.push(p);
                z = weighted;
            }
        }
        Ok(PsaOutput { z, weights, psi })
    }
}
