//! Hierarchical cross-modal attention. Each target modality is reinforced
//! by three stages of reinforcement units: mixed (all three modalities as
//! source), coarse (the two other modalities), and fine (each other modality
//! on its own, summed).

use crate::error::{Error, Result};
use crate::nn::{key_mask, mask_steps, Attention, FeedForward, LayerNorm};
use crate::params::ParamBuilder;
use crate::tensor::{Graph, Tensor, Var};

/// Cross-modal attention block: target queries attend to source keys and
/// values, then a residual feed-forward step.
#[derive(Clone, Debug)]
pub struct Mru {
    pub ln_target: LayerNorm,
    pub ln_source: LayerNorm,
    pub attention: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct MruOutput {
    pub z: Var,
    /// `[n, K, t_target, t_source]`
    pub weights: Var,
}

impl Mru {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_target: LayerNorm::new(pb, "ln_target", dim)?,
            ln_source: LayerNorm::new(pb, "ln_source", dim)?,
            attention: Attention::new(&mut pb.sub("attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(pb, "ln_ffn", dim)?,
            ffn: FeedForward::new(pb, "ffn", dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        source: Var,
        source_mask: &Tensor,
        target: Var,
        target_mask: &Tensor,
    ) -> Result<MruOutput> {
        let (ss, st) = (g.shape(source).to_vec(), g.shape(target).to_vec());
        if ss.len() != 3 || st.len() != 3 || ss[2] != st[2] || ss[0] != st[0] {
            return Err(Error::mismatch("mru", &ss, &st));
        }
        let q = self.ln_target.forward(g, target)?;
        let kv = self.ln_source.forward(g, source)?;
        let (logits, v) = self.attention.logits(g, q, kv)?;
        let weights = g.masked_softmax(logits, &key_mask(source_mask)?)?;
        let attended = self.attention.merge(g, weights, v)?;
        let z = g.add(q, attended)?;
        let f = self.ln_ffn.forward(g, z)?;
        let f = self.ffn.forward(g, f)?;
        let z = g.add(f, z)?;
        let z = mask_steps(g, z, target_mask)?;
        Ok(MruOutput { z, weights })
    }
}

/// Which granularities are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HcaOptions {
    pub mixed: bool,
    pub coarse: bool,
    pub fine: bool,
}

impl Default for HcaOptions {
    fn default() -> Self {
        Self {
            mixed: true,
            coarse: true,
            fine: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HcaTarget {
    pub target: usize,
    pub mixed: Mru,
    pub coarse: Mru,
    /// Shared by both single-source terms.
    pub fine: Mru,
}

#[derive(Clone, Debug)]
pub struct HcaTargetOutput {
    pub z: Var,
    /// Fine-grained attention maps, one per other modality (ascending order).
    pub fine_weights: Vec<Var>,
}

/// The two modalities other than `m`, in `L, V, A` order.
pub fn others(m: usize) -> [usize; 2] {
    match m {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

fn concat_time(g: &mut Graph<'_>, z: &[Var], masks: &[&Tensor]) -> Result<(Var, Tensor)> {
    let zs = g.concat(z, 1)?;
    let n = masks[0].shape()[0];
    let total: usize = masks.iter().map(|m| m.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total);
    for b in 0..n {
        for m in masks {
            let t = m.shape()[1];
            data.extend_from_slice(&m.data()[b * t..(b + 1) * t]);
        }
    }
    Ok((zs, Tensor::new(vec![n, total], data)?))
}

impl HcaTarget {
    pub fn new(pb: &mut ParamBuilder<'_>, target: usize, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            target,
            mixed: Mru::new(&mut pb.sub("mixed"), dim, heads)?,
            coarse: Mru::new(&mut pb.sub("coarse"), dim, heads)?,
            fine: Mru::new(&mut pb.sub("fine"), dim, heads)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: &[Var; 3], masks: &[Tensor; 3], opts: &HcaOptions) -> Result<HcaTargetOutput> {
        let t = self.target;
        let tm = &masks[t];
        let [o1, o2] = others(t);
        let mut cur = z[t];
        if opts.mixed {
            let (src, src_mask) = concat_time(g, z, &[&masks[0], &masks[1], &masks[2]])?;
            cur = self.mixed.forward(g, src, &src_mask, cur, tm)?.z;
        }
        if opts.coarse {
            let (src, src_mask) = concat_time(g, &[z[o1], z[o2]], &[&masks[o1], &masks[o2]])?;
            cur = self.coarse.forward(g, src, &src_mask, cur, tm)?.z;
        }
        let mut fine_weights = Vec::new();
        if opts.fine {
            let a = self.fine.forward(g, z[o1], &masks[o1], cur, tm)?;
            let b = self.fine.forward(g, z[o2], &masks[o2], cur, tm)?;
            fine_weights = vec![a.weights, b.weights];
            cur = g.add(a.z, b.z)?;
        }
        Ok(HcaTargetOutput { z: cur, fine_weights })
    }
}

#[derive(Clone, Debug)]
pub struct HcaStack {
    pub layers: Vec<[HcaTarget; 3]>,
}

#[derive(Clone, Debug)]
pub struct HcaOutput {
    pub z: [Var; 3],
    /// Fine-grained maps of the last layer, per target.
    pub fine_weights: [Vec<Var>; 3],
}

impl HcaStack {
    pub fn new(pb: &mut ParamBuilder<'_>, layers: usize, dim: usize, heads: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("at least one HCA layer is required".into()));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut lb = pb.sub(&format!("layer{l}"));
            let mut targets = Vec::with_capacity(3);
            for (m, name) in ["L", "V", "A"].iter().enumerate() {
                targets.push(HcaTarget::new(&mut lb.sub(name), m, dim, heads)?);
            }
            out.push(targets.try_into().expect("three targets"));
        }
        Ok(Self { layers: out })
    }

    /// Each layer reads the previous layer's three outputs.
    pub fn forward(&self, g: &mut Graph<'_>, z: [Var; 3], masks: &[Tensor; 3], opts: &HcaOptions) -> Result<HcaOutput> {
        let mut z = z;
        let mut fine_weights: [Vec<Var>; 3] = Default::default();
        for layer in &self.layers {
            let mut next = z;
            for (m, target) in layer.iter().enumerate() {
                let out = target.forward(g, &z, masks, opts)?;
                next[m] = out.z;
                fine_weights[m] = out.fine_weights;
            }
            z = next;
        }
        Ok(HcaOutput { z, fine_weights })
    }
}
