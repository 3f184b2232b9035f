//! Modality-exclusive and modality-agnostic encoders with the independence
//! and adversarial objectives that pull the two spaces apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{last_valid, masked_mean, FeedForward};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

pub fn pool(g: &mut Graph<'_>, z: Var, mask: &Tensor, pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Mean => masked_mean(g, z, mask),
        Pooling::Last => last_valid(g, z, mask),
    }
}

/// Temporal pooling followed by a two-layer GeLU perceptron.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub mlp: FeedForward,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            mlp: FeedForward::new(pb, name, dim, out, out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var, mask: &Tensor, pooling: Pooling) -> Result<Var> {
        let pooled = pool(g, z, mask, pooling)?;
        self.mlp.forward(g, pooled)
    }
}

/// Centers the rows of `h: [n, c]`.
fn center(g: &mut Graph<'_>, h: Var) -> Result<Var> {
    let mean = g.mean_axis(h, 0)?;
    g.sub(h, mean)
}

/// Inner-product-kernel HSIC, `Tr(U K₁ U K₂) / (n-1)²`, evaluated as
/// `‖H̄₁ᵀ H̄₂‖²_F / (n-1)²` on centered features. `None` when `n < 2`.
pub fn hsic(g: &mut Graph<'_>, h1: Var, h2: Var) -> Result<Option<Var>> {
    let (s1, s2) = (g.shape(h1).to_vec(), g.shape(h2).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[0] {
        return Err(Error::mismatch("hsic", &s1, &s2));
    }
    let n = s1[0];
    if n < 2 {
        return Ok(None);
    }
    let c1 = center(g, h1)?;
    let c2 = center(g, h2)?;
    let c1t = g.transpose(c1)?;
    let cross = g.matmul(c1t, c2)?;
    let sq = g.mul(cross, cross)?;
    let total = g.sum(sq);
    Ok(Some(g.scale(total, 1.0 / ((n - 1) * (n - 1)) as f64)))
}

/// Mean HSIC between each modality's exclusive and agnostic batches; zero
/// when the batch is too small.
pub fn disparity_loss(g: &mut Graph<'_>, he: &[Var; 3], ha: &[Var; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for m in 0..3 {
        match hsic(g, he[m], ha[m])? {
            Some(t) => terms.push(t),
            None => return Ok(g.constant(Tensor::scalar(0.0))),
        }
    }
    let s = g.concat(&terms, 0)?;
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / 3.0))
}

/// Orthogonality penalty `(1/3) Σ_m ‖H_eᵀ H_a‖²_F / n²`.
pub fn separation_loss(g: &mut Graph<'_>, he: &[Var; 3], ha: &[Var; 3]) -> Result<Var> {
    let n = g.shape(he[0])[0] as f64;
    let mut terms = Vec::with_capacity(3);
    for m in 0..3 {
        let et = g.transpose(he[m])?;
        let cross = g.matmul(et, ha[m])?;
        let sq = g.mul(cross, cross)?;
        terms.push(g.sum(sq));
    }
    let s = g.concat(&terms, 0)?;
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / (3.0 * n * n)))
}

/// Column `m` of `x: [n, 3]` as `[n, 1]`.
fn column(g: &mut Graph<'_>, x: Var, m: usize) -> Result<Var> {
    g.narrow(x, 1, m, 1)
}

/// `D_i`: linear map `[d_h, 3]` followed by softmax.
#[derive(Clone, Debug)]
pub struct ImportanceDiscriminator {
    pub w: ParamId,
}

impl ImportanceDiscriminator {
    pub fn new(pb: &mut ParamBuilder<'_>, d_h: usize) -> Result<Self> {
        Ok(Self {
            w: pb.weight("w", d_h, 3)?,
        })
    }

    pub fn logits(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let w = g.param(self.w);
        g.matmul(h, w)
    }

    /// Probabilities `[n, 3]` and the detached regulatory factor
    /// `ω = 1 - p_m` for true modality `m`, as `[n, 1]`.
    pub fn importance(&self, g: &mut Graph<'_>, ha: Var, m: usize) -> Result<(Var, Tensor)> {
        let logits = self.logits(g, ha)?;
        let p = g.softmax(logits)?;
        let pv = g.value(p);
        let n = pv.shape()[0];
        let omega = (0..n).map(|i| 1.0 - pv.data()[i * 3 + m]).collect();
        Ok((p, Tensor::new(vec![n, 1], omega)?))
    }

    /// Cross-entropy of `D_i` on detached agnostic features, averaged over
    /// samples and modalities.
    pub fn training_loss(&self, g: &mut Graph<'_>, ha: &[Var; 3]) -> Result<Var> {
        let n = g.shape(ha[0])[0];
        let mut picked = Vec::with_capacity(3);
        for (m, &h) in ha.iter().enumerate() {
            let h = g.detach(h);
            let logits = self.logits(g, h)?;
            let lp = g.log_softmax(logits);
            picked.push(column(g, lp, m)?);
        }
        let all = g.concat(&picked, 0)?;
        let s = g.sum(all);
        Ok(g.scale(s, -1.0 / (3 * n) as f64))
    }
}

/// `D_m`: two-layer GeLU perceptron to three modality logits.
#[derive(Clone, Debug)]
pub struct ModalityDiscriminator {
    pub mlp: FeedForward,
}

impl ModalityDiscriminator {
    pub fn new(pb: &mut ParamBuilder<'_>, d_h: usize) -> Result<Self> {
        Ok(Self {
            mlp: FeedForward::new(pb, "mlp", d_h, d_h, 3)?,
        })
    }

    pub fn log_probs(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let logits = self.mlp.forward(g, h)?;
        Ok(g.log_softmax(logits))
    }
}

/// Agnostic and exclusive adversarial terms:
/// `L_agn = -(1/n) Σ_m Σ_k ω_{k,m} log D_m(GRL(h_a_{k,m}))_m` and
/// `L_exc = -(1/n) Σ_m Σ_k log D_m(h_e_{k,m})_m`.
pub fn adversarial_losses(
    g: &mut Graph<'_>,
    dm: &ModalityDiscriminator,
    he: &[Var; 3],
    ha: &[Var; 3],
    omega: &[Tensor; 3],
    grl_lambda: f64,
) -> Result<(Var, Var)> {
    let n = g.shape(he[0])[0];
    let mut agn = Vec::with_capacity(3);
    let mut exc = Vec::with_capacity(3);
    for m in 0..3 {
        let reversed = g.gradient_reversal(ha[m], grl_lambda);
        let lp = dm.log_probs(g, reversed)?;
        let lp = column(g, lp, m)?;
        let w = g.constant(omega[m].clone());
        agn.push(g.mul(lp, w)?);

        let lp = dm.log_probs(g, he[m])?;
        exc.push(column(g, lp, m)?);
    }
    let scale = -1.0 / n as f64;
    let a = g.concat(&agn, 0)?;
    let a = g.sum(a);
    let l_agn = g.scale(a, scale);
    let e = g.concat(&exc, 0)?;
    let e = g.sum(e);
    let l_exc = g.scale(e, scale);
    Ok((l_agn, l_exc))
}
