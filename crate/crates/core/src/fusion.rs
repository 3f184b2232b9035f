//! Decoupled graph fusion over three modality nodes, the prediction head,
//! and the task and total objectives.

use serde::{Deserialize, Serialize};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Graph, Tensor, Var};

/// Three-node attention graph: `P = W_e h`, `δ_ij = q_aᵀ P_i + q_bᵀ P_j + b`,
/// `ξ = softmax_j(GeLU(δ))`, `h_fin = Σ_i σ(Σ_j ξ_ij P_j)`.
#[derive(Clone, Debug)]
pub struct GraphFusion {
    pub w_e: ParamId,
    pub q_a: ParamId,
    pub q_b: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub h: Var,
    /// `[n, 3, 3]` transfer coefficients; absent for the non-graph variants.
    pub xi: Option<Var>,
}

impl GraphFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, d_h: usize) -> Result<Self> {
        Ok(Self {
            w_e: pb.weight("w_e", d_h, d_h)?,
            q_a: pb.weight("q_a", d_h, 1)?,
            q_b: pb.weight("q_b", d_h, 1)?,
            bias: pb.zeros("bias", &[1])?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, nodes: &[Var; 3], self_loops: bool) -> Result<FusionOutput> {
        let s = g.shape(nodes[0]).to_vec();
        if s.len() != 2 || nodes.iter().any(|&v| g.shape(v) != s.as_slice()) {
            return Err(Error::invalid_shape("graph fusion", &s, "expected three [n, d_h] nodes"));
        }
        let (n, d) = (s[0], s[1]);
        let stacked: Vec<Var> = nodes
            .iter()
            .map(|&h| g.reshape(h, &[n, 1, d]))
            .collect::<Result<_>>()?;
        let h = g.concat(&stacked, 1)?;
        let w_e = g.param(self.w_e);
        let p = g.matmul(h, w_e)?;
        let q_a = g.param(self.q_a);
        let sa = g.matmul(p, q_a)?;
        let q_b = g.param(self.q_b);
        let sb = g.matmul(p, q_b)?;
        let sb = g.reshape(sb, &[n, 1, 3])?;
        let delta = g.add(sa, sb)?;
        let b = g.param(self.bias);
        let b = g.reshape(b, &[1, 1, 1])?;
        let delta = g.add(delta, b)?;
        let act = g.gelu(delta);
        let mut allowed = Tensor::ones(&[1, 3, 3]);
        if !self_loops {
            for i in 0..3 {
                allowed.data_mut()[i * 3 + i] = 0.0;
            }
        }
        let xi = g.masked_softmax(act, &allowed)?;
        let agg = g.matmul(xi, p)?;
        let agg = g.sigmoid(agg);
        let fin = g.sum_axis(agg, 1)?;
        let fin = g.reshape(fin, &[n, d])?;
        Ok(FusionOutput { h: fin, xi: Some(xi) })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Graph,
    Concat,
    Add,
    Mul,
}

impl FusionKind {
    pub fn width(self, d_h: usize) -> usize {
        match self {
            FusionKind::Concat => 3 * d_h,
            _ => d_h,
        }
    }
}

/// Fusion of one triple of node vectors by the selected rule.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub kind: FusionKind,
    pub graph: Option<GraphFusion>,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder<'_>, kind: FusionKind, d_h: usize) -> Result<Self> {
        let graph = match kind {
            FusionKind::Graph => Some(GraphFusion::new(pb, d_h)?),
            _ => None,
        };
        Ok(Self { kind, graph })
    }

    pub fn forward(&self, g: &mut Graph<'_>, nodes: &[Var; 3], self_loops: bool) -> Result<FusionOutput> {
        let h = match (self.kind, &self.graph) {
            (FusionKind::Graph, Some(graph)) => return graph.forward(g, nodes, self_loops),
            (FusionKind::Concat, _) => g.concat(nodes, 1)?,
            (FusionKind::Add, _) => {
                let s = g.add(nodes[0], nodes[1])?;
                g.add(s, nodes[2])?
            }
            (FusionKind::Mul, _) => {
                let s = g.mul(nodes[0], nodes[1])?;
                g.mul(s, nodes[2])?
            }
            (FusionKind::Graph, None) => unreachable!("graph fusion without parameters"),
        };
        Ok(FusionOutput { h, xi: None })
    }
}

/// Affine layers with GeLU between them.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: Vec<Linear>,
}

impl Head {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, hidden: usize, out: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("prediction head needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { d_in } else { hidden };
            let fan_out = if l + 1 == depth { out } else { hidden };
            layers.push(Linear::new(pb, &format!("l{l}"), fan_in, fan_out)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Mean squared error (regression) or mean cross-entropy (classification).
pub fn task_loss(g: &mut Graph<'_>, pred: Var, mode: TaskMode, targets: &[f64]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    let n = targets.len();
    if s != [n, mode.output_dim()] {
        return Err(Error::mismatch("task loss", &s, &[n, mode.output_dim()]));
    }
    match mode {
        TaskMode::Regression => {
            let y = g.constant(Tensor::new(vec![n, 1], targets.to_vec())?);
            let r = g.sub(pred, y)?;
            let sq = g.mul(r, r)?;
            Ok(g.mean(sq))
        }
        TaskMode::Classification { classes } => {
            let mut onehot = vec![0.0; n * classes];
            for (i, &c) in targets.iter().enumerate() {
                onehot[i * classes + c as usize] = 1.0;
            }
            let lp = g.log_softmax(pred);
            let y = g.constant(Tensor::new(vec![n, classes], onehot)?);
            let picked = g.mul(lp, y)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / n as f64))
        }
    }
}

/// Loss terms of one batch, kept separate for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub dis: Var,
    pub agn: Var,
    pub exc: Var,
    /// `L_task + α L_dis + β (L_agn + L_exc)`.
    pub all: Var,
}

/// `L_all = L_task + α L_dis + β (L_agn + L_exc)`.
pub fn total_loss(g: &mut Graph<'_>, task: Var, dis: Var, agn: Var, exc: Var, alpha: f64, beta: f64) -> Result<LossTerms> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "trade-off weights must be non-negative, got alpha={alpha}, beta={beta}"
        )));
    }
    let d = g.scale(dis, alpha);
    let adv = g.add(agn, exc)?;
    let adv = g.scale(adv, beta);
    let all = g.add(task, d)?;
    let all = g.add(all, adv)?;
    Ok(LossTerms {
        task,
        dis,
        agn,
        exc,
        all,
    })
}
