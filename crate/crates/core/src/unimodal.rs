//! Per-modality extraction: same-padded temporal convolution to the common
//! width, sinusoidal positions, and a bidirectional LSTM.

use crate::error::{Error, Result};
use crate::nn::{add_bias, mask_steps, sinusoidal_positions, Linear};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Lstm {
    /// `[d_in, 4h]`, gates ordered input, forget, cell, output.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            w_ih: sub.weight("w_ih", d_in, 4 * hidden)?,
            w_hh: sub.weight("w_hh", hidden, 4 * hidden)?,
            bias: sub.zeros("bias", &[4 * hidden])?,
            hidden,
        })
    }

    /// Runs left to right over `x: [n, t, d_in]`, returning `[n, t, h]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, t, h) = (s[0], s[1], self.hidden);
        let w_ih = g.param(self.w_ih);
        let xw = g.matmul(x, w_ih)?;
        let bias = g.param(self.bias);
        let xw = add_bias(g, xw, bias)?;
        let w_hh = g.param(self.w_hh);
        let mut hs = g.constant(Tensor::zeros(&[n, h]));
        let mut cs = g.constant(Tensor::zeros(&[n, h]));
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.narrow(xw, 1, step, 1)?;
            let xt = g.reshape(xt, &[n, 4 * h])?;
            let rec = g.matmul(hs, w_hh)?;
            let gates = g.add(xt, rec)?;
            let i = g.narrow(gates, 1, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.narrow(gates, 1, h, h)?;
            let f = g.sigmoid(f);
            let c_hat = g.narrow(gates, 1, 2 * h, h)?;
            let c_hat = g.tanh(c_hat);
            let o = g.narrow(gates, 1, 3 * h, h)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, cs)?;
            let write = g.mul(i, c_hat)?;
            cs = g.add(keep, write)?;
            let tc = g.tanh(cs);
            hs = g.mul(o, tc)?;
            outputs.push(g.reshape(hs, &[n, 1, h])?);
        }
        g.concat(&outputs, 1)
    }
}

/// Index that reverses each row's first `len` steps and leaves padding in
/// place. Applying it twice is the identity.
pub fn reverse_valid_index(mask: &Tensor) -> Vec<usize> {
    let (n, t) = (mask.shape()[0], mask.shape()[1]);
    let mut index = Vec::with_capacity(n * t);
    for b in 0..n {
        let len = mask.data()[b * t..(b + 1) * t].iter().filter(|&&m| m != 0.0).count();
        index.extend((0..t).map(|s| if s < len { len - 1 - s } else { s }));
    }
    index
}

#[derive(Clone, Debug)]
pub struct UnimodalExtractor {
    pub conv: Linear,
    pub kernel: usize,
    pub d_in: usize,
    pub dim: usize,
    pub forward_lstm: Lstm,
    pub backward_lstm: Lstm,
}

impl UnimodalExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, dim: usize, kernel: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("model width {dim} must be even")));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size {kernel} must be odd")));
        }
        Ok(Self {
            conv: Linear::new(pb, "conv", kernel * d_in, dim)?,
            kernel,
            d_in,
            dim,
            forward_lstm: Lstm::new(pb, "lstm_fwd", dim, dim / 2)?,
            backward_lstm: Lstm::new(pb, "lstm_bwd", dim, dim / 2)?,
        })
    }

    /// `[n, t, d_m]` features and `[n, t]` mask to `[n, t, d]`, zero on padding.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: &Tensor) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_in {
            return Err(Error::invalid_shape(
                "unimodal",
                &s,
                format!("expected feature width {}", self.d_in),
            ));
        }
        if mask.shape() != [s[0], s[1]] {
            return Err(Error::mismatch("unimodal mask", &s, mask.shape()));
        }
        let windows = g.unfold_time(x, self.kernel)?;
        let c = self.conv.forward(g, windows)?;
        let pe = sinusoidal_positions(s[1], self.dim).reshape(&[1, s[1], self.dim])?;
        let pe = g.constant(pe);
        let c = g.add(c, pe)?;
        let c = mask_steps(g, c, mask)?;

        let fwd = self.forward_lstm.forward(g, c)?;
        let index = reverse_valid_index(mask);
        let rev = g.gather_time(c, &index)?;
        let bwd = self.backward_lstm.forward(g, rev)?;
        let bwd = g.gather_time(bwd, &index)?;
        let z = g.concat(&[fwd, bwd], 2)?;
        mask_steps(g, z, mask)
    }
}
