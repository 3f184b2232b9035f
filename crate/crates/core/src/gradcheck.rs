//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Where the largest discrepancy was found.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Input { input: usize, index: usize },
    Param { name: String, index: usize },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Entry>,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on checked entries per tensor; entries are taken at an even
    /// stride so the first and last are always included.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|i| i * (n - 1) / (max - 1).max(1)).collect();
    idx.dedup();
    idx
}

/// Max relative error between the recorded gradient of a scalar `f` and
/// central differences, over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_params(&store, &[], f, inputs, opts)?.max_rel_error)
}

/// Gradient check over both `inputs` and the listed parameters of `store`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    f: F,
    inputs: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    for (i, t) in inputs.iter().enumerate() {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { input: i, index });
        }
    }

    let eval = |store: &ParamStore, inputs: &[Tensor], at: (usize, usize)| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { input: at.0, index: at.1 });
        }
        Ok(v)
    };

    // analytic pass
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let param_vars: Vec<Var> = params.iter().map(|&id| g.param(id)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    let param_grads: Vec<Tensor> = param_vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let record = |err: f64, entry: Entry, report: &mut GradCheckReport| {
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(entry);
        }
    };

    let mut work = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        for j in sample_indices(work[i].numel(), opts.max_entries) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(store, &work, (i, j))?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(store, &work, (i, j))?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = rel_error(analytic.data()[j], numeric);
            record(err, Entry::Input { input: i, index: j }, &mut report);
        }
    }

    let mut perturbed = store.clone();
    for (k, (&id, analytic)) in params.iter().zip(&param_grads).enumerate() {
        let n = perturbed.get(id).value.numel();
        for j in sample_indices(n, opts.max_entries) {
            let orig = perturbed.get(id).value.data()[j];
            perturbed.get_mut(id).value.data_mut()[j] = orig + opts.eps;
            let plus = eval(&perturbed, inputs, (inputs.len() + k, j))?;
            perturbed.get_mut(id).value.data_mut()[j] = orig - opts.eps;
            let minus = eval(&perturbed, inputs, (inputs.len() + k, j))?;
            perturbed.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = rel_error(analytic.data()[j], numeric);
            let name = store.get(id).name.clone();
            record(err, Entry::Param { name, index: j }, &mut report);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_function() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn gelu_sum_matches_finite_differences() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 0.5, 2.0]);
        let err = grad_check(
            |g, v| {
                let y = g.gelu(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_input_is_located() {
        let x = Tensor::from_vec(vec![0.0, f64::NAN]);
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { input: 0, index: 1 }));
    }

    #[test]
    fn non_finite_forward_is_located() {
        // log(x) at x = 0 is -inf
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let err = grad_check(
            |g, v| {
                let y = g.log(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn mean_squared_residual_on_two_by_two() {
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.5, -0.5]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![0.2, 0.7]).unwrap();
        let err = grad_check(
            move |g, v| {
                let wx = g.matmul(v[0], v[1])?;
                let target = g.constant(y.clone());
                let r = g.sub(wx, target)?;
                let sq = g.mul(r, r)?;
                Ok(g.mean(sq))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
