//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::{Elem, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Gradients with magnitude below this are compared absolutely.
    pub floor: f64,
    /// Elements probed per input; larger tensors are sampled at a fixed stride.
    pub max_per_tensor: usize,
}

impl GradCheckOptions {
    pub fn f64() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
            max_per_tensor: 64,
        }
    }

    pub fn f32() -> Self {
        Self {
            step: 1e-2,
            floor: 1e-2,
            max_per_tensor: 64,
        }
    }
}

/// Agreement between analytic and numeric gradients for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub input: usize,
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|, floor)` over probed elements.
    pub max_rel_err: f64,
    /// `||a - n|| / max(||a||, ||n||, floor)` over probed elements.
    pub norm_rel_err: f64,
}

fn eval<T: Elem, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&g, &vars)?;
    Ok(g.scalar(out).to_f64())
}

/// Compares `d f / d inputs` from the tape against central differences.
/// `f` must return a single-element node.
pub fn check_gradients<T: Elem, F>(
    inputs: &[Tensor<T>],
    f: F,
    opts: GradCheckOptions,
) -> Result<Vec<GradReport>>
where
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(work.len());
    for i in 0..work.len() {
        let n = work[i].numel();
        let analytic = grads
            .get(vars[i])
            .map(<[T]>::to_vec)
            .ok_or_else(|| Error::MissingGradient(format!("input {i}")))?;
        let stride = n.div_ceil(opts.max_per_tensor.max(1)).max(1);
        let (mut max_rel, mut diff2, mut a2, mut n2, mut checked) = (0.0f64, 0.0, 0.0, 0.0, 0);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = T::from_f64(orig.to_f64() + opts.step);
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = T::from_f64(orig.to_f64() - opts.step);
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * opts.step);
            let a = analytic[j].to_f64();
            let denom = a.abs().max(num.abs()).max(opts.floor);
            max_rel = max_rel.max((a - num).abs() / denom);
            diff2 += (a - num).powi(2);
            a2 += a * a;
            n2 += num * num;
            checked += 1;
        }
        let norm_denom = a2.sqrt().max(n2.sqrt()).max(opts.floor);
        reports.push(GradReport {
            input: i,
            checked,
            max_rel_err: max_rel,
            norm_rel_err: diff2.sqrt() / norm_denom,
        });
    }
    Ok(reports)
}
