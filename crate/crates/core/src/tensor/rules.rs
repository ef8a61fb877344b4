//! Adjoint rules. Each rule maps the upstream gradient to input gradients
//! using only primitives, so the rules are re-differentiable.

use super::kernels::{GELU_A, GELU_C};
use super::{Op, Tensor};
use crate::error::Result;

/// Sums `g` over broadcast axes so it matches `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let rank = g.rank();
    let offset = rank - shape.len();
    let mut acc = g.clone();
    for ax in 0..rank {
        let target = if ax < offset { 1 } else { shape[ax - offset] };
        if target == 1 && acc.shape()[ax] != 1 {
            acc = acc.sum_axis(ax, true)?;
        }
    }
    acc.reshape(shape)
}

fn expand(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    g.mul(&Tensor::ones(shape))
}

fn keep_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn backward(
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let x = &inputs[0];
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            Some(reduce_to(g, x.shape())?),
            Some(reduce_to(g, inputs[1].shape())?),
        ],
        Op::Sub => vec![
            Some(reduce_to(g, x.shape())?),
            Some(reduce_to(&g.neg()?, inputs[1].shape())?),
        ],
        Op::Mul => {
            let y = &inputs[1];
            vec![
                Some(reduce_to(&g.mul(y)?, x.shape())?),
                Some(reduce_to(&g.mul(x)?, y.shape())?),
            ]
        }
        Op::Div => {
            let y = &inputs[1];
            let gx = g.div(y)?;
            let gy = gx.mul(out)?.neg()?;
            vec![
                Some(reduce_to(&gx, x.shape())?),
                Some(reduce_to(&gy, y.shape())?),
            ]
        }
        Op::MatMul => {
            let y = &inputs[1];
            vec![
                Some(g.matmul(&y.transpose()?)?),
                Some(x.transpose()?.matmul(g)?),
            ]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape => vec![Some(g.reshape(x.shape())?)],
        Op::Concat { axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for inp in inputs {
                let len = inp.shape()[*axis];
                grads.push(Some(g.slice(*axis, start, start + len)?));
                start += len;
            }
            grads
        }
        Op::Slice { axis, start, end } => {
            let full = x.shape();
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                let mut s = full.to_vec();
                s[*axis] = *start;
                parts.push(Tensor::zeros(&s));
            }
            parts.push(g.clone());
            if *end < full[*axis] {
                let mut s = full.to_vec();
                s[*axis] = full[*axis] - end;
                parts.push(Tensor::zeros(&s));
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            vec![Some(Tensor::concat(&refs, *axis)?)]
        }
        Op::SumAll => vec![Some(expand(g, x.shape())?)],
        Op::MeanAll => {
            let n = x.numel() as f64;
            vec![Some(expand(&g.scale(1.0 / n)?, x.shape())?)]
        }
        Op::SumAxis { axis, .. } => {
            let gk = g.reshape(&keep_shape(x.shape(), *axis))?;
            vec![Some(expand(&gk, x.shape())?)]
        }
        Op::MeanAxis { axis, .. } => {
            let n = x.shape()[*axis] as f64;
            let gk = g.reshape(&keep_shape(x.shape(), *axis))?.scale(1.0 / n)?;
            vec![Some(expand(&gk, x.shape())?)]
        }
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::Log => vec![Some(g.div(x)?)],
        Op::Sqrt => vec![Some(g.scale(0.5)?.div(out)?)],
        Op::Power(p) => vec![Some(g.mul(&x.powf(p - 1.0)?)?.scale(*p)?)],
        Op::Softmax => {
            let last = out.rank() - 1;
            let dot = g.mul(out)?.sum_axis(last, true)?;
            vec![Some(out.mul(&g.sub(&dot)?)?)]
        }
        Op::Relu => {
            let step: Vec<f64> = x
                .values()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![Some(g.mul(&Tensor::new(x.shape(), step)?)?)]
        }
        Op::Gelu => {
            let x2 = x.square()?;
            let u = x.add(&x.mul(&x2)?.scale(GELU_A)?)?.scale(GELU_C)?;
            let t = u.tanh()?;
            let left = t.add_scalar(1.0)?.scale(0.5)?;
            let sech2 = t.square()?.neg()?.add_scalar(1.0)?;
            let du = x2.scale(3.0 * GELU_A * GELU_C)?.add_scalar(GELU_C)?;
            let right = x.mul(&sech2)?.mul(&du)?.scale(0.5)?;
            vec![Some(g.mul(&left.add(&right)?)?)]
        }
        Op::LayerNorm { eps } => {
            let last = x.rank() - 1;
            let mu = x.mean_axis(last, true)?;
            let xc = x.sub(&mu)?;
            let var = xc.square()?.mean_axis(last, true)?;
            let inv = var.add_scalar(*eps)?.powf(-0.5)?;
            let g_mean = g.mean_axis(last, true)?;
            let proj = g.mul(out)?.mean_axis(last, true)?;
            let inner = g.sub(&g_mean)?.sub(&out.mul(&proj)?)?;
            vec![Some(inner.mul(&inv)?)]
        }
        Op::Embedding { indices } => {
            let vocab = x.shape()[0];
            let n = indices.len();
            let mut onehot_t = vec![0.0; vocab * n];
            for (j, &i) in indices.iter().enumerate() {
                onehot_t[i * n + j] = 1.0;
            }
            let sel = Tensor::new(&[vocab, n], onehot_t)?;
            vec![Some(sel.matmul(g)?)]
        }
        Op::MaskedFill { mask } => vec![Some(g.masked_fill(mask, 0.0)?)],
    })
}
