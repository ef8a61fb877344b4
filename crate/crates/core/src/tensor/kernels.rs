use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides_for(shape: &[usize], rank: usize) -> Vec<usize> {
    // Stride 0 on broadcast axes.
    let mut strides = vec![0; rank];
    let offset = rank - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub(crate) fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let (va, vb) = (a.values(), b.values());
    if sa == sb {
        return Ok((sa.to_vec(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()));
    }
    let shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })?;
    if vb.len() == 1 && shape == sa {
        let y = vb[0];
        return Ok((shape, va.iter().map(|&x| f(x, y)).collect()));
    }
    if va.len() == 1 && shape == sb {
        let x = va[0];
        return Ok((shape, vb.iter().map(|&y| f(x, y)).collect()));
    }
    let rank = shape.len();
    let (ta, tb) = (strides_for(sa, rank), strides_for(sb, rank));
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(va[ia], vb[ib]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += ta[ax];
            ib += tb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= ta[ax] * shape[ax];
            ib -= tb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((shape, out))
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|p| p.numel()).sum();
    let mut out = Vec::with_capacity(total);
    let (outer, _, _) = split_at_axis(parts[0].shape(), axis);
    for o in 0..outer {
        for p in parts {
            let (_, len, inner) = split_at_axis(p.shape(), axis);
            let block = len * inner;
            out.extend_from_slice(&p.values()[o * block..(o + 1) * block]);
        }
    }
    out
}

pub(crate) fn slice(v: &[f64], shape: &[usize], axis: usize, start: usize, end: usize) -> Vec<f64> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&v[base + start * inner..base + end * inner]);
    }
    out
}

pub(crate) fn sum_axis(v: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Pairwise summation; its rounding error grows as O(log n).
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub(crate) fn softmax_rows(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    if n == 0 {
        return out;
    }
    for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn layer_norm_rows(v: &[f64], n: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}
