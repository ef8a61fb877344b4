use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

use super::config::TransformerConfig;
use super::params::{init_layer_norm, init_linear, lookup, ParamMap, TensorMap};

/// Sinusoidal encoding of one integer position.
pub fn sinusoidal_encoding(position: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(contract(format!("sinusoidal dim must be positive and even, got {dim}")));
    }
    let mut v = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let a = position as f64 / freq;
        v[2 * i] = a.sin();
        v[2 * i + 1] = a.cos();
    }
    Ok(v)
}

/// Stacked encodings for `positions`, shape `[positions.len(), dim]`.
pub fn sinusoid_table(positions: &[usize], dim: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        v.extend(sinusoidal_encoding(p, dim)?);
    }
    Tensor::new(&[positions.len(), dim], v)
}

pub fn linear(p: &TensorMap, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = lookup(p, &format!("{name}.weight"))?;
    let b = lookup(p, &format!("{name}.bias"))?;
    x.linear(w, Some(b))
}

pub fn layer_norm(p: &TensorMap, name: &str, x: &Tensor) -> Result<Tensor> {
    let g = lookup(p, &format!("{name}.gamma"))?;
    let b = lookup(p, &format!("{name}.beta"))?;
    x.layer_norm(LAYER_NORM_EPS)?.mul(g)?.add(b)
}

/// Single-head scaled dot-product attention. `key_mask[j]` true hides key `j`.
/// Returns the output and the attention weights `[nq, nk]`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    let dh = q.shape()[1] as f64;
    let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / dh.sqrt())?;
    if let Some(m) = key_mask {
        if m.len() != k.shape()[0] {
            return Err(contract(format!(
                "key mask of length {} for {} keys",
                m.len(),
                k.shape()[0]
            )));
        }
        if m.iter().all(|&h| h) {
            return Err(Error::Degenerate("every key is masked".into()));
        }
        scores = scores.masked_fill(m, f64::NEG_INFINITY)?;
    }
    let w = scores.softmax()?;
    Ok((w.matmul(v)?, w))
}

/// Multi-head attention from `q_in` to `kv_in`, both `[n, d]`.
pub fn multi_head_attention(
    p: &TensorMap,
    name: &str,
    q_in: &Tensor,
    kv_in: &Tensor,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    let q = linear(p, &format!("{name}.q"), q_in)?;
    let k = linear(p, &format!("{name}.k"), kv_in)?;
    let v = linear(p, &format!("{name}.v"), kv_in)?;
    let d = q.shape()[1];
    if d % heads != 0 {
        return Err(contract(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let (o, _) = scaled_dot_attention(
            &q.slice(1, a, b)?,
            &k.slice(1, a, b)?,
            &v.slice(1, a, b)?,
            key_mask,
        )?;
        outs.push(o);
    }
    let joined = if heads == 1 {
        outs.pop().unwrap()
    } else {
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat(&refs, 1)?
    };
    linear(p, &format!("{name}.o"), &joined)
}

fn feed_forward(p: &TensorMap, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = linear(p, &format!("{name}.fc1"), x)?.gelu()?;
    linear(p, &format!("{name}.fc2"), &h)
}

/// Pre-norm self-attention block.
pub fn encoder_block(p: &TensorMap, name: &str, x: &Tensor, heads: usize) -> Result<Tensor> {
    let n = layer_norm(p, &format!("{name}.ln1"), x)?;
    let x = x.add(&multi_head_attention(p, &format!("{name}.attn"), &n, &n, heads, None)?)?;
    let n = layer_norm(p, &format!("{name}.ln2"), &x)?;
    x.add(&feed_forward(p, &format!("{name}.mlp"), &n)?)
}

/// Pre-norm block where `queries` attend only to `memory`, never to each other.
pub fn cross_block(
    p: &TensorMap,
    name: &str,
    queries: &Tensor,
    memory: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let nq = layer_norm(p, &format!("{name}.ln1"), queries)?;
    let nm = layer_norm(p, &format!("{name}.ln_mem"), memory)?;
    let x = queries.add(&multi_head_attention(
        p,
        &format!("{name}.attn"),
        &nq,
        &nm,
        heads,
        None,
    )?)?;
    let n = layer_norm(p, &format!("{name}.ln2"), &x)?;
    x.add(&feed_forward(p, &format!("{name}.mlp"), &n)?)
}

pub fn init_block(map: &mut ParamMap, name: &str, d: usize, hidden: usize, cross: bool, rng: &mut Rng) {
    init_layer_norm(map, &format!("{name}.ln1"), d);
    if cross {
        init_layer_norm(map, &format!("{name}.ln_mem"), d);
    }
    for proj in ["q", "k", "v", "o"] {
        init_linear(map, &format!("{name}.attn.{proj}"), d, d, rng);
    }
    init_layer_norm(map, &format!("{name}.ln2"), d);
    init_linear(map, &format!("{name}.mlp.fc1"), d, hidden, rng);
    init_linear(map, &format!("{name}.mlp.fc2"), hidden, d, rng);
}

/// Encoder parameters under the `encoder.` prefix.
pub fn init_encoder(map: &mut ParamMap, cfg: &TransformerConfig, rng: &mut Rng) {
    for b in 0..cfg.encoder_blocks {
        init_block(map, &format!("encoder.{b}"), cfg.embed_dim, cfg.hidden_dim, false, rng);
    }
    init_layer_norm(map, "encoder.final_ln", cfg.embed_dim);
}

/// One-hot selection matrix `[n, idx.len()]` with `sel[idx[j], j] = 1`.
pub(crate) fn scatter_matrix(n: usize, idx: &[usize]) -> Result<Tensor> {
    let m = idx.len();
    let mut v = vec![0.0; n * m];
    for (j, &i) in idx.iter().enumerate() {
        v[i * m + j] = 1.0;
    }
    Tensor::new(&[n, m], v)
}

/// Runs the encoder over token embeddings `x: [n, d]`.
///
/// `masked[i]` removes token `i` from attention entirely: it neither attends
/// nor is attended to, and its output row is zero. Row order is preserved.
pub fn encode(p: &TensorMap, cfg: &TransformerConfig, x: &Tensor, masked: &[bool]) -> Result<Tensor> {
    let n = x.shape()[0];
    if n > cfg.max_seq_len {
        return Err(Error::Length {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    if masked.len() != n {
        return Err(contract(format!("mask of length {} for {n} tokens", masked.len())));
    }
    let visible: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
    if visible.is_empty() {
        return Ok(Tensor::zeros(x.shape()));
    }
    let all = visible.len() == n;
    let h = if all { x.clone() } else { Tensor::embedding(x, &visible)? };
    let h = encode_visible(p, cfg, &h)?;
    if all {
        Ok(h)
    } else {
        scatter_matrix(n, &visible)?.matmul(&h)
    }
}

/// Encoder over an already-gathered set of visible tokens.
pub fn encode_visible(p: &TensorMap, cfg: &TransformerConfig, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for b in 0..cfg.encoder_blocks {
        h = encoder_block(p, &format!("encoder.{b}"), &h, cfg.num_heads)?;
    }
    layer_norm(p, "encoder.final_ln", &h)
}

/// Mean over unmasked rows, shape `[1, d]`.
pub fn pool_sequence(enc: &Tensor, masked: &[bool]) -> Result<Tensor> {
    let n = enc.shape()[0];
    if masked.len() != n {
        return Err(contract(format!("mask of length {} for {n} rows", masked.len())));
    }
    let count = masked.iter().filter(|&&m| !m).count();
    if count == 0 {
        return Err(Error::Degenerate("pooling with every token masked".into()));
    }
    let w: Vec<f64> = masked
        .iter()
        .map(|&m| if m { 0.0 } else { 1.0 / count as f64 })
        .collect();
    Tensor::new(&[1, n], w)?.matmul(enc)
}

/// `logits = e @ W + b` for a pooled embedding `e: [1, d]`.
pub fn classify(head: &TensorMap, embedding: &Tensor) -> Result<Tensor> {
    let w = lookup(head, "classifier.weight")?;
    if embedding.rank() != 2 || embedding.shape()[1] != w.shape()[0] {
        return Err(contract(format!(
            "embedding of shape {:?} for classifier expecting width {}",
            embedding.shape(),
            w.shape()[0]
        )));
    }
    linear(head, "classifier", embedding)
}

/// Mean softmax cross-entropy of `logits: [b, n]` against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b || b == 0 {
        return Err(contract(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut onehot = vec![0.0; b * n];
    for (r, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(contract(format!("label {l} outside {n} classes")));
        }
        onehot[r * n + l] = -1.0 / b as f64;
    }
    logits.log_softmax()?.mul(&Tensor::new(&[b, n], onehot)?)?.sum()
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .values()
        .chunks(n)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
