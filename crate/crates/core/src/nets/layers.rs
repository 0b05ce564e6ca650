//! Pre-norm transformer sublayers shared by both model families.

use super::params::Bound;
use crate::error::Result;
use crate::tape::{Graph, Var};

pub(crate) fn linear(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let w = p.var(&alloc::format!("{prefix}.w"));
    let b = p.var(&alloc::format!("{prefix}.b"));
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn layer_norm(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let gamma = p.var(&alloc::format!("{prefix}.g"));
    let beta = p.var(&alloc::format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta)
}

/// `x + proj(mha(ln(x)))` for `x: [groups, len, d]`; attention runs within
/// each group.
pub(crate) fn attention(g: &mut Graph, x: Var, p: &Bound, prefix: &str, n_heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (groups, len, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let h = layer_norm(g, x, p, &alloc::format!("{prefix}.ln"))?;
    let qkv = linear(g, h, p, &alloc::format!("{prefix}.qkv"))?;
    let mut heads = [qkv; 3];
    for (i, slot) in heads.iter_mut().enumerate() {
        let part = g.slice(qkv, 2, i * d, d)?;
        *slot = g.reshape(part, &[groups, len, n_heads, dh])?;
    }
    let q = g.permute(heads[0], &[0, 2, 1, 3])?;
    let kt = g.permute(heads[1], &[0, 2, 3, 1])?;
    let v = g.permute(heads[2], &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64));
    let attn = g.softmax(scores)?;
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[groups, len, d])?;
    let o = linear(g, o, p, &alloc::format!("{prefix}.proj"))?;
    g.add(x, o)
}

/// `x + fc2(gelu(fc1(ln(x))))`.
pub(crate) fn mlp(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let h = layer_norm(g, x, p, &alloc::format!("{prefix}.ln"))?;
    let h = linear(g, h, p, &alloc::format!("{prefix}.fc1"))?;
    let h = g.gelu(h);
    let h = linear(g, h, p, &alloc::format!("{prefix}.fc2"))?;
    g.add(x, h)
}
