//! The two attention mechanisms.
//!
//! Self-attention: pairwise scores between spatial positions of a [C, M]
//! feature map, softmax-normalized over source positions, with a learned
//! scalar gate `gamma` on the residual (gamma starts at 0, so the block is
//! the identity at initialization).
//!
//! Context attention: a one-layer perceptron scores each item against a
//! learned context vector; the softmax weights form a convex combination
//! of the items. Used twice, at region level and at frame level, with
//! separate parameter sets.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::init::fan_in_uniform;
use crate::tensor::Tensor;
use rand::Rng;

/// Reduced channel count for the f/g projections.
pub fn reduced_channels(c: usize) -> usize {
    (c / 8).max(1)
}

#[derive(Clone, Debug)]
pub struct SelfAttentionParams {
    /// [C/8, C]
    pub wf: Tensor,
    /// [C/8, C]
    pub wg: Tensor,
    /// [C, C]
    pub wh: Tensor,
    /// scalar, 0 at init
    pub gamma: Tensor,
}

impl SelfAttentionParams {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let cr = reduced_channels(channels);
        Self {
            wf: fan_in_uniform(&[cr, channels], channels, rng),
            wg: fan_in_uniform(&[cr, channels], channels, rng),
            wh: fan_in_uniform(&[channels, channels], channels, rng),
            gamma: Tensor::scalar(0.0),
        }
    }
}

/// Graph-bound handles to self-attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionNodes {
    pub wf: NodeId,
    pub wg: NodeId,
    pub wh: NodeId,
    pub gamma: NodeId,
}

impl SelfAttentionNodes {
    pub fn bind(g: &mut Graph, p: &SelfAttentionParams) -> Self {
        Self {
            wf: g.leaf(p.wf.clone()),
            wg: g.leaf(p.wg.clone()),
            wh: g.leaf(p.wh.clone()),
            gamma: g.leaf(p.gamma.clone()),
        }
    }
}

/// Gated self-attention over a [C, M] feature map.
pub fn self_attention(g: &mut Graph, x: NodeId, p: &SelfAttentionNodes) -> Result<NodeId> {
    let f = g.one_by_one_conv(x, p.wf)?; // [C/8, M]
    let q = g.one_by_one_conv(x, p.wg)?; // [C/8, M]
    let h = g.one_by_one_conv(x, p.wh)?; // [C, M]
    let ft = g.transpose2d(f)?; // [M, C/8]
    let scores = g.matmul(ft, q)?; // [M, M], scores[i, j] = f_i . g_j
    let alpha = g.softmax(scores, 0)?; // normalize over source positions i
    let attended = g.matmul(h, alpha)?; // [C, M]
    let gated = g.mul_scalar(p.gamma, attended)?;
    g.add(x, gated)
}

#[derive(Clone, Debug)]
pub struct ContextAttentionParams {
    /// [A, F]
    pub w: Tensor,
    /// [A]
    pub b: Tensor,
    /// context vector, [A]
    pub u: Tensor,
}

impl ContextAttentionParams {
    /// Attention dimension defaults to the feature size.
    pub fn init<R: Rng>(feature_dim: usize, rng: &mut R) -> Self {
        Self::init_with_dim(feature_dim, feature_dim, rng)
    }

    pub fn init_with_dim<R: Rng>(feature_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        Self {
            w: fan_in_uniform(&[attn_dim, feature_dim], feature_dim, rng),
            b: Tensor::zeros(&[attn_dim]),
            u: fan_in_uniform(&[attn_dim], attn_dim, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContextAttentionNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub u: NodeId,
}

impl ContextAttentionNodes {
    pub fn bind(g: &mut Graph, p: &ContextAttentionParams) -> Self {
        Self {
            w: g.leaf(p.w.clone()),
            b: g.leaf(p.b.clone()),
            u: g.leaf(p.u.clone()),
        }
    }
}

/// Context attention over `items` given as columns of an [F, R] matrix.
/// Returns (summary [F], weights [R]).
pub fn context_attention(
    g: &mut Graph,
    items: NodeId,
    p: &ContextAttentionNodes,
) -> Result<(NodeId, NodeId)> {
    let hidden = g.matmul(p.w, items)?; // [A, R]
    let hidden = g.add_bias_cols(hidden, p.b)?;
    let hidden = g.tanh(hidden);
    let scores = g.tmatvec(hidden, p.u)?; // [R]
    let weights = g.softmax(scores, 0)?;
    let summary = g.matvec(items, weights)?; // [F]
    Ok((summary, weights))
}

/// Uniform averaging over item columns; the context-attention ablation.
/// Identical to `context_attention` with u = 0 and b = 0.
pub fn uniform_item_mean(g: &mut Graph, items: NodeId) -> Result<NodeId> {
    let r = g.value(items).shape()[1];
    let ones = g.leaf(Tensor::filled(&[r], 1.0 / r as f64));
    g.matvec(items, ones)
}
