//! The per-view spatio-temporal encoder and the dilated-residual keyframe
//! encoder.
//!
//! View pipeline: five 3D-conv stages (stride 1x2x2, same-size padding,
//! LeakyReLU) -> per-frame self-attention on the final [C, M] maps ->
//! region-level context attention per frame -> frame-level context
//! attention over the T frame vectors -> linear projection to the view
//! representation v of size `feature_dim`.
//!
//! Keyframe pipeline: six dilated residual blocks (two residual units plus
//! 2x2 max pooling each, dilation schedule 1,1,2,2,4,4) -> flatten -> one
//! fully connected layer to `feature_dim`.

use crate::attention::{
    context_attention, self_attention, uniform_item_mean, ContextAttentionNodes,
    ContextAttentionParams, SelfAttentionNodes, SelfAttentionParams,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::fan_in_uniform;
use crate::tensor::Tensor;
use rand::Rng;

/// Add a per-channel bias to a channel-first tensor.
fn add_channel_bias(g: &mut Graph, x: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let c = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = g.reshape(x, vec![c, rest])?;
    let biased = g.add_bias_cols(flat, b)?;
    g.reshape(biased, shape)
}

// ── view encoder ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ViewEncoderParams {
    /// 5 conv kernels, [Co, Ci, kT, kH, kW].
    pub kernels: Vec<Tensor>,
    /// 5 per-channel biases.
    pub biases: Vec<Tensor>,
    pub self_attn: SelfAttentionParams,
    pub region_ctx: ContextAttentionParams,
    pub frame_ctx: ContextAttentionParams,
    /// [feature_dim, C_last]
    pub proj_w: Tensor,
    /// [feature_dim]
    pub proj_b: Tensor,
}

impl ViewEncoderParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut kernels = Vec::with_capacity(5);
        let mut biases = Vec::with_capacity(5);
        let mut c_in = 1;
        for (stage, &c_out) in cfg.filters.iter().enumerate() {
            let [kt, kh, kw] = cfg.kernels[stage];
            let fan_in = c_in * kt * kh * kw;
            kernels.push(fan_in_uniform(&[c_out, c_in, kt, kh, kw], fan_in, rng));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let c_last = *cfg.filters.last().unwrap();
        Self {
            kernels,
            biases,
            self_attn: SelfAttentionParams::init(c_last, rng),
            region_ctx: ContextAttentionParams::init(c_last, rng),
            frame_ctx: ContextAttentionParams::init(c_last, rng),
            proj_w: fan_in_uniform(&[cfg.feature_dim, c_last], c_last, rng),
            proj_b: Tensor::zeros(&[cfg.feature_dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewEncoderNodes {
    pub kernels: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub self_attn: SelfAttentionNodes,
    pub region_ctx: ContextAttentionNodes,
    pub frame_ctx: ContextAttentionNodes,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

impl ViewEncoderNodes {
    pub fn bind(g: &mut Graph, p: &ViewEncoderParams) -> Self {
        Self {
            kernels: p.kernels.iter().map(|k| g.leaf(k.clone())).collect(),
            biases: p.biases.iter().map(|b| g.leaf(b.clone())).collect(),
            self_attn: SelfAttentionNodes::bind(g, &p.self_attn),
            region_ctx: ContextAttentionNodes::bind(g, &p.region_ctx),
            frame_ctx: ContextAttentionNodes::bind(g, &p.frame_ctx),
            proj_w: g.leaf(p.proj_w.clone()),
            proj_b: g.leaf(p.proj_b.clone()),
        }
    }
}

/// Encode a [T, H, W] frame sequence into the view representation v.
pub fn encode_view(
    g: &mut Graph,
    frames: NodeId,
    nodes: &ViewEncoderNodes,
    cfg: &ModelConfig,
    use_self_attention: bool,
    use_context_attention: bool,
) -> Result<NodeId> {
    let shape = g.value(frames).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "encode_view wants [T,H,W], got {shape:?}"
        )));
    }
    let t = shape[0];
    let mut x = g.reshape(frames, vec![1, t, shape[1], shape[2]])?;
    for stage in 0..5 {
        let kshape = g.value(nodes.kernels[stage]).shape().to_vec();
        let pad = ((kshape[2] - 1) / 2, (kshape[3] - 1) / 2, (kshape[4] - 1) / 2);
        x = g.conv3d(x, nodes.kernels[stage], (1, 2, 2), pad)?;
        x = add_channel_bias(g, x, nodes.biases[stage])?;
        x = g.leaky_relu(x, cfg.leaky_slope);
    }
    let fshape = g.value(x).shape().to_vec(); // [C, T, h, w]
    let (c, m) = (fshape[0], fshape[2] * fshape[3]);
    let mut frame_vecs = Vec::with_capacity(t);
    for ti in 0..t {
        let frame = g.slice_axis(x, 1, ti)?; // [C, h, w]
        let mut map = g.reshape(frame, vec![c, m])?;
        if use_self_attention {
            map = self_attention(g, map, &nodes.self_attn)?;
        }
        let fv = if use_context_attention {
            context_attention(g, map, &nodes.region_ctx)?.0
        } else {
            uniform_item_mean(g, map)?
        };
        frame_vecs.push(fv);
    }
    let stacked = g.stack_cols(&frame_vecs)?; // [C, T]
    let pooled = if use_context_attention {
        context_attention(g, stacked, &nodes.frame_ctx)?.0
    } else {
        uniform_item_mean(g, stacked)?
    };
    let v = g.matvec(nodes.proj_w, pooled)?;
    g.add(v, nodes.proj_b)
}

// ── keyframe encoder ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ResidualUnitParams {
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
}

impl ResidualUnitParams {
    fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let fan_in = channels * 9;
        Self {
            conv1: fan_in_uniform(&[channels, channels, 3, 3], fan_in, rng),
            bias1: Tensor::zeros(&[channels]),
            conv2: fan_in_uniform(&[channels, channels, 3, 3], fan_in, rng),
            bias2: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DilatedBlockParams {
    /// 1x1 channel lift, present only when the block changes width.
    pub lift: Option<(Tensor, Tensor)>,
    pub unit1: ResidualUnitParams,
    pub unit2: ResidualUnitParams,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct KeyframeEncoderParams {
    pub blocks: Vec<DilatedBlockParams>,
    /// [feature_dim, flattened]
    pub fc_w: Tensor,
    /// [feature_dim]
    pub fc_b: Tensor,
}

impl KeyframeEncoderParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(6);
        let mut c_in = 1;
        for (i, &c) in cfg.keyframe_channels.iter().enumerate() {
            let lift = if c_in != c {
                Some((
                    fan_in_uniform(&[c, c_in, 1, 1], c_in, rng),
                    Tensor::zeros(&[c]),
                ))
            } else {
                None
            };
            blocks.push(DilatedBlockParams {
                lift,
                unit1: ResidualUnitParams::init(c, rng),
                unit2: ResidualUnitParams::init(c, rng),
                dilation: cfg.keyframe_dilations[i],
            });
            c_in = c;
        }
        let c_last = *cfg.keyframe_channels.last().unwrap();
        Self {
            blocks,
            fc_w: fan_in_uniform(&[cfg.feature_dim, c_last], c_last, rng),
            fc_b: Tensor::zeros(&[cfg.feature_dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualUnitNodes {
    pub conv1: NodeId,
    pub bias1: NodeId,
    pub conv2: NodeId,
    pub bias2: NodeId,
}

#[derive(Clone, Debug)]
pub struct DilatedBlockNodes {
    pub lift: Option<(NodeId, NodeId)>,
    pub unit1: ResidualUnitNodes,
    pub unit2: ResidualUnitNodes,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct KeyframeEncoderNodes {
    pub blocks: Vec<DilatedBlockNodes>,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

impl KeyframeEncoderNodes {
    pub fn bind(g: &mut Graph, p: &KeyframeEncoderParams) -> Self {
        let bind_unit = |g: &mut Graph, u: &ResidualUnitParams| ResidualUnitNodes {
            conv1: g.leaf(u.conv1.clone()),
            bias1: g.leaf(u.bias1.clone()),
            conv2: g.leaf(u.conv2.clone()),
            bias2: g.leaf(u.bias2.clone()),
        };
        Self {
            blocks: p
                .blocks
                .iter()
                .map(|b| DilatedBlockNodes {
                    lift: b
                        .lift
                        .as_ref()
                        .map(|(w, bias)| (g.leaf(w.clone()), g.leaf(bias.clone()))),
                    unit1: bind_unit(g, &b.unit1),
                    unit2: bind_unit(g, &b.unit2),
                    dilation: b.dilation,
                })
                .collect(),
            fc_w: g.leaf(p.fc_w.clone()),
            fc_b: g.leaf(p.fc_b.clone()),
        }
    }
}

/// y = x + conv2(leaky(conv1(x))); identity when all weights are zero.
fn residual_unit(
    g: &mut Graph,
    x: NodeId,
    u: &ResidualUnitNodes,
    dilation: usize,
    slope: f64,
) -> Result<NodeId> {
    let d = (dilation, dilation);
    let pad = (dilation, dilation);
    let mut y = g.conv2d(x, u.conv1, (1, 1), pad, d)?;
    y = add_channel_bias(g, y, u.bias1)?;
    y = g.leaky_relu(y, slope);
    y = g.conv2d(y, u.conv2, (1, 1), pad, d)?;
    y = add_channel_bias(g, y, u.bias2)?;
    g.add(x, y)
}

/// Encode a [H, W] keyframe into a `feature_dim` vector.
pub fn encode_keyframe(
    g: &mut Graph,
    image: NodeId,
    nodes: &KeyframeEncoderNodes,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "encode_keyframe wants [H,W], got {shape:?}"
        )));
    }
    if shape[0] < 64 || shape[1] < 64 {
        return Err(Error::Dimension(format!(
            "keyframe {}x{} too small for 6 pooling halvings",
            shape[0], shape[1]
        )));
    }
    let mut x = g.reshape(image, vec![1, shape[0], shape[1]])?;
    for block in &nodes.blocks {
        if let Some((w, b)) = block.lift {
            x = g.conv2d(x, w, (1, 1), (0, 0), (1, 1))?;
            x = add_channel_bias(g, x, b)?;
        }
        x = residual_unit(g, x, &block.unit1, block.dilation, cfg.leaky_slope)?;
        x = residual_unit(g, x, &block.unit2, block.dilation, cfg.leaky_slope)?;
        x = g.maxpool2d(x)?;
    }
    let flat_len = g.value(x).numel();
    let flat = g.reshape(x, vec![flat_len])?;
    let out = g.matvec(nodes.fc_w, flat)?;
    g.add(out, nodes.fc_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            filters: vec![2, 3, 4, 4, 4],
            kernels: vec![[3, 3, 3]; 5],
            feature_dim: 6,
            keyframe_channels: vec![2, 2, 3, 3, 4, 4],
            keyframe_dilations: vec![1, 1, 2, 2, 4, 4],
            hidden_units: 8,
            leaky_slope: 0.2,
        }
    }

    fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn view_output_dim_is_feature_dim() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ViewEncoderParams::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let frames = g.leaf(rng_tensor(&[4, 64, 64], &mut rng));
        let nodes = ViewEncoderNodes::bind(&mut g, &p);
        let v = encode_view(&mut g, frames, &nodes, &cfg, true, true).unwrap();
        assert_eq!(g.value(v).shape(), &[cfg.feature_dim]);
    }

    #[test]
    fn zero_frames_zero_biases_give_zero_v() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ViewEncoderParams::init(&cfg, &mut rng);
        // biases are zero-initialized; zero frames propagate zeros through
        // the linear stack, attention over equal items is uniform, tanh(0)=0
        let mut g = Graph::new();
        let frames = g.leaf(Tensor::zeros(&[4, 64, 64]));
        let nodes = ViewEncoderNodes::bind(&mut g, &p);
        let v = encode_view(&mut g, frames, &nodes, &cfg, true, true).unwrap();
        for &x in g.value(v).data() {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn self_attention_off_equals_gamma_zero() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ViewEncoderParams::init(&cfg, &mut rng);
        assert_eq!(p.self_attn.gamma.data()[0], 0.0);
        let frames = rng_tensor(&[2, 64, 64], &mut rng);
        let run = |use_sa: bool| {
            let mut g = Graph::new();
            let f = g.leaf(frames.clone());
            let nodes = ViewEncoderNodes::bind(&mut g, &p);
            let v = encode_view(&mut g, f, &nodes, &cfg, use_sa, true).unwrap();
            g.value(v).data().to_vec()
        };
        let with_gamma0 = run(true);
        let without = run(false);
        for (a, b) in with_gamma0.iter().zip(&without) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn keyframe_spatial_trail() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = KeyframeEncoderParams::init(&cfg, &mut rng);
        // flattened size after 6 halvings of 64 is c_last * 1 * 1
        let c_last = *cfg.keyframe_channels.last().unwrap();
        assert_eq!(p.fc_w.shape()[1], c_last);
        let mut g = Graph::new();
        let img = g.leaf(rng_tensor(&[64, 64], &mut rng));
        let nodes = KeyframeEncoderNodes::bind(&mut g, &p);
        let k = encode_keyframe(&mut g, img, &nodes, &cfg).unwrap();
        assert_eq!(g.value(k).shape(), &[cfg.feature_dim]);
    }

    #[test]
    fn keyframe_too_small_rejected() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = KeyframeEncoderParams::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[32, 32]));
        let nodes = KeyframeEncoderNodes::bind(&mut g, &p);
        assert!(matches!(
            encode_keyframe(&mut g, img, &nodes, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_image_zero_biases_give_zero_k() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KeyframeEncoderParams::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[64, 64]));
        let nodes = KeyframeEncoderNodes::bind(&mut g, &p);
        let k = encode_keyframe(&mut g, img, &nodes, &cfg).unwrap();
        for &x in g.value(k).data() {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn zero_weight_residual_unit_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rng_tensor(&[3, 8, 8], &mut rng);
        let unit = ResidualUnitParams {
            conv1: Tensor::zeros(&[3, 3, 3, 3]),
            bias1: Tensor::zeros(&[3]),
            conv2: Tensor::zeros(&[3, 3, 3, 3]),
            bias2: Tensor::zeros(&[3]),
        };
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let nodes = ResidualUnitNodes {
            conv1: g.leaf(unit.conv1.clone()),
            bias1: g.leaf(unit.bias1.clone()),
            conv2: g.leaf(unit.conv2.clone()),
            bias2: g.leaf(unit.bias2.clone()),
        };
        let y = residual_unit(&mut g, xi, &nodes, 2, 0.2).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_weight_block_passes_pooled_input() {
        // equal-width block (no lift): zero residual weights leave only the
        // skip path, so the block output is the pooled input
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rng_tensor(&[2, 8, 8], &mut rng);
        let zero_unit = || ResidualUnitParams {
            conv1: Tensor::zeros(&[2, 2, 3, 3]),
            bias1: Tensor::zeros(&[2]),
            conv2: Tensor::zeros(&[2, 2, 3, 3]),
            bias2: Tensor::zeros(&[2]),
        };
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let bind_unit = |g: &mut Graph, u: &ResidualUnitParams| ResidualUnitNodes {
            conv1: g.leaf(u.conv1.clone()),
            bias1: g.leaf(u.bias1.clone()),
            conv2: g.leaf(u.conv2.clone()),
            bias2: g.leaf(u.bias2.clone()),
        };
        let u1 = bind_unit(&mut g, &zero_unit());
        let u2 = bind_unit(&mut g, &zero_unit());
        let y1 = residual_unit(&mut g, xi, &u1, 1, 0.2).unwrap();
        let y2 = residual_unit(&mut g, y1, &u2, 1, 0.2).unwrap();
        let pooled = g.maxpool2d(y2).unwrap();
        let direct = g.maxpool2d(xi).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(direct).data());
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ViewEncoderParams::init(&cfg, &mut rng);
        let frames = rng_tensor(&[2, 64, 64], &mut rng);
        // gradient w.r.t. gamma through the whole encoder
        let err = crate::graph::finite_diff_check(
            |g, gamma| {
                let f = g.leaf(frames.clone());
                let mut nodes = ViewEncoderNodes::bind(g, &p);
                nodes.self_attn.gamma = gamma;
                let v = encode_view(g, f, &nodes, &cfg, true, true)?;
                Ok(g.sumsq(v))
            },
            &Tensor::scalar(0.3),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gamma grad err = {err}");
    }
}
