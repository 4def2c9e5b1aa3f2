//! Per-operator finite-difference gradient verification.

use dmqca_core::attention::{
    context_attention, self_attention, ContextAttentionNodes, ContextAttentionParams,
    SelfAttentionNodes, SelfAttentionParams,
};
use dmqca_core::{finite_diff_check, Error, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THRESHOLD: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce an arbitrary op output to a well-conditioned scalar.
fn to_scalar(g: &mut Graph, y: NodeId) -> NodeId {
    let s = g.sumsq(y);
    g.scale(s, 0.5)
}

pub fn cmd_gradcheck(seed: u64) -> Result<(), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;

    let mut check =
        |name: &str,
         x: Tensor,
         f: &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId, Error>|
         -> Result<(), Error> {
            let err = finite_diff_check(f, &x, EPS)?;
            let ok = err < THRESHOLD;
            println!(
                "{} {name:<24} max rel err {err:.3e}",
                if ok { "pass" } else { "FAIL" }
            );
            if !ok {
                failures += 1;
            }
            Ok(())
        };

    // convolutions
    let k3 = rng_tensor(&[3, 2, 2, 3, 3], &mut rng);
    check("conv3d", rng_tensor(&[2, 3, 6, 6], &mut rng), &mut |g, x| {
        let k = g.leaf(k3.clone());
        let y = g.conv3d(x, k, (1, 2, 2), (0, 1, 1))?;
        Ok(to_scalar(g, y))
    })?;
    let k2 = rng_tensor(&[3, 2, 3, 3], &mut rng);
    check("conv2d", rng_tensor(&[2, 7, 7], &mut rng), &mut |g, x| {
        let k = g.leaf(k2.clone());
        let y = g.conv2d(x, k, (1, 1), (1, 1), (1, 1))?;
        Ok(to_scalar(g, y))
    })?;
    let k2d = rng_tensor(&[2, 2, 3, 3], &mut rng);
    check("conv2d_dilated", rng_tensor(&[2, 9, 9], &mut rng), &mut |g, x| {
        let k = g.leaf(k2d.clone());
        let y = g.conv2d(x, k, (1, 1), (2, 2), (2, 2))?;
        Ok(to_scalar(g, y))
    })?;
    let w11 = rng_tensor(&[4, 3], &mut rng);
    check("one_by_one_conv", rng_tensor(&[3, 5], &mut rng), &mut |g, x| {
        let w = g.leaf(w11.clone());
        let y = g.one_by_one_conv(x, w)?;
        Ok(to_scalar(g, y))
    })?;

    // linear algebra
    let mb = rng_tensor(&[4, 3], &mut rng);
    check("matmul", rng_tensor(&[3, 4], &mut rng), &mut |g, x| {
        let b = g.leaf(mb.clone());
        let y = g.matmul(x, b)?;
        Ok(to_scalar(g, y))
    })?;
    check("transpose2d", rng_tensor(&[3, 5], &mut rng), &mut |g, x| {
        let y = g.transpose2d(x)?;
        Ok(to_scalar(g, y))
    })?;
    let v4 = rng_tensor(&[4], &mut rng);
    check("matvec", rng_tensor(&[3, 4], &mut rng), &mut |g, x| {
        let v = g.leaf(v4.clone());
        let y = g.matvec(x, v)?;
        Ok(to_scalar(g, y))
    })?;
    let v3 = rng_tensor(&[3], &mut rng);
    check("tmatvec", rng_tensor(&[3, 4], &mut rng), &mut |g, x| {
        let v = g.leaf(v3.clone());
        let y = g.tmatvec(x, v)?;
        Ok(to_scalar(g, y))
    })?;

    // elementwise and broadcast
    let other = rng_tensor(&[2, 3, 4], &mut rng);
    check("add", rng_tensor(&[2, 3, 4], &mut rng), &mut |g, x| {
        let b = g.leaf(other.clone());
        let y = g.add(x, b)?;
        Ok(to_scalar(g, y))
    })?;
    check("sub", rng_tensor(&[2, 3, 4], &mut rng), &mut |g, x| {
        let b = g.leaf(other.clone());
        let y = g.sub(x, b)?;
        Ok(to_scalar(g, y))
    })?;
    let bias = rng_tensor(&[3], &mut rng);
    check("add_bias_cols", rng_tensor(&[3, 5], &mut rng), &mut |g, x| {
        let b = g.leaf(bias.clone());
        let y = g.add_bias_cols(x, b)?;
        Ok(to_scalar(g, y))
    })?;
    check("scale", rng_tensor(&[7], &mut rng), &mut |g, x| {
        let y = g.scale(x, -1.7);
        Ok(to_scalar(g, y))
    })?;
    check("mul_scalar", rng_tensor(&[5], &mut rng), &mut |g, x| {
        let s = g.leaf(Tensor::scalar(0.6));
        let y = g.mul_scalar(s, x)?;
        Ok(to_scalar(g, y))
    })?;
    check("leaky_relu", rng_tensor(&[4, 4], &mut rng), &mut |g, x| {
        let y = g.leaky_relu(x, 0.2);
        Ok(to_scalar(g, y))
    })?;
    check("tanh", rng_tensor(&[4, 4], &mut rng), &mut |g, x| {
        let y = g.tanh(x);
        Ok(to_scalar(g, y))
    })?;
    check("abs", rng_tensor(&[4, 4], &mut rng), &mut |g, x| {
        let y = g.abs(x);
        Ok(to_scalar(g, y))
    })?;

    // normalization / pooling / reshaping
    check("softmax_axis0", rng_tensor(&[4, 3], &mut rng), &mut |g, x| {
        let y = g.softmax(x, 0)?;
        Ok(to_scalar(g, y))
    })?;
    check("softmax_axis1", rng_tensor(&[4, 3], &mut rng), &mut |g, x| {
        let y = g.softmax(x, 1)?;
        Ok(to_scalar(g, y))
    })?;
    check("maxpool2d", rng_tensor(&[2, 6, 6], &mut rng), &mut |g, x| {
        let y = g.maxpool2d(x)?;
        Ok(to_scalar(g, y))
    })?;
    check("avgpool2d", rng_tensor(&[2, 6, 6], &mut rng), &mut |g, x| {
        let y = g.avgpool2d(x)?;
        Ok(to_scalar(g, y))
    })?;
    let cat_other = rng_tensor(&[2, 3], &mut rng);
    check("concat", rng_tensor(&[2, 4], &mut rng), &mut |g, x| {
        let b = g.leaf(cat_other.clone());
        let y = g.concat(&[x, b], 1)?;
        Ok(to_scalar(g, y))
    })?;
    let col = rng_tensor(&[3], &mut rng);
    check("stack_cols", rng_tensor(&[3], &mut rng), &mut |g, x| {
        let b = g.leaf(col.clone());
        let y = g.stack_cols(&[x, b, x])?;
        Ok(to_scalar(g, y))
    })?;
    check("slice_axis", rng_tensor(&[3, 4, 5], &mut rng), &mut |g, x| {
        let y = g.slice_axis(x, 1, 2)?;
        Ok(to_scalar(g, y))
    })?;
    check("reshape", rng_tensor(&[3, 4], &mut rng), &mut |g, x| {
        let y = g.reshape(x, vec![2, 6])?;
        Ok(to_scalar(g, y))
    })?;
    check("sum", rng_tensor(&[3, 4], &mut rng), &mut |g, x| {
        let z = g.sum(x);
        Ok(to_scalar(g, z))
    })?;
    check("sumsq", rng_tensor(&[3, 4], &mut rng), &mut |g, x| Ok(g.sumsq(x)))?;

    // attention blocks
    let mut sa = SelfAttentionParams::init(8, &mut rng);
    sa.gamma = Tensor::scalar(0.7);
    check("self_attention", rng_tensor(&[8, 5], &mut rng), &mut |g, x| {
        let nodes = SelfAttentionNodes::bind(g, &sa);
        let y = self_attention(g, x, &nodes)?;
        Ok(to_scalar(g, y))
    })?;
    let ca = ContextAttentionParams::init(6, &mut rng);
    check("context_attention", rng_tensor(&[6, 4], &mut rng), &mut |g, x| {
        let nodes = ContextAttentionNodes::bind(g, &ca);
        let (summary, _) = context_attention(g, x, &nodes)?;
        Ok(to_scalar(g, summary))
    })?;

    if failures > 0 {
        Err(Error::Numeric(format!(
            "{failures} operator(s) exceeded the {THRESHOLD:.0e} gradient threshold"
        )))
    } else {
        println!("all operators pass (threshold {THRESHOLD:.0e}, eps {EPS:.0e})");
        Ok(())
    }
}
