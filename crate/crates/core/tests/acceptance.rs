//! Acceptance gate: one test (and one printed pass/fail line) per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use dmqca_core::attention::{
    context_attention, self_attention, ContextAttentionNodes, ContextAttentionParams,
    SelfAttentionNodes, SelfAttentionParams,
};
use dmqca_core::config::{
    AblationConfig, EvalConfig, ModelConfig, PhantomConfig, TrainConfig,
};
use dmqca_core::evalkit::{bland_altman, kfold, pearson, run_protocol};
use dmqca_core::model::{train_model, DmqcaModel};
use dmqca_core::phantom::{compute_rvd, generate_dataset, load_dataset, Sample};
use dmqca_core::{finite_diff_check, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn verdict(criterion: usize, what: &str, pass: bool) {
    println!(
        "ACCEPTANCE {criterion}: {} — {what}",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {criterion} failed: {what}");
}

fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Narrow model used wherever the criteria pin the data scale but not the
/// layer widths; keeps the single-core runtime inside the stated budgets.
fn slim_model() -> ModelConfig {
    ModelConfig {
        filters: vec![4, 8, 8, 16, 16],
        feature_dim: 32,
        keyframe_channels: vec![4, 4, 8, 8, 8, 8],
        hidden_units: 32,
        ..ModelConfig::desk()
    }
}

fn bench_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 120,
        batch_size: 4,
        seed: 5,
        initial_lr: 3e-3,
        lr_decay: 0.9924,
        normalize_labels: true,
        ..TrainConfig::default()
    }
}

/// 100-sample phantom benchmark shared by criteria 6 and 7.
fn benchmark_samples() -> &'static Vec<Sample> {
    static SAMPLES: OnceLock<Vec<Sample>> = OnceLock::new();
    SAMPLES.get_or_init(|| {
        // desk scale (T=4, 64x64) at a finer pixel pitch: taper endpoints at
        // 0.5 mm/px are a sub-pixel signal that 90 training samples cannot
        // resolve; 0.25 mm/px keeps every lesion inside the 16 mm field
        let cfg = PhantomConfig {
            mm_per_pixel: 0.25,
            noise: 0.01,
            ranges: dmqca_core::config::IndexRanges {
                ll_min: 1.5,
                ll_max: 6.0,
                ..Default::default()
            },
            ..PhantomConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(100, 11, &cfg, dir.path()).unwrap();
        let (_, samples) = load_dataset(dir.path()).unwrap();
        samples
    })
}

fn benchmark_report(name: &str) -> dmqca_core::evalkit::EvalReport {
    run_protocol(
        benchmark_samples(),
        &slim_model(),
        &AblationConfig::from_name(name).unwrap(),
        name,
        &bench_train_cfg(),
        &EvalConfig { k_folds: 10, seed: 9 },
    )
    .unwrap()
}

fn ours_report() -> &'static dmqca_core::evalkit::EvalReport {
    static OURS: OnceLock<dmqca_core::evalkit::EvalReport> = OnceLock::new();
    OURS.get_or_init(|| benchmark_report("Ours"))
}

// ── 1: gradient suite ────────────────────────────────────────────────

#[test]
fn acceptance_1_gradient_suite() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut configs = 0usize;
    let mut worst = 0.0f64;
    let mut run = |err: f64| {
        configs += 1;
        worst = worst.max(err);
    };

    for _ in 0..3 {
        let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let k = rng.gen_range(2..4);
        let aux = rng_tensor(&[co, ci, k, k, k], &mut rng);
        let x = rng_tensor(&[ci, 4, 6, 6], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let ki = g.leaf(aux.clone());
                let y = g.conv3d(xi, ki, (1, 2, 2), (k / 2, k / 2, k / 2))?;
                Ok(g.sumsq(y))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for dilation in [1usize, 2, 3] {
        let aux = rng_tensor(&[2, 2, 3, 3], &mut rng);
        let x = rng_tensor(&[2, 9, 9], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let ki = g.leaf(aux.clone());
                let y = g.conv2d(xi, ki, (1, 1), (dilation, dilation), (dilation, dilation))?;
                Ok(g.sumsq(y))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for _ in 0..3 {
        let m = rng.gen_range(2..6);
        let n = rng.gen_range(2..6);
        let aux = rng_tensor(&[n, m], &mut rng);
        let x = rng_tensor(&[m, n], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let b = g.leaf(aux.clone());
                let y = g.matmul(xi, b)?;
                let z = g.tanh(y);
                Ok(g.sumsq(z))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for axis in [0usize, 1] {
        let x = rng_tensor(&[4, 5], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let y = g.softmax(xi, axis)?;
                Ok(g.sumsq(y))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for _ in 0..2 {
        let x = rng_tensor(&[2, 6, 6], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let p = g.maxpool2d(xi)?;
                let q = g.avgpool2d(p)?;
                Ok(g.sumsq(q))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for _ in 0..2 {
        let c = rng.gen_range(4..9);
        let m = rng.gen_range(2..6);
        let mut p = SelfAttentionParams::init(c, &mut rng);
        p.gamma = Tensor::scalar(rng.gen_range(0.2..1.0));
        let x = rng_tensor(&[c, m], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let nodes = SelfAttentionNodes::bind(g, &p);
                let y = self_attention(g, xi, &nodes)?;
                Ok(g.sumsq(y))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    for _ in 0..2 {
        let f = rng.gen_range(3..7);
        let r = rng.gen_range(2..5);
        let p = ContextAttentionParams::init(f, &mut rng);
        let x = rng_tensor(&[f, r], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let nodes = ContextAttentionNodes::bind(g, &p);
                let (summary, _) = context_attention(g, xi, &nodes)?;
                Ok(g.sumsq(summary))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }
    // leaky_relu, abs, bias, scalar gates
    for _ in 0..3 {
        let x = rng_tensor(&[3, 4], &mut rng);
        let aux = rng_tensor(&[3], &mut rng);
        run(finite_diff_check(
            |g, xi| {
                let b = g.leaf(aux.clone());
                let y = g.add_bias_cols(xi, b)?;
                let y = g.leaky_relu(y, 0.2);
                let y = g.abs(y);
                Ok(g.sumsq(y))
            },
            &x,
            1e-5,
        )
        .unwrap());
    }

    // full model: loss gradient on sampled parameters vs central differences
    let cfg = ModelConfig {
        filters: vec![2, 2, 2, 2, 2],
        feature_dim: 8,
        keyframe_channels: vec![2, 2, 2, 2, 2, 2],
        hidden_units: 8,
        ..ModelConfig::desk()
    };
    let (_, sample) = dmqca_core::phantom::generate_sample(
        &PhantomConfig {
            frames: 2,
            ..PhantomConfig::desk()
        },
        77,
    )
    .unwrap();
    let mut model = DmqcaModel::new(&cfg, &AblationConfig::full(), 13).unwrap();
    let mut opt = dmqca_core::model::Adam::new(&model);
    // lr = 0: populates gradients without changing parameters
    model.train_step(&[&sample], &mut opt, 0.0, 0.0).unwrap();
    let names = model.param_names();
    let mut full_worst = 0.0f64;
    for pick in 0..10 {
        let name = &names[(pick * 7919) % names.len()];
        let tensor = model.param_value(name).unwrap().clone();
        let idx = (pick * 104729) % tensor.numel();
        let analytic = model.param_grad(name).unwrap().data()[idx];
        let eps = 1e-4;
        let mut eval_at = |v: f64| -> f64 {
            let mut t = tensor.clone();
            t.data_mut()[idx] = v;
            model.set_param(name, t).unwrap();
            let loss = model.eval_loss(&[&sample], 0.0).unwrap();
            loss
        };
        let base = tensor.data()[idx];
        let cd = (eval_at(base + eps) - eval_at(base - eps)) / (2.0 * eps);
        eval_at(base);
        // floor at 1e-6: central differences on an O(1) loss cannot resolve
        // gradients below the f64 roundoff noise (~1e-12 absolute)
        let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-6);
        full_worst = full_worst.max(rel);
        run(rel);
    }

    let elapsed = started.elapsed();
    verdict(
        1,
        &format!(
            "{configs} random configs, worst rel err {worst:.2e} (full model {full_worst:.2e}), {elapsed:.0?} (< 5 min)"
        ),
        configs >= 20 && worst < 1e-4 && elapsed.as_secs() < 300,
    );
}

// ── 2: oracle equivalence ────────────────────────────────────────────

fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let es: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = es.iter().sum();
    es.iter().map(|e| e / s).collect()
}

fn conv3d_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Vec<f64> {
    let (ci, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kt, kh, kw) = (
        k.shape()[0],
        k.shape()[1],
        k.shape()[2],
        k.shape()[3],
        k.shape()[4],
    );
    let od = |e: usize, ke: usize, s: usize, p: usize| (e + 2 * p - ke) / s + 1;
    let (ot, oh, ow) = (
        od(t, kt, stride.0, pad.0),
        od(h, kh, stride.1, pad.1),
        od(w, kw, stride.2, pad.2),
    );
    let mut out = vec![0.0; co * ot * oh * ow];
    for oc in 0..co {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (zt * stride.0 + dt) as isize - pad.0 as isize;
                                    let ih = (zh * stride.1 + dh) as isize - pad.1 as isize;
                                    let iw = (zw * stride.2 + dw) as isize - pad.2 as isize;
                                    if it < 0
                                        || ih < 0
                                        || iw < 0
                                        || it >= t as isize
                                        || ih >= h as isize
                                        || iw >= w as isize
                                    {
                                        continue;
                                    }
                                    s += x.data()[((ic * t + it as usize) * h + ih as usize) * w
                                        + iw as usize]
                                        * k.data()
                                            [(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw];
                                }
                            }
                        }
                    }
                    out[((oc * ot + zt) * oh + zh) * ow + zw] = s;
                }
            }
        }
    }
    out
}

fn conv2d_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let keh = (kh - 1) * dil.0 + 1;
    let kew = (kw - 1) * dil.1 + 1;
    let oh = (h + 2 * pad.0 - keh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kew) / stride.1 + 1;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for zh in 0..oh {
            for zw in 0..ow {
                let mut s = 0.0;
                for ic in 0..ci {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let ih = (zh * stride.0 + dh * dil.0) as isize - pad.0 as isize;
                            let iw = (zw * stride.1 + dw * dil.1) as isize - pad.1 as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            s += x.data()[(ic * h + ih as usize) * w + iw as usize]
                                * k.data()[((oc * ci + ic) * kh + dh) * kw + dw];
                        }
                    }
                }
                out[(oc * oh + zh) * ow + zw] = s;
            }
        }
    }
    out
}

#[test]
fn acceptance_2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0usize;

    for _ in 0..6 {
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (t, h, w) = (rng.gen_range(2..6), rng.gen_range(3..8), rng.gen_range(3..8));
        let k = rng.gen_range(1..4).min(t).min(h).min(w);
        let stride = (1, rng.gen_range(1..3), rng.gen_range(1..3));
        let pad = (k / 2, k / 2, k / 2);
        let x = rng_tensor(&[ci, t, h, w], &mut rng);
        let kt = rng_tensor(&[co, ci, k, k, k], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ki = g.leaf(kt.clone());
        let y = g.conv3d(xi, ki, stride, pad).unwrap();
        if g.value(y).data() != conv3d_oracle(&x, &kt, stride, pad).as_slice() {
            mismatches += 1;
        }
    }
    for _ in 0..6 {
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(6..9), rng.gen_range(6..9));
        let k = rng.gen_range(1..4);
        let dil = (rng.gen_range(1..3), rng.gen_range(1..3));
        let pad = ((k - 1) * dil.0 / 2 + 1, (k - 1) * dil.1 / 2 + 1);
        let x = rng_tensor(&[ci, h, w], &mut rng);
        let kt = rng_tensor(&[co, ci, k, k], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ki = g.leaf(kt.clone());
        let y = g.conv2d(xi, ki, (1, 1), pad, dil).unwrap();
        if g.value(y).data() != conv2d_oracle(&x, &kt, (1, 1), pad, dil).as_slice() {
            mismatches += 1;
        }
    }

    // self-attention vs dense equation-level oracle
    for _ in 0..5 {
        let c = rng.gen_range(2..9);
        let m = rng.gen_range(1..9);
        let mut p = SelfAttentionParams::init(c, &mut rng);
        p.gamma = Tensor::scalar(rng.gen_range(-1.0..1.0));
        let x = rng_tensor(&[c, m], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let nodes = SelfAttentionNodes::bind(&mut g, &p);
        let y = self_attention(&mut g, xi, &nodes).unwrap();

        let cr = p.wf.shape()[0];
        let proj = |w: &Tensor, rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * m];
            for i in 0..rows {
                for j in 0..m {
                    let mut s = 0.0;
                    for kk in 0..c {
                        s += w.data()[i * c + kk] * x.data()[kk * m + j];
                    }
                    out[i * m + j] = s;
                }
            }
            out
        };
        let f = proj(&p.wf, cr);
        let q = proj(&p.wg, cr);
        let hm = proj(&p.wh, c);
        let mut expect = vec![0.0; c * m];
        for j in 0..m {
            let col: Vec<f64> = (0..m)
                .map(|i| (0..cr).map(|kk| f[kk * m + i] * q[kk * m + j]).sum())
                .collect();
            let alpha = softmax_vec(&col);
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, a) in alpha.iter().enumerate() {
                    acc += hm[ch * m + i] * a;
                }
                expect[ch * m + j] = x.data()[ch * m + j] + p.gamma.data()[0] * acc;
            }
        }
        if g.value(y).data() != expect.as_slice() {
            mismatches += 1;
        }
    }

    // context attention vs dense oracle
    for _ in 0..5 {
        let f = rng.gen_range(2..8);
        let r = rng.gen_range(1..8);
        let p = ContextAttentionParams::init(f, &mut rng);
        let x = rng_tensor(&[f, r], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let nodes = ContextAttentionNodes::bind(&mut g, &p);
        let (summary, weights) = context_attention(&mut g, xi, &nodes).unwrap();

        let a = p.w.shape()[0];
        let mut scores = vec![0.0; r];
        for ri in 0..r {
            for ai in 0..a {
                let mut pre = 0.0;
                for fi in 0..f {
                    pre += p.w.data()[ai * f + fi] * x.data()[fi * r + ri];
                }
                pre += p.b.data()[ai];
                scores[ri] += pre.tanh() * p.u.data()[ai];
            }
        }
        let wexp = softmax_vec(&scores);
        let mut sexp = vec![0.0; f];
        for fi in 0..f {
            for ri in 0..r {
                sexp[fi] += x.data()[fi * r + ri] * wexp[ri];
            }
        }
        if g.value(weights).data() != wexp.as_slice()
            || g.value(summary).data() != sexp.as_slice()
        {
            mismatches += 1;
        }
    }

    verdict(
        2,
        &format!("22 random small cases, {mismatches} bitwise mismatches"),
        mismatches == 0,
    );
}

// ── 3: identity / ablation invariants ────────────────────────────────

#[test]
fn acceptance_3_identity_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);

    // gamma = 0 self-attention is the exact identity
    let x = rng_tensor(&[6, 7], &mut rng);
    let p = SelfAttentionParams::init(6, &mut rng);
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let nodes = SelfAttentionNodes::bind(&mut g, &p);
    let y = self_attention(&mut g, xi, &nodes).unwrap();
    let gamma_identity = g.value(y).data() == x.data();

    // zero-weight residual trail: a keyframe encoder with all residual
    // weights zeroed reduces exactly to FC(flatten(pool^6(x)))
    let cfg = ModelConfig {
        filters: vec![2, 2, 2, 2, 2],
        feature_dim: 4,
        keyframe_channels: vec![1, 1, 1, 1, 1, 1],
        hidden_units: 4,
        ..ModelConfig::desk()
    };
    let mut params = dmqca_core::encoders::KeyframeEncoderParams::init(&cfg, &mut rng);
    for b in params.blocks.iter_mut() {
        for u in [&mut b.unit1, &mut b.unit2] {
            u.conv1.fill(0.0);
            u.conv2.fill(0.0);
            u.bias1.fill(0.0);
            u.bias2.fill(0.0);
        }
    }
    let img = rng_tensor(&[64, 64], &mut rng);
    let mut g = Graph::new();
    let ii = g.leaf(img.clone());
    let nodes = dmqca_core::encoders::KeyframeEncoderNodes::bind(&mut g, &params);
    let enc = dmqca_core::encoders::encode_keyframe(&mut g, ii, &nodes, &cfg).unwrap();
    let enc_val = g.value(enc).data().to_vec();
    // reference: pools only
    let mut g2 = Graph::new();
    let mut xr = g2.leaf(Tensor::new(vec![1, 64, 64], img.data().to_vec()).unwrap());
    for _ in 0..6 {
        xr = g2.maxpool2d(xr).unwrap();
    }
    let flat = g2.reshape(xr, vec![1]).unwrap();
    let w = g2.leaf(params.fc_w.clone());
    let b = g2.leaf(params.fc_b.clone());
    let mv = g2.matvec(w, flat).unwrap();
    let refv = g2.add(mv, b).unwrap();
    let residual_identity = enc_val == g2.value(refv).data();

    // Ours-SelfAtt output equals the full model with gamma frozen at 0,
    // once the shared parameters coincide
    let slim = ModelConfig {
        filters: vec![2, 2, 3, 3, 4],
        feature_dim: 8,
        keyframe_channels: vec![2, 2, 2, 2, 2, 2],
        hidden_units: 8,
        ..ModelConfig::desk()
    };
    let (_, sample) = dmqca_core::phantom::generate_sample(&PhantomConfig::desk(), 99).unwrap();
    let no_sa_cfg = AblationConfig::from_name("Ours-SelfAtt").unwrap();
    let mut no_sa = DmqcaModel::new(&slim, &no_sa_cfg, 7).unwrap();
    let mut full = DmqcaModel::new(&slim, &AblationConfig::full(), 8).unwrap();
    for name in no_sa.param_names() {
        full.set_param(&name, no_sa.param_value(&name).unwrap().clone())
            .unwrap();
    }
    // gamma parameters are zero-initialized; assert rather than assume
    let gammas_zero = full
        .param_names()
        .iter()
        .filter(|n| n.ends_with("gamma"))
        .all(|n| full.param_value(n).unwrap().data().iter().all(|&v| v == 0.0));
    let a = no_sa.predict(&sample).unwrap();
    let b = full.predict(&sample).unwrap();
    let ablation_exact = a.data() == b.data();

    verdict(
        3,
        &format!(
            "gamma-identity {gamma_identity}, zero-residual identity {residual_identity}, gamma init zero {gammas_zero}, Ours-SelfAtt == gamma-0 {ablation_exact}"
        ),
        gamma_identity && residual_identity && gammas_zero && ablation_exact,
    );
}

// ── 4: RVD formula ───────────────────────────────────────────────────

#[test]
fn acceptance_4_rvd_formula() {
    let symmetric = compute_rvd(3.3, 3.3, 1.2, 7.7).unwrap() == 3.3;
    let weighted = (compute_rvd(2.0, 4.0, 1.0, 3.0).unwrap() - 2.5).abs() < 1e-12;
    // formula check on random draws against a direct evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut formula = true;
    for _ in 0..50 {
        let (a, b) = (rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
        let (l1, l2) = (rng.gen_range(0.1..12.0), rng.gen_range(0.1..12.0));
        let v = compute_rvd(a, b, l1, l2).unwrap();
        if (v - (b * l1 + a * l2) / (l1 + l2)).abs() > 1e-12 {
            formula = false;
        }
    }
    verdict(
        4,
        &format!("symmetric {symmetric}, (2,4,1,3)->2.5 {weighted}, 50 random draws match {formula}"),
        symmetric && weighted && formula,
    );
}

// ── 5: overfit test ──────────────────────────────────────────────────

#[test]
fn acceptance_5_overfit() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(4, 7, &PhantomConfig::desk(), dir.path()).unwrap();
    let (_, samples) = load_dataset(dir.path()).unwrap();
    let train_cfg = TrainConfig {
        epochs: 600, // batch 4 of 4 samples: one Adam step per epoch
        batch_size: 4,
        seed: 1,
        initial_lr: 3e-3,
        lr_decay: 0.995,
        lambda_qca: 0.0,
        normalize_labels: true,
        ..TrainConfig::default()
    };
    let mut model = DmqcaModel::new(&slim_model(), &AblationConfig::full(), 1).unwrap();
    let traj = train_model(&mut model, &samples, &train_cfg).unwrap();
    let (first, last) = (traj[0], *traj.last().unwrap());
    let ratio = last / first;
    let elapsed = started.elapsed();
    verdict(
        5,
        &format!(
            "{} steps: loss {first:.4} -> {last:.4} (ratio {ratio:.4} < 0.05), {elapsed:.0?} (< 15 min)"
        , traj.len()),
        ratio < 0.05 && elapsed.as_secs() < 900,
    );
}

// ── 6: learnability vs constant-mean baseline ────────────────────────

#[test]
fn acceptance_6_learnability() {
    let started = std::time::Instant::now();
    let ours = ours_report();
    let ratio = ours.overall_mae / ours.baseline_mae;
    let elapsed = started.elapsed();
    verdict(
        6,
        &format!(
            "held-out MAE {:.4} vs baseline {:.4} (ratio {ratio:.3} <= 0.60), {elapsed:.0?} (< 2 h)",
            ours.overall_mae, ours.baseline_mae
        ),
        ratio <= 0.60 && elapsed.as_secs() < 7200,
    );
}

// ── 7: ablation ordering sanity ──────────────────────────────────────

#[test]
fn acceptance_7_ablation_ordering() {
    let ours = ours_report();
    let key = benchmark_report("Key");
    let samples = benchmark_samples();
    // label scale: mean over indices of the label range in the benchmark
    let k = 6;
    let mut scale = 0.0;
    for j in 0..k {
        let vals: Vec<f64> = samples.iter().map(|s| s.label.data()[j]).collect();
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        scale += (hi - lo) / k as f64;
    }
    let margin = 0.05 * scale;
    verdict(
        7,
        &format!(
            "Ours MAE {:.4} <= Key MAE {:.4} + 5% label scale ({margin:.4})",
            ours.overall_mae, key.overall_mae
        ),
        ours.overall_mae <= key.overall_mae + margin,
    );
}

// ── 8: metrics properties ────────────────────────────────────────────

#[test]
fn acceptance_8_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);

    // Pearson affine invariance
    let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let r = pearson(&xs, &ys).unwrap();
    let xs2: Vec<f64> = xs.iter().map(|x| 4.2 * x - 1.3).collect();
    let affine = (pearson(&xs2, &ys).unwrap() - r).abs() < 1e-12;

    // Bland-Altman coverage on seeded Gaussian diffs
    let n = 10_000;
    let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
    let preds: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            l + 0.4 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let (ba, pairs) = bland_altman(&preds, &labels).unwrap();
    let coverage = pairs
        .iter()
        .filter(|(_, d)| *d >= ba.loa_low && *d <= ba.loa_high)
        .count() as f64
        / n as f64;
    let ba_ok = (0.93..=0.97).contains(&coverage);

    // k-fold partition property
    let folds = kfold(100, 10, 3).unwrap();
    let mut seen = vec![false; 100];
    let mut partition = folds.len() == 10;
    for (train, test) in &folds {
        partition &= train.len() == 90 && test.len() == 10;
        for &i in test {
            partition &= !seen[i] && !train.contains(&i);
            seen[i] = true;
        }
    }
    partition &= seen.iter().all(|&s| s);

    verdict(
        8,
        &format!("affine invariance {affine}, BA coverage {coverage:.4} in [0.93, 0.97] {ba_ok}, kfold partition {partition}"),
        affine && ba_ok && partition,
    );
}

// ── 9: determinism ───────────────────────────────────────────────────

#[test]
fn acceptance_9_determinism() {
    let dir = tempfile::tempdir().unwrap();

    // datasets byte-identical
    let (da, db) = (dir.path().join("da"), dir.path().join("db"));
    let ma = generate_dataset(5, 19, &PhantomConfig::desk(), &da).unwrap();
    generate_dataset(5, 19, &PhantomConfig::desk(), &db).unwrap();
    let mut data_identical = true;
    for p in dmqca_core::phantom::dataset_paths(&da, &ma) {
        let rel = p.file_name().unwrap();
        data_identical &= std::fs::read(&p).unwrap() == std::fs::read(db.join(rel)).unwrap();
    }

    // checkpoints byte-identical at stored precision
    let (_, samples) = load_dataset(&da).unwrap();
    let slim = ModelConfig {
        filters: vec![2, 2, 3, 3, 4],
        feature_dim: 8,
        keyframe_channels: vec![2, 2, 2, 2, 2, 2],
        hidden_units: 8,
        ..ModelConfig::desk()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 23,
        ..TrainConfig::default()
    };
    let run_ckpt = |path: &std::path::Path| {
        let mut m = DmqcaModel::new(&slim, &AblationConfig::full(), 23).unwrap();
        train_model(&mut m, &samples, &train_cfg).unwrap();
        m.round_to_storage_precision();
        m.save_checkpoint(path).unwrap();
    };
    let (c1, c2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    run_ckpt(&c1);
    run_ckpt(&c2);
    let ckpt_identical = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap();

    // cross-validation reports identical
    let eval_cfg = EvalConfig { k_folds: 2, seed: 3 };
    let report = |_: usize| {
        let r = run_protocol(
            &samples,
            &slim,
            &AblationConfig::full(),
            "Ours",
            &train_cfg,
            &eval_cfg,
        )
        .unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let reports_identical = report(0) == report(1);

    verdict(
        9,
        &format!(
            "datasets {data_identical}, checkpoints {ckpt_identical}, reports {reports_identical}"
        ),
        data_identical && ckpt_identical && reports_identical,
    );
}
