//! The assembled quantification model: two view encoders, the keyframe
//! encoder, and the regression head, plus the MAE + l2 loss, Adam training
//! and checkpoint I/O.

use crate::config::{AblationConfig, ModelConfig, TrainConfig};
use crate::encoders::{
    encode_keyframe, encode_view, KeyframeEncoderNodes, KeyframeEncoderParams,
    ResidualUnitNodes, ViewEncoderNodes, ViewEncoderParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::fan_in_uniform;
use crate::phantom::Sample;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub const INDEX_COUNT: usize = 6;
pub const INDEX_NAMES: [&str; 6] = ["RVD1", "RVD2", "RVD", "MLD", "LL1", "LL2"];

const CHECKPOINT_MAGIC: &[u8; 4] = b"DMQC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    id: NodeId,
    /// Included in the l2 regularization term (weights and context vectors,
    /// not biases or gamma).
    regularized: bool,
}

/// Per-index z-score statistics used when training on normalized labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelNorm {
    pub mean: [f64; INDEX_COUNT],
    pub sd: [f64; INDEX_COUNT],
}

impl LabelNorm {
    pub fn fit(labels: &[Tensor]) -> Self {
        let n = labels.len() as f64;
        let mut mean = [0.0; INDEX_COUNT];
        let mut sd = [0.0; INDEX_COUNT];
        for l in labels {
            for k in 0..INDEX_COUNT {
                mean[k] += l.data()[k] / n;
            }
        }
        for l in labels {
            for k in 0..INDEX_COUNT {
                let d = l.data()[k] - mean[k];
                sd[k] += d * d / n;
            }
        }
        for s in &mut sd {
            *s = s.sqrt().max(1e-9);
        }
        Self { mean, sd }
    }

    pub fn normalize(&self, label: &Tensor) -> Tensor {
        let data: Vec<f64> = (0..INDEX_COUNT)
            .map(|k| (label.data()[k] - self.mean[k]) / self.sd[k])
            .collect();
        Tensor::from_vec(data)
    }

    pub fn denormalize(&self, pred: &Tensor) -> Tensor {
        let data: Vec<f64> = (0..INDEX_COUNT)
            .map(|k| pred.data()[k] * self.sd[k] + self.mean[k])
            .collect();
        Tensor::from_vec(data)
    }
}

pub struct DmqcaModel {
    pub cfg: ModelConfig,
    pub ablation: AblationConfig,
    graph: Graph,
    main: Option<ViewEncoderNodes>,
    support: Option<ViewEncoderNodes>,
    keyframe: Option<KeyframeEncoderNodes>,
    head_w1: NodeId,
    head_b1: NodeId,
    head_wo: NodeId,
    head_bo: NodeId,
    registry: Vec<ParamEntry>,
    pub label_norm: Option<LabelNorm>,
}

impl DmqcaModel {
    pub fn new(cfg: &ModelConfig, ablation: &AblationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut registry = Vec::new();

        let bind_view = |g: &mut Graph,
                             registry: &mut Vec<ParamEntry>,
                             rng: &mut ChaCha8Rng,
                             prefix: &str|
         -> ViewEncoderNodes {
            let p = ViewEncoderParams::init(cfg, rng);
            let nodes = ViewEncoderNodes::bind(g, &p);
            for (i, &id) in nodes.kernels.iter().enumerate() {
                registry.push(ParamEntry {
                    name: format!("{prefix}.conv{i}.kernel"),
                    id,
                    regularized: true,
                });
            }
            for (i, &id) in nodes.biases.iter().enumerate() {
                registry.push(ParamEntry {
                    name: format!("{prefix}.conv{i}.bias"),
                    id,
                    regularized: false,
                });
            }
            if ablation.use_self_attention {
                for (suffix, id, reg) in [
                    ("wf", nodes.self_attn.wf, true),
                    ("wg", nodes.self_attn.wg, true),
                    ("wh", nodes.self_attn.wh, true),
                    ("gamma", nodes.self_attn.gamma, false),
                ] {
                    registry.push(ParamEntry {
                        name: format!("{prefix}.self_attn.{suffix}"),
                        id,
                        regularized: reg,
                    });
                }
            }
            if ablation.use_context_attention {
                for (level, ctx) in [("region_ctx", &nodes.region_ctx), ("frame_ctx", &nodes.frame_ctx)]
                {
                    for (suffix, id, reg) in
                        [("w", ctx.w, true), ("b", ctx.b, false), ("u", ctx.u, true)]
                    {
                        registry.push(ParamEntry {
                            name: format!("{prefix}.{level}.{suffix}"),
                            id,
                            regularized: reg,
                        });
                    }
                }
            }
            registry.push(ParamEntry {
                name: format!("{prefix}.proj.w"),
                id: nodes.proj_w,
                regularized: true,
            });
            registry.push(ParamEntry {
                name: format!("{prefix}.proj.b"),
                id: nodes.proj_b,
                regularized: false,
            });
            nodes
        };

        let main = ablation
            .use_main
            .then(|| bind_view(&mut g, &mut registry, &mut rng, "main"));
        let support = ablation
            .use_support
            .then(|| bind_view(&mut g, &mut registry, &mut rng, "support"));

        let keyframe = if ablation.use_keyframe {
            let p = KeyframeEncoderParams::init(cfg, &mut rng);
            let nodes = KeyframeEncoderNodes::bind(&mut g, &p);
            for (i, block) in nodes.blocks.iter().enumerate() {
                if let Some((w, b)) = block.lift {
                    registry.push(ParamEntry {
                        name: format!("keyframe.block{i}.lift.w"),
                        id: w,
                        regularized: true,
                    });
                    registry.push(ParamEntry {
                        name: format!("keyframe.block{i}.lift.b"),
                        id: b,
                        regularized: false,
                    });
                }
                for (uname, unit) in [("unit1", &block.unit1), ("unit2", &block.unit2)] {
                    let unit: &ResidualUnitNodes = unit;
                    for (suffix, id, reg) in [
                        ("conv1", unit.conv1, true),
                        ("bias1", unit.bias1, false),
                        ("conv2", unit.conv2, true),
                        ("bias2", unit.bias2, false),
                    ] {
                        registry.push(ParamEntry {
                            name: format!("keyframe.block{i}.{uname}.{suffix}"),
                            id,
                            regularized: reg,
                        });
                    }
                }
            }
            registry.push(ParamEntry {
                name: "keyframe.fc.w".into(),
                id: nodes.fc_w,
                regularized: true,
            });
            registry.push(ParamEntry {
                name: "keyframe.fc.b".into(),
                id: nodes.fc_b,
                regularized: false,
            });
            Some(nodes)
        } else {
            None
        };

        let in_width = ablation.branch_count() * cfg.feature_dim;
        let head_w1 = g.leaf(fan_in_uniform(
            &[cfg.hidden_units, in_width],
            in_width,
            &mut rng,
        ));
        let head_b1 = g.leaf(Tensor::zeros(&[cfg.hidden_units]));
        let head_wo = g.leaf(fan_in_uniform(
            &[INDEX_COUNT, cfg.hidden_units],
            cfg.hidden_units,
            &mut rng,
        ));
        let head_bo = g.leaf(Tensor::zeros(&[INDEX_COUNT]));
        for (name, id, reg) in [
            ("head.w1", head_w1, true),
            ("head.b1", head_b1, false),
            ("head.wo", head_wo, true),
            ("head.bo", head_bo, false),
        ] {
            registry.push(ParamEntry {
                name: name.into(),
                id,
                regularized: reg,
            });
        }

        g.mark_persistent();
        Ok(Self {
            cfg: cfg.clone(),
            ablation: *ablation,
            graph: g,
            main,
            support,
            keyframe,
            head_w1,
            head_b1,
            head_wo,
            head_bo,
            registry,
            label_norm: None,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.registry.iter().map(|e| e.name.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.registry
            .iter()
            .map(|e| self.graph.value(e.id).numel())
            .sum()
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.registry
            .iter()
            .find(|e| e.name == name)
            .map(|e| self.graph.value(e.id))
    }

    /// Gradient of the last backward pass for a named parameter.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor> {
        self.registry
            .iter()
            .find(|e| e.name == name)
            .map(|e| self.graph.grad(e.id))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .registry
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.id)
            .ok_or_else(|| Error::Argument(format!("no parameter named {name}")))?;
        self.graph.set_value(id, value)
    }

    pub fn zero_all_params(&mut self) {
        for e in &self.registry {
            self.graph.value_mut(e.id).fill(0.0);
        }
    }

    /// Sum of squared entries over the regularized weight set.
    pub fn weights_sumsq(&self) -> f64 {
        self.registry
            .iter()
            .filter(|e| e.regularized)
            .map(|e| self.graph.value(e.id).data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Append the forward pass for one sample to the current tape.
    fn build_prediction(&mut self, sample: &Sample) -> Result<NodeId> {
        let g = &mut self.graph;
        let mut features = Vec::new();
        if let Some(nodes) = self.main.clone() {
            let frames = g.leaf(sample.main.clone());
            features.push(encode_view(
                g,
                frames,
                &nodes,
                &self.cfg,
                self.ablation.use_self_attention,
                self.ablation.use_context_attention,
            )?);
        }
        if let Some(nodes) = self.support.clone() {
            let frames = g.leaf(sample.support.clone());
            features.push(encode_view(
                g,
                frames,
                &nodes,
                &self.cfg,
                self.ablation.use_self_attention,
                self.ablation.use_context_attention,
            )?);
        }
        if let Some(nodes) = self.keyframe.clone() {
            let image = g.leaf(sample.keyframe.clone());
            features.push(encode_keyframe(g, image, &nodes, &self.cfg)?);
        }
        let joint = if features.len() == 1 {
            features[0]
        } else {
            g.concat(&features, 0)?
        };
        let h = g.matvec(self.head_w1, joint)?;
        let h = g.add(h, self.head_b1)?;
        let h = g.leaky_relu(h, self.cfg.leaky_slope);
        let o = g.matvec(self.head_wo, h)?;
        let o = g.add(o, self.head_bo)?;
        Ok(g.leaky_relu(o, self.cfg.leaky_slope))
    }

    /// Predict the six indices in millimeters.
    pub fn predict(&mut self, sample: &Sample) -> Result<Tensor> {
        self.graph.reset();
        let id = self.build_prediction(sample)?;
        let raw = self.graph.value(id).clone();
        Ok(match &self.label_norm {
            Some(norm) => norm.denormalize(&raw),
            None => raw,
        })
    }

    /// One optimization step over a batch. Returns the loss value
    /// (MAE data term plus l2 penalty).
    pub fn train_step(
        &mut self,
        batch: &[&Sample],
        opt: &mut Adam,
        lr: f64,
        lambda: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        self.graph.reset();
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let pred = self.build_prediction(sample)?;
            let label_t = match &self.label_norm {
                Some(norm) => norm.normalize(&sample.label),
                None => sample.label.clone(),
            };
            let label = self.graph.leaf(label_t);
            let diff = self.graph.sub(pred, label)?;
            let a = self.graph.abs(diff);
            terms.push(self.graph.sum(a));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = self.graph.add(total, t)?;
        }
        let mut loss = self
            .graph
            .scale(total, 1.0 / (INDEX_COUNT * batch.len()) as f64);
        if lambda > 0.0 {
            let reg_ids: Vec<NodeId> = self
                .registry
                .iter()
                .filter(|e| e.regularized)
                .map(|e| e.id)
                .collect();
            let mut reg_total: Option<NodeId> = None;
            for id in reg_ids {
                let sq = self.graph.sumsq(id);
                reg_total = Some(match reg_total {
                    Some(acc) => self.graph.add(acc, sq)?,
                    None => sq,
                });
            }
            if let Some(r) = reg_total {
                let scaled = self.graph.scale(r, lambda);
                loss = self.graph.add(loss, scaled)?;
            }
        }
        let loss_value = self.graph.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
        }
        self.graph.backward(loss)?;
        opt.step(&mut self.graph, &self.registry, lr);
        Ok(loss_value)
    }

    /// Evaluate the loss on a batch without updating parameters.
    pub fn eval_loss(&mut self, batch: &[&Sample], lambda: f64) -> Result<f64> {
        let mut data = 0.0;
        for sample in batch {
            let pred = self.predict(sample)?;
            let label = &sample.label;
            // predict() denormalizes, so compare in the training space
            let (p, l) = match &self.label_norm {
                Some(norm) => (norm.normalize(&pred), norm.normalize(label)),
                None => (pred.clone(), label.clone()),
            };
            for (a, b) in p.data().iter().zip(l.data()) {
                data += (a - b).abs();
            }
        }
        Ok(data / (INDEX_COUNT * batch.len()) as f64 + lambda * self.weights_sumsq())
    }

    // ── checkpointing ────────────────────────────────────────────────

    pub fn fingerprint(cfg: &ModelConfig, ablation: &AblationConfig) -> [u8; 32] {
        let canonical = serde_json::to_string(&(cfg, ablation)).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher.finalize().into()
    }

    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&Self::fingerprint(&self.cfg, &self.ablation));
        match &self.label_norm {
            Some(norm) => {
                buf.push(1);
                for v in norm.mean.iter().chain(norm.sd.iter()) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(self.registry.len() as u32).to_le_bytes());
        for e in &self.registry {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            let value = self.graph.value(e.id);
            buf.push(value.ndim() as u8);
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(
        path: P,
        cfg: &ModelConfig,
        ablation: &AblationConfig,
    ) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let read_exact = |r: &mut dyn Read, n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint("truncated or corrupt checkpoint".into()))?;
            Ok(b)
        };
        let magic = read_exact(&mut r, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let fp = read_exact(&mut r, 32)?;
        if fp != Self::fingerprint(cfg, ablation) {
            return Err(Error::Checkpoint(
                "config fingerprint mismatch: checkpoint was written for a different configuration"
                    .into(),
            ));
        }
        let mut model = Self::new(cfg, ablation, 0)?;
        let has_norm = read_exact(&mut r, 1)?[0];
        if has_norm == 1 {
            let raw = read_exact(&mut r, 12 * 8)?;
            let mut vals = [0.0f64; 12];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = f64::from_le_bytes(raw[i * 8..(i + 1) * 8].try_into().unwrap());
            }
            model.label_norm = Some(LabelNorm {
                mean: vals[..6].try_into().unwrap(),
                sd: vals[6..].try_into().unwrap(),
            });
        }
        let count = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap()) as usize;
        if count != model.registry.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint {count}, model {}",
                model.registry.len()
            )));
        }
        for i in 0..count {
            let name_len = u16::from_le_bytes(read_exact(&mut r, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(read_exact(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            if name != model.registry[i].name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch at {i}: {name} vs {}",
                    model.registry[i].name
                )));
            }
            let ndim = read_exact(&mut r, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap()) as usize);
            }
            let expected = model.graph.value(model.registry[i].id).shape();
            if shape != expected {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {shape:?} vs {expected:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = read_exact(&mut r, n * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let id = model.registry[i].id;
            model.graph.set_value(id, Tensor::new(shape, data)?)?;
        }
        Ok(model)
    }

    /// Round parameters to f32 storage precision in place, so that a
    /// forward pass matches a save/load round trip bitwise.
    pub fn round_to_storage_precision(&mut self) {
        for e in &self.registry {
            let id = e.id;
            for v in self.graph.value_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

// ── loss ─────────────────────────────────────────────────────────────

/// MAE over all indices and samples plus `lambda` times the summed squared
/// weights: L = (1/(d*N)) sum |pred - label| + lambda * weights_sumsq.
pub fn regression_loss(
    preds: &Tensor,
    labels: &Tensor,
    weights_sumsq: f64,
    lambda: f64,
) -> Result<f64> {
    if preds.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "loss shapes {:?} vs {:?}",
            preds.shape(),
            labels.shape()
        )));
    }
    if preds.has_nan() || labels.has_nan() {
        return Err(Error::Numeric("NaN in loss inputs".into()));
    }
    let data: f64 = preds
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, l)| (p - l).abs())
        .sum();
    Ok(data / preds.numel() as f64 + lambda * weights_sumsq)
}

// ── Adam ─────────────────────────────────────────────────────────────

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &DmqcaModel) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .registry
            .iter()
            .map(|e| model.graph.value(e.id).shape().to_vec())
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    fn step(&mut self, graph: &mut Graph, registry: &[ParamEntry], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in registry.iter().enumerate() {
            let grad = graph.grad(e.id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mv, vv), &gv) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(grad.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let value = graph.value_mut(e.id);
            for ((pv, &mv), &vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ── training loop ────────────────────────────────────────────────────

/// Train `model` on `samples`. Returns the per-epoch mean loss trajectory.
/// Deterministic given the config seed and sample order.
pub fn train_model(
    model: &mut DmqcaModel,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    if cfg.normalize_labels {
        let labels: Vec<Tensor> = samples.iter().map(|s| s.label.clone()).collect();
        model.label_norm = Some(LabelNorm::fit(&labels));
    }
    let mut opt = Adam::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.initial_lr * cfg.lr_decay.powi(epoch as i32);
        // Fisher-Yates with the run RNG; deterministic across platforms
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = model
                .train_step(&batch, &mut opt, lr, cfg.lambda_qca)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("training diverged at step {step}: {msg}"))
                    }
                    other => other,
                })?;
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        trajectory.push(epoch_loss / batches as f64);
    }
    Ok(trajectory)
}
