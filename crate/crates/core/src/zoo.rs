//! Three small convolutional classifiers and their training machinery.
//!
//! The architectures trade depth against parameter count:
//!
//! | name      | weighted layers | parameters | dense parameters |
//! |-----------|-----------------|------------|------------------|
//! | convnet-S | 3               | 25,578     | 20,490           |
//! | convnet-M | 5               | 71,354     | 49,866           |
//! | convnet-L | 7               | 32,778     | 5,130            |
//!
//! convnet-L is the deepest yet has the fewest dense parameters, so
//! transfer experiments can separate depth effects from capacity effects.
//! All take 3x32x32 inputs and emit 10 logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seeds::{derive, fnv1a64, Rng};
use crate::styshapes::{stylize, DatasetBundle, Split, IMG_C, IMG_H, IMG_W, NUM_CLASSES};
use crate::tensor::{Graph, NodeId, Tensor};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"UAPW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Inference batch size used when chunking large prediction requests.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchName {
    ConvnetS,
    ConvnetM,
    ConvnetL,
}

impl ArchName {
    pub const ALL: [ArchName; 3] = [ArchName::ConvnetS, ArchName::ConvnetM, ArchName::ConvnetL];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::ConvnetS => "convnet-S",
            ArchName::ConvnetM => "convnet-M",
            ArchName::ConvnetL => "convnet-L",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convnet-S" => Ok(ArchName::ConvnetS),
            "convnet-M" => Ok(ArchName::ConvnetM),
            "convnet-L" => Ok(ArchName::ConvnetL),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for ArchName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which dataset recipe trained a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    In,
    Sin,
    SinIn,
    Sin2In,
    Other,
}

impl Regime {
    pub const TRAINABLE: [Regime; 4] = [Regime::In, Regime::Sin, Regime::SinIn, Regime::Sin2In];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::In => "IN",
            Regime::Sin => "SIN",
            Regime::SinIn => "SIN+IN",
            Regime::Sin2In => "SIN+2IN",
            Regime::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "IN" => Ok(Regime::In),
            "SIN" => Ok(Regime::Sin),
            "SIN+IN" => Ok(Regime::SinIn),
            "SIN+2IN" => Ok(Regime::Sin2In),
            "other" => Ok(Regime::Other),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Regime::In => 0,
            Regime::Sin => 1,
            Regime::SinIn => 2,
            Regime::Sin2In => 3,
            Regime::Other => 4,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of the frozen layer table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { in_c: usize, out_c: usize },
    Relu,
    MaxPool2x2,
    Dense { in_f: usize, out_f: usize },
}

/// A named architecture: the frozen layer table plus input geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: ArchName,
    pub layers: Vec<LayerSpec>,
    pub input: [usize; 3],
    pub classes: usize,
}

impl ArchSpec {
    /// The frozen table for a named architecture. All convolutions are
    /// 3x3, stride 1, pad 1.
    pub fn for_name(name: ArchName) -> ArchSpec {
        use LayerSpec::*;
        let layers = match name {
            ArchName::ConvnetS => vec![
                Conv { in_c: 3, out_c: 16 },
                Relu,
                MaxPool2x2,
                Conv { in_c: 16, out_c: 32 },
                Relu,
                MaxPool2x2,
                Dense { in_f: 32 * 8 * 8, out_f: 10 },
            ],
            ArchName::ConvnetM => vec![
                Conv { in_c: 3, out_c: 24 },
                Relu,
                MaxPool2x2,
                Conv { in_c: 24, out_c: 32 },
                Relu,
                MaxPool2x2,
                Conv { in_c: 32, out_c: 48 },
                Relu,
                MaxPool2x2,
                Dense { in_f: 48 * 4 * 4, out_f: 64 },
                Relu,
                Dense { in_f: 64, out_f: 10 },
            ],
            ArchName::ConvnetL => vec![
                Conv { in_c: 3, out_c: 16 },
                Relu,
                Conv { in_c: 16, out_c: 16 },
                Relu,
                MaxPool2x2,
                Conv { in_c: 16, out_c: 24 },
                Relu,
                Conv { in_c: 24, out_c: 24 },
                Relu,
                MaxPool2x2,
                Conv { in_c: 24, out_c: 32 },
                Relu,
                Conv { in_c: 32, out_c: 32 },
                Relu,
                MaxPool2x2,
                Dense { in_f: 32 * 4 * 4, out_f: 10 },
            ],
        };
        ArchSpec {
            name,
            layers,
            input: [IMG_C, IMG_H, IMG_W],
            classes: NUM_CLASSES,
        }
    }

    /// Conv + dense layer count (the depth measure in the docs table).
    pub fn weighted_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
            .count()
    }

    /// Expected parameter tensors as (name, shape) in forward order.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut table = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { in_c, out_c } => {
                    table.push((format!("conv{i}.w"), vec![*out_c, *in_c, 3, 3]));
                    table.push((format!("conv{i}.b"), vec![*out_c]));
                }
                LayerSpec::Dense { in_f, out_f } => {
                    table.push((format!("dense{i}.w"), vec![*in_f, *out_f]));
                    table.push((format!("dense{i}.b"), vec![*out_f]));
                }
                _ => {}
            }
        }
        table
    }

    pub fn parameter_count(&self) -> usize {
        self.param_table()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    pub fn dense_parameter_count(&self) -> usize {
        self.param_table()
            .iter()
            .filter(|(name, _)| name.starts_with("dense"))
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// A parameter tensor with its stable name.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// A (possibly trained) classifier: architecture, parameters, regime tag.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    arch: ArchSpec,
    params: Vec<NamedParam>,
    regime: Regime,
    train_seed: u64,
}

/// Training hyperparameters. Plain SGD with momentum, no augmentation,
/// no weight decay; the shuffle order each epoch derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("train: epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("train: batch_size must be >= 1"));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::invalid("train: learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train: momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_train_loss: f32,
    pub test_accuracy: f64,
    pub steps: usize,
}

/// Initialize a model with He-style fan-in uniform weights and zero
/// biases. The same `(arch, seed)` pair always yields identical bits.
pub fn build_model(name: ArchName, seed: u64) -> ModelHandle {
    let arch = ArchSpec::for_name(name);
    let params = arch
        .param_table()
        .into_iter()
        .enumerate()
        .map(|(idx, (pname, shape))| {
            let numel: usize = shape.iter().product();
            let data = if pname.ends_with(".b") {
                vec![0.0f32; numel]
            } else {
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    2 => shape[0],
                    _ => numel,
                };
                let limit = (6.0 / fan_in as f32).sqrt();
                let mut rng = Rng::new(derive(seed, "init-param", &[idx as u64]));
                (0..numel).map(|_| rng.uniform(-limit, limit)).collect()
            };
            NamedParam {
                name: pname,
                tensor: Tensor::new(shape, data).expect("param shape"),
            }
        })
        .collect();
    ModelHandle {
        arch,
        params,
        regime: Regime::Other,
        train_seed: seed,
    }
}

/// A forward pass recorded on a graph, with handles for the pieces a
/// caller differentiates against.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

impl ModelHandle {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn set_regime(&mut self, regime: Regime) {
        self.regime = regime;
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn set_train_seed(&mut self, seed: u64) {
        self.train_seed = seed;
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    /// Stable fingerprint of all parameter bytes.
    pub fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Identity string used in reports: `convnet-M/SIN+IN`.
    pub fn id(&self) -> String {
        format!("{}/{}", self.arch.name, self.regime)
    }

    /// Record a forward pass over `images` ([n,3,32,32]) on a fresh graph.
    pub fn forward(&self, images: &Tensor, param_grads: bool, input_grad: bool) -> Result<ForwardPass> {
        let expected = [self.arch.input[0], self.arch.input[1], self.arch.input[2]];
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![0, expected[0], expected[1], expected[2]],
            });
        }
        let mut graph = Graph::new();
        let input = graph.leaf(images.clone(), input_grad)?;
        let (logits, params) = self.forward_on_graph(&mut graph, input, param_grads)?;
        Ok(ForwardPass {
            graph,
            input,
            logits,
            params,
        })
    }

    /// Record the network on an existing graph, starting from `input`.
    /// Useful when the caller owns the graph (gradient checks).
    pub fn forward_on_graph(
        &self,
        graph: &mut Graph,
        input: NodeId,
        param_grads: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_nodes.push(graph.leaf(p.tensor.clone(), param_grads)?);
        }
        // Center pixels around zero before the first layer; a constant
        // shift, so input gradients are unaffected.
        let shift = graph.leaf(
            Tensor::filled(graph.value(input).shape().to_vec(), -0.5),
            false,
        )?;
        let mut cursor = graph.add(input, shift)?;
        let mut param_ix = 0usize;
        for layer in &self.arch.layers {
            cursor = match layer {
                LayerSpec::Conv { .. } => {
                    let w = param_nodes[param_ix];
                    let b = param_nodes[param_ix + 1];
                    param_ix += 2;
                    graph.conv2d(cursor, w, Some(b), 1, 1)?
                }
                LayerSpec::Dense { .. } => {
                    let w = param_nodes[param_ix];
                    let b = param_nodes[param_ix + 1];
                    param_ix += 2;
                    graph.dense(cursor, w, Some(b))?
                }
                LayerSpec::Relu => graph.relu(cursor)?,
                LayerSpec::MaxPool2x2 => graph.maxpool2x2(cursor)?,
            };
        }
        Ok((cursor, param_nodes))
    }

    /// Logits without any gradient tracking.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let pass = self.forward(images, false, false)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// Argmax class per image, chunked to bound peak memory.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let elems = images.numel() / n.max(1);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, self.arch.input[0], self.arch.input[1], self.arch.input[2]],
                images.data()[start * elems..end * elems].to_vec(),
            )?;
            let logits = self.logits(&chunk)?;
            let k = self.arch.classes;
            for row in logits.data().chunks(k) {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Softmax probabilities per image, shape [n, classes].
    pub fn probabilities(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let elems = images.numel() / n.max(1);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, self.arch.input[0], self.arch.input[1], self.arch.input[2]],
                images.data()[start * elems..end * elems].to_vec(),
            )?;
            let logits = self.logits(&chunk)?;
            for row in logits.data().chunks(self.arch.classes) {
                let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - maxv).exp()).collect();
                let denom: f64 = exps.iter().sum();
                out.push(exps.into_iter().map(|e| e / denom).collect());
            }
        }
        Ok(out)
    }
}

/// Rescale threshold for the global gradient norm. A handful of outsized
/// early steps can kill every relu in the first layer and flatline
/// training; clipping removes that failure mode without affecting
/// determinism.
const GRAD_CLIP_NORM: f64 = 5.0;

/// Mini-batch SGD with momentum on softmax cross-entropy, gradients
/// clipped to a global norm of 5. Deterministic for fixed
/// `(model, data, cfg)`; aborts with the step index if the loss goes NaN.
pub fn train(model: &mut ModelHandle, data: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let train_ix = data.split_indices(Split::Train);
    if train_ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "train",
            split: "train".into(),
        });
    }
    let k = model.arch.classes;
    if let Some(&bad) = train_ix.iter().find(|&&i| data.label(i) as usize >= k) {
        return Err(Error::invalid(format!(
            "train: label {} out of range [0, {k})",
            data.label(bad)
        )));
    }

    let mut velocity: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|p| vec![0.0f32; p.tensor.numel()])
        .collect();
    let mut order = train_ix;
    let mut final_loss = f32::NAN;
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = Rng::new(derive(cfg.seed, "shuffle", &[epoch as u64]));
        rng.shuffle(&mut order);
        for batch_ix in order.chunks(cfg.batch_size) {
            let images = data.batch(batch_ix);
            let labels = data.labels_at(batch_ix);
            let mut pass = model.forward(&images, true, false)?;
            let loss = pass.graph.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = pass.graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { step: steps });
            }
            pass.graph.backward(loss)?;
            let mut norm_sq = 0.0f64;
            for node in &pass.params {
                let grad = pass
                    .graph
                    .grad(*node)
                    .expect("trained parameter must receive a gradient");
                for &g in grad {
                    norm_sq += g as f64 * g as f64;
                }
            }
            let clip = if norm_sq.sqrt() > GRAD_CLIP_NORM {
                (GRAD_CLIP_NORM / norm_sq.sqrt()) as f32
            } else {
                1.0
            };
            for (pi, node) in pass.params.iter().enumerate() {
                let grad = pass.graph.grad(*node).expect("gradient present");
                let vel = &mut velocity[pi];
                let pdata = model.params[pi].tensor.data_mut();
                for j in 0..pdata.len() {
                    vel[j] = cfg.momentum * vel[j] + clip * grad[j];
                    pdata[j] -= cfg.learning_rate * vel[j];
                }
            }
            final_loss = loss_value;
            steps += 1;
        }
    }

    model.train_seed = cfg.seed;
    let test_ix = data.split_indices(Split::Test);
    let test_accuracy = if test_ix.is_empty() {
        0.0
    } else {
        let preds = model.predict(&data.batch(&test_ix))?;
        let hits = preds
            .iter()
            .zip(test_ix.iter())
            .filter(|&(&p, &i)| p == data.label(i) as usize)
            .count();
        hits as f64 / test_ix.len() as f64
    };

    Ok(TrainReport {
        final_train_loss: final_loss,
        test_accuracy,
        steps,
    })
}

/// Train a fresh model under one of the four regimes.
///
/// The stylized twin of `base` is derived from the *bundle* seed, so every
/// regime sees the same stylized dataset. SIN+IN interleaves base and
/// stylized images 1:1; SIN+2IN then fine-tunes on base for half the
/// epochs at a tenth of the learning rate.
pub fn train_regime(
    arch: ArchName,
    regime: Regime,
    base: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(ModelHandle, TrainReport)> {
    cfg.validate()?;
    if base.is_stylized() {
        return Err(Error::invalid("train_regime: base bundle must be unstylized"));
    }
    let init_seed = derive(cfg.seed, "init", &[regime.tag()]);
    let mut model = build_model(arch, init_seed);

    let report = match regime {
        Regime::In => train(&mut model, base, cfg)?,
        Regime::Sin => {
            let sin = stylize(base, derive(base.seed(), "stylize", &[]))?;
            train(&mut model, &sin, cfg)?
        }
        Regime::SinIn => {
            let sin = stylize(base, derive(base.seed(), "stylize", &[]))?;
            let union = interleave_union(base, &sin)?;
            train(&mut model, &union, cfg)?
        }
        Regime::Sin2In => {
            let sin = stylize(base, derive(base.seed(), "stylize", &[]))?;
            let union = interleave_union(base, &sin)?;
            train(&mut model, &union, cfg)?;
            let fine_epochs = cfg.epochs / 2;
            if fine_epochs > 0 {
                let fine_cfg = TrainConfig {
                    epochs: fine_epochs,
                    learning_rate: cfg.learning_rate / 10.0,
                    seed: derive(cfg.seed, "finetune", &[]),
                    ..cfg.clone()
                };
                train(&mut model, base, &fine_cfg)?
            } else {
                // Degenerate epochs=1 case: no fine-tune pass.
                TrainReport {
                    final_train_loss: f32::NAN,
                    test_accuracy: 0.0,
                    steps: 0,
                }
            }
        }
        Regime::Other => return Err(Error::invalid("train_regime: regime must be one of the four recipes")),
    };

    model.regime = regime;
    Ok((model, report))
}

/// Union bundle for SIN+IN: train images interleaved base/stylized 1:1,
/// test split taken from the unstylized base.
fn interleave_union(base: &DatasetBundle, sin: &DatasetBundle) -> Result<DatasetBundle> {
    let base_train = base.split_indices(Split::Train);
    let sin_train = sin.split_indices(Split::Train);
    let base_test = base.split_indices(Split::Test);

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    let mut splits = Vec::new();
    let mut push = |bundle: &DatasetBundle, i: usize, split: Split| {
        images.extend_from_slice(bundle.image(i));
        labels.push(bundle.label(i));
        tags.push(bundle.texture_tag(i));
        splits.push(split);
    };
    for (bi, si) in base_train.iter().zip(&sin_train) {
        push(base, *bi, Split::Train);
        push(sin, *si, Split::Train);
    }
    for &ti in &base_test {
        push(base, ti, Split::Test);
    }
    DatasetBundle::from_parts(images, labels, tags, splits, false, base.seed(), Vec::new())
}

// ── Persistence ─────────────────────────────────────────────────────

/// Serialize parameters: magic, version, arch name, tensor count, then
/// per tensor `name, u32 rank, u32 extents..., little-endian f32 data`.
pub fn save_weights(model: &ModelHandle) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(WEIGHTS_MAGIC);
    w.u32(WEIGHTS_VERSION);
    w.string(model.arch.name.as_str());
    w.u32(model.params.len() as u32);
    for p in &model.params {
        w.string(&p.name);
        w.u32(p.tensor.shape().len() as u32);
        for &e in p.tensor.shape() {
            w.u32(e as u32);
        }
        w.f32_slice(p.tensor.data());
    }
    w.into_bytes()
}

/// Parse a weight stream. The tensor table must match the declared
/// architecture's frozen table exactly (names, order, shapes). The
/// regime tag is not part of the payload; callers restore it from
/// provenance sidecars via [`ModelHandle::set_regime`].
pub fn load_weights(bytes: &[u8]) -> Result<ModelHandle> {
    let mut r = ByteReader::new(bytes, "weights");
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::BadVersion {
            format: "weights",
            expected: WEIGHTS_VERSION,
            found: version,
        });
    }
    let arch_name = ArchName::parse(&r.string()?)?;
    let arch = ArchSpec::for_name(arch_name);
    let expected = arch.param_table();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::ShapeTableMismatch(format!(
            "{arch_name} expects {} tensors, stream has {count}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (exp_name, exp_shape) in &expected {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if &name != exp_name || &shape != exp_shape {
            return Err(Error::ShapeTableMismatch(format!(
                "expected {exp_name} {exp_shape:?}, found {name} {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let data = r.f32_vec(numel)?;
        params.push(NamedParam {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    r.expect_end()?;
    Ok(ModelHandle {
        arch,
        params,
        regime: Regime::Other,
        train_seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::styshapes::{generate_dataset, RenderSpec, IMG_ELEMS};
    use crate::tensor::{grad_check, GradCheckConfig};

    #[test]
    fn build_is_seed_deterministic() {
        let a = build_model(ArchName::ConvnetS, 7);
        let b = build_model(ArchName::ConvnetS, 7);
        assert_eq!(a.param_checksum(), b.param_checksum());
        let c = build_model(ArchName::ConvnetM, 7);
        let d = build_model(ArchName::ConvnetM, 8);
        assert_ne!(c.param_checksum(), d.param_checksum());
    }

    /// Closed-form parameter counts recomputed from the frozen layer
    /// table in the module docs.
    #[test]
    fn parameter_counts_match_closed_form() {
        let s = ArchSpec::for_name(ArchName::ConvnetS);
        let m = ArchSpec::for_name(ArchName::ConvnetM);
        let l = ArchSpec::for_name(ArchName::ConvnetL);

        let s_expected = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (2048 * 10 + 10);
        assert_eq!(s.parameter_count(), s_expected);
        assert_eq!(s_expected, 25_578);

        let m_expected =
            (24 * 3 * 9 + 24) + (32 * 24 * 9 + 32) + (48 * 32 * 9 + 48) + (768 * 64 + 64) + (64 * 10 + 10);
        assert_eq!(m.parameter_count(), m_expected);
        assert_eq!(m_expected, 71_354);

        let l_expected = (16 * 3 * 9 + 16)
            + (16 * 16 * 9 + 16)
            + (24 * 16 * 9 + 24)
            + (24 * 24 * 9 + 24)
            + (32 * 24 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (512 * 10 + 10);
        assert_eq!(l.parameter_count(), l_expected);
        assert_eq!(l_expected, 32_778);

        // Depth strictly increases; totals are non-monotone; the deepest
        // net has the fewest dense parameters.
        assert!(s.weighted_layers() < m.weighted_layers());
        assert!(m.weighted_layers() < l.weighted_layers());
        assert!(m.parameter_count() > s.parameter_count());
        assert!(l.parameter_count() < m.parameter_count());
        assert!(l.dense_parameter_count() < s.dense_parameter_count());
        assert!(l.dense_parameter_count() < m.dense_parameter_count());
    }

    #[test]
    fn weights_roundtrip_and_malformed_streams() {
        let model = build_model(ArchName::ConvnetS, 3);
        let bytes = save_weights(&model);
        let loaded = load_weights(&bytes).unwrap();
        assert_eq!(save_weights(&loaded), bytes);
        assert_eq!(loaded.param_checksum(), model.param_checksum());
        assert_eq!(loaded.regime(), Regime::Other);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(load_weights(&bad_magic), Err(Error::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(load_weights(&bad_version), Err(Error::BadVersion { .. })));

        assert!(matches!(
            load_weights(&bytes[..bytes.len() - 8]),
            Err(Error::Truncated { .. })
        ));

        // Same tensors, relabeled as convnet-M: a shape-table mismatch.
        let mut relabeled = ByteWriter::new();
        relabeled.magic(WEIGHTS_MAGIC);
        relabeled.u32(WEIGHTS_VERSION);
        relabeled.string("convnet-M");
        let tail = &bytes[4 + 4 + 4 + "convnet-S".len()..];
        relabeled.bytes(tail);
        assert!(matches!(
            load_weights(&relabeled.into_bytes()),
            Err(Error::ShapeTableMismatch(_))
        ));
    }

    #[test]
    fn train_rejects_bad_preconditions() {
        let data = generate_dataset(&RenderSpec::default(), 20, 10, 1).unwrap();
        let mut model = build_model(ArchName::ConvnetS, 1);
        let bad = TrainConfig {
            epochs: 0,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
        };
        assert!(train(&mut model, &data, &bad).is_err());

        // A bundle whose train split is empty.
        let empty = DatasetBundle::from_parts(
            data.image(0).to_vec(),
            vec![0],
            vec![0],
            vec![Split::Test],
            false,
            0,
            Vec::new(),
        )
        .unwrap();
        let ok_cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
        };
        assert!(matches!(
            train(&mut model, &empty, &ok_cfg),
            Err(Error::EmptySplit { .. })
        ));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = generate_dataset(&RenderSpec::default(), 60, 20, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 12,
        };
        let run = || {
            let mut m = build_model(ArchName::ConvnetS, 5);
            train(&mut m, &data, &cfg).unwrap();
            m.param_checksum()
        };
        assert_eq!(run(), run());
    }

    /// Two half-field classes with a wide margin. A perceptron (the
    /// linear-probe oracle) must separate them exactly; the convnet must
    /// then reach perfect held-out accuracy.
    #[test]
    fn separable_toy_set_trains_to_perfect_accuracy() {
        let mut rng = Rng::new(77);
        let n_train = 50usize;
        let n_test = 16usize;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for i in 0..n_train + n_test {
            let class = (i % 2) as u16;
            for c in 0..IMG_C {
                for y in 0..IMG_H {
                    for x in 0..IMG_W {
                        let bright = if class == 0 { x < IMG_W / 2 } else { x >= IMG_W / 2 };
                        let base = if bright { 0.8 } else { 0.2 };
                        let _ = (c, y);
                        images.push(base + rng.uniform(-0.05, 0.05));
                    }
                }
            }
            labels.push(class);
            splits.push(if i < n_train { Split::Train } else { Split::Test });
        }
        let data = DatasetBundle::from_parts(
            images,
            labels.clone(),
            labels,
            splits,
            false,
            0,
            Vec::new(),
        )
        .unwrap();

        // Perceptron oracle: converges to zero mistakes iff separable.
        let mut w = vec![0.0f64; IMG_ELEMS + 1];
        let mut separable = false;
        for _ in 0..200 {
            let mut mistakes = 0;
            for i in 0..data.len() {
                let y = if data.label(i) == 0 { -1.0 } else { 1.0 };
                let mut act = w[IMG_ELEMS];
                for (j, &v) in data.image(i).iter().enumerate() {
                    act += w[j] * v as f64;
                }
                if y * act <= 0.0 {
                    for (j, &v) in data.image(i).iter().enumerate() {
                        w[j] += y * v as f64;
                    }
                    w[IMG_ELEMS] += y;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                separable = true;
                break;
            }
        }
        assert!(separable, "oracle: toy set must be linearly separable");

        let mut model = build_model(ArchName::ConvnetS, 3);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 3,
        };
        let report = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(report.test_accuracy, 1.0, "loss {}", report.final_train_loss);
    }

    #[test]
    fn regimes_compose_the_right_streams() {
        let base = generate_dataset(&RenderSpec::default(), 40, 20, 6).unwrap();
        let sin = stylize(&base, derive(base.seed(), "stylize", &[])).unwrap();
        let union = interleave_union(&base, &sin).unwrap();
        let train_ix = union.split_indices(Split::Train);
        let (mut plain, mut styl) = (0usize, 0usize);
        for &i in &train_ix {
            if union.texture_tag(i) == union.label(i) {
                plain += 1;
            } else {
                styl += 1;
            }
        }
        assert!(plain.abs_diff(styl) <= 1, "{plain} vs {styl}");
        // Union test split is the unstylized base test split.
        for &i in &union.split_indices(Split::Test) {
            assert_eq!(union.texture_tag(i), union.label(i));
        }

        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 2,
        };
        let (m, _) = train_regime(ArchName::ConvnetS, Regime::In, &base, &cfg).unwrap();
        assert_eq!(m.regime(), Regime::In);
        assert!(train_regime(ArchName::ConvnetS, Regime::In, &sin, &cfg).is_err());
    }

    /// Full convnet-S loss against the production gradient checker.
    #[test]
    fn convnet_s_loss_passes_grad_check() {
        let model = build_model(ArchName::ConvnetS, 11);
        let image = crate::styshapes::render_image(&RenderSpec::default(), 2, 2, 5)
            .unwrap()
            .reshaped(vec![1, IMG_C, IMG_H, IMG_W])
            .unwrap();
        let cfg = GradCheckConfig {
            per_tensor_samples: Some(96),
            seed: 4,
            ..GradCheckConfig::default()
        };
        let report = grad_check(
            |g, ids| {
                let (logits, _) = model.forward_on_graph(g, ids[0], false)?;
                g.softmax_cross_entropy(logits, &[3])
            },
            &[image],
            &cfg,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
    }
}
