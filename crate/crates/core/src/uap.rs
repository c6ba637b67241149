//! Universal adversarial perturbation generation.
//!
//! A single δ is optimized over batches: per batch the loss gradient with
//! respect to δ is taken through the pixel clip, δ moves one sign step
//! (ascent for untargeted, descent toward the target class), and is then
//! projected back onto the ℓ∞ ball of radius ε/255. ε is quoted in 8-bit
//! units throughout; pixels live in [0,1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seeds::{derive, Rng};
use crate::styshapes::{DatasetBundle, Split, IMG_C, IMG_ELEMS, IMG_H, IMG_W};
use crate::tensor::Tensor;
use crate::zoo::{ModelHandle, Regime};

pub const PERTURBATION_MAGIC: [u8; 4] = *b"UAPP";
pub const PERTURBATION_VERSION: u32 = 1;

/// Slack on ball-membership checks, absorbing f32 rounding.
pub const BALL_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    Untargeted,
    Targeted(u16),
}

impl AttackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted(_) => "targeted",
        }
    }

    pub fn target(&self) -> Option<u16> {
        match self {
            AttackMode::Untargeted => None,
            AttackMode::Targeted(y) => Some(*y),
        }
    }
}

/// Attack hyperparameters. `step_size` is in the same units as δ
/// (pixel scale); [`AttackConfig::for_epsilon`] applies the frozen
/// default step rule (ε/255)/10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Ball radius in 8-bit units.
    pub epsilon: f32,
    /// Passes over the attack split.
    pub iterations: usize,
    pub batch_size: usize,
    /// Sign-step length in pixel units.
    pub step_size: f32,
    pub seed: u64,
}

impl AttackConfig {
    /// Frozen defaults: 10 passes, batches of 64, step (ε/255)/10.
    pub fn for_epsilon(epsilon: f32, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            iterations: 10,
            batch_size: 64,
            step_size: (epsilon / 255.0) / 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.epsilon.is_nan() {
            return Err(Error::invalid("attack: epsilon must be > 0"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("attack: iterations must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("attack: batch_size must be >= 1"));
        }
        if self.step_size <= 0.0 || self.step_size.is_nan() {
            return Err(Error::invalid("attack: step_size must be > 0"));
        }
        Ok(())
    }
}

/// Provenance of one generated perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub arch: String,
    pub regime: String,
}

/// A universal perturbation with full generation provenance. The payload
/// always satisfies `max|δ| <= ε/255 + 1e-6`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f32,
    pub mode: AttackMode,
    pub source: SourceModel,
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f32,
    pub seed: u64,
    /// Fooling rate (untargeted) or targeted fooling rate on the
    /// generation split.
    pub achieved: f64,
    /// Clean frequency of the target class on the generation split
    /// (targeted mode only); the fallback guarantee is achieved >= this.
    pub clean_target_freq: Option<f64>,
    /// True when the optimizer fell back to δ = 0 because it scored below
    /// the zero perturbation.
    pub fell_back_to_zero: bool,
}

impl Perturbation {
    /// Max |δ| in pixel units.
    pub fn linf_norm(&self) -> f32 {
        self.delta.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn within_ball(&self) -> bool {
        self.linf_norm() <= self.epsilon / 255.0 + BALL_TOLERANCE
    }

    /// Stable id: fnv-64 of the serialized stream, hex.
    pub fn id(&self) -> String {
        format!("{:016x}", crate::seeds::fnv1a64(&save_perturbation(self)))
    }
}

/// clip(x + δ, 0, 1) elementwise over a [n,3,32,32] batch.
pub fn apply_perturbation(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != delta.shape()[..] {
        return Err(Error::ShapeMismatch {
            op: "apply_perturbation",
            lhs: shape.to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let d = delta.data();
    let out: Vec<f32> = images
        .data()
        .chunks(d.len())
        .flat_map(|img| {
            img.iter()
                .zip(d)
                .map(|(&x, &dv)| (x + dv).clamp(0.0, 1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(shape.to_vec(), out)
}

/// Clamp every element to [-ε/255, +ε/255]. Idempotent.
pub fn project_linf(delta: &Tensor, epsilon: f32) -> Result<Tensor> {
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(Error::invalid("project_linf: epsilon must be > 0"));
    }
    let bound = epsilon / 255.0;
    let data = delta.data().iter().map(|v| v.clamp(-bound, bound)).collect();
    Tensor::new(delta.shape().to_vec(), data)
}

/// Uniform ±ε/255 sign noise; the control baseline for fooling rates.
pub fn random_noise_baseline(epsilon: f32, seed: u64) -> Result<Perturbation> {
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(Error::invalid("random_noise_baseline: epsilon must be > 0"));
    }
    let bound = epsilon / 255.0;
    let mut rng = Rng::new(derive(seed, "noise", &[]));
    let data: Vec<f32> = (0..IMG_ELEMS)
        .map(|_| if rng.bool() { bound } else { -bound })
        .collect();
    Ok(Perturbation {
        delta: Tensor::new(vec![IMG_C, IMG_H, IMG_W], data)?,
        epsilon,
        mode: AttackMode::Untargeted,
        source: SourceModel {
            arch: "noise".into(),
            regime: Regime::Other.as_str().into(),
        },
        iterations: 0,
        batch_size: 0,
        step_size: 0.0,
        seed,
        achieved: 0.0,
        clean_target_freq: None,
        fell_back_to_zero: false,
    })
}

/// Batched sign-gradient generation of a universal perturbation.
///
/// δ starts at zero. Each batch contributes g = Σᵢ ∇_δ L(clip(xᵢ+δ), ℓᵢ)
/// where ℓᵢ is the true label (untargeted) or the target class; δ moves
/// `step_size · sign(g)` up the loss for untargeted attacks and down it
/// for targeted ones, then projects onto the ε-ball. Pixels clipped at 0
/// or 1 pass no gradient. A targeted δ that scores below δ = 0 on the
/// generation split is discarded in favor of δ = 0.
pub fn sgd_uap(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    cfg: &AttackConfig,
    mode: AttackMode,
) -> Result<Perturbation> {
    sgd_uap_subset(model, data, split, usize::MAX, cfg, mode)
}

/// As [`sgd_uap`], optimizing over at most `max_images` images of the
/// split (deterministic prefix). The achieved metric is measured on the
/// same subset.
pub fn sgd_uap_subset(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    max_images: usize,
    cfg: &AttackConfig,
    mode: AttackMode,
) -> Result<Perturbation> {
    cfg.validate()?;
    let k = model.arch().classes;
    if let AttackMode::Targeted(y) = mode {
        if y as usize >= k {
            return Err(Error::invalid(format!(
                "attack: target class {y} out of range [0, {k})"
            )));
        }
    }
    let mut indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit {
            op: "sgd_uap",
            split: format!("{split:?}"),
        });
    }
    indices.truncate(max_images);

    let bound = cfg.epsilon / 255.0;
    let mut delta = vec![0.0f32; IMG_ELEMS];
    let mut batch_counter = 0usize;

    for pass in 0..cfg.iterations {
        let mut order = indices.clone();
        let mut rng = Rng::new(derive(cfg.seed, "attack-pass", &[pass as u64]));
        rng.shuffle(&mut order);
        for batch_ix in order.chunks(cfg.batch_size) {
            let clean = data.batch(batch_ix);
            let labels: Vec<usize> = match mode {
                AttackMode::Untargeted => data.labels_at(batch_ix),
                AttackMode::Targeted(y) => vec![y as usize; batch_ix.len()],
            };

            // Pre-clip sums decide which pixels pass gradient.
            let batch_elems = clean.numel();
            let mut adv = Vec::with_capacity(batch_elems);
            let mut pass_mask = Vec::with_capacity(batch_elems);
            for (j, &x) in clean.data().iter().enumerate() {
                let v = x + delta[j % IMG_ELEMS];
                pass_mask.push((0.0..=1.0).contains(&v));
                adv.push(v.clamp(0.0, 1.0));
            }
            let adv = Tensor::new(clean.shape().to_vec(), adv)?;

            let mut fwd = model.forward(&adv, false, true)?;
            let loss = fwd.graph.softmax_cross_entropy(fwd.logits, &labels)?;
            fwd.graph.backward(loss)?;
            let input_grad = fwd
                .graph
                .grad(fwd.input)
                .expect("input requested gradient");

            // Sum per-pixel over the batch, through the clip mask.
            let mut g = [0.0f32; IMG_ELEMS];
            for (j, (&gv, &open)) in input_grad.iter().zip(&pass_mask).enumerate() {
                if open {
                    g[j % IMG_ELEMS] += gv;
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient { batch: batch_counter });
            }

            let direction = match mode {
                AttackMode::Untargeted => 1.0f32,
                AttackMode::Targeted(_) => -1.0,
            };
            for (dv, gv) in delta.iter_mut().zip(&g) {
                let sign = if *gv > 0.0 {
                    1.0
                } else if *gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *dv = (*dv + direction * cfg.step_size * sign).clamp(-bound, bound);
            }
            batch_counter += 1;
        }
    }

    let delta = Tensor::new(vec![IMG_C, IMG_H, IMG_W], delta)?;
    let mut perturbation = Perturbation {
        delta,
        epsilon: cfg.epsilon,
        mode,
        source: SourceModel {
            arch: model.arch().name.as_str().into(),
            regime: model.regime().as_str().into(),
        },
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        step_size: cfg.step_size,
        seed: cfg.seed,
        achieved: 0.0,
        clean_target_freq: None,
        fell_back_to_zero: false,
    };

    // Achieved metric on the generation subset, with the targeted
    // zero-fallback rule.
    let gen_images = data.batch(&indices);
    let preds = model.predict(&apply_perturbation(&gen_images, &perturbation.delta)?)?;
    match mode {
        AttackMode::Untargeted => {
            let labels = data.labels_at(&indices);
            let fooled = preds.iter().zip(&labels).filter(|(p, l)| p != l).count();
            perturbation.achieved = fooled as f64 / indices.len() as f64;
        }
        AttackMode::Targeted(y) => {
            let hit = preds.iter().filter(|&&p| p == y as usize).count();
            let tfr = hit as f64 / indices.len() as f64;
            let clean_preds = model.predict(&gen_images)?;
            let clean_hit = clean_preds.iter().filter(|&&p| p == y as usize).count();
            let clean_freq = clean_hit as f64 / indices.len() as f64;
            perturbation.clean_target_freq = Some(clean_freq);
            if tfr < clean_freq {
                perturbation.delta = Tensor::zeros(vec![IMG_C, IMG_H, IMG_W]);
                perturbation.achieved = clean_freq;
                perturbation.fell_back_to_zero = true;
            } else {
                perturbation.achieved = tfr;
            }
        }
    }
    Ok(perturbation)
}

/// One untargeted perturbation per ε, seeds derived as hash(seed, ε).
pub fn epsilon_sweep(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    max_images: usize,
    template: &AttackConfig,
    epsilons: &[f32],
) -> Result<Vec<Perturbation>> {
    if epsilons.is_empty() {
        return Err(Error::invalid("epsilon_sweep: epsilons must be non-empty"));
    }
    epsilons
        .iter()
        .map(|&eps| {
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: (eps / 255.0) / 10.0,
                seed: derive(template.seed, "sweep-eps", &[eps.to_bits() as u64]),
                ..template.clone()
            };
            sgd_uap_subset(model, data, split, max_images, &cfg, AttackMode::Untargeted)
        })
        .collect()
}

/// One targeted perturbation per class, seeds derived as hash(seed, class).
pub fn targeted_sweep(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    max_images: usize,
    template: &AttackConfig,
) -> Result<Vec<Perturbation>> {
    (0..model.arch().classes as u16)
        .map(|y| {
            let cfg = AttackConfig {
                seed: derive(template.seed, "target-class", &[y as u64]),
                ..template.clone()
            };
            sgd_uap_subset(model, data, split, max_images, &cfg, AttackMode::Targeted(y))
        })
        .collect()
}

// ── Persistence ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct PerturbationMeta {
    epsilon: f32,
    norm: String,
    mode: String,
    target: Option<u16>,
    source: SourceModel,
    iterations: usize,
    batch_size: usize,
    step_size: f32,
    seed: u64,
    achieved: f64,
    clean_target_freq: Option<f64>,
    fell_back_to_zero: bool,
    shape: Vec<usize>,
}

/// Serialize: magic, version, length-prefixed metadata JSON, raw f32 δ.
pub fn save_perturbation(p: &Perturbation) -> Vec<u8> {
    let meta = PerturbationMeta {
        epsilon: p.epsilon,
        norm: "inf".into(),
        mode: p.mode.as_str().into(),
        target: p.mode.target(),
        source: p.source.clone(),
        iterations: p.iterations,
        batch_size: p.batch_size,
        step_size: p.step_size,
        seed: p.seed,
        achieved: p.achieved,
        clean_target_freq: p.clean_target_freq,
        fell_back_to_zero: p.fell_back_to_zero,
        shape: p.delta.shape().to_vec(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut w = ByteWriter::new();
    w.magic(PERTURBATION_MAGIC);
    w.u32(PERTURBATION_VERSION);
    w.u32(json.len() as u32);
    w.bytes(&json);
    w.f32_slice(p.delta.data());
    w.into_bytes()
}

pub fn load_perturbation(bytes: &[u8]) -> Result<Perturbation> {
    let mut r = ByteReader::new(bytes, "perturbation");
    r.magic(PERTURBATION_MAGIC)?;
    let version = r.u32()?;
    if version != PERTURBATION_VERSION {
        return Err(Error::BadVersion {
            format: "perturbation",
            expected: PERTURBATION_VERSION,
            found: version,
        });
    }
    let json_len = r.u32()? as usize;
    let meta: PerturbationMeta = serde_json::from_slice(r.take(json_len)?)?;
    let numel: usize = meta.shape.iter().product();
    let data = r.f32_vec(numel)?;
    r.expect_end()?;
    let mode = match (meta.mode.as_str(), meta.target) {
        ("untargeted", _) => AttackMode::Untargeted,
        ("targeted", Some(y)) => AttackMode::Targeted(y),
        _ => return Err(Error::invalid("perturbation: inconsistent mode metadata")),
    };
    Ok(Perturbation {
        delta: Tensor::new(meta.shape, data)?,
        epsilon: meta.epsilon,
        mode,
        source: meta.source,
        iterations: meta.iterations,
        batch_size: meta.batch_size,
        step_size: meta.step_size,
        seed: meta.seed,
        achieved: meta.achieved,
        clean_target_freq: meta.clean_target_freq,
        fell_back_to_zero: meta.fell_back_to_zero,
    })
}

/// Binary PPM (P6) visualization: [-ε/255, +ε/255] mapped affinely onto
/// [0, 255].
pub fn perturbation_to_ppm(p: &Perturbation) -> Vec<u8> {
    let bound = p.epsilon / 255.0;
    let mut out = format!("P6\n{IMG_W} {IMG_H}\n255\n").into_bytes();
    let d = p.delta.data();
    let plane = IMG_H * IMG_W;
    for ix in 0..plane {
        for c in 0..IMG_C {
            let v = d[c * plane + ix];
            let scaled = ((v + bound) / (2.0 * bound) * 255.0).round().clamp(0.0, 255.0);
            out.push(scaled as u8);
        }
    }
    out
}
