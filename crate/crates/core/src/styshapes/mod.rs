//! Synthetic dataset with independently controllable shape and texture
//! cues, plus the stylization pass and the cue-conflict shape-bias probe.
//!
//! Unstylized bundles keep texture == shape label (both cues predictive,
//! like natural images); stylization re-renders each image with the same
//! geometry but a texture drawn uniformly from the other nine families,
//! so only shape remains informative.

mod render;

pub use render::{
    mask_fraction, render_image, RenderSpec, IMG_C, IMG_ELEMS, IMG_H, IMG_W, NUM_CLASSES,
    NUM_TEXTURES, SHAPE_NAMES, TEXTURE_NAMES,
};

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seeds::{derive, Rng};
use crate::tensor::Tensor;
use crate::zoo::ModelHandle;

pub const BUNDLE_MAGIC: [u8; 4] = *b"UAPD";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(Error::invalid(format!("bundle: unknown split tag {other}"))),
        }
    }
}

/// Labeled image set with per-image shape class, texture family and split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    images: Vec<f32>,
    labels: Vec<u16>,
    texture_tags: Vec<u16>,
    splits: Vec<Split>,
    stylized: bool,
    seed: u64,
    /// Per-image render seeds; retained so stylization can re-render the
    /// exact geometry. Empty for bundles loaded from disk.
    jitter_seeds: Vec<u64>,
}

impl DatasetBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        images: Vec<f32>,
        labels: Vec<u16>,
        texture_tags: Vec<u16>,
        splits: Vec<Split>,
        stylized: bool,
        seed: u64,
        jitter_seeds: Vec<u64>,
    ) -> Result<Self> {
        let n = labels.len();
        if images.len() != n * IMG_ELEMS || texture_tags.len() != n || splits.len() != n {
            return Err(Error::invalid(format!(
                "bundle: inconsistent lengths (labels {n}, tags {}, splits {}, pixels {})",
                texture_tags.len(),
                splits.len(),
                images.len()
            )));
        }
        if !jitter_seeds.is_empty() && jitter_seeds.len() != n {
            return Err(Error::invalid("bundle: jitter seed count mismatch"));
        }
        Ok(DatasetBundle {
            images,
            labels,
            texture_tags,
            splits,
            stylized,
            seed,
            jitter_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMG_ELEMS..(i + 1) * IMG_ELEMS]
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn texture_tag(&self, i: usize) -> u16 {
        self.texture_tags[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn is_stylized(&self) -> bool {
        self.stylized
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Assemble `[batch, 3, 32, 32]` pixels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * IMG_ELEMS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), IMG_C, IMG_H, IMG_W], data).expect("batch shape")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Fingerprint of all pixel data; used by determinism tests.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.images.len() * 4);
        for v in &self.images {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::seeds::fnv1a64(&bytes)
    }
}

/// Generate a class-balanced unstylized bundle: texture family equals the
/// shape label for every image, and the train/test jitter-seed streams
/// are disjoint.
pub fn generate_dataset(
    spec: &RenderSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if n_train < NUM_CLASSES || n_test < NUM_CLASSES {
        return Err(Error::invalid(format!(
            "generate_dataset: n_train ({n_train}) and n_test ({n_test}) must be >= {NUM_CLASSES}"
        )));
    }
    let n = n_train + n_test;
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut jitter_seeds = Vec::with_capacity(n);
    for i in 0..n_train {
        labels.push((i % NUM_CLASSES) as u16);
        splits.push(Split::Train);
        jitter_seeds.push(derive(seed, "train-img", &[i as u64]));
    }
    for i in 0..n_test {
        labels.push((i % NUM_CLASSES) as u16);
        splits.push(Split::Test);
        jitter_seeds.push(derive(seed, "test-img", &[i as u64]));
    }

    let images = render_all(spec, &labels, &labels, &jitter_seeds)?;
    DatasetBundle::from_parts(
        images,
        labels.clone(),
        labels,
        splits,
        false,
        seed,
        jitter_seeds,
    )
}

fn render_all(
    spec: &RenderSpec,
    shapes: &[u16],
    textures: &[u16],
    jitter_seeds: &[u64],
) -> Result<Vec<f32>> {
    let rendered: Result<Vec<Vec<f32>>> = (0..shapes.len())
        .into_par_iter()
        .map(|i| {
            render_image(spec, shapes[i] as usize, textures[i] as usize, jitter_seeds[i])
                .map(Tensor::into_data)
        })
        .collect();
    let rendered = rendered?;
    let mut images = Vec::with_capacity(shapes.len() * IMG_ELEMS);
    for img in rendered {
        images.extend_from_slice(&img);
    }
    Ok(images)
}

/// Re-render every image with its original geometry but a texture drawn
/// uniformly at random from the nine families that do not match its
/// label. Labels, splits and image count are preserved exactly.
pub fn stylize(bundle: &DatasetBundle, seed: u64) -> Result<DatasetBundle> {
    if bundle.stylized {
        return Err(Error::invalid("stylize: bundle is already stylized"));
    }
    if bundle.jitter_seeds.len() != bundle.len() {
        return Err(Error::invalid(
            "stylize: bundle lacks per-image render provenance (loaded from disk?)",
        ));
    }
    let new_tags: Vec<u16> = (0..bundle.len())
        .map(|i| {
            let mut rng = Rng::new(derive(seed, "stylize", &[i as u64]));
            let draw = rng.below(NUM_TEXTURES as u64 - 1) as u16;
            // Skip over the label-matched family.
            if draw >= bundle.labels[i] {
                draw + 1
            } else {
                draw
            }
        })
        .collect();
    let images = render_all(&RenderSpec::default(), &bundle.labels, &new_tags, &bundle.jitter_seeds)?;
    DatasetBundle::from_parts(
        images,
        bundle.labels.clone(),
        new_tags,
        bundle.splits.clone(),
        true,
        seed,
        bundle.jitter_seeds.clone(),
    )
}

/// Cue-conflict probe: each image renders shape class `a` with texture
/// family `b != a`; the label records `a` and the texture tag records `b`.
pub fn cue_conflict_set(spec: &RenderSpec, n: usize, seed: u64) -> Result<DatasetBundle> {
    if n == 0 {
        return Err(Error::invalid("cue_conflict_set: n must be >= 1"));
    }
    let mut shapes = Vec::with_capacity(n);
    let mut textures = Vec::with_capacity(n);
    let mut jitter_seeds = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::new(derive(seed, "conflict-img", &[i as u64]));
        let a = rng.below(NUM_CLASSES as u64) as u16;
        let draw = rng.below(NUM_TEXTURES as u64 - 1) as u16;
        let b = if draw >= a { draw + 1 } else { draw };
        shapes.push(a);
        textures.push(b);
        jitter_seeds.push(derive(seed, "conflict-jitter", &[i as u64]));
    }
    let images = render_all(spec, &shapes, &textures, &jitter_seeds)?;
    DatasetBundle::from_parts(
        images,
        shapes,
        textures,
        vec![Split::Test; n],
        true,
        seed,
        jitter_seeds,
    )
}

/// Fraction of cue-aligned predictions that follow the shape cue:
/// `#(pred == shape) / #(pred in {shape, texture})` over the whole bundle.
pub fn shape_bias_score(model: &ModelHandle, conflict: &DatasetBundle) -> Result<f64> {
    if conflict.is_empty() {
        return Err(Error::invalid("shape_bias_score: empty bundle"));
    }
    let indices: Vec<usize> = (0..conflict.len()).collect();
    let preds = model.predict(&conflict.batch(&indices))?;
    score_predictions(&preds, conflict)
}

fn score_predictions(preds: &[usize], conflict: &DatasetBundle) -> Result<f64> {
    let mut shape_hits = 0u64;
    let mut cue_hits = 0u64;
    for (i, &p) in preds.iter().enumerate() {
        let a = conflict.labels[i] as usize;
        let b = conflict.texture_tags[i] as usize;
        if p == a {
            shape_hits += 1;
            cue_hits += 1;
        } else if p == b {
            cue_hits += 1;
        }
    }
    if cue_hits == 0 {
        return Err(Error::NoCueAlignedPredictions);
    }
    Ok(shape_hits as f64 / cue_hits as f64)
}

// ── Persistence ─────────────────────────────────────────────────────

/// Serialize: magic, version, n/K/H/W, then per image
/// `u16 label, u16 texture, u8 split, u8 stylized, f32 pixels`.
pub fn save_bundle(bundle: &DatasetBundle) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(BUNDLE_MAGIC);
    w.u32(BUNDLE_VERSION);
    w.u32(bundle.len() as u32);
    w.u32(NUM_CLASSES as u32);
    w.u32(IMG_H as u32);
    w.u32(IMG_W as u32);
    for i in 0..bundle.len() {
        w.u16(bundle.labels[i]);
        w.u16(bundle.texture_tags[i]);
        w.u8(bundle.splits[i].as_u8());
        w.u8(bundle.stylized as u8);
        w.f32_slice(bundle.image(i));
    }
    w.into_bytes()
}

pub fn load_bundle(bytes: &[u8]) -> Result<DatasetBundle> {
    let mut r = ByteReader::new(bytes, "bundle");
    r.magic(BUNDLE_MAGIC)?;
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(Error::BadVersion {
            format: "bundle",
            expected: BUNDLE_VERSION,
            found: version,
        });
    }
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let h = r.u32()? as usize;
    let wd = r.u32()? as usize;
    if k != NUM_CLASSES || h != IMG_H || wd != IMG_W {
        return Err(Error::invalid(format!(
            "bundle: unsupported geometry {k} classes {h}x{wd}"
        )));
    }
    let mut images = Vec::with_capacity(n * IMG_ELEMS);
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut stylized = false;
    for i in 0..n {
        labels.push(r.u16()?);
        tags.push(r.u16()?);
        splits.push(Split::from_u8(r.u8()?)?);
        let st = r.u8()? != 0;
        if i == 0 {
            stylized = st;
        } else if st != stylized {
            return Err(Error::invalid("bundle: inconsistent per-image stylized flags"));
        }
        images.extend_from_slice(&r.f32_vec(IMG_ELEMS)?);
    }
    r.expect_end()?;
    DatasetBundle::from_parts(images, labels, tags, splits, stylized, 0, Vec::new())
}

/// Provenance sidecar content for a saved bundle.
pub fn bundle_sidecar(bundle: &DatasetBundle, spec: &RenderSpec) -> serde_json::Value {
    json!({
        "format": "UAPD",
        "version": BUNDLE_VERSION,
        "n": bundle.len(),
        "classes": NUM_CLASSES,
        "height": IMG_H,
        "width": IMG_W,
        "stylized": bundle.stylized,
        "seed": bundle.seed,
        "render_spec": spec,
    })
}
