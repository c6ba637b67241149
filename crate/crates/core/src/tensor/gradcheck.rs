//! Analytic-vs-numeric gradient comparison.
//!
//! The numeric side is a central difference evaluated by the f64 replay
//! interpreter; elements whose ±step evaluations land on different sides
//! of a relu kink or flip a pool argmax are reported as excluded rather
//! than compared.

use super::graph::{Graph, NodeId};
use super::replay::replay_f64;
use super::Tensor;
use crate::error::{Error, Result};
use crate::seeds::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step, applied in f64.
    pub step: f64,
    /// Check at most this many elements per tensor (seeded subsample);
    /// `None` checks every element.
    pub per_tensor_samples: Option<usize>,
    /// Seed for the element subsample.
    pub seed: u64,
    /// Floor for the relative-error denominator.
    pub rel_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            per_tensor_samples: None,
            seed: 0,
            rel_floor: 1e-6,
        }
    }
}

/// One compared element.
#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// All comparisons for one input tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub input: usize,
    pub checked: Vec<ElementCheck>,
    /// Elements skipped because the ±step evaluations crossed a kink.
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub excluded_total: usize,
}

/// Compare analytic gradients of a scalar program against central finite
/// differences at `points`. `build` receives a fresh graph plus leaf ids
/// for each point (in order) and must return the scalar root.
///
/// The program is built twice; a bitwise output change between the two
/// builds rejects it as non-deterministic.
pub fn grad_check<F>(build: F, points: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (mut graph, leaves, root) = build_once(&build, points)?;
    let root_value = graph.value(root).item() as f64;
    let (graph2, _, root2) = build_once(&build, points)?;
    let second_value = graph2.value(root2).item() as f64;
    if root_value.to_bits() != second_value.to_bits() {
        return Err(Error::NondeterministicProgram {
            first: root_value,
            second: second_value,
        });
    }

    graph.backward(root)?;

    let mut tensors = Vec::with_capacity(points.len());
    let mut global_max = 0.0f64;
    let mut excluded_total = 0usize;

    for (pi, leaf) in leaves.iter().enumerate() {
        let numel = points[pi].numel();
        let indices = select_indices(numel, cfg, pi as u64);
        let base: Vec<f64> = points[pi].data().iter().map(|&v| v as f64).collect();
        let analytic = graph.grad(*leaf);

        let mut checked = Vec::with_capacity(indices.len());
        let mut excluded = Vec::new();
        let mut max_rel = 0.0f64;

        for &ix in &indices {
            let mut plus = base.clone();
            plus[ix] += cfg.step;
            let mut minus = base.clone();
            minus[ix] -= cfg.step;
            let up = replay_f64(&graph, root.0, &[(leaf.0, &plus)]);
            let down = replay_f64(&graph, root.0, &[(leaf.0, &minus)]);
            if up.signature != down.signature {
                excluded.push(ix);
                continue;
            }
            let numeric = (up.root - down.root) / (2.0 * cfg.step);
            let a = analytic.map_or(0.0, |g| g[ix] as f64);
            let denom = a.abs().max(numeric.abs()).max(cfg.rel_floor);
            let rel = (a - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
            checked.push(ElementCheck {
                index: ix,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }

        global_max = global_max.max(max_rel);
        excluded_total += excluded.len();
        tensors.push(TensorCheck {
            input: pi,
            checked,
            excluded,
            max_rel_error: max_rel,
        });
    }

    Ok(GradCheckReport {
        tensors,
        max_rel_error: global_max,
        excluded_total,
    })
}

fn build_once<F>(build: &F, points: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = points
        .iter()
        .map(|p| graph.leaf(p.clone(), true))
        .collect::<Result<_>>()?;
    let root = build(&mut graph, &leaves)?;
    if graph.value(root).numel() != 1 {
        return Err(Error::NonScalarRoot {
            shape: graph.value(root).shape().to_vec(),
        });
    }
    Ok((graph, leaves, root))
}

fn select_indices(numel: usize, cfg: &GradCheckConfig, tensor_tag: u64) -> Vec<usize> {
    match cfg.per_tensor_samples {
        Some(cap) if cap < numel => {
            let mut all: Vec<usize> = (0..numel).collect();
            let mut rng = Rng::new(cfg.seed).fork("grad_check", &[tensor_tag]);
            rng.shuffle(&mut all);
            all.truncate(cap);
            all.sort_unstable();
            all
        }
        _ => (0..numel).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_has_zero_error() {
        let point = Tensor::new(vec![5], vec![0.4, -1.3, 2.2, 0.9, -0.6]).unwrap();
        let report = grad_check(
            |g, ids| g.sum(ids[0]),
            &[point],
            &GradCheckConfig::default(),
        )
        .unwrap();
        // Gradient of sum is the all-ones constant; only fp noise remains.
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(report.excluded_total, 0);
    }

    #[test]
    fn relu_at_kink_is_flagged_excluded() {
        let point = Tensor::new(vec![3], vec![0.5, 0.0, -0.5]).unwrap();
        let report = grad_check(
            |g, ids| {
                let r = g.relu(ids[0])?;
                g.sum(r)
            },
            &[point],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.tensors[0].excluded, vec![1]);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn nondeterministic_program_is_rejected() {
        let counter = Cell::new(0.0f32);
        let point = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = grad_check(
            |g, ids| {
                counter.set(counter.get() + 1.0);
                let noise = g.leaf(Tensor::new(vec![1], vec![counter.get()]).unwrap(), false)?;
                let m = g.mul(ids[0], noise)?;
                g.sum(m)
            },
            &[point],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NondeterministicProgram { .. }));
    }

    #[test]
    fn subsampling_checks_requested_count() {
        let point = Tensor::new(vec![100], (0..100).map(|i| 0.1 + i as f32).collect()).unwrap();
        let cfg = GradCheckConfig {
            per_tensor_samples: Some(16),
            seed: 9,
            ..GradCheckConfig::default()
        };
        let report = grad_check(|g, ids| g.sum(ids[0]), &[point], &cfg).unwrap();
        assert_eq!(report.tensors[0].checked.len(), 16);
    }

    #[test]
    fn non_scalar_program_rejected() {
        let point = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|g, ids| g.relu(ids[0]), &[point], &GradCheckConfig::default());
        assert!(matches!(err, Err(Error::NonScalarRoot { .. })));
    }
}
