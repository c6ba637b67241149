//! 64-bit re-execution of a recorded graph.
//!
//! `grad_check` perturbs leaf elements and needs loss values whose noise
//! floor sits well below the finite-difference step. Re-running the
//! recorded program in f64 (direct loops, no im2col) gives that headroom
//! and doubles as a second, structurally different forward route.

use super::graph::{Graph, OpRecord};
use crate::seeds::fnv1a64;

/// Result of one f64 replay.
pub(crate) struct ReplayOutput {
    /// Root value.
    pub root: f64,
    /// Hash of every relu sign mask and pool argmax along the way. Two
    /// replays with different signatures straddle a kink.
    pub signature: u64,
}

pub(crate) fn replay_f64(graph: &Graph, root: usize, overrides: &[(usize, &[f64])]) -> ReplayOutput {
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(root + 1);
    let mut pattern: Vec<u8> = Vec::new();

    for idx in 0..=root {
        let node = &graph.nodes[idx];
        let value: Vec<f64> = match &node.op {
            OpRecord::Leaf => {
                if let Some((_, data)) = overrides.iter().find(|(id, _)| *id == idx) {
                    data.to_vec()
                } else {
                    node.value.data().iter().map(|&v| v as f64).collect()
                }
            }
            OpRecord::Conv2d { x, w, b, geom, batch } => {
                let xv = &values[*x];
                let wv = &values[*w];
                let bv = b.map(|bi| &values[bi]);
                let (ic, ih, iw) = (geom.in_c, geom.in_h, geom.in_w);
                let (oc, oh, ow) = (geom.out_c, geom.out_h, geom.out_w);
                let (ks, st, pd) = (geom.ksize, geom.stride, geom.pad as isize);
                let mut out = vec![0.0f64; batch * oc * oh * ow];
                for n in 0..*batch {
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bv.map_or(0.0, |bias| bias[o]);
                                for c in 0..ic {
                                    for ky in 0..ks {
                                        let iy = (oy * st + ky) as isize - pd;
                                        if iy < 0 || iy >= ih as isize {
                                            continue;
                                        }
                                        for kx in 0..ks {
                                            let ix = (ox * st + kx) as isize - pd;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            let xi = ((n * ic + c) * ih + iy as usize) * iw
                                                + ix as usize;
                                            let wi = ((o * ic + c) * ks + ky) * ks + kx;
                                            acc += xv[xi] * wv[wi];
                                        }
                                    }
                                }
                                out[((n * oc + o) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                out
            }
            OpRecord::Dense {
                x,
                w,
                b,
                batch,
                in_features,
                out_features,
            } => {
                let xv = &values[*x];
                let wv = &values[*w];
                let bv = b.map(|bi| &values[bi]);
                let mut out = vec![0.0f64; batch * out_features];
                for n in 0..*batch {
                    for j in 0..*out_features {
                        let mut acc = bv.map_or(0.0, |bias| bias[j]);
                        for f in 0..*in_features {
                            acc += xv[n * in_features + f] * wv[f * out_features + j];
                        }
                        out[n * out_features + j] = acc;
                    }
                }
                out
            }
            OpRecord::Relu { x } => {
                let xv = &values[*x];
                for v in xv {
                    pattern.push((*v > 0.0) as u8);
                }
                xv.iter().map(|&v| v.max(0.0)).collect()
            }
            OpRecord::MaxPool2x2 { x, argmax } => {
                let xv = &values[*x];
                let shape = graph.nodes[*x].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = shape[0] * shape[1];
                let mut out = vec![0.0f64; argmax.len()];
                for img in 0..planes {
                    let base = img * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_ix = base + (2 * oy) * w + 2 * ox;
                            let mut best = xv[best_ix];
                            for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                let ix = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if xv[ix] > best {
                                    best = xv[ix];
                                    best_ix = ix;
                                }
                            }
                            out[img * oh * ow + oy * ow + ox] = best;
                            pattern.extend_from_slice(&(best_ix as u32).to_le_bytes());
                        }
                    }
                }
                out
            }
            OpRecord::Add { a, b } => values[*a].iter().zip(&values[*b]).map(|(x, y)| x + y).collect(),
            OpRecord::Mul { a, b } => values[*a].iter().zip(&values[*b]).map(|(x, y)| x * y).collect(),
            OpRecord::Sum { x } => vec![values[*x].iter().sum()],
            OpRecord::SoftmaxCrossEntropy { logits, labels, .. } => {
                let lv = &values[*logits];
                let k = lv.len() / labels.len();
                let mut acc = 0.0f64;
                for (i, &y) in labels.iter().enumerate() {
                    let row = &lv[i * k..(i + 1) * k];
                    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - maxv).exp()).sum();
                    acc += denom.ln() + maxv - row[y];
                }
                vec![acc / labels.len() as f64]
            }
        };
        values.push(value);
    }

    ReplayOutput {
        root: values[root][0],
        signature: fnv1a64(&pattern),
    }
}
