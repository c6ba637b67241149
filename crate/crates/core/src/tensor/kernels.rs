//! Hot inner loops: matrix multiply and im2col/col2im.
//!
//! Every kernel accumulates each output element in a fixed serial order,
//! so results are bit-identical regardless of how many rayon workers run.
//! Parallelism only ever splits *disjoint output regions* across threads.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch costs more than it saves.
const PAR_FLOP_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] · B[k,n], all row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (cij, bkj) in ci.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// Serial `matmul` accumulating into a caller-provided zeroed buffer.
/// Used inside per-sample parallel loops where nesting would oversubscribe.
pub fn matmul_serial_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (i, ci) in c.chunks_mut(n).enumerate() {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (cij, bkj) in ci.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    }
}

/// Serial C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_bt_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    for (i, ci) in c.chunks_mut(n).enumerate() {
        let arow = &a[i * k..i * k + k];
        for (j, cij) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cij = acc;
        }
    }
    c
}

/// Serial C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_at_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let brow = &b[i * n..i * n + n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..kk * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        let arow = &a[i * k..i * k + k];
        for (j, cij) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cij = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0f32; k * n];
    let row = |crow: &mut [f32], kk: usize| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * n..i * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(kk, crow)| row(crow, kk));
    } else {
        for (kk, crow) in c.chunks_mut(n).enumerate() {
            row(crow, kk);
        }
    }
    c
}

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || ksize == 0 {
            return None;
        }
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < ksize || eff_w < ksize {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            ksize,
            stride,
            pad,
            out_h: (eff_h - ksize) / stride + 1,
            out_w: (eff_w - ksize) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.ksize * self.ksize
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one CHW image into columns, layout `[patch_len, positions]`.
/// Row r = one (channel, ky, kx) slot across all output positions.
pub fn im2col_t(x: &[f32], g: &ConvGeom, out: &mut [f32]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    debug_assert_eq!(out.len(), g.patch_len() * g.out_positions());
    let positions = g.out_positions();
    let mut row = 0usize;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let dst = &mut out[row * positions..(row + 1) * positions];
                let mut p = 0usize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        dst[p..p + g.out_w].fill(0.0);
                        p += g.out_w;
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[p] = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold column gradients back onto the input image (scatter-add).
/// `cols` layout matches [`im2col_t`]: `[patch_len, positions]`.
pub fn col2im_t(cols: &[f32], g: &ConvGeom, x_grad: &mut [f32]) {
    debug_assert_eq!(x_grad.len(), g.in_c * g.in_h * g.in_w);
    let positions = g.out_positions();
    let mut row = 0usize;
    for c in 0..g.in_c {
        let plane = &mut x_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let src = &cols[row * positions..(row + 1) * positions];
                let mut p = 0usize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        p += g.out_w;
                        continue;
                    }
                    let dst_row =
                        &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        let e = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&e) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let (m, k, n) = (4, 6, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.7).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.3).cos()).collect();
        // B stored as [n,k]; matmul_bt must equal A·(Bt)ᵀ.
        let mut bt = vec![0.0; n * k];
        for j in 0..n {
            for kk in 0..k {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let via_bt = matmul_bt(&a, &bt, m, k, n);
        let direct = matmul(&a, &b, m, k, n);
        assert_eq!(via_bt, direct);

        // matmul_at: Aᵀ·C over rows m.
        let c: Vec<f32> = (0..m * n).map(|i| (i as f32 * 0.13).sin()).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let via_at = matmul_at(&a, &c, m, k, n);
        let direct = naive_matmul(&at, &c, k, m, n);
        for (x, y) in via_at.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_is_thread_count_invariant() {
        let (m, k, n) = (64, 128, 96); // above the parallel threshold
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.019).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.023).cos()).collect();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let c1 = pool1.install(|| matmul(&a, &b, m, k, n));
        let c8 = pool8.install(|| matmul(&a, &b, m, k, n));
        assert_eq!(c1, c8);
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_uses() {
        // col2im(im2col(ones)) counts how many patches touch each pixel.
        let g = ConvGeom::new(1, 4, 4, 1, 3, 1, 1).unwrap();
        let x = vec![1.0f32; 16];
        let mut cols = vec![0.0; g.patch_len() * g.out_positions()];
        im2col_t(&x, &g, &mut cols);
        let mut back = vec![0.0f32; 16];
        col2im_t(&cols, &g, &mut back);
        // Interior pixel of a 4x4, 3x3 window with pad 1: used by 9 patches.
        assert_eq!(back[5], 9.0);
        // Corner pixel: 4 patches.
        assert_eq!(back[0], 4.0);
    }
}
