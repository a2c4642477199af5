//! Minimal dense-linear-algebra kernels for the patch classifier.
//!
//! Everything is generic over the float width so the production `f32`
//! path and the double-precision verification path share one code base.
//! Layouts are row-major; convolutions go through an explicit im2col
//! buffer so both directions reduce to matrix products.

use num_traits::Float;

/// `a` (m×k) × `b` (k×n) → m×n.
pub(crate) fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a` (m×k) × `bᵀ` where `b` is n×k → m×n.
pub(crate) fn matmul_bt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ` (k×m from an m×k `a`) × `b` (m×n) → k×n.
pub(crate) fn matmul_at<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Unrolls a padded 3×3 (or any odd k) neighborhood of every pixel into a
/// `(channels·k²) × (h·w)` matrix. Zero padding of `k/2` keeps the spatial
/// size unchanged.
pub(crate) fn im2col<T: Float>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    debug_assert_eq!(input.len(), channels * h * w);
    debug_assert_eq!(k % 2, 1);
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut cols = vec![T::zero(); channels * k * k * n];
    for c in 0..channels {
        let plane = &input[c * n..(c + 1) * n];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = &mut cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize) as usize;
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        row[y * w + x] = src[(x as isize + ox) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
pub(crate) fn col2im<T: Float>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    debug_assert_eq!(cols.len(), channels * k * k * h * w);
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut out = vec![T::zero(); channels * n];
    for c in 0..channels {
        let plane = &mut out[c * n..(c + 1) * n];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = &cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize) as usize;
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        dst[(x as isize + ox) as usize] = dst[(x as isize + ox) as usize] + row[y * w + x];
                    }
                }
            }
        }
    }
    out
}
