//! Local quadratic signal models (polynomial expansion).
//!
//! Every pixel gets the least-squares coefficients of
//! `f(o) ≈ oᵀA o + bᵀo + c` over a Gaussian-weighted window around it,
//! with `o` the offset from the pixel. Because the weights are separable
//! and identical at every pixel, the normal matrix is constant and the fit
//! reduces to six separable correlations plus a closed-form solve.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::imgproc::separable_filter;

/// Per-pixel quadratic coefficients. `a12` is the off-diagonal entry of
/// the symmetric matrix A (half the xy coefficient).
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    pub a11: Vec<f32>,
    pub a12: Vec<f32>,
    pub a22: Vec<f32>,
    pub b1: Vec<f32>,
    pub b2: Vec<f32>,
    pub c: Vec<f32>,
}

/// Fits the quadratic basis {1, x, y, x², y², xy} around every pixel.
pub fn poly_expand(frame: &Frame, poly_n: usize, poly_sigma: f32) -> Result<PolyExpansion> {
    if poly_n % 2 == 0 || poly_n == 0 {
        return Err(Error::parameter(format!("polynomial window must be odd, got {poly_n}")));
    }
    if poly_sigma <= 0.0 {
        return Err(Error::parameter("polynomial sigma must be positive"));
    }
    if !frame.is_gray() {
        return Err(Error::parameter("polynomial expansion expects a grayscale frame"));
    }
    let (w, h) = (frame.width(), frame.height());
    let half = (poly_n / 2) as isize;

    // Normalized Gaussian applicability and its moment kernels.
    let mut g = Vec::with_capacity(poly_n);
    for o in -half..=half {
        g.push((-(o * o) as f64 / (2.0 * poly_sigma as f64 * poly_sigma as f64)).exp());
    }
    let gsum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gsum).collect();
    let k0: Vec<f32> = g.iter().map(|&v| v as f32).collect();
    let k1: Vec<f32> = g
        .iter()
        .zip(-half..=half)
        .map(|(&v, o)| (v * o as f64) as f32)
        .collect();
    let k2: Vec<f32> = g
        .iter()
        .zip(-half..=half)
        .map(|(&v, o)| (v * (o * o) as f64) as f32)
        .collect();

    // 1-D moments of the applicability (m0 = 1 by normalization).
    let m2: f64 = g.iter().zip(-half..=half).map(|(&v, o)| v * (o * o) as f64).sum();
    let m4: f64 = g
        .iter()
        .zip(-half..=half)
        .map(|(&v, o)| v * (o * o * o * o) as f64)
        .sum();

    let plane = frame.plane(0);
    let s00 = separable_filter(plane, w, h, &k0, &k0);
    let s10 = separable_filter(plane, w, h, &k1, &k0);
    let s01 = separable_filter(plane, w, h, &k0, &k1);
    let s20 = separable_filter(plane, w, h, &k2, &k0);
    let s02 = separable_filter(plane, w, h, &k0, &k2);
    let s11 = separable_filter(plane, w, h, &k1, &k1);

    // Constant normal matrix. b and the xy term decouple; (c, axx, ayy)
    // need a symmetric 3×3 solved here in closed form.
    let inv_m2 = 1.0 / m2;
    let inv_m2sq = 1.0 / (m2 * m2);
    // Both the symmetric and antisymmetric parts of the (c, axx, ayy)
    // subsystem reduce to the same pivot.
    let denom = m4 - m2 * m2;

    let n = w * h;
    let mut out = PolyExpansion {
        width: w,
        height: h,
        a11: Vec::with_capacity(n),
        a12: Vec::with_capacity(n),
        a22: Vec::with_capacity(n),
        b1: Vec::with_capacity(n),
        b2: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (s00, s10, s01, s20, s02, s11) = (
            s00[i] as f64,
            s10[i] as f64,
            s01[i] as f64,
            s20[i] as f64,
            s02[i] as f64,
            s11[i] as f64,
        );
        let sum = (s20 + s02 - 2.0 * m2 * s00) / denom;
        let diff = (s20 - s02) / denom;
        let axx = 0.5 * (sum + diff);
        let ayy = 0.5 * (sum - diff);
        out.a11.push(axx as f32);
        out.a22.push(ayy as f32);
        // xy coefficient solves m2²·axy = s11; A12 is half of it.
        out.a12.push((0.5 * s11 * inv_m2sq) as f32);
        out.b1.push((s10 * inv_m2) as f32);
        out.b2.push((s01 * inv_m2) as f32);
        out.c.push((s00 - m2 * sum) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interior(w: usize, h: usize, margin: usize) -> impl Iterator<Item = usize> {
        (margin..h - margin).flat_map(move |y| (margin..w - margin).map(move |x| y * w + x))
    }

    #[test]
    fn constant_frame_fits_constant() {
        let f = Frame::constant(32, 32, 1, 0.37);
        let p = poly_expand(&f, 5, 1.2).unwrap();
        for i in 0..32 * 32 {
            assert!(p.a11[i].abs() < 1e-6);
            assert!(p.a12[i].abs() < 1e-6);
            assert!(p.a22[i].abs() < 1e-6);
            assert!(p.b1[i].abs() < 1e-6);
            assert!(p.b2[i].abs() < 1e-6);
            assert!((p.c[i] - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_ramp_fits_gradient() {
        let data: Vec<f32> = (0..32 * 32).map(|i| 0.01 * (i % 32) as f32).collect();
        let f = Frame::new(32, 32, 1, data).unwrap();
        let p = poly_expand(&f, 5, 1.2).unwrap();
        for i in interior(32, 32, 3) {
            assert!((p.b1[i] - 0.01).abs() < 1e-4, "b1 {}", p.b1[i]);
            assert!(p.b2[i].abs() < 1e-4);
            assert!(p.a11[i].abs() < 1e-4);
            assert!(p.a22[i].abs() < 1e-4);
        }
    }

    #[test]
    fn pure_quadratic_fits_curvature() {
        let alpha = 1e-4f32;
        let data: Vec<f32> = (0..32 * 32)
            .map(|i| {
                let x = (i % 32) as f32;
                alpha * x * x
            })
            .collect();
        let f = Frame::new(32, 32, 1, data).unwrap();
        let p = poly_expand(&f, 5, 1.2).unwrap();
        for i in interior(32, 32, 3) {
            let rel = (p.a11[i] - alpha).abs() / alpha;
            assert!(rel < 0.10, "a11 {} vs {alpha}", p.a11[i]);
            assert!(p.a22[i].abs() < alpha * 0.1);
        }
    }

    #[test]
    fn mixed_term_lands_in_a12() {
        // f = β·x·y has A = [[0, β/2], [β/2, 0]].
        let beta = 2e-4f32;
        let data: Vec<f32> = (0..32 * 32)
            .map(|i| {
                let (x, y) = ((i % 32) as f32, (i / 32) as f32);
                beta * x * y
            })
            .collect();
        let f = Frame::new(32, 32, 1, data).unwrap();
        let p = poly_expand(&f, 5, 1.2).unwrap();
        for i in interior(32, 32, 3) {
            let want = 0.5 * beta;
            assert!(
                (p.a12[i] - want).abs() < want * 0.1,
                "a12 {} vs {want}",
                p.a12[i]
            );
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let f = Frame::zeros(16, 16, 1);
        assert!(poly_expand(&f, 4, 1.2).is_err());
        assert!(poly_expand(&f, 5, 0.0).is_err());
        assert!(poly_expand(&Frame::zeros(16, 16, 3), 5, 1.2).is_err());
    }
}
