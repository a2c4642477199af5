//! Dense two-frame motion estimation and its polar decomposition.
//!
//! The estimator fits local quadratic models to both frames
//! ([`poly::poly_expand`]) and solves for the displacement that maps one
//! model onto the other, refined iteratively with box-filter smoothing of
//! the per-pixel normal equations, coarse-to-fine over an image pyramid.

pub mod poly;

pub use poly::{poly_expand, PolyExpansion};

use crate::error::{Error, Result};
use crate::frame::{resize_plane_bilinear, Frame};
use crate::imgproc::{gaussian_blur, separable_filter};

/// Estimator tuning. The defaults are the values the rest of the pipeline
/// is calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Pyramid levels; 1 means single-scale.
    pub levels: usize,
    /// Per-level downscale factor in (0, 1).
    pub pyramid_scale: f32,
    /// Box-filter width for smoothing the normal equations.
    pub window: usize,
    /// Refinement iterations per level.
    pub iterations: usize,
    /// Polynomial-expansion window (odd).
    pub poly_n: usize,
    /// Gaussian applicability sigma for the expansion.
    pub poly_sigma: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 2,
            pyramid_scale: 0.9,
            window: 10,
            iterations: 10,
            poly_n: 5,
            poly_sigma: 1.2,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pyramid_scale) || self.pyramid_scale <= 0.0 {
            return Err(Error::parameter("pyramid scale must lie in (0, 1)"));
        }
        if self.poly_n % 2 == 0 || self.poly_n == 0 {
            return Err(Error::parameter("polynomial window must be odd"));
        }
        if self.levels == 0 || self.window == 0 || self.iterations == 0 {
            return Err(Error::parameter("levels, window, and iterations must be ≥ 1"));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

/// Per-pixel magnitude (pixels/frame) and direction (radians in [0, 2π)).
#[derive(Debug, Clone, PartialEq)]
pub struct PolarFlow {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f32>,
    pub angle: Vec<f32>,
}

/// Dense displacement field mapping `prev` onto `next`: content at pixel
/// `x` in `prev` appears at `x + d(x)` in `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::parameter(format!(
            "flow frames differ: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    let a = prev.to_gray();
    let b = next.to_gray();
    let (w0, h0) = (a.width(), a.height());
    // Displacements cannot meaningfully exceed what the smoothing window
    // can track per level; clamp at twice that bound.
    let d_max = 2.0 * (params.window * params.levels) as f32;

    let mut dx: Vec<f32> = Vec::new();
    let mut dy: Vec<f32> = Vec::new();
    let mut prev_size = (0usize, 0usize);
    for k in (0..params.levels).rev() {
        let scale = params.pyramid_scale.powi(k as i32);
        let lw = ((w0 as f32 * scale).round() as usize).max(4);
        let lh = ((h0 as f32 * scale).round() as usize).max(4);
        let (pa, pb) = (level_image(&a, scale, lw, lh)?, level_image(&b, scale, lw, lh)?);

        if dx.is_empty() {
            dx = vec![0.0; lw * lh];
            dy = vec![0.0; lw * lh];
        } else {
            let gain = 1.0 / params.pyramid_scale;
            dx = resize_plane_bilinear(&dx, prev_size.0, prev_size.1, lw, lh)
                .into_iter()
                .map(|v| v * gain)
                .collect();
            dy = resize_plane_bilinear(&dy, prev_size.0, prev_size.1, lw, lh)
                .into_iter()
                .map(|v| v * gain)
                .collect();
        }
        prev_size = (lw, lh);

        let e1 = poly_expand(&pa, params.poly_n, params.poly_sigma)?;
        let e2 = poly_expand(&pb, params.poly_n, params.poly_sigma)?;
        refine_level(&e1, &e2, &mut dx, &mut dy, params, d_max);
    }
    Ok(FlowField {
        width: w0,
        height: h0,
        dx,
        dy,
    })
}

/// Blur-and-resample of the original frame for one pyramid level.
fn level_image(src: &Frame, scale: f32, lw: usize, lh: usize) -> Result<Frame> {
    if (scale - 1.0).abs() < 1e-6 {
        return Ok(src.clone());
    }
    let sigma = (1.0 / scale - 1.0) * 0.5;
    let ksize = (((sigma * 5.0).round() as usize) | 1).max(1);
    let blurred = if ksize >= 3 {
        gaussian_blur(src, ksize, Some(sigma))?
    } else {
        src.clone()
    };
    Ok(blurred.resize_bilinear(lw, lh))
}

/// One pyramid level: iteratively re-estimates the displacement from the
/// two expansions, smoothing the normal equations with a box filter.
fn refine_level(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    dx: &mut [f32],
    dy: &mut [f32],
    params: &FlowParams,
    d_max: f32,
) {
    let (w, h) = (e1.width, e1.height);
    let n = w * h;
    let box_taps = vec![1.0f32 / params.window as f32; params.window];
    let mut g11 = vec![0.0f32; n];
    let mut g12 = vec![0.0f32; n];
    let mut g22 = vec![0.0f32; n];
    let mut h1 = vec![0.0f32; n];
    let mut h2 = vec![0.0f32; n];

    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // Sample the second expansion where the current estimate
                // says this pixel went, interpolating so that sub-pixel
                // refinements keep making progress.
                let sx = (x as f32 + dx[i]).clamp(0.0, (w - 1) as f32);
                let sy = (y as f32 + dy[i]).clamp(0.0, (h - 1) as f32);
                let (x0, y0) = (sx as usize, sy as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w10 = fx * (1.0 - fy);
                let w01 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let lerp = |p: &[f32]| -> f32 {
                    w00 * p[y0 * w + x0]
                        + w10 * p[y0 * w + x1]
                        + w01 * p[y1 * w + x0]
                        + w11 * p[y1 * w + x1]
                };
                let a11 = 0.5 * (e1.a11[i] + lerp(&e2.a11));
                let a12 = 0.5 * (e1.a12[i] + lerp(&e2.a12));
                let a22 = 0.5 * (e1.a22[i] + lerp(&e2.a22));
                let db1 = -0.5 * (lerp(&e2.b1) - e1.b1[i]) + a11 * dx[i] + a12 * dy[i];
                let db2 = -0.5 * (lerp(&e2.b2) - e1.b2[i]) + a12 * dx[i] + a22 * dy[i];
                g11[i] = a11 * a11 + a12 * a12;
                g12[i] = a12 * (a11 + a22);
                g22[i] = a12 * a12 + a22 * a22;
                h1[i] = a11 * db1 + a12 * db2;
                h2[i] = a12 * db1 + a22 * db2;
            }
        }
        let sg11 = separable_filter(&g11, w, h, &box_taps, &box_taps);
        let sg12 = separable_filter(&g12, w, h, &box_taps, &box_taps);
        let sg22 = separable_filter(&g22, w, h, &box_taps, &box_taps);
        let sh1 = separable_filter(&h1, w, h, &box_taps, &box_taps);
        let sh2 = separable_filter(&h2, w, h, &box_taps, &box_taps);
        for i in 0..n {
            let (g11, g12, g22) = (sg11[i] as f64, sg12[i] as f64, sg22[i] as f64);
            let det = g11 * g22 - g12 * g12;
            if det.abs() > 1e-14 {
                let ndx = ((g22 * sh1[i] as f64 - g12 * sh2[i] as f64) / det) as f32;
                let ndy = ((g11 * sh2[i] as f64 - g12 * sh1[i] as f64) / det) as f32;
                dx[i] = ndx.clamp(-d_max, d_max);
                dy[i] = ndy.clamp(-d_max, d_max);
            } else {
                dx[i] = 0.0;
                dy[i] = 0.0;
            }
        }
    }
}

/// Converts a displacement field to magnitude/direction form.
pub fn to_polar(flow: &FlowField) -> PolarFlow {
    let n = flow.width * flow.height;
    let mut magnitude = Vec::with_capacity(n);
    let mut angle = Vec::with_capacity(n);
    for i in 0..n {
        let (dx, dy) = (flow.dx[i] as f64, flow.dy[i] as f64);
        magnitude.push((dx * dx + dy * dy).sqrt() as f32);
        let mut a = dy.atan2(dx);
        if a < 0.0 {
            a += std::f64::consts::TAU;
        }
        angle.push(a as f32);
    }
    PolarFlow {
        width: flow.width,
        height: flow.height,
        magnitude,
        angle,
    }
}

/// Integer line rasterization between two pixels, inclusive.
pub(crate) fn bresenham(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut x0, mut y0) = (from.0 as isize, from.1 as isize);
    let (x1, y1) = (to.0 as isize, to.1 as isize);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut pts = Vec::new();
    loop {
        pts.push((x0 as usize, y0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    pts
}

/// Per-polyline, per-frame mean flow magnitude.
///
/// Each polyline is rasterized once; every flow field in the sequence
/// contributes one mean over those pixels. Returns one series per line.
pub fn probe_lines(
    flows: &[PolarFlow],
    polylines: &[Vec<(usize, usize)>],
) -> Result<Vec<Vec<f32>>> {
    let mut rasters: Vec<Vec<(usize, usize)>> = Vec::with_capacity(polylines.len());
    for line in polylines {
        if line.is_empty() {
            return Err(Error::parameter("polyline must contain at least one point"));
        }
        let mut pixels = Vec::new();
        if line.len() == 1 {
            pixels.push(line[0]);
        } else {
            for seg in line.windows(2) {
                let pts = bresenham(seg[0], seg[1]);
                // Segment joints would otherwise be counted twice.
                let skip = usize::from(!pixels.is_empty());
                pixels.extend(pts.into_iter().skip(skip));
            }
        }
        rasters.push(pixels);
    }
    if let Some(first) = flows.first() {
        for (li, pixels) in rasters.iter().enumerate() {
            for &(x, y) in pixels {
                if x >= first.width || y >= first.height {
                    return Err(Error::parameter(format!(
                        "polyline {li} leaves the {}x{} frame at ({x},{y})",
                        first.width, first.height
                    )));
                }
            }
        }
    }
    Ok(rasters
        .iter()
        .map(|pixels| {
            flows
                .iter()
                .map(|f| {
                    let sum: f64 = pixels
                        .iter()
                        .map(|&(x, y)| f.magnitude[y * f.width + x] as f64)
                        .sum();
                    (sum / pixels.len() as f64) as f32
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::enhance_contrast;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture with full contrast: blurred noise, stretched.
    fn textured_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        let data: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let f = Frame::new(w, h, 1, data).unwrap();
        let f = gaussian_blur(&f, 7, Some(1.5)).unwrap();
        enhance_contrast(&f, 0.01).unwrap()
    }

    fn interior_mean(field: &[f32], w: usize, h: usize, margin: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                sum += field[y * w + x] as f64;
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let f = textured_field(&mut rng, 64, 64);
        let flow = farneback_flow(&f, &f, &FlowParams::default()).unwrap();
        let max = flow
            .dx
            .iter()
            .chain(&flow.dy)
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max < 0.05, "max |d| = {max}");
    }

    #[test]
    fn integer_shift_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let field = textured_field(&mut rng, 160, 160);
        let prev = field.crop(16, 16, 128, 128).unwrap();
        let next = field.crop(14, 16, 128, 128).unwrap(); // content moves +2 in x
        let flow = farneback_flow(&prev, &next, &FlowParams::default()).unwrap();
        let mean_dx = interior_mean(&flow.dx, 128, 128, 20);
        let mean_abs_dy = {
            let abs: Vec<f32> = flow.dy.iter().map(|v| v.abs()).collect();
            interior_mean(&abs, 128, 128, 20)
        };
        assert!((1.6..=2.4).contains(&mean_dx), "mean dx {mean_dx}");
        assert!(mean_abs_dy < 0.3, "mean |dy| {mean_abs_dy}");
    }

    #[test]
    fn diagonal_shift_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let field = textured_field(&mut rng, 160, 160);
        let prev = field.crop(16, 16, 128, 128).unwrap();
        let next = field.crop(17, 17, 128, 128).unwrap(); // content moves (−1,−1)
        let flow = farneback_flow(&prev, &next, &FlowParams::default()).unwrap();
        let mean_dx = interior_mean(&flow.dx, 128, 128, 20);
        let mean_dy = interior_mean(&flow.dy, 128, 128, 20);
        assert!((mean_dx + 1.0).abs() <= 0.2, "mean dx {mean_dx}");
        assert!((mean_dy + 1.0).abs() <= 0.2, "mean dy {mean_dy}");
    }

    #[test]
    fn doubling_speed_roughly_doubles_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let field = textured_field(&mut rng, 160, 96);
        let base = field.crop(16, 16, 96, 64).unwrap();
        let shift1 = field.crop(15, 16, 96, 64).unwrap();
        let shift2 = field.crop(14, 16, 96, 64).unwrap();
        let p = FlowParams::default();
        let m1 = to_polar(&farneback_flow(&base, &shift1, &p).unwrap());
        let m2 = to_polar(&farneback_flow(&base, &shift2, &p).unwrap());
        let mean1 = interior_mean(&m1.magnitude, 96, 64, 20);
        let mean2 = interior_mean(&m2.magnitude, 96, 64, 20);
        let ratio = mean2 / mean1;
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio} ({mean1} → {mean2})");
    }

    #[test]
    fn rejects_mismatched_frames_and_bad_params() {
        let a = Frame::zeros(32, 32, 1);
        let b = Frame::zeros(32, 16, 1);
        assert!(farneback_flow(&a, &b, &FlowParams::default()).is_err());
        let bad = FlowParams {
            pyramid_scale: 1.5,
            ..FlowParams::default()
        };
        assert!(farneback_flow(&a, &a, &bad).is_err());
        let bad = FlowParams {
            poly_n: 4,
            ..FlowParams::default()
        };
        assert!(farneback_flow(&a, &a, &bad).is_err());
    }

    #[test]
    fn polar_conversion_convention() {
        let flow = FlowField {
            width: 2,
            height: 1,
            dx: vec![0.0, 3.0],
            dy: vec![0.0, 4.0],
        };
        let p = to_polar(&flow);
        assert_eq!(p.magnitude[0], 0.0);
        assert_eq!(p.angle[0], 0.0);
        assert!((p.magnitude[1] - 5.0).abs() < 1e-6);
        assert!((p.angle[1] - 0.9272952).abs() < 1e-6);
    }

    #[test]
    fn polar_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let n = 256usize;
        // Per-frame capillary displacements live well under 2 px; f32
        // magnitude/angle storage holds the round trip under 1e-6 there.
        let dx: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dy: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let flow = FlowField {
            width: 16,
            height: 16,
            dx: dx.clone(),
            dy: dy.clone(),
        };
        let p = to_polar(&flow);
        for i in 0..n {
            let rx = p.magnitude[i] as f64 * (p.angle[i] as f64).cos();
            let ry = p.magnitude[i] as f64 * (p.angle[i] as f64).sin();
            assert!((rx - dx[i] as f64).abs() < 1e-6, "dx {} vs {rx}", dx[i]);
            assert!((ry - dy[i] as f64).abs() < 1e-6, "dy {} vs {ry}", dy[i]);
            assert!(p.magnitude[i] >= 0.0);
            assert!((0.0..std::f32::consts::TAU).contains(&p.angle[i]));
        }
    }

    fn flat_polar(w: usize, h: usize, mag: f32) -> PolarFlow {
        PolarFlow {
            width: w,
            height: h,
            magnitude: vec![mag; w * h],
            angle: vec![0.0; w * h],
        }
    }

    #[test]
    fn probe_line_over_still_region_reads_zero() {
        let mut flow = flat_polar(64, 64, 0.02);
        // A horizontal fast channel at rows 30–33.
        for y in 30..34 {
            for x in 0..64 {
                flow.magnitude[y * 64 + x] = 1.5;
            }
        }
        let lines = vec![
            vec![(5usize, 10usize), (58, 10)],    // quiet region
            vec![(5usize, 31usize), (58, 31)],    // inside the channel
        ];
        let series = probe_lines(&[flow], &lines).unwrap();
        assert!(series[0][0] < 0.1, "quiet line reads {}", series[0][0]);
        assert!(
            series[1][0] > 10.0 * series[0][0],
            "channel {} vs outside {}",
            series[1][0],
            series[0][0]
        );
    }

    #[test]
    fn probe_lines_edge_cases() {
        let out = probe_lines(&[], &[vec![(0, 0), (5, 5)]]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_empty());

        let flow = flat_polar(16, 16, 0.5);
        assert!(probe_lines(&[flow.clone()], &[vec![(0, 0), (20, 0)]]).is_err());

        // Multi-segment polyline: joint pixels counted once.
        let series = probe_lines(&[flow], &[vec![(0, 0), (5, 0), (5, 5)]]).unwrap();
        assert!((series[0][0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let pts = bresenham((2, 3), (10, 7));
        assert_eq!(*pts.first().unwrap(), (2, 3));
        assert_eq!(*pts.last().unwrap(), (10, 7));
        for pair in pts.windows(2) {
            assert!(pair[0].0.abs_diff(pair[1].0) <= 1);
            assert!(pair[0].1.abs_diff(pair[1].1) <= 1);
        }
    }
}
