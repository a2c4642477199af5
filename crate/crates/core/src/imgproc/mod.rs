//! Deterministic image-processing primitives shared by every pipeline stage.
//!
//! All operations are pure functions: identical inputs produce bit-identical
//! outputs. The border policy is clamp-to-edge throughout.

pub mod color;
pub mod nlm;

use crate::error::{Error, Result};
use crate::frame::{BinaryMask, Frame};

/// Kernel-size heuristic for a Gaussian sigma when the caller gives none.
pub fn default_gaussian_sigma(window: usize) -> f32 {
    0.3 * ((window as f32 - 1.0) * 0.5 - 1.0) + 0.8
}

fn check_odd(name: &str, k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::parameter(format!("{name} must be odd, got {k}")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of the given odd length.
pub(crate) fn gaussian_kernel_1d(window: usize, sigma: f32) -> Vec<f32> {
    let half = (window / 2) as isize;
    let mut taps = Vec::with_capacity(window);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    for i in -half..=half {
        taps.push((-((i * i) as f64) / s2).exp());
    }
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| (t / sum) as f32).collect()
}

/// Separable correlation over one plane with clamped borders.
///
/// Applies `taps_x` along rows, then `taps_y` along columns. Tap index `t`
/// reads offset `t - len/2`, so odd-length taps are centered and
/// even-length taps lean one pixel left/up.
pub(crate) fn separable_filter(
    plane: &[f32],
    width: usize,
    height: usize,
    taps_x: &[f32],
    taps_y: &[f32],
) -> Vec<f32> {
    let half_x = (taps_x.len() / 2) as isize;
    let mut tmp = vec![0.0f32; width * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0f32;
            for (t, tap) in taps_x.iter().enumerate() {
                let sx = (x as isize + t as isize - half_x).clamp(0, width as isize - 1) as usize;
                acc += row[sx] * tap;
            }
            out[x] = acc;
        }
    }
    let half_y = (taps_y.len() / 2) as isize;
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f32;
            for (t, tap) in taps_y.iter().enumerate() {
                let sy = (y as isize + t as isize - half_y).clamp(0, height as isize - 1) as usize;
                acc += tmp[sy as usize * width + x] * tap;
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Median filter with a square window; edges replicate the nearest pixel.
pub fn median_blur(frame: &Frame, kernel: usize) -> Result<Frame> {
    check_odd("median kernel", kernel)?;
    if kernel > frame.width().min(frame.height()) {
        return Err(Error::parameter(format!(
            "median kernel {kernel} exceeds frame dimensions {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let half = (kernel / 2) as isize;
    let mut data = Vec::with_capacity(w * h * frame.channels());
    let mut window = Vec::with_capacity(kernel * kernel);
    for c in 0..frame.channels() {
        let plane = frame.plane(c);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -half..=half {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -half..=half {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(plane[sy * w + sx]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                data.push(*m);
            }
        }
    }
    Ok(Frame::from_planes(w, h, frame.channels(), data).with_pitch(frame.pixel_pitch_um))
}

/// Separable Gaussian blur. `sigma = None` uses the kernel-size heuristic.
pub fn gaussian_blur(frame: &Frame, window: usize, sigma: Option<f32>) -> Result<Frame> {
    check_odd("gaussian window", window)?;
    let sigma = sigma.unwrap_or_else(|| default_gaussian_sigma(window));
    if sigma <= 0.0 {
        return Err(Error::parameter(format!("sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_kernel_1d(window, sigma);
    let (w, h) = (frame.width(), frame.height());
    let mut data = Vec::with_capacity(w * h * frame.channels());
    for c in 0..frame.channels() {
        data.extend(separable_filter(frame.plane(c), w, h, &taps, &taps));
    }
    Ok(Frame::from_planes(w, h, frame.channels(), data).with_pitch(frame.pixel_pitch_um))
}

/// Which histogram tail(s) the contrast stretch trims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastMode {
    /// Trim the full cutoff fraction from the dark end only. Brightens the
    /// image; the upper bound is the brightest occupied bin.
    DarkTail,
    /// Trim half the cutoff fraction from each end.
    Symmetric,
}

/// Histogram-based contrast stretch using the default dark-tail mode.
pub fn enhance_contrast(frame: &Frame, cutoff_fraction: f32) -> Result<Frame> {
    enhance_contrast_mode(frame, cutoff_fraction, ContrastMode::DarkTail)
}

/// Histogram-based contrast stretch.
///
/// Per channel: build a 256-bin histogram, locate the intensity bounds that
/// exclude `cutoff_fraction` of cumulative mass per the mode, then linearly
/// rescale `[low, high]` to `[0, 1]` with clipping. The map is monotone, so
/// pixel ordering within a channel is preserved. Degenerate histograms
/// (single occupied bin) leave the channel untouched.
pub fn enhance_contrast_mode(frame: &Frame, cutoff_fraction: f32, mode: ContrastMode) -> Result<Frame> {
    if !(0.0..0.5).contains(&cutoff_fraction) {
        return Err(Error::parameter(format!(
            "cutoff fraction must lie in [0, 0.5), got {cutoff_fraction}"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let n = w * h;
    let mut data = Vec::with_capacity(n * frame.channels());
    for c in 0..frame.channels() {
        let plane = frame.plane(c);
        let mut hist = [0usize; 256];
        for &v in plane {
            hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
        }
        let (low_target, high_target) = match mode {
            ContrastMode::DarkTail => (cutoff_fraction, 0.0),
            ContrastMode::Symmetric => (cutoff_fraction * 0.5, cutoff_fraction * 0.5),
        };
        let low_count = (low_target as f64 * n as f64) as usize;
        let high_count = (high_target as f64 * n as f64) as usize;
        // Lowest bin at which the cumulative count exceeds the trim target.
        let mut cum = 0usize;
        let mut low_bin = 255usize;
        for (i, &cnt) in hist.iter().enumerate() {
            cum += cnt;
            if cum > low_count {
                low_bin = i;
                break;
            }
        }
        let mut cum = 0usize;
        let mut high_bin = 0usize;
        for (i, &cnt) in hist.iter().enumerate().rev() {
            cum += cnt;
            if cum > high_count {
                high_bin = i;
                break;
            }
        }
        if low_bin >= high_bin {
            data.extend_from_slice(plane);
            continue;
        }
        let low = low_bin as f32 / 255.0;
        let span = (high_bin - low_bin) as f32 / 255.0;
        for &v in plane {
            data.push(((v - low) / span).clamp(0.0, 1.0));
        }
    }
    Ok(Frame::from_planes(w, h, frame.channels(), data).with_pitch(frame.pixel_pitch_um))
}

/// Per-pixel structural-similarity scores plus their mean.
#[derive(Debug, Clone)]
pub struct SsimResult {
    pub mean: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major per-pixel SSIM values in [-1, 1].
    pub map: Vec<f32>,
}

/// Structural similarity between two frames over a uniform square window.
///
/// RGB inputs are collapsed to luma first. Local statistics use a box
/// window with clamped borders, and the stabilizers are the canonical
/// `C1 = (0.01·L)²`, `C2 = (0.03·L)²` with `L = 1` for unit-range data.
pub fn ssim(reference: &Frame, test: &Frame, window: usize) -> Result<SsimResult> {
    check_odd("ssim window", window)?;
    if reference.width() != test.width() || reference.height() != test.height() {
        return Err(Error::parameter(format!(
            "ssim dimensions differ: {}x{} vs {}x{}",
            reference.width(),
            reference.height(),
            test.width(),
            test.height()
        )));
    }
    let a = reference.to_gray();
    let b = test.to_gray();
    let (w, h) = (a.width(), a.height());
    let x = a.plane(0);
    let y = b.plane(0);
    let box_taps = vec![1.0f32 / window as f32; window];
    let xx: Vec<f32> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f32> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f32> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = separable_filter(x, w, h, &box_taps, &box_taps);
    let my = separable_filter(y, w, h, &box_taps, &box_taps);
    let exx = separable_filter(&xx, w, h, &box_taps, &box_taps);
    let eyy = separable_filter(&yy, w, h, &box_taps, &box_taps);
    let exy = separable_filter(&xy, w, h, &box_taps, &box_taps);
    const C1: f32 = 0.01 * 0.01;
    const C2: f32 = 0.03 * 0.03;
    let mut map = Vec::with_capacity(w * h);
    let mut sum = 0.0f64;
    for i in 0..w * h {
        let (mx, my) = (mx[i], my[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cov = exy[i] - mx * my;
        let num = (2.0 * mx * my + C1) * (2.0 * cov + C2);
        let den = (mx * mx + my * my + C1) * (vx + vy + C2);
        let s = num / den;
        sum += s as f64;
        map.push(s);
    }
    Ok(SsimResult {
        mean: sum / (w * h) as f64,
        width: w,
        height: h,
        map,
    })
}

/// Adaptive threshold against a Gaussian-weighted local mean.
///
/// A pixel is set when its value exceeds the local mean by more than
/// `offset`, so flat regions always come out empty for positive offsets.
pub fn adaptive_gaussian_threshold(frame: &Frame, block: usize, offset: f32) -> Result<BinaryMask> {
    check_odd("threshold block", block)?;
    if !frame.is_gray() {
        return Err(Error::parameter("adaptive threshold expects a grayscale frame"));
    }
    let taps = gaussian_kernel_1d(block, default_gaussian_sigma(block));
    let (w, h) = (frame.width(), frame.height());
    let local_mean = separable_filter(frame.plane(0), w, h, &taps, &taps);
    let plane = frame.plane(0);
    let bits = (0..w * h).map(|i| plane[i] - local_mean[i] > offset).collect();
    BinaryMask::from_bits(w, h, bits)
}

fn morph3(mask: &BinaryMask, dilate: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            'probe: for dy in -1isize..=1 {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let v = mask.get(sx, sy);
                    if dilate && v {
                        hit = true;
                        break 'probe;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'probe;
                    }
                }
            }
            out.set(x, y, hit);
        }
    }
    out
}

/// Erosion with a 3×3 square structuring element, clamped borders.
pub fn erode3(mask: &BinaryMask) -> BinaryMask {
    morph3(mask, false)
}

/// Dilation with a 3×3 square structuring element, clamped borders.
pub fn dilate3(mask: &BinaryMask) -> BinaryMask {
    morph3(mask, true)
}

/// Opening (erosion then dilation); removes isolated speckle.
pub fn morph_open3(mask: &BinaryMask) -> BinaryMask {
    dilate3(&erode3(mask))
}

/// Closing (dilation then erosion); fills pinholes.
pub fn morph_close3(mask: &BinaryMask) -> BinaryMask {
    erode3(&dilate3(mask))
}
