//! Non-local-means denoising in CIELAB space.
//!
//! Luminance is denoised on its own; the two chroma planes are denoised
//! jointly so colored speckle cannot decorrelate them. Patch distances are
//! Gaussian-weighted and converted to weights with an exponential kernel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::imgproc::color::{lab_to_rgb, rgb_to_lab};
use crate::imgproc::{default_gaussian_sigma, gaussian_kernel_1d};

/// Denoises a frame with non-local means.
///
/// RGB input is processed in CIELAB; grayscale input is processed directly.
/// `strength_h` is the exponential-kernel bandwidth in unit-intensity terms.
pub fn nlm_denoise(frame: &Frame, strength_h: f32, patch: usize, search: usize) -> Result<Frame> {
    if patch % 2 == 0 || search % 2 == 0 || patch == 0 || search == 0 {
        return Err(Error::parameter("patch and search sizes must be odd"));
    }
    if patch > search {
        return Err(Error::parameter(format!(
            "patch {patch} must not exceed search window {search}"
        )));
    }
    if strength_h <= 0.0 {
        return Err(Error::parameter("strength must be positive"));
    }
    let (w, h) = (frame.width(), frame.height());
    if frame.is_gray() {
        let out = nlm_planes(&[frame.plane(0)], w, h, strength_h, patch, search);
        return Ok(Frame::from_planes(w, h, 1, out).with_pitch(frame.pixel_pitch_um));
    }
    let lab = rgb_to_lab(frame)?;
    // Distances are computed on unit-normalized planes so the bandwidth
    // means the same thing for luminance and chroma.
    let ln: Vec<f32> = lab.l.iter().map(|v| v / 100.0).collect();
    let an: Vec<f32> = lab.a.iter().map(|v| (v + 128.0) / 255.0).collect();
    let bn: Vec<f32> = lab.b.iter().map(|v| (v + 128.0) / 255.0).collect();
    let l_out = nlm_planes(&[&ln], w, h, strength_h, patch, search);
    let ab_out = nlm_planes(&[&an, &bn], w, h, strength_h, patch, search);
    let denoised = crate::imgproc::color::LabPlanes {
        width: w,
        height: h,
        l: l_out.iter().map(|v| v * 100.0).collect(),
        a: ab_out[..w * h].iter().map(|v| v * 255.0 - 128.0).collect(),
        b: ab_out[w * h..].iter().map(|v| v * 255.0 - 128.0).collect(),
    };
    Ok(lab_to_rgb(&denoised).with_pitch(frame.pixel_pitch_um))
}

/// Runs NLM over one or more planes that share the same weight field.
///
/// Returns the filtered planes concatenated in input order. Patch distance
/// is averaged across planes so multi-plane calls stay on the same scale
/// as single-plane ones.
fn nlm_planes(
    planes: &[&[f32]],
    width: usize,
    height: usize,
    strength_h: f32,
    patch: usize,
    search: usize,
) -> Vec<f32> {
    let ph = (patch / 2) as isize;
    let sh = (search / 2) as isize;
    let taps = gaussian_kernel_1d(patch, default_gaussian_sigma(patch));
    // 2-D patch weights as an outer product; they sum to one.
    let mut pw = vec![0.0f32; patch * patch];
    for i in 0..patch {
        for j in 0..patch {
            pw[i * patch + j] = taps[i] * taps[j];
        }
    }
    let h2 = (strength_h as f64) * (strength_h as f64);
    let n_planes = planes.len();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut out = vec![0.0f32; n_planes * width * height];
    // Rows are independent, so indexed parallelism cannot reorder results.
    let rows: Vec<Vec<f32>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row_out = vec![0.0f32; n_planes * width];
            for x in 0..width {
                let mut weight_sum = 0.0f64;
                let mut acc = vec![0.0f64; n_planes];
                for dy in -sh..=sh {
                    for dx in -sh..=sh {
                        let cy = y as isize + dy;
                        let cx = x as isize + dx;
                        if cy < 0 || cy >= height as isize || cx < 0 || cx >= width as isize {
                            continue;
                        }
                        // Gaussian-weighted squared patch distance averaged
                        // over planes.
                        let mut dist = 0.0f64;
                        for (pi, py) in (-ph..=ph).enumerate() {
                            for (pj, px) in (-ph..=ph).enumerate() {
                                let ay = clamp(y as isize + py, height);
                                let ax = clamp(x as isize + px, width);
                                let by = clamp(cy + py, height);
                                let bx = clamp(cx + px, width);
                                let wgt = pw[pi * patch + pj] as f64;
                                for plane in planes {
                                    let d = (plane[ay * width + ax] - plane[by * width + bx]) as f64;
                                    dist += wgt * d * d;
                                }
                            }
                        }
                        dist /= n_planes as f64;
                        let weight = (-dist / h2).exp();
                        weight_sum += weight;
                        for (p, plane) in planes.iter().enumerate() {
                            acc[p] += weight * plane[cy as usize * width + cx as usize] as f64;
                        }
                    }
                }
                for p in 0..n_planes {
                    row_out[p * width + x] = (acc[p] / weight_sum) as f32;
                }
            }
            row_out
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for p in 0..n_planes {
            out[p * width * height + y * width..p * width * height + (y + 1) * width]
                .copy_from_slice(&row[p * width..(p + 1) * width]);
        }
    }
    out
}
