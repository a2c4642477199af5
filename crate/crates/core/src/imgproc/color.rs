//! sRGB ↔ CIELAB conversion (D65 white point).

use crate::error::{Error, Result};
use crate::frame::Frame;

/// CIELAB planes: L in [0, 100], a/b in roughly [-128, 127].
#[derive(Debug, Clone)]
pub struct LabPlanes {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts an RGB frame to CIELAB planes.
pub fn rgb_to_lab(frame: &Frame) -> Result<LabPlanes> {
    if frame.channels() != 3 {
        return Err(Error::parameter("CIELAB conversion expects an RGB frame"));
    }
    let n = frame.width() * frame.height();
    let (rp, gp, bp) = (frame.plane(0), frame.plane(1), frame.plane(2));
    let mut l = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let rl = srgb_to_linear(rp[i] as f64);
        let gl = srgb_to_linear(gp[i] as f64);
        let bl = srgb_to_linear(bp[i] as f64);
        let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
        let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
        let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
        let fx = lab_f(x / WHITE[0]);
        let fy = lab_f(y / WHITE[1]);
        let fz = lab_f(z / WHITE[2]);
        l.push((116.0 * fy - 16.0) as f32);
        a.push((500.0 * (fx - fy)) as f32);
        b.push((200.0 * (fy - fz)) as f32);
    }
    Ok(LabPlanes {
        width: frame.width(),
        height: frame.height(),
        l,
        a,
        b,
    })
}

/// Converts CIELAB planes back to an RGB frame, clipping out-of-gamut values.
pub fn lab_to_rgb(lab: &LabPlanes) -> Frame {
    let n = lab.width * lab.height;
    let mut data = vec![0.0f32; n * 3];
    for i in 0..n {
        let fy = (lab.l[i] as f64 + 16.0) / 116.0;
        let fx = fy + lab.a[i] as f64 / 500.0;
        let fz = fy - lab.b[i] as f64 / 200.0;
        let x = WHITE[0] * lab_f_inv(fx);
        let y = WHITE[1] * lab_f_inv(fy);
        let z = WHITE[2] * lab_f_inv(fz);
        let rl = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
        let gl = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
        let bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
        data[i] = linear_to_srgb(rl).clamp(0.0, 1.0) as f32;
        data[n + i] = linear_to_srgb(gl).clamp(0.0, 1.0) as f32;
        data[2 * n + i] = linear_to_srgb(bl).clamp(0.0, 1.0) as f32;
    }
    Frame::from_planes(lab.width, lab.height, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_stays_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let f = Frame::new(16, 16, 3, data).unwrap();
        let back = lab_to_rgb(&rgb_to_lab(&f).unwrap());
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn reference_colors_land_in_expected_ranges() {
        let f = Frame::new(
            1,
            4,
            3,
            vec![
                1.0, 0.0, 1.0, 0.5, // R
                1.0, 0.0, 0.0, 0.5, // G
                1.0, 0.0, 0.0, 0.5, // B
            ],
        )
        .unwrap();
        let lab = rgb_to_lab(&f).unwrap();
        // White: L ≈ 100, a ≈ b ≈ 0.
        assert!((lab.l[0] - 100.0).abs() < 0.1);
        assert!(lab.a[0].abs() < 0.1 && lab.b[0].abs() < 0.1);
        // Black: everything ≈ 0.
        assert!(lab.l[1].abs() < 0.1);
        // Pure red: strongly positive a.
        assert!(lab.a[2] > 50.0);
        // Mid gray: neutral chroma.
        assert!(lab.a[3].abs() < 0.1 && lab.b[3].abs() < 0.1);
    }

    #[test]
    fn rejects_grayscale_input() {
        let f = Frame::zeros(8, 8, 1);
        assert!(rgb_to_lab(&f).is_err());
    }
}
