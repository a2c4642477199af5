//! Adaptive per-pixel Gaussian-mixture background model.
//!
//! Each pixel carries up to `k_max` Gaussian components over intensity.
//! Components gain weight while they keep matching observations, so the
//! stable appearance of the scene accumulates in the heaviest components
//! while transient objects occupy light ones that decay away. The model
//! tolerates slow global illumination drift because matched means track
//! the signal at the learning rate.

use crate::error::{Error, Result};
use crate::frame::{BinaryMask, Frame};

const VAR_MIN: f32 = 1e-4;
const VAR_MAX: f32 = 0.25;
/// Variance given to a freshly created component.
const VAR_INIT: f32 = 0.01;

/// Tunable parameters for [`BackgroundModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundParams {
    /// Maximum Gaussian components per pixel.
    pub k_max: usize,
    /// Blend factor for weight/mean/variance updates.
    pub learning_rate: f32,
    /// Squared-Mahalanobis match gate.
    pub variance_threshold: f32,
    /// Cumulative weight that counts as "background".
    pub background_ratio: f32,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            k_max: 5,
            learning_rate: 0.01,
            variance_threshold: 16.0,
            background_ratio: 0.9,
        }
    }
}

/// Per-pixel Gaussian mixture over grayscale intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    width: usize,
    height: usize,
    params: BackgroundParams,
    frames_seen: u64,
    /// Active component count per pixel.
    counts: Vec<u8>,
    /// Component fields, laid out `[pixel * k_max + k]`.
    weights: Vec<f32>,
    means: Vec<f32>,
    vars: Vec<f32>,
}

impl BackgroundModel {
    pub fn new(width: usize, height: usize) -> Self {
        Self::with_params(width, height, BackgroundParams::default()).unwrap()
    }

    pub fn with_params(width: usize, height: usize, params: BackgroundParams) -> Result<Self> {
        if params.k_max == 0 || params.k_max > 16 {
            return Err(Error::parameter("component count must be in 1..=16"));
        }
        if !(0.0..1.0).contains(&params.learning_rate) || params.learning_rate <= 0.0 {
            return Err(Error::parameter("learning rate must lie in (0, 1)"));
        }
        if params.variance_threshold <= 0.0 {
            return Err(Error::parameter("variance threshold must be positive"));
        }
        if !(0.0..=1.0).contains(&params.background_ratio) {
            return Err(Error::parameter("background ratio must lie in [0, 1]"));
        }
        let n = width * height;
        Ok(Self {
            width,
            height,
            params,
            frames_seen: 0,
            counts: vec![0; n],
            weights: vec![0.0; n * params.k_max],
            means: vec![0.0; n * params.k_max],
            vars: vec![0.0; n * params.k_max],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Folds one grayscale frame into the model and returns the foreground
    /// mask: pixels whose observation was not explained by the heavy
    /// (background-designated) components.
    pub fn update(&mut self, frame: &Frame) -> Result<BinaryMask> {
        if !frame.is_gray() {
            return Err(Error::parameter("background model expects grayscale frames"));
        }
        if frame.width() != self.width || frame.height() != self.height {
            return Err(Error::parameter(format!(
                "frame {}x{} does not match model {}x{}",
                frame.width(),
                frame.height(),
                self.width,
                self.height
            )));
        }
        let k_max = self.params.k_max;
        let lr = self.params.learning_rate;
        let gate = self.params.variance_threshold;
        let ratio = self.params.background_ratio;
        let plane = frame.plane(0);
        let mut fg = BinaryMask::new(self.width, self.height);
        for p in 0..self.width * self.height {
            let v = plane[p];
            let base = p * k_max;
            let count = self.counts[p] as usize;
            let w = &mut self.weights[base..base + k_max];
            let m = &mut self.means[base..base + k_max];
            let s = &mut self.vars[base..base + k_max];

            // Nearest component by squared Mahalanobis distance, gated.
            let mut matched: Option<usize> = None;
            let mut best = f32::INFINITY;
            for k in 0..count {
                let d = v - m[k];
                let dist = d * d / s[k];
                if dist < gate && dist < best {
                    best = dist;
                    matched = Some(k);
                }
            }

            match matched {
                Some(k) if count > 0 => {
                    for wk in w[..count].iter_mut() {
                        *wk *= 1.0 - lr;
                    }
                    w[k] += lr;
                    let d = v - m[k];
                    m[k] += lr * d;
                    let d = v - m[k];
                    s[k] = (s[k] + lr * (d * d - s[k])).clamp(VAR_MIN, VAR_MAX);
                }
                _ => {
                    if count == 0 {
                        // First observation owns the pixel outright.
                        w[0] = 1.0;
                        m[0] = v;
                        s[0] = VAR_INIT;
                        self.counts[p] = 1;
                    } else {
                        for wk in w[..count].iter_mut() {
                            *wk *= 1.0 - lr;
                        }
                        let slot = if count < k_max {
                            self.counts[p] = count as u8 + 1;
                            count
                        } else {
                            // Replace the lightest component.
                            let mut weakest = 0;
                            for k in 1..count {
                                if w[k] < w[weakest] {
                                    weakest = k;
                                }
                            }
                            weakest
                        };
                        w[slot] = lr;
                        m[slot] = v;
                        s[slot] = VAR_INIT;
                    }
                }
            }

            let count = self.counts[p] as usize;
            // Renormalize weights and re-sort by weight/√variance so the
            // most stable components always lead.
            let total: f32 = w[..count].iter().sum();
            for wk in w[..count].iter_mut() {
                *wk /= total;
            }
            for i in 1..count {
                let mut j = i;
                while j > 0 && w[j] / s[j].sqrt() > w[j - 1] / s[j - 1].sqrt() {
                    w.swap(j, j - 1);
                    m.swap(j, j - 1);
                    s.swap(j, j - 1);
                    j -= 1;
                }
            }

            // Background designation: the leading components that together
            // hold at least `ratio` of the weight. The observation is
            // foreground when no such component explains it.
            let mut cum = 0.0f32;
            let mut designated = count;
            for k in 0..count {
                cum += w[k];
                if cum >= ratio {
                    designated = k + 1;
                    break;
                }
            }
            let mut background = false;
            for k in 0..designated {
                let d = v - m[k];
                if d * d / s[k] < gate {
                    background = true;
                    break;
                }
            }
            if !background {
                fg.set(p % self.width, p / self.width, true);
            }
        }
        self.frames_seen += 1;
        Ok(fg)
    }

    /// Weighted mean of the background-designated components per pixel.
    pub fn background_image(&self) -> Result<Frame> {
        if self.frames_seen == 0 {
            return Err(Error::state("background model has not seen any frames"));
        }
        let k_max = self.params.k_max;
        let ratio = self.params.background_ratio;
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(n);
        for p in 0..n {
            let base = p * k_max;
            let count = self.counts[p] as usize;
            let mut cum = 0.0f32;
            let mut designated = count;
            for k in 0..count {
                cum += self.weights[base + k];
                if cum >= ratio {
                    designated = k + 1;
                    break;
                }
            }
            let mut wsum = 0.0f32;
            let mut acc = 0.0f32;
            for k in 0..designated {
                wsum += self.weights[base + k];
                acc += self.weights[base + k] * self.means[base + k];
            }
            data.push(if wsum > 0.0 { acc / wsum } else { 0.0 });
        }
        Ok(Frame::from_planes(self.width, self.height, 1, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> Frame {
        let data = (0..w * h)
            .map(|i| {
                let x = (i % w) as f32;
                let y = (i / w) as f32;
                0.4 + 0.1 * ((x * 0.3).sin() + (y * 0.2).cos()) * 0.5
            })
            .collect();
        Frame::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn static_scene_becomes_background_quickly() {
        let f = texture(32, 32);
        let mut model = BackgroundModel::new(32, 32);
        for i in 0..50 {
            let fg = model.update(&f).unwrap();
            if i >= 10 {
                assert_eq!(fg.count(), 0, "frame {i} still has foreground");
            }
        }
    }

    #[test]
    fn moving_blob_is_flagged() {
        let base = texture(48, 32);
        let mut model = BackgroundModel::new(48, 32);
        for _ in 0..30 {
            model.update(&base).unwrap();
        }
        for step in 0..8usize {
            let mut data = base.data().to_vec();
            let x0 = 5 + step * 2;
            for y in 10..15 {
                for x in x0..x0 + 5 {
                    data[y * 48 + x] = 0.95;
                }
            }
            let f = Frame::new(48, 32, 1, data).unwrap();
            let fg = model.update(&f).unwrap();
            let mut blob_hits = 0;
            let mut elsewhere = 0;
            for y in 0..32 {
                for x in 0..48 {
                    if fg.get(x, y) {
                        if (10..15).contains(&y) && (x0..x0 + 5).contains(&x) {
                            blob_hits += 1;
                        } else {
                            elsewhere += 1;
                        }
                    }
                }
            }
            assert!(blob_hits >= 20, "step {step}: blob hits {blob_hits}");
            assert!(elsewhere <= 10, "step {step}: stray foreground {elsewhere}");
        }
    }

    #[test]
    fn slow_brightness_ramp_stays_background() {
        let base = texture(32, 32);
        let mut model = BackgroundModel::new(32, 32);
        for _ in 0..10 {
            model.update(&base).unwrap();
        }
        for step in 0..60 {
            let data = base
                .data()
                .iter()
                .map(|v| (v + 0.001 * (step + 1) as f32).min(1.0))
                .collect();
            let f = Frame::new(32, 32, 1, data).unwrap();
            let fg = model.update(&f).unwrap();
            let fraction = fg.count() as f32 / (32.0 * 32.0);
            assert!(fraction < 0.02, "step {step}: foreground fraction {fraction}");
        }
    }

    #[test]
    fn background_image_matches_constant_scene() {
        let f = Frame::constant(16, 16, 1, 0.42);
        let mut model = BackgroundModel::new(16, 16);
        for _ in 0..30 {
            model.update(&f).unwrap();
        }
        let bg = model.background_image().unwrap();
        for v in bg.data() {
            assert!((v - 0.42).abs() < 1e-3);
        }
    }

    #[test]
    fn single_update_background_equals_frame() {
        let f = texture(16, 16);
        let mut model = BackgroundModel::new(16, 16);
        model.update(&f).unwrap();
        let bg = model.background_image().unwrap();
        for (a, b) in bg.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn transient_blob_leaves_background_clean() {
        let base = texture(32, 32);
        let mut model = BackgroundModel::new(32, 32);
        for _ in 0..30 {
            model.update(&base).unwrap();
        }
        for _ in 0..5 {
            let mut data = base.data().to_vec();
            for y in 12..20 {
                for x in 12..20 {
                    data[y * 32 + x] = 0.95;
                }
            }
            model.update(&Frame::new(32, 32, 1, data).unwrap()).unwrap();
        }
        for _ in 0..15 {
            model.update(&base).unwrap();
        }
        let bg = model.background_image().unwrap();
        let max_diff = bg
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 0.05, "background polluted by transient: {max_diff}");
    }

    #[test]
    fn replay_reproduces_model_exactly() {
        let frames: Vec<Frame> = (0..20)
            .map(|i| {
                let data = (0..16 * 16)
                    .map(|p| ((p as f32 * 0.37 + i as f32 * 0.11).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
                    .collect();
                Frame::new(16, 16, 1, data).unwrap()
            })
            .collect();
        let mut a = BackgroundModel::new(16, 16);
        let mut b = BackgroundModel::new(16, 16);
        for f in &frames {
            a.update(f).unwrap();
        }
        for f in &frames {
            b.update(f).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_mismatched_and_unseen() {
        let mut model = BackgroundModel::new(16, 16);
        assert!(model.update(&Frame::zeros(8, 8, 1)).is_err());
        assert!(model.update(&Frame::zeros(16, 16, 3)).is_err());
        assert!(model.background_image().is_err());
    }
}
