//! Patch classifier: a small convolutional network that decides whether a
//! proposed region contains a perfused vessel.
//!
//! The network is three 3×3 convolution/ReLU/max-pool stages (widths
//! 16/32/64) followed by a 64-unit hidden layer and a 2-way softmax —
//! about 0.29 M parameters. It is generic over the float width: `f32` in
//! production, `f64` for gradient verification.

mod layers;
mod tensor;

pub mod serial;
pub mod train;

pub use serial::{load_model, load_model_file, save_model, save_model_file};
pub use train::{train, EpochStats, TrainConfig, TrainResult};

use num_traits::Float;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::roi::RoiBox;
use layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax,
    softmax_cross_entropy, ConvLayer, LinearLayer,
};

/// Side length of a classifier input patch.
pub const PATCH_SIZE: usize = 64;
/// Classifier inputs are RGB.
pub const PATCH_CHANNELS: usize = 3;

/// Patch label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Background = 0,
    Capillary = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// A 64×64 RGB crop in [0,1], planar channel-major layout, optionally
/// labeled for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    data: Vec<f32>,
    pub label: Option<Class>,
}

impl Patch {
    pub fn new(data: Vec<f32>, label: Option<Class>) -> Result<Self> {
        let want = PATCH_CHANNELS * PATCH_SIZE * PATCH_SIZE;
        if data.len() != want {
            return Err(Error::parameter(format!(
                "patch needs {want} values (3×64×64), got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::parameter("patch values must lie in [0, 1]"));
        }
        Ok(Self { data, label })
    }

    /// Crops `roi` (grown by 10% of its larger side) out of `frame` and
    /// resamples it to classifier resolution. Grayscale input is
    /// replicated across channels.
    pub fn from_region(frame: &Frame, roi: &RoiBox) -> Result<Self> {
        let pad = ((roi.w.max(roi.h) as f32 * 0.1).round() as usize).max(1);
        let padded = roi.padded(pad, frame.width(), frame.height());
        let crop = frame.crop(padded.x, padded.y, padded.w, padded.h)?;
        let small = crop.resize_bilinear(PATCH_SIZE, PATCH_SIZE);
        let n = PATCH_SIZE * PATCH_SIZE;
        let mut data = Vec::with_capacity(PATCH_CHANNELS * n);
        if small.is_gray() {
            for _ in 0..PATCH_CHANNELS {
                data.extend_from_slice(small.plane(0));
            }
        } else {
            data.extend_from_slice(small.data());
        }
        Self::new(data, None)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mirrors the patch horizontally and/or vertically (training-time
    /// augmentation).
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Patch {
        let n = PATCH_SIZE;
        let mut out = self.data.clone();
        for c in 0..PATCH_CHANNELS {
            let src = &self.data[c * n * n..(c + 1) * n * n];
            let dst = &mut out[c * n * n..(c + 1) * n * n];
            for y in 0..n {
                let sy = if vertical { n - 1 - y } else { y };
                for x in 0..n {
                    let sx = if horizontal { n - 1 - x } else { x };
                    dst[y * n + x] = src[sy * n + sx];
                }
            }
        }
        Patch {
            data: out,
            label: self.label,
        }
    }
}

/// Layer widths. The default is the shipped classifier; smaller variants
/// exist so gradient verification can run on cheap configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Input side length; must be divisible by 8 (three 2× pools).
    pub input_hw: usize,
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub fc_hidden: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            input_hw: PATCH_SIZE,
            in_channels: PATCH_CHANNELS,
            conv_channels: [16, 32, 64],
            fc_hidden: 64,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.input_hw == 0 || self.input_hw % 8 != 0 {
            return Err(Error::parameter("input side must be a positive multiple of 8"));
        }
        if self.in_channels == 0
            || self.fc_hidden == 0
            || self.conv_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::parameter("layer widths must be ≥ 1"));
        }
        Ok(())
    }

    /// Flattened feature count entering the first fully connected layer.
    pub fn flat_dim(&self) -> usize {
        let side = self.input_hw / 8;
        self.conv_channels[2] * side * side
    }

    pub fn param_count(&self) -> usize {
        let [c1, c2, c3] = self.conv_channels;
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let fc = |din: usize, dout: usize| dout * din + dout;
        conv(self.in_channels, c1)
            + conv(c1, c2)
            + conv(c2, c3)
            + fc(self.flat_dim(), self.fc_hidden)
            + fc(self.fc_hidden, 2)
    }
}

/// Parameter gradients, one block per weight/bias buffer in declaration
/// order (conv1 w/b, conv2 w/b, conv3 w/b, fc1 w/b, fc2 w/b).
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub blocks: Vec<Vec<T>>,
}

/// The trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T = f32> {
    arch: Arch,
    conv1: ConvLayer<T>,
    conv2: ConvLayer<T>,
    conv3: ConvLayer<T>,
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
    pub rng_seed: u64,
}

/// Fresh default-architecture model with seeded He initialization.
pub fn init_model(seed: u64) -> CnnModel<f32> {
    CnnModel::init_with_arch(Arch::default(), seed).expect("default architecture is valid")
}

impl<T: Float> CnnModel<T> {
    pub fn init_with_arch(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = arch.conv_channels;
        Ok(Self {
            conv1: ConvLayer::init(&mut rng, arch.in_channels, c1, 3),
            conv2: ConvLayer::init(&mut rng, c1, c2, 3),
            conv3: ConvLayer::init(&mut rng, c2, c3, 3),
            fc1: LinearLayer::init(&mut rng, arch.flat_dim(), arch.fc_hidden),
            fc2: LinearLayer::init(&mut rng, arch.fc_hidden, 2),
            arch,
            rng_seed: seed,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.conv3.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    /// All parameter buffers in declaration order.
    pub fn param_blocks(&self) -> Vec<&[T]> {
        vec![
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
            &self.conv3.weights,
            &self.conv3.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
        ]
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
            &mut self.conv3.weights,
            &mut self.conv3.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
        ]
    }

    pub fn params_finite(&self) -> bool {
        self.param_blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        let want = self.arch.in_channels * self.arch.input_hw * self.arch.input_hw;
        if len != want {
            return Err(Error::parameter(format!(
                "input needs {want} values for this architecture, got {len}"
            )));
        }
        Ok(())
    }

    /// Class probabilities for a raw planar input.
    pub fn forward_values(&self, input: &[T]) -> Result<[T; 2]> {
        self.check_input(input.len())?;
        let logits = self.logits(input);
        let p = softmax(&logits);
        Ok([p[0], p[1]])
    }

    /// Class probabilities for a patch; index 1 is the vessel class.
    pub fn forward(&self, patch: &Patch) -> Result<[T; 2]> {
        let input: Vec<T> = patch
            .data
            .iter()
            .map(|&v| T::from(v).expect("f32 converts to model float"))
            .collect();
        self.forward_values(&input)
    }

    fn logits(&self, input: &[T]) -> Vec<T> {
        let s = self.arch.input_hw;
        let (mut y1, _) = self.conv1.forward(input, s, s);
        relu_forward(&mut y1);
        let (p1, _) = maxpool2_forward(&y1, self.conv1.out_ch, s, s);
        let (mut y2, _) = self.conv2.forward(&p1, s / 2, s / 2);
        relu_forward(&mut y2);
        let (p2, _) = maxpool2_forward(&y2, self.conv2.out_ch, s / 2, s / 2);
        let (mut y3, _) = self.conv3.forward(&p2, s / 4, s / 4);
        relu_forward(&mut y3);
        let (p3, _) = maxpool2_forward(&y3, self.conv3.out_ch, s / 4, s / 4);
        let mut h = self.fc1.forward(&p3);
        relu_forward(&mut h);
        self.fc2.forward(&h)
    }

    /// Mean cross-entropy and parameter gradients over a labeled batch of
    /// raw inputs. Examples are accumulated in order, so results are
    /// bit-reproducible.
    pub fn batch_loss_and_grads(&self, inputs: &[&[T]], labels: &[usize]) -> Result<(T, Grads<T>)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::parameter("batch needs matching, non-empty inputs and labels"));
        }
        let mut total = T::zero();
        let mut grads = Grads {
            blocks: self
                .param_blocks()
                .iter()
                .map(|b| vec![T::zero(); b.len()])
                .collect(),
        };
        for (&input, &label) in inputs.iter().zip(labels) {
            self.check_input(input.len())?;
            if label > 1 {
                return Err(Error::parameter("labels are 0 (background) or 1 (vessel)"));
            }
            let (loss, example) = self.example_grads(input, label);
            total = total + loss;
            for (acc, g) in grads.blocks.iter_mut().zip(example.blocks) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
        }
        let scale = T::one() / T::from(inputs.len()).unwrap();
        for b in &mut grads.blocks {
            for v in b {
                *v = *v * scale;
            }
        }
        Ok((total * scale, grads))
    }

    /// Mean cross-entropy and gradients over labeled patches.
    pub fn loss_and_grads(&self, batch: &[Patch]) -> Result<(T, Grads<T>)> {
        if batch.is_empty() {
            return Err(Error::parameter("batch must be non-empty"));
        }
        let mut inputs: Vec<Vec<T>> = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for p in batch {
            let label = p
                .label
                .ok_or_else(|| Error::parameter("all patches in a training batch need labels"))?;
            labels.push(label.index());
            inputs.push(
                p.data
                    .iter()
                    .map(|&v| T::from(v).expect("f32 converts to model float"))
                    .collect(),
            );
        }
        let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
        self.batch_loss_and_grads(&refs, &labels)
    }

    /// Forward with caches, backward, single example.
    fn example_grads(&self, input: &[T], label: usize) -> (T, Grads<T>) {
        let s = self.arch.input_hw;
        let (mut y1, cols1) = self.conv1.forward(input, s, s);
        relu_forward(&mut y1);
        let (p1, arg1) = maxpool2_forward(&y1, self.conv1.out_ch, s, s);
        let (mut y2, cols2) = self.conv2.forward(&p1, s / 2, s / 2);
        relu_forward(&mut y2);
        let (p2, arg2) = maxpool2_forward(&y2, self.conv2.out_ch, s / 2, s / 2);
        let (mut y3, cols3) = self.conv3.forward(&p2, s / 4, s / 4);
        relu_forward(&mut y3);
        let (p3, arg3) = maxpool2_forward(&y3, self.conv3.out_ch, s / 4, s / 4);
        let mut h = self.fc1.forward(&p3);
        relu_forward(&mut h);
        let logits = self.fc2.forward(&h);

        let (loss, dlogits) = softmax_cross_entropy(&logits, label);
        let (mut dh, dw_fc2, db_fc2) = self.fc2.backward(&dlogits, &h);
        relu_backward(&mut dh, &h);
        let (dp3, dw_fc1, db_fc1) = self.fc1.backward(&dh, &p3);
        let mut dy3 = maxpool2_backward(&dp3, &arg3, y3.len());
        relu_backward(&mut dy3, &y3);
        let (dp2, dw_c3, db_c3) = self.conv3.backward(&dy3, &cols3, s / 4, s / 4);
        let mut dy2 = maxpool2_backward(&dp2, &arg2, y2.len());
        relu_backward(&mut dy2, &y2);
        let (dp1, dw_c2, db_c2) = self.conv2.backward(&dy2, &cols2, s / 2, s / 2);
        let mut dy1 = maxpool2_backward(&dp1, &arg1, y1.len());
        relu_backward(&mut dy1, &y1);
        let (_, dw_c1, db_c1) = self.conv1.backward(&dy1, &cols1, s, s);

        (
            loss,
            Grads {
                blocks: vec![
                    dw_c1, db_c1, dw_c2, db_c2, dw_c3, db_c3, dw_fc1, db_fc1, dw_fc2, db_fc2,
                ],
            },
        )
    }
}

/// Classifies region proposals against a frame: each box is cropped
/// (with 10% context padding), resized to 64×64, and kept when the vessel
/// probability reaches `threshold`.
pub fn classify_rois(
    model: &CnnModel<f32>,
    frame: &Frame,
    boxes: &[RoiBox],
    threshold: f32,
) -> Result<Vec<(RoiBox, f32)>> {
    let mut kept = Vec::new();
    for b in boxes {
        let patch = Patch::from_region(frame, b)?;
        let probs = model.forward(&patch)?;
        if probs[1] >= threshold {
            kept.push((*b, probs[1]));
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(super) fn tiny_arch() -> Arch {
        Arch {
            input_hw: 8,
            in_channels: 3,
            conv_channels: [2, 2, 2],
            fc_hidden: 4,
        }
    }

    pub(super) fn random_input(rng: &mut ChaCha8Rng, arch: &Arch) -> Vec<f64> {
        (0..arch.in_channels * arch.input_hw * arch.input_hw)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn parameter_count_is_within_budget() {
        let m = init_model(0);
        let count = m.param_count();
        assert_eq!(count, Arch::default().param_count());
        assert_eq!(count, 285_922);
        assert!((250_000..=350_000).contains(&count));
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        assert_eq!(init_model(7), init_model(7));
        let a = init_model(0);
        let b = init_model(1);
        assert_ne!(a.conv1.weights, b.conv1.weights);
    }

    #[test]
    fn zeroed_model_is_indifferent() {
        let mut m = init_model(3);
        for block in m.param_blocks_mut() {
            for v in block.iter_mut() {
                *v = 0.0;
            }
        }
        let patch = Patch::new(vec![0.4; 3 * 64 * 64], None).unwrap();
        let p = m.forward(&patch).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn probabilities_normalize() {
        let m = init_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p = m.forward(&Patch::new(data, None).unwrap()).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
            assert!(p[0] > 0.0 && p[1] > 0.0);
        }
    }

    #[test]
    fn rejects_malformed_patches_and_inputs() {
        assert!(Patch::new(vec![0.0; 10], None).is_err());
        assert!(Patch::new(vec![2.0; 3 * 64 * 64], None).is_err());
        let m: CnnModel<f64> = CnnModel::init_with_arch(tiny_arch(), 0).unwrap();
        assert!(m.forward_values(&[0.0; 17]).is_err());
        assert!(m.batch_loss_and_grads(&[], &[]).is_err());
    }

    #[test]
    fn uniform_model_loss_is_ln2() {
        let mut m: CnnModel<f64> = CnnModel::init_with_arch(tiny_arch(), 5).unwrap();
        for block in m.param_blocks_mut() {
            for v in block.iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_input(&mut rng, &tiny_arch());
        let (loss, _) = m.batch_loss_and_grads(&[&input], &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let model: CnnModel<f64> = CnnModel::init_with_arch(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| random_input(&mut rng, &arch)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let labels = vec![0usize, 1, 1];
        let (_, grads) = model.batch_loss_and_grads(&refs, &labels).unwrap();
        let h = 1e-4;
        for bi in 0..grads.blocks.len() {
            let len = grads.blocks[bi].len();
            // Every bias slot, strided sweep over weights.
            let step = (len / 13).max(1);
            for pi in (0..len).step_by(step) {
                let mut probe = model.clone();
                probe.param_blocks_mut()[bi][pi] += h;
                let up = probe.batch_loss_and_grads(&refs, &labels).unwrap().0;
                probe.param_blocks_mut()[bi][pi] -= 2.0 * h;
                let down = probe.batch_loss_and_grads(&refs, &labels).unwrap().0;
                let fd = (up - down) / (2.0 * h);
                let analytic = grads.blocks[bi][pi];
                let denom = analytic.abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((analytic - fd) / denom).abs() <= 1e-3,
                    "block {bi} slot {pi}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn forward_matches_frozen_reference() {
        // Regression pin: double-precision forward of the seed-42 model on
        // a fixed ramp input, recorded from this implementation. Drift
        // here means initialization or forward math changed.
        let model: CnnModel<f64> = CnnModel::init_with_arch(Arch::default(), 42).unwrap();
        let n = PATCH_CHANNELS * PATCH_SIZE * PATCH_SIZE;
        let input: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 256) as f64 / 255.0).collect();
        let p = model.forward_values(&input).unwrap();
        assert!((p[0] - 0.99419835247417299).abs() < 1e-12, "{}", p[0]);
        assert!((p[1] - 0.00580164752582702).abs() < 1e-12, "{}", p[1]);
    }

    #[test]
    fn patch_from_region_handles_gray_and_color() {
        let frame = Frame::constant(100, 80, 1, 0.5);
        let roi = RoiBox {
            x: 10,
            y: 10,
            w: 20,
            h: 16,
            source: crate::roi::RoiSource::Salience,
            score: 1.0,
        };
        let p = Patch::from_region(&frame, &roi).unwrap();
        assert_eq!(p.data().len(), 3 * 64 * 64);
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let rgb = Frame::constant(100, 80, 3, 0.25);
        let p = Patch::from_region(&rgb, &roi).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn flipped_patch_mirrors_content() {
        let mut data = vec![0.0f32; 3 * 64 * 64];
        data[0] = 1.0; // top-left of channel 0
        let p = Patch::new(data, Some(Class::Capillary)).unwrap();
        let fh = p.flipped(true, false);
        assert_eq!(fh.data()[63], 1.0);
        let fv = p.flipped(false, true);
        assert_eq!(fv.data()[63 * 64], 1.0);
        let fb = p.flipped(true, true).flipped(true, true);
        assert_eq!(fb, p);
        assert_eq!(fh.label, Some(Class::Capillary));
    }

    #[test]
    fn classify_rois_empty_and_threshold_boundary() {
        let m = init_model(2);
        let frame = Frame::constant(128, 128, 3, 0.5);
        assert!(classify_rois(&m, &frame, &[], 0.5).unwrap().is_empty());
        let b = RoiBox {
            x: 4,
            y: 4,
            w: 32,
            h: 32,
            source: crate::roi::RoiSource::Motion,
            score: 0.5,
        };
        // Probability 1.0 requires a saturated softmax, which a fresh
        // model cannot produce.
        assert!(classify_rois(&m, &frame, &[b], 1.0).unwrap().is_empty());
        // Threshold 0 keeps everything.
        assert_eq!(classify_rois(&m, &frame, &[b], 0.0).unwrap().len(), 1);
    }
}
