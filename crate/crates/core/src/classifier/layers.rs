//! Network building blocks with explicit forward/backward passes.

use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{col2im, im2col, matmul, matmul_at, matmul_bt};

/// Draws He-style fan-in scaled weights: Normal(0, √(2/fan_in)).
fn he_weights<T: Float>(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<T> {
    let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid stddev");
    (0..count)
        .map(|_| T::from(dist.sample(rng)).expect("finite sample"))
        .collect()
}

/// 3×3 (or any odd-k) convolution, stride 1, zero padding `k/2`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    /// out_ch × in_ch × k × k, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> ConvLayer<T> {
    pub fn init(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let fan_in = in_ch * k * k;
        Self {
            in_ch,
            out_ch,
            k,
            weights: he_weights(rng, out_ch * fan_in, fan_in),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Returns (output out_ch×h×w, im2col buffer kept for the backward pass).
    pub fn forward(&self, input: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let cols = im2col(input, self.in_ch, h, w, self.k);
        let mut out = matmul(&self.weights, &cols, self.out_ch, self.in_ch * self.k * self.k, h * w);
        for (c, &b) in self.bias.iter().enumerate() {
            for v in &mut out[c * h * w..(c + 1) * h * w] {
                *v = *v + b;
            }
        }
        (out, cols)
    }

    /// Gradients from upstream `dy` (out_ch×h×w) and the cached im2col
    /// buffer. Returns (dx, dw, db).
    pub fn backward(
        &self,
        dy: &[T],
        cols: &[T],
        h: usize,
        w: usize,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let kk = self.in_ch * self.k * self.k;
        let n = h * w;
        // dW = dY · colsᵀ   (out_ch×n · n×kk)
        let dw = matmul_bt(dy, cols, self.out_ch, n, kk);
        let db: Vec<T> = (0..self.out_ch)
            .map(|c| dy[c * n..(c + 1) * n].iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        // dcols = Wᵀ · dY   (kk×out_ch · out_ch×n)
        let dcols = matmul_at(&self.weights, dy, self.out_ch, kk, n);
        let dx = col2im(&dcols, self.in_ch, h, w, self.k);
        (dx, dw, db)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// out_dim × in_dim, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> LinearLayer<T> {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: he_weights(rng, out_dim * in_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, input: &[T]) -> Vec<T> {
        let mut out = matmul(&self.weights, input, self.out_dim, self.in_dim, 1);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o = *o + b;
        }
        out
    }

    /// Returns (dx, dw, db) given the cached input.
    pub fn backward(&self, dy: &[T], input: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        // dW[o][i] = dy[o]·x[i]; dx = Wᵀ·dy.
        let dw = matmul(dy, input, self.out_dim, 1, self.in_dim);
        let dx = matmul_at(&self.weights, dy, self.out_dim, self.in_dim, 1);
        (dx, dw, dy.to_vec())
    }
}

pub(crate) fn relu_forward<T: Float>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks upstream gradients where the activation was clipped. `y` is the
/// rectified output (y > 0 iff x > 0).
pub(crate) fn relu_backward<T: Float>(dy: &mut [T], y: &[T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling; dimensions must be even. Returns the pooled
/// map and the argmax index of every output cell for the backward pass.
pub(crate) fn maxpool2_forward<T: Float>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = (y * 2) * w + xx * 2;
                let idx = [base, base + 1, base + w, base + w + 1];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out.push(plane[best]);
                arg.push((c * h * w + best) as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Float>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&d, &i) in dy.iter().zip(arg) {
        dx[i as usize] = dx[i as usize] + d;
    }
    dx
}

/// Numerically stable softmax.
pub(crate) fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
    exps.into_iter().map(|v| v / sum).collect()
}

/// Cross-entropy against a class index; returns (loss, dlogits).
pub(crate) fn softmax_cross_entropy<T: Float>(logits: &[T], class: usize) -> (T, Vec<T>) {
    let probs = softmax(logits);
    let floor = T::from(1e-30).unwrap();
    let loss = -(probs[class].max(floor)).ln();
    let mut dlogits = probs;
    dlogits[class] = dlogits[class] - T::one();
    (loss, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite difference of a scalar loss with respect to one slot.
    fn fd_slot(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        (up - down) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(
            ((analytic - numeric) / denom).abs() <= 1e-3,
            "{analytic} vs {numeric}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer: ConvLayer<f64> = ConvLayer::init(&mut rng, 2, 3, 3);
        let (h, w) = (4usize, 5usize);
        let x = randvec(&mut rng, 2 * h * w);
        let coeffs = randvec(&mut rng, 3 * h * w);
        // Scalar objective: <forward(x), coeffs>.
        let loss_x = |xs: &[f64]| -> f64 {
            let (y, _) = layer.forward(xs, h, w);
            y.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
        };
        let (_, cols) = layer.forward(&x, h, w);
        let (dx, dw, db) = layer.backward(&coeffs, &cols, h, w);
        for i in (0..x.len()).step_by(7) {
            let mut f = |xs: &[f64]| loss_x(xs);
            assert_close(dx[i], fd_slot(&mut f, &x, i, 1e-4));
        }
        // Weight and bias gradients via perturbed copies of the layer.
        for i in (0..layer.weights.len()).step_by(11) {
            let mut f = |ws: &[f64]| -> f64 {
                let mut l = layer.clone();
                l.weights = ws.to_vec();
                let (y, _) = l.forward(&x, h, w);
                y.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
            };
            assert_close(dw[i], fd_slot(&mut f, &layer.weights, i, 1e-4));
        }
        for i in 0..layer.bias.len() {
            let mut f = |bs: &[f64]| -> f64 {
                let mut l = layer.clone();
                l.bias = bs.to_vec();
                let (y, _) = l.forward(&x, h, w);
                y.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
            };
            assert_close(db[i], fd_slot(&mut f, &layer.bias, i, 1e-4));
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer: LinearLayer<f64> = LinearLayer::init(&mut rng, 6, 4);
        let x = randvec(&mut rng, 6);
        let coeffs = randvec(&mut rng, 4);
        let (dx, dw, db) = layer.backward(&coeffs, &x);
        for i in 0..x.len() {
            let mut f = |xs: &[f64]| -> f64 {
                layer.forward(xs).iter().zip(&coeffs).map(|(a, b)| a * b).sum()
            };
            assert_close(dx[i], fd_slot(&mut f, &x, i, 1e-4));
        }
        for i in 0..layer.weights.len() {
            let mut f = |ws: &[f64]| -> f64 {
                let mut l = layer.clone();
                l.weights = ws.to_vec();
                l.forward(&x).iter().zip(&coeffs).map(|(a, b)| a * b).sum()
            };
            assert_close(dw[i], fd_slot(&mut f, &layer.weights, i, 1e-4));
        }
        for i in 0..layer.bias.len() {
            let mut f = |bs: &[f64]| -> f64 {
                let mut l = layer.clone();
                l.bias = bs.to_vec();
                l.forward(&x).iter().zip(&coeffs).map(|(a, b)| a * b).sum()
            };
            assert_close(db[i], fd_slot(&mut f, &layer.bias, i, 1e-4));
        }
    }

    #[test]
    fn maxpool_selects_maxima_and_routes_gradients() {
        #[rustfmt::skip]
        let x: Vec<f64> = vec![
            1.0, 2.0,  0.0, 0.5,
            3.0, 4.0,  0.2, 0.1,
            9.0, 1.0,  5.0, 5.0,
            1.0, 1.0,  5.0, 6.0,
        ];
        let (y, arg) = maxpool2_forward(&x, 1, 4, 4);
        assert_eq!(y, vec![4.0, 0.5, 9.0, 6.0]);
        let dx = maxpool2_backward(&[1.0, 2.0, 3.0, 4.0], &arg, 16);
        assert_eq!(dx[5], 1.0); // the 4.0
        assert_eq!(dx[3], 2.0); // the 0.5
        assert_eq!(dx[8], 3.0); // the 9.0
        assert_eq!(dx[15], 4.0); // the 6.0
        assert_eq!(dx.iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn softmax_cross_entropy_analytics() {
        // Equal logits over 2 classes → uniform probabilities, loss ln 2.
        let (loss, dl) = softmax_cross_entropy(&[0.0f64, 0.0], 0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dl[0] + 0.5).abs() < 1e-12 && (dl[1] - 0.5).abs() < 1e-12);
        // Gradient check against finite differences.
        let logits = [0.3f64, -1.1];
        let (_, dl) = softmax_cross_entropy(&logits, 1);
        for i in 0..2 {
            let f = |ls: &[f64]| softmax_cross_entropy(ls, 1).0;
            let fd = {
                let mut lp = logits.to_vec();
                lp[i] += 1e-6;
                let up = f(&lp);
                lp[i] = logits[i] - 1e-6;
                (up - f(&lp)) / 2e-6
            };
            assert!((dl[i] - fd).abs() < 1e-6);
        }
        // Probabilities are normalized even for extreme logits.
        let p = softmax(&[800.0f64, -800.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
