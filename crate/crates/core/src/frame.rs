//! Planar raster frames and binary masks — the currency every stage trades in.
//!
//! Intensities are unit-range `f32` everywhere inside the pipeline; 8-bit
//! quantization happens only at file I/O boundaries.

use crate::error::{Error, Result};

/// BT.601 luma weights used whenever RGB has to collapse to one plane.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// A single image with planar channel layout.
///
/// `data` stores channels back to back: plane `c` occupies
/// `data[c*w*h .. (c+1)*w*h]`, row-major within the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    /// Micrometers per pixel, when the acquisition optics are known.
    pub pixel_pitch_um: Option<f32>,
}

impl Frame {
    /// Builds a frame, validating the planar layout and intensity range.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::parameter("frame dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::parameter(format!(
                "frame must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::parameter(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::parameter("intensities must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            pixel_pitch_um: None,
        })
    }

    /// Internal constructor for values produced by pipeline math. Clamps
    /// to [0, 1] so accumulated rounding can never violate the invariant.
    pub(crate) fn from_planes(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            width,
            height,
            channels,
            data,
            pixel_pitch_um: None,
        }
    }

    /// All-zero frame.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::from_planes(width, height, channels, vec![0.0; width * height * channels])
    }

    /// Constant-intensity frame.
    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::from_planes(
            width,
            height,
            channels,
            vec![value.clamp(0.0, 1.0); width * height * channels],
        )
    }

    pub fn with_pitch(mut self, pixel_pitch_um: Option<f32>) -> Self {
        self.pixel_pitch_um = pixel_pitch_um;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel plane, row-major.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[c * self.width * self.height + y * self.width + x] = v;
    }

    /// Grayscale view: identity for 1-channel frames, BT.601 luma for RGB.
    pub fn to_gray(&self) -> Frame {
        if self.is_gray() {
            return self.clone();
        }
        let n = self.width * self.height;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i]);
        }
        Frame::from_planes(self.width, self.height, 1, out).with_pitch(self.pixel_pitch_um)
    }

    /// Red-channel dominance plane `R - (G+B)/2`, clipped to [0, 1].
    ///
    /// This is how "red pixels" are operationalized for mask generation.
    /// Grayscale frames fall back to inverted intensity (vessels are dark).
    pub fn red_dominance(&self) -> Frame {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n);
        if self.is_gray() {
            let g = self.plane(0);
            for i in 0..n {
                out.push(1.0 - g[i]);
            }
        } else {
            let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
            for i in 0..n {
                out.push((r[i] - 0.5 * (g[i] + b[i])).clamp(0.0, 1.0));
            }
        }
        Frame::from_planes(self.width, self.height, 1, out).with_pitch(self.pixel_pitch_um)
    }

    /// Axis-aligned crop. The rectangle must lie inside the frame.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Frame> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::parameter(format!(
                "crop {x},{y} {w}x{h} exceeds frame {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for row in y..y + h {
                data.extend_from_slice(&plane[row * self.width + x..row * self.width + x + w]);
            }
        }
        Ok(Frame::from_planes(w, h, self.channels, data).with_pitch(self.pixel_pitch_um))
    }

    /// Bilinear resize, per channel, clamped sampling.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Frame {
        assert!(new_w > 0 && new_h > 0);
        let mut data = Vec::with_capacity(new_w * new_h * self.channels);
        for c in 0..self.channels {
            data.extend(resize_plane_bilinear(
                self.plane(c),
                self.width,
                self.height,
                new_w,
                new_h,
            ));
        }
        Frame::from_planes(new_w, new_h, self.channels, data).with_pitch(self.pixel_pitch_um)
    }
}

/// Bilinear resize of a bare plane with pixel-center mapping and clamped
/// sampling. Values pass through untouched, so out-of-unit-range data
/// (e.g. displacement fields) is safe.
pub(crate) fn resize_plane_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f32> {
    let mut dst = vec![0.0f32; new_w * new_h];
    let sx = width as f32 / new_w as f32;
    let sy = height as f32 / new_h as f32;
    for oy in 0..new_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy as usize).min(height - 1);
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f32;
        for ox in 0..new_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx as usize).min(width - 1);
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
            let bot = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
            dst[oy * new_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    dst
}

/// One boolean per pixel, dimensions tied to the frame it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::parameter("mask bits do not match dimensions"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of true pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// In-place union with another mask of identical dimensions.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::parameter("mask dimensions differ"));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Bounding box of the true pixels as (x, y, w, h), if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}
