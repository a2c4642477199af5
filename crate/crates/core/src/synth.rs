//! Procedural generation of vessel-like test videos with exact ground
//! truth: tubes carry a 1-D particle texture advected along their path at
//! a known speed, plasma gaps drift with the flow, and the generator
//! records per-frame masks, fill fractions, and bounding boxes while it
//! renders. Because the texture is a pure function of arclength minus
//! phase, the true image motion inside a tube equals the injected speed
//! exactly — which is what makes velocity and hematocrit measurements
//! verifiable.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::{Class, Patch};
use crate::error::{Error, Result};
use crate::frame::{BinaryMask, Frame};
use crate::imgproc::gaussian_blur;
use crate::roi::{RoiBox, RoiSource};

/// Arclength extent of one texture cell (a "particle"), in pixels.
const CELL_SCALE: f32 = 5.0;
/// Arclength extent of plasma-gap structure, in pixels.
const GAP_SCALE: f32 = 18.0;

/// Sense of flow along the tube's polyline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDir {
    /// Toward the last path point.
    Forward,
    /// Toward the first path point.
    Backward,
}

/// Periodic modulation of the gap fraction over time (how hematocrit
/// variation is injected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapWave {
    /// Peak deviation added to the base gap fraction.
    pub amplitude: f32,
    pub period_frames: f32,
}

/// Periodic modulation of the cell speed over time (how flow heterogeneity
/// is injected). The instantaneous speed at frame `f` is
/// `speed * (1 + amplitude * sin(2π f / period_frames))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedWave {
    /// Relative peak deviation, in [0, 1] so the speed never reverses.
    pub amplitude: f32,
    pub period_frames: f32,
}

/// One simulated vessel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSpec {
    /// Centerline, in pixel coordinates. At least two points.
    pub path: Vec<(f32, f32)>,
    /// Lumen width in pixels.
    pub width: f32,
    /// Cell speed in pixels/frame (≥ 0).
    pub speed: f32,
    pub direction: FlowDir,
    /// Fraction of the lumen occupied by plasma gaps, in [0,1].
    pub gap_fraction: f32,
    /// Optional sinusoidal gap-fraction modulation.
    pub gap_wave: Option<GapWave>,
    /// Optional sinusoidal speed modulation.
    pub speed_wave: Option<SpeedWave>,
    /// Seed for this tube's texture and gap pattern.
    pub seed: u64,
}

impl TubeSpec {
    /// Instantaneous cell speed at `frame`, in pixels/frame.
    pub fn speed_at(&self, frame: usize) -> f32 {
        match self.speed_wave {
            None => self.speed,
            Some(w) => {
                let s = (std::f32::consts::TAU * frame as f32 / w.period_frames).sin();
                self.speed * (1.0 + w.amplitude * s)
            }
        }
    }

    /// Distance the cell pattern has advected by `frame`: the speed summed
    /// over all earlier frame steps. Closed form when the speed is
    /// constant, so existing scenes render identically.
    fn phase_at(&self, frame: usize) -> f32 {
        match self.speed_wave {
            None => self.speed * frame as f32,
            Some(_) => (0..frame).map(|k| self.speed_at(k)).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Background {
    pub base: [f32; 3],
    /// Amplitude of the static low-frequency brightness texture.
    pub texture_amplitude: f32,
    /// Multiplicative brightness drift per frame.
    pub illumination_ramp: f32,
    /// Corner darkening strength in [0,1).
    pub vignette: f32,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            base: [0.84, 0.76, 0.72],
            texture_amplitude: 0.03,
            illumination_ramp: 0.0005,
            vignette: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Artifacts {
    /// Dark hair strokes drawn over everything.
    pub hair_count: usize,
    /// Brownish stain blobs under the vessels.
    pub stain_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fps: f32,
    pub frames: usize,
    pub tubes: Vec<TubeSpec>,
    pub background: Background,
    pub artifacts: Artifacts,
    /// Per-frame additive Gaussian sensor noise.
    pub noise_sigma: f32,
    /// Defocus applied to the composited frame (0 = sharp).
    pub focus_blur_sigma: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            fps: 30.0,
            frames: 30,
            tubes: Vec::new(),
            background: Background::default(),
            artifacts: Artifacts::default(),
            noise_sigma: 0.01,
            focus_blur_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::parameter("scene must be at least 16×16"));
        }
        if self.frames == 0 {
            return Err(Error::parameter("scene needs at least one frame"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::parameter("fps must be positive"));
        }
        if self.noise_sigma < 0.0 || self.focus_blur_sigma < 0.0 {
            return Err(Error::parameter("noise and blur sigmas must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.background.vignette) {
            return Err(Error::parameter("vignette strength must lie in [0,1)"));
        }
        for (i, t) in self.tubes.iter().enumerate() {
            if t.path.len() < 2 {
                return Err(Error::parameter(format!("tube {i}: path needs ≥ 2 points")));
            }
            if !(t.width > 0.0) {
                return Err(Error::parameter(format!("tube {i}: width must be positive")));
            }
            if t.speed < 0.0 {
                return Err(Error::parameter(format!("tube {i}: speed must be ≥ 0")));
            }
            if !(0.0..=1.0).contains(&t.gap_fraction) {
                return Err(Error::parameter(format!(
                    "tube {i}: gap fraction must lie in [0,1]"
                )));
            }
            if let Some(w) = t.gap_wave {
                if !(w.period_frames > 0.0) {
                    return Err(Error::parameter(format!(
                        "tube {i}: gap wave period must be positive"
                    )));
                }
            }
            if let Some(w) = t.speed_wave {
                if !(0.0..=1.0).contains(&w.amplitude) || !(w.period_frames > 0.0) {
                    return Err(Error::parameter(format!(
                        "tube {i}: speed wave needs amplitude in [0,1] and a positive period"
                    )));
                }
            }
            let margin = t.width / 2.0 + 1.0;
            for &(x, y) in &t.path {
                if x < margin
                    || y < margin
                    || x > self.width as f32 - margin
                    || y > self.height as f32 - margin
                {
                    return Err(Error::parameter(format!(
                        "tube {i}: path leaves the frame (point {x},{y})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything the generator knows about one rendered tube.
#[derive(Debug, Clone)]
pub struct TubeTruth {
    pub speed: f32,
    /// Flow direction in radians, image convention (y down), in [0, 2π).
    pub direction: f32,
    /// Realized red-cell fill fraction per frame (1 − realized gaps).
    pub fill_fraction: Vec<f32>,
    /// Per-frame bounding box (x, y, w, h) of the lumen.
    pub boxes: Vec<(usize, usize, usize, usize)>,
    /// Per-frame mask of red-cell pixels (full frame size).
    pub masks: Vec<BinaryMask>,
    /// Total lumen pixel count (gaps included).
    pub lumen_area: usize,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub tubes: Vec<TubeTruth>,
}

// --- deterministic lattice noise -----------------------------------------

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash01(seed: u64, i: i64) -> f32 {
    let z = mix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (z >> 40) as f32 / 16_777_216.0
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// 1-D value noise in [0,1], C¹-smooth.
fn vnoise1(seed: u64, x: f32) -> f32 {
    let xf = x.floor();
    let i = xf as i64;
    let t = smoothstep(x - xf);
    hash01(seed, i) * (1.0 - t) + hash01(seed, i + 1) * t
}

/// 2-D value noise in [0,1].
fn vnoise2(seed: u64, x: f32, y: f32) -> f32 {
    let (xf, yf) = (x.floor(), y.floor());
    let (xi, yi) = (xf as i64, yf as i64);
    let (tx, ty) = (smoothstep(x - xf), smoothstep(y - yf));
    let row = |yy: i64| -> f32 {
        let s = seed ^ mix64((yy as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        hash01(s, xi) * (1.0 - tx) + hash01(s, xi + 1) * tx
    };
    row(yi) * (1.0 - ty) + row(yi + 1) * ty
}

/// Two-octave cell texture, a pure function of (tube seed, arclength).
fn cell_texture(seed: u64, u: f32) -> f32 {
    0.65 * vnoise1(seed, u / CELL_SCALE) + 0.35 * vnoise1(seed ^ 0xA5A5_5A5A, u / (CELL_SCALE * 0.41))
}

// --- tube geometry --------------------------------------------------------

struct Segment {
    ax: f32,
    ay: f32,
    dx: f32,
    dy: f32,
    len: f32,
    cum: f32,
}

struct TubeGeom {
    segments: Vec<Segment>,
    length: f32,
    bbox: (usize, usize, usize, usize),
}

impl TubeGeom {
    fn new(spec: &TubeSpec, frame_w: usize, frame_h: usize) -> Self {
        let mut segments = Vec::with_capacity(spec.path.len() - 1);
        let mut cum = 0.0f32;
        for pair in spec.path.windows(2) {
            let (ax, ay) = pair[0];
            let (bx, by) = pair[1];
            let (dx, dy) = (bx - ax, by - ay);
            let len = (dx * dx + dy * dy).sqrt().max(1e-6);
            segments.push(Segment { ax, ay, dx, dy, len, cum });
            cum += len;
        }
        let margin = spec.width / 2.0 + 1.5;
        let min_x = spec.path.iter().map(|p| p.0).fold(f32::INFINITY, f32::min) - margin;
        let max_x = spec.path.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max) + margin;
        let min_y = spec.path.iter().map(|p| p.1).fold(f32::INFINITY, f32::min) - margin;
        let max_y = spec.path.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max) + margin;
        let x0 = (min_x.floor().max(0.0)) as usize;
        let y0 = (min_y.floor().max(0.0)) as usize;
        let x1 = (max_x.ceil() as usize).min(frame_w.saturating_sub(1));
        let y1 = (max_y.ceil() as usize).min(frame_h.saturating_sub(1));
        Self {
            segments,
            length: cum,
            bbox: (x0, y0, x1, y1),
        }
    }

    /// Distance from a point to the centerline and the arclength of the
    /// closest point.
    fn project(&self, px: f32, py: f32) -> (f32, f32) {
        let mut best = (f32::INFINITY, 0.0f32);
        for seg in &self.segments {
            let t = (((px - seg.ax) * seg.dx + (py - seg.ay) * seg.dy) / (seg.len * seg.len))
                .clamp(0.0, 1.0);
            let (cx, cy) = (seg.ax + t * seg.dx, seg.ay + t * seg.dy);
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            if d2 < best.0 {
                best = (d2, seg.cum + t * seg.len);
            }
        }
        (best.0.sqrt(), best.1)
    }

    /// Length-weighted circular mean of the tangent direction.
    fn mean_direction(&self, dir: FlowDir) -> f32 {
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        for seg in &self.segments {
            sx += f64::from(seg.dx);
            sy += f64::from(seg.dy);
        }
        if dir == FlowDir::Backward {
            sx = -sx;
            sy = -sy;
        }
        let mut a = sy.atan2(sx);
        if a < 0.0 {
            a += std::f64::consts::TAU;
        }
        a as f32
    }
}

/// Gap-fraction target for a tube at a given frame.
fn gap_at(spec: &TubeSpec, frame: usize) -> f32 {
    let mut g = spec.gap_fraction;
    if let Some(w) = spec.gap_wave {
        g += w.amplitude * (std::f32::consts::TAU * frame as f32 / w.period_frames).sin();
    }
    g.clamp(0.0, 1.0)
}

/// Threshold on the gap noise that makes the requested fraction of the
/// (phase-shifted) tube length fall below it.
fn gap_threshold(spec: &TubeSpec, geom: &TubeGeom, phase: f32, gap: f32) -> f32 {
    if gap <= 0.0 {
        return f32::NEG_INFINITY;
    }
    if gap >= 1.0 {
        return f32::INFINITY;
    }
    let samples = ((geom.length * 2.0) as usize).max(64);
    let mut vals: Vec<f32> = (0..samples)
        .map(|i| {
            let s = geom.length * i as f32 / samples as f32;
            vnoise1(spec.seed ^ 0x6A09_E667, (s - phase) / GAP_SCALE)
        })
        .collect();
    vals.sort_by(f32::total_cmp);
    let idx = ((gap * samples as f32) as usize).min(samples - 1);
    vals[idx]
}

// --- rendering ------------------------------------------------------------

struct StaticLayers {
    /// Composited background + stains, before tubes and hair.
    under: Vec<f32>,
    /// Hair color+alpha drawn over the tubes: (r, g, b, a) per pixel.
    over: Vec<[f32; 4]>,
    /// Vignette factor per pixel.
    shade: Vec<f32>,
}

fn render_static(spec: &SceneSpec) -> StaticLayers {
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let bg = &spec.background;
    let mut under = vec![0.0f32; 3 * n];
    let mut shade = vec![1.0f32; n];
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let r_max2 = cx * cx + cy * cy;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tex = bg.texture_amplitude
                * (2.0 * vnoise2(spec.seed ^ 0x1357_9BDF, x as f32 / 23.0, y as f32 / 23.0) - 1.0);
            for c in 0..3 {
                under[c * n + i] = bg.base[c] + tex;
            }
            let (rx, ry) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            shade[i] = 1.0 - bg.vignette * (rx * rx + ry * ry) / r_max2;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xBEEF_CAFE);
    // Stains sit under the vessels.
    for _ in 0..spec.artifacts.stain_count {
        let sx = rng.gen_range(0.0..w as f32);
        let sy = rng.gen_range(0.0..h as f32);
        let radius = rng.gen_range(8.0..24.0f32);
        let color = [0.55f32, 0.42, 0.34];
        let x0 = ((sx - 3.0 * radius).max(0.0)) as usize;
        let x1 = ((sx + 3.0 * radius) as usize).min(w - 1);
        let y0 = ((sy - 3.0 * radius).max(0.0)) as usize;
        let y1 = ((sy + 3.0 * radius) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f32 + 0.5 - sx).powi(2) + (y as f32 + 0.5 - sy).powi(2);
                let a = 0.45 * (-d2 / (2.0 * (radius / 2.0).powi(2))).exp();
                if a > 1e-3 {
                    let i = y * w + x;
                    for c in 0..3 {
                        under[c * n + i] = under[c * n + i] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
    // Hair strokes occlude everything.
    let mut over = vec![[0.0f32; 4]; n];
    for _ in 0..spec.artifacts.hair_count {
        let mut px = rng.gen_range(0.0..w as f32);
        let mut py = rng.gen_range(0.0..h as f32);
        let mut heading = rng.gen_range(0.0..std::f32::consts::TAU);
        let steps = (w.min(h) as f32 * rng.gen_range(0.5..0.9)) as usize;
        let color = [0.13f32, 0.11, 0.09];
        for _ in 0..steps {
            heading += rng.gen_range(-0.25..0.25f32);
            px += heading.cos();
            py += heading.sin();
            let x0 = (px - 2.0).max(0.0) as usize;
            let x1 = ((px + 2.0) as usize).min(w.saturating_sub(1));
            let y0 = (py - 2.0).max(0.0) as usize;
            let y1 = ((py + 2.0) as usize).min(h.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f32 + 0.5 - px).powi(2) + (y as f32 + 0.5 - py).powi(2)).sqrt();
                    let a = (1.3 - d).clamp(0.0, 1.0) * 0.85;
                    let cell = &mut over[y * w + x];
                    if a > cell[3] {
                        *cell = [color[0], color[1], color[2], a];
                    }
                }
            }
        }
    }
    StaticLayers { under, over, shade }
}

/// Renders the scene to RGB frames plus exact ground truth.
pub fn render_video(spec: &SceneSpec) -> Result<(Vec<Frame>, GroundTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let layers = render_static(spec);
    let geoms: Vec<TubeGeom> = spec.tubes.iter().map(|t| TubeGeom::new(t, w, h)).collect();

    let mut truth: Vec<TubeTruth> = spec
        .tubes
        .iter()
        .zip(&geoms)
        .map(|(t, g)| TubeTruth {
            speed: t.speed,
            direction: g.mean_direction(t.direction),
            fill_fraction: Vec::with_capacity(spec.frames),
            boxes: Vec::with_capacity(spec.frames),
            masks: Vec::with_capacity(spec.frames),
            lumen_area: 0,
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let mut data = layers.under.clone();
        // Tubes.
        for (ti, tube) in spec.tubes.iter().enumerate() {
            let geom = &geoms[ti];
            let sign = match tube.direction {
                FlowDir::Forward => 1.0f32,
                FlowDir::Backward => -1.0,
            };
            let phase = sign * tube.phase_at(f);
            let gap = gap_at(tube, f);
            let thr = gap_threshold(tube, geom, phase, gap);
            let mut mask = BinaryMask::new(w, h);
            let mut lumen = 0usize;
            let mut filled = 0usize;
            let mut bb = (usize::MAX, usize::MAX, 0usize, 0usize);
            let (x0, y0, x1, y1) = geom.bbox;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (d, s) = geom.project(x as f32 + 0.5, y as f32 + 0.5);
                    let cov = (tube.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                    if cov <= 0.0 {
                        continue;
                    }
                    let u = s - phase;
                    let is_gap = vnoise1(tube.seed ^ 0x6A09_E667, u / GAP_SCALE) < thr;
                    let color = if is_gap {
                        [0.78f32, 0.70, 0.66]
                    } else {
                        let v = cell_texture(tube.seed, u);
                        [0.50 + 0.28 * v, 0.12 + 0.10 * v, 0.16 + 0.08 * v]
                    };
                    let i = y * w + x;
                    for c in 0..3 {
                        data[c * n + i] = data[c * n + i] * (1.0 - cov) + color[c] * cov;
                    }
                    if cov >= 0.5 {
                        lumen += 1;
                        bb.0 = bb.0.min(x);
                        bb.1 = bb.1.min(y);
                        bb.2 = bb.2.max(x);
                        bb.3 = bb.3.max(y);
                        if !is_gap {
                            filled += 1;
                            mask.set(x, y, true);
                        }
                    }
                }
            }
            let t = &mut truth[ti];
            t.lumen_area = lumen;
            t.fill_fraction.push(if lumen == 0 {
                0.0
            } else {
                filled as f32 / lumen as f32
            });
            t.boxes.push(if bb.0 == usize::MAX {
                (0, 0, 0, 0)
            } else {
                (bb.0, bb.1, bb.2 - bb.0 + 1, bb.3 - bb.1 + 1)
            });
            t.masks.push(mask);
        }
        // Hair on top, then global shading.
        let ramp = 1.0 + spec.background.illumination_ramp * f as f32;
        for i in 0..n {
            let hair = layers.over[i];
            let shade = layers.shade[i] * ramp;
            for c in 0..3 {
                let v = data[c * n + i] * (1.0 - hair[3]) + hair[c] * hair[3];
                data[c * n + i] = v * shade;
            }
        }
        let mut frame_data = data;
        // Defocus before sensor noise, as a real optics/sensor chain would.
        if spec.focus_blur_sigma > 0.0 {
            for v in &mut frame_data {
                *v = v.clamp(0.0, 1.0);
            }
            let window = (((spec.focus_blur_sigma * 5.0).round() as usize) | 1).max(3);
            let sharp = Frame::new(w, h, 3, frame_data)?;
            let blurred = gaussian_blur(&sharp, window, Some(spec.focus_blur_sigma))?;
            frame_data = blurred.data().to_vec();
        }
        if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ (f as u64) << 20 | 0x51CE));
            let norm = Normal::new(0.0f32, spec.noise_sigma).expect("finite sigma");
            for v in &mut frame_data {
                *v += norm.sample(&mut rng);
            }
        }
        for v in &mut frame_data {
            *v = v.clamp(0.0, 1.0);
        }
        frames.push(Frame::new(w, h, 3, frame_data)?);
    }
    Ok((
        frames,
        GroundTruth {
            width: w,
            height: h,
            tubes: truth,
        },
    ))
}

// --- training data --------------------------------------------------------

/// Random tube path across a scene: 2–4 points, roughly straight.
fn random_tube(rng: &mut ChaCha8Rng, w: usize, h: usize) -> TubeSpec {
    let width = rng.gen_range(8.0..15.0f32);
    let margin = width / 2.0 + 2.0;
    let (fw, fh) = (w as f32, h as f32);
    let start = (
        rng.gen_range(margin..fw * 0.45),
        rng.gen_range(margin..fh - margin),
    );
    let heading = rng.gen_range(-0.6..0.6f32);
    let length = rng.gen_range(fw * 0.35..fw * 0.6);
    let points = rng.gen_range(2..=4usize);
    let mut path = vec![start];
    let mut pos = start;
    let mut dir = heading;
    for _ in 1..points {
        dir += rng.gen_range(-0.3..0.3f32);
        let step = length / (points - 1) as f32;
        pos = (
            (pos.0 + step * dir.cos()).clamp(margin, fw - margin),
            (pos.1 + step * dir.sin()).clamp(margin, fh - margin),
        );
        path.push(pos);
    }
    TubeSpec {
        path,
        width,
        speed: rng.gen_range(0.0..2.0),
        direction: FlowDir::Forward,
        gap_fraction: rng.gen_range(0.0..0.3),
        gap_wave: None,
        speed_wave: None,
        seed: rng.gen(),
    }
}

/// Balanced labeled patches: vessel crops vs background/artifact crops.
/// Deterministic for a given (n, seed).
pub fn make_patch_dataset(n: usize, seed: u64) -> Result<Vec<Patch>> {
    if n < 20 {
        return Err(Error::parameter("patch dataset needs n ≥ 20"));
    }
    let want_pos = n - n / 2;
    let want_neg = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::with_capacity(want_pos);
    let mut negatives = Vec::with_capacity(want_neg);
    let (w, h) = (160usize, 120usize);
    while positives.len() < want_pos || negatives.len() < want_neg {
        let tube_count = rng.gen_range(1..=3usize);
        let spec = SceneSpec {
            width: w,
            height: h,
            frames: 1,
            tubes: (0..tube_count).map(|_| random_tube(&mut rng, w, h)).collect(),
            artifacts: Artifacts {
                hair_count: rng.gen_range(0..=2),
                stain_count: rng.gen_range(0..=2),
            },
            noise_sigma: 0.01,
            seed: rng.gen(),
            ..SceneSpec::default()
        };
        let (frames, truth) = render_video(&spec)?;
        let frame = &frames[0];
        let gt_boxes: Vec<RoiBox> = truth
            .tubes
            .iter()
            .map(|t| {
                let (x, y, bw, bh) = t.boxes[0];
                RoiBox {
                    x,
                    y,
                    w: bw.max(1),
                    h: bh.max(1),
                    source: RoiSource::Salience,
                    score: 1.0,
                }
            })
            .collect();
        for b in &gt_boxes {
            if positives.len() >= want_pos {
                break;
            }
            let mut p = Patch::from_region(frame, b)?;
            p.label = Some(Class::Capillary);
            positives.push(p);
        }
        // Background boxes that miss every tube.
        let mut placed = 0;
        'outer: for _ in 0..40 {
            if negatives.len() >= want_neg || placed >= tube_count + 1 {
                break;
            }
            let bw = rng.gen_range(20..60usize);
            let bh = rng.gen_range(16..48usize);
            if bw + 2 >= w || bh + 2 >= h {
                continue;
            }
            let bx = rng.gen_range(0..w - bw);
            let by = rng.gen_range(0..h - bh);
            let candidate = RoiBox {
                x: bx,
                y: by,
                w: bw,
                h: bh,
                source: RoiSource::Salience,
                score: 1.0,
            };
            for gt in &gt_boxes {
                if candidate.iou(gt) > 0.0 {
                    continue 'outer;
                }
            }
            let mut p = Patch::from_region(frame, &candidate)?;
            p.label = Some(Class::Background);
            negatives.push(p);
            placed += 1;
        }
    }
    let mut out = Vec::with_capacity(n);
    // Interleave so a prefix of the dataset is still balanced.
    let mut pi = positives.into_iter();
    let mut ni = negatives.into_iter();
    for i in 0..n {
        let next = if i % 2 == 0 { pi.next() } else { ni.next() };
        out.push(next.expect("collected enough of each class"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_tube(speed: f32, gap: f32) -> TubeSpec {
        TubeSpec {
            path: vec![(12.0, 32.0), (116.0, 32.0)],
            width: 10.0,
            speed,
            direction: FlowDir::Forward,
            gap_fraction: gap,
            gap_wave: None,
            speed_wave: None,
            seed: 77,
        }
    }

    fn quiet_scene(tubes: Vec<TubeSpec>, frames: usize) -> SceneSpec {
        SceneSpec {
            width: 128,
            height: 64,
            frames,
            tubes,
            background: Background {
                illumination_ramp: 0.0,
                vignette: 0.0,
                ..Background::default()
            },
            noise_sigma: 0.0,
            seed: 5,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec {
            tubes: vec![straight_tube(1.0, 0.2)],
            width: 128,
            height: 64,
            frames: 3,
            artifacts: Artifacts { hair_count: 2, stain_count: 1 },
            seed: 9,
            ..SceneSpec::default()
        };
        let (a, _) = render_video(&spec).unwrap();
        let (b, _) = render_video(&spec).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let spec = quiet_scene(vec![], 2);
        let (frames, truth) = render_video(&spec).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(truth.tubes.is_empty());
        assert_eq!(frames[0].data(), frames[1].data());
    }

    #[test]
    fn zero_speed_tube_is_static() {
        let spec = quiet_scene(vec![straight_tube(0.0, 0.2)], 3);
        let (frames, _) = render_video(&spec).unwrap();
        assert_eq!(frames[0].data(), frames[1].data());
        assert_eq!(frames[1].data(), frames[2].data());
    }

    #[test]
    fn texture_advects_at_injected_speed() {
        let spec = quiet_scene(vec![straight_tube(2.0, 0.0)], 2);
        let (frames, _) = render_video(&spec).unwrap();
        // Luma profile along the centerline row.
        let profile = |f: &Frame| -> Vec<f32> {
            let g = f.to_gray();
            (20..108).map(|x| g.get(0, x, 31)).collect()
        };
        let (p0, p1) = (profile(&frames[0]), profile(&frames[1]));
        let mean0: f32 = p0.iter().sum::<f32>() / p0.len() as f32;
        let mean1: f32 = p1.iter().sum::<f32>() / p1.len() as f32;
        let mut best = (f32::NEG_INFINITY, 0i32);
        for lag in -5..=5i32 {
            let mut corr = 0.0f32;
            let mut count = 0;
            for x in 0..p1.len() as i32 {
                let sx = x - lag;
                if sx < 0 || sx >= p0.len() as i32 {
                    continue;
                }
                corr += (p1[x as usize] - mean1) * (p0[sx as usize] - mean0);
                count += 1;
            }
            let corr = corr / count as f32;
            if corr > best.0 {
                best = (corr, lag);
            }
        }
        assert_eq!(best.1, 2, "texture lag {}", best.1);
    }

    /// With a speed wave, the per-step displacement follows the injected
    /// sinusoid: amplitude 1 and period 4 at base speed 2 gives successive
    /// shifts of 2, 4, 2, 0 pixels.
    #[test]
    fn speed_wave_modulates_per_frame_advection() {
        let tube = TubeSpec {
            speed_wave: Some(SpeedWave { amplitude: 1.0, period_frames: 4.0 }),
            ..straight_tube(2.0, 0.0)
        };
        assert_eq!(tube.speed_at(0), 2.0);
        assert_eq!(tube.speed_at(1), 4.0);

        let spec = quiet_scene(vec![tube], 5);
        let (frames, _) = render_video(&spec).unwrap();
        let profile = |f: &Frame| -> Vec<f32> {
            let g = f.to_gray();
            (20..108).map(|x| g.get(0, x, 31)).collect()
        };
        let lag = |a: &[f32], b: &[f32]| -> i32 {
            let mean_a: f32 = a.iter().sum::<f32>() / a.len() as f32;
            let mean_b: f32 = b.iter().sum::<f32>() / b.len() as f32;
            let mut best = (f32::NEG_INFINITY, 0i32);
            for lag in -6..=6i32 {
                let mut corr = 0.0f32;
                let mut count = 0;
                for x in 0..b.len() as i32 {
                    let sx = x - lag;
                    if sx < 0 || sx >= a.len() as i32 {
                        continue;
                    }
                    corr += (b[x as usize] - mean_b) * (a[sx as usize] - mean_a);
                    count += 1;
                }
                let corr = corr / count as f32;
                if corr > best.0 {
                    best = (corr, lag);
                }
            }
            best.1
        };
        let profiles: Vec<Vec<f32>> = frames.iter().map(profile).collect();
        let shifts: Vec<i32> = profiles.windows(2).map(|w| lag(&w[0], &w[1])).collect();
        assert_eq!(shifts, [2, 4, 2, 0]);
    }

    #[test]
    fn mask_pixels_are_red_dominant() {
        let spec = SceneSpec {
            tubes: vec![straight_tube(1.0, 0.15)],
            width: 128,
            height: 64,
            frames: 1,
            artifacts: Artifacts { hair_count: 1, stain_count: 1 },
            seed: 21,
            ..SceneSpec::default()
        };
        let (frames, truth) = render_video(&spec).unwrap();
        let dom = frames[0].red_dominance();
        let mask = &truth.tubes[0].masks[0];
        let (mut inside, mut nin, mut outside, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..64 {
            for x in 0..128 {
                let v = f64::from(dom.get(0, x, y));
                if mask.get(x, y) {
                    inside += v;
                    nin += 1;
                } else {
                    outside += v;
                    nout += 1;
                }
            }
        }
        let (inside, outside) = (inside / nin as f64, outside / nout as f64);
        assert!(
            inside - outside >= 0.2,
            "inside {inside:.3} vs outside {outside:.3}"
        );
    }

    #[test]
    fn realized_gap_fraction_tracks_request() {
        for gap in [0.0f32, 0.2, 0.4, 0.6] {
            let spec = quiet_scene(vec![straight_tube(1.0, gap)], 4);
            let (_, truth) = render_video(&spec).unwrap();
            for (f, fill) in truth.tubes[0].fill_fraction.iter().enumerate() {
                assert!(
                    (fill - (1.0 - gap)).abs() <= 0.08,
                    "gap {gap}, frame {f}: fill {fill}"
                );
            }
        }
    }

    #[test]
    fn gap_wave_modulates_fill_over_time() {
        let mut tube = straight_tube(1.0, 0.3);
        tube.gap_wave = Some(GapWave { amplitude: 0.3, period_frames: 20.0 });
        let spec = quiet_scene(vec![tube], 20);
        let (_, truth) = render_video(&spec).unwrap();
        let fills = &truth.tubes[0].fill_fraction;
        let lo = fills.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = fills.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(hi - lo > 0.4, "fill range [{lo}, {hi}] too narrow");
        // Requested fill at frame 5 (wave peak) ≈ 1 − (0.3+0.3·sin(π/2)) = 0.4.
        assert!((fills[5] - 0.4).abs() < 0.1, "frame 5 fill {}", fills[5]);
    }

    #[test]
    fn truth_boxes_bound_masks() {
        let spec = quiet_scene(vec![straight_tube(1.0, 0.2)], 2);
        let (_, truth) = render_video(&spec).unwrap();
        let t = &truth.tubes[0];
        for (mask, &(bx, by, bw, bh)) in t.masks.iter().zip(&t.boxes) {
            assert!(bx + bw <= 128 && by + bh <= 64);
            for y in 0..64 {
                for x in 0..128 {
                    if mask.get(x, y) {
                        assert!(x >= bx && x < bx + bw && y >= by && y < by + bh);
                    }
                }
            }
            assert!(mask.count() <= t.lumen_area);
        }
        // Straight horizontal tube: direction ≈ 0 rad.
        assert!(t.direction.abs() < 1e-3);
    }

    #[test]
    fn backward_direction_flips_angle() {
        let mut tube = straight_tube(1.0, 0.0);
        tube.direction = FlowDir::Backward;
        let spec = quiet_scene(vec![tube], 1);
        let (_, truth) = render_video(&spec).unwrap();
        assert!((truth.tubes[0].direction - std::f32::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut outside = straight_tube(1.0, 0.0);
        outside.path[1] = (200.0, 32.0);
        assert!(render_video(&quiet_scene(vec![outside], 1)).is_err());
        let mut steep = straight_tube(-1.0, 0.0);
        steep.speed = -1.0;
        assert!(render_video(&quiet_scene(vec![steep], 1)).is_err());
        let mut gappy = straight_tube(1.0, 1.5);
        gappy.gap_fraction = 1.5;
        assert!(render_video(&quiet_scene(vec![gappy], 1)).is_err());
        let empty = SceneSpec { frames: 0, ..SceneSpec::default() };
        assert!(render_video(&empty).is_err());
    }

    #[test]
    fn patch_dataset_is_balanced_and_deterministic() {
        let a = make_patch_dataset(100, 3).unwrap();
        let b = make_patch_dataset(100, 3).unwrap();
        assert_eq!(a.len(), 100);
        let pos = a.iter().filter(|p| p.label == Some(Class::Capillary)).count();
        assert_eq!(pos, 50);
        assert_eq!(a, b);
        let c = make_patch_dataset(100, 4).unwrap();
        assert_ne!(a, c);
        assert!(make_patch_dataset(10, 0).is_err());
    }
}
