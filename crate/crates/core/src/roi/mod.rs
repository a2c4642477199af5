//! Region-of-interest proposal: candidate capillary boxes from two
//! independent cues.
//!
//! The salience pipeline compares each frame against an adaptive background
//! model with windowed structural similarity — regions that stopped looking
//! like the background are candidates. The motion pipeline accumulates
//! absolute differences over five consecutive frames. Both produce scored
//! bounding boxes that are fused by union-merge before classification.

pub mod background;
pub mod contour;

pub use background::{BackgroundModel, BackgroundParams};
pub use contour::{find_contours, Contour};

use crate::error::{Error, Result};
use crate::frame::{BinaryMask, Frame};
use crate::imgproc::{morph_open3, ssim};

/// Which proposal pipeline produced a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoiSource {
    Salience,
    Motion,
}

/// A scored candidate region, fully inside its frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub source: RoiSource,
    pub score: f32,
}

impl RoiBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &RoiBox) -> f32 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (x1 - x0) * (y1 - y0);
        let union = self.area() + other.area() - inter;
        inter as f32 / union as f32
    }

    /// Chebyshev distance between box edges: 0 when they touch or
    /// overlap, otherwise the widest axis gap in pixels.
    pub fn gap(&self, other: &RoiBox) -> usize {
        fn axis(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
            if a1 <= b0 {
                b0 - a1
            } else if b1 <= a0 {
                a0 - b1
            } else {
                0
            }
        }
        let gx = axis(self.x, self.x + self.w, other.x, other.x + other.w);
        let gy = axis(self.y, self.y + self.h, other.y, other.y + other.h);
        gx.max(gy)
    }

    /// Smallest box containing both.
    pub fn union_box(&self, other: &RoiBox) -> RoiBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = (self.x + self.w).max(other.x + other.w);
        let y1 = (self.y + self.h).max(other.y + other.h);
        RoiBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            source: if self.score >= other.score {
                self.source
            } else {
                other.source
            },
            score: self.score.max(other.score),
        }
    }

    /// Expands the box by `pad` on every side, clipped to the frame.
    pub fn padded(&self, pad: usize, frame_w: usize, frame_h: usize) -> RoiBox {
        let x = self.x.saturating_sub(pad);
        let y = self.y.saturating_sub(pad);
        let w = (self.x + self.w + pad).min(frame_w) - x;
        let h = (self.y + self.h + pad).min(frame_h) - y;
        RoiBox { x, y, w, h, ..*self }
    }
}

/// Box-area acceptance range in pixels².
/// Accepted detected-region size, counted in set pixels of the candidate
/// mask rather than bounding-box area: a long thin vessel covers few
/// pixels inside a large box, while a sensor-wide brightness change fills
/// its box solid, so pixel count separates the two where box area cannot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaBounds {
    pub min_px: usize,
    pub max_px: usize,
}

impl Default for AreaBounds {
    fn default() -> Self {
        Self {
            min_px: 40,
            max_px: 20_000,
        }
    }
}

impl AreaBounds {
    /// Derives bounds from optical calibration: regions from a 5 µm dot up
    /// to a 30 µm-wide vessel running 1 mm through the field.
    pub fn from_pitch(pixel_pitch_um: f32) -> Self {
        let px_per_um = 1.0 / pixel_pitch_um;
        let min = std::f32::consts::PI * (2.5 * px_per_um).powi(2);
        let max = (30.0 * px_per_um) * (1000.0 * px_per_um);
        Self {
            min_px: min.round().max(1.0) as usize,
            max_px: max.round() as usize,
        }
    }

    /// Bounds for a frame: calibrated when the pitch is known, absolute
    /// defaults otherwise.
    pub fn for_frame(frame: &Frame) -> Self {
        match frame.pixel_pitch_um {
            Some(p) if p > 0.0 => Self::from_pitch(p),
            _ => Self::default(),
        }
    }

    pub fn accepts(&self, area: usize) -> bool {
        (self.min_px..=self.max_px).contains(&area)
    }
}

/// Turns a cleaned candidate mask into scored boxes.
///
/// Outer contours become bounding boxes; degenerate boundaries (fewer than
/// four points) and regions whose set-pixel count falls outside the area
/// bounds are dropped. The score for each box is produced by `score_fn`
/// and clamped to [0, 1].
fn boxes_from_mask(
    mask: &BinaryMask,
    bounds: &AreaBounds,
    source: RoiSource,
    mut score_fn: impl FnMut(usize, usize, usize, usize) -> f32,
) -> Vec<RoiBox> {
    let mut out = Vec::new();
    for c in find_contours(mask) {
        if c.is_hole || c.points.len() < 4 {
            continue;
        }
        let (x, y, w, h) = c.bounding_box();
        let mut px = 0usize;
        for yy in y..y + h {
            for xx in x..x + w {
                px += mask.get(xx, yy) as usize;
            }
        }
        if !bounds.accepts(px) {
            continue;
        }
        out.push(RoiBox {
            x,
            y,
            w,
            h,
            source,
            score: score_fn(x, y, w, h).clamp(0.0, 1.0),
        });
    }
    out
}

/// Proposes boxes where the frame stopped resembling the background.
///
/// The SSIM map between the frame and the model's background image is
/// binarized at `ssim_thresh` (low similarity means candidate), opened to
/// drop speckle, and converted to boxes scored by one minus the mean SSIM
/// inside the box.
pub fn salience_rois(
    frame: &Frame,
    model: &BackgroundModel,
    ssim_thresh: f32,
    bounds: &AreaBounds,
) -> Result<Vec<RoiBox>> {
    let bg = model.background_image()?;
    let gray = frame.to_gray();
    let s = ssim(&gray, &bg, 7)?;
    let (w, h) = (s.width, s.height);
    let bits = s.map.iter().map(|&v| v < ssim_thresh).collect();
    let mask = morph_open3(&BinaryMask::from_bits(w, h, bits)?);
    Ok(boxes_from_mask(&mask, bounds, RoiSource::Salience, |bx, by, bw, bh| {
        let mut acc = 0.0f64;
        for y in by..by + bh {
            for x in bx..bx + bw {
                acc += s.map[y * w + x] as f64;
            }
        }
        1.0 - (acc / (bw * bh) as f64) as f32
    }))
}

/// Proposes boxes from accumulated motion over five consecutive frames.
///
/// Absolute frame-to-frame differences are summed; pixels whose
/// accumulated difference exceeds four times the noise floor are
/// candidates. Scores are the mean accumulated difference inside the box
/// normalized by the maximum possible value.
pub fn motion_rois(frames: &[Frame], noise_floor: f32, bounds: &AreaBounds) -> Result<Vec<RoiBox>> {
    if frames.len() != 5 {
        return Err(Error::parameter(format!(
            "motion proposal needs exactly 5 frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    for f in frames {
        if f.width() != w || f.height() != h {
            return Err(Error::parameter("motion frames must share dimensions"));
        }
    }
    let grays: Vec<Frame> = frames.iter().map(Frame::to_gray).collect();
    let mut acc = vec![0.0f32; w * h];
    for pair in grays.windows(2) {
        let (a, b) = (pair[0].plane(0), pair[1].plane(0));
        for i in 0..w * h {
            acc[i] += (b[i] - a[i]).abs();
        }
    }
    let thresh = 4.0 * noise_floor;
    let bits = acc.iter().map(|&v| v > thresh).collect();
    let mask = morph_open3(&BinaryMask::from_bits(w, h, bits)?);
    Ok(boxes_from_mask(&mask, bounds, RoiSource::Motion, |bx, by, bw, bh| {
        let mut sum = 0.0f64;
        for y in by..by + bh {
            for x in bx..bx + bw {
                sum += acc[y * w + x] as f64;
            }
        }
        (sum / (bw * bh) as f64 / 4.0) as f32
    }))
}

/// Fuses proposals from both pipelines.
///
/// Boxes overlapping at `iou_thresh` or above — or, when `gap_px` is
/// nonzero, boxes whose edges lie within `gap_px` pixels — are grouped
/// transitively and each group collapses to its union box with the group's
/// best score. The pass repeats on the union boxes until nothing merges,
/// so merging the output again changes nothing. Gap merging exists because
/// one vessel proposes as a chain of disjoint fragments (cells move, the
/// plasma gaps between them stay quiet); `gap_px = 0` disables it. Output
/// order is score descending with x/y tie-breaks.
pub fn merge_rois(
    salience: &[RoiBox],
    motion: &[RoiBox],
    iou_thresh: f32,
    gap_px: usize,
) -> Vec<RoiBox> {
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }

    let mut boxes: Vec<RoiBox> = salience.iter().chain(motion).copied().collect();
    loop {
        let n = boxes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut any = false;
        for i in 0..n {
            for j in i + 1..n {
                let close = boxes[i].iou(&boxes[j]) >= iou_thresh
                    || (gap_px > 0 && boxes[i].gap(&boxes[j]) <= gap_px);
                if close {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                        any = true;
                    }
                }
            }
        }
        if !any {
            break;
        }
        let mut groups: std::collections::BTreeMap<usize, RoiBox> = std::collections::BTreeMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            groups
                .entry(root)
                .and_modify(|b| *b = b.union_box(&boxes[i]))
                .or_insert(boxes[i]);
        }
        boxes = groups.into_values().collect();
    }
    sort_boxes(&mut boxes);
    boxes
}

fn sort_boxes(boxes: &mut [RoiBox]) {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.x.cmp(&b.x))
            .then(a.y.cmp(&b.y))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_texture(w: usize, h: usize) -> Frame {
        let data = (0..w * h)
            .map(|i| {
                let x = (i % w) as f32;
                let y = (i / w) as f32;
                0.5 + 0.05 * ((x * 0.21).sin() + (y * 0.17).cos())
            })
            .collect();
        Frame::new(w, h, 1, data).unwrap()
    }

    fn warmed_model(frame: &Frame, n: usize) -> BackgroundModel {
        let mut m = BackgroundModel::new(frame.width(), frame.height());
        for _ in 0..n {
            m.update(frame).unwrap();
        }
        m
    }

    #[test]
    fn salience_empty_when_frame_matches_background() {
        let f = flat_texture(64, 64);
        let model = warmed_model(&f, 20);
        let boxes = salience_rois(&f, &model, 0.65, &AreaBounds::default()).unwrap();
        assert!(boxes.is_empty(), "{boxes:?}");
    }

    #[test]
    fn salience_finds_dark_tube() {
        let base = flat_texture(96, 96);
        let model = warmed_model(&base, 20);
        let mut data = base.data().to_vec();
        let (bx, by, bw, bh) = (25usize, 40usize, 40usize, 12usize);
        for y in by..by + bh {
            for x in bx..bx + bw {
                data[y * 96 + x] = 0.1;
            }
        }
        let f = Frame::new(96, 96, 1, data).unwrap();
        let boxes = salience_rois(&f, &model, 0.65, &AreaBounds::default()).unwrap();
        assert_eq!(boxes.len(), 1, "{boxes:?}");
        let truth = RoiBox {
            x: bx,
            y: by,
            w: bw,
            h: bh,
            source: RoiSource::Salience,
            score: 1.0,
        };
        assert!(boxes[0].iou(&truth) >= 0.5, "IoU {}", boxes[0].iou(&truth));
        assert!(boxes[0].score > 0.3);
    }

    #[test]
    fn salience_counts_separated_blobs() {
        let base = flat_texture(128, 128);
        let model = warmed_model(&base, 20);
        let mut data = base.data().to_vec();
        let blobs = [(10usize, 10usize), (70, 20), (30, 80)];
        for &(bx, by) in &blobs {
            for y in by..by + 10 {
                for x in bx..bx + 20 {
                    data[y * 128 + x] = 0.1;
                }
            }
        }
        let f = Frame::new(128, 128, 1, data).unwrap();
        let boxes = salience_rois(&f, &model, 0.65, &AreaBounds::default()).unwrap();
        assert_eq!(boxes.len(), blobs.len(), "{boxes:?}");
    }

    #[test]
    fn motion_empty_for_static_and_noise() {
        let f = flat_texture(64, 64);
        let frames = vec![f.clone(), f.clone(), f.clone(), f.clone(), f.clone()];
        assert!(motion_rois(&frames, 0.02, &AreaBounds::default())
            .unwrap()
            .is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let noisy: Vec<Frame> = (0..5)
            .map(|_| {
                let data = f
                    .data()
                    .iter()
                    .map(|v| (v + rng.gen_range(-0.005f32..=0.005)).clamp(0.0, 1.0))
                    .collect();
                Frame::new(64, 64, 1, data).unwrap()
            })
            .collect();
        assert!(motion_rois(&noisy, 0.02, &AreaBounds::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn motion_covers_swept_path_of_textured_blob() {
        let base = flat_texture(96, 64);
        let mut frames = Vec::new();
        let (bw, bh) = (12usize, 10usize);
        let y0 = 24usize;
        for step in 0..5usize {
            let x0 = 20 + step;
            let mut data = base.data().to_vec();
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    // Texture rides along with the blob so motion registers
                    // across the whole body, not just its edges.
                    let v = if (x - x0 + y) % 2 == 0 { 0.9 } else { 0.2 };
                    data[y * 96 + x] = v;
                }
            }
            frames.push(Frame::new(96, 64, 1, data).unwrap());
        }
        let boxes = motion_rois(&frames, 0.02, &AreaBounds::default()).unwrap();
        assert_eq!(boxes.len(), 1, "{boxes:?}");
        let swept = RoiBox {
            x: 20,
            y: y0,
            w: bw + 4,
            h: bh,
            source: RoiSource::Motion,
            score: 1.0,
        };
        assert!(boxes[0].iou(&swept) >= 0.4, "IoU {}", boxes[0].iou(&swept));
    }

    #[test]
    fn motion_rejects_wrong_length() {
        let f = flat_texture(32, 32);
        assert!(motion_rois(&[f.clone(), f.clone()], 0.02, &AreaBounds::default()).is_err());
    }

    #[test]
    fn merge_keeps_disjoint_sorted() {
        let b1 = RoiBox {
            x: 0,
            y: 0,
            w: 10,
            h: 10,
            source: RoiSource::Salience,
            score: 0.4,
        };
        let b2 = RoiBox {
            x: 50,
            y: 50,
            w: 10,
            h: 10,
            source: RoiSource::Motion,
            score: 0.8,
        };
        let out = merge_rois(&[b1], &[b2], 0.3, 0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], b2);
        assert_eq!(out[1], b1);
    }

    #[test]
    fn merge_collapses_identical_boxes() {
        let b = RoiBox {
            x: 5,
            y: 5,
            w: 20,
            h: 10,
            source: RoiSource::Salience,
            score: 0.5,
        };
        let twin = RoiBox {
            source: RoiSource::Motion,
            score: 0.7,
            ..b
        };
        let out = merge_rois(&[b], &[twin], 0.3, 0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.7);
        assert_eq!((out[0].x, out[0].y, out[0].w, out[0].h), (5, 5, 20, 10));
    }

    /// Brute-force reference: group boxes by depth-first search over the
    /// pairwise-overlap graph, collapse each group to its union box, and
    /// repeat on the unions until nothing overlaps.
    fn transitive_merge_oracle(boxes: &[RoiBox], iou_thresh: f32) -> Vec<(usize, usize, usize, usize)> {
        let mut current = boxes.to_vec();
        loop {
            let n = current.len();
            let mut visited = vec![false; n];
            let mut next = Vec::new();
            let mut merged_any = false;
            for start in 0..n {
                if visited[start] {
                    continue;
                }
                let mut stack = vec![start];
                visited[start] = true;
                let mut group = Vec::new();
                while let Some(i) = stack.pop() {
                    group.push(i);
                    for j in 0..n {
                        if !visited[j] && current[i].iou(&current[j]) >= iou_thresh {
                            visited[j] = true;
                            stack.push(j);
                        }
                    }
                }
                if group.len() > 1 {
                    merged_any = true;
                }
                let mut u = current[group[0]];
                for &i in &group[1..] {
                    u = u.union_box(&current[i]);
                }
                next.push(u);
            }
            current = next;
            if !merged_any {
                break;
            }
        }
        let mut v: Vec<_> = current.iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
        v.sort();
        v
    }

    #[test]
    fn merge_chain_matches_transitive_oracle() {
        // Three boxes, each overlapping the next at IoU 0.5.
        let mk = |x| RoiBox {
            x,
            y: 10,
            w: 20,
            h: 10,
            source: RoiSource::Salience,
            score: 0.5,
        };
        let chain = [mk(10), mk(20), mk(30)];
        let out = merge_rois(&chain, &[], 0.3, 0);
        let mut got: Vec<_> = out.iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
        got.sort();
        assert_eq!(got, transitive_merge_oracle(&chain, 0.3));
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x, out[0].w), (10, 40));
    }

    #[test]
    fn merge_matches_oracle_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..40 {
            let boxes: Vec<RoiBox> = (0..10)
                .map(|_| RoiBox {
                    x: rng.gen_range(0..60),
                    y: rng.gen_range(0..60),
                    w: rng.gen_range(5..25),
                    h: rng.gen_range(5..25),
                    source: RoiSource::Motion,
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let out = merge_rois(&boxes, &[], 0.3, 0);
            let mut got: Vec<_> = out.iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
            got.sort();
            assert_eq!(got, transitive_merge_oracle(&boxes, 0.3));
        }
    }

    #[test]
    fn gap_merge_fuses_fragments_of_one_vessel() {
        // Colinear fragments 8 px apart, the way a tube proposes when only
        // its moving cells trip the detectors.
        let frag = |x| RoiBox {
            x,
            y: 40,
            w: 14,
            h: 10,
            source: RoiSource::Motion,
            score: 0.5,
        };
        let frags = [frag(10), frag(32), frag(54)];
        let out = merge_rois(&frags, &[], 0.3, 8);
        assert_eq!(out.len(), 1, "{out:?}");
        assert_eq!((out[0].x, out[0].w), (10, 58));
        // The same fragments stay apart when proximity merging is off.
        assert_eq!(merge_rois(&frags, &[], 0.3, 0).len(), 3);
        // A second vessel beyond the gap keeps its own box.
        let far = RoiBox {
            x: 10,
            y: 80,
            w: 40,
            h: 10,
            source: RoiSource::Salience,
            score: 0.9,
        };
        assert_eq!(merge_rois(&frags, &[far], 0.3, 8).len(), 2);
    }

    #[test]
    fn box_gap_is_zero_only_on_contact() {
        let a = RoiBox { x: 0, y: 0, w: 10, h: 10, source: RoiSource::Salience, score: 0.5 };
        let touch = RoiBox { x: 10, y: 0, w: 5, h: 10, ..a };
        let apart = RoiBox { x: 17, y: 25, w: 5, h: 5, ..a };
        assert_eq!(a.gap(&touch), 0);
        assert_eq!(a.gap(&apart), 15); // dy gap 15 dominates dx gap 7
        assert_eq!(apart.gap(&a), 15);
        assert_eq!(a.gap(&a), 0);
    }

    #[test]
    fn merge_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let boxes: Vec<RoiBox> = (0..12)
                .map(|_| RoiBox {
                    x: rng.gen_range(0..80),
                    y: rng.gen_range(0..80),
                    w: rng.gen_range(5..20),
                    h: rng.gen_range(5..20),
                    source: RoiSource::Salience,
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let once = merge_rois(&boxes, &[], 0.3, 6);
            let twice = merge_rois(&once, &[], 0.3, 6);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn pitch_derived_bounds_scale_with_calibration() {
        let b = AreaBounds::from_pitch(1.0);
        assert_eq!(b.min_px, 20); // π·2.5² ≈ 19.6
        assert_eq!(b.max_px, 30_000); // 30 µm × 1 mm
        let finer = AreaBounds::from_pitch(0.5);
        assert!(finer.min_px > b.min_px);
        assert!(AreaBounds::default().accepts(40));
        assert!(!AreaBounds::default().accepts(39));
        assert!(!AreaBounds::default().accepts(20_001));
    }
}
