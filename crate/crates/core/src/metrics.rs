//! Per-capillary clinical measurements.
//!
//! Detection produces boxes per frame; this module turns those into
//! longitudinal records: track association across frames, vessel masks,
//! perfusion densities, hematocrit estimates, velocity classification,
//! temporal heterogeneity, and bulk flow direction.

use crate::error::{Error, Result};
use crate::flow::PolarFlow;
use crate::frame::{BinaryMask, Frame};
use crate::imgproc::{adaptive_gaussian_threshold, gaussian_blur};
use crate::roi::RoiBox;
use serde::{Deserialize, Serialize};

/// Minimum IoU between a track's last box and a detection for the two to be
/// linked.
pub const DEFAULT_TRACK_IOU: f32 = 0.3;

/// How many consecutive missed frames a track survives before it is closed.
pub const DEFAULT_TRACK_GAP: usize = 5;

/// Multiplier applied to raw flow magnitudes before velocity thresholds.
///
/// The estimator's box smoothing mixes stationary perivascular pixels into
/// the in-vessel average and attenuates it to ~0.90x the true displacement,
/// independent of vessel width over the 8-16 px range. Calibrated on
/// synthetic sequences with known speeds.
pub const DEFAULT_VELOCITY_SCALE: f32 = 1.11;

/// Blur window for vessel-mask extraction, matched to capillary scale.
const MASK_BLUR_WINDOW: usize = 31;
/// Neighbourhood for the adaptive threshold that follows the blur.
const MASK_THRESH_BLOCK: usize = 31;
/// How far above the local mean a pixel must sit to count as vessel.
const MASK_THRESH_OFFSET: f32 = 0.02;
/// Context margin added around a box before mask extraction so the local
/// mean sees perivascular background rather than only vessel interior.
const MASK_CONTEXT_PAD: usize = 16;

/// Discrete perfusion speed categories.
///
/// Ordered slowest to fastest; `VeryFast` only occurs when an upper split
/// threshold is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityClass {
    NoFlow,
    Slow,
    Normal,
    Fast,
    VeryFast,
}

impl std::fmt::Display for VelocityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            VelocityClass::NoFlow => "no_flow",
            VelocityClass::Slow => "slow",
            VelocityClass::Normal => "normal",
            VelocityClass::Fast => "fast",
            VelocityClass::VeryFast => "very_fast",
        };
        f.write_str(name)
    }
}

/// Speed cut points in px/frame. Lower bounds are inclusive: a speed equal
/// to `t1` is already `Slow`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityThresholds {
    /// Below this the vessel counts as stalled.
    pub t1: f32,
    /// Slow/normal boundary.
    pub t2: f32,
    /// Normal/fast boundary.
    pub t3: f32,
    /// Optional fast/very-fast split; `None` keeps a single fast class.
    pub t4: Option<f32>,
}

impl Default for VelocityThresholds {
    fn default() -> Self {
        Self { t1: 0.5, t2: 0.8, t3: 1.2, t4: None }
    }
}

impl VelocityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t1 < self.t2 && self.t2 < self.t3) {
            return Err(Error::parameter(format!(
                "velocity thresholds must satisfy 0 < t1 < t2 < t3, got {} {} {}",
                self.t1, self.t2, self.t3
            )));
        }
        if let Some(t4) = self.t4 {
            if t4 <= self.t3 {
                return Err(Error::parameter(format!(
                    "t4 must exceed t3, got {t4} <= {}",
                    self.t3
                )));
            }
        }
        Ok(())
    }

    /// Classify a single time-averaged speed.
    pub fn classify(&self, speed: f32) -> VelocityClass {
        if speed < self.t1 {
            VelocityClass::NoFlow
        } else if speed < self.t2 {
            VelocityClass::Slow
        } else if speed < self.t3 {
            VelocityClass::Normal
        } else {
            match self.t4 {
                Some(t4) if speed >= t4 => VelocityClass::VeryFast,
                _ => VelocityClass::Fast,
            }
        }
    }
}

/// Spread of a record's per-frame speeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Heterogeneity {
    /// Population standard deviation of per-frame mean magnitudes.
    pub std: f32,
    /// Coefficient of variation; absent when the mean is effectively zero.
    pub cv: Option<f32>,
}

/// One tracked capillary across the analyzed clip.
///
/// All per-frame series run the full length of the clip once a record is
/// complete; frames where the track was not observed hold `None` boxes,
/// empty masks, and zero areas/magnitudes. [`associate_tracks`] returns
/// skeletons with only `id` and `boxes` populated.
#[derive(Debug, Clone)]
pub struct CapillaryRecord {
    pub id: usize,
    /// Detection box per frame, `None` where the track was unobserved.
    pub boxes: Vec<Option<RoiBox>>,
    /// Vessel mask per frame, local to that frame's box.
    pub masks: Vec<BinaryMask>,
    /// Set pixels of each mask.
    pub area_px: Vec<usize>,
    /// Area normalized by the record's own peak area, in [0, 1].
    pub hematocrit: Vec<f32>,
    /// Mean flow magnitude over the mask, px/frame, calibrated.
    pub mean_magnitude: Vec<f32>,
    /// Circular-mean flow angle per frame, radians [0, 2pi); `None` where
    /// no flow was measurable.
    pub angle: Vec<Option<f32>>,
    pub velocity_class: Option<VelocityClass>,
    pub heterogeneity: Option<Heterogeneity>,
    /// Bulk flow direction in radians, [0, 2pi), image convention
    /// (0 = rightward, pi/2 = downward).
    pub direction: Option<f32>,
}

impl CapillaryRecord {
    /// An empty record with every series sized to `frames`.
    pub fn new(id: usize, frames: usize) -> Self {
        Self {
            id,
            boxes: vec![None; frames],
            masks: (0..frames).map(|_| BinaryMask::new(0, 0)).collect(),
            area_px: vec![0; frames],
            hematocrit: vec![0.0; frames],
            mean_magnitude: vec![0.0; frames],
            angle: vec![None; frames],
            velocity_class: None,
            heterogeneity: None,
            direction: None,
        }
    }

    /// Frames that contribute to temporal statistics: those with a box, or
    /// every frame when the record carries no box information at all.
    pub fn present_indices(&self) -> Vec<usize> {
        let with_box: Vec<usize> =
            (0..self.boxes.len()).filter(|&f| self.boxes[f].is_some()).collect();
        if with_box.is_empty() {
            (0..self.mean_magnitude.len()).collect()
        } else {
            with_box
        }
    }

    /// Time-averaged mean flow magnitude over observed frames.
    pub fn mean_speed(&self) -> Option<f32> {
        let idx = self.present_indices();
        let vals: Vec<f32> = idx
            .iter()
            .filter(|&&f| f < self.mean_magnitude.len())
            .map(|&f| self.mean_magnitude[f])
            .collect();
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f32>() / vals.len() as f32)
    }
}

/// Extract the vessel mask inside `roi`.
///
/// The crop is widened by a context margin, heavily blurred, reduced to the
/// red-dominance plane, and thresholded against a local mean, so only
/// regions redder than their own surroundings survive. A flat crop always
/// produces an empty mask. The returned mask has the box's dimensions.
pub fn capillary_mask(frame: &Frame, roi: &RoiBox) -> Result<BinaryMask> {
    if roi.w == 0 || roi.h == 0 {
        return Err(Error::parameter("mask extraction needs a non-empty box"));
    }
    if roi.x + roi.w > frame.width() || roi.y + roi.h > frame.height() {
        return Err(Error::parameter(format!(
            "box {}x{}+{}+{} exceeds frame {}x{}",
            roi.w,
            roi.h,
            roi.x,
            roi.y,
            frame.width(),
            frame.height()
        )));
    }
    let ctx = roi.padded(MASK_CONTEXT_PAD, frame.width(), frame.height());
    let crop = frame.crop(ctx.x, ctx.y, ctx.w, ctx.h)?;
    let blurred = gaussian_blur(&crop, MASK_BLUR_WINDOW, None)?;
    let dominance = blurred.red_dominance();
    let wide = adaptive_gaussian_threshold(&dominance, MASK_THRESH_BLOCK, MASK_THRESH_OFFSET)?;
    let mut mask = BinaryMask::new(roi.w, roi.h);
    let (ox, oy) = (roi.x - ctx.x, roi.y - ctx.y);
    for y in 0..roi.h {
        for x in 0..roi.w {
            mask.set(x, y, wide.get(ox + x, oy + y));
        }
    }
    Ok(mask)
}

/// Union pixel count of box-local masks blitted onto a frame-sized canvas.
fn union_area<F>(records: &[CapillaryRecord], frame_w: usize, frame_h: usize, keep: F) -> Result<usize>
where
    F: Fn(&CapillaryRecord) -> bool,
{
    if frame_w == 0 || frame_h == 0 {
        return Err(Error::parameter("frame area must be positive"));
    }
    let mut canvas = BinaryMask::new(frame_w, frame_h);
    for record in records.iter().filter(|r| keep(r)) {
        for (f, roi) in record.boxes.iter().enumerate() {
            let Some(roi) = roi else { continue };
            let Some(mask) = record.masks.get(f) else { continue };
            if mask.width() == 0 || mask.height() == 0 {
                continue;
            }
            if mask.width() != roi.w || mask.height() != roi.h {
                return Err(Error::parameter(format!(
                    "record {} frame {f}: mask {}x{} does not match box {}x{}",
                    record.id,
                    mask.width(),
                    mask.height(),
                    roi.w,
                    roi.h
                )));
            }
            if roi.x + roi.w > frame_w || roi.y + roi.h > frame_h {
                return Err(Error::parameter(format!(
                    "record {} frame {f}: box exceeds frame bounds",
                    record.id
                )));
            }
            for y in 0..roi.h {
                for x in 0..roi.w {
                    if mask.get(x, y) {
                        canvas.set(roi.x + x, roi.y + y, true);
                    }
                }
            }
        }
    }
    Ok(canvas.count())
}

/// Fraction of the frame covered by any detected vessel at any time.
/// Overlapping masks count once.
pub fn total_capillary_density(
    records: &[CapillaryRecord],
    frame_w: usize,
    frame_h: usize,
) -> Result<f32> {
    let area = union_area(records, frame_w, frame_h, |_| true)?;
    Ok(area as f32 / (frame_w * frame_h) as f32)
}

/// Like [`total_capillary_density`] but counting only records whose
/// time-averaged speed reaches `no_flow_cutoff`. Never exceeds the total
/// density over the same records.
pub fn functional_capillary_density(
    records: &[CapillaryRecord],
    frame_w: usize,
    frame_h: usize,
    no_flow_cutoff: f32,
) -> Result<f32> {
    let area = union_area(records, frame_w, frame_h, |r| {
        r.mean_speed().is_some_and(|v| v >= no_flow_cutoff)
    })?;
    Ok(area as f32 / (frame_w * frame_h) as f32)
}

/// Per-frame vessel fill relative to the record's own peak area.
///
/// The peak is the densest observed fill, so values land in [0, 1]; a
/// record that never shows any vessel area has no defined reference and
/// errors.
pub fn hematocrit_series(record: &CapillaryRecord) -> Result<Vec<f32>> {
    let reference = record.area_px.iter().copied().max().unwrap_or(0);
    if reference == 0 {
        return Err(Error::undefined_record(format!(
            "record {} has no vessel area in any frame; hematocrit undefined",
            record.id
        )));
    }
    Ok(record
        .area_px
        .iter()
        .map(|&a| (a as f32 / reference as f32).clamp(0.0, 1.0))
        .collect())
}

/// Classify a record by its time-averaged speed over observed frames.
pub fn classify_velocity(
    record: &CapillaryRecord,
    thresholds: &VelocityThresholds,
) -> Result<VelocityClass> {
    thresholds.validate()?;
    let speed = record
        .mean_speed()
        .ok_or_else(|| Error::parameter("velocity needs a non-empty magnitude series"))?;
    Ok(thresholds.classify(speed))
}

/// Spread of per-frame speeds over observed frames. Needs at least two
/// observations; the coefficient of variation is omitted for means below
/// 1e-6 rather than divided toward infinity.
pub fn heterogeneity(record: &CapillaryRecord) -> Result<Heterogeneity> {
    let idx = record.present_indices();
    let vals: Vec<f32> = idx
        .iter()
        .filter(|&&f| f < record.mean_magnitude.len())
        .map(|&f| record.mean_magnitude[f])
        .collect();
    if vals.len() < 2 {
        return Err(Error::parameter(format!(
            "heterogeneity needs at least two observed frames, got {}",
            vals.len()
        )));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() as f32;
    let cv = if mean.abs() < 1e-6 { None } else { Some((var.sqrt() / mean) as f32) };
    Ok(Heterogeneity { std, cv })
}

/// Mean flow magnitude over the set pixels of a box-local mask placed at
/// `origin` in the flow field. Empty masks read as zero.
pub fn masked_mean_magnitude(
    flow: &PolarFlow,
    origin: (usize, usize),
    mask: &BinaryMask,
) -> Result<f32> {
    let (sum, _, _, count) = masked_vector_sums(flow, origin, mask)?;
    if count == 0 {
        return Ok(0.0);
    }
    Ok((sum / count as f64) as f32)
}

/// Magnitude sum, magnitude-weighted unit-vector sums, and pixel count over
/// a placed mask.
fn masked_vector_sums(
    flow: &PolarFlow,
    origin: (usize, usize),
    mask: &BinaryMask,
) -> Result<(f64, f64, f64, usize)> {
    let (ox, oy) = origin;
    if ox + mask.width() > flow.width || oy + mask.height() > flow.height {
        return Err(Error::parameter(format!(
            "mask {}x{} at ({ox}, {oy}) exceeds flow field {}x{}",
            mask.width(),
            mask.height(),
            flow.width,
            flow.height
        )));
    }
    let mut sum_mag = 0.0f64;
    let mut sum_x = 0.0f64;
    let mut sum_y = 0.0f64;
    let mut count = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(x, y) {
                continue;
            }
            let i = (oy + y) * flow.width + (ox + x);
            let mag = flow.magnitude[i] as f64;
            let ang = flow.angle[i] as f64;
            sum_mag += mag;
            sum_x += mag * ang.cos();
            sum_y += mag * ang.sin();
            count += 1;
        }
    }
    Ok((sum_mag, sum_x, sum_y, count))
}

/// Magnitude-weighted circular mean of flow direction over the record's
/// masks across all frames, in radians [0, 2pi), image convention.
///
/// `flows[f]` must map frame `f` to `f + 1` at full frame resolution.
/// Errors when every masked pixel has zero magnitude — the direction of a
/// stalled vessel is undefined.
pub fn flow_direction(record: &CapillaryRecord, flows: &[PolarFlow]) -> Result<f32> {
    if flows.is_empty() {
        return Err(Error::parameter("direction needs at least one flow field"));
    }
    let mut sum_x = 0.0f64;
    let mut sum_y = 0.0f64;
    for (f, flow) in flows.iter().enumerate() {
        let Some(Some(roi)) = record.boxes.get(f) else { continue };
        let Some(mask) = record.masks.get(f) else { continue };
        if mask.width() == 0 || mask.height() == 0 {
            continue;
        }
        if mask.width() != roi.w || mask.height() != roi.h {
            return Err(Error::parameter(format!(
                "record {} frame {f}: mask does not match box dimensions",
                record.id
            )));
        }
        let (_, sx, sy, _) = masked_vector_sums(flow, (roi.x, roi.y), mask)?;
        sum_x += sx;
        sum_y += sy;
    }
    let norm = (sum_x * sum_x + sum_y * sum_y).sqrt();
    if norm < 1e-12 {
        return Err(Error::undefined_record(format!(
            "record {} has no flow over its masks; direction undefined",
            record.id
        )));
    }
    let mut angle = sum_y.atan2(sum_x);
    if angle < 0.0 {
        angle += std::f64::consts::TAU;
    }
    Ok((angle as f32).rem_euclid(std::f32::consts::TAU))
}

/// Link per-frame detections into tracks by greedy IoU matching.
///
/// Each frame, every (track, detection) pair with IoU at least `iou_min`
/// competes, best overlap first; winners extend the track. A track missing
/// from more than `gap_max` consecutive frames closes, and later detections
/// in the same place start a fresh record. Returned records are skeletons:
/// `boxes` spans every frame, all other series are empty.
pub fn associate_tracks(
    detections: &[Vec<RoiBox>],
    iou_min: f32,
    gap_max: usize,
) -> Result<Vec<CapillaryRecord>> {
    if !(0.0..=1.0).contains(&iou_min) {
        return Err(Error::parameter(format!("iou_min must lie in [0, 1], got {iou_min}")));
    }
    let frames = detections.len();
    struct Active {
        record: usize,
        last_box: RoiBox,
        missed: usize,
    }
    let mut records: Vec<CapillaryRecord> = Vec::new();
    let mut active: Vec<Active> = Vec::new();
    for (f, dets) in detections.iter().enumerate() {
        // Score every viable pairing, then commit best-first.
        let mut pairs: Vec<(f32, usize, usize)> = Vec::new();
        for (ti, track) in active.iter().enumerate() {
            for (di, det) in dets.iter().enumerate() {
                let iou = track.last_box.iou(det);
                if iou >= iou_min {
                    pairs.push((iou, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_taken = vec![false; active.len()];
        let mut det_taken = vec![false; dets.len()];
        for (_, ti, di) in pairs {
            if track_taken[ti] || det_taken[di] {
                continue;
            }
            track_taken[ti] = true;
            det_taken[di] = true;
            let rec = active[ti].record;
            records[rec].boxes[f] = Some(dets[di]);
            active[ti].last_box = dets[di];
            active[ti].missed = 0;
        }
        for ti in 0..active.len() {
            if !track_taken[ti] {
                active[ti].missed += 1;
            }
        }
        active.retain(|t| t.missed <= gap_max);
        for (di, det) in dets.iter().enumerate() {
            if det_taken[di] {
                continue;
            }
            let id = records.len();
            let mut record = CapillaryRecord::new(id, frames);
            record.masks = Vec::new();
            record.area_px = Vec::new();
            record.hematocrit = Vec::new();
            record.mean_magnitude = Vec::new();
            record.angle = Vec::new();
            record.boxes[f] = Some(*det);
            records.push(record);
            active.push(Active { record: id, last_box: *det, missed: 0 });
        }
    }
    Ok(records)
}

/// Hulls this much farther apart than `gap_px` still fuse when the gap runs
/// along both fragments' long axis: quiet stretches open up lengthwise
/// inside a vessel, while the crosswise spacing to a neighboring vessel
/// must stay strict.
const COALESCE_ALONG_FACTOR: usize = 3;

/// True when two track hulls plausibly belong to one vessel.
fn hulls_continue(a: &RoiBox, b: &RoiBox, gap_px: usize) -> bool {
    if a.gap(b) <= gap_px {
        return true;
    }
    let along = gap_px * COALESCE_ALONG_FACTOR;
    let x_overlap = a.x < b.x + b.w && b.x < a.x + a.w;
    let y_overlap = a.y < b.y + b.h && b.y < a.y + a.h;
    if x_overlap && a.h >= a.w && b.h >= b.w {
        return a.gap(b) <= along;
    }
    if y_overlap && a.w >= a.h && b.w >= b.h {
        return a.gap(b) <= along;
    }
    false
}

/// Fuse track skeletons that describe one vessel.
///
/// A vessel is a static structure the cells move through, so every track it
/// spawns — parallel fragments, or chains broken in time — stays inside one
/// strip of the frame. Records whose lifetime bounding hulls come within
/// `gap_px` pixels of each other (transitively) collapse into a single
/// record whose per-frame box is the union of the group's boxes; gaps up to
/// three times wider are bridged along the fragments' elongation axis.
/// Call this on skeleton records, before the measurement series are filled.
pub fn coalesce_records(records: Vec<CapillaryRecord>, gap_px: usize) -> Vec<CapillaryRecord> {
    let n = records.len();
    if n <= 1 {
        return records;
    }
    let hulls: Vec<Option<RoiBox>> = records
        .iter()
        .map(|r| r.boxes.iter().flatten().copied().reduce(|a, b| a.union_box(&b)))
        .collect();

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
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (Some(a), Some(b)) = (hulls[i], hulls[j]) else {
                continue;
            };
            if hulls_continue(&a, &b, gap_px) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let frames = records[0].boxes.len();
    let mut groups: std::collections::BTreeMap<usize, CapillaryRecord> =
        std::collections::BTreeMap::new();
    for (i, record) in records.into_iter().enumerate() {
        let root = find(&mut parent, i);
        groups
            .entry(root)
            .and_modify(|merged| {
                for f in 0..frames {
                    merged.boxes[f] = match (merged.boxes[f], record.boxes[f]) {
                        (Some(a), Some(b)) => Some(a.union_box(&b)),
                        (a, b) => a.or(b),
                    };
                }
            })
            .or_insert(record);
    }
    let mut out: Vec<CapillaryRecord> = groups.into_values().collect();
    for (id, record) in out.iter_mut().enumerate() {
        record.id = id;
    }
    out
}
