//! End-to-end video analysis.
//!
//! `analyze` runs the full chain: frame conditioning, candidate proposal
//! from background salience and accumulated motion, optional CNN filtering,
//! track association, vessel-mask extraction, optical-flow measurement,
//! and the per-capillary metrics. `detect` runs only the detection stages
//! and is what the benchmark times.

use crate::classifier::{classify_rois, CnnModel};
use crate::config::{Denoise, PipelineConfig};
use crate::error::{Error, Result};
use crate::flow::{farneback_flow, to_polar};
use crate::frame::Frame;
use crate::imgproc::{enhance_contrast, median_blur, nlm::nlm_denoise};
use crate::metrics::{
    self, associate_tracks, capillary_mask, classify_velocity, coalesce_records,
    hematocrit_series, heterogeneity, CapillaryRecord,
};
use crate::report::{
    summarize_record, AnalysisReport, DensitySummary, TimingSummary, VideoSummary, SCHEMA_VERSION,
};
use crate::roi::{merge_rois, motion_rois, salience_rois, BackgroundModel, BackgroundParams, RoiBox};
use rayon::prelude::*;
use std::time::Instant;

/// The motion proposer needs five frames and flow needs pairs, so anything
/// shorter cannot be analyzed.
pub const MIN_ANALYZE_FRAMES: usize = 6;

/// Carried-over detection boxes drop out once decay pushes their score
/// below this.
const PERSISTENCE_FLOOR: f32 = 0.2;

/// Context margin around the track box when cropping frames for flow
/// estimation, so the estimator sees perivascular texture.
const FLOW_CROP_PAD: usize = 16;

/// Accumulated wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageSeconds {
    pub preprocess: f64,
    pub proposals: f64,
    pub classification: f64,
    pub masks: f64,
    pub flow: f64,
    pub metrics: f64,
}

impl StageSeconds {
    pub fn total(&self) -> f64 {
        self.preprocess + self.proposals + self.classification + self.masks + self.flow + self.metrics
    }

    /// Normalize to seconds per frame for the report.
    pub fn per_frame(&self, frames: usize) -> TimingSummary {
        let n = frames.max(1) as f64;
        TimingSummary {
            preprocess_s_per_frame: self.preprocess / n,
            proposals_s_per_frame: self.proposals / n,
            classification_s_per_frame: self.classification / n,
            masks_s_per_frame: self.masks / n,
            flow_s_per_frame: self.flow / n,
            metrics_s_per_frame: self.metrics / n,
            total_s_per_frame: self.total() / n,
        }
    }
}

/// Everything `analyze` produces for one video.
#[derive(Debug)]
pub struct Analysis {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    /// Surviving detections per frame, scored by the classifier when one
    /// was supplied.
    pub detections: Vec<Vec<RoiBox>>,
    pub records: Vec<CapillaryRecord>,
    pub total_density: f32,
    pub functional_density: f32,
    pub seconds: StageSeconds,
}

impl Analysis {
    /// Assemble the report document for this analysis.
    pub fn report(&self, video_id: &str, fps: f32) -> AnalysisReport {
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            video: VideoSummary {
                id: video_id.to_string(),
                width: self.width,
                height: self.height,
                frames: self.frame_count,
                fps,
            },
            density: DensitySummary {
                total: self.total_density,
                functional: self.functional_density,
            },
            capillaries: self.records.iter().map(summarize_record).collect(),
            timing: self.seconds.per_frame(self.frame_count),
        }
    }
}

fn check_frames(frames: &[Frame], minimum: usize) -> Result<(usize, usize)> {
    if frames.len() < minimum {
        return Err(Error::parameter(format!(
            "need at least {minimum} frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    for f in frames {
        if f.width() != w || f.height() != h {
            return Err(Error::parameter("all frames must share dimensions"));
        }
    }
    Ok((w, h))
}

fn preprocess_frame(frame: &Frame, config: &PipelineConfig) -> Result<Frame> {
    let p = &config.preprocess;
    let denoised = match p.denoise {
        Denoise::None => frame.clone(),
        Denoise::Median => median_blur(frame, p.median_kernel)?,
        Denoise::NonLocalMeans => nlm_denoise(frame, p.nlm_strength, p.nlm_patch, p.nlm_search)?,
    };
    if p.contrast_cutoff > 0.0 {
        enhance_contrast(&denoised, p.contrast_cutoff)
    } else {
        Ok(denoised)
    }
}

/// Run the detection stages only: conditioning, proposals from both
/// pipelines, fusion, and classifier filtering when a model is given.
/// Returns surviving boxes per frame (classifier probability as the score)
/// and the stage timings.
pub fn detect(
    frames: &[Frame],
    config: &PipelineConfig,
    model: Option<&CnnModel>,
) -> Result<(Vec<Vec<RoiBox>>, StageSeconds)> {
    config.validate()?;
    let (w, h) = check_frames(frames, 1)?;
    let bounds = config.area_bounds();
    let mut seconds = StageSeconds::default();

    let t = Instant::now();
    let conditioned = frames
        .iter()
        .map(|f| preprocess_frame(f, config))
        .collect::<Result<Vec<Frame>>>()?;
    seconds.preprocess = t.elapsed().as_secs_f64();

    let params = BackgroundParams {
        k_max: config.detection.background_components,
        learning_rate: config.detection.background_learning_rate,
        ..BackgroundParams::default()
    };
    let mut background = BackgroundModel::with_params(w, h, params)?;
    let mut detections = Vec::with_capacity(frames.len());
    let mut carried: Vec<RoiBox> = Vec::new();
    for (f, frame) in conditioned.iter().enumerate() {
        let t = Instant::now();
        background.update(&frame.to_gray())?;
        let salience =
            salience_rois(frame, &background, config.detection.ssim_threshold, &bounds)?;
        let motion = if f >= 4 {
            motion_rois(&conditioned[f - 4..=f], config.detection.motion_noise_floor, &bounds)?
        } else {
            Vec::new()
        };
        let merged = merge_rois(
            &salience,
            &motion,
            config.detection.merge_iou,
            config.detection.merge_gap_px,
        );
        // Evidence for a vessel flickers: cells light up a stretch one
        // frame and the plasma behind them goes quiet the next. Boxes from
        // recent frames stay in play at a decayed score, so one vessel
        // keeps one box instead of splintering per frame.
        let merged = merge_rois(
            &merged,
            &carried,
            config.detection.merge_iou,
            config.detection.merge_gap_px,
        );
        seconds.proposals += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let kept: Vec<RoiBox> = match model {
            Some(model) => {
                // Patches come from the original frame, matching how the
                // classifier is trained.
                classify_rois(model, &frames[f], &merged, config.classifier.threshold)?
                    .into_iter()
                    .map(|(mut b, p)| {
                        b.score = p;
                        b
                    })
                    .collect()
            }
            None => merged,
        };
        seconds.classification += t.elapsed().as_secs_f64();
        carried = kept
            .iter()
            .map(|&b| RoiBox {
                score: b.score * config.detection.persistence_decay,
                ..b
            })
            .filter(|b| b.score >= PERSISTENCE_FLOOR)
            .collect();
        detections.push(kept);
    }
    Ok((detections, seconds))
}

/// Wrap an (x, y) displacement sum into an angle in [0, 2pi).
fn wrap_angle(sum_x: f64, sum_y: f64) -> Option<f32> {
    if (sum_x * sum_x + sum_y * sum_y).sqrt() < 1e-12 {
        return None;
    }
    let mut a = sum_y.atan2(sum_x);
    if a < 0.0 {
        a += std::f64::consts::TAU;
    }
    Some((a as f32).rem_euclid(std::f32::consts::TAU))
}

/// Measure one record: vessel masks and areas for every observed frame.
fn fill_masks(record: &mut CapillaryRecord, frames: &[Frame]) -> Result<()> {
    let n = frames.len();
    record.masks = (0..n).map(|_| crate::frame::BinaryMask::new(0, 0)).collect();
    record.area_px = vec![0; n];
    record.hematocrit = vec![0.0; n];
    record.mean_magnitude = vec![0.0; n];
    record.angle = vec![None; n];
    for f in 0..n {
        let Some(roi) = record.boxes[f] else { continue };
        let mask = capillary_mask(&frames[f], &roi)?;
        record.area_px[f] = mask.count();
        record.masks[f] = mask;
    }
    Ok(())
}

/// Measure one record's flow: per-frame mean magnitude and angle over the
/// vessel mask, from flow fields estimated on padded crops around the
/// track. Returns the accumulated direction sums.
fn fill_flow(
    record: &mut CapillaryRecord,
    frames: &[Frame],
    config: &PipelineConfig,
) -> Result<(f64, f64)> {
    let n = frames.len();
    let (w, h) = (frames[0].width(), frames[0].height());
    let mut measured = vec![false; n];
    let mut dir_x = 0.0f64;
    let mut dir_y = 0.0f64;
    for f in 0..n.saturating_sub(1) {
        let (Some(a), Some(b)) = (record.boxes[f], record.boxes[f + 1]) else { continue };
        if record.masks[f].width() == 0 {
            continue;
        }
        let crop_box = a.union_box(&b).padded(FLOW_CROP_PAD, w, h);
        let prev = frames[f].crop(crop_box.x, crop_box.y, crop_box.w, crop_box.h)?;
        let next = frames[f + 1].crop(crop_box.x, crop_box.y, crop_box.w, crop_box.h)?;
        let flow = farneback_flow(&prev, &next, &config.flow)?;
        let polar = to_polar(&flow);
        let origin = (a.x - crop_box.x, a.y - crop_box.y);
        let sums = metrics::masked_mean_magnitude(&polar, origin, &record.masks[f])?;
        record.mean_magnitude[f] = sums * config.velocity.scale;
        measured[f] = true;
        // Direction needs the raw vector sums, not just the mean.
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for my in 0..record.masks[f].height() {
            for mx in 0..record.masks[f].width() {
                if !record.masks[f].get(mx, my) {
                    continue;
                }
                let i = (origin.1 + my) * polar.width + (origin.0 + mx);
                let mag = polar.magnitude[i] as f64;
                let ang = polar.angle[i] as f64;
                sx += mag * ang.cos();
                sy += mag * ang.sin();
            }
        }
        record.angle[f] = wrap_angle(sx, sy);
        dir_x += sx;
        dir_y += sy;
    }
    // Observed frames without a measurable pair (track gaps, the final
    // frame) inherit the nearest measured value so time averages are not
    // dragged toward zero by bookkeeping artifacts.
    let mut last: Option<usize> = None;
    for f in 0..n {
        if measured[f] {
            last = Some(f);
        } else if record.boxes[f].is_some() {
            if let Some(src) = last {
                record.mean_magnitude[f] = record.mean_magnitude[src];
            }
        }
    }
    if let Some(first) = (0..n).find(|&f| measured[f]) {
        for f in 0..first {
            if record.boxes[f].is_some() {
                record.mean_magnitude[f] = record.mean_magnitude[first];
            }
        }
    }
    Ok((dir_x, dir_y))
}

/// Run the complete analysis over a frame sequence.
///
/// The classifier model is optional so detection quality can be inspected
/// without one, but production runs should always supply it — unfiltered
/// proposals include illumination artifacts and debris.
pub fn analyze(
    frames: &[Frame],
    config: &PipelineConfig,
    model: Option<&CnnModel>,
) -> Result<Analysis> {
    config.validate()?;
    let (w, h) = check_frames(frames, MIN_ANALYZE_FRAMES)?;
    let (detections, mut seconds) = detect(frames, config, model)?;

    let records =
        associate_tracks(&detections, config.tracking.iou_min, config.tracking.gap_max)?;
    let mut records = coalesce_records(records, config.detection.merge_gap_px);
    records.retain(|r| r.present_indices().len() >= config.tracking.min_frames);
    for (id, record) in records.iter_mut().enumerate() {
        record.id = id;
    }

    let t = Instant::now();
    records
        .par_iter_mut()
        .try_for_each(|record| fill_masks(record, frames))?;
    seconds.masks = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let direction_sums: Vec<(f64, f64)> = records
        .par_iter_mut()
        .map(|record| fill_flow(record, frames, config))
        .collect::<Result<Vec<_>>>()?;
    seconds.flow = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let thresholds = config.velocity.thresholds();
    for (record, &(dx, dy)) in records.iter_mut().zip(&direction_sums) {
        if let Ok(series) = hematocrit_series(record) {
            record.hematocrit = series;
        }
        record.velocity_class = classify_velocity(record, &thresholds).ok();
        record.heterogeneity = heterogeneity(record).ok();
        record.direction = wrap_angle(dx, dy);
    }
    let total_density = metrics::total_capillary_density(&records, w, h)?;
    let functional_density =
        metrics::functional_capillary_density(&records, w, h, thresholds.t1)?;
    seconds.metrics = t.elapsed().as_secs_f64();

    Ok(Analysis {
        width: w,
        height: h,
        frame_count: frames.len(),
        detections,
        records,
        total_density,
        functional_density,
        seconds,
    })
}
