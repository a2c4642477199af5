//! Pipeline configuration, loaded from TOML.
//!
//! Every tunable the pipeline exposes lives here; `config/default.toml` in
//! the repository root ships the same values as the `Default` impls. Unknown
//! keys are rejected so typos fail loudly instead of silently reverting a
//! setting to its default.

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::metrics::{VelocityThresholds, DEFAULT_TRACK_GAP, DEFAULT_TRACK_IOU, DEFAULT_VELOCITY_SCALE};
use crate::roi::AreaBounds;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Properties of the recording that still-image frames cannot carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    /// Frames per second of the source recording.
    pub fps: f32,
    /// Optical calibration in micrometers per pixel; 0 means unknown, which
    /// falls back to absolute pixel-area bounds for candidate regions.
    pub pixel_pitch_um: f32,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self { fps: 30.0, pixel_pitch_um: 0.0 }
    }
}

/// Which denoiser runs before detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denoise {
    /// No denoising.
    None,
    /// 3x3-ish median filter; cheap and enough for sensor speckle.
    Median,
    /// Non-local means; much slower, only worth it on very noisy sources.
    NonLocalMeans,
}

/// Frame conditioning applied before the detection stages. Measurement
/// stages (vessel masks, flow) always read the original frames so color
/// ratios and displacements stay physical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub denoise: Denoise,
    /// Kernel for the median denoiser (odd).
    pub median_kernel: usize,
    /// Filter strength for non-local means.
    pub nlm_strength: f32,
    /// Patch size for non-local means (odd).
    pub nlm_patch: usize,
    /// Search window for non-local means (odd).
    pub nlm_search: usize,
    /// Histogram tail fraction trimmed by the contrast stretch; 0 disables.
    pub contrast_cutoff: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            denoise: Denoise::Median,
            median_kernel: 3,
            nlm_strength: 0.08,
            nlm_patch: 5,
            nlm_search: 11,
            contrast_cutoff: 0.0,
        }
    }
}

/// Candidate-region proposal and fusion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Pixels whose background similarity falls below this propose regions.
    pub ssim_threshold: f32,
    /// Per-pixel noise floor for the five-frame motion accumulator.
    pub motion_noise_floor: f32,
    /// Overlap at which proposals from the two pipelines fuse.
    pub merge_iou: f32,
    /// Edge distance under which nearby proposals fuse into one region;
    /// bridges the quiet plasma gaps that split one vessel into fragments.
    /// 0 keeps fragments separate.
    pub merge_gap_px: usize,
    /// Accepted set-pixel count of a proposed region (not its bounding-box
    /// area); used when the optical pitch is unknown, otherwise derived
    /// from it.
    pub min_area_px: usize,
    pub max_area_px: usize,
    /// Per-frame score decay of detection boxes carried into the next
    /// frame, bridging frames where a vessel's evidence flickers out.
    /// 0 disables carry-over.
    pub persistence_decay: f32,
    /// Maximum Gaussian components per background-model pixel.
    pub background_components: usize,
    /// Background-model blend factor per frame.
    pub background_learning_rate: f32,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let area = AreaBounds::default();
        Self {
            ssim_threshold: 0.65,
            motion_noise_floor: 0.02,
            merge_iou: 0.3,
            merge_gap_px: 16,
            min_area_px: area.min_px,
            max_area_px: area.max_px,
            persistence_decay: 0.8,
            background_components: 5,
            background_learning_rate: 0.01,
        }
    }
}

/// Patch-classifier settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Minimum vessel probability for a candidate box to survive.
    pub threshold: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

/// Velocity measurement and classification settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityConfig {
    /// Calibration multiplier on raw flow magnitudes; compensates the
    /// estimator's smoothing attenuation (see metrics module docs).
    pub scale: f32,
    /// Class cut points in px/frame, lower bounds inclusive.
    pub t1: f32,
    pub t2: f32,
    pub t3: f32,
    /// Optional fast/very-fast split.
    pub t4: Option<f32>,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        let t = VelocityThresholds::default();
        Self { scale: DEFAULT_VELOCITY_SCALE, t1: t.t1, t2: t.t2, t3: t.t3, t4: t.t4 }
    }
}

impl VelocityConfig {
    pub fn thresholds(&self) -> VelocityThresholds {
        VelocityThresholds { t1: self.t1, t2: self.t2, t3: self.t3, t4: self.t4 }
    }
}

/// Track-association settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Minimum IoU linking a detection to an existing track.
    pub iou_min: f32,
    /// Consecutive missed frames a track survives.
    pub gap_max: usize,
    /// Tracks observed in fewer frames than this are dropped as transient
    /// noise.
    pub min_frames: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            iou_min: DEFAULT_TRACK_IOU,
            gap_max: DEFAULT_TRACK_GAP,
            min_frames: 5,
        }
    }
}

/// Every tunable of the analysis pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub video: VideoConfig,
    pub preprocess: PreprocessConfig,
    pub detection: DetectionConfig,
    pub classifier: ClassifierConfig,
    pub flow: FlowParams,
    pub velocity: VelocityConfig,
    pub tracking: TrackingConfig,
}

impl PipelineConfig {
    /// Parse and validate a TOML config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    /// Parse and validate TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize back to TOML (used to ship the default example).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.video.fps > 0.0) {
            return Err(Error::parameter(format!("fps must be positive, got {}", self.video.fps)));
        }
        if self.video.pixel_pitch_um < 0.0 {
            return Err(Error::parameter("pixel_pitch_um cannot be negative"));
        }
        if self.preprocess.median_kernel % 2 == 0
            || self.preprocess.nlm_patch % 2 == 0
            || self.preprocess.nlm_search % 2 == 0
        {
            return Err(Error::parameter("preprocess kernel sizes must be odd"));
        }
        if !(0.0..=0.49).contains(&self.preprocess.contrast_cutoff) {
            return Err(Error::parameter("contrast_cutoff must lie in [0, 0.49]"));
        }
        if !(-1.0..=1.0).contains(&self.detection.ssim_threshold) {
            return Err(Error::parameter("ssim_threshold must lie in [-1, 1]"));
        }
        if self.detection.motion_noise_floor < 0.0 {
            return Err(Error::parameter("motion_noise_floor cannot be negative"));
        }
        if !(0.0..=1.0).contains(&self.detection.merge_iou) {
            return Err(Error::parameter("merge_iou must lie in [0, 1]"));
        }
        if self.detection.min_area_px == 0 || self.detection.max_area_px < self.detection.min_area_px
        {
            return Err(Error::parameter("area bounds must satisfy 0 < min <= max"));
        }
        if !(0.0..1.0).contains(&self.detection.persistence_decay) {
            return Err(Error::parameter("persistence_decay must lie in [0, 1)"));
        }
        if self.detection.background_components == 0 {
            return Err(Error::parameter("background model needs at least one component"));
        }
        if !(0.0..1.0).contains(&self.detection.background_learning_rate)
            || self.detection.background_learning_rate <= 0.0
        {
            return Err(Error::parameter("background_learning_rate must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.classifier.threshold) {
            return Err(Error::parameter("classifier threshold must lie in [0, 1]"));
        }
        self.flow.validate()?;
        if self.velocity.scale <= 0.0 {
            return Err(Error::parameter("velocity scale must be positive"));
        }
        self.velocity.thresholds().validate()?;
        if !(0.0..=1.0).contains(&self.tracking.iou_min) {
            return Err(Error::parameter("tracking iou_min must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Candidate-area bounds: calibrated from the optical pitch when known,
    /// the configured pixel range otherwise.
    pub fn area_bounds(&self) -> AreaBounds {
        if self.video.pixel_pitch_um > 0.0 {
            AreaBounds::from_pitch(self.video.pixel_pitch_um)
        } else {
            AreaBounds { min_px: self.detection.min_area_px, max_px: self.detection.max_area_px }
        }
    }
}
