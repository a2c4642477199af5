//! Command-line front end: analyze frame sequences, train the patch
//! classifier, generate synthetic footage, and benchmark throughput.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use capflow::classifier::{self, Class, CnnModel, Patch, TrainConfig};
use capflow::config::PipelineConfig;
use capflow::frameio;
use capflow::metrics::CapillaryRecord;
use capflow::pipeline;
use capflow::report::capillary_csv;
use capflow::roi::{RoiBox, RoiSource};
use capflow::synth::{self, FlowDir, GapWave, GroundTruth, SceneSpec, TubeSpec};
use capflow::{BinaryMask, Frame};

const BOX_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
const MASK_TINT: [f32; 3] = [0.15, 0.55, 1.0];
const MASK_ALPHA: f32 = 0.45;

#[derive(Parser)]
#[command(
    name = "capflow",
    version,
    about = "Microvascular video analysis: detect capillaries, measure flow, summarize perfusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override for commands with random components (train, synth).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a directory of frames; write a report, per-capillary CSV
    /// series, and annotated overlay frames.
    Analyze {
        /// Directory of frame_NNNNNN.png / .ppm frames.
        input: PathBuf,
        /// Pipeline configuration (TOML). Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained classifier weights. Without a model every merged
        /// proposal is kept unfiltered.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory, created if needed.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the capillary/background patch classifier.
    Train {
        /// Labeled dataset: subdirectories capillary/ and background/
        /// holding image patches.
        dataset: Option<PathBuf>,
        /// Train on N generated synthetic patches instead of a dataset.
        #[arg(long, conflicts_with = "dataset")]
        synthetic: Option<usize>,
        /// Training configuration (TOML). Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for model.bin and history.csv.
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Render a synthetic capillary video with ground truth.
    Synth {
        /// Scene description (TOML). A three-vessel demo scene is rendered
        /// when omitted.
        spec: Option<PathBuf>,
        /// Output directory for frames, scene.toml, and truth.json.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Measure per-stage throughput on a directory of frames.
    Bench {
        /// Directory of frame_NNNNNN.png / .ppm frames.
        input: PathBuf,
        /// Pipeline configuration (TOML). Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained classifier weights to include in the timing.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the worker thread pool")?;
    }
    match cli.command {
        Command::Analyze {
            input,
            config,
            model,
            out,
        } => cmd_analyze(&input, config.as_deref(), model.as_deref(), &out),
        Command::Train {
            dataset,
            synthetic,
            config,
            out,
        } => cmd_train(dataset.as_deref(), synthetic, config.as_deref(), &out, cli.seed),
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out, cli.seed),
        Command::Bench {
            input,
            config,
            model,
        } => cmd_bench(&input, config.as_deref(), model.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<CnnModel<f32>> {
    classifier::load_model_file(path).with_context(|| format!("loading model {}", path.display()))
}

// --- analyze ---------------------------------------------------------------

fn cmd_analyze(
    input: &Path,
    config: Option<&Path>,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = model.map(load_model).transpose()?;
    let frames = frameio::load_frames(input)
        .with_context(|| format!("loading frames from {}", input.display()))?;
    let analysis = pipeline::analyze(&frames, &cfg, model.as_ref())?;

    let video_id = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".to_string());
    let report = analysis.report(&video_id, cfg.video.fps);
    report
        .validate()
        .context("report failed schema validation")?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    frameio::write_atomic(out.join("report.json"), report.to_json().as_bytes())?;
    for record in &analysis.records {
        let path = out.join(format!("capillary_{:03}.csv", record.id));
        frameio::write_atomic(path, capillary_csv(record).as_bytes())?;
    }
    write_overlays(&frames, &analysis.records, &out.join("overlays"))?;

    println!(
        "{}: {} frames, {} capillaries, density {:.4} total / {:.4} functional",
        video_id,
        frames.len(),
        analysis.records.len(),
        analysis.total_density,
        analysis.functional_density
    );
    println!("report -> {}", out.join("report.json").display());
    Ok(())
}

/// Input frames with every tracked capillary drawn in: mask pixels tinted,
/// bounding boxes outlined in green.
fn write_overlays(frames: &[Frame], records: &[CapillaryRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    (0..frames.len())
        .into_par_iter()
        .try_for_each(|f| -> Result<()> {
            let mut canvas = frames[f].clone();
            for record in records {
                let Some(roi) = record.boxes.get(f).copied().flatten() else {
                    continue;
                };
                if let Some(mask) = record.masks.get(f) {
                    frameio::tint_mask(&mut canvas, mask, (roi.x, roi.y), MASK_TINT, MASK_ALPHA);
                }
                frameio::draw_box_outline(&mut canvas, &roi, BOX_COLOR);
            }
            let path = dir.join(frameio::frame_file_name(f, "png"));
            frameio::save_frame(&canvas, path)?;
            Ok(())
        })
}

// --- train -------------------------------------------------------------------

fn cmd_train(
    dataset: Option<&Path>,
    synthetic: Option<usize>,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut train_cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("loading training config {}", p.display()))?;
            toml::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing training config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        train_cfg.seed = s;
    }

    let patches = match (dataset, synthetic) {
        (Some(dir), None) => load_patch_dataset(dir)?,
        (None, Some(n)) => synth::make_patch_dataset(n, train_cfg.seed)
            .context("generating synthetic training patches")?,
        (None, None) => bail!("provide a dataset directory or --synthetic N"),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    println!("training on {} labeled patches", patches.len());

    let model = classifier::init_model(train_cfg.seed);
    let result = classifier::train(model, &patches, &train_cfg)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    frameio::write_atomic(out.join("model.bin"), &classifier::save_model(&result.model))?;
    let mut history = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in &result.history {
        history.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    frameio::write_atomic(out.join("history.csv"), history.as_bytes())?;

    let best_acc = result
        .history
        .iter()
        .find(|e| e.epoch == result.best_epoch)
        .map_or(0.0, |e| e.val_acc);
    println!(
        "{} epochs; best epoch {} with val acc {:.3}; model -> {}",
        result.history.len(),
        result.best_epoch,
        best_acc,
        out.join("model.bin").display()
    );
    Ok(())
}

/// Reads `capillary/` and `background/` subdirectories of images, resampling
/// each image to classifier resolution.
fn load_patch_dataset(dir: &Path) -> Result<Vec<Patch>> {
    let mut patches = Vec::new();
    for (class, sub) in [(Class::Capillary, "capillary"), (Class::Background, "background")] {
        let sub_dir = dir.join(sub);
        if !sub_dir.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&sub_dir)
            .with_context(|| format!("reading {}", sub_dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            let frame = frameio::load_frame(&path)
                .with_context(|| format!("loading patch image {}", path.display()))?;
            let whole = RoiBox {
                x: 0,
                y: 0,
                w: frame.width(),
                h: frame.height(),
                source: RoiSource::Salience,
                score: 1.0,
            };
            let mut patch = Patch::from_region(&frame, &whole)?;
            patch.label = Some(class);
            patches.push(patch);
        }
    }
    if patches.is_empty() {
        bail!(
            "no patch images found under {}/capillary or {}/background",
            dir.display(),
            dir.display()
        );
    }
    Ok(patches)
}

// --- synth -------------------------------------------------------------------

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut scene = match spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("loading scene spec {}", p.display()))?;
            toml::from_str::<SceneSpec>(&text)
                .with_context(|| format!("parsing scene spec {}", p.display()))?
        }
        None => demo_scene(),
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    let (frames, truth) = synth::render_video(&scene)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    frameio::save_frames(&frames, out, "png")?;
    let scene_toml = toml::to_string_pretty(&scene).context("serializing scene spec")?;
    frameio::write_atomic(out.join("scene.toml"), scene_toml.as_bytes())?;
    let truth_file = TruthFile::build(&scene, &truth);
    let truth_json = serde_json::to_string_pretty(&truth_file)? + "\n";
    frameio::write_atomic(out.join("truth.json"), truth_json.as_bytes())?;

    println!(
        "wrote {} frames ({}x{}), scene.toml, truth.json -> {}",
        frames.len(),
        scene.width,
        scene.height,
        out.display()
    );
    Ok(())
}

/// Serialized ground truth: per-vessel kinematics plus the pixel areas the
/// density metrics are checked against. Masks are summarized as union areas
/// rather than stored per pixel; the scene spec re-renders them exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f32,
    /// Pixels covered by any vessel in any frame.
    pub union_area_px: usize,
    pub tubes: Vec<TruthTube>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthTube {
    pub speed_px_per_frame: f32,
    pub direction_radians: f32,
    pub lumen_area_px: usize,
    /// Pixels this vessel's cells cover in any frame.
    pub union_area_px: usize,
    pub mean_fill_fraction: f32,
    pub fill_fraction: Vec<f32>,
    /// Per-frame cell bounding boxes as [x, y, w, h].
    pub boxes: Vec<[usize; 4]>,
}

impl TruthFile {
    fn build(scene: &SceneSpec, truth: &GroundTruth) -> TruthFile {
        let mut overall = BinaryMask::new(truth.width, truth.height);
        let tubes = truth
            .tubes
            .iter()
            .map(|t| {
                let mut union = BinaryMask::new(truth.width, truth.height);
                for mask in &t.masks {
                    union.union_with(mask).expect("truth masks are frame-sized");
                }
                overall
                    .union_with(&union)
                    .expect("truth masks are frame-sized");
                let n = t.fill_fraction.len().max(1) as f32;
                TruthTube {
                    speed_px_per_frame: t.speed,
                    direction_radians: t.direction,
                    lumen_area_px: t.lumen_area,
                    union_area_px: union.count(),
                    mean_fill_fraction: t.fill_fraction.iter().sum::<f32>() / n,
                    fill_fraction: t.fill_fraction.clone(),
                    boxes: t.boxes.iter().map(|&(x, y, w, h)| [x, y, w, h]).collect(),
                }
            })
            .collect();
        TruthFile {
            width: truth.width,
            height: truth.height,
            frames: scene.frames,
            fps: scene.fps,
            union_area_px: overall.count(),
            tubes,
        }
    }
}

/// Three well-separated vessels at distinct speeds: a quick start for
/// `analyze` without real footage.
fn demo_scene() -> SceneSpec {
    SceneSpec {
        width: 320,
        height: 240,
        fps: 30.0,
        frames: 60,
        tubes: vec![
            TubeSpec {
                path: vec![(30.0, 40.0), (150.0, 55.0)],
                width: 10.0,
                speed: 1.0,
                direction: FlowDir::Forward,
                gap_fraction: 0.3,
                gap_wave: None,
                speed_wave: None,
                seed: 11,
            },
            TubeSpec {
                path: vec![(250.0, 30.0), (235.0, 210.0)],
                width: 8.0,
                speed: 0.5,
                direction: FlowDir::Backward,
                gap_fraction: 0.25,
                gap_wave: Some(GapWave {
                    amplitude: 0.15,
                    period_frames: 40.0,
                }),
                speed_wave: None,
                seed: 22,
            },
            TubeSpec {
                path: vec![(40.0, 120.0), (160.0, 215.0)],
                width: 12.0,
                speed: 1.6,
                direction: FlowDir::Forward,
                gap_fraction: 0.35,
                gap_wave: None,
                speed_wave: None,
                seed: 33,
            },
        ],
        ..SceneSpec::default()
    }
}

// --- bench -------------------------------------------------------------------

fn cmd_bench(input: &Path, config: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = model.map(load_model).transpose()?;
    let frames = frameio::load_frames(input)
        .with_context(|| format!("loading frames from {}", input.display()))?;
    let analysis = pipeline::analyze(&frames, &cfg, model.as_ref())?;

    let n = frames.len() as f64;
    let s = &analysis.seconds;
    println!(
        "{} frames at {}x{}, {} capillaries",
        frames.len(),
        analysis.width,
        analysis.height,
        analysis.records.len()
    );
    let detection = s.preprocess + s.proposals + s.classification;
    for (name, secs) in [
        ("preprocess", s.preprocess),
        ("proposals", s.proposals),
        ("classification", s.classification),
        ("detection", detection),
        ("masks", s.masks),
        ("flow", s.flow),
        ("metrics", s.metrics),
        ("total", s.total()),
    ] {
        println!("{name:>16} {:>10.2} fps", n / secs);
    }
    Ok(())
}
