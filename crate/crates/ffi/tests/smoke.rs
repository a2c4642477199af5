//! Exercises the C ABI end to end from Rust: handle lifecycle, both
//! analyze entry points, accessors, and the error paths.

use std::ffi::{CStr, CString};
use std::ptr;

use capflow::frameio;
use capflow::synth::{self, FlowDir, SceneSpec, TubeSpec};
use capflow_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(capflow_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn test_scene() -> SceneSpec {
    SceneSpec {
        width: 160,
        height: 120,
        frames: 24,
        tubes: vec![TubeSpec {
            path: vec![(15.0, 30.0), (140.0, 85.0)],
            width: 10.0,
            speed: 1.0,
            direction: FlowDir::Forward,
            gap_fraction: 0.3,
            gap_wave: None,
            speed_wave: None,
            seed: 4,
        }],
        noise_sigma: 0.01,
        seed: 21,
        ..SceneSpec::default()
    }
}

/// Packs planar [0,1] frames into the interleaved RGB8 buffer the ABI
/// expects.
fn interleave(frames: &[capflow::Frame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        for y in 0..f.height() {
            for x in 0..f.width() {
                for c in 0..3 {
                    out.push((f.get(c, x, y) * 255.0).round() as u8);
                }
            }
        }
    }
    out
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(capflow_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn analyzes_a_raw_rgb8_buffer() {
    let (frames, _) = synth::render_video(&test_scene()).unwrap();
    let pixels = interleave(&frames);

    unsafe {
        let analyzer = capflow_analyzer_new(ptr::null());
        assert!(!analyzer.is_null(), "{}", last_error());

        let analysis = capflow_analyze_rgb8(analyzer, pixels.as_ptr(), 160, 120, frames.len());
        assert!(!analysis.is_null(), "{}", last_error());
        assert_eq!(capflow_analysis_frame_count(analysis), frames.len());
        assert!(capflow_analysis_capillary_count(analysis) >= 1, "vessel went undetected");
        let total = capflow_analysis_total_density(analysis);
        let functional = capflow_analysis_functional_density(analysis);
        assert!(total > 0.0 && total <= 1.0);
        assert!(functional <= total + 1e-6);

        let id = CString::new("smoke").unwrap();
        let json = capflow_analysis_report_json(analysis, id.as_ptr(), 30.0);
        assert!(!json.is_null(), "{}", last_error());
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["video"]["id"], "smoke");
        assert_eq!(
            parsed["capillaries"].as_array().unwrap().len(),
            capflow_analysis_capillary_count(analysis)
        );
        capflow_string_free(json);

        capflow_analysis_free(analysis);
        capflow_analyzer_free(analyzer);
    }
}

#[test]
fn analyzes_frames_from_a_directory() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scene = SceneSpec { tubes: Vec::new(), frames: 8, ..test_scene() };
    let (frames, _) = synth::render_video(&scene).unwrap();
    frameio::save_frames(&frames, tmp.path(), "png").unwrap();
    let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();

    unsafe {
        let analyzer = capflow_analyzer_new(ptr::null());
        let analysis = capflow_analyze_dir(analyzer, dir.as_ptr());
        assert!(!analysis.is_null(), "{}", last_error());
        assert_eq!(capflow_analysis_frame_count(analysis), 8);
        assert_eq!(capflow_analysis_capillary_count(analysis), 0);
        assert_eq!(capflow_analysis_total_density(analysis), 0.0);
        capflow_analysis_free(analysis);
        capflow_analyzer_free(analyzer);
    }
}

#[test]
fn reports_errors_through_status_and_message() {
    unsafe {
        // Null and missing-file arguments.
        assert!(capflow_analyzer_new(CString::new("ghost.toml").unwrap().as_ptr()).is_null());
        assert!(last_error().contains("ghost.toml"));

        let analyzer = capflow_analyzer_new(ptr::null());
        assert_eq!(
            capflow_analyzer_set_model(analyzer, ptr::null()),
            CapflowStatus::NullArgument
        );
        let missing = CString::new("missing.bin").unwrap();
        assert_eq!(
            capflow_analyzer_set_model(analyzer, missing.as_ptr()),
            CapflowStatus::Io
        );
        assert!(last_error().contains("missing.bin"));

        // Analysis on bad input comes back null with a reason.
        let nowhere = CString::new("does/not/exist").unwrap();
        assert!(capflow_analyze_dir(analyzer, nowhere.as_ptr()).is_null());
        assert!(last_error().contains("does/not/exist"));

        assert!(capflow_analyze_rgb8(analyzer, ptr::null(), 8, 8, 3).is_null());
        assert_eq!(last_error(), "pixels is null");

        let buf = [0u8; 8 * 8 * 3];
        assert!(capflow_analyze_rgb8(analyzer, buf.as_ptr(), 8, 8, 0).is_null());
        assert!(last_error().contains("bad buffer shape"));

        // Accessors shrug off null handles; frees ignore null.
        assert_eq!(capflow_analysis_capillary_count(ptr::null()), 0);
        assert_eq!(capflow_analysis_total_density(ptr::null()), 0.0);
        assert!(capflow_analysis_report_json(ptr::null(), ptr::null(), 30.0).is_null());
        capflow_analysis_free(ptr::null_mut());
        capflow_analyzer_free(ptr::null_mut());
        capflow_string_free(ptr::null_mut());

        capflow_analyzer_free(analyzer);
    }
}
