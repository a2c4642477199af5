//! Reading and writing frame sequences.
//!
//! Videos are directories of still images named `frame_000000.png` (or
//! `.ppm`), ordered lexicographically. Writes go through a temporary file
//! in the same directory followed by a rename, so readers never observe a
//! half-written frame.

use crate::error::{Error, Result};
use crate::frame::{BinaryMask, Frame};
use crate::roi::RoiBox;
use image::{DynamicImage, ImageFormat, RgbImage};
use std::io::Cursor;
use std::path::{Path, PathBuf};

/// Canonical file name of frame `index` with the given extension.
pub fn frame_file_name(index: usize, extension: &str) -> String {
    format!("frame_{index:06}.{extension}")
}

/// Load a single PNG or PPM image as a normalized RGB frame.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; w * h * 3];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = px.0[c] as f32 / 255.0;
        }
    }
    Frame::new(w, h, 3, data)
}

/// Image files in `dir` that look like frames, in lexicographic order.
fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Load every frame in a directory. All frames must share dimensions.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let dir = dir.as_ref();
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::state(format!("no frame images found in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let frame = load_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if frame.width() != first.width() || frame.height() != first.height() {
                return Err(Error::format(format!(
                    "{}: frame is {}x{} but the sequence started at {}x{}",
                    path.display(),
                    frame.width(),
                    frame.height(),
                    first.width(),
                    first.height()
                )));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

fn to_rgb8(frame: &Frame) -> RgbImage {
    let (w, h) = (frame.width(), frame.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if frame.channels() == 1 {
                let v = quantize(frame.get(0, x, y));
                [v, v, v]
            } else {
                [
                    quantize(frame.get(0, x, y)),
                    quantize(frame.get(1, x, y)),
                    quantize(frame.get(2, x, y)),
                ]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write arbitrary bytes atomically: temp file in the target directory,
/// then rename over the destination.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::parameter(format!("{}: not a file path", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = dir.join(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Save one frame as PNG (`.png`) or binary PPM (`.ppm`), chosen by the
/// destination extension.
pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ref e) if e == "png" => ImageFormat::Png,
        Some(ref e) if e == "ppm" || e == "pnm" => ImageFormat::Pnm,
        other => {
            return Err(Error::parameter(format!(
                "unsupported frame extension {other:?}; use png or ppm"
            )))
        }
    };
    let img = DynamicImage::ImageRgb8(to_rgb8(frame));
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, format)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    write_atomic(path, buf.get_ref())
}

/// Save a sequence under `dir` using canonical frame names.
pub fn save_frames(frames: &[Frame], dir: impl AsRef<Path>, extension: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, frame) in frames.iter().enumerate() {
        save_frame(frame, dir.join(frame_file_name(i, extension)))?;
    }
    Ok(())
}

/// Draw a one-pixel rectangle outline. Boxes partially outside the frame
/// are clipped rather than rejected.
pub fn draw_box_outline(frame: &mut Frame, roi: &RoiBox, color: [f32; 3]) {
    let (w, h) = (frame.width(), frame.height());
    if frame.channels() != 3 || roi.w == 0 || roi.h == 0 {
        return;
    }
    let x1 = (roi.x + roi.w - 1).min(w.saturating_sub(1));
    let y1 = (roi.y + roi.h - 1).min(h.saturating_sub(1));
    if roi.x >= w || roi.y >= h {
        return;
    }
    for c in 0..3 {
        let plane = frame.plane_mut(c);
        for x in roi.x..=x1 {
            plane[roi.y * w + x] = color[c];
            plane[y1 * w + x] = color[c];
        }
        for y in roi.y..=y1 {
            plane[y * w + roi.x] = color[c];
            plane[y * w + x1] = color[c];
        }
    }
}

/// Alpha-blend a color into the frame wherever the mask (placed at
/// `origin`) is set. Out-of-frame mask pixels are ignored.
pub fn tint_mask(
    frame: &mut Frame,
    mask: &BinaryMask,
    origin: (usize, usize),
    color: [f32; 3],
    alpha: f32,
) {
    let (w, h) = (frame.width(), frame.height());
    if frame.channels() != 3 {
        return;
    }
    let alpha = alpha.clamp(0.0, 1.0);
    for my in 0..mask.height() {
        for mx in 0..mask.width() {
            let (x, y) = (origin.0 + mx, origin.1 + my);
            if x >= w || y >= h || !mask.get(mx, my) {
                continue;
            }
            for c in 0..3 {
                let plane = frame.plane_mut(c);
                let i = y * w + x;
                plane[i] = (1.0 - alpha) * plane[i] + alpha * color[c];
            }
        }
    }
}
