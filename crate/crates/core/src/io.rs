//! Frame and mask directories: one zero-padded PNG per frame
//! (`000.png`, `001.png`, ...), read back in lexicographic order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::autoencoder::FrameVideo;
use crate::error::invalid;
use crate::semantic::ForegroundMask;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files of `dir` sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no image files in {}", dir.display())));
    }
    Ok(files)
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:03}.png")
}

/// Loads an RGB frame directory into `[0, 1]` floats.
pub fn load_frames(dir: &Path) -> Result<FrameVideo> {
    let files = list_images(dir)?;
    let mut size = None;
    let mut data = Vec::new();
    for path in &files {
        let img = image::open(path)?.to_rgb8();
        let dims = img.dimensions();
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(invalid(format!(
                    "{} is {}x{}, earlier frames are {}x{}",
                    path.display(),
                    dims.0,
                    dims.1,
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        data.extend(img.as_raw().iter().map(|&b| f32::from(b) / 255.0));
    }
    let (w, h) = size.expect("at least one frame");
    FrameVideo::new(files.len(), h as usize, w as usize, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `000.png`, `001.png`, ... into `dir`, creating it if needed.
/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn save_frames(video: &FrameVideo, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (h, w) = (video.height() as u32, video.width() as u32);
    let mut written = Vec::with_capacity(video.frame_count());
    for i in 0..video.frame_count() {
        let bytes = video.frame(i).data.iter().map(|&v| quantize(v)).collect();
        let img = RgbImage::from_raw(w, h, bytes).ok_or_else(|| invalid("frame buffer size"))?;
        let path = dir.join(frame_file_name(i));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Single-channel masks, 0 for background and 255 for foreground.
pub fn save_masks(mask: &ForegroundMask, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (n, h, w) = (mask.frame_count(), mask.height(), mask.width());
    let mut written = Vec::with_capacity(n);
    for f in 0..n {
        let mut img = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([if mask.get(f, y, x) { 255 } else { 0 }]));
            }
        }
        let path = dir.join(frame_file_name(f));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a mask directory; any pixel at or above 128 is foreground.
pub fn load_masks(dir: &Path) -> Result<ForegroundMask> {
    let files = list_images(dir)?;
    let mut size = None;
    let mut data = Vec::new();
    for path in &files {
        let img = image::open(path)?.to_luma8();
        if *size.get_or_insert(img.dimensions()) != img.dimensions() {
            return Err(invalid(format!("{} has a different size", path.display())));
        }
        data.extend(img.as_raw().iter().map(|&b| u8::from(b >= 128)));
    }
    let (w, h) = size.expect("at least one mask");
    ForegroundMask::new(files.len(), h as usize, w as usize, data)
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}
