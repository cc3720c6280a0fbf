//! PNG frames and frame directories.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::{FrameSequence, Image};

/// Load an image as 3-channel `[0, 1]` floats. Non-RGB inputs are converted.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_vec(h as usize, w as usize, 3, data)
}

/// Write a 3-channel image as 8-bit RGB, clipping to `[0, 1]` and rounding.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Dimension(format!(
            "PNG output expects 3 channels, got {}",
            image.channels()
        )));
    }
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(image.width() as u32, image.height() as u32, raw)
            .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// All `.png` files in a directory, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Sub-directories of `dir`, sorted by name.
pub fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn read_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", dir.display())));
    }
    paths.iter().map(|p| read_png(p)).collect()
}

pub fn read_frame_dir(dir: &Path) -> Result<FrameSequence> {
    FrameSequence::new(read_image_dir(dir)?)
}

/// Write frames as `00000.png`, `00001.png`, ... creating `dir` if needed.
pub fn write_frame_dir(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        write_png(&dir.join(format!("{i:05}.png")), frame)?;
    }
    Ok(())
}
