use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array4;

use crate::data::scene::{SceneSpec, VideoSample};
use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Path of frame `index` with the given prefix, e.g. `dir/frame_003.png`.
pub fn frame_path(dir: &Path, prefix: &str, index: usize) -> PathBuf {
    dir.join(format!("{prefix}_{index:03}.png"))
}

/// Writes a `[F, C, H, W]` array (C = 1 or 3) as 8-bit PNGs named `<prefix>_%03d.png`.
pub fn write_pngs(dir: &Path, prefix: &str, data: &Array4<f32>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (f, c, h, w) = data.dim();
    let mut paths = Vec::with_capacity(f);
    for fi in 0..f {
        let path = frame_path(dir, prefix, fi);
        match c {
            3 => {
                let mut img = RgbImage::new(w as u32, h as u32);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    let (x, y) = (x as usize, y as usize);
                    *px = image::Rgb([
                        to_u8(data[[fi, 0, y, x]]),
                        to_u8(data[[fi, 1, y, x]]),
                        to_u8(data[[fi, 2, y, x]]),
                    ]);
                }
                img.save(&path).map_err(|e| image_err(&path, e))?;
            }
            1 => {
                let mut img = GrayImage::new(w as u32, h as u32);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    *px = image::Luma([to_u8(data[[fi, 0, y as usize, x as usize]])]);
                }
                img.save(&path).map_err(|e| image_err(&path, e))?;
            }
            _ => return Err(Error::shape("png channels", "1 or 3", c)),
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Reads a single PNG as a `[C, H, W]` array in `[0, 1]`.
pub fn read_png(path: &Path, channels: usize) -> Result<ndarray::Array3<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ndarray::Array3::<f32>::zeros((channels, h, w));
    match channels {
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = f32::from(px[c]) / 255.0;
                }
            }
        }
        1 => {
            let g = img.to_luma8();
            for (x, y, px) in g.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = f32::from(px[0]) / 255.0;
            }
        }
        _ => return Err(Error::shape("png channels", "1 or 3", channels)),
    }
    Ok(out)
}

/// Reads `<prefix>_000.png, <prefix>_001.png, ...` until the first gap.
pub fn read_pngs(dir: &Path, prefix: &str, channels: usize) -> Result<Array4<f32>> {
    let mut frames = Vec::new();
    while frame_path(dir, prefix, frames.len()).exists() {
        frames.push(read_png(&frame_path(dir, prefix, frames.len()), channels)?);
    }
    if frames.is_empty() {
        return Err(Error::arg(
            "dir",
            format!("no `{prefix}_000.png` in {}", dir.display()),
        ));
    }
    let (c, h, w) = frames[0].dim();
    let mut out = Array4::<f32>::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (c, h, w) {
            return Err(Error::shape(
                format!("{prefix}_{i:03}.png"),
                format!("{h}x{w}"),
                format!("{}x{}", f.dim().1, f.dim().2),
            ));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(f);
    }
    Ok(out)
}

/// Writes a sample in the on-disk scene layout.
pub fn write_sample(dir: &Path, sample: &VideoSample) -> Result<Vec<PathBuf>> {
    let mut paths = write_pngs(dir, "frame", &sample.frames)?;
    paths.extend(write_pngs(dir, "depth", &sample.depth_maps)?);
    paths.extend(write_pngs(dir, "edge", &sample.edge_maps)?);
    paths.extend(write_pngs(dir, "softedge", &sample.soft_edge_maps)?);
    let caption = dir.join("caption.txt");
    fs::write(&caption, &sample.caption).map_err(|e| Error::io(&caption, e))?;
    let spec = dir.join("spec.json");
    fs::write(&spec, serde_json::to_string_pretty(&sample.spec)?).map_err(|e| Error::io(&spec, e))?;
    paths.push(caption);
    paths.push(spec);
    Ok(paths)
}

/// Loads a scene directory written by [`write_sample`]. Arrays come from the
/// 8-bit PNGs, so values are quantized to multiples of 1/255.
pub fn read_sample(dir: &Path) -> Result<VideoSample> {
    let spec_path = dir.join("spec.json");
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SceneSpec = serde_json::from_str(&spec_text)?;
    let caption_path = dir.join("caption.txt");
    let caption = fs::read_to_string(&caption_path).map_err(|e| Error::io(&caption_path, e))?;
    Ok(VideoSample {
        frames: read_pngs(dir, "frame", 3)?,
        depth_maps: read_pngs(dir, "depth", 1)?,
        edge_maps: read_pngs(dir, "edge", 1)?,
        soft_edge_maps: read_pngs(dir, "softedge", 1)?,
        caption: caption.trim().to_string(),
        spec,
    })
}

/// Scene directories `scene_%05d` under `root`, sorted.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}
