//! Images, sequence directories, ground-truth and results files.
//!
//! A sequence directory holds frames `00000001.png`, `00000002.png`, ... and
//! `groundtruth.txt` with one `x,y,w,h` line (pixels, top-left corner) per
//! frame. A results file has one `x,y,w,h,confidence` line per frame.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::Sequence;
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

/// Reads an image as an `(H, W, 3)` tensor with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `(H, W, 3)` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let [h, w, 3] = *img.shape() else {
        return Err(Error::shape("save_image", img.shape(), &[0, 0, 3]));
    };
    let bytes = img.data().iter().map(|&v| to_byte(v)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches shape");
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel `(H, W)` map, mapping `[lo, hi]` to black..white
/// and enlarging each value to a `zoom x zoom` block.
pub fn save_gray(path: impl AsRef<Path>, map: &Tensor, lo: f64, hi: f64, zoom: usize) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(Error::shape("save_gray", map.shape(), &[0, 0]));
    };
    let zoom = zoom.max(1);
    let mut img = RgbImage::new((w * zoom) as u32, (h * zoom) as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = map.data()[(y as usize / zoom) * w + x as usize / zoom];
        let b = to_byte((v - lo) / (hi - lo));
        *px = Rgb([b, b, b]);
    }
    img.save(path)?;
    Ok(())
}

fn parse_line(path: &Path, line: usize, text: &str, fields: usize) -> Result<Vec<f64>> {
    let err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let values = text
        .split([',', '\t', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| err(format!("`{s}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != fields {
        return Err(err(format!("expected {fields} values, found {}", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(err(format!("non-finite value {v}")));
    }
    Ok(values)
}

fn read_rows(path: &Path, fields: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(path, i + 1, l, fields))
        .collect()
}

/// Boxes from `x,y,w,h` lines.
pub fn read_groundtruth(path: impl AsRef<Path>) -> Result<Vec<BoundingBox>> {
    Ok(read_rows(path.as_ref(), 4)?
        .into_iter()
        .map(|v| BoundingBox::from_xywh(v[0], v[1], v[2], v[3]))
        .collect())
}

fn xywh_line(b: &BoundingBox) -> String {
    let [x, y, w, h] = b.xywh();
    format!("{x},{y},{w},{h}")
}

pub fn write_groundtruth(path: impl AsRef<Path>, boxes: &[BoundingBox]) -> Result<()> {
    let text: String = boxes.iter().map(|b| xywh_line(b) + "\n").collect();
    fs::write(path, text)?;
    Ok(())
}

/// Boxes and confidences from `x,y,w,h,confidence` lines.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<(BoundingBox, f64)>> {
    Ok(read_rows(path.as_ref(), 5)?
        .into_iter()
        .map(|v| (BoundingBox::from_xywh(v[0], v[1], v[2], v[3]), v[4]))
        .collect())
}

pub fn write_results(path: impl AsRef<Path>, results: &[(BoundingBox, f64)]) -> Result<()> {
    let text: String = results.iter().map(|(b, c)| format!("{},{c}\n", xywh_line(b))).collect();
    fs::write(path, text)?;
    Ok(())
}

/// Frame file name for 0-based index `i`.
pub fn frame_name(i: usize) -> String {
    format!("{:08}.png", i + 1)
}

/// Writes frames and ground truth into `dir`, creating it if needed.
pub fn write_sequence(dir: impl AsRef<Path>, seq: &Sequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        save_image(dir.join(frame_name(i)), frame)?;
    }
    write_groundtruth(dir.join(GROUNDTRUTH), &seq.gt)
}

/// Reads a sequence directory. Frames are the `.png` files in lexical order;
/// the sequence is named after the directory.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    let frames = files.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    let gt = read_groundtruth(dir.join(GROUNDTRUTH))?;
    let name = dir
        .file_name()
        .map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned());
    Sequence::new(name, frames, gt)
}
