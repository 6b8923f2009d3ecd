//! Square crops around a box, with the mapping back to frame coordinates.

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map between crop pixels and frame pixels:
/// `frame = origin + crop * scale`, per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    /// Frame coordinates of the crop's top-left corner.
    pub x0: f64,
    pub y0: f64,
    /// Crop side in frame pixels.
    pub side: f64,
    /// Crop side in output pixels.
    pub out_size: usize,
}

impl CropTransform {
    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        (self.x0 + x * s, self.y0 + y * s)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x - self.x0) / s, (y - self.y0) / s)
    }

    /// Box normalized to the crop (`[0, 1]` spans the crop) into frame pixels.
    pub fn normalized_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Frame-pixel box into crop-normalized coordinates.
    pub fn frame_to_normalized(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }
}

/// Per-channel mean of an `(H, W, 3)` image.
pub fn channel_mean(frame: &Tensor) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for px in frame.data().chunks_exact(3) {
        for c in 0..3 {
            sum[c] += px[c];
        }
    }
    let n = (frame.len() / 3).max(1) as f64;
    sum.map(|s| s / n)
}

fn check_frame(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [h, w, 3] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape("frame", frame.shape(), &[0, 0, 3])),
    }
}

/// Crop geometry without sampling: a square of side `factor * sqrt(w * h)`
/// centered on `b`.
pub fn crop_transform(b: &BoundingBox, factor: f64, out_size: usize) -> Result<CropTransform> {
    if !(factor > 0.0) || out_size == 0 {
        return Err(Error::invalid(
            "crop_region",
            format!("factor {factor}, out size {out_size}"),
        ));
    }
    if !b.is_valid() {
        return Err(Error::invalid("crop_region", format!("box {b:?} has zero area")));
    }
    let side = factor * (b.w * b.h).sqrt();
    Ok(CropTransform {
        x0: b.cx - 0.5 * side,
        y0: b.cy - 0.5 * side,
        side,
        out_size,
    })
}

/// Samples the square crop around `b` (frame pixels) into an
/// `(out_size, out_size, 3)` image.
///
/// Each output pixel takes the bilinear value at its center's frame position;
/// positions outside the frame get the frame's per-channel mean.
pub fn crop_region(frame: &Tensor, b: &BoundingBox, factor: f64, out_size: usize) -> Result<(Tensor, CropTransform)> {
    let (h, w) = check_frame(frame)?;
    let tf = crop_transform(b, factor, out_size)?;
    let mean = channel_mean(frame);
    let src = frame.data();
    let at = |y: usize, x: usize, c: usize| src[(y * w + x) * 3 + c];
    let mut out = Vec::with_capacity(out_size * out_size * 3);
    for v in 0..out_size {
        for u in 0..out_size {
            let (fx, fy) = tf.to_frame(u as f64 + 0.5, v as f64 + 0.5);
            if !(0.0..w as f64).contains(&fx) || !(0.0..h as f64).contains(&fy) {
                out.extend_from_slice(&mean);
                continue;
            }
            // Pixel centers sit at integer + 0.5.
            let sx = (fx - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (fy - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let top = at(y0, x0, c) * (1.0 - ax) + at(y0, x1, c) * ax;
                let bottom = at(y1, x0, c) * (1.0 - ax) + at(y1, x1, c) * ax;
                out.push(top * (1.0 - ay) + bottom * ay);
            }
        }
    }
    Ok((Tensor::new(vec![out_size, out_size, 3], out)?, tf))
}
