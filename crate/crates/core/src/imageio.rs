//! PNG and raw-float image files for `[3,H,W]` tensors in `[0,1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{contract, Error, Result};
use crate::gradcore::Tensor;

fn dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(contract(format!("expected a [3,H,W] image, got {s:?}"))),
    }
}

/// 8-bit quantisation used for PNG output: `round(255·x)`.
pub fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = dims(img)?;
    let d = img.data();
    let plane = h * w;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Lossless sidecar: `u32 H | u32 W | f32 × 3HW`, little-endian.
pub fn write_raw(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = dims(img)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for v in img.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(Error::Format(format!("{}: truncated raw image", path.display())));
    }
    let h = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = &buf[8..];
    if body.len() != 3 * h * w * 4 {
        return Err(Error::Format(format!("{}: size mismatch", path.display())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![3, h, w], data)
}
