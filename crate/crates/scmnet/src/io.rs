//! Image export (PNG for RGB, PGM for single-channel maps).

use crate::tensor::Tensor;
use crate::{Result, ScmError};
use std::io::Write;
use std::path::Path;

/// Round-half-up quantization from [0,1] to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Write a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(ScmError::Shape {
            op: "write_png",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = vec![0u8; h * w * 3];
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf[(y * w + x) * 3 + c] = quantize(data[(c * h + y) * w + x]);
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| ScmError::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))
}

/// Write a [H,W] map in [0,1] as a binary PGM (row-major).
pub fn write_pgm(path: &Path, map: &[f64], h: usize, w: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    let buf: Vec<u8> = map.iter().map(|&v| quantize(v)).collect();
    f.write_all(&buf)?;
    Ok(())
}
