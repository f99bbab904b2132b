//! PNG and NPY file formats.
//!
//! Masks are 8-bit grayscale PNGs where 0 is background and 255 (or 1) is
//! foreground. Float maps are written as NPY v1.0, little-endian `f32`, C order.

use std::fs;
use std::path::Path;

use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, LabelError, Result};
use crate::labels::BinaryMask;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source: e,
    }
}

/// 8-bit RGB, row-major, interleaved. Returns `(height, width, pixels)`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), height * width * 3);
    image::save_buffer_with_format(path, rgb, width as u32, height as u32, ExtendedColorType::Rgb8, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), height * width);
    image::save_buffer_with_format(path, gray, width as u32, height as u32, ExtendedColorType::L8, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Reads a binary mask. Any gray level other than 0, 1 or 255 is an error
/// listing every offending value.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let mut bad: Vec<u8> = raw.iter().copied().filter(|v| !matches!(v, 0 | 1 | 255)).collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(LabelError::NonBinary { values: bad }.into());
    }
    let data = raw.into_iter().map(|v| u8::from(v != 0)).collect();
    Ok(BinaryMask::new(h as usize, w as usize, data)?)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let gray: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_gray_png(path, mask.height(), mask.width(), &gray)
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

fn npy_header(shape: &[usize]) -> Vec<u8> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + header length(2) + dict + '\n' is a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Writes `data` as a little-endian `f32` NPY array of the given shape.
pub fn write_npy_f32(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut bytes = npy_header(shape);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an array written by [`write_npy_f32`] (v1.0, `<f4`, C order).
pub fn read_npy_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("not an NPY file"));
    }
    if bytes[6] != 1 {
        return Err(bad("only NPY format version 1.0 is supported"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not UTF-8"))?;
    if !header.contains("'descr': '<f4'") || !header.contains("'fortran_order': False") {
        return Err(bad("expected little-endian f32 in C order"));
    }
    let dims = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let shape = dims
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(bad("payload size does not match shape"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_round_trip_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        write_npy_f32(&path, &[3, 4], &data).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!((bytes.len() - 48) % 64, 0);
        let (shape, back) = read_npy_f32(&path).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(back, data.iter().map(|&v| v as f32).collect::<Vec<_>>());
        assert_eq!(npy_header(&[5]).len() % 64, 0);
    }

    #[test]
    fn mask_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(5, 7, |y, x| (x + y) % 3 == 0).unwrap();
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);

        let q = dir.path().join("bad.png");
        write_gray_png(&q, 1, 4, &[0, 128, 7, 128]).unwrap();
        match read_mask_png(&q).unwrap_err() {
            Error::Label(LabelError::NonBinary { values }) => assert_eq!(values, vec![7, 128]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
