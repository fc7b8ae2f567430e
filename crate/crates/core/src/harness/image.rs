//! `3×H×W` images with values in `[0, 1]`, stored as binary PPM (P6).

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "image",
        msg: msg.into(),
    }
}

pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("only binary PPM (P6) is supported"));
    }
    let mut num = || -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| bad(format!("bad PPM header field `{t}`")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 || max > 255 {
        return Err(bad(format!("unsupported PPM max value {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[pos + 1..];
    if data.len() < 3 * w * h {
        return Err(bad(format!(
            "PPM raster has {} bytes, need {}",
            data.len(),
            3 * w * h
        )));
    }
    let scale = 1.0 / max as f64;
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::c(data[3 * p + c] as f64 * scale)
    }))
}

pub fn to_bytes<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let [3, h, w] = img.shape()[..] else {
        return Err(Error::shape(format!(
            "expected a 3×H×W image, got {:?}",
            img.shape()
        )));
    };
    let mut out = vec![0u8; 3 * h * w];
    for (i, &v) in img.data().iter().enumerate() {
        let (c, p) = (i / (h * w), i % (h * w));
        out[3 * p + c] = (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok((h, w, out))
}

pub fn encode_ppm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, raster) = to_bytes(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&raster);
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Read a `.ppm` file (or `.png` with the `png` feature).
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    if is_png(path) {
        return read_png(path);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if is_png(path) {
        return write_png(path, img);
    }
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn read_png<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| bad(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::c(raw[3 * p + c] as f64 / 255.0)
    }))
}

#[cfg(feature = "png")]
fn write_png<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w, raster) = to_bytes(img)?;
    image::RgbImage::from_raw(w as u32, h as u32, raster)
        .expect("raster size")
        .save(path)
        .map_err(|e| bad(format!("{}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
fn read_png<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Err(bad(format!(
        "{}: PNG support needs the `png` feature",
        path.display()
    )))
}

#[cfg(not(feature = "png"))]
fn write_png<T: Real>(path: &Path, _img: &Tensor<T>) -> Result<()> {
    Err(bad(format!(
        "{}: PNG support needs the `png` feature",
        path.display()
    )))
}

/// Random `size×size` crop starting at `(y, x)`.
pub fn crop<T: Real>(img: &Tensor<T>, y: usize, x: usize, size: usize) -> Result<Tensor<T>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::shape("crop expects C×H×W"));
    };
    if y + size > h || x + size > w {
        return Err(Error::shape(format!(
            "crop {size} at ({y},{x}) exceeds {h}×{w}"
        )));
    }
    Ok(Tensor::from_fn([c, size, size], |i| {
        let (ch, r, col) = (i / (size * size), (i / size) % size, i % size);
        img.data()[ch * h * w + (y + r) * w + x + col]
    }))
}

pub fn flip_horizontal<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let w = *img.shape().last().unwrap_or(&1);
    Tensor::from_fn(img.shape().to_vec(), |i| {
        img.data()[i - i % w + (w - 1 - i % w)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_8_bit_values() {
        let img = Tensor::<f64>::from_fn([3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
        let back: Tensor<f64> = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img: Tensor<f64> = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm::<f64>(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn crop_and_flip() {
        let img = Tensor::<f64>::from_fn([1, 3, 3], |i| i as f64);
        assert_eq!(crop(&img, 1, 1, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert_eq!(flip_horizontal(&img).data()[..3], [2.0, 1.0, 0.0]);
        assert!(crop(&img, 2, 0, 2).is_err());
    }
}
