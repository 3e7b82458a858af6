//! Poster decoding and bilinear resizing.
//!
//! Binary (`P6`) and ASCII (`P3`) PPM are decoded natively. Anything else goes
//! through an optional [`DecodeHook`]; with the `codecs` feature,
//! [`codec_decoder`] provides one backed by the `image` crate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with channel values in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data).expect("consistent image")
    }
}

/// Decoder for formats the native PPM reader does not handle.
pub type DecodeHook = dyn Fn(&[u8]) -> Result<RgbImage> + Send + Sync;

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))
    }

    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let t = self.next_token()?;
        t.parse().map_err(|_| Error::Format(format!("bad PPM {what} '{t}'")))
    }
}

/// Decodes a PPM (`P6` binary or `P3` ASCII) image.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    match bytes.get(..2) {
        Some(b"P6") | Some(b"P3") => {}
        Some(b"P5") | Some(b"P2") | Some(b"P4") | Some(b"P1") => {
            return Err(Error::Format("poster must have 3 channels, got a single-channel PNM".into()))
        }
        _ => return Err(Error::Format("not a PPM image".into())),
    }
    let binary = bytes[1] == b'6';
    let mut tok = Tokens { bytes, pos: 2 };
    let width = tok.next_usize("width")?;
    let height = tok.next_usize("height")?;
    let maxval = tok.next_usize("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PPM geometry {width}x{height} maxval {maxval}")));
    }
    let n = width * height * 3;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(n);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = tok.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| Error::Format(format!("PPM raster truncated: need {need} bytes")))?;
        if wide {
            data.extend(raster.chunks_exact(2).map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / scale));
        } else {
            data.extend(raster.iter().map(|&b| f64::from(b) / scale));
        }
    } else {
        for _ in 0..n {
            data.push(tok.next_usize("sample")? as f64 / scale);
        }
    }
    if data.iter().any(|&v| v > 1.0) {
        return Err(Error::Format("PPM sample exceeds maxval".into()));
    }
    RgbImage::new(width, height, data)
}

/// Encodes an image as 8-bit binary PPM, rounding each channel to the nearest level.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Resizing to the same dimensions returns the input unchanged.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let mut data = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    RgbImage { width, height, data }
}

/// Loads a poster and resizes it to `target x target x 3` with values in `[0, 1]`.
pub fn load_poster_image(path: &Path, target: usize) -> Result<Tensor> {
    load_poster_image_with(path, target, None)
}

pub fn load_poster_image_with(path: &Path, target: usize, hook: Option<&DecodeHook>) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Invalid("target size must be positive".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = match (bytes.first(), hook) {
        (Some(b'P'), _) => decode_ppm(&bytes)?,
        (_, Some(decode)) => decode(&bytes)?,
        _ => return Err(Error::Format(format!("{}: unsupported image format", path.display()))),
    };
    Ok(resize_bilinear(&img, target, target).into_tensor())
}

/// Decode hook for PNG and JPEG through the `image` crate.
#[cfg(feature = "codecs")]
pub fn codec_decoder() -> Box<DecodeHook> {
    Box::new(|bytes: &[u8]| {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
        if img.color().channel_count() != 3 {
            return Err(Error::Format(format!(
                "poster must have 3 channels, got {}",
                img.color().channel_count()
            )));
        }
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
        RgbImage::new(w as usize, h as usize, data)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> RgbImage {
        // [[0, 1], [1, 0]] in every channel
        let px = [0.0, 1.0, 1.0, 0.0];
        RgbImage::new(2, 2, px.iter().flat_map(|&v| [v, v, v]).collect()).unwrap()
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(3, 2, (0..18).map(|i| i as f64 * 15.0 / 255.0).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back.width, 3);
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ascii_and_sixteen_bit_ppm() {
        let img = decode_ppm(b"P3\n# comment\n1 1\n10\n10 5 0\n").unwrap();
        assert_eq!(img.data, vec![1.0, 0.5, 0.0]);
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x7f, 0xff]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data[0], 1.0);
        assert_eq!(img.data[1], 0.0);
    }

    #[test]
    fn grayscale_is_rejected() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x10"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x10"), Err(Error::Format(_))));
    }

    #[test]
    fn identity_resize_passes_through() {
        let img = RgbImage::new(2, 2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
    }

    #[test]
    fn checkerboard_upscale_by_hand() {
        let up = resize_bilinear(&checkerboard(), 4, 4);
        let v = |x, y| up.pixel(x, y)[0];
        // corners keep their source values
        assert_eq!(v(0, 0), 0.0);
        assert_eq!(v(3, 0), 1.0);
        assert_eq!(v(0, 3), 1.0);
        assert_eq!(v(3, 3), 0.0);
        // first row: source x = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert_eq!([v(0, 0), v(1, 0), v(2, 0), v(3, 0)], [0.0, 0.25, 0.75, 1.0]);
        // (1,1) samples (0.25, 0.25): 0.75*0.25 + 0.25*0.75 = 0.375
        assert!((v(1, 1) - 0.375).abs() < 1e-15);
        // (2,1) samples (0.75, 0.25): 0.25*0.75*0 + 0.75*0.75*1 + 0.25*0.25*1 + 0.75*0.25*0 = 0.625
        assert!((v(2, 1) - 0.625).abs() < 1e-15);
    }
}
