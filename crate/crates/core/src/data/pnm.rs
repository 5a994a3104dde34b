//! 8-bit portable anymap images: P5 (grayscale) and P6 (RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// ITU-R BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(Error::ImageFormat("expected P5 or P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::ImageFormat("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::ImageFormat(format!("bad header field {text:?}")))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::ImageFormat("missing raster separator".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!("empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}; only 8-bit images are read")));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes P5/P6 bytes into a `(1, c, h, w)` tensor in `[0, 1]`. With
/// `channels == 1`, RGB input is reduced to luminance; grayscale input is
/// replicated when three channels are requested.
pub fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid("decode_pnm", format!("channels must be 1 or 3, got {channels}")));
    }
    let h = parse_header(bytes)?;
    let src_c = if h.magic[1] == b'5' { 1 } else { 3 };
    let plane = h.width * h.height;
    let raster = &bytes[h.data_start..];
    if raster.len() < plane * src_c {
        return Err(Error::ImageFormat(format!(
            "raster holds {} bytes, {} needed",
            raster.len(),
            plane * src_c
        )));
    }
    let scale = h.maxval as f64;
    let mut data = vec![0.0; plane * channels];
    for i in 0..plane {
        let px = &raster[i * src_c..(i + 1) * src_c];
        match (src_c, channels) {
            (1, _) => {
                for c in 0..channels {
                    data[c * plane + i] = px[0] as f64 / scale;
                }
            }
            (3, 1) => data[i] = LUMA.iter().zip(px).map(|(w, &v)| w * v as f64).sum::<f64>() / scale,
            _ => {
                for c in 0..3 {
                    data[c * plane + i] = px[c] as f64 / scale;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(1, channels, h.height, h.width), data)
}

/// Encodes a `(1, 1 | 3, h, w)` tensor as P5 or P6, clamping to `[0, 1]` and
/// rounding to the nearest of 256 levels.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::ImageFormat(format!("cannot encode tensor of shape {s}")));
    }
    let magic = if s.c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.h * s.w;
    for i in 0..plane {
        for c in 0..s.c {
            out.push(quantize(image.data()[c * plane + i]));
        }
    }
    Ok(out)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?, channels)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}
