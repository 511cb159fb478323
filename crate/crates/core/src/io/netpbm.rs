//! Binary PPM (P6) images and PGM (P5) masks, 8 bits per sample.

use std::path::Path;

use crate::bench::scene::{u8_to_unit, unit_to_u8};
use crate::error::{Error, Result};
use crate::inside_outside::ObjectMask;
use crate::tensor::Tensor;

/// Encodes a `[3, H, W]` image in `[-1, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim("encode_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(unit_to_u8(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &ObjectMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v { 255 } else { 0 }));
    out
}

/// Parses the header and returns `(width, height, payload)`.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after header".into()));
    }
    let [w, h, max] = fields;
    if max != 255 {
        return Err(Error::Format(format!("only 8-bit files are supported, maxval {max}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, px) = parse(bytes, b"P6")?;
    if px.len() != 3 * w * h {
        return Err(Error::Format(format!("expected {} pixel bytes, found {}", 3 * w * h, px.len())));
    }
    let mut data = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = u8_to_unit(px[3 * i + c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Pixels at or above 128 are inside.
pub fn decode_pgm(bytes: &[u8]) -> Result<ObjectMask> {
    let (w, h, px) = parse(bytes, b"P5")?;
    if px.len() != w * h {
        return Err(Error::Format(format!("expected {} pixel bytes, found {}", w * h, px.len())));
    }
    ObjectMask::new(h, w, px.iter().map(|&v| v >= 128).collect())
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &ObjectMask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<ObjectMask> {
    decode_pgm(&std::fs::read(path)?)
}
