//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Encode a `3×h×w` tensor with values in `[0, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = img.dims()[..] else {
        return Err(Error::Shape(format!("ppm expects 3×h×w, got {:?}", img.dims())));
    };
    let hw = h * w;
    let d = img.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push(quantize(d[c * hw + i]));
        }
    }
    Ok(out)
}

/// Encode an `h×w` tensor with values in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.dims()[..] else {
        return Err(Error::Shape(format!("pgm expects h×w, got {:?}", map.dims())));
    };
    let mut out = header("P5", w, h);
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    let bad = |m: &str| Error::Format(format!("{}: {m}", String::from_utf8_lossy(magic)));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number in header"));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?;
        *field = s.parse().map_err(|_| bad("header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported, expected 255")));
    }
    Ok(Header {
        width,
        height,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let body = &bytes[h.payload_start..];
    if body.len() != need {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {need}",
            body.len()
        )));
    }
    Ok(body)
}

/// `(width, height)` from the header alone.
pub fn ppm_dims(bytes: &[u8]) -> Result<(usize, usize)> {
    let h = parse_header(bytes, b"P6")?;
    Ok((h.width, h.height))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let body = payload(bytes, &h, 3)?;
    let hw = h.width * h.height;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P5")?;
    let body = payload(bytes, &h, 1)?;
    Tensor::new(
        vec![h.height, h.width],
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
