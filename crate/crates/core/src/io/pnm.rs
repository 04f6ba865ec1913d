//! Binary PGM (P5) and PPM (P6) with one byte per sample.

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};

const WHAT: &str = "PNM image";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: WHAT,
        msg: msg.into(),
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn skip_space_and_comments(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn read_uint(b: &[u8], i: usize, field: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(b, i);
    let mut end = start;
    let mut v: usize = 0;
    while end < b.len() && b[end].is_ascii_digit() {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b[end] - b'0') as usize))
            .ok_or_else(|| fmt_err(format!("{field} is too large")))?;
        end += 1;
    }
    if end == start {
        return Err(fmt_err(format!("expected {field}")));
    }
    Ok((v, end))
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < 2 || b[0] != b'P' {
        return Err(fmt_err("missing P5/P6 magic"));
    }
    let magic = [b[0], b[1]];
    let (width, i) = read_uint(b, 2, "width")?;
    let (height, i) = read_uint(b, i, "height")?;
    let (maxval, i) = read_uint(b, i, "maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(fmt_err(format!("maxval {maxval} unsupported; only 1..=255")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(format!("empty image {width}x{height}")));
    }
    match b.get(i) {
        Some(c) if c.is_ascii_whitespace() => {}
        _ => return Err(fmt_err("missing whitespace after maxval")),
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: i + 1,
    })
}

fn payload<'a>(b: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| fmt_err("image dimensions overflow"))?;
    let rest = &b[h.data_start..];
    if rest.len() < n {
        return Err(fmt_err(format!("truncated pixel data: need {n} bytes, have {}", rest.len())));
    }
    Ok(&rest[..n])
}

/// Parses a P5 image; sample values are returned as stored.
pub fn decode_pgm(b: &[u8]) -> Result<GrayImage> {
    let h = parse_header(b)?;
    if &h.magic != b"P5" {
        return Err(fmt_err("expected P5 (binary graymap)"));
    }
    let data = payload(b, &h, 1)?.to_vec();
    if let Some(v) = data.iter().find(|&&v| v as usize > h.maxval) {
        return Err(fmt_err(format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    Ok(GrayImage::new(h.height, h.width, data))
}

/// Parses a P6 image, scaling samples to `[0, 1]` by maxval.
pub fn decode_ppm(b: &[u8]) -> Result<Image> {
    let h = parse_header(b)?;
    if &h.magic != b"P6" {
        return Err(fmt_err("expected P6 (binary pixmap)"));
    }
    let raw = payload(b, &h, 3)?;
    if let Some(v) = raw.iter().find(|&&v| v as usize > h.maxval) {
        return Err(fmt_err(format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    let scale = h.maxval as f32;
    Ok(Image::new(h.height, h.width, raw.iter().map(|&v| v as f32 / scale).collect()))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Quantizes each channel to 8 bits (`round(clamp(v, 0, 1) · 255)`).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
