//! Encoder checkpoints: `DCLP` magic, u32 version, u32 header length, a
//! UTF-8 text manifest, little-endian f32 payload, and a CRC-32 of the
//! payload. All integers are little-endian.

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCLP";
pub const FORMAT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: WHAT,
        msg: msg.into(),
    }
}

fn mean_std_text(v: &[f32; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn header_text(enc: &Encoder<f32>) -> String {
    let c = &enc.cfg;
    let mut h = String::new();
    for (k, v) in [
        ("image_size", c.image_size.to_string()),
        ("patch_size", c.patch_size.to_string()),
        ("depth", c.depth.to_string()),
        ("heads", c.heads.to_string()),
        ("dim", c.dim.to_string()),
        ("vl_dim", c.vl_dim.to_string()),
        ("has_vl_proj", c.has_vl_proj.to_string()),
        ("pixel_mean", mean_std_text(&c.pixel_mean)),
        ("pixel_std", mean_std_text(&c.pixel_std)),
    ] {
        h.push_str(&format!("config {k} {v}\n"));
    }
    let mut offset = 0;
    for t in enc.params.tensors() {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        h.push_str(&format!("tensor {} {} {}\n", t.name, shape.join("x"), offset));
        offset += t.data.len();
    }
    h
}

/// Serializes an encoder. Round-trips bit-exactly through [`decode`].
pub fn encode(enc: &Encoder<f32>) -> Vec<u8> {
    let header = header_text(enc);
    let mut payload = Vec::new();
    for t in enc.params.tensors() {
        for v in t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| fmt_err("truncated"))
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_f32_triple(v: &str, line: usize) -> Result<[f32; 3]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 3 {
        return Err(fmt_err(format!("header line {line}: expected three comma-separated values")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| fmt_err(format!("header line {line}: bad number `{p}`")))?;
    }
    Ok(out)
}

fn parse_header(text: &str) -> Result<(EncoderConfig, Vec<TensorEntry>)> {
    let mut cfg = EncoderConfig::default();
    let mut seen = Vec::new();
    let mut tensors = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            ["config", key, value] => {
                if seen.contains(key) {
                    return Err(fmt_err(format!("header line {n}: duplicate config key `{key}`")));
                }
                seen.push(*key);
                let int = |v: &str| v.parse::<usize>().map_err(|_| fmt_err(format!("header line {n}: bad integer `{v}`")));
                match *key {
                    "image_size" => cfg.image_size = int(value)?,
                    "patch_size" => cfg.patch_size = int(value)?,
                    "depth" => cfg.depth = int(value)?,
                    "heads" => cfg.heads = int(value)?,
                    "dim" => cfg.dim = int(value)?,
                    "vl_dim" => cfg.vl_dim = int(value)?,
                    "has_vl_proj" => {
                        cfg.has_vl_proj = value
                            .parse()
                            .map_err(|_| fmt_err(format!("header line {n}: bad boolean `{value}`")))?
                    }
                    "pixel_mean" => cfg.pixel_mean = parse_f32_triple(value, n)?,
                    "pixel_std" => cfg.pixel_std = parse_f32_triple(value, n)?,
                    other => return Err(fmt_err(format!("header line {n}: unknown config key `{other}`"))),
                }
            }
            ["tensor", name, shape, offset] => {
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| fmt_err(format!("header line {n}: bad shape `{shape}`")))?;
                let offset = offset
                    .parse()
                    .map_err(|_| fmt_err(format!("header line {n}: bad offset `{offset}`")))?;
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                    offset,
                });
            }
            _ => return Err(fmt_err(format!("header line {n}: unrecognized `{line}`"))),
        }
    }
    const REQUIRED: [&str; 9] = [
        "image_size",
        "patch_size",
        "depth",
        "heads",
        "dim",
        "vl_dim",
        "has_vl_proj",
        "pixel_mean",
        "pixel_std",
    ];
    if let Some(missing) = REQUIRED.iter().find(|k| !seen.contains(k)) {
        return Err(fmt_err(format!("header is missing config key `{missing}`")));
    }
    Ok((cfg, tensors))
}

/// Parses and verifies a checkpoint. Any structural problem is an error;
/// the checksum is verified before the payload is interpreted.
pub fn decode(b: &[u8]) -> Result<Encoder<f32>> {
    if b.len() < 12 || &b[..4] != MAGIC {
        return Err(fmt_err("missing DCLP magic"));
    }
    let version = u32_at(b, 4)?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let header_len = u32_at(b, 8)? as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= b.len())
        .ok_or_else(|| fmt_err("header length exceeds file size"))?;
    let text = std::str::from_utf8(&b[12..header_end]).map_err(|_| fmt_err("header is not UTF-8"))?;
    if b.len() < header_end + 4 {
        return Err(fmt_err("missing checksum"));
    }
    let payload = &b[header_end..b.len() - 4];
    let stored = u32_at(b, b.len() - 4)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if payload.len() % 4 != 0 {
        return Err(fmt_err("payload length is not a multiple of 4"));
    }
    let (cfg, entries) = parse_header(text)?;
    cfg.validate().map_err(|e| fmt_err(format!("invalid encoder config: {e}")))?;
    let expected = cfg.param_count().ok_or_else(|| fmt_err("encoder config is too large"))?;
    if expected != payload.len() / 4 {
        return Err(fmt_err(format!(
            "payload holds {} values, config implies {expected}",
            payload.len() / 4
        )));
    }
    let mut params = EncoderParams::<f32>::zeros(&cfg);
    let reference: Vec<(String, Vec<usize>)> = params.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if entries.len() != reference.len() {
        return Err(fmt_err(format!("manifest lists {} tensors, expected {}", entries.len(), reference.len())));
    }
    let mut offset = 0usize;
    for ((e, (name, shape)), (_, dst)) in entries.iter().zip(&reference).zip(params.tensors_mut()) {
        if &e.name != name || &e.shape != shape {
            return Err(fmt_err(format!(
                "manifest entry `{}` {:?} does not match expected `{name}` {shape:?}",
                e.name, e.shape
            )));
        }
        if e.offset != offset {
            return Err(fmt_err(format!("tensor `{name}` offset {} should be {offset}", e.offset)));
        }
        for (k, v) in dst.iter_mut().enumerate() {
            let at = 4 * (offset + k);
            *v = f32::from_le_bytes([payload[at], payload[at + 1], payload[at + 2], payload[at + 3]]);
        }
        offset += dst.len();
    }
    Ok(Encoder { cfg, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::IMAGENET_MEAN;
    use proptest::prelude::*;

    fn sample() -> Encoder<f32> {
        Encoder::init(EncoderConfig::default(), 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut e = sample();
        e.params.cls[0] = f32::from_bits(0x0000_0001);
        e.params.cls[1] = -0.0;
        let back = decode(&encode(&e)).unwrap();
        let a: Vec<u32> = e.params.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
        let b: Vec<u32> = back.params.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
        assert_eq!(a, b);
        assert_eq!(back.cfg, e.cfg);
        assert_eq!(encode(&back), encode(&e));
    }

    #[test]
    fn encoder_without_projection_round_trips() {
        let cfg = EncoderConfig {
            has_vl_proj: false,
            pixel_mean: IMAGENET_MEAN,
            ..EncoderConfig::default()
        };
        let e = Encoder::<f32>::init(cfg, 1).unwrap();
        assert_eq!(decode(&encode(&e)).unwrap(), e);
    }

    #[test]
    fn param_count_matches_tensors() {
        let e = sample();
        let total: usize = e.params.tensors().iter().map(|t| t.data.len()).sum();
        assert_eq!(e.cfg.param_count(), Some(total));
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encode(&sample());
        let header_end = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for i in (header_end..bytes.len()).step_by(7) {
            for bit in [0, 3, 7] {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(decode(&b).is_err(), "flip at {i} bit {bit}");
            }
        }
        let mut b = bytes.clone();
        b[header_end + 5] ^= 0x10;
        assert!(matches!(decode(&b), Err(Error::Checksum { .. })));
    }

    #[test]
    fn structural_errors() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(decode(&v).unwrap_err().to_string().contains("version"));
        let mut h = bytes.clone();
        h[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&h).is_err());
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let e = sample();
        let good = encode(&e);
        let text = header_text(&e).replace("config depth 2", "config depth 1");
        let payload_start = 12 + header_text(&e).len();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&good[payload_start..]);
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn prefixed_garbage_never_panics(tail in proptest::collection::vec(any::<u8>(), 0..128)) {
            let mut b = MAGIC.to_vec();
            b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            b.extend_from_slice(&tail);
            let _ = decode(&b);
        }
    }
}
