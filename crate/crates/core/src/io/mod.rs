//! File formats and the synthetic dataset generator.

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod pnm;
pub mod regions;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { what, msg } => Error::Format {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    with_path(path, pnm::decode_ppm(&read_bytes(path)?))
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    with_path(path, pnm::decode_pgm(&read_bytes(path)?))
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &pnm::encode_ppm(img))
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &pnm::encode_pgm(img))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder<f32>> {
    with_path(path, checkpoint::decode(&read_bytes(path)?))
}

pub fn save_checkpoint(path: &Path, enc: &Encoder<f32>) -> Result<()> {
    write_bytes(path, &checkpoint::encode(enc))
}
