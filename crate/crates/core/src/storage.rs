//! Byte accounting for replay memories: stored virtual queries versus raw
//! replayed images.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::vq_bank::{storage_bytes, VirtualQueryBank};

/// Extension of one raw replayed image: `H·W·C` bytes, row-major RGB.
pub const IMAGE_EXT: &str = "rgb";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StorageLine {
    pub method: String,
    /// Stored vectors or images.
    pub items: usize,
    pub bytes: u64,
}

/// Bytes of the vectors actually held by `bank`.
pub fn bank_payload_bytes(bank: &VirtualQueryBank, bytes_per_real: usize) -> u64 {
    (bank.total() * bank.dim * bytes_per_real) as u64
}

/// Bytes a full bank would need: `h · classes · D · bytes_per_real`.
pub fn vq_capacity_bytes(h: usize, classes: usize, dim: usize, bytes_per_real: usize) -> u64 {
    storage_bytes(h, classes, dim, bytes_per_real) as u64
}

/// `k` images of `height × width × channels` one-byte samples.
pub fn image_replay_bytes(k: usize, height: usize, width: usize, channels: usize) -> u64 {
    (k * height * width * channels) as u64
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes each image as `<id>.rgb`, one byte per sample; returns bytes written.
pub fn write_image_replay(dir: &Path, images: &[Image]) -> Result<u64> {
    fs::create_dir_all(dir)?;
    let mut total = 0u64;
    for img in images {
        let bytes: Vec<u8> = img.pixels.data().iter().map(|&v| quantize(v)).collect();
        fs::write(dir.join(format!("{}.{IMAGE_EXT}", img.id)), &bytes)?;
        total += bytes.len() as u64;
    }
    Ok(total)
}

/// Number and total size of the replayed images in `dir`.
pub fn image_replay_dir_bytes(dir: &Path) -> Result<(usize, u64)> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let mut n = 0;
    let mut bytes = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == IMAGE_EXT) {
            n += 1;
            bytes += entry.metadata()?.len();
        }
    }
    Ok((n, bytes))
}

/// Replay settings at the scale of a 150-class benchmark with a 256-wide
/// decoder. Image replay is only known through its reported size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceScale {
    pub queries_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub bytes_per_real: usize,
    pub image_replay_mib: f64,
}

impl Default for ReferenceScale {
    /// 80 half-precision queries per class against 600 replayed images
    /// (21.9 MiB on disk).
    fn default() -> Self {
        Self { queries_per_class: 80, classes: 150, dim: 256, bytes_per_real: 2, image_replay_mib: 21.9 }
    }
}

impl ReferenceScale {
    pub fn vq_bytes(&self) -> u64 {
        vq_capacity_bytes(self.queries_per_class, self.classes, self.dim, self.bytes_per_real)
    }

    pub fn image_bytes(&self) -> u64 {
        (self.image_replay_mib * (1u64 << 20) as f64).round() as u64
    }

    /// Fraction of the image-replay storage the query bank needs.
    pub fn ratio(&self) -> f64 {
        self.vq_bytes() as f64 / self.image_bytes() as f64
    }
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}
