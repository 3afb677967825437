//! Optional on-disk crop cache, enabled by the `MULTIROI_BMD_CACHE`
//! environment variable. Entries are content-addressed by image bytes,
//! geometry hash, crop size, ROI subset, and scalar width, so a hit is
//! bit-identical to recomputation by construction.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::hex_string;
use crate::geometry::{ExtractConfig, RoiKind};
use crate::image::ImageBuf;
use crate::scalar::Real;

pub const CACHE_ENV: &str = "MULTIROI_BMD_CACHE";

const CACHE_MAGIC: &[u8; 6] = b"MRBC1\n";

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Cache key for one (image, geometry, subset, dtype) combination.
pub fn cache_key<F: Real>(
    image_bytes: &[u8],
    extract: &ExtractConfig,
    kinds: &[RoiKind],
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image_bytes);
    hasher.update(extract.geo.canonical_string().as_bytes());
    hasher.update(format!(";crop_size={}", extract.crop_size).as_bytes());
    for kind in kinds {
        hasher.update(kind.as_str().as_bytes());
        hasher.update(b";");
    }
    hasher.update(F::DTYPE.as_bytes());
    hex_string(&hasher.finalize())
}

fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.crops"))
}

pub fn store<F: Real>(dir: &Path, key: &str, crops: &[ImageBuf<F>]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(crops.len() as u32).to_le_bytes());
    for crop in crops {
        buf.extend_from_slice(&(crop.width() as u32).to_le_bytes());
        buf.extend_from_slice(&(crop.height() as u32).to_le_bytes());
        for &v in crop.as_slice() {
            v.write_le(&mut buf);
        }
    }
    // Write-then-rename so concurrent readers never see a partial entry.
    let final_path = entry_path(dir, key);
    let tmp = dir.join(format!(".{key}.tmp"));
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, &final_path)
}

pub fn lookup<F: Real>(dir: &Path, key: &str) -> Option<Vec<ImageBuf<F>>> {
    let buf = fs::read(entry_path(dir, key)).ok()?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let s = buf.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    if take(&mut pos, CACHE_MAGIC.len())? != CACHE_MAGIC {
        return None;
    }
    let n_crops = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
    let mut crops = Vec::with_capacity(n_crops);
    for _ in 0..n_crops {
        let w = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let raw = take(&mut pos, w * h * F::BYTE_WIDTH)?;
        let data: Vec<F> = raw
            .chunks_exact(F::BYTE_WIDTH)
            .map(|c| F::read_le(c))
            .collect();
        crops.push(ImageBuf::from_vec(w, h, data));
    }
    (pos == buf.len()).then_some(crops)
}
