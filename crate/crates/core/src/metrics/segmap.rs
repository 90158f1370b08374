//! `SDSG` segmentation maps: magic, width u32, height u32, then row-major
//! u16 labels, all little endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaze::SegmentationMap;

pub const SEGMAP_MAGIC: &[u8; 4] = b"SDSG";

pub fn encode_segmap(map: &SegmentationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * map.labels.len());
    out.extend_from_slice(SEGMAP_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for &l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_segmap(bytes: &[u8], path: &Path) -> Result<SegmentationMap> {
    if bytes.len() < 12 || &bytes[..4] != SEGMAP_MAGIC {
        return Err(Error::format(path, "missing SDSG header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[12..];
    if width == 0 || height == 0 || payload.len() != 2 * width * height {
        return Err(Error::format(
            path,
            format!("{width}x{height} map with {} label bytes", payload.len()),
        ));
    }
    let labels = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    SegmentationMap::new(width, height, labels)
}

pub fn read_segmap(path: &Path) -> Result<SegmentationMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_segmap(&bytes, path)
}

pub fn write_segmap(path: &Path, map: &SegmentationMap) -> Result<()> {
    fs::write(path, encode_segmap(map)).map_err(|e| Error::io(path, e))
}
