//! DMAP raster files: `"DMF1"`, little-endian `u32` width, height and
//! channel count, then `W * H * Q` little-endian `f32` values in row-major
//! order with the channel innermost.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::sparse_tensor::DenseMap;

pub const MAGIC: &[u8; 4] = b"DMF1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DmapError {
    #[error("bad magic {0:?}, expected \"DMF1\"")]
    BadMagic([u8; 4]),
    #[error("file too short for a header ({0} bytes)")]
    ShortHeader(usize),
    #[error("header declares {width}x{height}x{channels}, which overflows")]
    ExtentOverflow { width: u32, height: u32, channels: u32 },
    #[error("payload has {got} bytes, header declares {expected}")]
    Truncated { expected: u64, got: u64 },
    #[error("{0} trailing bytes after payload")]
    Trailing(u64),
    #[error("raster contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_dmap(raster: &DenseMap<f32>) -> Result<Vec<u8>, DmapError> {
    if !raster.is_finite() {
        return Err(DmapError::NonFinite);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * raster.data.len());
    out.extend_from_slice(MAGIC);
    for d in [raster.width, raster.height, raster.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dmap(bytes: &[u8]) -> Result<DenseMap<f32>, DmapError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DmapError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(DmapError::ShortHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DmapError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (width, height, channels) = (word(0), word(1), word(2));
    let expected = (width as u64)
        .checked_mul(height as u64)
        .and_then(|n| n.checked_mul(channels as u64))
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(DmapError::ExtentOverflow { width, height, channels })?;
    let got = (bytes.len() - HEADER_LEN) as u64;
    if got < expected {
        return Err(DmapError::Truncated { expected, got });
    }
    if got > expected {
        return Err(DmapError::Trailing(got - expected));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(DenseMap { width: width as usize, height: height as usize, channels: channels as usize, data })
}

pub fn write_dmap(raster: &DenseMap<f32>, path: impl AsRef<Path>) -> Result<(), DmapError> {
    fs::write(path, encode_dmap(raster)?)?;
    Ok(())
}

pub fn read_dmap(path: impl AsRef<Path>) -> Result<DenseMap<f32>, DmapError> {
    decode_dmap(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let r = DenseMap { width: 2, height: 1, channels: 1, data: vec![1.0f32, -0.5] };
        let b = encode_dmap(&r).unwrap();
        assert_eq!(&b[..4], b"DMF1");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_dmap(&DenseMap { width: 1, height: 1, channels: 1, data: vec![1.0] }).unwrap();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_dmap(&b), Err(DmapError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncated_payload() {
        let b = encode_dmap(&DenseMap { width: 3, height: 2, channels: 2, data: vec![0.5; 12] }).unwrap();
        assert!(matches!(decode_dmap(&b[..b.len() - 3]), Err(DmapError::Truncated { .. })));
        assert!(matches!(decode_dmap(&b[..10]), Err(DmapError::ShortHeader(10))));
    }

    #[test]
    fn overflowing_extent() {
        let mut b = Vec::from(&MAGIC[..]);
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = decode_dmap(&b).unwrap_err();
        assert!(matches!(err, DmapError::ExtentOverflow { .. } | DmapError::Truncated { .. }), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dmap");
        let r = DenseMap { width: 3, height: 2, channels: 3, data: (0..18).map(|i| i as f32 * 0.25 - 1.0).collect() };
        write_dmap(&r, &path).unwrap();
        assert_eq!(read_dmap(&path).unwrap(), r);
    }

    proptest! {
        #[test]
        fn round_trip_bitwise(w in 0usize..6, h in 0usize..6, q in 1usize..4, seed in any::<u64>()) {
            let data: Vec<f32> = (0..w * h * q).map(|i| f32::from_bits(((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761))) & 0x3fff_ffff)).collect();
            let r = DenseMap { width: w, height: h, channels: q, data };
            let back = decode_dmap(&encode_dmap(&r).unwrap()).unwrap();
            prop_assert_eq!(back.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), r.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!((back.width, back.height, back.channels), (w, h, q));
        }
    }
}
