//! Dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FVDS" | version: u32 | video_count: u32 | frames: u32 | channels: u32
//!        | height: u32 | width: u32
//!   per video: label: u8 | relevance bitmask (ceil(N/8) bytes, LSB first)
//!              | pixels (N * channels * H * W bytes)
//! crc32: u32   (over everything after the magic, excluding the crc itself)
//! ```

use std::fs;
use std::path::Path;

use super::{ActionLabel, VideoSample, CHANNELS};
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"FVDS";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(videos: &[VideoSample], path: &Path) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::EmptyInput("refusing to write an empty dataset"));
    }
    let (frames, height, width) = (videos[0].frames, videos[0].height, videos[0].width);
    for v in videos {
        if v.frames != frames || v.height != height || v.width != width {
            return Err(Error::ShapeMismatch {
                expected: vec![frames, height, width],
                actual: vec![v.frames, v.height, v.width],
            });
        }
    }
    let mask_bytes = frames.div_ceil(8);
    let frame_bytes = CHANNELS * height * width;
    let mut body = Vec::with_capacity(24 + videos.len() * (1 + mask_bytes + frames * frame_bytes));
    body.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    body.extend_from_slice(&(videos.len() as u32).to_le_bytes());
    body.extend_from_slice(&(frames as u32).to_le_bytes());
    body.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    body.extend_from_slice(&(height as u32).to_le_bytes());
    body.extend_from_slice(&(width as u32).to_le_bytes());
    for v in videos {
        body.push(v.label.index() as u8);
        let mut mask = vec![0u8; mask_bytes];
        for (i, &r) in v.relevance.iter().enumerate() {
            if r {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        body.extend_from_slice(&mask);
        body.extend_from_slice(&v.pixels);
    }
    let crc = crc32fast::hash(&body);
    let mut file = Vec::with_capacity(4 + body.len() + 4);
    file.extend_from_slice(&DATASET_MAGIC);
    file.extend_from_slice(&body);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: DATASET_MAGIC,
        });
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut offset = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if body.len() - offset < n {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: offset + 4,
                needed: n,
                available: body.len() - offset,
            });
        }
        let s = &body[offset..offset + n];
        offset += n;
        Ok(s)
    };
    let mut u32_at = |label: &str| -> Result<u32> {
        let s = take(4).map_err(|e| match e {
            Error::Truncated {
                path,
                offset,
                needed,
                available,
            } => Error::Malformed {
                path,
                offset,
                message: format!("{label}: need {needed} bytes, {available} available"),
            },
            other => other,
        })?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };

    let version = u32_at("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = u32_at("video count")? as usize;
    let frames = u32_at("frame count")? as usize;
    let channels = u32_at("channels")? as usize;
    let height = u32_at("height")? as usize;
    let width = u32_at("width")? as usize;
    if channels != CHANNELS {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: 16,
            message: format!("expected {CHANNELS} channels, file declares {channels}"),
        });
    }
    if frames == 0 || height == 0 || width == 0 || count == 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: 8,
            message: "zero-sized dataset dimensions".into(),
        });
    }

    let mask_bytes = frames.div_ceil(8);
    let frame_bytes = CHANNELS * height * width;
    let mut videos = Vec::with_capacity(count);
    for _ in 0..count {
        let label = ActionLabel::from_index(take(1)?[0] as usize)?;
        let mask = take(mask_bytes)?;
        let relevance: Vec<bool> = (0..frames)
            .map(|i| mask[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        let pixels = take(frames * frame_bytes)?.to_vec();
        videos.push(VideoSample {
            label,
            relevance,
            pixels,
            frames,
            height,
            width,
        });
    }
    if offset != body.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: offset + 4,
            message: format!("{} trailing bytes", body.len() - offset),
        });
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::super::{generate, DatasetSpec, GlyphBank};
    use super::*;

    fn sample_videos() -> Vec<VideoSample> {
        let spec = DatasetSpec {
            train_count: 6,
            test_count: 4,
            frames: 12,
            image_size: 16,
            distractor: super::super::DistractorConfig {
                min_len: 2,
                max_len: 5,
                ..Default::default()
            },
            ..DatasetSpec::default()
        };
        let (train, _) = generate(&spec, &GlyphBank::procedural()).unwrap();
        train
    }

    #[test]
    fn roundtrip_preserves_collection_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.fvds");
        let videos = sample_videos();
        write_dataset(&videos, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(videos, back);
        let path2 = dir.path().join("again.fvds");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(first, fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.fvds");
        write_dataset(&sample_videos(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 3;
        bytes[mid] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn empty_collection_rejected_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fvds");
        assert!(matches!(
            write_dataset(&[], &path),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.fvds");
        write_dataset(&sample_videos(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 7;
        let end = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[4..end]);
        let crc_bytes = crc.to_le_bytes();
        bytes[end..].copy_from_slice(&crc_bytes);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
