//! Reader for the IDX archives used by the MNIST family.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for `u8` image tensors,
//! `0x00000801` for `u8` label vectors), one big-endian `u32` per dimension,
//! then the raw bytes.

use std::fs;
use std::path::Path;

use crate::classifier::InputShape;
use crate::error::{Error, Result};

use super::Pool;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Integrity(format!("header truncated at byte {at}")))
}

fn parse<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let data = &bytes[start..];
    if data.len() != expected {
        return Err(Error::Integrity(format!(
            "{what}: header promises {expected} bytes, file holds {}",
            data.len()
        )));
    }
    Ok((dims, data))
}

/// Parses an image archive into `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (dims, data) = parse(bytes, IMAGES_MAGIC, "images")?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((dims[0], dims[1], dims[2], pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, data) = parse(bytes, LABELS_MAGIC, "labels")?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Loads a pair of IDX files as a single-channel pool.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Pool> {
    let ib = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, rows, cols, pixels) = parse_images(&ib)?;
    let labels = parse_labels(&lb)?;
    if labels.len() != count {
        return Err(Error::Integrity(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    Pool::new(
        pixels,
        labels,
        InputShape {
            channels: 1,
            height: rows,
            width: cols,
        },
    )
}

/// Encodes images (values in `[0, 1]`) and labels as IDX byte streams.
pub fn encode(pool: &Pool) -> (Vec<u8>, Vec<u8>) {
    let shape = pool.shape();
    let mut images = Vec::with_capacity(16 + pool.len() * shape.len());
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [pool.len(), shape.height, shape.width] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..pool.len() {
        images.extend(
            pool.image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut labels = Vec::with_capacity(8 + pool.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(pool.len() as u32).to_be_bytes());
    labels.extend(pool.labels().iter().map(|&y| y as u8));
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_image_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1];
        images.extend_from_slice(&[0, 255]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn normalizes_endpoints() {
        let (ib, lb) = two_image_fixture();
        let (n, r, c, px) = parse_images(&ib).unwrap();
        assert_eq!((n, r, c), (2, 1, 1));
        assert_eq!(px, vec![0.0, 1.0]);
        assert_eq!(parse_labels(&lb).unwrap(), vec![7, 3]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (mut ib, lb) = two_image_fixture();
        assert!(matches!(parse_images(&lb), Err(Error::Format(_))));
        ib.pop();
        assert!(matches!(parse_images(&ib), Err(Error::Integrity(_))));
        assert!(matches!(parse_images(&ib[..6]), Err(Error::Integrity(_))));
    }

    #[test]
    fn load_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, _) = two_image_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, &ib).unwrap();
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 1, 4]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Integrity(_))));
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 4, 1]).unwrap();
        let pool = load_idx(&ip, &lp).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.image(1), &[1.0]);
    }
}
