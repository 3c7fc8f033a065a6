use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three planes of 32x32 bytes, red then green then blue.
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Parses records of `label bytes + 3072 pixel bytes`. CIFAR-100 records carry a coarse
/// label before the fine one; the fine label is kept.
pub fn parse_cifar(bytes: &[u8], classes: usize, source: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    let label_bytes = match classes {
        10 => 1,
        100 => 2,
        c => return Err(Error::config(format!("CIFAR has 10 or 100 classes, not {c}"))),
    };
    let record = label_bytes + CIFAR_IMAGE_BYTES;
    if bytes.len() % record != 0 {
        let start = bytes.len() / record * record;
        return Err(Error::parse(
            source,
            start,
            format!(
                "truncated record: {} of {record} bytes",
                bytes.len() - start
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = vec![0.0f32; n * CIFAR_IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (s, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::parse(source, s * record + label_bytes - 1, format!("label {label} >= {classes}")));
        }
        labels.push(label);
        let planes = &rec[label_bytes..];
        let out = &mut pixels[s * CIFAR_IMAGE_BYTES..(s + 1) * CIFAR_IMAGE_BYTES];
        for ch in 0..3 {
            for p in 0..1024 {
                out[p * 3 + ch] = planes[ch * 1024 + p] as f32 / 255.0;
            }
        }
    }
    Ok((pixels, labels))
}

/// Concatenates the records of every file.
pub fn load_cifar_binary(paths: &[&Path], classes: usize, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(p.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let (px, lb) = parse_cifar(&bytes, classes, &p.display().to_string())?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, 32, 32, 3], pixels)?, labels, classes, split)
}
