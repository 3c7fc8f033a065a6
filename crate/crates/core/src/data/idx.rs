use std::path::Path;

use super::{scale_bytes, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| {
        Error::parse(source, bytes.len(), format!("truncated header: need 4 bytes at offset {offset}"))
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, source: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, source)?;
    if magic != expected {
        return Err(Error::parse(
            source,
            0,
            format!("wrong magic {magic:#010x} (expected {expected:#010x})"),
        ));
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], start: usize, len: usize, source: &str) -> Result<&'a [u8]> {
    if bytes.len() < start + len {
        return Err(Error::parse(
            source,
            bytes.len(),
            format!("truncated file: header promises {} bytes, found {}", start + len, bytes.len()),
        ));
    }
    Ok(&bytes[start..start + len])
}

/// Parses an IDX image/label pair. Pixels are scaled to `[0, 1]`, not normalized.
pub fn parse_idx(images: &[u8], labels: &[u8], image_source: &str, label_source: &str) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES_MAGIC, image_source)?;
    check_magic(labels, IDX_LABELS_MAGIC, label_source)?;
    let n = read_u32(images, 4, image_source)? as usize;
    let rows = read_u32(images, 8, image_source)? as usize;
    let cols = read_u32(images, 12, image_source)? as usize;
    let n_labels = read_u32(labels, 4, label_source)? as usize;
    if n_labels != n {
        return Err(Error::parse(
            label_source,
            4,
            format!("count mismatch: {n_labels} labels for {n} images"),
        ));
    }
    let pixels = body(images, 16, n * rows * cols, image_source)?;
    let label_bytes = body(labels, 8, n, label_source)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new([n, rows, cols, 1], scale_bytes(pixels))?,
        labels,
        classes,
        Split::Train,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(p.to_path_buf()),
        _ => Error::Io(e),
    });
    parse_idx(
        &read(images_path)?,
        &read(labels_path)?,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )
}

/// Serializes a single-channel dataset with pixels in `[0, 1]` to IDX image and label bytes.
pub fn write_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w, c) = ds.image_shape();
    if c != 1 || ds.norm.is_some() {
        return Err(Error::usage("IDX holds unnormalized single-channel images"));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::usage(format!("label {l} does not fit a byte")));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
        img.extend((0..32u8).map(|i| i * 8));
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn reads_hand_crafted_pair() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab, "img", "lab").unwrap();
        assert_eq!(ds.images.shape(), &[2, 4, 4, 1]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[17], 136.0 / 255.0);
    }

    #[test]
    fn distinct_errors() {
        let (img, lab) = fixture();
        let err = parse_idx(&img, &img, "img", "lab").unwrap_err().to_string();
        assert!(err.contains("wrong magic 0x00000803") && err.contains("lab at byte 0"), "{err}");
        let err = parse_idx(&img[..40], &lab, "img", "lab").unwrap_err().to_string();
        assert!(err.contains("truncated file") && err.contains("at byte 40"), "{err}");
        let mut short = lab.clone();
        short[7] = 1;
        let err = parse_idx(&img, &short, "img", "lab").unwrap_err().to_string();
        assert!(err.contains("count mismatch") && err.contains("at byte 4"), "{err}");
        let err = parse_idx(&img[..6], &lab, "img", "lab").unwrap_err().to_string();
        assert!(err.contains("truncated header"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let img = [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28];
        let lab = [0, 0, 8, 1, 0, 0, 0, 0];
        let ds = parse_idx(&img, &lab, "i", "l").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.image_shape(), (28, 28, 1));
    }

    #[test]
    fn write_then_read_is_bitwise() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab, "i", "l").unwrap();
        let (img2, lab2) = write_idx(&ds).unwrap();
        assert_eq!((img2.clone(), lab2.clone()), (img, lab));
        assert_eq!(parse_idx(&img2, &lab2, "i", "l").unwrap(), ds);
    }

    #[test]
    fn missing_file() {
        let err = load_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }
}
