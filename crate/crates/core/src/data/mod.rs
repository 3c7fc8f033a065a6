//! Dataset ingestion (IDX, CIFAR binary), synthetic blobs, normalization and batching.

mod batch;
mod cifar;
mod idx;
mod synth;

pub use batch::{batches, Augment, Batch, BatchStream};
pub use cifar::{load_cifar_binary, parse_cifar, CIFAR_IMAGE_BYTES};
pub use idx::{load_idx, parse_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_blobs_with, BlobSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics applied as `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation of every channel.
    pub fn fit(ds: &Dataset) -> Self {
        let c = ds.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &x) in ds.images.data().iter().enumerate() {
            sum[i % c] += x as f64;
        }
        let count = (ds.images.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for (i, &x) in ds.images.data().iter().enumerate() {
            let d = x as f64 - mean[i % c];
            sq[i % c] += d * d;
        }
        let std = sq
            .iter()
            .map(|s| {
                let v = (s / count).sqrt();
                if v > 1e-12 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }
}

/// Images `(N, H, W, C)` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Statistics already applied to `images`, if any.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::config(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Applies `stats`; fails if the data is already normalized.
    pub fn normalized(mut self, stats: &NormStats) -> Result<Self> {
        if self.norm.is_some() {
            return Err(Error::usage("dataset is already normalized"));
        }
        let c = self.channels();
        if stats.mean.len() != c {
            return Err(Error::config(format!(
                "statistics have {} channels, images have {c}",
                stats.mean.len()
            )));
        }
        for (i, x) in self.images.data_mut().iter_mut().enumerate() {
            *x = ((*x as f64 - stats.mean[i % c]) / stats.std[i % c]) as f32;
        }
        self.norm = Some(stats.clone());
        Ok(self)
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn subset(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let (h, w, c) = self.image_shape();
        let per = h * w * c;
        Dataset {
            images: Tensor::new([n, h, w, c], self.images.data()[..n * per].to_vec()).expect("consistent shape"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }

    /// Zero-pads every image symmetrically to `size x size`.
    pub fn pad_to(&self, size: usize) -> Result<Self> {
        let (h, w, c) = self.image_shape();
        if size < h || size < w || (size - h) % 2 != 0 || (size - w) % 2 != 0 {
            return Err(Error::config(format!("cannot pad {h}x{w} images symmetrically to {size}x{size}")));
        }
        let (oy, ox) = ((size - h) / 2, (size - w) / 2);
        let n = self.len();
        let mut out = vec![0.0f32; n * size * size * c];
        let src = self.images.data();
        for s in 0..n {
            for y in 0..h {
                let from = ((s * h + y) * w) * c;
                let to = ((s * size + y + oy) * size + ox) * c;
                out[to..to + w * c].copy_from_slice(&src[from..from + w * c]);
            }
        }
        Ok(Dataset {
            images: Tensor::new([n, size, size, c], out)?,
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        })
    }
}

/// Bytes to `[0, 1]`.
pub(crate) fn scale_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_centres_each_channel() {
        let ds = synth_blobs(3, 20, 6, 1).unwrap();
        let raw = Dataset {
            images: ds.images.map(|x| 3.0 * x + 0.5),
            ..ds
        };
        let stats = NormStats::fit(&raw);
        let norm = raw.normalized(&stats).unwrap();
        let again = NormStats::fit(&norm);
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-6);
            assert!((again.std[c].powi(2) - 1.0).abs() < 1e-3);
        }
        assert!(norm.normalized(&stats).is_err());
    }

    #[test]
    fn padding_keeps_pixels_centred() {
        let images = Tensor::from_fn([1, 28, 28, 1], |i| (i % 7) as f32);
        let ds = Dataset::new(images.clone(), vec![0], 1, Split::Train).unwrap();
        let p = ds.pad_to(32).unwrap();
        assert_eq!(p.image_shape(), (32, 32, 1));
        assert_eq!(p.images.data()[0], 0.0);
        assert_eq!(p.images.data()[2 * 32 + 2], images.data()[0]);
        assert_eq!(p.images.data()[29 * 32 + 29], images.data()[27 * 28 + 27]);
        assert!(ds.pad_to(31).is_err());
    }

    #[test]
    fn rejects_inconsistent_labels() {
        let images = Tensor::zeros([2, 1, 1, 1]);
        assert!(Dataset::new(images.clone(), vec![0], 2, Split::Train).is_err());
        assert!(Dataset::new(images, vec![0, 2], 2, Split::Train).is_err());
    }
}
