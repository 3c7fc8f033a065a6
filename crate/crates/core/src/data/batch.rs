use rand::seq::SliceRandom;
use rand::Rng as _;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    /// Mirror each image left-right with probability 1/2.
    pub flip: bool,
    /// Zero-pad by this many pixels and crop back at a random offset; 0 disables.
    pub crop_pad: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop_pad: 0 };
    pub const CIFAR: Augment = Augment { flip: true, crop_pad: 4 };

    fn active(&self) -> bool {
        self.flip || self.crop_pad > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset rows in this batch.
    pub indices: Vec<usize>,
}

/// Batches of one epoch in a fixed order; the last batch may be short.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Augment,
    aug_rng: Rng,
}

/// Order is the identity without `shuffle_seed`, otherwise a permutation fixed by `(seed, epoch)`.
pub fn batches(
    data: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: usize,
    augment: Augment,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::epoch_stream(seed, "shuffle", epoch));
    }
    Ok(BatchStream {
        data,
        order,
        batch_size,
        pos: 0,
        augment,
        aug_rng: rng::epoch_stream(shuffle_seed.unwrap_or(0), "augment", epoch),
    })
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (h, w, c) = self.data.image_shape();
        let per = h * w * c;
        let src = self.data.images.data();
        let mut out = vec![0.0f32; indices.len() * per];
        for (k, &i) in indices.iter().enumerate() {
            let image = &src[i * per..(i + 1) * per];
            let dst = &mut out[k * per..(k + 1) * per];
            if !self.augment.active() {
                dst.copy_from_slice(image);
                continue;
            }
            let flip = self.augment.flip && self.aug_rng.random_bool(0.5);
            let p = self.augment.crop_pad as i64;
            let (dy, dx) = if p > 0 {
                (self.aug_rng.random_range(-p..=p) as isize, self.aug_rng.random_range(-p..=p) as isize)
            } else {
                (0, 0)
            };
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xf = if flip { w - 1 - x } else { x };
                    let sx = xf as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let from = ((sy as usize) * w + sx as usize) * c;
                    let to = (y * w + x) * c;
                    dst[to..to + c].copy_from_slice(&image[from..from + c]);
                }
            }
        }
        Some(Batch {
            images: Tensor::new([indices.len(), h, w, c], out).expect("batch shape"),
            labels: indices.iter().map(|&i| self.data.labels[i]).collect(),
            indices,
        })
    }
}
