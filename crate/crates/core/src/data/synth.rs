use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel noise around unit-variance centroids.
    pub noise: f32,
    pub seed: u64,
}

/// Three-channel blobs with unit noise.
pub fn synth_blobs(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with(&BlobSpec {
        classes,
        per_class,
        size,
        channels: 3,
        noise: 1.0,
        seed,
    })
}

/// Each class has a Gaussian centroid image; samples add Gaussian noise.
/// Sample `i` belongs to class `i % classes`.
pub fn synth_blobs_with(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("blobs need at least one class, pixel and channel"));
    }
    let per = spec.size * spec.size * spec.channels;
    let mut centre_rng = rng::stream(spec.seed, "blobs.centroids");
    let centroids: Vec<f32> = (0..spec.classes * per).map(|_| StandardNormal.sample(&mut centre_rng)).collect();
    let mut noise_rng = rng::stream(spec.seed, "blobs.noise");
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        for p in 0..per {
            let z: f32 = StandardNormal.sample(&mut noise_rng);
            data.push(centroids[class * per + p] + spec.noise * z);
        }
    }
    Dataset::new(
        Tensor::new([n, spec.size, spec.size, spec.channels], data)?,
        labels,
        spec.classes,
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = synth_blobs(2, 8, 4, 5).unwrap();
        let b = synth_blobs(2, 8, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_blobs(2, 8, 4, 6).unwrap());
    }

    #[test]
    fn noiseless_blobs_are_centroids() {
        let spec = BlobSpec {
            classes: 4,
            per_class: 5,
            size: 3,
            channels: 2,
            noise: 0.0,
            seed: 1,
        };
        let ds = synth_blobs_with(&spec).unwrap();
        let per = 18;
        let x = ds.images.data();
        // Nearest centroid (the first sample of each class) classifies everything.
        for i in 0..ds.len() {
            let dist = |c: usize| -> f32 {
                (0..per).map(|p| (x[i * per + p] - x[c * per + p]).powi(2)).sum()
            };
            let best = (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            assert_eq!(best, ds.labels[i]);
        }
    }
}
