use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Statistics of one training-mode normalization, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, used to update running statistics.
    pub var_unbiased: Vec<T>,
}

pub(crate) fn channel_count<T: Scalar>(input: &Tensor<T>) -> Result<usize> {
    input
        .shape()
        .last()
        .copied()
        .ok_or_else(|| Error::config("batch norm input has no channel axis"))
}

pub(crate) fn batch_stats<T: Scalar>(input: &Tensor<T>, epsilon: f64) -> Result<BnSaved<T>> {
    let c = channel_count(input)?;
    let count = input.len() / c;
    let mut sum = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v.as_f64();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for ((s, &v), &mu) in sq.iter_mut().zip(px).zip(&mean) {
            let d = v.as_f64() - mu;
            *s += d * d;
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
    let unbiased = if count > 1 {
        sq.iter().map(|s| s / (count - 1) as f64).collect()
    } else {
        var.clone()
    };
    Ok(BnSaved {
        mean: mean.iter().map(|&m| T::of(m)).collect(),
        inv_std: var.iter().map(|&v| T::of(1.0 / (v + epsilon).sqrt())).collect(),
        var_unbiased: unbiased.into_iter().map(T::of).collect(),
    })
}

pub(crate) fn normalize<T: Scalar>(input: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = mean.len();
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = gamma[ch] * (px[ch] - mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    out
}

pub(crate) fn update_running<T: Scalar>(state_mean: &mut [T], state_var: &mut [T], saved: &BnSaved<T>, momentum: f64) {
    let mom = T::of(momentum);
    let keep = T::one() - mom;
    for ch in 0..state_mean.len() {
        state_mean[ch] = keep * state_mean[ch] + mom * saved.mean[ch];
        state_var[ch] = keep * state_var[ch] + mom * saved.var_unbiased[ch];
    }
}

/// Returns `(d_input, d_gamma, d_beta)` for a normalization that used `mean` / `inv_std`.
/// With `batch_stats` the statistics are treated as functions of the input.
pub(crate) fn bn_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = mean.len();
    let count = input.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (px, dpx) in input.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (px[ch] - mean[ch]) * inv_std[ch];
            dbeta[ch] = dbeta[ch] + dpx[ch];
            dgamma[ch] = dgamma[ch] + dpx[ch] * xhat;
        }
    }
    let mut dx = grad_out.clone();
    let n = T::of(count as f64);
    for (xpx, dpx) in input.data().chunks_exact(c).zip(dx.data_mut().chunks_exact_mut(c)) {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            if batch_stats {
                let xhat = (xpx[ch] - mean[ch]) * inv_std[ch];
                dpx[ch] = scale * (dpx[ch] - (dbeta[ch] + xhat * dgamma[ch]) / n);
            } else {
                dpx[ch] = scale * dpx[ch];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eager batch normalization over all axes but the last (channel) axis.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, state: &mut BatchNormState<T>, mode: BnMode) -> Result<Tensor<T>> {
    let c = channel_count(input)?;
    if c != state.channels() {
        return Err(Error::config(format!(
            "batch norm has {} channels, input has {c}",
            state.channels()
        )));
    }
    match mode {
        BnMode::Train => {
            let saved = batch_stats(input, state.epsilon)?;
            let out = normalize(input, &saved.mean, &saved.inv_std, &state.gamma, &state.beta);
            update_running(&mut state.running_mean, &mut state.running_var, &saved, state.momentum);
            Ok(out)
        }
        BnMode::Eval => {
            let inv_std: Vec<T> = state
                .running_var
                .iter()
                .map(|&v| T::of(1.0 / (v.as_f64() + state.epsilon).sqrt()))
                .collect();
            Ok(normalize(input, &state.running_mean, &inv_std, &state.gamma, &state.beta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn standardized_input_passes_through() {
        // Two channels, each with values {-1, 1}: zero mean, unit variance.
        let x = Tensor::new([4, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0]).unwrap();
        let mut st = BatchNormState::<f64>::new(2);
        let y = batch_norm(&x, &mut st, BnMode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full([3, 2, 2, 1], 7.5f64);
        let mut st = BatchNormState::new(1);
        st.beta[0] = 0.25;
        let y = batch_norm(&x, &mut st, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(st.running_var[0] >= 0.0);
    }

    #[test]
    fn train_mode_standardizes_random_batch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn([8, 3, 3, 2], |i| rng.random::<f64>() * 5.0 + (i % 2) as f64 * 10.0);
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&x, &mut st, BnMode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // Running statistics moved toward the batch by the momentum factor.
        assert!(st.running_mean[1] > 1.0);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut st = BatchNormState::<f64>::new(1);
        st.running_mean[0] = 2.0;
        st.running_var[0] = 4.0 - BN_EPSILON;
        let x = Tensor::full([1, 1, 1, 1], 6.0);
        let y = batch_norm(&x, &mut st, BnMode::Eval).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }
}
