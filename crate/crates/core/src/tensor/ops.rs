use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let mut out = a.clone();
    out.axpy(T::one(), b);
    Ok(out)
}

pub(crate) fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "subtract")?;
    let mut out = a.clone();
    out.axpy(-T::one(), b);
    Ok(out)
}

pub(crate) fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "cannot {what} tensors of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Spatial mean per channel: `(b, m, n, c) -> (b, c)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, m, n, c] = input.dims4()?;
    let mut out = Tensor::zeros([b, c]);
    let inv = T::of(1.0 / (m * n) as f64);
    for bi in 0..b {
        let dst = &mut out.data_mut()[bi * c..(bi + 1) * c];
        for px in input.data()[bi * m * n * c..(bi + 1) * m * n * c].chunks_exact(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d = *d + v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    Ok(out)
}

/// Affine map `(b, c) -> (b, classes)` with `weights` of shape `(classes, c)`.
pub fn linear_head<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = match input.shape() {
        &[b, c] => (b, c),
        s => return Err(Error::config(format!("linear head expects (batch, features), got {s:?}"))),
    };
    let classes = match weights.shape() {
        &[k, wc] if wc == c => k,
        s => {
            return Err(Error::config(format!(
                "linear head weights {s:?} do not match {c} input features"
            )))
        }
    };
    if bias.shape() != [classes] {
        return Err(Error::config(format!(
            "bias shape {:?} does not match {classes} classes",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros([b, classes]);
    // SAFETY: input is b x c, weights^T is c x classes, out is b x classes.
    unsafe {
        T::gemm(
            b,
            c,
            classes,
            T::one(),
            input.data().as_ptr(),
            c as isize,
            1,
            weights.data().as_ptr(),
            1,
            c as isize,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            classes as isize,
            1,
        );
    }
    for row in out.data_mut().chunks_exact_mut(classes) {
        for (v, &bb) in row.iter_mut().zip(bias.data()) {
            *v = *v + bb;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(Error::config(format!("logits must be (batch, classes), got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::config(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = logits.clone();
    let mut loss = 0.0f64;
    for (row, &label) in probs.data_mut().chunks_exact_mut(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let picked = (row[label] - max).as_f64();
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
        // log-sum-exp form, finite even when the picked probability underflows
        loss += z.as_f64().ln() - picked;
    }
    Ok((T::of(loss / b as f64), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new([2], vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::from_fn([1, 2, 2, 3], |i| i as f64 - 4.0);
        assert_eq!(add(&x, &Tensor::zeros([1, 2, 2, 3])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn pooling_constant_gives_constant() {
        let x = Tensor::full([2, 3, 5, 4], 1.25f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn head_is_affine() {
        let x = Tensor::new([1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new([3], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(linear_head(&x, &w, &b).unwrap().data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let logits = Tensor::zeros([2, 4]);
        let (loss, probs) = softmax_cross_entropy::<f64>(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(softmax_cross_entropy::<f64>(&logits, &[0, 4]).is_err());
    }
}
