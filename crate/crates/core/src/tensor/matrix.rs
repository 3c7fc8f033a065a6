use nalgebra::DMatrix;

use super::{ConvOperator, Scalar};
use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Largest row count [`conv_as_matrix`] will materialize by default.
pub const DEFAULT_MATRIX_BOUND: usize = 10_000;

/// Explicit `(m'·n'·c') x (m·n·c)` matrix of a convolution acting on one `(m, n, c)` sample.
///
/// Both sides are flattened pixel by pixel with the channel index running fastest,
/// i.e. `index = (y * n + x) * c + channel`, the same order as the tensor storage.
/// For `g` groups the matrix has zero blocks between channel groups.
pub fn conv_as_matrix<T: Scalar>(
    op: &ConvOperator<T>,
    input_shape: (usize, usize, usize),
    bound: usize,
) -> Result<DenseMatrix> {
    let spec = &op.spec;
    let (m, n, c) = input_shape;
    if c != spec.in_channels {
        return Err(Error::config(format!(
            "input has {c} channels, operator expects {}",
            spec.in_channels
        )));
    }
    let (mo, no) = spec.output_hw(m, n)?;
    let rows = mo * no * spec.out_channels;
    let cols = m * n * c;
    if rows > bound {
        return Err(Error::TooLarge { rows, cols, bound });
    }
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding;
    let cig = spec.in_per_group();
    let og = spec.out_per_group();
    let w = op.weights.data();
    let mut out = DenseMatrix::zeros(rows, cols);
    for oy in 0..mo {
        for ox in 0..no {
            for oc in 0..spec.out_channels {
                let row = (oy * no + ox) * spec.out_channels + oc;
                let g = oc / og;
                for ci in 0..cig {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= m as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= n as isize {
                                continue;
                            }
                            let col = (iy as usize * n + ix as usize) * c + g * cig + ci;
                            let wi = ((oc * cig + ci) * kh + ky) * kw + kx;
                            out[(row, col)] += w[wi].as_f64();
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvSpec, Tensor};

    #[test]
    fn depthwise_pointwise_is_diagonal() {
        let spec = ConvSpec::new((1, 1), 3, 3, 3, 1, (0, 0)).unwrap();
        let op = ConvOperator::new(spec, Tensor::new([3, 1, 1, 1], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
        let mat = conv_as_matrix(&op, (1, 1, 3), DEFAULT_MATRIX_BOUND).unwrap();
        assert_eq!(mat, DenseMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, -1.0, 0.5])));
    }

    #[test]
    fn two_groups_give_block_diagonal() {
        let spec = ConvSpec::new((1, 1), 2, 2, 2, 1, (0, 0)).unwrap();
        let op = ConvOperator::new(spec, Tensor::new([2, 1, 1, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let mat = conv_as_matrix(&op, (1, 1, 2), DEFAULT_MATRIX_BOUND).unwrap();
        assert_eq!(mat[(0, 1)], 0.0);
        assert_eq!(mat[(1, 0)], 0.0);
        assert_eq!((mat[(0, 0)], mat[(1, 1)]), (3.0, 4.0));
    }

    #[test]
    fn laplacian_stencil_is_banded() {
        let stencil = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];
        let spec = ConvSpec::square(3, 1, 1, 1, 1).unwrap();
        let op = ConvOperator::new(spec, Tensor::new([1, 1, 3, 3], stencil.to_vec()).unwrap()).unwrap();
        let mat = conv_as_matrix(&op, (5, 5, 1), DEFAULT_MATRIX_BOUND).unwrap();

        // Hand-built five-point matrix on a 5x5 grid with zero boundary.
        let mut expect = DenseMatrix::zeros(25, 25);
        for y in 0..5usize {
            for x in 0..5usize {
                let i = y * 5 + x;
                expect[(i, i)] = 4.0;
                if x > 0 {
                    expect[(i, i - 1)] = -1.0;
                }
                if x < 4 {
                    expect[(i, i + 1)] = -1.0;
                }
                if y > 0 {
                    expect[(i, i - 5)] = -1.0;
                }
                if y < 4 {
                    expect[(i, i + 5)] = -1.0;
                }
            }
        }
        assert_eq!(mat, expect);
        for y in 1..4 {
            for x in 1..4 {
                let row_sum: f64 = mat.row(y * 5 + x).iter().sum();
                assert_eq!(row_sum, stencil.iter().sum::<f64>());
            }
        }
    }

    #[test]
    fn refuses_large_instances() {
        let spec = ConvSpec::square(3, 4, 4, 1, 1).unwrap();
        let op = ConvOperator::<f64>::zeros(spec);
        let err = conv_as_matrix(&op, (64, 64, 4), DEFAULT_MATRIX_BOUND).unwrap_err();
        assert!(matches!(err, Error::TooLarge { rows: 16384, .. }));
    }
}
