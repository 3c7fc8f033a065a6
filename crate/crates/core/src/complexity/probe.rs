use crate::blocks::{ModelConfig, Role, SharingPolicy, Variant};
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

use super::count::count_weights;

/// Block families whose weight growth in the channel count is probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFamily {
    /// One level of MgNet^{AB}, two fully coupled `3x3` convs.
    DenseMgnet,
    /// One level of in-channel V-cycles with the given `g_s` and `c_K`.
    Sic { group_size: usize, coarsest: usize },
    /// A single `3x3` depthwise conv.
    Depthwise,
}

impl std::str::FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" | "mgnet" => Ok(ProbeFamily::DenseMgnet),
            "sic" => Ok(ProbeFamily::Sic {
                group_size: 4,
                coarsest: 4,
            }),
            "depthwise" => Ok(ProbeFamily::Depthwise),
            other => Err(Error::usage(format!(
                "unknown probe family {other:?} (expected dense, sic or depthwise)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub points: Vec<(usize, u64)>,
    /// Least-squares slope of `log weights` against `log c`.
    pub exponent: f64,
    pub intercept: f64,
}

/// Convolution weights of one probed block at width `c`. Batch norms and the head are excluded.
pub fn block_weights(family: ProbeFamily, c: usize) -> Result<u64> {
    let single_level = |variant, group_size, coarsest| ModelConfig {
        variant,
        channels: vec![c],
        lambda: 1,
        nu: 2,
        eta_pre: 1,
        eta_post: 1,
        group_size,
        coarsest_channels: coarsest,
        sharing: SharingPolicy::AB,
        fas: true,
        num_classes: 10,
        input_channels: 3,
        input_size: 32,
        kernel: 3,
    };
    match family {
        ProbeFamily::DenseMgnet => {
            let b = count_weights(&single_level(Variant::Mgnet, None, None))?;
            Ok(b.sum_where(|r| matches!(r.role, Role::A | Role::B)))
        }
        ProbeFamily::Sic {
            group_size,
            coarsest,
        } => {
            let b = count_weights(&single_level(Variant::Mgiad, Some(group_size), Some(coarsest)))?;
            Ok(b.sum_where(|r| {
                matches!(
                    r.role,
                    Role::AHat | Role::BHat | Role::RHat | Role::PiHat | Role::PHat
                )
            }))
        }
        ProbeFamily::Depthwise => {
            Ok(ConvSpec::square(3, c, c, c, 1)?.param_count() as u64)
        }
    }
}

/// Fits `weights ~ c^p` over the given widths.
pub fn scaling_probe(family: ProbeFamily, widths: &[usize]) -> Result<ScalingFit> {
    if widths.len() < 4 {
        return Err(Error::usage(format!(
            "scaling fit needs at least 4 widths, got {}",
            widths.len()
        )));
    }
    if widths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("probe widths must be strictly increasing"));
    }
    let points = widths
        .iter()
        .map(|&c| Ok((c, block_weights(family, c)?)))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|&(c, _)| (c as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, w)| (w as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    Ok(ScalingFit {
        points,
        exponent,
        intercept: my - exponent * mx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_block_is_two_full_convs() {
        assert_eq!(block_weights(ProbeFamily::DenseMgnet, 64).unwrap(), 2 * 9 * 64 * 64);
    }

    #[test]
    fn sic_block_hand_count() {
        // Ladder 16, 8, 4: grouped rungs 2*9*4*c each, coarsest 2*9*4*4, transfers 3*c per coarsening.
        let expected = 2 * 9 * 4 * 16 + 3 * 16 + 2 * 9 * 4 * 8 + 3 * 8 + 2 * 9 * 4 * 4;
        let f = ProbeFamily::Sic {
            group_size: 4,
            coarsest: 4,
        };
        assert_eq!(block_weights(f, 16).unwrap(), expected as u64);
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let fit = scaling_probe(ProbeFamily::Depthwise, &[8, 16, 32, 64]).unwrap();
        assert!((fit.exponent - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let err = scaling_probe(ProbeFamily::DenseMgnet, &[8, 16, 32]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(scaling_probe(ProbeFamily::DenseMgnet, &[8, 16, 16, 32]).is_err());
    }
}
