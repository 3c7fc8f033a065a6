use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};

/// Per-level ladders of channel widths `c_{l,1} > c_{l,2} > ... > c_{l,K}`, each half the previous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelHierarchy {
    pub ladders: Vec<Vec<usize>>,
    pub group_size: usize,
    pub coarsest: usize,
}

/// Halves `top` while the half stays at least `coarsest`.
///
/// The last rung lies in `[coarsest, 2 * coarsest)`; it equals `coarsest` exactly when
/// `top / coarsest` is a power of two.
pub fn ladder(top: usize, coarsest: usize) -> Vec<usize> {
    let mut rungs = vec![top];
    let mut c = top;
    while c % 2 == 0 && c / 2 >= coarsest && coarsest > 0 {
        c /= 2;
        rungs.push(c);
    }
    rungs
}

impl ChannelHierarchy {
    pub fn new(level_widths: &[usize], group_size: usize, coarsest: usize) -> Result<Self> {
        if group_size == 0 || coarsest == 0 {
            return Err(Error::config(format!(
                "group size and coarsest width must be >= 1, got g_s={group_size}, c_K={coarsest}"
            )));
        }
        let mut ladders = Vec::with_capacity(level_widths.len());
        for (l, &top) in level_widths.iter().enumerate() {
            if top < coarsest {
                return Err(Error::config(format!(
                    "level {} has {top} channels, fewer than the coarsest width c_K={coarsest}",
                    l + 1
                )));
            }
            let rungs = ladder(top, coarsest);
            for (k, &c) in rungs[..rungs.len() - 1].iter().enumerate() {
                if c % group_size != 0 {
                    return Err(Error::config(format!(
                        "level {} channel level {} has {c} channels, not divisible by group size {group_size}",
                        l + 1,
                        k + 1
                    )));
                }
            }
            ladders.push(rungs);
        }
        Ok(ChannelHierarchy {
            ladders,
            group_size,
            coarsest,
        })
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        if config.variant != Variant::Mgiad {
            return Err(Error::config(format!("{} has no channel hierarchy", config.variant)));
        }
        let gs = config
            .group_size
            .ok_or_else(|| Error::config("mgiad needs group_size"))?;
        let ck = config
            .coarsest_channels
            .ok_or_else(|| Error::config("mgiad needs coarsest_channels"))?;
        Self::new(&config.level_channels(), gs, ck)
    }

    /// Channels per group at rung `kappa` (0-based) of `level`; the coarsest rung is fully coupled.
    pub fn group_width(&self, level: usize, kappa: usize) -> usize {
        let rungs = &self.ladders[level];
        if kappa + 1 == rungs.len() {
            rungs[kappa]
        } else {
            self.group_size
        }
    }

    /// `K_l`, the number of channel levels on resolution level `level`.
    pub fn depth(&self, level: usize) -> usize {
        self.ladders[level].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_arithmetic() {
        assert_eq!(ladder(16, 4), vec![16, 8, 4]);
        assert_eq!(ladder(64, 64), vec![64]);
        assert_eq!(ladder(192, 64), vec![192, 96]);
        assert_eq!(ladder(256, 4).len(), 7);
    }

    #[test]
    fn coarsest_rung_is_fully_coupled() {
        let h = ChannelHierarchy::new(&[16], 4, 4).unwrap();
        assert_eq!(h.group_width(0, 0), 4);
        assert_eq!(h.group_width(0, 2), 4);
        let h = ChannelHierarchy::new(&[32], 4, 8).unwrap();
        assert_eq!(h.group_width(0, 2), 8);
    }

    #[test]
    fn rejects_bad_ladders() {
        assert!(matches!(ChannelHierarchy::new(&[8], 4, 16), Err(Error::Config(_))));
        let err = ChannelHierarchy::new(&[24], 16, 3).unwrap_err();
        assert!(err.to_string().contains("not divisible by group size 16"), "{err}");
    }
}
