use serde::{Deserialize, Serialize};

use super::hierarchy::ChannelHierarchy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Standard basic-block ResNet with projection shortcuts.
    Resnet,
    /// Smoothing iterations per level with optional A/B weight sharing.
    Mgnet,
    /// In-channel V-cycles on every level with FAS resolution coarsening.
    Mgiad,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Resnet => "resnet",
            Variant::Mgnet => "mgnet",
            Variant::Mgiad => "mgiad",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Variant::Resnet),
            "mgnet" => Ok(Variant::Mgnet),
            "mgiad" => Ok(Variant::Mgiad),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected resnet, mgnet or mgiad)"
            ))),
        }
    }
}

/// `(false, false)` is ResNet-style, `(true, false)` shares A, `(true, true)` shares A and B.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharingPolicy {
    pub share_a: bool,
    pub share_b: bool,
}

impl SharingPolicy {
    pub const NONE: SharingPolicy = SharingPolicy {
        share_a: false,
        share_b: false,
    };
    pub const A: SharingPolicy = SharingPolicy {
        share_a: true,
        share_b: false,
    };
    pub const AB: SharingPolicy = SharingPolicy {
        share_a: true,
        share_b: true,
    };
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Base channel count per resolution level; its length is the level count `L`.
    pub channels: Vec<usize>,
    /// Multiplier applied to every base channel count (never to `coarsest_channels`).
    pub lambda: usize,
    /// Blocks (resnet) or smoothing steps (mgnet) per level.
    pub nu: usize,
    pub eta_pre: usize,
    pub eta_post: usize,
    /// Channels per group `g_s` of grouped operators; `None` means fully coupled (mgnet only).
    pub group_size: Option<usize>,
    /// Width `c_K` of the coarsest in-channel level (mgiad only).
    pub coarsest_channels: Option<usize>,
    pub sharing: SharingPolicy,
    pub fas: bool,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    /// Spatial stencil size `s` of smoothing and stem convolutions.
    pub kernel: usize,
}

impl ModelConfig {
    /// Three levels of `[16, 32, 64]` channels with three blocks each.
    pub fn resnet20() -> Self {
        ModelConfig {
            variant: Variant::Resnet,
            channels: vec![16, 32, 64],
            nu: 3,
            sharing: SharingPolicy::NONE,
            fas: false,
            ..Self::mgiad(64, 4, 1)
        }
        .without_hierarchy()
    }

    /// Four levels of `[64, 128, 256, 512]` channels with two blocks each.
    pub fn resnet18() -> Self {
        ModelConfig {
            channels: vec![64, 128, 256, 512],
            nu: 2,
            ..Self::resnet20()
        }
    }

    /// Four-level MgNet with A and B shared per level and `[64, 128, 256, 256]` channels.
    pub fn mgnet4() -> Self {
        ModelConfig {
            variant: Variant::Mgnet,
            channels: vec![64, 128, 256, 256],
            nu: 2,
            sharing: SharingPolicy::AB,
            fas: false,
            ..Self::mgiad(64, 4, 1)
        }
        .without_hierarchy()
    }

    /// Three-level MgNet with A and B shared per level and `[16, 32, 64]` channels.
    pub fn mgnet3() -> Self {
        ModelConfig {
            channels: vec![16, 32, 64],
            nu: 3,
            ..Self::mgnet4()
        }
    }

    /// Four-level MGiaD with `[64, 128, 256, 256]` base channels.
    pub fn mgiad(coarsest: usize, group_size: usize, lambda: usize) -> Self {
        ModelConfig {
            variant: Variant::Mgiad,
            channels: vec![64, 128, 256, 256],
            lambda,
            nu: 2,
            eta_pre: 1,
            eta_post: 1,
            group_size: Some(group_size),
            coarsest_channels: Some(coarsest),
            sharing: SharingPolicy::AB,
            fas: true,
            num_classes: 10,
            input_channels: 3,
            input_size: 32,
            kernel: 3,
        }
    }

    /// Default configuration of a variant.
    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::Resnet => Self::resnet18(),
            Variant::Mgnet => Self::mgnet4(),
            Variant::Mgiad => Self::mgiad(64, 4, 1),
        }
    }

    fn without_hierarchy(mut self) -> Self {
        self.group_size = None;
        self.coarsest_channels = None;
        self
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Channel count per level after scaling by `lambda`.
    pub fn level_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| c * self.lambda).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("channel plan is empty (need at least one resolution level)"));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("level {} has zero channels", i + 1)));
        }
        if self.lambda < 1 {
            return Err(Error::config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.num_classes < 1 || self.input_channels < 1 || self.input_size < 1 {
            return Err(Error::config(format!(
                "need num_classes, input_channels and input_size >= 1, got {}, {}, {}",
                self.num_classes, self.input_channels, self.input_size
            )));
        }
        match self.variant {
            Variant::Resnet | Variant::Mgnet => {
                if self.nu < 1 {
                    return Err(Error::config(format!("nu must be >= 1, got {}", self.nu)));
                }
                if self.coarsest_channels.is_some() {
                    return Err(Error::config(format!(
                        "coarsest_channels applies to mgiad only, not {}",
                        self.variant
                    )));
                }
                if let Some(gs) = self.group_size {
                    if self.variant == Variant::Resnet {
                        return Err(Error::config("group_size applies to mgnet and mgiad only"));
                    }
                    for (i, c) in self.level_channels().into_iter().enumerate() {
                        if gs == 0 || c % gs != 0 {
                            return Err(Error::config(format!(
                                "level {} has {c} channels, not divisible by group size {gs}",
                                i + 1
                            )));
                        }
                    }
                }
                Ok(())
            }
            Variant::Mgiad => {
                if self.eta_pre < 1 {
                    return Err(Error::config(format!("eta_pre must be >= 1, got {}", self.eta_pre)));
                }
                ChannelHierarchy::from_config(self).map(|_| ())
            }
        }
    }
}
