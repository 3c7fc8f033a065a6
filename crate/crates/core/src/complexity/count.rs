use std::collections::BTreeMap;

use crate::blocks::{gcd, ladder, ModelConfig, Role, Variant};
use crate::error::Result;

/// Parameter count of one operator (a convolution, a batch norm's γ and β, or the head).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightRecord {
    pub name: String,
    pub role: Role,
    /// 1-based resolution level, 0 for the head.
    pub level: usize,
    /// 1-based channel level, 0 where not applicable.
    pub kappa: usize,
    pub count: u64,
}

/// Closed-form weight counts of a configuration. Shared operators appear once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeightBreakdown {
    pub records: Vec<WeightRecord>,
}

impl WeightBreakdown {
    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| r.count).sum()
    }

    pub fn by_role(&self) -> BTreeMap<Role, u64> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.role).or_default() += r.count;
        }
        m
    }

    pub fn by_level(&self) -> BTreeMap<usize, u64> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.level).or_default() += r.count;
        }
        m
    }

    /// Totals keyed by `(level, kappa)`.
    pub fn by_channel_level(&self) -> BTreeMap<(usize, usize), u64> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry((r.level, r.kappa)).or_default() += r.count;
        }
        m
    }

    /// Sum over records whose role satisfies `keep`.
    pub fn sum_where(&self, keep: impl Fn(&WeightRecord) -> bool) -> u64 {
        self.records.iter().filter(|r| keep(r)).map(|r| r.count).sum()
    }
}

struct Counter {
    records: Vec<WeightRecord>,
}

impl Counter {
    fn push(&mut self, name: String, role: Role, level: usize, kappa: usize, count: u64) {
        self.records.push(WeightRecord {
            name,
            role,
            level,
            kappa,
            count,
        });
    }

    /// `s * s' * (c_in / g) * c_out`
    fn conv(&mut self, name: String, role: Role, level: usize, kappa: usize, s: usize, c_in: usize, c_out: usize, groups: usize) {
        let count = (s * s * (c_in / groups) * c_out) as u64;
        self.push(name, role, level, kappa, count);
    }

    fn bn(&mut self, name: String, level: usize, kappa: usize, channels: usize) {
        self.push(name, Role::Bn, level, kappa, 2 * channels as u64);
    }
}

/// Exact parameter count of `build_model(config)` from the architecture formulas alone.
pub fn count_weights(config: &ModelConfig) -> Result<WeightBreakdown> {
    config.validate()?;
    let s = config.kernel;
    let widths = config.level_channels();
    let levels = widths.len();
    let mut k = Counter { records: Vec::new() };
    k.conv("stem.conv".into(), Role::Stem, 1, 0, s, config.input_channels, widths[0], 1);
    k.bn("stem.bn".into(), 1, 0, widths[0]);

    let zero_start = |l: usize| l == 0 || !config.fas;
    let transition = |k: &mut Counter, l: usize| {
        let (c, cn, level) = (widths[l], widths[l + 1], l + 1);
        k.bn(format!("l{level}.transfer.A_bn"), level, 0, c);
        k.conv(format!("l{level}.transfer.R"), Role::R, level, 0, s, c, cn, gcd(c, cn));
        if config.fas {
            k.conv(format!("l{level}.transfer.Pi"), Role::Pi, level, 0, s, c, cn, gcd(c, cn));
            k.bn(format!("l{level}.transfer.A_next_bn"), level + 1, 1, cn);
        }
    };

    match config.variant {
        Variant::Resnet => {
            let mut prev = widths[0];
            for (l, &c) in widths.iter().enumerate() {
                let level = l + 1;
                for j in 0..config.nu {
                    let stride = if l > 0 && j == 0 { 2 } else { 1 };
                    let tag = format!("l{level}.block{}", j + 1);
                    k.conv(format!("{tag}.conv1"), Role::A, level, 0, s, prev, c, 1);
                    k.bn(format!("{tag}.bn1"), level, 0, c);
                    k.conv(format!("{tag}.conv2"), Role::B, level, 0, s, c, c, 1);
                    k.bn(format!("{tag}.bn2"), level, 0, c);
                    if stride != 1 || prev != c {
                        k.conv(format!("{tag}.shortcut"), Role::Shortcut, level, 0, 1, prev, c, 1);
                        k.bn(format!("{tag}.shortcut_bn"), level, 0, c);
                    }
                    prev = c;
                }
            }
        }
        Variant::Mgnet => {
            let nu = config.nu;
            for (l, &c) in widths.iter().enumerate() {
                let level = l + 1;
                let groups = c / config.group_size.unwrap_or(c);
                let zero = zero_start(l);
                let transition_follows = l + 1 < levels;
                // A^1 is needed unless the first step sees the zero state and no transition reads it.
                let first_a_used = !zero || transition_follows;
                let a_convs = match (config.sharing.share_a, nu) {
                    (true, 1) => usize::from(first_a_used),
                    (true, _) => 1,
                    (false, _) => nu - 1 + usize::from(first_a_used),
                };
                let b_convs = if config.sharing.share_b { 1 } else { nu };
                for i in 0..a_convs {
                    k.conv(format!("l{level}.A{}", i + 1), Role::A, level, 1, s, c, c, groups);
                }
                for i in 0..b_convs {
                    k.conv(format!("l{level}.B{}", i + 1), Role::B, level, 1, s, c, c, groups);
                }
                for i in 0..nu {
                    if !(i == 0 && zero) {
                        k.bn(format!("l{level}.step{}.A_bn", i + 1), level, 1, c);
                    }
                    k.bn(format!("l{level}.step{}.B_bn", i + 1), level, 1, c);
                }
                if transition_follows {
                    transition(&mut k, l);
                }
            }
        }
        Variant::Mgiad => {
            let gs = config.group_size.expect("validated");
            let ck = config.coarsest_channels.expect("validated");
            for (l, &top) in widths.iter().enumerate() {
                let level = l + 1;
                let rungs = ladder(top, ck);
                let depth = rungs.len();
                for (r, &c) in rungs.iter().enumerate() {
                    let kappa = r + 1;
                    let groups = if kappa == depth { 1 } else { c / gs };
                    k.conv(format!("l{level}.k{kappa}.A_hat"), Role::AHat, level, kappa, s, c, c, groups);
                    k.conv(format!("l{level}.k{kappa}.B_hat"), Role::BHat, level, kappa, s, c, c, groups);
                    let a_applications = config.eta_pre + config.eta_post
                        - usize::from(r == 0 && zero_start(l));
                    for i in 0..a_applications {
                        k.bn(format!("l{level}.k{kappa}.A_bn{}", i + 1), level, kappa, c);
                    }
                    for i in 0..config.eta_pre + config.eta_post {
                        k.bn(format!("l{level}.k{kappa}.B_bn{}", i + 1), level, kappa, c);
                    }
                    if kappa < depth {
                        let half = c / 2;
                        k.bn(format!("l{level}.k{kappa}.coarsen.A_bn"), level, kappa, c);
                        k.conv(format!("l{level}.k{kappa}.R_hat"), Role::RHat, level, kappa, 1, c, half, half);
                        k.conv(format!("l{level}.k{kappa}.Pi_hat"), Role::PiHat, level, kappa, 1, c, half, half);
                        k.bn(format!("l{level}.k{kappa}.coarsen.A_next_bn"), level, kappa + 1, half);
                        k.conv(format!("l{level}.k{kappa}.P_hat"), Role::PHat, level, kappa, 1, half, c, half);
                    }
                }
                if l + 1 < levels {
                    transition(&mut k, l);
                }
            }
        }
    }

    let c_last = widths[levels - 1];
    k.push("head.weight".into(), Role::Head, 0, 0, (config.num_classes * c_last) as u64);
    k.push("head.bias".into(), Role::Head, 0, 0, config.num_classes as u64);
    Ok(WeightBreakdown { records: k.records })
}
