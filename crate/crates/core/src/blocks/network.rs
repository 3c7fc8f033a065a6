use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Variant};
use super::hierarchy::ChannelHierarchy;
use super::layers::{
    resolution_step, sic_cycle, smooth, ChannelTransfer, Ctx, Layer, Mode, Rung, SicCycle, SmoothStep, SmoothingBlock,
    Transition,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{BnSlot, ConvSpec, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

/// What an operator is in the architecture; used for weight breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Stem,
    A,
    B,
    R,
    Pi,
    AHat,
    BHat,
    RHat,
    PHat,
    PiHat,
    Shortcut,
    Bn,
    Head,
}

impl Role {
    pub const ALL: [Role; 13] = [
        Role::Stem,
        Role::A,
        Role::B,
        Role::R,
        Role::Pi,
        Role::AHat,
        Role::BHat,
        Role::RHat,
        Role::PHat,
        Role::PiHat,
        Role::Shortcut,
        Role::Bn,
        Role::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Stem => "stem",
            Role::A => "A",
            Role::B => "B",
            Role::R => "R",
            Role::Pi => "Pi",
            Role::AHat => "A_hat",
            Role::BHat => "B_hat",
            Role::RHat => "R_hat",
            Role::PHat => "P_hat",
            Role::PiHat => "Pi_hat",
            Role::Shortcut => "shortcut",
            Role::Bn => "BN",
            Role::Head => "head",
        }
    }

    /// Convolutions that smooth within a level (A, B and their in-channel counterparts).
    pub fn is_smoother(self) -> bool {
        matches!(self, Role::A | Role::B | Role::AHat | Role::BHat)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Placement of a registered parameter. Levels are 1-based; 0 means not applicable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub role: Role,
    pub level: usize,
    pub kappa: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub conv1: Layer,
    pub conv2: ParamId,
    pub bn2: BnSlot,
    pub shortcut: Option<(ParamId, BnSlot)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Body {
    Resnet(Vec<Vec<BasicBlock>>),
    Mgnet {
        blocks: Vec<SmoothingBlock>,
        transitions: Vec<Transition>,
    },
    Mgiad {
        cycles: Vec<SicCycle>,
        transitions: Vec<Transition>,
    },
}

/// A built classifier: parameters, their placement, and the operator graph.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    meta: Vec<ParamMeta>,
    stem: Layer,
    body: Body,
    head: (ParamId, ParamId),
}

struct Builder<T> {
    store: ParamStore<T>,
    meta: Vec<ParamMeta>,
    rng: Rng,
}

/// Initial batch-norm scale of every smoothing update added to `u`.
///
/// With unit scale the many additive updates of a deep channel hierarchy sum to features
/// large enough that a single SGD step at lr 0.05 overshoots the logits by orders of magnitude.
pub const UPDATE_GAMMA: f64 = 0.1;

#[derive(Clone, Copy)]
enum Init {
    /// Normal with variance `2 / fan_out`, for convolutions followed by batch norm.
    FanOut,
    /// Normal with variance `1 / fan_in`, for unnormalized transfer operators.
    FanIn,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: String, meta: ParamMeta, spec: ConvSpec, init: Init) -> Result<ParamId> {
        let (kh, kw) = spec.kernel;
        let var = match init {
            Init::FanOut => 2.0 / (spec.out_per_group() * kh * kw) as f64,
            Init::FanIn => 1.0 / (spec.in_per_group() * kh * kw) as f64,
        };
        let normal = Normal::new(0.0, var.sqrt()).expect("positive std");
        let rng = &mut self.rng;
        let w = Tensor::from_fn(spec.weight_shape(), |_| T::of(normal.sample(rng)));
        let id = self.store.add_conv(name, spec, w)?;
        self.meta.push(meta);
        Ok(id)
    }

    fn bn(&mut self, name: &str, level: usize, kappa: usize, channels: usize) -> BnSlot {
        let slot = self.store.add_bn(name, channels);
        let m = ParamMeta {
            role: Role::Bn,
            level,
            kappa,
        };
        self.meta.push(m);
        self.meta.push(m);
        slot
    }

    fn layer(&mut self, conv: ParamId, name: &str, level: usize, kappa: usize) -> Result<Layer> {
        let channels = self.store.conv_spec(conv)?.out_channels;
        Ok(Layer {
            conv,
            bn: self.bn(name, level, kappa, channels),
        })
    }

    /// A layer whose output is added to `u`; its scale starts at [`UPDATE_GAMMA`].
    fn update_layer(&mut self, conv: ParamId, name: &str, level: usize, kappa: usize) -> Result<Layer> {
        let layer = self.layer(conv, name, level, kappa)?;
        self.store.value_mut(layer.bn.gamma).data_mut().iter_mut().for_each(|v| *v = T::of(UPDATE_GAMMA));
        Ok(layer)
    }

    fn smoothing_conv(&mut self, role: Role, level: usize, kappa: usize, c: usize, group: usize, s: usize, tag: &str) -> Result<ParamId> {
        let spec = ConvSpec::square(s, c, c, c / group, 1)?;
        self.conv(
            format!("l{level}.k{kappa}.{tag}"),
            ParamMeta { role, level, kappa },
            spec,
            Init::FanOut,
        )
    }

    /// `A_l`'s normalization, the strided `R` (and `Pi`, `A_{l+1}`'s normalization with FAS).
    fn transition(
        &mut self,
        level: usize,
        a_fine: ParamId,
        a_coarse: Option<ParamId>,
        cn: usize,
        s: usize,
        fas: bool,
    ) -> Result<Transition> {
        let c = self.store.conv_spec(a_fine)?.out_channels;
        let a_fine = self.layer(a_fine, &format!("l{level}.transfer.A_bn"), level, 0)?;
        let spec = ConvSpec::new((s, s), c, cn, gcd(c, cn), 2, (s / 2, s / 2))?;
        let meta = |role| ParamMeta { role, level, kappa: 0 };
        let restrict = self.conv(format!("l{level}.transfer.R"), meta(Role::R), spec, Init::FanIn)?;
        let (project, a_coarse) = if fas {
            let a_coarse = a_coarse.ok_or_else(|| Error::config("FAS transition needs the coarse level's A"))?;
            let p = self.conv(format!("l{level}.transfer.Pi"), meta(Role::Pi), spec, Init::FanIn)?;
            let a = self.layer(a_coarse, &format!("l{level}.transfer.A_next_bn"), level + 1, 1)?;
            (Some(p), Some(a))
        } else {
            (None, None)
        };
        Ok(Transition {
            a_fine,
            restrict,
            project,
            a_coarse,
        })
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds and initializes a network from `config`, drawing weights from the `init` stream of `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        meta: Vec::new(),
        rng: rng::stream(seed, "init"),
    };
    let s = config.kernel;
    let widths = config.level_channels();
    let stem_spec = ConvSpec::square(s, config.input_channels, widths[0], 1, 1)?;
    let stem_conv = b.conv(
        "stem.conv".into(),
        ParamMeta {
            role: Role::Stem,
            level: 1,
            kappa: 0,
        },
        stem_spec,
        Init::FanOut,
    )?;
    let stem = b.layer(stem_conv, "stem.bn", 1, 0)?;

    let body = match config.variant {
        Variant::Resnet => build_resnet(&mut b, config, &widths)?,
        Variant::Mgnet => build_mgnet(&mut b, config, &widths)?,
        Variant::Mgiad => build_mgiad(&mut b, config, &widths)?,
    };

    let c_last = *widths.last().expect("validated non-empty");
    let bound = 1.0 / (c_last as f64).sqrt();
    let normal = Normal::new(0.0, bound).expect("positive std");
    let rng = &mut b.rng;
    let w = Tensor::from_fn([config.num_classes, c_last], |_| T::of(normal.sample(rng)));
    let head_meta = ParamMeta {
        role: Role::Head,
        level: 0,
        kappa: 0,
    };
    let hw = b.store.add("head.weight", ParamKind::HeadWeight, w);
    b.meta.push(head_meta);
    let hb = b.store.add("head.bias", ParamKind::HeadBias, Tensor::zeros([config.num_classes]));
    b.meta.push(head_meta);

    debug_assert_eq!(b.meta.len(), b.store.len());
    Ok(Network {
        config: config.clone(),
        store: b.store,
        meta: b.meta,
        stem,
        body,
        head: (hw, hb),
    })
}

fn build_resnet<T: Scalar>(b: &mut Builder<T>, config: &ModelConfig, widths: &[usize]) -> Result<Body> {
    let s = config.kernel;
    let mut levels = Vec::with_capacity(widths.len());
    let mut prev = widths[0];
    for (l, &c) in widths.iter().enumerate() {
        let level = l + 1;
        let mut blocks = Vec::with_capacity(config.nu);
        for j in 0..config.nu {
            let stride = if l > 0 && j == 0 { 2 } else { 1 };
            let tag = format!("l{level}.block{}", j + 1);
            let meta = |role| ParamMeta { role, level, kappa: 0 };
            let spec1 = ConvSpec::square(s, prev, c, 1, stride)?;
            let conv1 = b.conv(format!("{tag}.conv1"), meta(Role::A), spec1, Init::FanOut)?;
            let conv1 = b.layer(conv1, &format!("{tag}.bn1"), level, 0)?;
            let conv2 = b.conv(format!("{tag}.conv2"), meta(Role::B), ConvSpec::square(s, c, c, 1, 1)?, Init::FanOut)?;
            let bn2 = b.bn(&format!("{tag}.bn2"), level, 0, c);
            let shortcut = if stride != 1 || prev != c {
                let spec = ConvSpec::new((1, 1), prev, c, 1, stride, (0, 0))?;
                let conv = b.conv(format!("{tag}.shortcut"), meta(Role::Shortcut), spec, Init::FanOut)?;
                Some((conv, b.bn(&format!("{tag}.shortcut_bn"), level, 0, c)))
            } else {
                None
            };
            blocks.push(BasicBlock {
                conv1,
                conv2,
                bn2,
                shortcut,
            });
            prev = c;
        }
        levels.push(blocks);
    }
    Ok(Body::Resnet(levels))
}

/// Whether the state entering `level` (0-based) is the zero map.
fn starts_at_zero(config: &ModelConfig, level: usize) -> bool {
    level == 0 || !config.fas
}

fn build_mgnet<T: Scalar>(b: &mut Builder<T>, config: &ModelConfig, widths: &[usize]) -> Result<Body> {
    let s = config.kernel;
    let nu = config.nu;
    let levels = widths.len();
    // Phase one: smoothing convolutions of every level.
    let mut a_ids: Vec<Vec<Option<ParamId>>> = Vec::with_capacity(levels);
    let mut b_ids: Vec<Vec<ParamId>> = Vec::with_capacity(levels);
    for (l, &c) in widths.iter().enumerate() {
        let level = l + 1;
        let group = config.group_size.unwrap_or(c);
        let zero = starts_at_zero(config, l);
        let has_transition = l + 1 < levels;
        let a_row = if config.sharing.share_a {
            let used = nu > 1 || !zero || has_transition;
            let id = if used {
                Some(b.smoothing_conv(Role::A, level, 1, c, group, s, "A")?)
            } else {
                None
            };
            vec![id; nu]
        } else {
            let mut row = Vec::with_capacity(nu);
            for i in 0..nu {
                let used = i > 0 || !zero || has_transition;
                row.push(if used {
                    Some(b.smoothing_conv(Role::A, level, 1, c, group, s, &format!("A{}", i + 1))?)
                } else {
                    None
                });
            }
            row
        };
        let b_row = if config.sharing.share_b {
            vec![b.smoothing_conv(Role::B, level, 1, c, group, s, "B")?; nu]
        } else {
            (0..nu)
                .map(|i| b.smoothing_conv(Role::B, level, 1, c, group, s, &format!("B{}", i + 1)))
                .collect::<Result<_>>()?
        };
        a_ids.push(a_row);
        b_ids.push(b_row);
    }
    // Phase two: per-application normalizations and transfers.
    let mut blocks = Vec::with_capacity(levels);
    let mut transitions = Vec::with_capacity(levels.saturating_sub(1));
    for l in 0..levels {
        let level = l + 1;
        let mut steps = Vec::with_capacity(nu);
        for i in 0..nu {
            let elide = i == 0 && starts_at_zero(config, l);
            let a = match (elide, a_ids[l][i]) {
                (false, Some(id)) => Some(b.layer(id, &format!("l{level}.step{}.A_bn", i + 1), level, 1)?),
                _ => None,
            };
            let bl = b.update_layer(b_ids[l][i], &format!("l{level}.step{}.B_bn", i + 1), level, 1)?;
            steps.push(SmoothStep { a, b: bl });
        }
        blocks.push(SmoothingBlock { steps });
        if l + 1 < levels {
            let a_fine = a_ids[l][0].expect("A_1 exists when a transition follows");
            transitions.push(b.transition(level, a_fine, a_ids[l + 1][0], widths[l + 1], s, config.fas)?);
        }
    }
    Ok(Body::Mgnet { blocks, transitions })
}

fn build_mgiad<T: Scalar>(b: &mut Builder<T>, config: &ModelConfig, widths: &[usize]) -> Result<Body> {
    let s = config.kernel;
    let h = ChannelHierarchy::from_config(config)?;
    let levels = widths.len();
    let mut convs: Vec<Vec<(ParamId, ParamId)>> = Vec::with_capacity(levels);
    for l in 0..levels {
        let level = l + 1;
        let mut row = Vec::new();
        for (k, &c) in h.ladders[l].iter().enumerate() {
            let kappa = k + 1;
            let g = h.group_width(l, k);
            let a = b.smoothing_conv(Role::AHat, level, kappa, c, g, s, "A_hat")?;
            let bb = b.smoothing_conv(Role::BHat, level, kappa, c, g, s, "B_hat")?;
            row.push((a, bb));
        }
        convs.push(row);
    }
    let mut cycles = Vec::with_capacity(levels);
    let mut transitions = Vec::with_capacity(levels.saturating_sub(1));
    for l in 0..levels {
        let level = l + 1;
        let ladder = &h.ladders[l];
        // Rungs are assembled in cycle order so that normalizations are registered as they are applied.
        let mut pres = Vec::with_capacity(ladder.len());
        let mut transfers = Vec::with_capacity(ladder.len());
        for (k, &c) in ladder.iter().enumerate() {
            let kappa = k + 1;
            let (a, bb) = convs[l][k];
            let mut pre = Vec::with_capacity(config.eta_pre);
            for i in 0..config.eta_pre {
                let elide = i == 0 && k == 0 && starts_at_zero(config, l);
                let al = if elide {
                    None
                } else {
                    Some(b.layer(a, &format!("l{level}.k{kappa}.pre{}.A_bn", i + 1), level, kappa)?)
                };
                let bl = b.update_layer(bb, &format!("l{level}.k{kappa}.pre{}.B_bn", i + 1), level, kappa)?;
                pre.push(SmoothStep { a: al, b: bl });
            }
            pres.push(SmoothingBlock { steps: pre });
            if k + 1 < ladder.len() {
                let a_fine = b.layer(a, &format!("l{level}.k{kappa}.coarsen.A_bn"), level, kappa)?;
                let half = c / 2;
                let down = ConvSpec::new((1, 1), c, half, half, 1, (0, 0))?;
                let up = ConvSpec::new((1, 1), half, c, half, 1, (0, 0))?;
                let meta = |role| ParamMeta { role, level, kappa };
                let restrict = b.conv(format!("l{level}.k{kappa}.R_hat"), meta(Role::RHat), down, Init::FanIn)?;
                let project = b.conv(format!("l{level}.k{kappa}.Pi_hat"), meta(Role::PiHat), down, Init::FanIn)?;
                let a_coarse = b.layer(convs[l][k + 1].0, &format!("l{level}.k{kappa}.coarsen.A_next_bn"), level, kappa + 1)?;
                let prolong = b.conv(format!("l{level}.k{kappa}.P_hat"), meta(Role::PHat), up, Init::FanIn)?;
                transfers.push(Some(ChannelTransfer {
                    a_fine,
                    restrict,
                    project,
                    a_coarse,
                    prolong,
                }));
            } else {
                transfers.push(None);
            }
        }
        let mut rungs = Vec::with_capacity(ladder.len());
        let mut posts = Vec::with_capacity(ladder.len());
        for k in (0..ladder.len()).rev() {
            let kappa = k + 1;
            let (a, bb) = convs[l][k];
            let mut post = Vec::with_capacity(config.eta_post);
            for i in 0..config.eta_post {
                let al = b.layer(a, &format!("l{level}.k{kappa}.post{}.A_bn", i + 1), level, kappa)?;
                let bl = b.update_layer(bb, &format!("l{level}.k{kappa}.post{}.B_bn", i + 1), level, kappa)?;
                post.push(SmoothStep { a: Some(al), b: bl });
            }
            posts.push(SmoothingBlock { steps: post });
        }
        posts.reverse();
        for ((pre, post), coarsen) in pres.into_iter().zip(posts).zip(transfers) {
            rungs.push(Rung { pre, post, coarsen });
        }
        cycles.push(SicCycle { rungs });
        if l + 1 < levels {
            transitions.push(b.transition(level, convs[l][0].0, Some(convs[l + 1][0].0), widths[l + 1], s, config.fas)?);
        }
    }
    Ok(Body::Mgiad { cycles, transitions })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Placement of every registered parameter, indexed like the store.
    pub fn meta(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        self.head
    }

    /// Records a forward pass of `images` `(b, m, n, input_channels)` and returns the class scores.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<Var> {
        let mut ctx = Ctx::new(&self.store, tape, mode);
        self.forward_ctx(&mut ctx, images)
    }

    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let [_, _, _, c] = ctx.tape.value(images).dims4()?;
        if c != self.config.input_channels {
            return Err(Error::config(format!(
                "input has {c} channels, model expects {}",
                self.config.input_channels
            )));
        }
        let f = ctx.layer(&self.stem, images)?;
        let u = match &self.body {
            Body::Resnet(levels) => {
                let mut x = f;
                for block in levels.iter().flatten() {
                    let y = ctx.layer(&block.conv1, x)?;
                    let y = ctx.conv_bn(block.conv2, block.bn2, y)?;
                    let sc = match block.shortcut {
                        Some((conv, bn)) => ctx.conv_bn(conv, bn, x)?,
                        None => x,
                    };
                    let sum = ctx.tape.add(y, sc)?;
                    x = ctx.relu(sum);
                }
                x
            }
            Body::Mgnet { blocks, transitions } => {
                let (mut u, mut f) = (None, f);
                for (l, block) in blocks.iter().enumerate() {
                    u = smooth(ctx, u, f, block)?;
                    if let Some(t) = transitions.get(l) {
                        (u, f) = resolution_step(ctx, u, f, t, self.config.fas)?;
                    }
                }
                u.ok_or_else(|| Error::config("network produced no state"))?
            }
            Body::Mgiad { cycles, transitions } => {
                let (mut u, mut f) = (None, f);
                for (l, cycle) in cycles.iter().enumerate() {
                    u = sic_cycle(ctx, f, u, cycle, 0)?;
                    if let Some(t) = transitions.get(l) {
                        (u, f) = resolution_step(ctx, u, f, t, self.config.fas)?;
                    }
                }
                u.ok_or_else(|| Error::config("network produced no state"))?
            }
        };
        let pooled = ctx.tape.global_avg_pool(u)?;
        ctx.tape.linear(ctx.store, pooled, self.head.0, self.head.1)
    }

    /// Eval-mode class scores without keeping the tape.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let y = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Same architecture with parameters and running statistics converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            meta: self.meta.clone(),
            stem: self.stem,
            body: self.body.clone(),
            head: self.head,
        }
    }

    /// In-channel V-cycles per level (mgiad only).
    pub fn cycles(&self) -> Option<&[SicCycle]> {
        match &self.body {
            Body::Mgiad { cycles, .. } => Some(cycles),
            _ => None,
        }
    }
}
