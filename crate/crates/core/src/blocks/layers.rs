use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnSlot, ParamId, ParamStore, Scalar, Tape, Var};

/// How a forward pass treats normalization and activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, BN then ReLU after every smoothing conv.
    Train,
    /// Running statistics, BN then ReLU after every smoothing conv.
    Eval,
    /// Identity activations and no normalization: every block is a linear map.
    Linear,
}

impl Mode {
    fn bn_mode(self) -> Option<BnMode> {
        match self {
            Mode::Train => Some(BnMode::Train),
            Mode::Eval => Some(BnMode::Eval),
            Mode::Linear => None,
        }
    }
}

/// A convolution followed by its own batch norm and a ReLU (both skipped in linear mode).
/// Several layers may reference one convolution; each still owns its batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub conv: ParamId,
    pub bn: BnSlot,
}

/// Forward-pass context: parameters, tape and mode.
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub tape: &'a mut Tape<T>,
    pub mode: Mode,
    /// Channel width of every in-channel smoothing phase, consecutive repeats collapsed.
    pub trace: Vec<usize>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, tape: &'a mut Tape<T>, mode: Mode) -> Self {
        Ctx {
            store,
            tape,
            mode,
            trace: Vec::new(),
        }
    }

    /// `relu(bn(conv(x)))`, or `conv(x)` in linear mode.
    pub fn layer(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        let y = self.tape.conv(self.store, x, layer.conv)?;
        self.normalize_activate(layer.bn, y, true)
    }

    /// `bn(conv(x))` without activation, or `conv(x)` in linear mode.
    pub fn conv_bn(&mut self, conv: ParamId, bn: BnSlot, x: Var) -> Result<Var> {
        let y = self.tape.conv(self.store, x, conv)?;
        self.normalize_activate(bn, y, false)
    }

    /// Bare convolution; used for grid and channel transfers.
    pub fn conv(&mut self, conv: ParamId, x: Var) -> Result<Var> {
        self.tape.conv(self.store, x, conv)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        match self.mode {
            Mode::Linear => x,
            _ => self.tape.relu(x),
        }
    }

    fn normalize_activate(&mut self, bn: BnSlot, y: Var, activate: bool) -> Result<Var> {
        match self.mode.bn_mode() {
            None => Ok(y),
            Some(m) => {
                let z = self.tape.batch_norm(self.store, y, bn, m)?;
                Ok(if activate { self.tape.relu(z) } else { z })
            }
        }
    }

    fn record(&mut self, channels: usize) {
        if self.trace.last() != Some(&channels) {
            self.trace.push(channels);
        }
    }

    fn channels(&self, v: Var) -> usize {
        *self.tape.value(v).shape().last().unwrap_or(&0)
    }
}

/// One smoothing update `u <- u + B(f - A(u))`. `a` is `None` only where `u` is known to be zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoothStep {
    pub a: Option<Layer>,
    pub b: Layer,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SmoothingBlock {
    pub steps: Vec<SmoothStep>,
}

/// Runs every step of `block`. `u = None` stands for the zero feature map.
pub fn smooth<T: Scalar>(ctx: &mut Ctx<'_, T>, u: Option<Var>, f: Var, block: &SmoothingBlock) -> Result<Option<Var>> {
    let mut u = u;
    for step in &block.steps {
        let r = match (u, step.a) {
            (None, _) => f,
            (Some(u), Some(a)) => {
                let au = ctx.layer(&a, u)?;
                check_same_channels(ctx, f, au, "f", "A(u)")?;
                ctx.tape.sub(f, au)?
            }
            (Some(_), None) => {
                return Err(Error::config(
                    "smoothing step without A applied to a nonzero state",
                ))
            }
        };
        let update = ctx.layer(&step.b, r)?;
        u = Some(match u {
            None => update,
            Some(u) => {
                check_same_channels(ctx, u, update, "u", "B(r)")?;
                ctx.tape.add(u, update)?
            }
        });
    }
    Ok(u)
}

fn check_same_channels<T: Scalar>(ctx: &Ctx<'_, T>, a: Var, b: Var, na: &str, nb: &str) -> Result<()> {
    let (ca, cb) = (ctx.channels(a), ctx.channels(b));
    if ca != cb {
        return Err(Error::config(format!("{na} has {ca} channels but {nb} has {cb}")));
    }
    Ok(())
}

/// Operators moving `(u, f)` from one resolution level to the next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    /// Fine-level `A_l` with its own batch norm.
    pub a_fine: Layer,
    pub restrict: ParamId,
    /// FAS projection and coarse `A_{l+1}`; absent without FAS.
    pub project: Option<ParamId>,
    pub a_coarse: Option<Layer>,
}

/// `f' = R(f - A u)` and `u' = 0`, or with FAS `u' = Pi u`, `f' = R(f - A u) + A'(u')`.
/// A `None` state is the zero feature map.
pub fn resolution_step<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    u: Option<Var>,
    f: Var,
    t: &Transition,
    fas: bool,
) -> Result<(Option<Var>, Var)> {
    let residual = match u {
        None => f,
        Some(u) => {
            let au = ctx.layer(&t.a_fine, u)?;
            ctx.tape.sub(f, au)?
        }
    };
    let f_coarse = ctx.conv(t.restrict, residual)?;
    if !fas {
        return Ok((None, f_coarse));
    }
    let (project, a_coarse) = match (t.project, t.a_coarse) {
        (Some(p), Some(a)) => (p, a),
        _ => return Err(Error::config("FAS step needs a projection and a coarse A")),
    };
    let Some(u) = u else {
        return Ok((None, f_coarse));
    };
    let u_coarse = ctx.conv(project, u)?;
    let au = ctx.layer(&a_coarse, u_coarse)?;
    let f_coarse = ctx.tape.add(f_coarse, au)?;
    Ok((Some(u_coarse), f_coarse))
}

/// Channel-halving operators between rung `kappa` and `kappa + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelTransfer {
    pub a_fine: Layer,
    pub restrict: ParamId,
    pub project: ParamId,
    pub a_coarse: Layer,
    pub prolong: ParamId,
}

/// One channel level of an in-channel V-cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rung {
    pub pre: SmoothingBlock,
    pub post: SmoothingBlock,
    /// `None` on the coarsest rung.
    pub coarsen: Option<ChannelTransfer>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SicCycle {
    pub rungs: Vec<Rung>,
}

/// In-channel V-cycle starting at rung `kappa` (0-based).
pub fn sic_cycle<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    f: Var,
    u: Option<Var>,
    cycle: &SicCycle,
    kappa: usize,
) -> Result<Option<Var>> {
    let rung = cycle.rungs.get(kappa).ok_or_else(|| {
        Error::config(format!(
            "channel level {} requested from a cycle of depth {}",
            kappa + 1,
            cycle.rungs.len()
        ))
    })?;
    ctx.record(ctx.channels(f));
    let mut u = smooth(ctx, u, f, &rung.pre)?;
    if let Some(t) = &rung.coarsen {
        let (u_coarse, f_coarse) = match u {
            None => (None, ctx.conv(t.restrict, f)?),
            Some(uv) => {
                let au = ctx.layer(&t.a_fine, uv)?;
                let r = ctx.tape.sub(f, au)?;
                let f_c = ctx.conv(t.restrict, r)?;
                let u_c = ctx.conv(t.project, uv)?;
                let au_c = ctx.layer(&t.a_coarse, u_c)?;
                (Some(u_c), ctx.tape.add(f_c, au_c)?)
            }
        };
        let coarse = sic_cycle(ctx, f_coarse, u_coarse, cycle, kappa + 1)?;
        ctx.record(ctx.channels(f));
        if let Some(c) = coarse {
            let correction = ctx.conv(t.prolong, c)?;
            u = Some(match u {
                None => correction,
                Some(uv) => ctx.tape.add(uv, correction)?,
            });
        }
    }
    smooth(ctx, u, f, &rung.post)
}
