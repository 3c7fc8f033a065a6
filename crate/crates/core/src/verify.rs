//! Self-check suites run by `mgiad verify`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{build_model, ladder, Mode, ModelConfig, Network, Role, SharingPolicy, Variant};
use crate::complexity::count_weights;
use crate::error::{Error, Result};
use crate::oracle::{poisson_blocks, sic_check, smoothing_check, coarsening_check, GridHierarchy, measure_contraction, PoissonProblem};
use crate::rng;
use crate::tensor::{conv2d, conv_as_matrix, ConvOperator, ConvSpec, Tape, Tensor, DEFAULT_MATRIX_BOUND};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        CheckLine {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    /// Passes when `measured == expected` exactly.
    pub fn exact(name: impl Into<String>, measured: f64, expected: f64) -> Self {
        CheckLine {
            name: name.into(),
            measured,
            tolerance: expected,
            passed: measured == expected,
        }
    }

    pub fn render(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}: measured {:e} (tolerance {:e})", self.name, self.measured, self.tolerance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(|l| l.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!("[{}] {}\n", self.suite, l.render()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Matrix,
    Sharing,
    Hierarchy,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "matrix" => Ok(Suite::Matrix),
            "sharing" => Ok(Suite::Sharing),
            "hierarchy" => Ok(Suite::Hierarchy),
            other => Err(Error::config(format!(
                "unknown suite {other:?} (expected gradcheck, matrix, sharing or hierarchy)"
            ))),
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let (name, lines) = match suite {
        Suite::Gradcheck => ("gradcheck", gradcheck_suite(seed)?),
        Suite::Matrix => ("matrix", matrix_suite(seed, 64)?),
        Suite::Sharing => ("sharing", sharing_suite(seed)?),
        Suite::Hierarchy => ("hierarchy", hierarchy_suite(seed)?),
    };
    Ok(SuiteReport {
        suite: name.into(),
        lines,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

/// Two resolution levels, two channel levels each, under 5k parameters.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        channels: vec![8, 8],
        num_classes: 3,
        input_channels: 2,
        input_size: 4,
        ..ModelConfig::mgiad(4, 4, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub max_rel_error: f64,
    /// `(parameter name, element)` of the largest error.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Denominator floor of the relative error, so that vanishing gradients compare absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Central finite differences of the training-mode cross-entropy against reverse mode, for every
/// parameter element.
pub fn gradcheck(config: &ModelConfig, seed: u64, batch: usize, step: f64) -> Result<GradcheckResult> {
    let mut net = build_model::<f64>(config, seed)?;
    let size = config.input_size;
    let mut r = rng::stream(seed, "gradcheck.input");
    let x = Tensor::from_fn([batch, size, size, config.input_channels], |_| StandardNormal.sample(&mut r));
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..config.num_classes)).collect();
    let loss_of = |net: &Network<f64>| -> Result<(f64, Tape<f64>, crate::tensor::Var)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let logits = net.forward(&mut tape, xv, Mode::Train)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        Ok((tape.value(loss).data()[0], tape, loss))
    };
    let (_, tape, loss) = loss_of(&net)?;
    let grads = tape.backward(loss, net.store().len())?;
    let ids: Vec<_> = net.store().iter().map(|(id, _)| id).collect();
    let mut result = GradcheckResult {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for id in ids {
        let analytic = grads.get_or_zero(net.store(), id);
        for i in 0..analytic.len() {
            let orig = net.store().value(id).data()[i];
            net.store_mut().value_mut(id).data_mut()[i] = orig + step;
            let plus = loss_of(&net)?.0;
            net.store_mut().value_mut(id).data_mut()[i] = orig - step;
            let minus = loss_of(&net)?.0;
            net.store_mut().value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRADCHECK_FLOOR);
            if rel > result.max_rel_error || !rel.is_finite() {
                result.max_rel_error = rel;
                result.worst = (net.store().get(id).name.clone(), i);
            }
            result.checked += 1;
        }
    }
    Ok(result)
}

fn gradcheck_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let toy = gradcheck_model();
    let g = gradcheck(&toy, seed, 4, 1e-5)?;
    lines.push(CheckLine::at_most(
        format!("mgiad toy ({} params), worst {}[{}]", g.checked, g.worst.0, g.worst.1),
        g.max_rel_error,
        1e-5,
    ));
    let shared = ModelConfig {
        variant: Variant::Mgnet,
        nu: 2,
        group_size: Some(4),
        coarsest_channels: None,
        sharing: SharingPolicy::AB,
        ..gradcheck_model()
    };
    let g = gradcheck(&shared, seed, 4, 1e-5)?;
    lines.push(CheckLine::at_most(
        format!("shared mgnet toy ({} params), worst {}[{}]", g.checked, g.worst.0, g.worst.1),
        g.max_rel_error,
        1e-5,
    ));
    Ok(lines)
}

// ---------------------------------------------------------------------------
// Convolution against its explicit matrix

/// A random operator from one of four families, cycling dense, grouped, depthwise and strided.
pub fn random_operator(seed: u64, index: usize) -> Result<(ConvOperator<f64>, (usize, usize, usize))> {
    let mut r = rng::stream(seed, &format!("matrix.op{index}"));
    let groups = [1usize, 2, 3, 4][r.random_range(0..4)];
    let per_in = r.random_range(1..=3);
    let per_out = r.random_range(1..=3);
    let (cin, cout, groups, stride) = match index % 4 {
        0 => (per_in, per_out, 1, 1),
        1 => (groups * per_in, groups * per_out, groups, 1),
        2 => (groups * per_out, groups * per_out, groups * per_out, 1),
        _ => (groups * per_in, groups * per_out, groups, 2),
    };
    let kh = [1usize, 3, 5][r.random_range(0..3)];
    let kw = [1usize, 3][r.random_range(0..2)];
    let padding = (r.random_range(0..=kh / 2), r.random_range(0..=kw / 2));
    let spec = ConvSpec::new((kh, kw), cin, cout, groups, stride, padding)?;
    let weights = Tensor::from_fn(spec.weight_shape(), |_| StandardNormal.sample(&mut r));
    let m = r.random_range(kh.max(2)..=6);
    let n = r.random_range(kw.max(2)..=6);
    Ok((ConvOperator::new(spec, weights)?, (m, n, cin)))
}

/// Largest entry of the matrix that lies outside the block-diagonal group pattern.
pub fn off_block_max(op: &ConvOperator<f64>, shape: (usize, usize, usize)) -> Result<f64> {
    let mat = conv_as_matrix(op, shape, DEFAULT_MATRIX_BOUND)?;
    let (cin, cout) = (op.spec.in_channels, op.spec.out_channels);
    let (ig, og) = (op.spec.in_per_group(), op.spec.out_per_group());
    let mut worst = 0.0f64;
    for row in 0..mat.nrows() {
        for col in 0..mat.ncols() {
            if (row % cout) / og != (col % cin) / ig {
                worst = worst.max(mat[(row, col)].abs());
            }
        }
    }
    Ok(worst)
}

fn matrix_suite(seed: u64, count: usize) -> Result<Vec<CheckLine>> {
    let (mut agree, mut lin, mut zeros) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..count {
        let (op, (m, n, c)) = random_operator(seed, i)?;
        let mut r = rng::stream(seed, &format!("matrix.input{i}"));
        let x = Tensor::from_fn([2, m, n, c], |_| StandardNormal.sample(&mut r));
        let y = Tensor::from_fn([2, m, n, c], |_| StandardNormal.sample(&mut r));
        let cx = conv2d(&x, &op.spec, &op.weights)?;
        let mat = conv_as_matrix(&op, (m, n, c), DEFAULT_MATRIX_BOUND)?;
        let per = m * n * c;
        let out_per = cx.len() / 2;
        for s in 0..2 {
            let v = nalgebra::DVector::from_column_slice(&x.data()[s * per..(s + 1) * per]);
            let mv = &mat * v;
            for (a, b) in mv.iter().zip(&cx.data()[s * out_per..(s + 1) * out_per]) {
                agree = agree.max((a - b).abs());
            }
        }
        let (alpha, beta) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mut combo = x.scale(alpha);
        combo.axpy(beta, &y);
        let lhs = conv2d(&combo, &op.spec, &op.weights)?;
        let mut rhs = cx.scale(alpha);
        rhs.axpy(beta, &conv2d(&y, &op.spec, &op.weights)?);
        lin = lin.max(lhs.max_abs_diff(&rhs));
        zeros = zeros.max(off_block_max(&op, (m, n, c))?);
    }
    Ok(vec![
        CheckLine::at_most(format!("conv2d vs conv_as_matrix over {count} operators"), agree, 1e-12),
        CheckLine::at_most("linearity", lin, 1e-12),
        CheckLine::exact("off-group matrix entries", zeros, 0.0),
    ])
}

// ---------------------------------------------------------------------------
// Weight sharing

fn conv_weights(cfg: &ModelConfig, roles: &[Role]) -> Result<u64> {
    Ok(count_weights(cfg)?.sum_where(|r| roles.contains(&r.role)))
}

fn sharing_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let level = |variant, sharing| ModelConfig {
        variant,
        channels: vec![16],
        nu: 2,
        sharing,
        group_size: None,
        coarsest_channels: None,
        fas: false,
        ..ModelConfig::mgnet3()
    };
    let resnet = conv_weights(&level(Variant::Resnet, SharingPolicy::NONE), &[Role::A, Role::B])? as f64;
    let ab = conv_weights(&level(Variant::Mgnet, SharingPolicy::AB), &[Role::A, Role::B])? as f64;
    let a = conv_weights(&level(Variant::Mgnet, SharingPolicy::A), &[Role::A, Role::B])? as f64;
    // Shared operators occupy one registry slot each on the built model.
    let net = build_model::<f32>(&ModelConfig { nu: 3, ..mgnet_fas() }, seed)?;
    let smoother_slots = net.meta().iter().filter(|m| matches!(m.role, Role::A | Role::B)).count() as f64;
    Ok(vec![
        CheckLine::exact("mgnet-AB / resnet conv weights on a 2-block level", ab / resnet, 0.5),
        CheckLine::exact("mgnet-A / resnet conv weights on a 2-block level", a / resnet, 0.75),
        CheckLine::exact("registry slots of shared A and B over 2 fas levels", smoother_slots, 4.0),
    ])
}

fn mgnet_fas() -> ModelConfig {
    ModelConfig {
        channels: vec![8, 16],
        fas: true,
        input_size: 8,
        ..ModelConfig::mgnet3()
    }
}

// ---------------------------------------------------------------------------
// Channel and resolution hierarchies

fn hierarchy_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();

    // Ladder rungs halve down to c_K, and the registry counts match the closed form.
    let mut ladder_bad = 0.0;
    for (c, ck) in [(64, 4), (256, 64), (192, 64), (16, 16), (48, 3)] {
        let r = ladder(c, ck);
        let last = *r.last().unwrap();
        let halving = r.windows(2).all(|w| w[1] * 2 == w[0]);
        let stops = last >= ck && (last / 2 < ck || last % 2 == 1);
        if !(r[0] == c && halving && stops) {
            ladder_bad += 1.0;
        }
    }
    lines.push(CheckLine::exact("malformed channel ladders", ladder_bad, 0.0));

    let mut mismatches = 0.0;
    for cfg in [
        ModelConfig::mgiad(64, 4, 1),
        ModelConfig::mgiad(4, 4, 1),
        ModelConfig::mgiad(64, 8, 3),
        ModelConfig::mgnet4(),
        ModelConfig::resnet20(),
    ] {
        let net = build_model::<f32>(&cfg, seed)?;
        if count_weights(&cfg)?.total() != net.param_count() as u64 {
            mismatches += 1.0;
        }
    }
    lines.push(CheckLine::exact("closed form vs registry mismatches", mismatches, 0.0));

    // g_s = c = c_K collapses the hierarchy to shared MgNet.
    let mgiad = ModelConfig {
        channels: vec![8, 8],
        input_size: 8,
        eta_pre: 1,
        eta_post: 1,
        ..ModelConfig::mgiad(8, 8, 1)
    };
    let mgnet = ModelConfig {
        variant: Variant::Mgnet,
        nu: 2,
        group_size: None,
        coarsest_channels: None,
        ..mgiad.clone()
    };
    let (a, b) = (build_model::<f64>(&mgiad, seed)?, build_model::<f64>(&mgnet, seed)?);
    lines.push(CheckLine::exact(
        "degenerate mgiad minus mgnet parameter count",
        a.param_count() as f64 - b.param_count() as f64,
        0.0,
    ));
    let mut r = rng::stream(seed, "hierarchy.images");
    let x = Tensor::from_fn([2, 8, 8, 3], |_| StandardNormal.sample(&mut r));
    lines.push(CheckLine::at_most(
        "degenerate mgiad vs mgnet outputs",
        a.predict(&x)?.max_abs_diff(&b.predict(&x)?),
        1e-12,
    ));

    // Linear mode against the Poisson oracle.
    let omega = 2.0 / 3.0;
    let h = GridHierarchy::poisson(1, 31, 3)?;
    let f = nalgebra::DVector::from_fn(31, |i, _| ((i * 7 % 11) as f64 - 5.0) / 5.0);
    let blocks = poisson_blocks(&h, omega, 2, true)?;
    lines.push(CheckLine::at_most(
        "linear smoothing vs jacobi",
        smoothing_check(&blocks, &h, &f, omega, 1e-10)?.max_abs_diff(),
        1e-10,
    ));
    lines.push(CheckLine::at_most(
        "linear fas coarsening vs oracle chain",
        coarsening_check(&blocks, &h, &f, omega, 1e-10)?.max_abs_diff(),
        1e-10,
    ));
    let cfg = ModelConfig {
        channels: vec![4],
        input_channels: 1,
        input_size: 3,
        ..ModelConfig::mgiad(2, 2, 1)
    };
    let mut net = build_model::<f64>(&cfg, seed)?;
    net.store_mut().freeze();
    let cycle = &net.cycles().expect("mgiad has cycles")[0];
    let f = Tensor::from_fn([2, 3, 3, 4], |_| StandardNormal.sample(&mut r));
    lines.push(CheckLine::at_most(
        "two-rung sic cycle vs assembled matrix",
        sic_check(net.store(), cycle, &f, 1e-12)?.max_abs_diff(),
        1e-12,
    ));
    let problem = PoissonProblem::random(1, 63, seed)?;
    let rep = measure_contraction(&problem, 5, omega, 1, 1, 12)?;
    lines.push(CheckLine::at_most("poisson1d n=63 5-level v-cycle contraction", rep.contraction, 0.2));
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_is_small_and_two_level() {
        let cfg = gradcheck_model();
        let net = build_model::<f64>(&cfg, 0).unwrap();
        assert!(net.param_count() <= 5000, "{}", net.param_count());
        let cycles = net.cycles().unwrap();
        assert_eq!(cycles.len(), 2);
        assert!(cycles.iter().all(|c| c.rungs.len() == 2));
    }

    #[test]
    fn coarse_step_is_detected() {
        // Truncation error of a 0.1 step is far above the tolerance.
        let g = gradcheck(&gradcheck_model(), 1, 2, 1e-1).unwrap();
        assert!(g.max_rel_error > 1e-5);
    }

    #[test]
    fn operator_families_cover_every_case() {
        let specs: Vec<_> = (0..8).map(|i| random_operator(3, i).unwrap().0.spec).collect();
        assert!(specs.iter().any(|s| s.groups == 1 && s.stride == 1));
        assert!(specs.iter().any(|s| s.groups > 1 && s.groups < s.in_channels));
        assert!(specs.iter().any(|s| s.groups == s.in_channels && s.in_channels > 1));
        assert!(specs.iter().any(|s| s.stride == 2));
    }

    #[test]
    fn sharing_and_matrix_suites_pass() {
        for suite in [Suite::Sharing, Suite::Matrix] {
            let rep = run_suite(suite, 0).unwrap();
            assert!(rep.passed(), "{}", rep.render());
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("hierarchy".parse::<Suite>().unwrap(), Suite::Hierarchy);
        assert!("speed".parse::<Suite>().is_err());
    }
}
