use nalgebra::{DMatrix, DVector};

use super::poisson::{jacobi_smooth, spacing, GridHierarchy};
use crate::blocks::{resolution_step, sic_cycle, smooth, Ctx, Layer, Mode, SicCycle, SmoothStep, SmoothingBlock, Transition};
use crate::error::{Error, Result};
use crate::tensor::{conv_as_matrix, ConvOperator, ConvSpec, ParamId, ParamStore, Tape, Tensor, DEFAULT_MATRIX_BOUND};

/// One compared quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub label: String,
    /// Residual norm (smoothing) or value norm (everything else) on the oracle side.
    pub oracle_norm: f64,
    pub blocks_norm: f64,
    pub max_abs_diff: f64,
    /// Entry with the largest deviation: `(index, oracle, blocks)`.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceReport {
    pub check: String,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl CorrespondenceReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.max_abs_diff <= self.tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,quantity,oracle_norm,blocks_norm,max_abs_diff\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                self.check, r.label, r.oracle_norm, r.blocks_norm, r.max_abs_diff
            ));
        }
        out
    }

    /// One line per quantity outside the tolerance; empty when the check passed.
    pub fn diff_report(&self) -> String {
        let mut out = String::new();
        for r in self.rows.iter().filter(|r| r.max_abs_diff > self.tolerance) {
            let (i, a, b) = r.worst.unwrap_or((0, f64::NAN, f64::NAN));
            out.push_str(&format!(
                "{} {}: entry {i} oracle {a:e} blocks {b:e} (|diff| {:e} > {:e})\n",
                self.check, r.label, r.max_abs_diff, self.tolerance
            ));
        }
        out
    }
}

fn compare(label: String, oracle: &[f64], blocks: &[f64], norms: (f64, f64)) -> CheckRow {
    if oracle.len() != blocks.len() {
        return CheckRow {
            label,
            oracle_norm: norms.0,
            blocks_norm: norms.1,
            max_abs_diff: f64::INFINITY,
            worst: None,
        };
    }
    let mut worst = None;
    let mut max = 0.0;
    for (i, (&a, &b)) in oracle.iter().zip(blocks).enumerate() {
        let d = (a - b).abs();
        if d > max || d.is_nan() {
            max = if d.is_nan() { f64::INFINITY } else { d };
            worst = Some((i, a, b));
        }
    }
    CheckRow {
        label,
        oracle_norm: norms.0,
        blocks_norm: norms.1,
        max_abs_diff: max,
        worst,
    }
}

fn require_frozen(store: &ParamStore<f64>) -> Result<()> {
    if !store.is_frozen() {
        return Err(Error::usage(
            "correspondence checks need frozen weights; call ParamStore::freeze first",
        ));
    }
    Ok(())
}

/// Linear-mode smoothing blocks and transitions whose weights are the Poisson stencils of a grid hierarchy.
#[derive(Clone, Debug)]
pub struct PoissonBlocks {
    pub dim: usize,
    pub store: ParamStore<f64>,
    pub blocks: Vec<SmoothingBlock>,
    pub transitions: Vec<Transition>,
    pub fas: bool,
}

fn stencil_spec(dim: usize, stride: usize, padding: usize) -> Result<ConvSpec> {
    match dim {
        1 => ConvSpec::new((3, 1), 1, 1, 1, stride, (padding, 0)),
        _ => ConvSpec::new((3, 3), 1, 1, 1, stride, (padding, padding)),
    }
}

/// Laplacian `A`, Jacobi `B = omega D^-1` and full-weighting `R` (also used as `Pi`) per level.
pub fn poisson_blocks(h: &GridHierarchy, omega: f64, nu: usize, fas: bool) -> Result<PoissonBlocks> {
    let dim = h.dim;
    let mut store = ParamStore::new();
    let same = stencil_spec(dim, 1, 1)?;
    let taps = same.weight_shape();
    let mut a_ids = Vec::new();
    let mut blocks = Vec::new();
    for (l, g) in h.levels.iter().enumerate() {
        let h2 = spacing(g.n).powi(2);
        let centre = if dim == 1 { 1 } else { 4 };
        let a_w = Tensor::from_fn(taps, |i| match (dim, i) {
            (_, i) if i == centre => 2.0 * dim as f64 / h2,
            (1, _) | (_, 1 | 3 | 5 | 7) => -1.0 / h2,
            _ => 0.0,
        });
        let b_w = Tensor::from_fn(taps, |i| if i == centre { omega * h2 / (2 * dim) as f64 } else { 0.0 });
        let a = store.add_conv(format!("l{}.A", l + 1), same, a_w)?;
        let b = store.add_conv(format!("l{}.B", l + 1), same, b_w)?;
        let zero = l == 0 || !fas;
        let mut steps = Vec::with_capacity(nu);
        for i in 0..nu {
            let a_layer = if i == 0 && zero {
                None
            } else {
                Some(Layer {
                    conv: a,
                    bn: store.add_bn(&format!("l{}.step{}.A_bn", l + 1, i + 1), 1),
                })
            };
            let b_layer = Layer {
                conv: b,
                bn: store.add_bn(&format!("l{}.step{}.B_bn", l + 1, i + 1), 1),
            };
            steps.push(SmoothStep { a: a_layer, b: b_layer });
        }
        a_ids.push(a);
        blocks.push(SmoothingBlock { steps });
    }
    let down = stencil_spec(dim, 2, 0)?;
    let weights = [0.25, 0.5, 0.25];
    let fw = Tensor::from_fn(down.weight_shape(), |i| match dim {
        1 => weights[i],
        _ => weights[i / 3] * weights[i % 3],
    });
    let mut transitions = Vec::new();
    for l in 0..h.levels.len().saturating_sub(1) {
        let level = l + 1;
        let restrict = store.add_conv(format!("l{level}.R"), down, fw.clone())?;
        let a_fine = Layer {
            conv: a_ids[l],
            bn: store.add_bn(&format!("l{level}.transfer.A_bn"), 1),
        };
        let (project, a_coarse) = if fas {
            let p = store.add_conv(format!("l{level}.Pi"), down, fw.clone())?;
            let a = Layer {
                conv: a_ids[l + 1],
                bn: store.add_bn(&format!("l{level}.transfer.A_next_bn"), 1),
            };
            (Some(p), Some(a))
        } else {
            (None, None)
        };
        transitions.push(Transition {
            a_fine,
            restrict,
            project,
            a_coarse,
        });
    }
    store.freeze();
    Ok(PoissonBlocks {
        dim,
        store,
        blocks,
        transitions,
        fas,
    })
}

fn grid_tensor(dim: usize, n: usize, v: &DVector<f64>) -> Result<Tensor<f64>> {
    let shape = if dim == 1 { [1, n, 1, 1] } else { [1, n, n, 1] };
    Tensor::new(shape, v.as_slice().to_vec())
}

/// Smoothing steps of level 1, one at a time, against weighted Jacobi on the same grid.
pub fn smoothing_check(
    model: &PoissonBlocks,
    h: &GridHierarchy,
    f: &DVector<f64>,
    omega: f64,
    tolerance: f64,
) -> Result<CorrespondenceReport> {
    require_frozen(&model.store)?;
    let g = &h.levels[0];
    let block = model
        .blocks
        .first()
        .ok_or_else(|| Error::config("model has no smoothing block"))?;
    let mut tape = Tape::new();
    let f_var = tape.input(grid_tensor(h.dim, g.n, f)?);
    let mut ctx = Ctx::new(&model.store, &mut tape, Mode::Linear);
    let mut u_blocks = None;
    let mut u_oracle = DVector::zeros(f.len());
    let mut rows = Vec::new();
    for (i, step) in block.steps.iter().enumerate() {
        let single = SmoothingBlock { steps: vec![*step] };
        u_blocks = smooth(&mut ctx, u_blocks, f_var, &single)?;
        u_oracle = jacobi_smooth(&u_oracle, f, &g.a, omega, 1);
        let ub = DVector::from_column_slice(ctx.tape.value(u_blocks.expect("one step ran")).data());
        let norms = ((f - &g.a * &u_oracle).norm(), (f - &g.a * &ub).norm());
        rows.push(compare(format!("u step {}", i + 1), u_oracle.as_slice(), ub.as_slice(), norms));
    }
    Ok(CorrespondenceReport {
        check: "smoothing".into(),
        tolerance,
        rows,
    })
}

/// Pure-matrix coarsening leg: `nu` Jacobi steps per level, then
/// `f' = R (f - A u)` (plus `A' Pi u` with FAS, starting the next level from `Pi u`).
pub fn restriction_chain(
    h: &GridHierarchy,
    f: &DVector<f64>,
    omega: f64,
    nu: usize,
    fas: bool,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut out = Vec::with_capacity(h.levels.len());
    let mut f = f.clone();
    let mut u = DVector::zeros(f.len());
    for (l, g) in h.levels.iter().enumerate() {
        u = jacobi_smooth(&u, &f, &g.a, omega, nu);
        out.push((u.clone(), f.clone()));
        if let Some(r) = &g.restrict {
            let coarse_a = &h.levels[l + 1].a;
            let mut f_next = r * (&f - &g.a * &u);
            let u_next = if fas { r * &u } else { DVector::zeros(f_next.len()) };
            if fas {
                f_next += coarse_a * &u_next;
            }
            f = f_next;
            u = u_next;
        }
    }
    out
}

/// Smoothing and resolution steps across every level against [`restriction_chain`].
pub fn coarsening_check(
    model: &PoissonBlocks,
    h: &GridHierarchy,
    f: &DVector<f64>,
    omega: f64,
    tolerance: f64,
) -> Result<CorrespondenceReport> {
    require_frozen(&model.store)?;
    if model.blocks.len() != h.levels.len() {
        return Err(Error::config(format!(
            "model has {} levels, hierarchy has {}",
            model.blocks.len(),
            h.levels.len()
        )));
    }
    let nu = model.blocks[0].steps.len();
    let chain = restriction_chain(h, f, omega, nu, model.fas);
    let mut tape = Tape::new();
    let mut f_var = tape.input(grid_tensor(h.dim, h.levels[0].n, f)?);
    let mut ctx = Ctx::new(&model.store, &mut tape, Mode::Linear);
    let mut u = None;
    let mut rows = Vec::new();
    for (l, (u_o, f_o)) in chain.iter().enumerate() {
        let fb = ctx.tape.value(f_var).data().to_vec();
        rows.push(compare(format!("f level {}", l + 1), f_o.as_slice(), &fb, (f_o.norm(), norm(&fb))));
        u = smooth(&mut ctx, u, f_var, &model.blocks[l])?;
        let ub = u.map(|v| ctx.tape.value(v).data().to_vec()).unwrap_or_default();
        rows.push(compare(format!("u level {}", l + 1), u_o.as_slice(), &ub, (u_o.norm(), norm(&ub))));
        if let Some(t) = model.transitions.get(l) {
            let (u_next, f_next) = resolution_step(&mut ctx, u, f_var, t, model.fas)?;
            u = u_next;
            f_var = f_next;
        }
    }
    Ok(CorrespondenceReport {
        check: if model.fas { "coarsening-fas" } else { "coarsening" }.into(),
        tolerance,
        rows,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn op_matrix(store: &ParamStore<f64>, id: ParamId, shape: (usize, usize, usize)) -> Result<(DMatrix<f64>, (usize, usize, usize))> {
    let spec = store.conv_spec(id)?;
    let op = ConvOperator::new(spec, store.value(id).clone())?;
    let (m, n) = spec.output_hw(shape.0, shape.1)?;
    Ok((conv_as_matrix(&op, shape, DEFAULT_MATRIX_BOUND)?, (m, n, spec.out_channels)))
}

/// Linear-mode smoothing applied to matrices that map the input to `f` and `u`.
fn smooth_matrix(
    store: &ParamStore<f64>,
    block: &SmoothingBlock,
    u: Option<DMatrix<f64>>,
    f: &DMatrix<f64>,
    shape: (usize, usize, usize),
) -> Result<Option<DMatrix<f64>>> {
    let mut u = u;
    for step in &block.steps {
        let r = match (&u, step.a) {
            (None, _) => f.clone(),
            (Some(u), Some(a)) => f - op_matrix(store, a.conv, shape)?.0 * u,
            (Some(_), None) => return Err(Error::config("smoothing step without A applied to a nonzero state")),
        };
        let update = op_matrix(store, step.b.conv, shape)?.0 * r;
        u = Some(match u {
            None => update,
            Some(u) => u + update,
        });
    }
    Ok(u)
}

fn cycle_matrix(
    store: &ParamStore<f64>,
    cycle: &SicCycle,
    kappa: usize,
    f: DMatrix<f64>,
    u: Option<DMatrix<f64>>,
    shape: (usize, usize, usize),
) -> Result<Option<DMatrix<f64>>> {
    let rung = &cycle.rungs[kappa];
    let mut u = smooth_matrix(store, &rung.pre, u, &f, shape)?;
    if let Some(t) = &rung.coarsen {
        let (r, coarse_shape) = op_matrix(store, t.restrict, shape)?;
        let (f_c, u_c) = match &u {
            None => (r * &f, None),
            Some(uv) => {
                let a = op_matrix(store, t.a_fine.conv, shape)?.0;
                let pi = op_matrix(store, t.project, shape)?.0;
                let u_c = pi * uv;
                let a_c = op_matrix(store, t.a_coarse.conv, coarse_shape)?.0;
                (r * (&f - a * uv) + a_c * &u_c, Some(u_c))
            }
        };
        if let Some(c) = cycle_matrix(store, cycle, kappa + 1, f_c, u_c, coarse_shape)? {
            let p = op_matrix(store, t.prolong, coarse_shape)?.0;
            let correction = p * c;
            u = Some(match u {
                None => correction,
                Some(uv) => uv + correction,
            });
        }
    }
    smooth_matrix(store, &rung.post, u, &f, shape)
}

/// Explicit matrix of a linear-mode in-channel cycle on one `(m, n, c)` sample.
pub fn assemble_sic_matrix(store: &ParamStore<f64>, cycle: &SicCycle, shape: (usize, usize, usize)) -> Result<DMatrix<f64>> {
    let size = shape.0 * shape.1 * shape.2;
    if size > DEFAULT_MATRIX_BOUND {
        return Err(Error::TooLarge {
            rows: size,
            cols: size,
            bound: DEFAULT_MATRIX_BOUND,
        });
    }
    let id = DMatrix::identity(size, size);
    Ok(cycle_matrix(store, cycle, 0, id, None, shape)?.unwrap_or_else(|| DMatrix::zeros(size, size)))
}

/// Tape execution of a full cycle against its assembled matrix, per sample.
pub fn sic_check(store: &ParamStore<f64>, cycle: &SicCycle, f: &Tensor<f64>, tolerance: f64) -> Result<CorrespondenceReport> {
    require_frozen(store)?;
    let [batch, m, n, c] = f.dims4()?;
    let x = assemble_sic_matrix(store, cycle, (m, n, c))?;
    let mut tape = Tape::new();
    let fv = tape.input(f.clone());
    let mut ctx = Ctx::new(store, &mut tape, Mode::Linear);
    let out = sic_cycle(&mut ctx, fv, None, cycle, 0)?;
    let blocks = match out {
        Some(v) => ctx.tape.value(v).data().to_vec(),
        None => vec![0.0; f.len()],
    };
    let per = m * n * c;
    let rows = (0..batch)
        .map(|s| {
            let fs = DVector::from_column_slice(&f.data()[s * per..(s + 1) * per]);
            let oracle = &x * fs;
            let b = &blocks[s * per..(s + 1) * per];
            compare(format!("sample {}", s + 1), oracle.as_slice(), b, (oracle.norm(), norm(b)))
        })
        .collect();
    Ok(CorrespondenceReport {
        check: "sic".into(),
        tolerance,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_model, ModelConfig};
    use crate::oracle::poisson::random_vector;

    #[test]
    fn smoothing_matches_jacobi() {
        for (dim, n) in [(1, 63), (2, 15)] {
            let h = GridHierarchy::poisson(dim, n, 1).unwrap();
            let model = poisson_blocks(&h, 2.0 / 3.0, 4, false).unwrap();
            let f = random_vector(h.levels[0].a.nrows(), 2, "f");
            let rep = smoothing_check(&model, &h, &f, 2.0 / 3.0, 1e-10).unwrap();
            assert!(rep.passed(), "{}", rep.diff_report());
            assert_eq!(rep.rows.len(), 4);
            // Residuals decrease monotonically under damped Jacobi.
            assert!(rep.rows.windows(2).all(|w| w[1].oracle_norm < w[0].oracle_norm));
        }
    }

    #[test]
    fn coarsening_matches_chain() {
        for fas in [false, true] {
            for dim in [1, 2] {
                let n = if dim == 1 { 31 } else { 15 };
                let h = GridHierarchy::poisson(dim, n, 3).unwrap();
                let model = poisson_blocks(&h, 2.0 / 3.0, 2, fas).unwrap();
                let f = random_vector(h.levels[0].a.nrows(), 4, "f");
                let rep = coarsening_check(&model, &h, &f, 2.0 / 3.0, 1e-10).unwrap();
                assert!(rep.passed(), "{}", rep.diff_report());
                assert_eq!(rep.rows.len(), 6);
            }
        }
    }

    #[test]
    fn unfrozen_weights_are_refused() {
        let h = GridHierarchy::poisson(1, 7, 1).unwrap();
        let mut model = poisson_blocks(&h, 0.5, 1, false).unwrap();
        model.store = ParamStore::new();
        let err = smoothing_check(&model, &h, &DVector::zeros(7), 0.5, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn sic_cycle_matches_assembled_matrix() {
        let cfg = ModelConfig {
            channels: vec![4],
            input_channels: 1,
            input_size: 3,
            ..ModelConfig::mgiad(2, 2, 1)
        };
        let mut net = build_model::<f64>(&cfg, 11).unwrap();
        net.store_mut().freeze();
        let cycle = &net.cycles().unwrap()[0];
        assert_eq!(cycle.rungs.len(), 2);
        let f = Tensor::from_fn([2, 3, 3, 4], |i| ((i * 37 % 17) as f64 - 8.0) / 8.0);
        let rep = sic_check(net.store(), cycle, &f, 1e-12).unwrap();
        assert!(rep.passed(), "{}", rep.diff_report());
        assert!(rep.rows[0].oracle_norm > 0.0);
    }

    #[test]
    fn diff_report_names_the_entry() {
        let rep = CorrespondenceReport {
            check: "x".into(),
            tolerance: 1e-10,
            rows: vec![compare("f level 2".into(), &[1.0, 2.0], &[1.0, 2.5], (0.0, 0.0))],
        };
        assert!(!rep.passed());
        assert_eq!(
            rep.diff_report(),
            "x f level 2: entry 1 oracle 2e0 blocks 2.5e0 (|diff| 5e-1 > 1e-10)\n"
        );
    }
}
