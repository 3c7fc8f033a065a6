use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// `-Δu = f` on the unit interval or square with zero Dirichlet boundary, `n` interior points per axis.
///
/// Unknowns are ordered row by row (`y * n + x`), the same order as a single-channel feature map.
#[derive(Clone, Debug)]
pub struct PoissonProblem {
    pub dim: usize,
    pub n: usize,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub exact: DVector<f64>,
}

impl PoissonProblem {
    pub fn new(dim: usize, n: usize, rhs: DVector<f64>) -> Result<Self> {
        let matrix = laplacian(dim, n)?;
        if rhs.len() != matrix.nrows() {
            return Err(Error::config(format!(
                "right-hand side has {} entries, the grid has {}",
                rhs.len(),
                matrix.nrows()
            )));
        }
        let exact = dense_solve(&matrix, &rhs)?;
        Ok(PoissonProblem {
            dim,
            n,
            matrix,
            rhs,
            exact,
        })
    }

    /// Right-hand side with entries uniform in `[-1, 1]`.
    pub fn random(dim: usize, n: usize, seed: u64) -> Result<Self> {
        let size = n.checked_pow(dim as u32).unwrap_or(0);
        Self::new(dim, n, random_vector(size, seed, "poisson.rhs"))
    }

    pub fn unknowns(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn residual(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.rhs - &self.matrix * u
    }
}

pub(crate) fn random_vector(len: usize, seed: u64, name: &str) -> DVector<f64> {
    let mut r = rng::stream(seed, name);
    DVector::from_fn(len, |_, _| r.random_range(-1.0..=1.0))
}

/// Grid spacing for `n` interior points on the unit interval.
pub fn spacing(n: usize) -> f64 {
    1.0 / (n + 1) as f64
}

/// `(1/h^2) * tridiag(-1, 2, -1)` in 1-D, the five-point stencil in 2-D.
pub fn laplacian(dim: usize, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::config("grid needs at least one interior point"));
    }
    let h2 = spacing(n).powi(2);
    let t = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => 2.0 / h2,
        1 => -1.0 / h2,
        _ => 0.0,
    });
    match dim {
        1 => Ok(t),
        2 => {
            let id = DMatrix::<f64>::identity(n, n);
            Ok(id.kronecker(&t) + t.kronecker(&id))
        }
        d => Err(Error::config(format!("dimension must be 1 or 2, got {d}"))),
    }
}

pub(crate) fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let x = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("system matrix is not positive definite".into()))?
        .solve(b);
    let res = (b - a * &x).amax();
    if res >= 1e-10 * b.amax().max(1.0) {
        return Err(Error::Numerical(format!("dense solve residual {res:e} too large")));
    }
    Ok(x)
}

/// Full-weighting restriction from `n` to `(n - 1) / 2` points per axis.
pub fn full_weighting(dim: usize, n: usize) -> Result<DMatrix<f64>> {
    let nc = coarse_size(n)?;
    let mut r = DMatrix::zeros(nc, n);
    for j in 0..nc {
        r[(j, 2 * j)] = 0.25;
        r[(j, 2 * j + 1)] = 0.5;
        r[(j, 2 * j + 2)] = 0.25;
    }
    tensor_power(r, dim)
}

/// Linear interpolation from `(n - 1) / 2` to `n` points per axis.
pub fn linear_interpolation(dim: usize, n: usize) -> Result<DMatrix<f64>> {
    let nc = coarse_size(n)?;
    let mut p = DMatrix::zeros(n, nc);
    for j in 0..nc {
        p[(2 * j + 1, j)] = 1.0;
        p[(2 * j, j)] += 0.5;
        p[(2 * j + 2, j)] += 0.5;
    }
    tensor_power(p, dim)
}

fn tensor_power(m: DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    match dim {
        1 => Ok(m),
        2 => Ok(m.kronecker(&m)),
        d => Err(Error::config(format!("dimension must be 1 or 2, got {d}"))),
    }
}

fn coarse_size(n: usize) -> Result<usize> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::config(format!(
            "a grid of {n} points cannot be coarsened (need an odd count >= 3)"
        )));
    }
    Ok((n - 1) / 2)
}

/// `u <- u + omega * D^-1 (f - A u)`, `steps` times.
pub fn jacobi_smooth(u: &DVector<f64>, f: &DVector<f64>, a: &DMatrix<f64>, omega: f64, steps: usize) -> DVector<f64> {
    let d = a.diagonal();
    let mut u = u.clone();
    for _ in 0..steps {
        let r = f - a * &u;
        u += r.component_div(&d) * omega;
    }
    u
}

/// Ratio `|S e| / |e|` of the Jacobi error-propagation operator on the highest-frequency
/// 1-D mode, after `iters` applications.
pub fn jacobi_mode_factor(n: usize, omega: f64, iters: usize) -> Result<f64> {
    let a = laplacian(1, n)?;
    let mut e = DVector::from_fn(n, |i, _| {
        ((i + 1) as f64 * n as f64 * std::f64::consts::PI * spacing(n)).sin()
    });
    let zero = DVector::zeros(n);
    let mut ratio = 0.0;
    for _ in 0..iters.max(1) {
        let next = jacobi_smooth(&e, &zero, &a, omega, 1);
        ratio = next.norm() / e.norm();
        e = next;
    }
    Ok(ratio)
}

/// One grid of a geometric hierarchy; transfers connect it to the next coarser grid.
#[derive(Clone, Debug)]
pub struct GridLevel {
    pub n: usize,
    pub a: DMatrix<f64>,
    pub restrict: Option<DMatrix<f64>>,
    pub prolong: Option<DMatrix<f64>>,
}

/// Poisson operators rediscretized on grids of `n, (n-1)/2, ...` points per axis.
#[derive(Clone, Debug)]
pub struct GridHierarchy {
    pub dim: usize,
    pub levels: Vec<GridLevel>,
}

impl GridHierarchy {
    pub fn poisson(dim: usize, n: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("hierarchy needs at least one level"));
        }
        let mut out = Vec::with_capacity(levels);
        let mut size = n;
        for l in 0..levels {
            let last = l + 1 == levels;
            out.push(GridLevel {
                n: size,
                a: laplacian(dim, size)?,
                restrict: if last { None } else { Some(full_weighting(dim, size)?) },
                prolong: if last { None } else { Some(linear_interpolation(dim, size)?) },
            });
            if !last {
                size = coarse_size(size)?;
            }
        }
        Ok(GridHierarchy { dim, levels: out })
    }

    /// Fails unless the coarsest grid is small enough for the direct solve.
    pub fn check_coarsest(&self) -> Result<()> {
        let n = self.levels.last().map_or(0, |l| l.n);
        if n > 3 {
            return Err(Error::config(format!(
                "coarsest grid has {n} points per axis; add levels until it has at most 3"
            )));
        }
        Ok(())
    }
}

/// One V-cycle; the coarsest grid is solved directly.
pub fn vcycle(
    u: &DVector<f64>,
    f: &DVector<f64>,
    h: &GridHierarchy,
    omega: f64,
    eta_pre: usize,
    eta_post: usize,
) -> Result<DVector<f64>> {
    h.check_coarsest()?;
    vcycle_at(u, f, h, 0, omega, eta_pre, eta_post)
}

fn vcycle_at(
    u: &DVector<f64>,
    f: &DVector<f64>,
    h: &GridHierarchy,
    level: usize,
    omega: f64,
    eta_pre: usize,
    eta_post: usize,
) -> Result<DVector<f64>> {
    let g = &h.levels[level];
    let (Some(r), Some(p)) = (&g.restrict, &g.prolong) else {
        return dense_solve(&g.a, f);
    };
    let mut u = jacobi_smooth(u, f, &g.a, omega, eta_pre);
    let rc = r * (f - &g.a * &u);
    let ec = vcycle_at(&DVector::zeros(rc.len()), &rc, h, level + 1, omega, eta_pre, eta_post)?;
    u += p * ec;
    Ok(jacobi_smooth(&u, f, &g.a, omega, eta_post))
}

/// `S^post (I - P A_c^-1 R A) S^pre` on the two finest grids, `S = I - omega D^-1 A`.
pub fn two_grid_matrix(h: &GridHierarchy, omega: f64, eta_pre: usize, eta_post: usize) -> Result<DMatrix<f64>> {
    let (fine, coarse) = match h.levels.as_slice() {
        [f, c, ..] => (f, c),
        _ => return Err(Error::config("two-grid operator needs at least two levels")),
    };
    let (r, p) = (fine.restrict.as_ref().unwrap(), fine.prolong.as_ref().unwrap());
    let n = fine.a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let dinv = DMatrix::from_diagonal(&fine.a.diagonal().map(|d| 1.0 / d));
    let s = &id - dinv * &fine.a * omega;
    let ac_inv = coarse
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("coarse operator is not positive definite".into()))?
        .inverse();
    let cgc = &id - p * ac_inv * r * &fine.a;
    Ok(s.pow(eta_post as u32) * cgc * s.pow(eta_pre as u32))
}

/// Residual history of repeated V-cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub problem: String,
    pub levels: usize,
    pub omega: f64,
    /// `|f - A u_k|` for `k = 0..=cycles`.
    pub residuals: Vec<f64>,
    /// Geometric mean of the per-cycle reduction over cycles 3 to 10 (or all available cycles).
    pub contraction: f64,
}

impl ConvergenceReport {
    pub fn factors(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| w[1] / w[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,residual,factor\n");
        out.push_str(&format!("0,{:e},\n", self.residuals[0]));
        for (k, (r, q)) in self.residuals[1..].iter().zip(self.factors()).enumerate() {
            out.push_str(&format!("{},{r:e},{q:.6}\n", k + 1));
        }
        out
    }
}

/// Runs `cycles` V-cycles from `u = 0` on the problem's right-hand side.
pub fn measure_contraction(
    problem: &PoissonProblem,
    levels: usize,
    omega: f64,
    eta_pre: usize,
    eta_post: usize,
    cycles: usize,
) -> Result<ConvergenceReport> {
    measure_contraction_from(problem, levels, omega, eta_pre, eta_post, cycles, None)
}

/// As [`measure_contraction`] from a given initial guess. With a single level each cycle is
/// `eta_pre + eta_post` plain Jacobi sweeps.
pub fn measure_contraction_from(
    problem: &PoissonProblem,
    levels: usize,
    omega: f64,
    eta_pre: usize,
    eta_post: usize,
    cycles: usize,
    initial: Option<&DVector<f64>>,
) -> Result<ConvergenceReport> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::config(format!("omega must lie in (0, 1], got {omega}")));
    }
    if cycles == 0 {
        return Err(Error::usage("need at least one cycle"));
    }
    if levels == 1 && eta_pre + eta_post == 0 {
        return Err(Error::config("a single-level run needs at least one smoothing sweep"));
    }
    let h = GridHierarchy::poisson(problem.dim, problem.n, levels)?;
    if levels > 1 {
        h.check_coarsest()?;
    }
    let mut u = match initial {
        Some(u0) if u0.len() != problem.unknowns() => {
            return Err(Error::config(format!(
                "initial guess has {} entries, problem has {} unknowns",
                u0.len(),
                problem.unknowns()
            )))
        }
        Some(u0) => u0.clone(),
        None => DVector::zeros(problem.unknowns()),
    };
    let mut residuals = vec![problem.residual(&u).norm()];
    for _ in 0..cycles {
        u = if levels == 1 {
            jacobi_smooth(&u, &problem.rhs, &problem.matrix, omega, eta_pre + eta_post)
        } else {
            vcycle(&u, &problem.rhs, &h, omega, eta_pre, eta_post)?
        };
        residuals.push(problem.residual(&u).norm());
    }
    let factors: Vec<f64> = residuals.windows(2).map(|w| w[1] / w[0]).collect();
    let window = if factors.len() >= 10 { &factors[2..10] } else { &factors[..] };
    let contraction = (window.iter().map(|q| q.ln()).sum::<f64>() / window.len() as f64).exp();
    Ok(ConvergenceReport {
        problem: format!("poisson{}d n={}", problem.dim, problem.n),
        levels,
        omega,
        residuals,
        contraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_is_spd_and_solvable() {
        for dim in [1, 2] {
            let p = PoissonProblem::random(dim, 7, 3).unwrap();
            assert_eq!(p.matrix, p.matrix.transpose());
            assert!(p.matrix.clone().symmetric_eigenvalues().min() > 0.0);
            assert!(p.residual(&p.exact).amax() < 1e-10);
        }
    }

    #[test]
    fn jacobi_fixed_point_and_diagonal_solve() {
        let a = laplacian(1, 5).unwrap();
        let zero = DVector::zeros(5);
        assert_eq!(jacobi_smooth(&zero, &zero, &a, 2.0 / 3.0, 4), zero);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, 0.5]));
        let f = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let u = jacobi_smooth(&DVector::zeros(3), &f, &d, 1.0, 1);
        assert!((&d * u - f).amax() < 1e-15);
    }

    #[test]
    fn highest_mode_is_damped_by_a_third() {
        let q = jacobi_mode_factor(63, 2.0 / 3.0, 20).unwrap();
        assert!((q - 1.0 / 3.0).abs() < 0.01, "{q}");
    }

    #[test]
    fn restriction_is_scaled_interpolation_transpose() {
        for (dim, c) in [(1, 0.5), (2, 0.25)] {
            let r = full_weighting(dim, 7).unwrap();
            let p = linear_interpolation(dim, 7).unwrap();
            assert!((r - p.transpose() * c).amax() < 1e-15);
        }
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let p = PoissonProblem::random(1, 31, 1).unwrap();
        let h = GridHierarchy::poisson(1, 31, 4).unwrap();
        let u = vcycle(&p.exact, &p.rhs, &h, 2.0 / 3.0, 1, 1).unwrap();
        assert!(p.residual(&u).norm() < 1e-9 * p.rhs.norm());
    }

    #[test]
    fn coarsest_grid_must_be_tiny() {
        let h = GridHierarchy::poisson(1, 63, 3).unwrap();
        let err = vcycle(&DVector::zeros(63), &DVector::zeros(63), &h, 0.5, 1, 1).unwrap_err();
        assert!(err.to_string().contains("coarsest grid has 15"), "{err}");
        assert!(GridHierarchy::poisson(1, 8, 2).is_err());
    }

    #[test]
    fn two_grid_matches_error_propagation() {
        for dim in [1, 2] {
            let p = PoissonProblem::random(dim, 7, 5).unwrap();
            let h = GridHierarchy::poisson(dim, 7, 2).unwrap();
            let u0 = random_vector(p.unknowns(), 9, "u0");
            let u1 = vcycle(&u0, &p.rhs, &h, 0.8, 2, 1).unwrap();
            let m = two_grid_matrix(&h, 0.8, 2, 1).unwrap();
            let predicted = m * (&u0 - &p.exact);
            assert!((u1 - &p.exact - predicted).amax() < 1e-12);
        }
    }

    #[test]
    fn contraction_is_frozen() {
        // Measured values, regressed within 10%. The two-grid ratio is exactly 1/9 in 1-D;
        // recursing to five levels with single smoothing steps loosens it.
        let p1 = PoissonProblem::random(1, 63, 0).unwrap();
        let r1 = measure_contraction(&p1, 5, 2.0 / 3.0, 1, 1, 10).unwrap();
        assert!((r1.contraction / 0.1836 - 1.0).abs() < 0.1, "{}", r1.contraction);
        let p2 = PoissonProblem::random(2, 15, 0).unwrap();
        let r2 = measure_contraction(&p2, 3, 0.8, 1, 1, 10).unwrap();
        assert!((r2.contraction / 0.3271 - 1.0).abs() < 0.1, "{}", r2.contraction);
        assert_eq!(r1.to_csv().lines().count(), 12);
    }

    #[test]
    fn two_grid_rate_is_one_ninth() {
        let h = GridHierarchy::poisson(1, 63, 2).unwrap();
        let m = two_grid_matrix(&h, 2.0 / 3.0, 1, 1).unwrap();
        let mut e = random_vector(63, 1, "e");
        let mut q = 0.0;
        for _ in 0..100 {
            let next = &m * &e;
            q = next.norm() / e.norm();
            e = next / q;
        }
        assert!((q - 1.0 / 9.0).abs() < 1e-6, "{q}");
    }

    #[test]
    fn single_level_is_plain_jacobi() {
        let p = PoissonProblem::random(1, 31, 2).unwrap();
        let rep = measure_contraction_from(&p, 1, 2.0 / 3.0, 1, 1, 12, None).unwrap();
        // Two sweeps per cycle barely touch the smoothest mode.
        let smooth_mode = 1.0 - 2.0 / 3.0 * (1.0 - (std::f64::consts::PI / 32.0).cos());
        assert!(rep.contraction < 1.0 && rep.contraction > smooth_mode.powi(2) - 0.05, "{}", rep.contraction);
    }

    #[test]
    fn exact_start_stays_at_rounding_level() {
        let p = PoissonProblem::random(2, 15, 4).unwrap();
        let rep = measure_contraction_from(&p, 3, 0.8, 1, 1, 3, Some(&p.exact)).unwrap();
        let scale = p.rhs.norm();
        assert!(rep.residuals.iter().all(|&r| r < 1e-12 * scale), "{:?}", rep.residuals);
    }
}
