//! Generalized principal eigenvalue, ground states and criticality.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Grid, GridFunction, Interval, Measure};
use crate::operators::BranchingQuadruple;
use crate::particles::{stream_rng, Motion, Rng};
use crate::pde;
use crate::tridiag::{ThomasWorkspace, Tridiag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criticality {
    SubcriticalLike,
    CriticalNonProduct,
    ProductCritical,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::SubcriticalLike => "subcritical-like",
            Criticality::CriticalNonProduct => "critical-non-product",
            Criticality::ProductCritical => "product-critical",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Relative tolerance on the Collatz–Wielandt bracket.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative change of `∫ φ φ̃` treated as stabilized.
    pub stabilization: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions { tol: 1e-11, max_iter: 500, stabilization: 1e-3 }
    }
}

/// Principal eigenpair of one Dirichlet matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub lambda: f64,
    /// Interior values, maximum scaled to 1.
    pub vector: Vec<f64>,
    /// `‖(M − λ) v‖_∞ / ‖v‖_∞`.
    pub residual: f64,
    /// `max_i |((M − λ) v)_i| / v_i`.
    pub pointwise_residual: f64,
    pub iterations: usize,
}

fn ratio_bracket(m: &Tridiag, v: &[f64], mv: &mut [f64]) -> (f64, f64) {
    m.matvec_into(v, mv);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (a, b) in mv.iter().zip(v) {
        if *b > 0.0 {
            let r = a / b;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    (lo, hi)
}

/// Shifted inverse power iteration for the eigenvalue of largest real part
/// of an essentially nonnegative tridiagonal matrix.
///
/// The shift starts at `upper` (an a-priori upper bound on the spectrum) and
/// then follows the Collatz–Wielandt upper bound `max_i (M v)_i / v_i` plus
/// the current bracket width, so it stays above the eigenvalue while
/// approaching it.
pub fn dirichlet_principal(m: &Tridiag, upper: f64, opts: &EigenOptions) -> Result<Eigen> {
    let n = m.size();
    if n == 0 {
        return Err(Error::DiscretizationTooCoarse("no interior nodes".into()));
    }
    let scale = m.norm_inf().max(1e-300);
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut mv = vec![0.0; n];
    let mut ws = ThomasWorkspace::new(n);
    let mut shift = upper;
    let mut last_res = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let a = m.affine(shift, -1.0);
        ws.solve(&a, &v, &mut w)?;
        let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(mx > 0.0) || !mx.is_finite() {
            return Err(Error::Solver(format!("inverse iteration produced a non-positive iterate at step {it}")));
        }
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / mx;
        }
        let (lo, hi) = ratio_bracket(m, &v, &mut mv);
        let num: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let den: f64 = v.iter().map(|a| a * a).sum();
        let lambda = num / den;
        let res = mv.iter().zip(&v).map(|(a, b)| (a - lambda * b).abs()).fold(0.0, f64::max);
        last_res = res;
        let width = hi - lo;
        let tol = opts.tol * (1.0 + lambda.abs());
        let floor = 64.0 * f64::EPSILON * scale * (n as f64).sqrt();
        if width <= tol || res <= floor {
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::DiscretizationTooCoarse("principal eigenvector changes sign".into()));
            }
            let pointwise = mv.iter().zip(&v).map(|(a, b)| (a - lambda * b).abs() / b).fold(0.0, f64::max);
            return Ok(Eigen { lambda, vector: v, residual: res, pointwise_residual: pointwise, iterations: it });
        }
        if hi.is_finite() && lo.is_finite() {
            let candidate = hi + width.max(1e-9 * (1.0 + hi.abs()));
            shift = candidate.min(upper);
        }
    }
    Err(Error::Convergence { iterations: opts.max_iter, residual: last_res })
}

/// One row of the truncation table.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationRow {
    pub lo: f64,
    pub hi: f64,
    pub lambda: f64,
    /// `∫ φ φ̃` with both ground states max-normalized.
    pub integral: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SpectralTriple {
    pub lambda_c: f64,
    /// Max-normalized ground state on the largest truncation.
    pub phi_c: GridFunction,
    /// Adjoint ground state scaled so that `∫ φ_c φ̃_c = 1`.
    pub phi_tilde_c: GridFunction,
    pub criticality: Criticality,
    /// Normwise relative eigen-residual on the largest truncation.
    pub residual: f64,
    /// Pointwise backward error `max_i |((M − λ) φ)_i| / φ_i`.
    pub pointwise_residual: f64,
    /// Eigenvalue of the transposed matrix.
    pub lambda_adjoint: f64,
    pub table: Vec<TruncationRow>,
    /// Whether the eigenvalue sequence is nondecreasing along the truncations.
    pub monotone: bool,
}

impl SpectralTriple {
    /// Triple from analytic ground states, accepted only if the eigen-residual
    /// of `φ` on the grid is small.
    pub fn from_analytic(
        q: &BranchingQuadruple,
        grid: Grid,
        lambda: f64,
        phi: impl Fn(f64) -> f64,
        phi_tilde: impl Fn(f64) -> f64,
        criticality: Criticality,
    ) -> Result<SpectralTriple> {
        let phi = GridFunction::from_fn(grid, Boundary::Free, phi)?;
        let mut pt = GridFunction::from_fn(grid, Boundary::Free, phi_tilde)?;
        for (i, (a, b)) in phi.values.iter().zip(&pt.values).enumerate() {
            if !(*a > 0.0) || !(*b > 0.0) {
                return Err(Error::Positivity(format!("analytic ground state not positive at x = {}", grid.x(i))));
            }
        }
        let m = q.matrix(&grid, 0.0)?;
        let v = &phi.values;
        let mut res = 0.0_f64;
        let mut pointwise = 0.0_f64;
        for r in 0..m.size() {
            let i = r + 1;
            let e = m.lower[r] * v[i - 1] + (m.diag[r] - lambda) * v[i] + m.upper[r] * v[i + 1];
            res = res.max(e.abs());
            pointwise = pointwise.max(e.abs() / v[i]);
        }
        let res = res / phi.max_abs();
        let tol = 1e-6 + grid.spacing() * grid.spacing();
        if res > tol {
            return Err(Error::Coefficient(format!("analytic override fails the eigen-residual check: {res:e}")));
        }
        let prod = phi.zip_with(&pt, |a, b| a * b)?.integral();
        pt = pt.scale(1.0 / prod);
        Ok(SpectralTriple {
            lambda_c: lambda,
            phi_c: phi,
            phi_tilde_c: pt,
            criticality,
            residual: res,
            pointwise_residual: pointwise,
            lambda_adjoint: lambda,
            table: Vec::new(),
            monotone: true,
        })
    }

    pub fn grid(&self) -> Grid {
        self.phi_c.grid
    }
}

struct TruncationSolve {
    row: TruncationRow,
    phi: GridFunction,
    phi_tilde: GridFunction,
    eig: Eigen,
    adj: Eigen,
}

fn solve_truncation(q: &BranchingQuadruple, iv: Interval, nodes: usize, opts: &EigenOptions) -> Result<TruncationSolve> {
    let grid = Grid::on(iv, nodes)?;
    let m = q.matrix(&grid, 0.0)?;
    let upper = q.max_beta(&grid, 0.0) + 1.0;
    let eig = dirichlet_principal(&m, upper, opts)?;
    let adj = dirichlet_principal(&m.transpose(), upper, opts)?;
    let to_grid = |v: &[f64]| {
        let mut full = vec![0.0; nodes];
        full[1..nodes - 1].copy_from_slice(v);
        GridFunction::new(grid, full, Boundary::DirichletZero)
    };
    let phi = to_grid(&eig.vector)?;
    let phi_tilde = to_grid(&adj.vector)?;
    let integral = phi.zip_with(&phi_tilde, |a, b| a * b)?.integral();
    let row = TruncationRow { lo: iv.lo, hi: iv.hi, lambda: eig.lambda, integral, residual: eig.residual, iterations: eig.iterations };
    Ok(TruncationSolve { row, phi, phi_tilde, eig, adj })
}

/// Ground states and `λ_c` on each truncation (the domain's own sequence
/// when `truncations` is empty), `grid_size` nodes per truncation.
pub fn principal_eigenpair(q: &BranchingQuadruple, grid_size: usize, truncations: &[Interval]) -> Result<SpectralTriple> {
    principal_eigenpair_with(q, grid_size, truncations, &EigenOptions::default())
}

pub fn principal_eigenpair_with(
    q: &BranchingQuadruple,
    grid_size: usize,
    truncations: &[Interval],
    opts: &EigenOptions,
) -> Result<SpectralTriple> {
    if q.is_time_dependent() {
        return Err(Error::NotApplicable("principal eigenpair needs a time-homogeneous quadruple".into()));
    }
    let truncs: Vec<Interval> = if truncations.is_empty() { q.domain().truncations.clone() } else { truncations.to_vec() };
    if truncs.is_empty() {
        return Err(Error::InsufficientData("no truncations".into()));
    }
    let solves: Vec<Result<TruncationSolve>> = truncs.par_iter().map(|iv| solve_truncation(q, *iv, grid_size, opts)).collect();
    let mut done = Vec::with_capacity(solves.len());
    for s in solves {
        done.push(s?);
    }
    let table: Vec<TruncationRow> = done.iter().map(|s| s.row.clone()).collect();
    let monotone = table.windows(2).all(|w| w[1].lambda >= w[0].lambda - 1e-8 * (1.0 + w[0].lambda.abs()));
    let criticality = if table.len() >= 3 {
        classify_criticality(&table, q.domain().is_bounded(), opts.stabilization)?
    } else if q.domain().is_bounded() {
        Criticality::ProductCritical
    } else {
        return Err(Error::InsufficientData(format!("{} truncations given, classification needs 3", table.len())));
    };
    let last = done.pop().expect("nonempty");
    let prod = last.row.integral;
    Ok(SpectralTriple {
        lambda_c: last.eig.lambda,
        phi_c: last.phi,
        phi_tilde_c: last.phi_tilde.scale(1.0 / prod),
        criticality,
        residual: last.eig.residual,
        pointwise_residual: last.eig.pointwise_residual,
        lambda_adjoint: last.adj.lambda,
        table,
        monotone,
    })
}

/// Numeric proxy for the criticality class from a truncation table.
pub fn classify_criticality(rows: &[TruncationRow], bounded_domain: bool, stabilization: f64) -> Result<Criticality> {
    if rows.len() < 3 {
        return Err(Error::InsufficientData(format!("{} truncations given, classification needs 3", rows.len())));
    }
    if bounded_domain {
        return Ok(Criticality::ProductCritical);
    }
    let k = rows.len();
    let (a, b) = (rows[k - 2].integral, rows[k - 1].integral);
    if ((b - a) / b).abs() < stabilization {
        return Ok(Criticality::ProductCritical);
    }
    let growing = rows.windows(2).skip(k - 3).all(|w| w[1].integral > w[0].integral * (1.0 + stabilization));
    Ok(if growing { Criticality::CriticalNonProduct } else { Criticality::SubcriticalLike })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkMethod {
    /// Independent paths weighted by `exp ∫ β`, killed on exit.
    Plain,
    /// Interacting paths: killed or low-weight paths are replaced by copies
    /// of surviving ones every step, `batches` independent populations.
    Resampling { batches: usize },
}

#[derive(Debug, Clone)]
pub struct FkEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Fraction of path-steps that survived (average over steps).
    pub survival: f64,
    pub warning: Option<String>,
}

/// `(1/t) log E^x[exp ∫₀ᵗ β(ξ_s) ds; τ^A > t]` by Euler–Maruyama paths.
#[allow(clippy::too_many_arguments)]
pub fn lambda_feynman_kac(
    q: &BranchingQuadruple,
    x: f64,
    a: Interval,
    t: f64,
    paths: usize,
    dt: f64,
    seed: u64,
    method: FkMethod,
) -> Result<FkEstimate> {
    if !a.contains_open(x) {
        return Err(Error::Domain(format!("start {x} outside ({}, {})", a.lo, a.hi)));
    }
    if !(dt > 0.0) || !(t > 0.0) || paths == 0 {
        return Err(Error::Config("need dt > 0, t > 0 and at least one path".into()));
    }
    let motion = Motion::new(&q.op, a, 4096)?;
    let steps = (t / dt).round().max(1.0) as usize;
    let dt = t / steps as f64;
    let amax = (0..=64).map(|k| q.op.a.eval(a.lo + a.len() * k as f64 / 64.0, 0.0)).fold(0.0, f64::max);
    let warning = if dt * amax / (a.len() * a.len()) > 0.01 {
        Some(format!("dt = {dt} is coarse relative to the diffusive crossing time of A"))
    } else {
        None
    };
    let batches = match method {
        FkMethod::Plain => 16.min(paths).max(1),
        FkMethod::Resampling { batches } => batches.max(2),
    };
    let per = paths.div_ceil(batches);
    let logs: Vec<(f64, f64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            match method {
                FkMethod::Plain => fk_plain(q, &motion, x, steps, dt, per, &mut rng),
                FkMethod::Resampling { .. } => fk_resampling(q, &motion, x, steps, dt, per, &mut rng),
            }
        })
        .collect();
    let survival = logs.iter().map(|l| l.1).sum::<f64>() / batches as f64;
    match method {
        FkMethod::Plain => {
            // pooled mean over all paths; SE by the delta method on batch means
            let means: Vec<f64> = logs.iter().map(|l| l.0).collect();
            let mean = means.iter().sum::<f64>() / batches as f64;
            if !(mean > 0.0) {
                return Ok(FkEstimate { estimate: f64::NEG_INFINITY, std_error: f64::INFINITY, survival, warning: Some("all paths exited A".into()) });
            }
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches.max(2) - 1) as f64;
            let se = (var / batches as f64).sqrt() / (mean * t);
            Ok(FkEstimate { estimate: mean.ln() / t, std_error: se, survival, warning })
        }
        FkMethod::Resampling { .. } => {
            if logs.iter().any(|l| !l.0.is_finite()) {
                return Ok(FkEstimate { estimate: f64::NEG_INFINITY, std_error: f64::INFINITY, survival, warning: Some("all paths exited A".into()) });
            }
            let rates: Vec<f64> = logs.iter().map(|l| l.0 / t).collect();
            let mean = rates.iter().sum::<f64>() / batches as f64;
            let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            Ok(FkEstimate { estimate: mean, std_error: (var / batches as f64).sqrt(), survival, warning })
        }
    }
}

fn fk_plain(q: &BranchingQuadruple, motion: &Motion, x0: f64, steps: usize, dt: f64, paths: usize, rng: &mut Rng) -> (f64, f64) {
    let mut total = 0.0;
    let mut alive_steps = 0usize;
    for _ in 0..paths {
        let mut x = x0;
        let mut integral = 0.0;
        let mut alive = true;
        for k in 0..steps {
            let t = k as f64 * dt;
            let b0 = q.beta.eval(x, t);
            match motion.step(x, t, dt, rng) {
                Some(y) => {
                    integral += 0.5 * (b0 + q.beta.eval(y, t + dt)) * dt;
                    x = y;
                    alive_steps += 1;
                }
                None => {
                    alive = false;
                    break;
                }
            }
        }
        if alive {
            total += integral.exp();
        }
    }
    (total / paths as f64, alive_steps as f64 / (paths * steps) as f64)
}

/// Returns `log` of the unbiased normalizing-constant estimate.
fn fk_resampling(q: &BranchingQuadruple, motion: &Motion, x0: f64, steps: usize, dt: f64, paths: usize, rng: &mut Rng) -> (f64, f64) {
    use rand::Rng as _;
    let mut xs = vec![x0; paths];
    let mut w = vec![0.0; paths];
    let mut next = vec![0.0; paths];
    let mut log_z = 0.0;
    let mut alive_total = 0usize;
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut sum = 0.0;
        for i in 0..paths {
            let x = xs[i];
            let b0 = q.beta.eval(x, t);
            w[i] = match motion.step(x, t, dt, rng) {
                Some(y) => {
                    xs[i] = y;
                    alive_total += 1;
                    (0.5 * (b0 + q.beta.eval(y, t + dt)) * dt).exp()
                }
                None => 0.0,
            };
            sum += w[i];
        }
        if sum <= 0.0 {
            return (f64::NEG_INFINITY, alive_total as f64 / (paths * steps) as f64);
        }
        log_z += (sum / paths as f64).ln();
        // systematic resampling
        let step = sum / paths as f64;
        let mut u = rng.random::<f64>() * step;
        let mut acc = w[0];
        let mut j = 0;
        for slot in next.iter_mut() {
            while acc < u && j + 1 < paths {
                j += 1;
                acc += w[j];
            }
            *slot = xs[j];
            u += step;
        }
        std::mem::swap(&mut xs, &mut next);
    }
    (log_z, alive_total as f64 / (paths * steps) as f64)
}

#[derive(Debug, Clone)]
pub struct GrowthRates {
    pub times: Vec<f64>,
    pub rates: Vec<f64>,
    /// Change of the rate over the last interval of the time grid.
    pub trend: f64,
    pub warning: Option<String>,
}

/// `(1/t) log ⟨μ̂, S_t 1_B⟩` for the unit-mass normalization `μ̂` of `μ`, on
/// the largest truncation with `grid_size` nodes.
pub fn local_growth_rate(
    q: &BranchingQuadruple,
    mu: &Measure,
    b: Interval,
    times: &[f64],
    grid_size: usize,
    dt: Option<f64>,
) -> Result<GrowthRates> {
    let mass = mu.total_mass();
    if !(mass > 0.0) {
        return Err(Error::Domain("μ must have positive mass".into()));
    }
    let grid = Grid::on(q.domain().largest(), grid_size)?;
    let ind = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| if b.contains_open(x) { 1.0 } else { 0.0 })?;
    let flow = pde::expectation_flow(q, &ind, times, dt)?;
    let rates: Vec<f64> = times
        .iter()
        .zip(&flow.snapshots)
        .map(|(t, u)| (mu.pair_grid(u) / mass).ln() / t)
        .collect();
    let trend = if rates.len() >= 2 { rates[rates.len() - 1] - rates[rates.len() - 2] } else { f64::NAN };
    let warning = if rates.len() < 2 || trend.abs() > 0.05 {
        Some(format!("growth rate not settled: last change {trend:.4}"))
    } else {
        None
    };
    Ok(GrowthRates { times: times.to_vec(), rates, trend, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain1D;
    use crate::operators::{Coefficient, EllipticOperator};
    use std::f64::consts::PI;

    fn box_q(beta: f64) -> BranchingQuadruple {
        let dom = Domain1D::bounded(0.0, PI).unwrap();
        BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(beta), Coefficient::constant(1.0))
    }

    #[test]
    fn half_laplacian_on_zero_pi() {
        let t = principal_eigenpair(&box_q(0.0), 2001, &[]).unwrap();
        assert!((t.lambda_c + 0.5).abs() < 1e-6);
        let err = (0..2001).map(|i| (t.phi_c.values[i] - t.phi_c.grid.x(i).sin()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert_eq!(t.criticality, Criticality::ProductCritical);
        let norm = t.phi_c.zip_with(&t.phi_tilde_c, |a, b| a * b).unwrap().integral();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((t.lambda_adjoint - t.lambda_c).abs() <= 1e-10 * t.lambda_c.abs());
    }

    #[test]
    fn constant_beta_matches_dense_oracle() {
        // eigenvalues of the Dirichlet second difference are known in closed form
        let c = 0.37;
        let n = 200;
        let t = principal_eigenpair(&box_q(c), n, &[]).unwrap();
        let h = PI / (n - 1) as f64;
        let exact = c - (1.0 - h.cos()) / (h * h);
        assert!((t.lambda_c - exact).abs() < 1e-10, "{} vs {exact}", t.lambda_c);
    }

    #[test]
    fn wright_fisher_gamma_two() {
        let dom = Domain1D::new(0.0, 1.0, vec![Interval::new(0.1, 0.9).unwrap(), Interval::new(0.05, 0.95).unwrap(), Interval::new(0.0, 1.0).unwrap()]).unwrap();
        let op = EllipticOperator::new(Coefficient::parse("x*(1-x)").unwrap(), Coefficient::parse("x - 0.5").unwrap(), dom);
        let q = BranchingQuadruple::new(op, Coefficient::constant(2.0), Coefficient::constant(2.0));
        let t = principal_eigenpair(&q, 1001, &[]).unwrap();
        assert!((t.lambda_c - 1.0).abs() < 1e-4, "{}", t.lambda_c);
        assert!(t.monotone);
        assert!(t.table[0].lambda < t.table[2].lambda);
        for i in 1..1000 {
            let x = t.phi_c.grid.x(i);
            assert!((t.phi_c.values[i] - 4.0 * x * (1.0 - x)).abs() < 1e-4);
            assert!((t.phi_tilde_c.values[i] - 1.5).abs() < 5e-3, "{} at {x}", t.phi_tilde_c.values[i]);
        }
    }

    fn rows(ints: &[f64]) -> Vec<TruncationRow> {
        ints.iter()
            .map(|&integral| TruncationRow { lo: 0.0, hi: 1.0, lambda: 0.0, integral, residual: 0.0, iterations: 1 })
            .collect()
    }

    #[test]
    fn classification_rules() {
        assert!(matches!(classify_criticality(&rows(&[1.0, 2.0]), true, 1e-3), Err(Error::InsufficientData(_))));
        assert_eq!(classify_criticality(&rows(&[1.0, 2.0, 4.0]), true, 1e-3).unwrap(), Criticality::ProductCritical);
        assert_eq!(classify_criticality(&rows(&[1.0, 2.0, 4.0]), false, 1e-3).unwrap(), Criticality::CriticalNonProduct);
        assert_eq!(classify_criticality(&rows(&[1.0, 1.2, 1.2000001]), false, 1e-3).unwrap(), Criticality::ProductCritical);
        assert_eq!(classify_criticality(&rows(&[1.0, 0.5, 0.4]), false, 1e-3).unwrap(), Criticality::SubcriticalLike);
    }

    #[test]
    fn flat_line_is_not_product_critical() {
        let truncs: Vec<Interval> = [5.0, 10.0, 20.0].iter().map(|k| Interval::new(-k, *k).unwrap()).collect();
        let dom = Domain1D::new(f64::NEG_INFINITY, f64::INFINITY, truncs).unwrap();
        let q = BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(1.0), Coefficient::constant(1.0));
        let t = principal_eigenpair(&q, 401, &[]).unwrap();
        assert_ne!(t.criticality, Criticality::ProductCritical);
        assert!(t.monotone);
    }

    #[test]
    fn fewer_than_three_truncations_on_line_is_an_error() {
        let dom = Domain1D::new(f64::NEG_INFINITY, f64::INFINITY, vec![Interval::new(-1.0, 1.0).unwrap()]).unwrap();
        let q = BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::zero(), Coefficient::constant(1.0));
        assert!(matches!(principal_eigenpair(&q, 101, &[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn analytic_override_is_checked() {
        let q = box_q(0.0);
        let grid = Grid::new(0.1, PI - 0.1, 101).unwrap();
        assert!(SpectralTriple::from_analytic(&q, grid, -0.5, f64::sin, f64::sin, Criticality::ProductCritical).is_ok());
        assert!(SpectralTriple::from_analytic(&q, grid, -0.3, f64::sin, f64::sin, Criticality::ProductCritical).is_err());
    }

    #[test]
    fn growth_rate_with_eigenfunction_data_is_flat() {
        let q = box_q(0.3);
        let t = principal_eigenpair(&q, 401, &[]).unwrap();
        let mu = Measure::Density(t.phi_tilde_c.clone());
        let r = local_growth_rate(&q, &mu, Interval::new(0.0, PI).unwrap(), &[0.5, 1.0, 2.0], 401, Some(1e-3)).unwrap();
        // φ̃ is a left eigenvector of the matrix, so only time-stepping error remains
        for v in &r.rates {
            assert!((v - t.lambda_c).abs() < 1e-5, "{v} vs {}", t.lambda_c);
        }
    }
}
