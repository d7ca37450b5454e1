//! Linear expectation-semigroup and semilinear log-Laplace solvers, plus the
//! moment and variance quadratures built on them.
//!
//! Time stepping is Strang splitting: two Crank–Nicolson half steps of the
//! linear part `L + β` around an exact per-node solve of `u' = −α u²`. The
//! purely linear solver uses the same two half steps with the middle step
//! omitted, so both solvers agree to rounding when `α ≡ 0`. The first few
//! steps are damped by backward-Euler substeps (Rannacher start-up) so that
//! rough initial data such as indicators do not produce oscillations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Boundary, Grid, GridFunction, Interval, Measure};
use crate::operators::{BranchingQuadruple, EllipticOperator};
use crate::spectral::{Criticality, SpectralTriple};
use crate::tridiag::{ThomasWorkspace, Tridiag};

/// Number of initial steps replaced by backward-Euler substeps.
pub const RANNACHER_STEPS: usize = 2;

/// Default step: the grid spacing, capped at `10⁻³ t`.
pub fn default_dt(h: f64, t: f64) -> f64 {
    if t > 0.0 {
        h.min(1e-3 * t)
    } else {
        h
    }
}

/// Snapshots of a solve together with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub times: Vec<f64>,
    pub snapshots: Vec<GridFunction>,
    /// Minimum nodal value after each step.
    pub step_min: Vec<f64>,
    /// Trapezoid integral after each step.
    pub step_mass: Vec<f64>,
}

impl FlowResult {
    pub fn last(&self) -> &GridFunction {
        self.snapshots.last().expect("flow has at least one snapshot")
    }

    pub fn min_value(&self) -> f64 {
        self.step_min.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct Stepper<'a> {
    q: &'a BranchingQuadruple,
    grid: Grid,
    nonlinear: bool,
    coef_time: &'a (dyn Fn(f64) -> f64 + Sync),
    homogeneous: Option<Tridiag>,
    cache: Option<(f64, bool, Tridiag, Tridiag)>,
    ws: ThomasWorkspace,
    rhs: Vec<f64>,
    out: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(q: &'a BranchingQuadruple, grid: Grid, nonlinear: bool, coef_time: &'a (dyn Fn(f64) -> f64 + Sync)) -> Result<Self> {
        let m = grid.interior();
        let homogeneous = if q.is_time_dependent() { None } else { Some(q.matrix(&grid, 0.0)?) };
        Ok(Stepper { q, grid, nonlinear, coef_time, homogeneous, cache: None, ws: ThomasWorkspace::new(m), rhs: vec![0.0; m], out: vec![0.0; m] })
    }

    fn matrix_at(&self, s: f64) -> Result<Tridiag> {
        match &self.homogeneous {
            Some(m) => Ok(m.clone()),
            None => self.q.matrix(&self.grid, (self.coef_time)(s)),
        }
    }

    /// `(I − θ_l M, I + θ_r M)` for a substep; reused while `tau` is unchanged
    /// for time-homogeneous coefficients.
    fn pair(&mut self, s: f64, tau: f64, backward_euler: bool) -> Result<(Tridiag, Tridiag)> {
        if self.homogeneous.is_some() {
            if let Some((t0, be, l, r)) = &self.cache {
                if *t0 == tau && *be == backward_euler {
                    return Ok((l.clone(), r.clone()));
                }
            }
        }
        let m = if backward_euler { self.matrix_at(s + tau)? } else { self.matrix_at(s + 0.5 * tau)? };
        let (theta_l, theta_r) = if backward_euler { (tau, 0.0) } else { (0.5 * tau, 0.5 * tau) };
        let pair = (m.affine(1.0, -theta_l), m.affine(1.0, theta_r));
        if self.homogeneous.is_some() {
            self.cache = Some((tau, backward_euler, pair.0.clone(), pair.1.clone()));
        }
        Ok(pair)
    }

    /// One linear substep of length `tau` starting at solver time `s` on the
    /// interior values `u`.
    fn linear(&mut self, u: &mut [f64], s: f64, tau: f64, backward_euler: bool) -> Result<()> {
        if self.homogeneous.is_some() {
            let hit = matches!(&self.cache, Some((t0, be, _, _)) if *t0 == tau && *be == backward_euler);
            if !hit {
                self.pair(s, tau, backward_euler)?;
            }
            let (_, _, lhs, rhs) = self.cache.as_ref().expect("cached");
            rhs.matvec_into(u, &mut self.rhs);
            self.ws.solve(lhs, &self.rhs, &mut self.out)?;
        } else {
            let (lhs, rhs) = self.pair(s, tau, backward_euler)?;
            rhs.matvec_into(u, &mut self.rhs);
            self.ws.solve(&lhs, &self.rhs, &mut self.out)?;
        }
        u.copy_from_slice(&self.out);
        Ok(())
    }

    fn nonlinear(&self, u: &mut [f64], s: f64, tau: f64) {
        let tc = (self.coef_time)(s + 0.5 * tau);
        for (r, v) in u.iter_mut().enumerate() {
            let a = self.q.alpha.eval(self.grid.x(r + 1), tc);
            let d = 1.0 + a * tau * *v;
            *v = if d > 0.0 { *v / d } else { f64::INFINITY };
        }
    }

    fn step(&mut self, u: &mut [f64], s: f64, tau: f64, damped: bool) -> Result<()> {
        self.linear(u, s, 0.5 * tau, damped)?;
        if self.nonlinear {
            self.nonlinear(u, s, tau);
        }
        self.linear(u, s + 0.5 * tau, 0.5 * tau, damped)
    }
}

fn evolve(
    q: &BranchingQuadruple,
    g: &GridFunction,
    times: &[f64],
    dt: Option<f64>,
    nonlinear: bool,
    coef_time: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<FlowResult> {
    let grid = g.grid;
    q.op.check_grid(&grid)?;
    if let Some(d) = dt {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Solver(format!("time step must be positive, got {d}")));
        }
    }
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Solver("snapshot times must be nonnegative and nondecreasing".into()));
    }
    let horizon = times.last().copied().unwrap_or(0.0);
    let dt = dt.unwrap_or_else(|| default_dt(grid.spacing(), horizon));
    let mut stepper = Stepper::new(q, grid, nonlinear, coef_time)?;
    let n = grid.nodes;
    let mut u: Vec<f64> = g.values[1..n - 1].to_vec();
    let mut res = FlowResult { times: Vec::new(), snapshots: Vec::new(), step_min: Vec::new(), step_mass: Vec::new() };
    let h = grid.spacing();
    let mut s = 0.0;
    let mut steps = 0usize;
    for &target in times {
        let span = target - s;
        if span > 0.0 {
            let k = (span / dt).ceil().max(1.0) as usize;
            let tau = span / k as f64;
            for j in 0..k {
                let s0 = s + j as f64 * tau;
                stepper.step(&mut u, s0, tau, steps < RANNACHER_STEPS)?;
                steps += 1;
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Solver(format!("solution blew up at t = {}", s0 + tau)));
                }
                res.step_min.push(u.iter().copied().fold(f64::INFINITY, f64::min));
                res.step_mass.push(h * u.iter().sum::<f64>());
            }
            s = target;
        }
        let mut full = vec![0.0; n];
        full[1..n - 1].copy_from_slice(&u);
        res.times.push(target);
        res.snapshots.push(GridFunction::new(grid, full, Boundary::DirichletZero)?);
    }
    Ok(res)
}

fn identity_time(s: f64) -> f64 {
    s
}

/// `S_t g` for the semigroup of `L + β` with Dirichlet boundary on `g`'s grid.
pub fn expectation_semigroup(q: &BranchingQuadruple, g: &GridFunction, t: f64, dt: Option<f64>) -> Result<GridFunction> {
    Ok(expectation_flow(q, g, &[t], dt)?.snapshots.pop().expect("one snapshot"))
}

/// `S_t g` at each of `times` (nondecreasing).
pub fn expectation_flow(q: &BranchingQuadruple, g: &GridFunction, times: &[f64], dt: Option<f64>) -> Result<FlowResult> {
    evolve(q, g, times, dt, false, &identity_time)
}

/// Solution of `u_t = L u + β u − α u²`, `u(0) = g`, on `g`'s grid with
/// Dirichlet boundary.
pub fn semilinear_flow(q: &BranchingQuadruple, g: &GridFunction, times: &[f64], dt: Option<f64>) -> Result<FlowResult> {
    evolve(q, g, times, dt, true, &identity_time)
}

/// Result of a log-Laplace solve over a truncation sequence.
#[derive(Debug, Clone)]
pub struct LogLaplace {
    /// Flow on the largest truncation.
    pub flow: FlowResult,
    /// `⟨μ, u(·, t)⟩` on each truncation (or `max u` when no measure given).
    pub truncation_values: Vec<(Interval, f64)>,
    /// Relative difference between the two largest truncations, when compared.
    pub rel_diff: Option<f64>,
    /// Whether solutions were pointwise nondecreasing along the sequence.
    pub monotone: bool,
}

impl LogLaplace {
    pub fn value(&self) -> f64 {
        self.truncation_values.last().map(|v| v.1).unwrap_or(0.0)
    }
}

/// Relative tolerance on `⟨μ, u⟩` between the two largest truncations.
pub const TRUNCATION_TOLERANCE: f64 = 1e-4;

/// Minimal nonnegative solution of the log-Laplace equation by expanding
/// Dirichlet truncations.
///
/// `g` is given on a grid whose spacing is reused on every truncation. The
/// adequacy comparison is skipped when the largest truncation is the whole
/// (bounded) domain, since that solve is already exact up to discretization.
pub fn loglaplace_solve(
    q: &BranchingQuadruple,
    g: &GridFunction,
    t: f64,
    dt: Option<f64>,
    truncations: &[Interval],
    mu: Option<&Measure>,
) -> Result<LogLaplace> {
    if truncations.is_empty() {
        return Err(Error::InsufficientData("no truncations given".into()));
    }
    if g.values.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("log-Laplace initial datum must be nonnegative".into()));
    }
    let h = g.grid.spacing();
    let solves: Vec<Result<GridFunction>> = truncations
        .par_iter()
        .map(|iv| {
            let nodes = ((iv.len() / h).round() as usize + 1).max(3);
            let grid = Grid::on(*iv, nodes)?;
            let gi = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| g.interp(x))?;
            let dt = dt.unwrap_or_else(|| default_dt(grid.spacing(), t));
            Ok(semilinear_flow(q, &gi, &[t], Some(dt))?.snapshots.pop().expect("one snapshot"))
        })
        .collect();
    let mut sols = Vec::with_capacity(solves.len());
    for s in solves {
        sols.push(s?);
    }
    let values: Vec<(Interval, f64)> = truncations
        .iter()
        .zip(&sols)
        .map(|(iv, u)| (*iv, mu.map(|m| m.pair_grid(u)).unwrap_or_else(|| u.max())))
        .collect();
    let mut monotone = true;
    for w in sols.windows(2) {
        let scale = w[1].max_abs().max(1e-300);
        for (i, v) in w[0].values.iter().enumerate() {
            if w[1].interp(w[0].grid.x(i)) < v - 1e-6 * scale {
                monotone = false;
            }
        }
    }
    let last = *truncations.last().expect("nonempty");
    let dom = q.domain();
    let whole_domain = dom.is_bounded() && last.lo <= dom.left && last.hi >= dom.right;
    let mut rel_diff = None;
    if values.len() >= 2 && !whole_domain {
        let a = values[values.len() - 2].1;
        let b = values[values.len() - 1].1;
        let d = if b.abs() > 0.0 { (b - a).abs() / b.abs() } else { (b - a).abs() };
        rel_diff = Some(d);
        if d > TRUNCATION_TOLERANCE {
            return Err(Error::TruncationInsufficient { rel_diff: d, tolerance: TRUNCATION_TOLERANCE });
        }
    }
    let grid = sols.last().expect("nonempty").grid;
    let gl = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| g.interp(x))?;
    let dtl = dt.unwrap_or_else(|| default_dt(grid.spacing(), t));
    let flow = semilinear_flow(q, &gl, &[0.0, t], Some(dtl))?;
    Ok(LogLaplace { flow, truncation_values: values, rel_diff, monotone })
}

/// `u(·, r; t, g)` for a time-inhomogeneous quadruple, obtained by forward
/// solving the time-reversed equation with coefficients frozen at `t − s`
/// over `s ∈ [0, t − r]`.
pub fn backward_solve(q: &BranchingQuadruple, g: &GridFunction, r: f64, t: f64, dt: Option<f64>) -> Result<GridFunction> {
    if r > t {
        return Err(Error::Solver(format!("backward solve needs r ≤ t, got r = {r}, t = {t}")));
    }
    let reverse = move |s: f64| t - s;
    let flow = evolve(q, g, &[t - r], dt, true, &reverse)?;
    Ok(flow.snapshots.into_iter().next().expect("one snapshot"))
}

/// `E^μ exp⟨X_t, −g⟩ = exp(−⟨μ, u(·, t)⟩)`.
pub fn laplace_functional(
    q: &BranchingQuadruple,
    mu: &Measure,
    g: &GridFunction,
    t: f64,
    dt: Option<f64>,
    truncations: &[Interval],
) -> Result<f64> {
    if mu.total_mass() == 0.0 || g.max_abs() == 0.0 {
        return Ok(1.0);
    }
    let ll = loglaplace_solve(q, g, t, dt, truncations, Some(mu))?;
    Ok((-ll.value()).exp())
}

/// Composite Simpson rule on `2k + 1` equally spaced samples over `[0, t]`.
pub fn simpson(values: &[f64], t: f64) -> f64 {
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an odd number of samples");
    let h = t / (n - 1) as f64;
    let mut s = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

fn simpson_nodes(t: f64, per_unit: f64) -> Vec<f64> {
    let k = ((per_unit * t).ceil() as usize).max(8);
    (0..=2 * k).map(|i| t * i as f64 / (2 * k) as f64).collect()
}

/// Variance of the ground-state weighted total mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceMass {
    /// `2 ∫₀ᵗ e^{−2λ s} ⟨μ, S_s[α φ²]⟩ ds`.
    pub value: f64,
    /// `2 λ⁻¹ ‖α φ‖_∞ ⟨μ, φ⟩`.
    pub bound: f64,
    /// The same integral without the factor 2.
    pub half_value: f64,
    /// The same bound without the factor 2.
    pub half_bound: f64,
}

fn require_regime(triple: &SpectralTriple) -> Result<()> {
    if !(triple.lambda_c > 0.0) {
        return Err(Error::NotApplicable(format!("requires λ_c > 0, got {}", triple.lambda_c)));
    }
    if triple.criticality != Criticality::ProductCritical {
        return Err(Error::Regime {
            hypothesis: "product-criticality".into(),
            detail: format!("criticality class is {}", triple.criticality),
        });
    }
    Ok(())
}

fn alpha_phi_sup(q: &BranchingQuadruple, triple: &SpectralTriple) -> f64 {
    let g = triple.phi_c.grid;
    (1..g.nodes - 1)
        .map(|i| q.alpha.eval(g.x(i), 0.0) * triple.phi_c.values[i])
        .fold(0.0, f64::max)
}

/// `Var ‖X^H_t‖` for the ground-state H-transform started from `φ_c μ`.
///
/// Offspring variance `2α` and the nonlinearity `α u²` give quadratic
/// variation `2 e^{−λ s} ⟨X^H_s, α φ f²⟩ ds`, hence the factor 2 in
/// [`VarianceMass::value`]. The variant without it is reported alongside.
pub fn variance_weighted_mass(
    q: &BranchingQuadruple,
    triple: &SpectralTriple,
    mu: &Measure,
    t: f64,
    dt: Option<f64>,
) -> Result<VarianceMass> {
    require_regime(triple)?;
    let lambda = triple.lambda_c;
    let phi = &triple.phi_c;
    let sup = alpha_phi_sup(q, triple);
    let bound = 2.0 * sup * mu.pair_grid(phi) / lambda;
    if t <= 0.0 {
        return Ok(VarianceMass { value: 0.0, bound, half_value: 0.0, half_bound: 0.5 * bound });
    }
    let psi = phi.map(|x, p| q.alpha.eval(x, 0.0) * p * p);
    let nodes = simpson_nodes(t, 8.0);
    let flow = expectation_flow(q, &psi, &nodes, dt)?;
    let integrand: Vec<f64> = nodes
        .iter()
        .zip(&flow.snapshots)
        .map(|(s, u)| (-2.0 * lambda * s).exp() * mu.pair_grid(u))
        .collect();
    let half = simpson(&integrand, t);
    Ok(VarianceMass { value: 2.0 * half, bound, half_value: half, half_bound: 0.5 * bound })
}

/// Second-moment integral controlling the Chebyshev step of the LLN proof.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestIntegral {
    /// `2 ∫₀ᵀ e^{−λ(t+s)} ⟨ν, S^H_{t+s}[α φ (S^H_{T−s} g)²]⟩ ds`.
    pub value: f64,
    /// `2 ‖α φ‖ ‖g‖² ‖ν‖ / (λ e^{λ t})`.
    pub bound: f64,
}

/// `S^H_r f = e^{−λ r} φ⁻¹ S_r(φ f)` at every node; boundary nodes are
/// extrapolated from the interior.
fn to_h_coordinates(phi: &GridFunction, s_phi_f: &GridFunction, lambda: f64, r: f64) -> Result<GridFunction> {
    let n = phi.len();
    let c = (-lambda * r).exp();
    let mut v = vec![0.0; n];
    for i in 1..n - 1 {
        v[i] = c * s_phi_f.values[i] / phi.values[i];
    }
    v[0] = 2.0 * v[1] - v[2];
    v[n - 1] = 2.0 * v[n - 2] - v[n - 3];
    GridFunction::new(phi.grid, v, Boundary::Free)
}

/// `S^H_r g = e^{−λ r} φ⁻¹ S_r(φ g)` for the ground-state weight, on the grid
/// of the triple.
pub fn h_semigroup(q: &BranchingQuadruple, triple: &SpectralTriple, g: &GridFunction, r: f64, dt: Option<f64>) -> Result<GridFunction> {
    let phi = &triple.phi_c;
    let gg = GridFunction::from_fn(phi.grid, Boundary::DirichletZero, |x| g.interp(x))?;
    let phi_g = phi.zip_with(&gg, |p, v| p * v)?;
    let u = expectation_semigroup(q, &phi_g, r, dt)?;
    to_h_coordinates(phi, &u, triple.lambda_c, r)
}

/// Evaluates the second-moment integral by nested semigroup solves on the
/// grid of the spectral triple; `nu` is a measure in H-weighted coordinates.
pub fn variance_test_integral(
    q: &BranchingQuadruple,
    triple: &SpectralTriple,
    nu: &Measure,
    g: &GridFunction,
    horizon: f64,
    t_offset: f64,
    dt: Option<f64>,
) -> Result<TestIntegral> {
    require_regime(triple)?;
    let lambda = triple.lambda_c;
    let phi = &triple.phi_c;
    let grid = phi.grid;
    let g_norm = g.max_abs();
    let bound = 2.0 * alpha_phi_sup(q, triple) * g_norm * g_norm * nu.total_mass() / (lambda * (lambda * t_offset).exp());
    if g_norm == 0.0 || nu.total_mass() == 0.0 || horizon <= 0.0 {
        return Ok(TestIntegral { value: 0.0, bound });
    }
    let gg = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| g.interp(x))?;
    let phi_g = phi.zip_with(&gg, |p, v| p * v)?;
    let s_nodes = simpson_nodes(horizon, 4.0);
    // S^H_r g for r = T − s, one flow with snapshots at all r
    let r_nodes: Vec<f64> = s_nodes.iter().rev().map(|s| horizon - s).collect();
    let inner = expectation_flow(q, &phi_g, &r_nodes, dt)?;
    let inner_h: Vec<GridFunction> = r_nodes
        .iter()
        .zip(&inner.snapshots)
        .map(|(r, u)| to_h_coordinates(phi, u, lambda, *r))
        .collect::<Result<_>>()?;
    let values: Vec<Result<f64>> = s_nodes
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let shg = &inner_h[s_nodes.len() - 1 - k];
            // φ · F_s with F_s = α φ (S^H_{T−s} g)²
            let phi_f = phi.map(|x, p| {
                let v = shg.interp(x);
                p * q.alpha.eval(x, 0.0) * p * v * v
            });
            let r = t_offset + s;
            let u = expectation_semigroup(q, &phi_f, r, dt)?;
            let uh = to_h_coordinates(phi, &u, lambda, r)?;
            Ok(2.0 * (-lambda * r).exp() * nu.pair_grid(&uh))
        })
        .collect();
    let mut integrand = Vec::with_capacity(values.len());
    for v in values {
        integrand.push(v?);
    }
    Ok(TestIntegral { value: simpson(&integrand, horizon), bound })
}

/// `max |L0* (φ φ̃)|` over interior nodes, with `L0*` the transpose of the
/// discretization of the zeroth-order-free operator `l0`.
pub fn invariant_density_check(l0: &EllipticOperator, phi: &GridFunction, phi_tilde: &GridFunction) -> Result<f64> {
    let rho = phi.zip_with(phi_tilde, |a, b| a * b)?;
    let s = l0.stencil(&rho.grid, 0.0)?;
    let v = &rho.values;
    let m = s.size();
    let mut res = 0.0_f64;
    for r in 0..m {
        // column r of the stencil, including the couplings to boundary rows
        let mut acc = s.diag[r] * v[r + 1];
        if r > 0 {
            acc += s.upper[r - 1] * v[r];
        }
        if r + 1 < m {
            acc += s.lower[r + 1] * v[r + 2];
        }
        res = res.max(acc.abs());
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain1D;
    use crate::operators::Coefficient;

    fn heat(beta: f64, half_width: f64) -> BranchingQuadruple {
        let dom = Domain1D::bounded(-half_width, half_width).unwrap();
        BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(beta), Coefficient::constant(1.0))
    }

    #[test]
    fn gaussian_spreads_like_heat_kernel() {
        let q = heat(0.0, 10.0);
        let grid = Grid::new(-10.0, 10.0, 801).unwrap();
        let s0 = 0.5_f64;
        let gauss = |x: f64, v: f64| (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| gauss(x, s0)).unwrap();
        let u = expectation_semigroup(&q, &g, 1.0, Some(0.005)).unwrap();
        let err = (0..grid.nodes).map(|i| (u.values[i] - gauss(grid.x(i), s0 + 1.0)).abs()).fold(0.0, f64::max);
        assert!(err < 5e-4, "{err}");
    }

    #[test]
    fn constant_beta_scales_solution() {
        let grid = Grid::new(-10.0, 10.0, 401).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| (-x * x).exp()).unwrap();
        let u0 = expectation_semigroup(&heat(0.0, 10.0), &g, 1.0, Some(0.01)).unwrap();
        let u1 = expectation_semigroup(&heat(0.7, 10.0), &g, 1.0, Some(0.01)).unwrap();
        for i in 0..grid.nodes {
            assert!((u1.values[i] - 0.7_f64.exp() * u0.values[i]).abs() < 1e-4 * u0.max());
        }
    }

    #[test]
    fn zero_datum_stays_zero() {
        let q = heat(1.0, 5.0);
        let grid = Grid::new(-5.0, 5.0, 101).unwrap();
        let g = GridFunction::zeros(grid, Boundary::DirichletZero);
        let ll = loglaplace_solve(&q, &g, 1.0, None, &[grid.interval()], None).unwrap();
        assert_eq!(ll.flow.last().max_abs(), 0.0);
    }

    #[test]
    fn flat_logistic_reduction() {
        let (beta, alpha, c) = (0.8, 1.5, 0.6);
        let dom = Domain1D::bounded(-30.0, 30.0).unwrap();
        let q = BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(beta), Coefficient::constant(alpha));
        let grid = Grid::new(-30.0, 30.0, 601).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |_| c).unwrap();
        let t = 2.0;
        let u = semilinear_flow(&q, &g, &[t], Some(0.01)).unwrap();
        let e = (beta * t).exp();
        let exact = beta * c * e / (beta + alpha * c * (e - 1.0));
        assert!((u.last().interp(0.0) - exact).abs() < 1e-5, "{} vs {exact}", u.last().interp(0.0));
    }

    #[test]
    fn alpha_zero_matches_linear_solver() {
        let dom = Domain1D::bounded(0.0, 1.0).unwrap();
        let op = EllipticOperator::new(Coefficient::parse("x*(1-x)").unwrap(), Coefficient::parse("x - 0.5").unwrap(), dom);
        let q = BranchingQuadruple::new(op, Coefficient::constant(2.0), Coefficient::zero());
        let grid = Grid::new(0.0, 1.0, 201).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| (10.0 * x).sin().abs()).unwrap();
        let a = semilinear_flow(&q, &g, &[1.0], None).unwrap();
        let b = expectation_flow(&q, &g, &[1.0], None).unwrap();
        for (x, y) in a.last().values.iter().zip(&b.last().values) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn nonnegativity_is_preserved_for_indicator() {
        let q = heat(1.0, 3.0);
        let grid = Grid::new(-3.0, 3.0, 241).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| if x.abs() < 0.5 { 1.0 } else { 0.0 }).unwrap();
        let f = semilinear_flow(&q, &g, &[0.5, 1.0], None).unwrap();
        assert!(f.min_value() >= -1e-12, "{}", f.min_value());
    }

    #[test]
    fn backward_equals_forward_for_homogeneous() {
        let q = heat(0.5, 5.0);
        let grid = Grid::new(-5.0, 5.0, 201).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| (-x * x).exp()).unwrap();
        let b = backward_solve(&q, &g, 0.5, 1.7, Some(0.01)).unwrap();
        let f = semilinear_flow(&q, &g, &[1.2], Some(0.01)).unwrap();
        for (x, y) in b.values.iter().zip(&f.last().values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_flat_oscillating_beta_matches_ode() {
        let dom = Domain1D::bounded(-40.0, 40.0).unwrap();
        let op = EllipticOperator::half_laplacian(dom);
        let q = BranchingQuadruple::new(op, Coefficient::parse("sin(t)").unwrap(), Coefficient::constant(1.0));
        let grid = Grid::new(-40.0, 40.0, 161).unwrap();
        let c = 0.5;
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |_| c).unwrap();
        let (r, t) = (0.3, 3.0);
        let u = backward_solve(&q, &g, r, t, Some(1e-3)).unwrap();
        // scalar oracle: v' = sin(t − s) v − v², v(0) = c, RK4 with a fine step
        let f = |s: f64, v: f64| (t - s).sin() * v - v * v;
        let n = 200_000;
        let h = (t - r) / n as f64;
        let mut v = c;
        for k in 0..n {
            let s = k as f64 * h;
            let k1 = f(s, v);
            let k2 = f(s + h / 2.0, v + h / 2.0 * k1);
            let k3 = f(s + h / 2.0, v + h / 2.0 * k2);
            let k4 = f(s + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((u.interp(0.0) - v).abs() < 1e-6, "{} vs {v}", u.interp(0.0));
    }

    #[test]
    fn laplace_functional_trivial_cases() {
        let q = heat(1.0, 5.0);
        let grid = Grid::new(-5.0, 5.0, 101).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| (-x * x).exp()).unwrap();
        assert_eq!(laplace_functional(&q, &Measure::zero(), &g, 1.0, None, &[grid.interval()]).unwrap(), 1.0);
        let z = GridFunction::zeros(grid, Boundary::DirichletZero);
        assert_eq!(laplace_functional(&q, &Measure::dirac(0.0, 1.0), &z, 1.0, None, &[grid.interval()]).unwrap(), 1.0);
        let v = laplace_functional(&q, &Measure::dirac(0.0, 1.0), &g, 1.0, None, &[grid.interval()]).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let xs: Vec<f64> = (0..=10).map(|i| 2.0 * i as f64 / 10.0).collect();
        let v: Vec<f64> = xs.iter().map(|x| x * x * x - x).collect();
        assert!((simpson(&v, 2.0) - 2.0).abs() < 1e-12);
    }
}
