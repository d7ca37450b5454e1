//! Elliptic operators `L = ½ (a u')' + b u'` on 1-D domains, branching
//! quadruples `(L, β, α; D)` and the h-/H-transform calculus.
//!
//! Operators are stored in divergence form. The diffusion associated with `L`
//! therefore has drift `b + ½ a'` (see [`EllipticOperator::effective_drift`]).
//!
//! Discretization is the second-order conservative stencil
//!
//! ```text
//! (L u)_i ≈ [a_{i+½}(u_{i+1} − u_i) − a_{i−½}(u_i − u_{i−1})] / (2h²)
//!           + b_i (u_{i+1} − u_{i−1}) / (2h)
//! ```
//!
//! on interior nodes, with Dirichlet rows on the two boundary nodes.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{Boundary, Domain1D, Grid, GridFunction};
use crate::tridiag::Tridiag;

/// Step used for finite-difference derivatives of coefficients that are not
/// tied to a grid.
pub const FD_STEP: f64 = 1e-5;

pub type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

fn field(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Field {
    Arc::new(f)
}

/// Scalar coefficient `c(x[, t])` with optional analytic derivatives.
#[derive(Clone)]
pub struct Coefficient {
    eval: Field,
    dx: Option<Field>,
    dt: Option<Field>,
    time_dependent: bool,
    constant: Option<f64>,
    /// `Some(r)` when `c(x, t) = c(x, 0) e^{r t}`.
    growth: Option<f64>,
    label: String,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coefficient({})", self.label)
    }
}

impl Coefficient {
    pub fn new(label: impl Into<String>, time_dependent: bool, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient { eval: field(f), dx: None, dt: None, time_dependent, constant: None, growth: None, label: label.into() }
    }

    /// Time-independent coefficient from a closure in `x`.
    pub fn spatial(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::new(label, false, move |x, _| f(x))
    }

    pub fn constant(c: f64) -> Self {
        Coefficient {
            eval: field(move |_, _| c),
            dx: Some(field(|_, _| 0.0)),
            dt: Some(field(|_, _| 0.0)),
            time_dependent: false,
            constant: Some(c),
            growth: None,
            label: format!("{c}"),
        }
    }

    pub fn zero() -> Self {
        Coefficient::constant(0.0)
    }

    pub fn from_expr(e: Expr) -> Self {
        if let Some(c) = e.as_constant() {
            return Coefficient::constant(c);
        }
        let label = e.to_string();
        let td = e.depends_on_t();
        Coefficient::new(label, td, move |x, t| e.eval(x, t))
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut c = Coefficient::from_expr(Expr::parse(src)?);
        if c.constant.is_none() {
            c.label = src.trim().to_string();
        }
        Ok(c)
    }

    /// Piecewise-linear coefficient through the values of a grid function.
    /// The derivative is the interpolated nodal centered difference.
    pub fn from_grid(label: impl Into<String>, g: &GridFunction) -> Self {
        let g1 = g.clone();
        let d = g.derivative();
        Coefficient {
            eval: field(move |x, _| g1.interp(x)),
            dx: Some(field(move |x, _| d.interp(x))),
            dt: Some(field(|_, _| 0.0)),
            time_dependent: false,
            constant: None,
            growth: None,
            label: label.into(),
        }
    }

    pub fn with_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.dx = Some(field(f));
        self
    }

    pub fn with_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.dt = Some(field(f));
        self
    }

    #[inline]
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        (self.eval)(x, t)
    }

    /// Spatial derivative; centered difference with `step` when no analytic
    /// form was supplied.
    pub fn dx(&self, x: f64, t: f64, step: f64) -> f64 {
        match &self.dx {
            Some(d) => d(x, t),
            None => (self.eval(x + step, t) - self.eval(x - step, t)) / (2.0 * step),
        }
    }

    pub fn dt(&self, x: f64, t: f64, step: f64) -> f64 {
        if !self.time_dependent {
            return 0.0;
        }
        match &self.dt {
            Some(d) => d(x, t),
            None => (self.eval(x, t + step) - self.eval(x, (t - step).max(0.0))) / (t + step - (t - step).max(0.0)),
        }
    }

    pub fn has_analytic_dx(&self) -> bool {
        self.dx.is_some()
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    /// Rate `r` with `c(x, t) = c(x, 0) e^{r t}`, if known; zero for
    /// time-independent coefficients.
    pub fn time_growth(&self) -> Option<f64> {
        if self.time_dependent { self.growth } else { Some(0.0) }
    }

    /// Declares `c(x, t) = c(x, 0) e^{r t}`.
    pub fn with_growth(mut self, r: f64) -> Self {
        self.growth = Some(r);
        self
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sum(&self, other: &Coefficient) -> Coefficient {
        if let (Some(a), Some(b)) = (self.constant, other.constant) {
            return Coefficient::constant(a + b);
        }
        let (f, g) = (self.clone(), other.clone());
        let dx = match (&self.dx, &other.dx) {
            (Some(a), Some(b)) => {
                let (a, b) = (a.clone(), b.clone());
                Some(field(move |x, t| a(x, t) + b(x, t)))
            }
            _ => None,
        };
        Coefficient {
            eval: field(move |x, t| f.eval(x, t) + g.eval(x, t)),
            dx,
            dt: None,
            time_dependent: self.time_dependent || other.time_dependent,
            constant: None,
            growth: None,
            label: format!("({}) + ({})", self.label, other.label),
        }
    }

    pub fn scaled(&self, c: f64) -> Coefficient {
        if let Some(v) = self.constant {
            return Coefficient::constant(c * v);
        }
        let f = self.clone();
        let dx = self.dx.clone().map(|d| field(move |x, t| c * d(x, t)));
        Coefficient {
            eval: field(move |x, t| c * f.eval(x, t)),
            dx,
            dt: None,
            time_dependent: self.time_dependent,
            constant: None,
            growth: self.growth,
            label: format!("{c} * ({})", self.label),
        }
    }

    fn relabel(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

/// `L = ½ (a u')' + b u'` on `domain`.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    pub a: Coefficient,
    pub b: Coefficient,
    pub domain: Domain1D,
}

impl EllipticOperator {
    pub fn new(a: Coefficient, b: Coefficient, domain: Domain1D) -> Self {
        EllipticOperator { a, b, domain }
    }

    /// `½ d²/dx²` on `domain`.
    pub fn half_laplacian(domain: Domain1D) -> Self {
        EllipticOperator::new(Coefficient::constant(1.0), Coefficient::zero(), domain)
    }

    pub fn is_time_dependent(&self) -> bool {
        self.a.is_time_dependent() || self.b.is_time_dependent()
    }

    /// Drift of the diffusion generated by `L`: `b + ½ a'`.
    pub fn effective_drift(&self, x: f64, t: f64, step: f64) -> f64 {
        self.b.eval(x, t) + 0.5 * self.a.dx(x, t, step)
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.lo < self.domain.left || grid.hi > self.domain.right {
            return Err(Error::Domain(format!(
                "grid [{}, {}] leaves the domain ({}, {})",
                grid.lo, grid.hi, self.domain.left, self.domain.right
            )));
        }
        Ok(())
    }

    /// Interior-node stencil of `L` at time `t`. `lower[0]` and
    /// `upper[m-1]` hold the couplings to the two boundary nodes.
    pub fn stencil(&self, grid: &Grid, t: f64) -> Result<Tridiag> {
        self.check_grid(grid)?;
        let h = grid.spacing();
        let m = grid.interior();
        let mut s = Tridiag::zeros(m);
        let inv2h2 = 1.0 / (2.0 * h * h);
        let inv2h = 1.0 / (2.0 * h);
        for r in 0..m {
            let x = grid.x(r + 1);
            let am = self.a.eval(x - 0.5 * h, t);
            let ap = self.a.eval(x + 0.5 * h, t);
            if am < 0.0 || ap < 0.0 || !am.is_finite() || !ap.is_finite() {
                return Err(Error::Coefficient(format!(
                    "diffusion coefficient invalid near x = {x}: a = ({am}, {ap})"
                )));
            }
            let b = self.b.eval(x, t);
            if !b.is_finite() {
                return Err(Error::Coefficient(format!("drift not finite at x = {x}")));
            }
            s.lower[r] = am * inv2h2 - b * inv2h;
            s.diag[r] = -(am + ap) * inv2h2;
            s.upper[r] = ap * inv2h2 + b * inv2h;
        }
        Ok(s)
    }
}

/// Finite-difference application of `L` to `u` at time `t`.
///
/// Interior rows use the stencil with `u`'s own boundary values; boundary
/// rows are zero for Dirichlet data and linearly extrapolated otherwise.
pub fn apply_operator(op: &EllipticOperator, u: &GridFunction, t: f64) -> Result<GridFunction> {
    let s = op.stencil(&u.grid, t)?;
    let v = &u.values;
    let n = v.len();
    let mut out = vec![0.0; n];
    for r in 0..n - 2 {
        out[r + 1] = s.lower[r] * v[r] + s.diag[r] * v[r + 1] + s.upper[r] * v[r + 2];
    }
    match u.boundary {
        Boundary::DirichletZero => {}
        Boundary::Free => {
            out[0] = 2.0 * out[1] - out[2];
            out[n - 1] = 2.0 * out[n - 2] - out[n - 3];
        }
    }
    GridFunction::new(u.grid, out, u.boundary)
}

/// The model `(L, β, α; D)`.
#[derive(Debug, Clone)]
pub struct BranchingQuadruple {
    pub op: EllipticOperator,
    pub beta: Coefficient,
    pub alpha: Coefficient,
}

impl BranchingQuadruple {
    pub fn new(op: EllipticOperator, beta: Coefficient, alpha: Coefficient) -> Self {
        BranchingQuadruple { op, beta, alpha }
    }

    pub fn domain(&self) -> &Domain1D {
        &self.op.domain
    }

    pub fn is_time_dependent(&self) -> bool {
        self.op.is_time_dependent() || self.beta.is_time_dependent() || self.alpha.is_time_dependent()
    }

    /// Dirichlet discretization of `L + β` on the interior nodes of `grid`.
    pub fn matrix(&self, grid: &Grid, t: f64) -> Result<Tridiag> {
        let mut m = self.op.stencil(grid, t)?;
        for r in 0..m.size() {
            let bv = self.beta.eval(grid.x(r + 1), t);
            if !bv.is_finite() {
                return Err(Error::Coefficient(format!("β not finite at x = {}", grid.x(r + 1))));
            }
            m.diag[r] += bv;
        }
        Ok(m)
    }

    /// α > 0 on interior nodes and β with a finite maximum.
    pub fn validate_on(&self, grid: &Grid, t: f64) -> Result<()> {
        for i in 1..grid.nodes - 1 {
            let x = grid.x(i);
            let a = self.alpha.eval(x, t);
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Coefficient(format!("α must be positive, got {a} at x = {x}")));
            }
            if !self.beta.eval(x, t).is_finite() {
                return Err(Error::Coefficient(format!("β not finite at x = {x}")));
            }
        }
        Ok(())
    }

    pub fn max_beta(&self, grid: &Grid, t: f64) -> f64 {
        (1..grid.nodes - 1)
            .map(|i| self.beta.eval(grid.x(i), t))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn with_alpha(&self, alpha: Coefficient) -> Self {
        BranchingQuadruple { op: self.op.clone(), beta: self.beta.clone(), alpha }
    }

    pub fn with_beta(&self, beta: Coefficient) -> Self {
        BranchingQuadruple { op: self.op.clone(), beta, alpha: self.alpha.clone() }
    }
}

/// Positive space-time weight `H(x, t)`.
#[derive(Clone)]
pub struct SpaceTimeWeight {
    value: Field,
    grad_x: Field,
    d_t: Field,
    grad_xx: Option<Field>,
    /// `H = e^{rate t} h(x)`: ratios `H_x/H` and `H_t/H` do not depend on `t`.
    separable_rate: Option<f64>,
    /// Precomputed `a H_x / H` for the operator the weight was built against.
    drift_correction: Option<Field>,
    /// Precomputed `(L H) / H` for the operator the weight was built against.
    generator_ratio: Option<Field>,
    label: String,
}

impl fmt::Debug for SpaceTimeWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpaceTimeWeight({})", self.label)
    }
}

impl SpaceTimeWeight {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        d_t: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SpaceTimeWeight {
            value: field(value),
            grad_x: field(grad_x),
            d_t: field(d_t),
            grad_xx: None,
            separable_rate: None,
            drift_correction: None,
            generator_ratio: None,
            label: label.into(),
        }
    }

    pub fn with_second_derivative(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.grad_xx = Some(field(f));
        self
    }

    /// `H ≡ 1`.
    pub fn unit() -> Self {
        let mut w = SpaceTimeWeight::new("1", |_, _| 1.0, |_, _| 0.0, |_, _| 0.0).with_second_derivative(|_, _| 0.0);
        w.separable_rate = Some(0.0);
        w
    }

    /// `H(x, t) = e^{rate t} h(x)` with analytic `h`, `h'`, `h''`.
    pub fn separable(
        label: impl Into<String>,
        rate: f64,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dh: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2h: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let h = Arc::new(h);
        let h2 = h.clone();
        let mut w = SpaceTimeWeight::new(
            label,
            move |x, t| (rate * t).exp() * h(x),
            move |x, t| (rate * t).exp() * dh(x),
            move |x, t| rate * (rate * t).exp() * h2(x),
        )
        .with_second_derivative(move |x, t| (rate * t).exp() * d2h(x));
        w.separable_rate = Some(rate);
        w
    }

    /// Ground-state weight `H(x, t) = e^{−λ t} φ(x)` for a numerically
    /// computed `φ` on a Dirichlet grid.
    ///
    /// `a φ'/φ` and `(L φ)/φ` are tabulated at the nodes with the same
    /// stencil as [`BranchingQuadruple::matrix`], so the zeroth-order part of
    /// the transformed quadruple at a node equals the eigen-residual of that
    /// node divided by `φ`.
    pub fn ground_state(q: &BranchingQuadruple, phi: &GridFunction, lambda: f64) -> Result<Self> {
        if q.is_time_dependent() {
            return Err(Error::NotApplicable("ground-state weight needs a time-homogeneous quadruple".into()));
        }
        let grid = phi.grid;
        if let Some(i) = phi.interior().iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Positivity(format!("φ not positive at interior node {}", i + 1)));
        }
        let stencil = q.op.stencil(&grid, 0.0)?;
        let n = grid.nodes;
        let h = grid.spacing();
        let v = &phi.values;
        let mut ratio = vec![0.0; n];
        let mut corr = vec![0.0; n];
        for r in 0..n - 2 {
            let i = r + 1;
            let lphi = stencil.lower[r] * v[i - 1] + stencil.diag[r] * v[i] + stencil.upper[r] * v[i + 1];
            ratio[i] = lphi / v[i];
            corr[i] = q.op.a.eval(grid.x(i), 0.0) * (v[i + 1] - v[i - 1]) / (2.0 * h * v[i]);
        }
        extrapolate_ends(&mut ratio);
        extrapolate_ends(&mut corr);
        let ratio = GridFunction::new(grid, ratio, Boundary::Free)?;
        let corr = GridFunction::new(grid, corr, Boundary::Free)?;
        let dphi = phi.derivative();
        let mut d2 = vec![0.0; n];
        for i in 1..n - 1 {
            d2[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h);
        }
        extrapolate_ends(&mut d2);
        let d2phi = GridFunction::new(grid, d2, Boundary::Free)?;
        let (p0, p1, p2) = (phi.clone(), phi.clone(), dphi);
        let mut w = SpaceTimeWeight::new(
            format!("exp(-{lambda} t) φ_c"),
            move |x, t| (-lambda * t).exp() * p0.interp(x),
            move |x, t| (-lambda * t).exp() * p2.interp(x),
            move |x, t| -lambda * (-lambda * t).exp() * p1.interp(x),
        )
        .with_second_derivative(move |x, t| (-lambda * t).exp() * d2phi.interp(x));
        w.separable_rate = Some(-lambda);
        w.drift_correction = Some(field(move |x, _| corr.interp(x)));
        w.generator_ratio = Some(field(move |x, _| ratio.interp(x)));
        Ok(w)
    }

    /// Pointwise product `H₁ H₂`.
    pub fn product(&self, other: &SpaceTimeWeight) -> SpaceTimeWeight {
        let (a, b) = (self.clone(), other.clone());
        let (a1, b1) = (self.clone(), other.clone());
        let (a2, b2) = (self.clone(), other.clone());
        let (a3, b3) = (self.clone(), other.clone());
        let mut w = SpaceTimeWeight::new(
            format!("({}) ({})", self.label, other.label),
            move |x, t| a.value(x, t) * b.value(x, t),
            move |x, t| a1.grad_x(x, t) * b1.value(x, t) + a1.value(x, t) * b1.grad_x(x, t),
            move |x, t| a2.d_t(x, t) * b2.value(x, t) + a2.value(x, t) * b2.d_t(x, t),
        )
        .with_second_derivative(move |x, t| {
            a3.grad_xx(x, t, FD_STEP) * b3.value(x, t)
                + 2.0 * a3.grad_x(x, t) * b3.grad_x(x, t)
                + a3.value(x, t) * b3.grad_xx(x, t, FD_STEP)
        });
        if let (Some(r1), Some(r2)) = (self.separable_rate, other.separable_rate) {
            w.separable_rate = Some(r1 + r2);
        }
        w
    }

    #[inline]
    pub fn value(&self, x: f64, t: f64) -> f64 {
        (self.value)(x, t)
    }

    pub fn grad_x(&self, x: f64, t: f64) -> f64 {
        (self.grad_x)(x, t)
    }

    pub fn d_t(&self, x: f64, t: f64) -> f64 {
        (self.d_t)(x, t)
    }

    pub fn grad_xx(&self, x: f64, t: f64, step: f64) -> f64 {
        match &self.grad_xx {
            Some(f) => f(x, t),
            None => (self.grad_x(x + step, t) - self.grad_x(x - step, t)) / (2.0 * step),
        }
    }

    pub fn separable_rate(&self) -> Option<f64> {
        self.separable_rate
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `(L H)/H` at `(x, t)` for operator `op`.
    pub fn generator_ratio(&self, op: &EllipticOperator, x: f64, t: f64) -> f64 {
        if let Some(g) = &self.generator_ratio {
            return g(x, t);
        }
        let h = self.value(x, t);
        let hx = self.grad_x(x, t);
        let hxx = self.grad_xx(x, t, FD_STEP);
        let a = op.a.eval(x, t);
        let ax = op.a.dx(x, t, FD_STEP);
        let b = op.b.eval(x, t);
        (0.5 * ax * hx + 0.5 * a * hxx + b * hx) / h
    }

    fn drift_correction(&self, op: &EllipticOperator, x: f64, t: f64) -> f64 {
        if let Some(c) = &self.drift_correction {
            return c(x, t);
        }
        op.a.eval(x, t) * self.grad_x(x, t) / self.value(x, t)
    }
}

fn extrapolate_ends(v: &mut [f64]) {
    let n = v.len();
    v[0] = 2.0 * v[1] - v[2];
    v[n - 1] = 2.0 * v[n - 2] - v[n - 3];
}

/// Positive function `h` used in a spatial h-transform.
#[derive(Debug, Clone)]
pub enum PositiveFunction {
    Grid(GridFunction),
    Analytic(Coefficient),
}

/// Doob h-transform of the operator: `L + a (h'/h) d/dx`. The result has
/// no zeroth-order part.
pub fn h_transform_operator(op: &EllipticOperator, h: &PositiveFunction) -> Result<EllipticOperator> {
    let b = op.b.clone();
    let a = op.a.clone();
    let new_b = match h {
        PositiveFunction::Analytic(hc) => {
            let hc = hc.clone();
            let hc2 = hc.clone();
            let td = op.is_time_dependent() || hc.is_time_dependent();
            // positivity is checked lazily where evaluated; spot-check the domain
            let check = op.domain.largest();
            for k in 1..64 {
                let x = check.lo + check.len() * k as f64 / 64.0;
                let v = hc2.eval(x, 0.0);
                if !(v > 0.0) {
                    return Err(Error::Positivity(format!("h = {v} at x = {x}")));
                }
            }
            Coefficient::new(format!("{} + a h'/h", op.b.label()), td, move |x, t| {
                b.eval(x, t) + a.eval(x, t) * hc.dx(x, t, FD_STEP) / hc.eval(x, t)
            })
        }
        PositiveFunction::Grid(g) => {
            if let Some(i) = g.interior().iter().position(|v| !(*v > 0.0)) {
                return Err(Error::Positivity(format!("h not positive at interior node {}", i + 1)));
            }
            let grid = g.grid;
            let h = grid.spacing();
            let v = &g.values;
            let n = v.len();
            let mut ratio = vec![0.0; n];
            for i in 1..n - 1 {
                ratio[i] = (v[i + 1] - v[i - 1]) / (2.0 * h * v[i]);
            }
            if op.a.is_time_dependent() {
                extrapolate_ends(&mut ratio);
                let ratio = GridFunction::new(grid, ratio, Boundary::Free)?;
                Coefficient::new(format!("{} + a h'/h", op.b.label()), true, move |x, t| {
                    b.eval(x, t) + a.eval(x, t) * ratio.interp(x)
                })
            } else {
                // a h'/h stays bounded at degenerate boundaries even where h'/h does not
                let mut corr: Vec<f64> = (0..n).map(|i| if i == 0 || i == n - 1 { 0.0 } else { op.a.eval(grid.x(i), 0.0) * ratio[i] }).collect();
                extrapolate_ends(&mut corr);
                let corr = GridFunction::new(grid, corr, Boundary::Free)?;
                Coefficient::new(format!("{} + a h'/h", op.b.label()), op.b.is_time_dependent(), move |x, t| {
                    b.eval(x, t) + corr.interp(x)
                })
            }
        }
    };
    Ok(EllipticOperator::new(op.a.clone(), new_b, op.domain.clone()))
}

/// Space-time H-transform of a quadruple:
/// `(L + a (H_x/H) d/dx, β + (L H)/H + H_t/H, α H; D)`.
pub fn h_transform_quadruple(q: &BranchingQuadruple, w: &SpaceTimeWeight) -> Result<BranchingQuadruple> {
    let dom = q.op.domain.largest();
    for k in 1..64 {
        let x = dom.lo + dom.len() * k as f64 / 64.0;
        let v = w.value(x, 0.0);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Positivity(format!("H(x = {x}, 0) = {v}")));
        }
    }
    let separable = w.separable_rate.is_some();
    let op_td = q.op.is_time_dependent();

    let (b, op1, w1) = (q.op.b.clone(), q.op.clone(), w.clone());
    let new_b = Coefficient::new(
        format!("{} + a H_x/H", q.op.b.label()),
        op_td || !separable,
        move |x, t| b.eval(x, t) + w1.drift_correction(&op1, x, t),
    );

    let (beta, op2, w2) = (q.beta.clone(), q.op.clone(), w.clone());
    let new_beta = Coefficient::new(
        format!("{} + LH/H + H_t/H", q.beta.label()),
        op_td || q.beta.is_time_dependent() || !separable,
        move |x, t| {
            let ht = match w2.separable_rate {
                Some(r) => r,
                None => w2.d_t(x, t) / w2.value(x, t),
            };
            beta.eval(x, t) + w2.generator_ratio(&op2, x, t) + ht
        },
    );

    let (alpha, w3) = (q.alpha.clone(), w.clone());
    let time_free = w.separable_rate == Some(0.0);
    let mut new_alpha = Coefficient::new(
        format!("({}) H", q.alpha.label()),
        q.alpha.is_time_dependent() || !time_free,
        move |x, t| alpha.eval(x, t) * w3.value(x, t),
    );
    if let (Some(ra), Some(rh)) = (q.alpha.time_growth(), w.separable_rate) {
        new_alpha = new_alpha.with_growth(ra + rh);
    }

    let op = EllipticOperator::new(q.op.a.clone(), new_b, q.op.domain.clone());
    Ok(BranchingQuadruple::new(op, new_beta, new_alpha))
}

/// Formal adjoint `½ (a v')' − (b v)' + β v`, written in non-divergence form
/// `c2 v'' + c1 v' + c0 v` with `c2 = ½ a`, `c1 = ½ a' − b`, `c0 = β − b'`.
///
/// Its discretization is the exact transpose of the discretization of
/// `L + β`.
#[derive(Debug, Clone)]
pub struct AdjointOperator {
    pub op: EllipticOperator,
    pub beta: Coefficient,
}

impl AdjointOperator {
    pub fn c2(&self, x: f64, t: f64) -> f64 {
        0.5 * self.op.a.eval(x, t)
    }

    pub fn c1(&self, x: f64, t: f64, step: f64) -> f64 {
        0.5 * self.op.a.dx(x, t, step) - self.op.b.eval(x, t)
    }

    pub fn c0(&self, x: f64, t: f64, step: f64) -> f64 {
        self.beta.eval(x, t) - self.op.b.dx(x, t, step)
    }

    pub fn matrix(&self, grid: &Grid, t: f64) -> Result<Tridiag> {
        let q = BranchingQuadruple::new(self.op.clone(), self.beta.clone(), Coefficient::constant(1.0));
        Ok(q.matrix(grid, t)?.transpose())
    }
}

pub fn adjoint_operator(op: &EllipticOperator, beta: &Coefficient) -> AdjointOperator {
    AdjointOperator { op: op.clone(), beta: beta.clone() }
}

/// Max-norm over interior nodes of `L_0^φ u − φ⁻¹ (L + β − λ)(φ u)`, with
/// `L_0^φ` the h-transformed operator of [`h_transform_operator`].
pub fn conjugation_check(q: &BranchingQuadruple, phi: &GridFunction, lambda: f64, u: &GridFunction) -> Result<f64> {
    if phi.grid != u.grid {
        return Err(Error::Domain("φ and u must share a grid".into()));
    }
    let l0 = h_transform_operator(&q.op, &PositiveFunction::Grid(phi.clone()))?;
    let mut u_free = u.clone();
    u_free.boundary = Boundary::Free;
    let lhs = apply_operator(&l0, &u_free, 0.0)?;
    let grid = phi.grid;
    let s = q.matrix(&grid, 0.0)?;
    let n = grid.nodes;
    let w: Vec<f64> = phi.values.iter().zip(&u.values).map(|(p, v)| p * v).collect();
    let mut res = 0.0_f64;
    for r in 0..n - 2 {
        let i = r + 1;
        let rhs = (s.lower[r] * w[i - 1] + (s.diag[r] - lambda) * w[i] + s.upper[r] * w[i + 1]) / phi.values[i];
        res = res.max((lhs.values[i] - rhs).abs());
    }
    Ok(res)
}

impl From<Coefficient> for PositiveFunction {
    fn from(c: Coefficient) -> Self {
        PositiveFunction::Analytic(c)
    }
}

impl From<GridFunction> for PositiveFunction {
    fn from(g: GridFunction) -> Self {
        PositiveFunction::Grid(g)
    }
}

#[doc(hidden)]
pub fn relabel(c: Coefficient, label: &str) -> Coefficient {
    c.relabel(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Interval;

    fn unit_domain() -> Domain1D {
        Domain1D::bounded(0.0, 1.0).unwrap()
    }

    fn wright_fisher_op() -> EllipticOperator {
        EllipticOperator::new(
            Coefficient::parse("x*(1-x)").unwrap(),
            Coefficient::parse("x - 0.5").unwrap(),
            unit_domain(),
        )
    }

    #[test]
    fn half_laplacian_of_square_is_one() {
        let op = EllipticOperator::half_laplacian(unit_domain());
        let g = Grid::new(0.0, 1.0, 41).unwrap();
        let u = GridFunction::from_fn(g, Boundary::Free, |x| x * x).unwrap();
        let lu = apply_operator(&op, &u, 0.0).unwrap();
        for v in &lu.values {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn drift_term_second_order() {
        let dom = Domain1D::bounded(0.0, 3.0).unwrap();
        let op = EllipticOperator::new(Coefficient::constant(1.0), Coefficient::constant(1.0), dom);
        let mut errs = Vec::new();
        for &n in &[51usize, 101, 201] {
            let g = Grid::new(0.0, 3.0, n).unwrap();
            let u = GridFunction::from_fn(g, Boundary::Free, f64::sin).unwrap();
            let lu = apply_operator(&op, &u, 0.0).unwrap();
            let err = (1..n - 1)
                .map(|i| {
                    let x = g.x(i);
                    (lu.values[i] - (-0.5 * x.sin() + x.cos())).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn wright_fisher_on_x_one_minus_x() {
        // symbolic: ½ x(1-x) (x(1-x))'' = -x(1-x)
        let op = wright_fisher_op();
        let g = Grid::new(0.0, 1.0, 201).unwrap();
        let h = g.spacing();
        let u = GridFunction::from_fn(g, Boundary::DirichletZero, |x| x * (1.0 - x)).unwrap();
        let lu = apply_operator(&op, &u, 0.0).unwrap();
        for i in 1..200 {
            let x = g.x(i);
            assert!((lu.values[i] + x * (1.0 - x)).abs() <= 0.25 * h * h + 1e-12);
        }
    }

    #[test]
    fn grid_outside_domain_is_rejected() {
        let op = wright_fisher_op();
        let g = Grid::new(-0.1, 1.0, 11).unwrap();
        let u = GridFunction::zeros(g, Boundary::Free);
        assert!(matches!(apply_operator(&op, &u, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn h_transform_by_constant_is_identity() {
        let op = wright_fisher_op();
        let g = Grid::new(0.0, 1.0, 101).unwrap();
        let one = GridFunction::from_fn(g, Boundary::Free, |_| 3.0).unwrap();
        let t = h_transform_operator(&op, &PositiveFunction::Grid(one)).unwrap();
        let s0 = op.stencil(&g, 0.0).unwrap();
        let s1 = t.stencil(&g, 0.0).unwrap();
        assert_eq!(s0, s1);
        let tc = h_transform_operator(&op, &Coefficient::constant(2.0).into()).unwrap();
        assert_eq!(tc.stencil(&g, 0.0).unwrap(), s0);
    }

    #[test]
    fn h_transform_by_exponential_adds_unit_drift() {
        let dom = Domain1D::bounded(0.0, 1.0).unwrap();
        let op = EllipticOperator::half_laplacian(dom);
        let h = Coefficient::spatial("exp(x)", f64::exp).with_dx(|x, _| x.exp());
        let t = h_transform_operator(&op, &h.into()).unwrap();
        for &x in &[0.1, 0.5, 0.9] {
            assert!((t.b.eval(x, 0.0) - 1.0).abs() < 1e-14);
        }
        // FD fallback stays within O(step²)
        let hf = Coefficient::spatial("exp(x)", f64::exp);
        let tf = h_transform_operator(&op, &hf.into()).unwrap();
        assert!((tf.b.eval(0.3, 0.0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn h_transform_rejects_nonpositive() {
        let op = wright_fisher_op();
        let g = Grid::new(0.0, 1.0, 11).unwrap();
        let mut v = vec![1.0; 11];
        v[5] = 0.0;
        let h = GridFunction::new(g, v, Boundary::Free).unwrap();
        assert!(matches!(h_transform_operator(&op, &PositiveFunction::Grid(h)), Err(Error::Positivity(_))));
        let neg = Coefficient::spatial("x - 0.5", |x| x - 0.5);
        assert!(matches!(h_transform_operator(&op, &neg.into()), Err(Error::Positivity(_))));
    }

    #[test]
    fn unit_weight_leaves_quadruple_unchanged() {
        let q = BranchingQuadruple::new(wright_fisher_op(), Coefficient::constant(2.0), Coefficient::parse("1 + x").unwrap());
        let t = h_transform_quadruple(&q, &SpaceTimeWeight::unit()).unwrap();
        for &x in &[0.1, 0.37, 0.8] {
            for &s in &[0.0, 1.5] {
                assert_eq!(t.op.b.eval(x, s), q.op.b.eval(x, s));
                assert!((t.beta.eval(x, s) - 2.0).abs() < 1e-12);
                assert_eq!(t.alpha.eval(x, s), 1.0 + x);
            }
        }
        assert!(!t.is_time_dependent());
    }

    #[test]
    fn analytic_ground_state_zeroes_beta() {
        // ½Δ + β on (0, π): φ = sin, λ = β − ½
        let dom = Domain1D::bounded(0.0, std::f64::consts::PI).unwrap();
        let beta = 0.7;
        let q = BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(beta), Coefficient::constant(1.0));
        let lambda = beta - 0.5;
        let w = SpaceTimeWeight::separable("sin", -lambda, f64::sin, f64::cos, |x| -x.sin());
        let t = h_transform_quadruple(&q, &w).unwrap();
        for k in 1..50 {
            let x = std::f64::consts::PI * k as f64 / 50.0;
            assert!(t.beta.eval(x, 0.3).abs() < 1e-12);
            assert!((t.alpha.eval(x, 2.0) - x.sin() * (-lambda * 2.0).exp()).abs() < 1e-14);
            assert!((t.op.b.eval(x, 1.0) - x.cos() / x.sin()).abs() < 1e-12);
        }
        assert!(!t.beta.is_time_dependent());
        assert!(t.alpha.is_time_dependent());
        assert_eq!(t.alpha.time_growth(), Some(-lambda));
        assert_eq!(t.beta.time_growth(), Some(0.0));
    }

    #[test]
    fn transforms_compose() {
        let dom = Domain1D::new(f64::NEG_INFINITY, f64::INFINITY, vec![Interval::new(-2.0, 2.0).unwrap()]).unwrap();
        let op = EllipticOperator::new(Coefficient::parse("1 + 0.5*sin(x)").unwrap(), Coefficient::parse("0.3*x").unwrap(), dom);
        let q = BranchingQuadruple::new(op, Coefficient::parse("cos(x)").unwrap(), Coefficient::constant(1.0));
        let h1 = SpaceTimeWeight::new(
            "exp(x - t)",
            |x, t| (x - t).exp(),
            |x, t| (x - t).exp(),
            |x, t| -(x - t).exp(),
        )
        .with_second_derivative(|x, t| (x - t).exp());
        let h2 = SpaceTimeWeight::new(
            "(1 + x^2)(1 + t)",
            |x, t| (1.0 + x * x) * (1.0 + t),
            |x, t| 2.0 * x * (1.0 + t),
            |x, _| 1.0 + x * x,
        )
        .with_second_derivative(|_, t| 2.0 * (1.0 + t));
        let two_step = h_transform_quadruple(&h_transform_quadruple(&q, &h1).unwrap(), &h2).unwrap();
        let one_step = h_transform_quadruple(&q, &h1.product(&h2)).unwrap();
        for &x in &[-1.5, -0.2, 0.4, 1.7] {
            for &t in &[0.0, 0.6] {
                assert!((two_step.op.b.eval(x, t) - one_step.op.b.eval(x, t)).abs() < 1e-6);
                assert!((two_step.beta.eval(x, t) - one_step.beta.eval(x, t)).abs() < 1e-5);
                assert!((two_step.alpha.eval(x, t) - one_step.alpha.eval(x, t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_of_wright_fisher_plus_one() {
        // ½ x(1-x) v'' + (1 − 2x) v' with zeroth-order part β − b' = γ − 1
        let gamma = 2.0;
        let adj = adjoint_operator(&wright_fisher_op(), &Coefficient::constant(gamma));
        for &x in &[0.1, 0.3, 0.77] {
            assert!((adj.c2(x, 0.0) - 0.5 * x * (1.0 - x)).abs() < 1e-15);
            assert!((adj.c1(x, 0.0, 1e-4) - (1.0 - 2.0 * x)).abs() < 1e-9);
            assert!((adj.c0(x, 0.0, 1e-4) - (gamma - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn half_laplacian_discretization_is_symmetric() {
        let dom = Domain1D::bounded(0.0, std::f64::consts::PI).unwrap();
        let adj = adjoint_operator(&EllipticOperator::half_laplacian(dom), &Coefficient::zero());
        let g = Grid::new(0.0, std::f64::consts::PI, 30).unwrap();
        let m = adj.matrix(&g, 0.0).unwrap().to_dense();
        for i in 0..m.len() {
            for j in 0..m.len() {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn conjugation_residual_zero_for_constant_u() {
        let dom = Domain1D::bounded(0.0, std::f64::consts::PI).unwrap();
        let q = BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::zero(), Coefficient::constant(1.0));
        let g = Grid::new(0.0, std::f64::consts::PI, 101).unwrap();
        let h = g.spacing();
        let phi = GridFunction::from_fn(g, Boundary::DirichletZero, f64::sin).unwrap();
        // exact discrete eigenvalue of the stencil for sin
        let lambda = -(1.0 - h.cos()) / (h * h);
        let one = GridFunction::from_fn(g, Boundary::Free, |_| 1.0).unwrap();
        let r = conjugation_check(&q, &phi, lambda, &one).unwrap();
        assert!(r < 1e-9, "{r}");
    }
}
