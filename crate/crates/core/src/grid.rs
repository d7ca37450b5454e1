//! Uniform 1-D grids, grid functions, domains and finite measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo.is_nan() || hi.is_nan() {
            return Err(Error::Domain(format!("interval endpoints not ordered: ({lo}, {hi})")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains_open(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    /// `self` sits inside `other`, strictly away from every finite endpoint of
    /// `other` unless the two endpoints coincide and `allow_touch` is set.
    fn inside(&self, other: &Interval, allow_touch: bool) -> bool {
        let lo_ok = self.lo > other.lo || (allow_touch && self.lo == other.lo);
        let hi_ok = self.hi < other.hi || (allow_touch && self.hi == other.hi);
        lo_ok && hi_ok
    }
}

/// Spatial domain `D = (left, right)`, possibly unbounded, together with an
/// exhausting sequence of bounded truncations.
///
/// For bounded domains the last truncation may coincide with `D` itself; the
/// solvers then impose Dirichlet rows on the true boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain1D {
    pub left: f64,
    pub right: f64,
    pub truncations: Vec<Interval>,
}

impl Domain1D {
    pub fn new(left: f64, right: f64, truncations: Vec<Interval>) -> Result<Self> {
        if !(left < right) {
            return Err(Error::Domain(format!("domain endpoints not ordered: ({left}, {right})")));
        }
        if truncations.is_empty() {
            return Err(Error::Domain("at least one truncation is required".into()));
        }
        let whole = Interval { lo: left, hi: right };
        for (k, a) in truncations.iter().enumerate() {
            if !a.is_bounded() {
                return Err(Error::Domain(format!("truncation {k} is unbounded")));
            }
            if !a.inside(&whole, true) {
                return Err(Error::Domain(format!(
                    "truncation {k} = ({}, {}) is not contained in ({left}, {right})",
                    a.lo, a.hi
                )));
            }
            if k > 0 {
                let prev = &truncations[k - 1];
                // Strict nesting, except that both may touch a finite endpoint of D.
                let lo_ok = a.lo < prev.lo || (a.lo == prev.lo && a.lo == left);
                let hi_ok = a.hi > prev.hi || (a.hi == prev.hi && a.hi == right);
                if !(lo_ok && hi_ok) || (a.lo == prev.lo && a.hi == prev.hi) {
                    return Err(Error::Domain(format!("truncation {k} does not strictly contain truncation {}", k - 1)));
                }
            }
        }
        Ok(Domain1D { left, right, truncations })
    }

    /// Bounded domain whose single truncation is the domain itself.
    pub fn bounded(left: f64, right: f64) -> Result<Self> {
        Domain1D::new(left, right, vec![Interval::new(left, right)?])
    }

    pub fn is_bounded(&self) -> bool {
        self.left.is_finite() && self.right.is_finite()
    }

    pub fn largest(&self) -> Interval {
        *self.truncations.last().expect("non-empty by construction")
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.left && x < self.right
    }
}

/// Uniform grid with `nodes` points on `[lo, hi]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if nodes < 3 {
            return Err(Error::Domain(format!("grid needs at least 3 nodes, got {nodes}")));
        }
        Interval::new(lo, hi)?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain("grid endpoints must be finite".into()));
        }
        Ok(Grid { lo, hi, nodes })
    }

    pub fn on(iv: Interval, nodes: usize) -> Result<Self> {
        Grid::new(iv.lo, iv.hi, nodes)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.nodes - 1 {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.x(i)).collect()
    }

    pub fn interval(&self) -> Interval {
        Interval { lo: self.lo, hi: self.hi }
    }

    /// Number of interior nodes.
    pub fn interior(&self) -> usize {
        self.nodes - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    /// Values at both end nodes are pinned to zero.
    DirichletZero,
    /// No boundary condition attached.
    Free,
}

/// Real function sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub boundary: Boundary,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>, boundary: Boundary) -> Result<Self> {
        if values.len() != grid.nodes {
            return Err(Error::Domain(format!(
                "grid function has {} values for {} nodes",
                values.len(),
                grid.nodes
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at node {i}")));
        }
        let mut f = GridFunction { grid, values, boundary };
        f.enforce_boundary();
        Ok(f)
    }

    pub fn from_fn(grid: Grid, boundary: Boundary, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.nodes).map(|i| f(grid.x(i))).collect();
        GridFunction::new(grid, values, boundary)
    }

    pub fn zeros(grid: Grid, boundary: Boundary) -> Self {
        GridFunction { grid, values: vec![0.0; grid.nodes], boundary }
    }

    fn enforce_boundary(&mut self) {
        if self.boundary == Boundary::DirichletZero {
            let n = self.values.len();
            self.values[0] = 0.0;
            self.values[n - 1] = 0.0;
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn interior(&self) -> &[f64] {
        &self.values[1..self.values.len() - 1]
    }

    /// Linear interpolation. Outside the grid the function is 0 for
    /// Dirichlet data and constant-extended otherwise.
    pub fn interp(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g.lo || x >= g.hi {
            if self.boundary == Boundary::DirichletZero {
                return 0.0;
            }
            return if x <= g.lo { self.values[0] } else { self.values[g.nodes - 1] };
        }
        let s = (x - g.lo) / g.spacing();
        let i = (s.floor() as usize).min(g.nodes - 2);
        let w = s - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// Trapezoid rule over the whole grid.
    pub fn integral(&self) -> f64 {
        let h = self.grid.spacing();
        let n = self.values.len();
        let inner: f64 = self.values[1..n - 1].iter().sum();
        h * (inner + 0.5 * (self.values[0] + self.values[n - 1]))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_interior(&self) -> f64 {
        self.interior().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> GridFunction {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(self.grid.x(i), v))
            .collect();
        let mut out = GridFunction { grid: self.grid, values, boundary: self.boundary };
        out.enforce_boundary();
        out
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        if self.grid != other.grid {
            return Err(Error::Domain("grid functions live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        let boundary = if self.boundary == Boundary::DirichletZero || other.boundary == Boundary::DirichletZero {
            Boundary::DirichletZero
        } else {
            Boundary::Free
        };
        let mut out = GridFunction { grid: self.grid, values, boundary };
        out.enforce_boundary();
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|_, v| c * v)
    }

    /// Nodal derivative: centered in the interior, one-sided second order at
    /// the ends.
    pub fn derivative(&self) -> GridFunction {
        let h = self.grid.spacing();
        let v = &self.values;
        let n = v.len();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            d[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
        }
        d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
        d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        GridFunction { grid: self.grid, values: d, boundary: Boundary::Free }
    }

    /// Resample onto another grid by linear interpolation.
    pub fn resample(&self, grid: Grid) -> GridFunction {
        let values = (0..grid.nodes).map(|i| self.interp(grid.x(i))).collect();
        let mut out = GridFunction { grid, values, boundary: self.boundary };
        out.enforce_boundary();
        out
    }
}

/// Point mass `mass · δ_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub pos: f64,
    pub mass: f64,
}

/// Finite nonnegative measure on the line: a list of atoms or a density.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Atoms(Vec<Atom>),
    Density(GridFunction),
}

impl Measure {
    pub fn dirac(pos: f64, mass: f64) -> Measure {
        Measure::Atoms(vec![Atom { pos, mass }])
    }

    pub fn zero() -> Measure {
        Measure::Atoms(Vec::new())
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            Measure::Atoms(a) => a.iter().map(|a| a.mass).sum(),
            Measure::Density(d) => d.integral(),
        }
    }

    /// `<mu, f>`: exact sum for atoms, trapezoid on the density's nodes.
    pub fn pair(&self, f: impl Fn(f64) -> f64) -> f64 {
        match self {
            Measure::Atoms(atoms) => atoms.iter().map(|a| a.mass * f(a.pos)).sum(),
            Measure::Density(d) => d.map(|x, v| v * f(x)).integral(),
        }
    }

    pub fn pair_grid(&self, f: &GridFunction) -> f64 {
        self.pair(|x| f.interp(x))
    }

    /// The measure `w(x) mu(dx)`.
    pub fn reweight(&self, w: impl Fn(f64) -> f64) -> Measure {
        match self {
            Measure::Atoms(atoms) => Measure::Atoms(
                atoms.iter().map(|a| Atom { pos: a.pos, mass: a.mass * w(a.pos) }).collect(),
            ),
            Measure::Density(d) => {
                let mut out = d.map(|x, v| v * w(x));
                out.boundary = d.boundary;
                Measure::Density(out)
            }
        }
    }

    pub fn validate(&self, domain: &Interval) -> Result<()> {
        match self {
            Measure::Atoms(atoms) => {
                for a in atoms {
                    if !(a.mass >= 0.0) || !a.mass.is_finite() {
                        return Err(Error::Domain(format!("atom at {} has invalid mass {}", a.pos, a.mass)));
                    }
                    if !domain.contains_open(a.pos) {
                        return Err(Error::Domain(format!(
                            "atom at {} lies outside ({}, {})",
                            a.pos, domain.lo, domain.hi
                        )));
                    }
                }
                Ok(())
            }
            Measure::Density(d) => {
                if d.values.iter().any(|v| *v < 0.0) {
                    return Err(Error::Domain("density takes negative values".into()));
                }
                if d.grid.lo < domain.lo || d.grid.hi > domain.hi {
                    return Err(Error::Domain("density support leaves the truncation".into()));
                }
                Ok(())
            }
        }
    }
}
