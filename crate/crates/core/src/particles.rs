//! Branching particle approximation at level `n`: particles of mass `1/n`
//! move by Euler–Maruyama, branch at rate `n`, and leave a random number of
//! offspring with mean `1 + β/n` and variance `2α` at their final position.
//!
//! Each particle carries its remaining exponential lifetime measured in
//! steps. A particle whose lifetime runs out during a step branches at the
//! end of that step, so the chance of a branch in a given step is
//! `1 − e^{−n dt}`; offspring lifetimes start at the exact death instant, so
//! the long-run branch rate stays `n` rather than `n/(1 + n dt/2)`.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Atom, GridFunction, Interval, Measure};
use crate::operators::{BranchingQuadruple, Coefficient, EllipticOperator, SpaceTimeWeight};

pub type Rng = rand_pcg::Pcg64Mcg;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x6A09_E667_F3BC_C909)))
}

/// Independent generator for stream `index` under `master`.
pub fn stream_rng(master: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, index))
}

/// Offspring distribution on `{0, 1, k}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffspringLaw {
    pub k: u32,
    pub p0: f64,
    pub p1: f64,
    pub pk: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Largest `k` tried before giving up.
pub const MAX_OFFSPRING_SUPPORT: u32 = 64;

/// Largest shortfall of the target variance below the minimum attainable
/// by an integer law that is absorbed by using the minimal-variance law.
pub const MIN_VARIANCE_SLACK: f64 = 1e-9;

/// `x.ceil()` for `x ≥ 0` without a libm call; saturates for huge `x`.
#[inline]
fn ceil_positive(x: f64) -> f64 {
    let c = x as i64 as f64;
    if c < x { c + 1.0 } else { c }
}

impl OffspringLaw {
    /// Law with mean `1 + β/n` and variance `2α`.
    pub fn new(beta: f64, alpha: f64, n: f64) -> Result<OffspringLaw> {
        let m = 1.0 + beta / n;
        let v = 2.0 * alpha;
        OffspringLaw::with_moments(m, v).map_err(|e| match e {
            Error::OffspringLaw(msg) => Error::OffspringLaw(format!("{msg} (β = {beta}, α = {alpha}, n = {n}); β/n may be too large for this level")),
            e => e,
        })
    }

    pub fn with_moments(m: f64, v: f64) -> Result<OffspringLaw> {
        if !(m >= 0.0) || !(v >= 0.0) || !m.is_finite() || !v.is_finite() {
            return Err(Error::OffspringLaw(format!("invalid target moments m = {m}, v = {v}")));
        }
        // E[N(N−1)] is fixed by the targets
        let fact2 = v + m * m - m;
        let ok = |p: f64| (-1e-14..=1.0 + 1e-14).contains(&p);
        if fact2 >= 0.0 {
            // p_1 ≥ 0 needs k ≥ 1 + E[N(N−1)]/m; larger k only lowers p_0
            let k_min = if m > 0.0 { ceil_positive(1.0 + fact2 / m - 1e-12).max(2.0) } else { 2.0 };
            if k_min <= MAX_OFFSPRING_SUPPORT as f64 {
                let kf = k_min;
                let pk = fact2 / (kf * (kf - 1.0));
                let p1 = m - kf * pk;
                let p0 = 1.0 - p1 - pk;
                if ok(pk) && ok(p1) && ok(p0) {
                    return Ok(OffspringLaw { k: kf as u32, p0: p0.max(0.0), p1: p1.max(0.0), pk: pk.max(0.0), mean: m, variance: v });
                }
            }
        }
        // integer-valued laws have variance at least frac(m)(1 − frac(m));
        // targets below that by rounding-level amounts get the two-point law
        if m < 2.0 {
            let f = m - m.floor();
            let vmin = f * (1.0 - f);
            if v < vmin && vmin - v <= MIN_VARIANCE_SLACK {
                let law = if m < 1.0 {
                    OffspringLaw { k: 2, p0: 1.0 - m, p1: m, pk: 0.0, mean: m, variance: vmin }
                } else {
                    OffspringLaw { k: 2, p0: 0.0, p1: 2.0 - m, pk: m - 1.0, mean: m, variance: vmin }
                };
                return Ok(law);
            }
        }
        Err(Error::OffspringLaw(format!("no law on {{0, 1, k}}, k ≤ {MAX_OFFSPRING_SUPPORT}, has mean {m} and variance {v}")))
    }

    /// Mean and variance by direct summation over the support.
    pub fn moments(&self) -> (f64, f64) {
        let k = self.k as f64;
        let mean = self.p1 + k * self.pk;
        let second = self.p1 + k * k * self.pk;
        (mean, second - mean * mean)
    }

    #[inline]
    pub fn sample(&self, rng: &mut Rng) -> u32 {
        let u: f64 = rng.random();
        if u < self.p0 {
            0
        } else if u < self.p0 + self.p1 {
            1
        } else {
            self.k
        }
    }
}

/// Euler–Maruyama motion of the diffusion generated by an operator on a
/// truncation, with absorption at its endpoints.
///
/// Time-homogeneous coefficients are tabulated on a uniform mesh and
/// interpolated linearly. At endpoints where the diffusion coefficient is
/// positive, a Brownian-bridge crossing probability corrects for exits
/// between steps; degenerate endpoints are left uncorrected.
#[derive(Debug, Clone)]
pub struct Motion {
    lo: f64,
    hi: f64,
    table: Option<MotionTable>,
    a: Coefficient,
    op: Option<EllipticOperator>,
    bridge_lo: Option<f64>,
    bridge_hi: Option<f64>,
}

#[derive(Debug, Clone)]
struct MotionTable {
    inv_dx: f64,
    drift: Vec<f64>,
    sd: Vec<f64>,
}

impl Motion {
    pub fn new(op: &EllipticOperator, on: Interval, cells: usize) -> Result<Motion> {
        if !on.is_bounded() {
            return Err(Error::Domain("motion needs a bounded truncation".into()));
        }
        if on.lo < op.domain.left || on.hi > op.domain.right {
            return Err(Error::Domain(format!("truncation ({}, {}) leaves the domain", on.lo, on.hi)));
        }
        let cells = cells.max(16);
        let dx = on.len() / cells as f64;
        let scale = (0..=cells).map(|i| op.a.eval(on.lo + i as f64 * dx, 0.0).abs()).fold(0.0, f64::max).max(1e-300);
        let a_at = |x: f64, t: f64| -> Result<f64> {
            let a = op.a.eval(x, t);
            if a < -1e-12 * scale || !a.is_finite() {
                return Err(Error::Coefficient(format!("diffusion coefficient {a} at x = {x}")));
            }
            Ok(a.max(0.0))
        };
        let table = if op.is_time_dependent() {
            None
        } else {
            let mut drift = Vec::with_capacity(cells + 1);
            let mut sd = Vec::with_capacity(cells + 1);
            for i in 0..=cells {
                let x = if i == cells { on.hi } else { on.lo + i as f64 * dx };
                // centered difference clamped to stay inside the truncation
                let h = dx.min(1e-3 * on.len());
                let xe = x.clamp(on.lo + h, on.hi - h);
                let ax = if op.a.has_analytic_dx() { op.a.dx(x, 0.0, h) } else { op.a.dx(xe, 0.0, h) };
                let b = op.b.eval(x, 0.0);
                let d = b + 0.5 * ax;
                drift.push(if d.is_finite() { d } else { 0.0 });
                sd.push(a_at(x, 0.0)?.sqrt());
            }
            Some(MotionTable { inv_dx: 1.0 / dx, drift, sd })
        };
        let bridge = |x: f64| -> Result<Option<f64>> {
            let a = a_at(x, 0.0)?;
            Ok(if a > 1e-8 * scale { Some(a) } else { None })
        };
        Ok(Motion {
            lo: on.lo,
            hi: on.hi,
            table,
            a: op.a.clone(),
            op: if op.is_time_dependent() { Some(op.clone()) } else { None },
            bridge_lo: bridge(on.lo)?,
            bridge_hi: bridge(on.hi)?,
        })
    }

    pub fn interval(&self) -> Interval {
        Interval { lo: self.lo, hi: self.hi }
    }

    /// Drift `b + ½ a'` and `√a` at `(x, t)`.
    #[inline]
    pub fn coefficients(&self, x: f64, t: f64) -> (f64, f64) {
        match &self.table {
            Some(tb) => {
                let u = (x - self.lo) * tb.inv_dx;
                let i = (u as usize).min(tb.drift.len() - 2);
                let w = u - i as f64;
                (
                    tb.drift[i] + w * (tb.drift[i + 1] - tb.drift[i]),
                    tb.sd[i] + w * (tb.sd[i + 1] - tb.sd[i]),
                )
            }
            None => {
                let op = self.op.as_ref().expect("time-dependent motion keeps its operator");
                let a = self.a.eval(x, t).max(0.0);
                (op.effective_drift(x, t, 1e-6 * (self.hi - self.lo)), a.sqrt())
            }
        }
    }

    /// One step from `x`; `None` when the path is absorbed.
    #[inline]
    pub fn step(&self, x: f64, t: f64, dt: f64, rng: &mut Rng) -> Option<f64> {
        let z: f64 = StandardNormal.sample(rng);
        self.step_with(x, t, dt, z, rng)
    }

    #[inline]
    fn step_with(&self, x: f64, t: f64, dt: f64, z: f64, rng: &mut Rng) -> Option<f64> {
        let (drift, sd) = self.coefficients(x, t);
        let y = x + drift * dt + sd * dt.sqrt() * z;
        if !(y > self.lo && y < self.hi) {
            return None;
        }
        if let Some(a) = self.bridge_lo {
            let p = (-2.0 * (x - self.lo) * (y - self.lo) / (a * dt)).exp();
            if p > 1e-12 && rng.random::<f64>() < p {
                return None;
            }
        }
        if let Some(a) = self.bridge_hi {
            let p = (-2.0 * (self.hi - x) * (self.hi - y) / (a * dt)).exp();
            if p > 1e-12 && rng.random::<f64>() < p {
                return None;
            }
        }
        Some(y)
    }
}

/// Particle configuration at level `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub positions: Vec<f64>,
    /// Remaining lifetime of each particle, in steps.
    pub clocks: Vec<f64>,
    pub level: f64,
    pub time: f64,
}

impl ParticleCloud {
    pub fn mass_per_particle(&self) -> f64 {
        1.0 / self.level
    }

    pub fn alive_count(&self) -> usize {
        self.positions.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.positions.len() as f64 / self.level
    }

    /// The cloud as an atomic measure with atoms of mass `1/n`.
    pub fn measure(&self) -> Measure {
        let m = 1.0 / self.level;
        Measure::Atoms(self.positions.iter().map(|&pos| Atom { pos, mass: m }).collect())
    }
}

/// `⟨X, f⟩` with `f` interpolated linearly.
pub fn pair(cloud: &ParticleCloud, f: &GridFunction) -> f64 {
    cloud.positions.iter().map(|&x| f.interp(x)).sum::<f64>() / cloud.level
}

/// `Σ H(x_i, t)/n δ_{x_i}`.
pub fn weight_cloud(cloud: &ParticleCloud, h: &SpaceTimeWeight, t: f64) -> Measure {
    let m = 1.0 / cloud.level;
    Measure::Atoms(cloud.positions.iter().map(|&pos| Atom { pos, mass: h.value(pos, t) * m }).collect())
}

/// One Euler–Maruyama step of every particle; absorbed particles are removed.
pub fn diffusion_step(cloud: &mut ParticleCloud, motion: &Motion, dt: f64, rng: &mut Rng) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let t = cloud.time;
    let mut i = 0;
    while i < cloud.positions.len() {
        match motion.step(cloud.positions[i], t, dt, rng) {
            Some(y) => {
                cloud.positions[i] = y;
                i += 1;
            }
            None => {
                cloud.positions.swap_remove(i);
                cloud.clocks.swap_remove(i);
            }
        }
    }
    cloud.time += dt;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    /// Level `n`: particle mass `1/n`, branch rate `n`.
    pub n: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub replicates: usize,
    /// Times at which snapshots are recorded; rounded to the step grid.
    pub snapshot_times: Vec<f64>,
    /// Largest number of simultaneously alive particles per replicate.
    pub population_cap: usize,
    /// Cells of the motion table.
    pub motion_cells: usize,
    /// Every this many branch events the offspring law's moments are
    /// re-verified by direct summation (0 disables).
    pub spot_check_every: u64,
}

/// Largest allowed `n · dt`.
pub const MAX_RATE_STEP: f64 = 0.1;

impl SimConfig {
    pub fn new(n: f64, horizon: f64, seed: u64, replicates: usize) -> SimConfig {
        SimConfig {
            n,
            dt: MAX_RATE_STEP / n,
            horizon,
            seed,
            replicates,
            snapshot_times: vec![horizon],
            population_cap: 10_000_000,
            motion_cells: 8192,
            spot_check_every: 1000,
        }
    }

    pub fn with_snapshots(mut self, times: &[f64]) -> SimConfig {
        self.snapshot_times = times.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 1.0) {
            return Err(Error::Config(format!("level n must be at least 1, got {}", self.n)));
        }
        if !(self.dt > 0.0) || self.dt * self.n > MAX_RATE_STEP * (1.0 + 1e-12) {
            return Err(Error::Config(format!("need 0 < dt·n ≤ {MAX_RATE_STEP}, got dt·n = {}", self.dt * self.n)));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::Config("horizon must be nonnegative".into()));
        }
        if self.snapshot_times.iter().any(|t| *t < 0.0 || *t > self.horizon + 1e-12) {
            return Err(Error::Config("snapshot times must lie in [0, horizon]".into()));
        }
        if self.snapshot_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("snapshot times must be nondecreasing".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn snapshot_steps(&self) -> Vec<usize> {
        self.snapshot_times.iter().map(|t| (t / self.dt).round() as usize).collect()
    }
}

/// Particles of the initial configuration at level `n`: atoms contribute
/// `round(mass · n)` particles each; densities are sampled by inverse CDF.
pub fn initial_positions(mu: &Measure, n: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    match mu {
        Measure::Atoms(atoms) => {
            let mut out = Vec::new();
            for a in atoms {
                let k = (a.mass * n).round();
                if k < 0.0 {
                    return Err(Error::Domain("negative atom mass".into()));
                }
                out.extend(std::iter::repeat_n(a.pos, k as usize));
            }
            Ok(out)
        }
        Measure::Density(g) => {
            let total = g.integral();
            let k = (total * n).round() as usize;
            let grid = g.grid;
            let h = grid.spacing();
            let mut cdf = vec![0.0; grid.nodes];
            for i in 1..grid.nodes {
                cdf[i] = cdf[i - 1] + 0.5 * h * (g.values[i - 1].max(0.0) + g.values[i].max(0.0));
            }
            let last = cdf[grid.nodes - 1];
            if !(last > 0.0) {
                return Ok(Vec::new());
            }
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let u = rng.random::<f64>() * last;
                let j = cdf.partition_point(|c| *c < u).clamp(1, grid.nodes - 1);
                let (c0, c1) = (cdf[j - 1], cdf[j]);
                let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                out.push(grid.x(j - 1) + w * h);
            }
            Ok(out)
        }
    }
}

/// Counters of one replicate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub branch_events: u64,
    pub absorbed: u64,
    pub particle_steps: u64,
    pub max_alive: usize,
}

/// Exponential lifetime with rate `n`, in units of steps.
#[inline]
fn lifetime(rng: &mut Rng, rate_step: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / rate_step
}

/// Per-cell Euler increments `(drift·dt, slope, sd·√dt, slope)` of a
/// tabulated motion without bridge corrections.
fn euler_cells(motion: &Motion, dt: f64) -> Option<(Vec<[f64; 4]>, f64)> {
    let tb = motion.table.as_ref()?;
    if motion.bridge_lo.is_some() || motion.bridge_hi.is_some() {
        return None;
    }
    let sq = dt.sqrt();
    let cells = (0..tb.drift.len() - 1)
        .map(|i| {
            [tb.drift[i] * dt, (tb.drift[i + 1] - tb.drift[i]) * dt, tb.sd[i] * sq, (tb.sd[i + 1] - tb.sd[i]) * sq]
        })
        .collect();
    Some((cells, tb.inv_dx))
}

/// `β(x, 0)` and `α(x, 0)` at the nodes of a uniform mesh, for coefficients
/// of the form `c(x, 0) e^{r t}`; values between nodes are interpolated.
struct LawTable {
    lo: f64,
    inv_dx: f64,
    nodes: Vec<[f64; 2]>,
    beta_rate: f64,
    alpha_rate: f64,
}

impl LawTable {
    fn new(q: &BranchingQuadruple, on: Interval, cells: usize) -> Option<LawTable> {
        let beta_rate = q.beta.time_growth()?;
        let alpha_rate = q.alpha.time_growth()?;
        let dx = on.len() / cells as f64;
        let nodes = (0..=cells)
            .map(|i| {
                // endpoints are evaluated just inside, where coefficients may blow up
                let x = (on.lo + i as f64 * dx).clamp(on.lo + 1e-3 * dx, on.hi - 1e-3 * dx);
                [q.beta.eval(x, 0.0), q.alpha.eval(x, 0.0)]
            })
            .collect();
        Some(LawTable { lo: on.lo, inv_dx: 1.0 / dx, nodes, beta_rate, alpha_rate })
    }

    #[inline]
    fn at(&self, x: f64) -> (f64, f64) {
        let u = (x - self.lo) * self.inv_dx;
        let j = (u as i64).clamp(0, self.nodes.len() as i64 - 2) as usize;
        let w = u - j as f64;
        let (a, b) = (self.nodes[j], self.nodes[j + 1]);
        (a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]))
    }
}

/// One replicate of the particle system on `truncation`; calls `observe`
/// with the cloud at every snapshot time.
pub fn simulate_with(
    q: &BranchingQuadruple,
    truncation: Interval,
    mu: &Measure,
    config: &SimConfig,
    replicate: u64,
    mut observe: impl FnMut(&ParticleCloud) -> Result<()>,
) -> Result<SimStats> {
    config.validate()?;
    let motion = Motion::new(&q.op, truncation, config.motion_cells)?;
    simulate_motion(q, &motion, mu, config, replicate, &mut observe)
}

fn simulate_motion(
    q: &BranchingQuadruple,
    motion: &Motion,
    mu: &Measure,
    config: &SimConfig,
    replicate: u64,
    observe: &mut dyn FnMut(&ParticleCloud) -> Result<()>,
) -> Result<SimStats> {
    let mut rng = stream_rng(config.seed, replicate);
    let n = config.n;
    let dt = config.dt;
    let rate_step = n * dt;
    let positions = initial_positions(mu, n, &mut rng)?;
    let iv = motion.interval();
    if let Some(x) = positions.iter().find(|x| !iv.contains_open(**x)) {
        return Err(Error::Domain(format!("initial particle at {x} outside ({}, {})", iv.lo, iv.hi)));
    }
    let clocks = positions.iter().map(|_| lifetime(&mut rng, rate_step)).collect();
    let mut cloud = ParticleCloud { positions, clocks, level: n, time: 0.0 };
    let mut stats = SimStats { max_alive: cloud.alive_count(), ..SimStats::default() };
    let snaps = config.snapshot_steps();
    let mut next_snap = 0;
    while next_snap < snaps.len() && snaps[next_snap] == 0 {
        observe(&cloud)?;
        next_snap += 1;
    }
    let steps = config.steps();
    let beta_const = q.beta.as_constant();
    let alpha_const = q.alpha.as_constant();
    let const_law = match (beta_const, alpha_const) {
        (Some(b), Some(a)) => Some(OffspringLaw::new(b, a, n)?),
        _ => None,
    };
    let fast = euler_cells(motion, dt);
    let law_table = if const_law.is_none() { LawTable::new(q, iv, config.motion_cells) } else { None };
    let mut pending: Vec<(f64, f64)> = Vec::new();
    for k in 0..steps {
        if next_snap >= snaps.len() {
            break;
        }
        let t = k as f64 * dt;
        let t1 = t + dt;
        let growth = law_table.as_ref().map(|lt| ((lt.beta_rate * t1).exp(), (lt.alpha_rate * t1).exp()));
        let mut i = 0;
        while i < cloud.positions.len() {
            let x = cloud.positions[i];
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = if let Some((cells, inv_dx)) = &fast {
                let u = (x - iv.lo) * inv_dx;
                let j = (u as i64).clamp(0, cells.len() as i64 - 1) as usize;
                let w = u - j as f64;
                let c = &cells[j];
                let y = x + (c[0] + w * c[1]) + (c[2] + w * c[3]) * z;
                if y > iv.lo && y < iv.hi {
                    Some(y)
                } else {
                    None
                }
            } else {
                motion.step_with(x, t, dt, z, &mut rng)
            };
            let Some(y) = y else {
                cloud.positions.swap_remove(i);
                cloud.clocks.swap_remove(i);
                stats.absorbed += 1;
                continue;
            };
            cloud.positions[i] = y;
            let c = cloud.clocks[i] - 1.0;
            if c > 0.0 {
                cloud.clocks[i] = c;
                i += 1;
                continue;
            }
            // the lifetime ended inside this step; offspring lifetimes start
            // at that instant, so the overshoot carries over
            cloud.positions.swap_remove(i);
            cloud.clocks.swap_remove(i);
            pending.push((y, c));
        }
        while let Some((y, c)) = pending.pop() {
            if c > 0.0 {
                cloud.positions.push(y);
                cloud.clocks.push(c);
                continue;
            }
            stats.branch_events += 1;
            let law = match (const_law, &law_table, growth) {
                (Some(l), _, _) => l,
                (None, Some(lt), Some((gb, ga))) => {
                    let (b, a) = lt.at(y);
                    OffspringLaw::new(b * gb, a * ga, n)?
                }
                _ => OffspringLaw::new(q.beta.eval(y, t1), q.alpha.eval(y, t1), n)?,
            };
            if config.spot_check_every > 0 && stats.branch_events % config.spot_check_every == 1 {
                let (m, v) = law.moments();
                if (m - law.mean).abs() > 1e-12 * law.mean.max(1.0) || (v - law.variance).abs() > 1e-12 * law.variance.max(1.0) {
                    return Err(Error::OffspringLaw(format!("law at x = {y} reproduces ({m}, {v}) instead of ({}, {})", law.mean, law.variance)));
                }
            }
            for _ in 0..law.sample(&mut rng) {
                pending.push((y, c + lifetime(&mut rng, rate_step)));
            }
        }
        stats.particle_steps += cloud.positions.len() as u64;
        if cloud.positions.len() > config.population_cap {
            return Err(Error::Explosion(format!(
                "{} particles alive at t = {t1:.4} exceeds the cap {}; shorten the horizon or check λ_c",
                cloud.positions.len(),
                config.population_cap
            )));
        }
        stats.max_alive = stats.max_alive.max(cloud.positions.len());
        cloud.time = t1;
        while next_snap < snaps.len() && snaps[next_snap] == k + 1 {
            observe(&cloud)?;
            next_snap += 1;
        }
    }
    Ok(stats)
}

/// Snapshot series of one replicate.
pub fn simulate(q: &BranchingQuadruple, truncation: Interval, mu: &Measure, config: &SimConfig, replicate: u64) -> Result<Vec<ParticleCloud>> {
    let mut out = Vec::new();
    simulate_with(q, truncation, mu, config, replicate, |c| {
        out.push(c.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Runs `config.replicates` independent replicates concurrently and maps
/// each replicate's snapshot series through `f`; results are in replicate
/// order regardless of scheduling.
pub fn run_ensemble<T, F>(q: &BranchingQuadruple, truncation: Interval, mu: &Measure, config: &SimConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &[ParticleCloud]) -> T + Sync,
{
    config.validate()?;
    let motion = Motion::new(&q.op, truncation, config.motion_cells)?;
    let results: Vec<Result<T>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut snaps = Vec::with_capacity(config.snapshot_times.len());
            simulate_motion(q, &motion, mu, config, r, &mut |c| {
                snaps.push(c.clone());
                Ok(())
            })?;
            Ok(f(r, &snaps))
        })
        .collect();
    results.into_iter().collect()
}

/// Installs a global worker pool capped by `SUPERFLOW_THREADS`, if set.
/// Later calls are no-ops.
pub fn init_threads() {
    if let Ok(v) = std::env::var("SUPERFLOW_THREADS") {
        if let Ok(k) = v.trim().parse::<usize>() {
            if k > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, Domain1D, Grid};

    #[test]
    fn laws_from_the_table() {
        let l = OffspringLaw::new(0.0, 1.0, 10.0).unwrap();
        assert_eq!(l.k, 3);
        assert!((l.pk - 1.0 / 3.0).abs() < 1e-15 && l.p1.abs() < 1e-15 && (l.p0 - 2.0 / 3.0).abs() < 1e-15);
        let l = OffspringLaw::new(0.0, 0.25, 10.0).unwrap();
        assert_eq!(l.k, 2);
        assert!((l.pk - 0.25).abs() < 1e-15 && (l.p1 - 0.5).abs() < 1e-15 && (l.p0 - 0.25).abs() < 1e-15);
        let l = OffspringLaw::new(1.0, 0.25, 100.0).unwrap();
        assert_eq!(l.k, 2);
        assert!((l.pk - 0.25505).abs() < 1e-12 && (l.p1 - 0.4999).abs() < 1e-12 && (l.p0 - 0.24505).abs() < 1e-12);
        let (m, v) = l.moments();
        assert!((m - 1.01).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wright_fisher_law_needs_five() {
        let l = OffspringLaw::new(2.0, 2.0, 500.0).unwrap();
        assert_eq!(l.k, 5);
        let (m, v) = l.moments();
        assert!((m - 1.004).abs() < 1e-12 && (v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_moments_are_rejected() {
        assert!(OffspringLaw::with_moments(0.5, 0.1).is_err());
        assert!(OffspringLaw::with_moments(1.0, 200.0).is_err());
        assert!(OffspringLaw::new(-20.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn rounding_level_shortfall_uses_two_point_law() {
        let l = OffspringLaw::with_moments(1.0 + 2e-11, 0.0).unwrap();
        assert_eq!((l.p0, l.k), (0.0, 2));
        let (m, v) = l.moments();
        assert!((m - 1.0 - 2e-11).abs() < 1e-15 && (v - l.variance).abs() < 1e-15);
        let l = OffspringLaw::with_moments(1.0 - 3e-11, 1e-12).unwrap();
        assert!((l.moments().0 - (1.0 - 3e-11)).abs() < 1e-15);
        assert!(OffspringLaw::with_moments(1.5, 0.0).is_err());
    }

    #[test]
    fn closed_form_support_matches_search() {
        for &(m, v) in &[(1.0, 2.0), (1.004, 4.0), (0.9, 0.3), (1.2, 7.5), (1.0, 0.5), (1.0, 0.51), (0.5, 30.0)] {
            let l = OffspringLaw::with_moments(m, v).unwrap();
            let (mm, vv) = l.moments();
            assert!((mm - m).abs() < 1e-12 && (vv - v).abs() < 1e-12, "{m} {v}: {l:?}");
            // no smaller support works
            for k in 2..l.k {
                let kf = k as f64;
                let pk = (v + m * m - m) / (kf * (kf - 1.0));
                let p1 = m - kf * pk;
                let p0 = 1.0 - p1 - pk;
                assert!(p1 < 0.0 || p0 < 0.0 || pk > 1.0);
            }
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    fn line(k: f64) -> EllipticOperator {
        EllipticOperator::half_laplacian(Domain1D::bounded(-k, k).unwrap())
    }

    #[test]
    fn brownian_increments() {
        let op = EllipticOperator::new(Coefficient::constant(1.0), Coefficient::zero(), Domain1D::bounded(-100.0, 100.0).unwrap());
        let m = Motion::new(&op, Interval::new(-100.0, 100.0).unwrap(), 64).unwrap();
        let mut rng = stream_rng(1, 0);
        let dt = 0.01;
        let k = 200_000;
        let incs: Vec<f64> = (0..k).map(|_| m.step(0.0, 0.0, dt, &mut rng).unwrap()).collect();
        let mean = incs.iter().sum::<f64>() / k as f64;
        let var = incs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let se_mean = (dt / k as f64).sqrt();
        let se_var = dt * (2.0 / k as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "{mean}");
        assert!((var - dt).abs() < 3.0 * se_var, "{var}");
    }

    #[test]
    fn wright_fisher_step_near_boundary_is_finite() {
        let op = EllipticOperator::new(Coefficient::parse("x*(1-x)").unwrap(), Coefficient::parse("x - 0.5").unwrap(), Domain1D::bounded(0.0, 1.0).unwrap());
        let m = Motion::new(&op, Interval::new(0.0, 1.0).unwrap(), 1024).unwrap();
        let mut rng = stream_rng(2, 0);
        for _ in 0..10_000 {
            if let Some(y) = m.step(1e-9, 0.0, 1e-3, &mut rng) {
                assert!(y.is_finite() && y > 0.0 && y < 1.0);
            }
        }
        let (d, s) = m.coefficients(0.25, 0.0);
        assert!(d.abs() < 1e-9);
        assert!((s - (0.25_f64 * 0.75).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn drift_only_transport() {
        let op = EllipticOperator::new(Coefficient::constant(1e-12), Coefficient::constant(1.0), Domain1D::bounded(-5.0, 5.0).unwrap());
        let m = Motion::new(&op, Interval::new(-5.0, 5.0).unwrap(), 64).unwrap();
        let mut rng = stream_rng(3, 0);
        let y = m.step(0.3, 0.0, 0.01, &mut rng).unwrap();
        assert!((y - 0.31).abs() < 1e-6);
    }

    #[test]
    fn negative_diffusion_is_rejected() {
        let op = EllipticOperator::new(Coefficient::parse("x").unwrap(), Coefficient::zero(), Domain1D::bounded(-1.0, 1.0).unwrap());
        assert!(matches!(Motion::new(&op, Interval::new(-1.0, 1.0).unwrap(), 64), Err(Error::Coefficient(_))));
    }

    #[test]
    fn pairing_basics() {
        let grid = Grid::new(0.0, 1.0, 11).unwrap();
        let f = GridFunction::from_fn(grid, Boundary::Free, |x| x).unwrap();
        let one = GridFunction::from_fn(grid, Boundary::Free, |_| 1.0).unwrap();
        let c = ParticleCloud { positions: vec![0.25, 0.75], clocks: vec![1.0, 1.0], level: 2.0, time: 0.0 };
        assert!((pair(&c, &f) - 0.5).abs() < 1e-15);
        assert_eq!(pair(&c, &one), c.total_mass());
        let empty = ParticleCloud { positions: vec![], clocks: vec![], level: 2.0, time: 0.0 };
        assert_eq!(pair(&empty, &f), 0.0);
        let w = weight_cloud(&c, &SpaceTimeWeight::unit(), 0.0);
        assert_eq!(w.total_mass(), c.total_mass());
    }

    #[test]
    fn reproducible_and_absorbing() {
        let q = BranchingQuadruple::new(line(1.0), Coefficient::constant(0.5), Coefficient::constant(0.5));
        let cfg = SimConfig::new(20.0, 1.0, 11, 1).with_snapshots(&[0.5, 1.0]);
        let iv = Interval::new(-1.0, 1.0).unwrap();
        let mu = Measure::dirac(0.0, 1.0);
        let a = simulate(&q, iv, &mu, &cfg, 0).unwrap();
        let b = simulate(&q, iv, &mu, &cfg, 0).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert!(c.positions.iter().all(|x| x.abs() < 1.0));
        }
        let c = simulate(&q, iv, &mu, &cfg, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn critical_mass_is_flat_and_supercritical_grows() {
        let iv = Interval::new(-50.0, 50.0).unwrap();
        let mu = Measure::dirac(0.0, 1.0);
        let cfg = SimConfig { replicates: 400, ..SimConfig::new(20.0, 1.0, 5, 400).with_snapshots(&[1.0]) };
        for (beta, expected) in [(0.0, 1.0), (0.8, 0.8_f64.exp())] {
            let q = BranchingQuadruple::new(line(50.0), Coefficient::constant(beta), Coefficient::constant(0.5));
            let masses = run_ensemble(&q, iv, &mu, &cfg, |_, s| s[0].total_mass()).unwrap();
            let k = masses.len() as f64;
            let mean = masses.iter().sum::<f64>() / k;
            let sd = (masses.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            assert!((mean - expected).abs() < 3.0 * sd / k.sqrt(), "β = {beta}: {mean} vs {expected}");
        }
    }

    #[test]
    fn config_invariant_is_enforced() {
        let mut c = SimConfig::new(100.0, 1.0, 0, 1);
        assert!(c.validate().is_ok());
        c.dt = 0.01;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn population_cap_trips() {
        let q = BranchingQuadruple::new(line(50.0), Coefficient::constant(3.0), Coefficient::constant(0.5));
        let mut cfg = SimConfig::new(50.0, 3.0, 1, 1);
        cfg.population_cap = 200;
        let r = simulate(&q, Interval::new(-50.0, 50.0).unwrap(), &Measure::dirac(0.0, 1.0), &cfg, 0);
        assert!(matches!(r, Err(Error::Explosion(_))));
    }

    #[test]
    fn density_initial_measure_has_right_mass() {
        let grid = Grid::new(0.0, 1.0, 101).unwrap();
        let g = GridFunction::from_fn(grid, Boundary::Free, |_| 2.0).unwrap();
        let mut rng = stream_rng(0, 0);
        let xs = initial_positions(&Measure::Density(g), 100.0, &mut rng).unwrap();
        assert_eq!(xs.len(), 200);
        let mean = xs.iter().sum::<f64>() / 200.0;
        assert!((mean - 0.5).abs() < 0.1);
    }
}
