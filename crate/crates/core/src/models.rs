//! Model descriptions: a JSON-serializable config and the built-in registry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{Atom, Boundary, Domain1D, Grid, GridFunction, Interval, Measure};
use crate::operators::{BranchingQuadruple, Coefficient, EllipticOperator};
use crate::spectral::{principal_eigenpair, Criticality, SpectralTriple};

/// Initial measure of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialSpec {
    /// `[position, mass]` pairs.
    Atoms(Vec<[f64; 2]>),
    /// Density expression in `x`, tabulated on the simulation truncation.
    Density { expr: String, nodes: usize },
}

/// Closed-form ground states used instead of the eigensolver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticOverride {
    pub lambda_c: f64,
    pub phi: String,
    pub phi_tilde: String,
    pub criticality: Criticality,
}

/// Expected principal eigenvalue with a short note on where it comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub lambda_c: f64,
    pub source: String,
}

/// `None` endpoints stand for `±∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub a: String,
    pub b: String,
    pub beta: String,
    pub alpha: String,
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub truncations: Vec<[f64; 2]>,
    pub initial: InitialSpec,
    #[serde(default)]
    pub overrides: Option<AnalyticOverride>,
    #[serde(default)]
    pub expected: Option<Expected>,
    /// Whether the limit-theorem experiments apply; `false` gates them off
    /// even if the numerics suggest otherwise.
    #[serde(default = "yes")]
    pub lln_applicable: bool,
}

fn yes() -> bool {
    true
}

/// A parsed model ready for the solvers.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub q: BranchingQuadruple,
    pub mu: Measure,
}

impl ModelConfig {
    pub fn from_json(src: &str) -> Result<ModelConfig> {
        serde_json::from_str(src).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }

    pub fn build(&self) -> Result<Model> {
        let left = self.left.unwrap_or(f64::NEG_INFINITY);
        let right = self.right.unwrap_or(f64::INFINITY);
        let truncs = self.truncations.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect::<Result<Vec<_>>>()?;
        let domain = Domain1D::new(left, right, truncs)?;
        let parse = |what: &str, src: &str| {
            Coefficient::parse(src).map_err(|e| Error::Config(format!("coefficient {what} = {src:?}: {e}")))
        };
        let op = EllipticOperator::new(parse("a", &self.a)?, parse("b", &self.b)?, domain.clone());
        let q = BranchingQuadruple::new(op, parse("beta", &self.beta)?, parse("alpha", &self.alpha)?);
        let sim = domain.largest();
        let mu = match &self.initial {
            InitialSpec::Atoms(atoms) => Measure::Atoms(atoms.iter().map(|[pos, mass]| Atom { pos: *pos, mass: *mass }).collect()),
            InitialSpec::Density { expr, nodes } => {
                let e = Expr::parse(expr).map_err(|e| Error::Config(format!("initial density {expr:?}: {e}")))?;
                let grid = Grid::on(sim, *nodes)?;
                Measure::Density(GridFunction::from_fn(grid, Boundary::DirichletZero, |x| e.eval(x, 0.0))?)
            }
        };
        mu.validate(&sim)?;
        if let Some(o) = &self.overrides {
            Expr::parse(&o.phi)?;
            Expr::parse(&o.phi_tilde)?;
        }
        Ok(Model { config: self.clone(), q, mu })
    }
}

impl Model {
    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// Truncation on which particles are simulated: the largest one.
    pub fn truncation(&self) -> Interval {
        self.q.domain().largest()
    }

    /// Spectral triple on `grid_size` nodes, from the analytic override when
    /// the config has one (after its residual check), else from the solver.
    pub fn spectral(&self, grid_size: usize) -> Result<SpectralTriple> {
        match &self.config.overrides {
            Some(o) => {
                let phi = Expr::parse(&o.phi)?;
                let pt = Expr::parse(&o.phi_tilde)?;
                let grid = Grid::on(self.truncation(), grid_size)?;
                SpectralTriple::from_analytic(&self.q, grid, o.lambda_c, |x| phi.eval(x, 0.0), |x| pt.eval(x, 0.0), o.criticality)
            }
            None => principal_eigenpair(&self.q, grid_size, &[]),
        }
    }
}

/// Wright–Fisher motion on `(0, 1)` with branching mechanism `γ u(1 − u)`,
/// i.e. `α = β = γ`.
pub fn wright_fisher(gamma: f64) -> ModelConfig {
    ModelConfig {
        name: "wright-fisher".into(),
        a: "x*(1-x)".into(),
        b: "x - 0.5".into(),
        beta: format!("{gamma}"),
        alpha: format!("{gamma}"),
        left: Some(0.0),
        right: Some(1.0),
        truncations: vec![[0.1, 0.9], [0.05, 0.95], [0.02, 0.98], [0.0, 1.0]],
        initial: InitialSpec::Atoms(vec![[0.5, 1.0]]),
        overrides: None,
        expected: Some(Expected { lambda_c: gamma - 1.0, source: "closed form γ − 1".into() }),
        lln_applicable: true,
    }
}

/// `½Δ + β` with constant branching on the line, truncated to `(−k, k)`.
/// The constant ground states are imposed; the triple is flagged critical
/// but not product-critical, since `∫ φ φ̃ dx` diverges.
pub fn super_bm(beta: f64, alpha: f64) -> ModelConfig {
    ModelConfig {
        name: "super-bm".into(),
        a: "1".into(),
        b: "0".into(),
        beta: format!("{beta}"),
        alpha: format!("{alpha}"),
        left: None,
        right: None,
        truncations: vec![[-5.0, 5.0], [-10.0, 10.0], [-20.0, 20.0], [-40.0, 40.0]],
        initial: InitialSpec::Atoms(vec![[0.0, 1.0]]),
        overrides: Some(AnalyticOverride {
            lambda_c: beta,
            phi: "1".into(),
            phi_tilde: "1".into(),
            criticality: Criticality::CriticalNonProduct,
        }),
        expected: Some(Expected { lambda_c: beta, source: "constant ground state, λ_c = β".into() }),
        lln_applicable: false,
    }
}

/// `½Δ + β` on `(0, ℓ)` with Dirichlet boundary; `beta` and `alpha` are
/// expressions in `x`.
pub fn dirichlet_box(beta: &str, alpha: &str, length: f64) -> ModelConfig {
    let expected = Expr::parse(beta).ok().and_then(|e| e.as_constant()).map(|b| {
        let k = std::f64::consts::PI / length;
        Expected { lambda_c: b - 0.5 * k * k, source: "sine ground state, λ_c = β − π²/(2ℓ²)".into() }
    });
    ModelConfig {
        name: "dirichlet-box".into(),
        a: "1".into(),
        b: "0".into(),
        beta: beta.into(),
        alpha: alpha.into(),
        left: Some(0.0),
        right: Some(length),
        truncations: vec![[0.0, length]],
        initial: InitialSpec::Atoms(vec![[0.5 * length, 1.0]]),
        overrides: None,
        expected,
        lln_applicable: true,
    }
}

/// Built-in model names with their parameters and defaults.
pub fn registry() -> Vec<(&'static str, Vec<(&'static str, f64)>, ModelConfig)> {
    vec![
        ("wright-fisher", vec![("gamma", 2.0)], wright_fisher(2.0)),
        ("super-bm", vec![("beta", 1.0), ("alpha", 1.0)], super_bm(1.0, 1.0)),
        ("dirichlet-box", vec![("beta", 1.0), ("alpha", 1.0), ("length", std::f64::consts::PI)], dirichlet_box("1", "1", std::f64::consts::PI)),
    ]
}

/// Registry model `name` with parameter overrides; unknown names and
/// parameters are config errors.
pub fn by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelConfig> {
    let (_, defaults, _) = registry()
        .into_iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown model {name:?}")))?;
    for k in params.keys() {
        if !defaults.iter().any(|(d, _)| d == k) {
            return Err(Error::Config(format!("model {name} has no parameter {k:?}")));
        }
    }
    let get = |k: &str| params.get(k).copied().unwrap_or_else(|| defaults.iter().find(|(d, _)| *d == k).expect("known").1);
    Ok(match name {
        "wright-fisher" => wright_fisher(get("gamma")),
        "super-bm" => super_bm(get("beta"), get("alpha")),
        "dirichlet-box" => {
            let length = get("length");
            if !(length > 0.0) {
                return Err(Error::Config(format!("length must be positive, got {length}")));
            }
            dirichlet_box(&format!("{}", get("beta")), &format!("{}", get("alpha")), length)
        }
        _ => unreachable!("registry names are matched above"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds() {
        for (name, _, cfg) in registry() {
            let m = cfg.build().unwrap();
            assert_eq!(m.name(), name);
            assert!(m.mu.total_mass() > 0.0);
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = wright_fisher(0.5);
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let sbm = super_bm(1.0, 1.0);
        assert_eq!(ModelConfig::from_json(&sbm.to_json()).unwrap(), sbm);
    }

    #[test]
    fn unknown_fields_and_names_rejected() {
        assert!(ModelConfig::from_json(r#"{"name": "x"}"#).is_err());
        assert!(by_name("nope", &BTreeMap::new()).is_err());
        let mut p = BTreeMap::new();
        p.insert("delta".to_string(), 1.0);
        assert!(by_name("wright-fisher", &p).is_err());
    }

    #[test]
    fn bad_expression_is_config_error() {
        let mut cfg = wright_fisher(2.0);
        cfg.beta = "2 +".into();
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn super_bm_override_passes_residual_check() {
        let m = super_bm(1.0, 1.0).build().unwrap();
        let t = m.spectral(801).unwrap();
        assert_eq!(t.lambda_c, 1.0);
        assert_eq!(t.criticality, Criticality::CriticalNonProduct);
    }

    #[test]
    fn dirichlet_box_expected_value() {
        let cfg = dirichlet_box("0", "1", std::f64::consts::PI);
        assert!((cfg.expected.unwrap().lambda_c + 0.5).abs() < 1e-15);
    }
}
