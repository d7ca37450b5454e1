use std::f64::consts::PI;

use superflow::grid::{Boundary, Domain1D, Grid, GridFunction, Interval, Measure};
use superflow::models::{dirichlet_box, wright_fisher};
use superflow::operators::{BranchingQuadruple, Coefficient, EllipticOperator};
use superflow::particles::{run_ensemble, SimConfig};
use superflow::spectral::{principal_eigenpair, Criticality};
use superflow::{pde, stats};

fn half_laplacian_box(length: f64, beta: f64) -> BranchingQuadruple {
    let dom = Domain1D::bounded(0.0, length).unwrap();
    BranchingQuadruple::new(EllipticOperator::half_laplacian(dom), Coefficient::constant(beta), Coefficient::constant(1.0))
}

#[test]
fn box_eigenvalue_and_sine_ground_state() {
    for &(length, beta) in &[(PI, 0.0), (2.0, 1.5), (5.0, -0.3)] {
        let q = half_laplacian_box(length, beta);
        let t = principal_eigenpair(&q, 1001, &[]).unwrap();
        let k = PI / length;
        assert!((t.lambda_c - (beta - 0.5 * k * k)).abs() < 1e-4, "ℓ = {length}: {}", t.lambda_c);
        assert_eq!(t.criticality, Criticality::ProductCritical);
        let g = t.grid();
        let peak = t.phi_c.max();
        for i in 0..g.nodes {
            assert!((t.phi_c.values[i] / peak - (k * g.x(i)).sin()).abs() < 1e-4);
        }
    }
}

#[test]
fn wright_fisher_eigenvalue_tracks_gamma() {
    for &gamma in &[0.5, 1.0, 2.0, 3.0] {
        let m = wright_fisher(gamma).build().unwrap();
        let t = m.spectral(1001).unwrap();
        assert!((t.lambda_c - (gamma - 1.0)).abs() < 1e-4);
        // ground state 4x(1−x) after normalizing the peak to one
        let g = t.grid();
        let peak = t.phi_c.max();
        for i in (0..g.nodes).step_by(50) {
            let x = g.x(i);
            assert!((t.phi_c.values[i] / peak - 4.0 * x * (1.0 - x)).abs() < 1e-3);
        }
    }
}

#[test]
fn sine_mode_decays_at_its_eigenvalue() {
    let q = half_laplacian_box(PI, 0.2);
    let grid = Grid::new(0.0, PI, 801).unwrap();
    let g = GridFunction::from_fn(grid, Boundary::DirichletZero, f64::sin).unwrap();
    let flow = pde::expectation_flow(&q, &g, &[0.5, 2.0], None).unwrap();
    for (u, t) in flow.snapshots.iter().zip([0.5_f64, 2.0]) {
        let factor = ((0.2_f64 - 0.5) * t).exp();
        for i in 0..grid.nodes {
            assert!((u.values[i] - factor * grid.x(i).sin()).abs() < 1e-4);
        }
    }
}

#[test]
fn semilinear_solution_lies_between_zero_and_linear() {
    let m = wright_fisher(2.0).build().unwrap();
    let grid = Grid::on(m.truncation(), 401).unwrap();
    let g = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| 3.0 * (PI * x).sin().powi(2)).unwrap();
    let times = [0.5, 1.0, 2.0];
    let lin = pde::expectation_flow(&m.q, &g, &times, None).unwrap();
    let non = pde::semilinear_flow(&m.q, &g, &times, None).unwrap();
    for (a, b) in lin.snapshots.iter().zip(&non.snapshots) {
        for (l, u) in a.values.iter().zip(&b.values) {
            assert!(*u >= 0.0 && *u <= l + 1e-10);
        }
    }
}

#[test]
fn particle_mean_mass_matches_first_moment() {
    let cfg = dirichlet_box("0.5", "1", 2.0);
    let m = cfg.build().unwrap();
    let times = [0.5, 1.0];
    let sim = SimConfig::new(40.0, 1.0, 11, 1500).with_snapshots(&times);
    let samples = run_ensemble(&m.q, m.truncation(), &m.mu, &sim, |_, s| s.iter().map(|c| c.total_mass()).collect::<Vec<_>>()).unwrap();
    let grid = Grid::on(m.truncation(), 801).unwrap();
    let one = GridFunction::from_fn(grid, Boundary::DirichletZero, |_| 1.0).unwrap();
    let flow = pde::expectation_flow(&m.q, &one, &times, None).unwrap();
    for k in 0..times.len() {
        let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let exact = m.mu.pair_grid(&flow.snapshots[k]);
        let z = (stats::mean(&col) - exact).abs() / stats::std_error(&col);
        assert!(z < 4.0, "t = {}: mean {} vs {exact}", times[k], stats::mean(&col));
    }
}

#[test]
fn laplace_functional_of_zero_datum_is_one() {
    let m = wright_fisher(2.0).build().unwrap();
    let grid = Grid::on(m.truncation(), 201).unwrap();
    let zero = GridFunction::zeros(grid, Boundary::DirichletZero);
    let truncs = &m.q.domain().truncations;
    let v = pde::laplace_functional(&m.q, &m.mu, &zero, 1.0, None, &truncs[truncs.len() - 2..]).unwrap();
    assert!((v - 1.0).abs() < 1e-14);
}

#[test]
fn ensembles_are_reproducible() {
    let m = wright_fisher(2.0).build().unwrap();
    let sim = SimConfig::new(30.0, 1.0, 5, 8).with_snapshots(&[1.0]);
    let run = || run_ensemble(&m.q, m.truncation(), &m.mu, &sim, |_, s| s[0].positions.clone()).unwrap();
    assert_eq!(run(), run());
    let other = SimConfig::new(30.0, 1.0, 6, 8).with_snapshots(&[1.0]);
    let b = run_ensemble(&m.q, m.truncation(), &m.mu, &other, |_, s| s[0].positions.clone()).unwrap();
    assert_ne!(run(), b);
}

#[test]
fn dirac_measure_pairs_by_interpolation() {
    let grid = Grid::new(0.0, 1.0, 11).unwrap();
    let f = GridFunction::from_fn(grid, Boundary::Free, |x| x * x).unwrap();
    let mu = Measure::dirac(0.25, 2.0);
    assert!((mu.pair_grid(&f) - 2.0 * 0.065).abs() < 1e-12);
    assert!(mu.validate(&Interval::new(0.0, 1.0).unwrap()).is_ok());
}
