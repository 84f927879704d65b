//! End-to-end acceptance suite.
//!
//! Each test checks one acceptance criterion and writes one `PASS`/`FAIL`
//! line straight to stderr (bypassing the test harness capture), so a full
//! run prints exactly one line per criterion.  Expensive artifacts (the
//! dyadic homogenization studies) are computed once and shared.

use std::io::Write as _;
use std::sync::OnceLock;

use bingflow::cell::{CellConfig, CellSolver, Strategy};
use bingflow::darcy::{
    solve_linear_darcy, solve_nonlinear_darcy, DarcyConfig, DarcyLaw,
};
use bingflow::fields::{divergence, l2_norm_vector, ScalarField, StaggeredGrid};
use bingflow::fine::{fine_grid, poincare_constant_masked, rigid_zones, solve_fine};
use bingflow::geometry::{BoxSpec, CellGeometry, DoublePeriodicDomain, Mask, RectCell};
use bingflow::saddle::{solve_bingham, solve_stokes, SolverConfig};
use bingflow::study::{
    run_convergence_study, sample_law, unfolding_convergence, ConvergenceReport, Forcing,
    StudyConfig,
};
use bingflow::unfolding::{
    gradient_identity_defect_delta, gradient_identity_defect_eps, integral_identity_defect,
    unfold_eps,
};

/// Print a single pass/fail line for a criterion, bypassing output capture,
/// and return the verdict so the caller can assert on it.
fn report(criterion: &str, pass: bool, detail: &str) -> bool {
    let line = format!(
        "[acceptance] {criterion}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

/// Reference two-scale geometry: open Y cell, Z cell with a centered square
/// obstacle, 2x2 subdivision.
fn geometry() -> CellGeometry {
    CellGeometry::new(
        RectCell::new(vec![1.0, 1.0], vec![]).unwrap(),
        RectCell::new(
            vec![1.0, 1.0],
            vec![BoxSpec::new(vec![0.25, 0.25], vec![0.5, 0.5])],
        )
        .unwrap(),
        vec![2, 2],
    )
    .unwrap()
}

fn study_config(g: f64) -> StudyConfig {
    StudyConfig {
        omega: [1.0, 1.0],
        geometry: geometry(),
        epsilon0: 0.5,
        levels: 3,
        grid_per_subcell: 4,
        mu: 1.0,
        g,
        forcing: Forcing::Shear { amplitude: 1.0 },
        fine_solver: SolverConfig {
            tol: 1e-7,
            r_factor: 100.0,
            r_div_factor: 1000.0,
            ..SolverConfig::default()
        },
        // match the cell resolution to the fine grid's cells-per-Z-period so
        // the effective tensor describes the same discrete medium
        cell: CellConfig {
            resolution: 4,
            mu: 1.0,
            g,
            ..CellConfig::default()
        },
        darcy: DarcyConfig::default(),
        macro_resolution: 16,
        compute_poincare: true,
        seed: 42,
    }
}

fn stokes_study() -> &'static ConvergenceReport {
    static STUDY: OnceLock<ConvergenceReport> = OnceLock::new();
    STUDY.get_or_init(|| run_convergence_study(&study_config(0.0)).expect("stokes study"))
}

fn bingham_study() -> &'static ConvergenceReport {
    static STUDY: OnceLock<ConvergenceReport> = OnceLock::new();
    STUDY.get_or_init(|| run_convergence_study(&study_config(0.02)).expect("bingham study"))
}

#[test]
fn criterion_01_unfolding_exactness() {
    let dom = DoublePeriodicDomain::new(vec![1.0, 1.0], 0.25, geometry(), 4).unwrap();
    let grid = fine_grid(&dom).unwrap();
    let tau = std::f64::consts::TAU;
    let phi = ScalarField::from_fn(&grid, |x, y| {
        1.0 + (tau * x).sin() * (tau * y).cos() + 0.3 * x * y
    });
    let psi = ScalarField::from_fn(&grid, |x, y| 0.5 + x - 0.7 * y + (tau * y).sin());

    let mut max_defect: f64 = 0.0;

    // multiplicativity: T(phi * psi) = T(phi) * T(psi) pointwise
    let mut prod = phi.clone();
    for (p, &q) in prod.data.iter_mut().zip(psi.data.iter()) {
        *p *= q;
    }
    let u_prod = unfold_eps(&prod, &dom).unwrap();
    let u_phi = unfold_eps(&phi, &dom).unwrap();
    let u_psi = unfold_eps(&psi, &dom).unwrap();
    for (a, (c, d)) in u_prod
        .data
        .iter()
        .zip(u_phi.data.iter().zip(u_psi.data.iter()))
    {
        max_defect = max_defect.max((a - c * d).abs() / a.abs().max(1.0));
    }

    // aligned oscillation: the unfolding of phi(x/eps), with phi Y-periodic,
    // is the same function of y in every macro cell
    let eps = dom.epsilon;
    let osc = ScalarField::from_fn(&grid, |x, y| {
        ((x / eps).fract() * tau).sin() + ((y / eps).fract() * tau).cos()
    });
    let u_osc = unfold_eps(&osc, &dom).unwrap();
    let mc = u_osc.macro_cells;
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for p in 0..u_osc.y_res[0] {
                for q in 0..u_osc.y_res[1] {
                    let d = (u_osc.data[(a, b, p, q)] - u_osc.data[(0, 0, p, q)]).abs();
                    max_defect = max_defect.max(d);
                }
            }
        }
    }

    max_defect = max_defect.max(integral_identity_defect(&phi, &dom).unwrap());
    max_defect = max_defect.max(gradient_identity_defect_eps(&phi, &dom).unwrap());
    max_defect = max_defect.max(gradient_identity_defect_delta(&phi, &dom).unwrap());

    let pass = report(
        "criterion 01 unfolding-exactness",
        max_defect <= 1e-12,
        &format!("max defect {max_defect:.3e}, tolerance 1e-12"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_unfolding_convergence_suite() {
    let base = DoublePeriodicDomain::new(vec![1.0, 1.0], 0.5, geometry(), 4).unwrap();
    let gaps = unfolding_convergence(&base, 3).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for k in 0..4 {
        let seq: Vec<f64> = gaps.iter().map(|g| g.gaps[k]).collect();
        let mono = seq.windows(2).all(|w| w[1] < w[0]);
        let ratio = seq[2] / seq[0];
        pass &= mono && ratio <= 0.10;
        detail.push_str(&format!("gap{} final/initial {:.3}; ", k + 1, ratio));
    }
    let pass = report("criterion 02 unfolding-convergence", pass, detail.trim_end());
    assert!(pass);
}

#[test]
fn criterion_03_poincare_scaling() {
    let slope = stokes_study().poincare_slope;
    let slope_ok = (0.85..=1.15).contains(&slope);

    let grid = StaggeredGrid::over_box([1.0, 1.0], [48, 48], [false, false]).unwrap();
    let mask = Mask::all_fluid(48, 48, [grid.hx, grid.hy]);
    let cp = poincare_constant_masked(&grid, &mask).unwrap();
    let exact = 1.0 / (std::f64::consts::PI * 2.0f64.sqrt());
    let sanity_ok = (cp - exact).abs() <= 0.02 * exact;

    let pass = report(
        "criterion 03 poincare-scaling",
        slope_ok && sanity_ok,
        &format!(
            "slope {slope:.3} in [0.85, 1.15]; open-square C_P {cp:.5} vs {exact:.5} within 2%"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_apriori_boundedness() {
    let spread = stokes_study().norm_spread();
    let pass = spread.iter().all(|&s| s <= 2.0);
    let pass = report(
        "criterion 04 apriori-boundedness",
        pass,
        &format!(
            "norm spreads |u| {:.3}, scaled |grad u| {:.3}, |p| {:.3}, bound 2.0",
            spread[0], spread[1], spread[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_threshold_law() {
    let dom = DoublePeriodicDomain::new(vec![1.0, 1.0], 0.5, geometry(), 8).unwrap();
    let grid = fine_grid(&dom).unwrap();
    let f = Forcing::Shear { amplitude: 1.0 }.field(&grid);
    let cfg = SolverConfig {
        tol: 1e-9,
        r_factor: 100.0,
        r_div_factor: 1000.0,
        ..SolverConfig::default()
    };
    let sol = solve_fine(&dom, &f, 0.05, 1.0, &cfg).unwrap();
    assert!(sol.state.converged);
    let rz = rigid_zones(&sol).unwrap();
    let pass = report(
        "criterion 05 threshold-law",
        rz.consistent && rz.rigid_cells > 0 && rz.fluid_cells > rz.rigid_cells,
        &format!(
            "rigid cells {}, plug strain defect {:.3e}, rigid stress ratio {:.4}, flow law defect {:.3e}",
            rz.rigid_cells, rz.strain_defect, rz.rigid_stress, rz.flow_defect
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_stokes_consistency() {
    let dom = DoublePeriodicDomain::new(vec![1.0, 1.0], 0.5, geometry(), 8).unwrap();
    let grid = fine_grid(&dom).unwrap();
    let f = Forcing::Shear { amplitude: 1.0 }.field(&grid);
    let cfg = SolverConfig {
        tol: 1e-11,
        r_factor: 100.0,
        r_div_factor: 1000.0,
        ..SolverConfig::default()
    };
    let mask = bingflow::geometry::build_domain_mask(&dom).unwrap();
    let mu_eff = 2.0 * (dom.epsilon * dom.delta()).powi(2);
    let stokes = solve_stokes(&grid, Some(&mask), &f, mu_eff, &cfg).unwrap();
    let bingham = solve_bingham(&grid, Some(&mask), &f, mu_eff, 0.0, &cfg, None).unwrap();
    let mut diff: f64 = 0.0;
    for (a, b) in stokes
        .u
        .u
        .iter()
        .chain(stokes.u.v.iter())
        .zip(bingham.u.u.iter().chain(bingham.u.v.iter()))
    {
        diff = diff.max((a - b).abs());
    }
    let rel = diff / stokes.u.linf().max(f64::MIN_POSITIVE);
    let pass = report(
        "criterion 06 stokes-consistency",
        rel <= 1e-8,
        &format!("relative max difference {rel:.3e}, tolerance 1e-8"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_linear_permeability() {
    let cfg = CellConfig {
        resolution: 16,
        mu: 1.0,
        g: 0.0,
        strategy: Strategy::Product,
        ..CellConfig::default()
    };
    let mut solver = CellSolver::new(&geometry(), &cfg).unwrap();
    let k = solver.eval_k_linear().unwrap();
    let norm = k
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let asym = (k[0][1] - k[1][0]).abs() / norm;
    let trace = k[0][0] + k[1][1];
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    let positive_definite = trace > 0.0 && det > 0.0;
    let off_diag = k[0][1].abs().max(k[1][0].abs()) / norm;
    let pass = report(
        "criterion 07 linear-permeability",
        asym <= 1e-6 && positive_definite && off_diag <= 1e-6,
        &format!(
            "K = [[{:.4e}, {:.4e}], [{:.4e}, {:.4e}]], asymmetry {asym:.3e}, off-diagonal {off_diag:.3e}",
            k[0][0], k[0][1], k[1][0], k[1][1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_nonlinear_law() {
    let cfg = CellConfig {
        resolution: 8,
        mu: 1.0,
        g: 0.05,
        ..CellConfig::default()
    };
    let mut solver = CellSolver::new(&geometry(), &cfg).unwrap();

    let zero = solver.eval_k([0.0, 0.0]).unwrap();
    let zero_ok = zero == [0.0, 0.0];

    let lam_c = solver.yield_threshold([1.0, 0.0], 1e4).unwrap();
    let rigid_ok = solver.is_rigid([1.0, 0.0], 0.9 * lam_c).unwrap();
    let flow_ok = !solver.is_rigid([1.0, 0.0], 1.1 * lam_c).unwrap();

    // monotonicity over sampled pairs of the polar law table
    let law = sample_law(&mut solver, 0.5 * lam_c, 4.0 * lam_c, 6, 5).unwrap();
    let mut pts: Vec<([f64; 2], [f64; 2])> = law
        .samples
        .iter()
        .map(|s| (s.lambda, s.k))
        .collect();
    pts.push(([0.0, 0.0], [0.0, 0.0]));
    // the monotonicity floor is set by the overall scale of the law: the
    // sub-threshold samples carry O(1e-14) solver noise instead of exact
    // zeros, and a pairwise normalization would compare noise against noise
    let lam_max = pts
        .iter()
        .fold(0.0f64, |m, (l, _)| m.max(l[0].hypot(l[1])));
    let k_max = pts
        .iter()
        .fold(0.0f64, |m, (_, k)| m.max(k[0].hypot(k[1])));
    let floor = -1e-8 * lam_max * k_max;
    let mut pairs = 0usize;
    let mut min_inner = f64::INFINITY;
    let mut mono_ok = true;
    'outer: for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let (l1, k1) = pts[i];
            let (l2, k2) = pts[j];
            let dl = [l1[0] - l2[0], l1[1] - l2[1]];
            let dk = [k1[0] - k2[0], k1[1] - k2[1]];
            let inner = dl[0] * dk[0] + dl[1] * dk[1];
            min_inner = min_inner.min(inner / (lam_max * k_max));
            mono_ok &= inner >= floor;
            pairs += 1;
            if pairs >= 200 {
                break 'outer;
            }
        }
    }

    // vanishing yield stress recovers the linear law
    let k_lin = solver.eval_k_linear().unwrap();
    let lam = [2.0 * lam_c, 0.0];
    let small_cfg = CellConfig {
        g: 1e-3 * lam[0],
        ..cfg.clone()
    };
    let mut small = CellSolver::new(&geometry(), &small_cfg).unwrap();
    let k_small = small.eval_k(lam).unwrap();
    let k_ref = [
        k_lin[0][0] * lam[0] + k_lin[0][1] * lam[1],
        k_lin[1][0] * lam[0] + k_lin[1][1] * lam[1],
    ];
    let g0_rel = ((k_small[0] - k_ref[0]).hypot(k_small[1] - k_ref[1]))
        / k_ref[0].hypot(k_ref[1]).max(f64::MIN_POSITIVE);
    let g0_ok = g0_rel <= 0.05;

    let pass = report(
        "criterion 08 nonlinear-law",
        zero_ok && rigid_ok && flow_ok && mono_ok && pairs >= 100 && g0_ok,
        &format!(
            "K(0) = 0 {zero_ok}; threshold {lam_c:.4}; {pairs} pairs, min normalized inner product {min_inner:.3e}; g->0 deviation {g0_rel:.4}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_strategy_cross_validation() {
    let probes: [[f64; 2]; 5] = [
        [3.0, 0.0],
        [0.0, 3.0],
        [2.5, 2.5],
        [-2.0, 1.0],
        [1.0, -3.0],
    ];
    let mk = |strategy: Strategy| CellConfig {
        resolution: 8,
        mu: 1.0,
        g: 0.05,
        strategy,
        ..CellConfig::default()
    };
    let mut product = CellSolver::new(&geometry(), &mk(Strategy::Product)).unwrap();
    let mut two_level = CellSolver::new(&geometry(), &mk(Strategy::TwoLevel)).unwrap();
    let mut worst: f64 = 0.0;
    for lam in probes {
        let a = product.eval_k(lam).unwrap();
        let b = two_level.eval_k(lam).unwrap();
        let denom = a[0].hypot(a[1]).max(b[0].hypot(b[1])).max(f64::MIN_POSITIVE);
        worst = worst.max((a[0] - b[0]).hypot(a[1] - b[1]) / denom);
    }
    let pass = report(
        "criterion 09 strategy-cross-validation",
        worst <= 0.05,
        &format!("worst relative deviation {worst:.4} over {} forcings", probes.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_homogenization_limit() {
    let stokes = stokes_study();
    let su = stokes.gaps_u();
    let sp = stokes.gaps_p();
    let stokes_mono = ConvergenceReport::monotone(&su) && ConvergenceReport::monotone(&sp);
    let stokes_final = *su.last().unwrap();

    let bingham = bingham_study();
    let bu = bingham.gaps_u();
    let bp = bingham.gaps_p();
    let bingham_mono = ConvergenceReport::monotone(&bu) && ConvergenceReport::monotone(&bp);

    let pass = report(
        "criterion 10 homogenization-limit",
        stokes_mono && stokes_final <= 0.15 && bingham_mono,
        &format!(
            "stokes gap_u {su:.3?} gap_p {sp:.3?}; bingham gap_u {bu:.3?} gap_p {bp:.3?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_macro_invariants() {
    let grid = StaggeredGrid::over_box([1.0, 1.0], [32, 32], [false, false]).unwrap();
    let f = Forcing::Shear { amplitude: 1.0 }.field(&grid);
    let k = [[2.0, 0.3], [0.3, 1.0]];
    let cfg = DarcyConfig::default();
    let linear = solve_linear_darcy(k, &f, &cfg).unwrap();

    let div = divergence(&linear.u0);
    let scale = linear.u0.linf().max(f64::MIN_POSITIVE) / grid.hx;
    let div_rel = div.data.iter().fold(0.0f64, |m, &v| m.max(v.abs())) / scale;

    let mut wall_flux: f64 = 0.0;
    for j in 0..grid.ny {
        wall_flux = wall_flux
            .max(linear.u0.u[(0, j)].abs())
            .max(linear.u0.u[(grid.nx, j)].abs());
    }
    for i in 0..grid.nx {
        wall_flux = wall_flux
            .max(linear.u0.v[(i, 0)].abs())
            .max(linear.u0.v[(i, grid.ny)].abs());
    }

    let mut law = DarcyLaw::Matrix(k);
    let nonlinear = solve_nonlinear_darcy(&mut law, &f, &cfg).unwrap();
    let mut dv = nonlinear.u0.clone();
    dv.scaled_add(-1.0, &linear.u0);
    let match_rel =
        l2_norm_vector(&dv) / l2_norm_vector(&linear.u0).max(f64::MIN_POSITIVE);

    let pass = report(
        "criterion 11 macro-invariants",
        div_rel <= 1e-10 && wall_flux == 0.0 && match_rel <= 1e-6,
        &format!(
            "relative div {div_rel:.3e} (tol 1e-10), wall flux {wall_flux:.1e}, nonlinear-vs-linear {match_rel:.3e} (tol 1e-6)"
        ),
    );
    assert!(pass);
}
