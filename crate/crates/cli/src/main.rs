//! Command-line harness: configuration ingestion, experiment orchestration,
//! and deterministic artifact emission.
//!
//! Every subcommand writes a JSON run manifest (command, geometry hash, seed,
//! full configuration, headline results) into the output directory, so a run
//! can be reproduced exactly from its artifacts.  Exit code 0 means every
//! requested assertion passed; 1 means an assertion failed; 2 means the run
//! itself errored.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bingflow::cell::{CellConfig, CellSolver, EffectiveLaw};
use bingflow::darcy::{solve_linear_darcy, solve_nonlinear_darcy, DarcyConfig, DarcyLaw, PolarTable};
use bingflow::error::{Error, Result};
use bingflow::fine::{apriori_norms, fine_grid, rigid_zones, solve_fine};
use bingflow::geometry::{BoxSpec, CellGeometry, DoublePeriodicDomain, RectCell};
use bingflow::io::{
    grid_file_scalar, grid_file_vector, load_study_config, save_study_config, write_json,
    RunManifest,
};
use bingflow::saddle::SolverConfig;
use bingflow::study::{
    run_convergence_study, run_property_suites, sample_law, unfolding_convergence, Forcing,
    StudyConfig,
};

#[derive(Parser)]
#[command(
    name = "bingflow",
    about = "Two-scale homogenization toolkit for yield-stress flow in doubly perforated media",
    version
)]
struct Cli {
    /// Study configuration file (JSON).  When given, its values override the
    /// corresponding command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and run manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Coarsest epsilon of the dyadic sweep.
    #[arg(long, global = true, default_value_t = 0.5)]
    epsilon0: f64,

    /// Number of dyadic levels.
    #[arg(long, global = true, default_value_t = 3)]
    levels: usize,

    /// Fine-grid cells per delta-subcell per axis.
    #[arg(long, global = true, default_value_t = 4)]
    grid_per_subcell: usize,

    /// Viscosity.
    #[arg(long, global = true, default_value_t = 1.0)]
    mu: f64,

    /// Yield stress (0 = Stokes).
    #[arg(long, global = true, default_value_t = 0.0)]
    g: f64,

    /// Forcing preset: zero | constant:FX,FY | shear:AMP | vortex:AMP.
    #[arg(long, global = true, default_value = "vortex:1.0")]
    forcing: String,

    /// Cells per axis of the macroscopic Darcy grid.
    #[arg(long, global = true, default_value_t = 16)]
    macro_resolution: usize,

    /// Reference-cell resolution for cell problems.
    #[arg(long, global = true, default_value_t = 8)]
    cell_resolution: usize,

    /// Random seed for auxiliary checks.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Also compute the Poincaré constant per study level (slower).
    #[arg(long, global = true, default_value_t = false)]
    poincare: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the configured two-scale geometry and report every invariant.
    ValidateGeometry,
    /// Run the dyadic unfolding-convergence suite and assert gap decrease.
    UnfoldSuite,
    /// Compute the linear permeability tensor and write an effective-law file.
    CellLinear {
        /// Output path of the effective-law file.
        #[arg(long, default_value = "law.json")]
        law_out: PathBuf,
    },
    /// Sample the nonlinear effective law on a polar grid and write it out.
    CellNonlinear {
        #[arg(long, default_value = "law.json")]
        law_out: PathBuf,
        /// Smallest sampled forcing magnitude.
        #[arg(long, default_value_t = 0.05)]
        mag_lo: f64,
        /// Largest sampled forcing magnitude.
        #[arg(long, default_value_t = 5.0)]
        mag_hi: f64,
        /// Sampled directions.
        #[arg(long, default_value_t = 16)]
        dirs: usize,
        /// Sampled magnitudes per direction.
        #[arg(long, default_value_t = 7)]
        mags: usize,
    },
    /// Solve one fine-scale flow problem at the coarsest level and export it.
    FineSim,
    /// Solve the macroscopic Darcy problem from an effective-law file.
    Darcy {
        /// Effective-law file written by cell-linear or cell-nonlinear.
        #[arg(long)]
        law: PathBuf,
    },
    /// Run the full dyadic homogenization study and assert gap decrease.
    Converge,
    /// Run the aggregated invariant property suites.
    Properties,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("FAILED: at least one requested assertion did not hold");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Built-in demonstration geometry: an open Y cell over a Z cell with a
/// centered square obstacle, subdivided 2x2.
fn default_geometry() -> CellGeometry {
    CellGeometry::new(
        RectCell::new(vec![1.0, 1.0], vec![]).expect("valid Y cell"),
        RectCell::new(
            vec![1.0, 1.0],
            vec![BoxSpec::new(vec![0.25, 0.25], vec![0.5, 0.5])],
        )
        .expect("valid Z cell"),
        vec![2, 2],
    )
    .expect("valid default geometry")
}

fn parse_forcing(spec: &str) -> Result<Forcing> {
    let (kind, rest) = match spec.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (spec, None),
    };
    let one = |r: Option<&str>| -> Result<f64> {
        r.ok_or_else(|| Error::InvalidConfig(format!("forcing '{spec}' needs an amplitude")))?
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad forcing amplitude in '{spec}'")))
    };
    match kind {
        "zero" => Ok(Forcing::Zero),
        "shear" => Ok(Forcing::Shear { amplitude: one(rest)? }),
        "vortex" => Ok(Forcing::Vortex { amplitude: one(rest)? }),
        "constant" => {
            let r = rest.ok_or_else(|| {
                Error::InvalidConfig(format!("forcing '{spec}' needs FX,FY components"))
            })?;
            let (a, b) = r.split_once(',').ok_or_else(|| {
                Error::InvalidConfig(format!("forcing '{spec}' needs FX,FY components"))
            })?;
            let fx = a.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad forcing component in '{spec}'"))
            })?;
            let fy = b.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad forcing component in '{spec}'"))
            })?;
            Ok(Forcing::Constant { fx, fy })
        }
        _ => Err(Error::InvalidConfig(format!(
            "unknown forcing preset '{spec}' (expected zero | constant | shear | vortex)"
        ))),
    }
}

/// Assemble the effective study configuration: command-line flags first, then
/// the config file (when given) overrides them wholesale.
fn effective_config(cli: &Cli) -> Result<StudyConfig> {
    if let Some(path) = &cli.config {
        return load_study_config(path);
    }
    Ok(StudyConfig {
        omega: [1.0, 1.0],
        geometry: default_geometry(),
        epsilon0: cli.epsilon0,
        levels: cli.levels,
        grid_per_subcell: cli.grid_per_subcell,
        mu: cli.mu,
        g: cli.g,
        forcing: parse_forcing(&cli.forcing)?,
        fine_solver: SolverConfig {
            tol: 1e-6,
            r_factor: 100.0,
            r_div_factor: 1000.0,
            ..SolverConfig::default()
        },
        cell: CellConfig {
            resolution: cli.cell_resolution,
            mu: cli.mu,
            g: cli.g,
            ..CellConfig::default()
        },
        darcy: DarcyConfig::default(),
        macro_resolution: cli.macro_resolution,
        compute_poincare: cli.poincare,
        seed: cli.seed,
    })
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_manifest<R: serde::Serialize>(
    cli: &Cli,
    cfg: &StudyConfig,
    command: &str,
    results: &R,
) -> Result<()> {
    let manifest = RunManifest::new(
        command,
        cfg.geometry.content_hash(),
        cfg.seed,
        cfg,
        results,
    )?;
    manifest.save(&cli.out.join(format!("{command}.manifest.json")))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = effective_config(cli)?;
    ensure_out(&cli.out)?;
    // persist the effective configuration next to every run
    save_study_config(&cli.out.join("effective-config.json"), &cfg)?;

    match &cli.cmd {
        Cmd::ValidateGeometry => {
            let report = cfg.geometry.validate();
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.pass { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            write_manifest(cli, &cfg, "validate-geometry", &report)?;
            Ok(report.all_pass())
        }
        Cmd::UnfoldSuite => {
            let base = DoublePeriodicDomain::new(
                cfg.omega.to_vec(),
                cfg.epsilon0,
                cfg.geometry.clone(),
                cfg.grid_per_subcell,
            )?;
            let gaps = unfolding_convergence(&base, cfg.levels)?;
            for level in &gaps {
                println!(
                    "eps {:<8.5} delta {:<8.5} gaps {:.3e} {:.3e} {:.3e} {:.3e}",
                    level.epsilon,
                    level.delta,
                    level.gaps[0],
                    level.gaps[1],
                    level.gaps[2],
                    level.gaps[3]
                );
            }
            // export a doubly oscillating sample field in unfolded
            // coordinates for external inspection
            let grid = fine_grid(&base)?;
            let (eps, ed) = (base.epsilon, base.epsilon * base.delta());
            let tau = std::f64::consts::TAU;
            let phi = bingflow::fields::ScalarField::from_fn(&grid, move |x, y| {
                (1.0 + 0.5 * x - 0.3 * y) * (tau * x / eps).cos() * (tau * y / ed).sin()
            });
            let ue = bingflow::unfolding::unfold_eps(&phi, &base)?;
            std::fs::write(
                cli.out.join("unfolded-eps.csv"),
                bingflow::io::unfolded_eps_csv(&ue),
            )?;
            let ud = bingflow::unfolding::unfold_both(&phi, &base)?;
            let y_lengths = [
                cfg.geometry.y_cell.lengths[0],
                cfg.geometry.y_cell.lengths[1],
            ];
            std::fs::write(
                cli.out.join("unfolded-delta.csv"),
                bingflow::io::unfolded_delta_csv(&ud, y_lengths),
            )?;
            write_json(&cli.out.join("unfold-gaps.json"), &gaps)?;
            write_manifest(cli, &cfg, "unfold-suite", &gaps)?;
            let mut ok = true;
            for k in 0..4 {
                for w in gaps.windows(2) {
                    ok &= w[1].gaps[k] < w[0].gaps[k];
                }
            }
            Ok(ok)
        }
        Cmd::CellLinear { law_out } => {
            let mut solver = CellSolver::new(&cfg.geometry, &cfg.cell)?;
            let k = solver.eval_k_linear()?;
            let mut law = EffectiveLaw::new(&solver);
            law.k_linear = Some(k);
            law.save(&cli.out.join(law_out))?;
            println!("K = [[{:.6e}, {:.6e}], [{:.6e}, {:.6e}]]", k[0][0], k[0][1], k[1][0], k[1][1]);
            write_manifest(cli, &cfg, "cell-linear", &law)?;
            Ok(true)
        }
        Cmd::CellNonlinear {
            law_out,
            mag_lo,
            mag_hi,
            dirs,
            mags,
        } => {
            let mut solver = CellSolver::new(&cfg.geometry, &cfg.cell)?;
            let law = sample_law(&mut solver, *mag_lo, *mag_hi, *dirs, *mags)?;
            law.save(&cli.out.join(law_out))?;
            println!(
                "sampled {} law points over {} directions",
                law.samples.len(),
                dirs
            );
            write_manifest(cli, &cfg, "cell-nonlinear", &law)?;
            Ok(true)
        }
        Cmd::FineSim => {
            let dom = DoublePeriodicDomain::new(
                cfg.omega.to_vec(),
                cfg.epsilon0,
                cfg.geometry.clone(),
                cfg.grid_per_subcell,
            )?;
            let grid = fine_grid(&dom)?;
            let f = cfg.forcing.field(&grid);
            let sol = solve_fine(&dom, &f, cfg.g, cfg.mu, &cfg.fine_solver)?;
            let norms = apriori_norms(&sol);
            let rigid = if cfg.g > 0.0 && f.linf() > 0.0 {
                let rz = rigid_zones(&sol)?;
                rz.rigid_cells as f64 / (rz.rigid_cells + rz.fluid_cells).max(1) as f64
            } else {
                0.0
            };
            std::fs::write(
                cli.out.join("fine-velocity.grid"),
                grid_file_vector(&sol.state.u),
            )?;
            std::fs::write(
                cli.out.join("fine-pressure.grid"),
                grid_file_scalar("p", &sol.p_ext),
            )?;
            std::fs::write(
                cli.out.join("fluid-mask.csv"),
                bingflow::io::mask_csv(&sol.mask),
            )?;
            let results = serde_json::json!({
                "norms": norms,
                "rigid_fraction": rigid,
                "outer_iterations": sol.state.outer_iterations,
                "converged": sol.state.converged,
                "div_inf": sol.state.div_inf,
            });
            println!(
                "|u| {:.6e}  eps*delta*|grad u| {:.6e}  |p| {:.6e}  rigid {:.3}",
                norms.u_l2, norms.scaled_grad_l2, norms.p_ext_l2, rigid
            );
            write_manifest(cli, &cfg, "fine-sim", &results)?;
            Ok(sol.state.converged)
        }
        Cmd::Darcy { law } => {
            let law = EffectiveLaw::load(law, &cfg.geometry)?;
            let macro_grid = bingflow::fields::StaggeredGrid::over_box(
                cfg.omega,
                [cfg.macro_resolution, cfg.macro_resolution],
                [false, false],
            )?;
            let f = cfg.forcing.field(&macro_grid);
            let sol = if law.samples.is_empty() {
                let k = law.k_linear.ok_or_else(|| {
                    Error::InvalidConfig(
                        "law file has neither samples nor a linear tensor".into(),
                    )
                })?;
                solve_linear_darcy(k, &f, &cfg.darcy)?
            } else {
                let mut table = DarcyLaw::Table(PolarTable::from_law(&law));
                solve_nonlinear_darcy(&mut table, &f, &cfg.darcy)?
            };
            std::fs::write(
                cli.out.join("darcy-velocity.grid"),
                grid_file_vector(&sol.u0),
            )?;
            std::fs::write(
                cli.out.join("darcy-pressure.grid"),
                grid_file_scalar("p", &sol.p_hat),
            )?;
            let results = serde_json::json!({
                "iterations": sol.iterations,
                "residual": sol.residual,
                "all_rigid": sol.all_rigid,
            });
            println!(
                "macro solve: {} iterations, residual {:.3e}, all_rigid {}",
                sol.iterations, sol.residual, sol.all_rigid
            );
            write_manifest(cli, &cfg, "darcy", &results)?;
            Ok(true)
        }
        Cmd::Converge => {
            let report = run_convergence_study(&cfg)?;
            for l in &report.levels {
                println!(
                    "eps {:<8.5} gap_u {:.4} gap_p {:.4} gap_p_fluid {:.4} rigid {:.3}",
                    l.epsilon, l.gap_u, l.gap_p, l.gap_p_fluid, l.rigid_fraction
                );
            }
            write_json(&cli.out.join("convergence-report.json"), &report)?;
            write_manifest(cli, &cfg, "converge", &report)?;
            let forced = cfg.forcing.field(&fine_grid(&DoublePeriodicDomain::new(
                cfg.omega.to_vec(),
                cfg.epsilon0,
                cfg.geometry.clone(),
                cfg.grid_per_subcell,
            )?)?)
            .linf()
                > 0.0;
            if !forced {
                // zero forcing: all gaps must vanish identically
                return Ok(report
                    .levels
                    .iter()
                    .all(|l| l.gap_u == 0.0 && l.gap_p == 0.0));
            }
            let mut ok = true;
            for w in report.levels.windows(2) {
                ok &= w[1].gap_u < w[0].gap_u && w[1].gap_p < w[0].gap_p;
            }
            Ok(ok)
        }
        Cmd::Properties => {
            let report = run_property_suites(&cfg.geometry, cfg.grid_per_subcell, cfg.seed)?;
            for c in &report.checks {
                println!(
                    "{} {}: value {:.3e} tolerance {:.3e}",
                    if c.pass { "pass" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            write_manifest(cli, &cfg, "properties", &report)?;
            Ok(report.all_pass())
        }
    }
}
