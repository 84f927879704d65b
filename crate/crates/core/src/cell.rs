//! Coupled two-scale cell problems and the effective (nonlinear) Darcy law.
//!
//! For a local macroscopic force `lambda` the cell problem couples a Bingham
//! flow on the micro cell `Z*` (coefficients `2*mu` on the gradient energy
//! and `g` on the yield term) with an incompressibility constraint on the
//! meso cell `Y*`: the `Z`-averaged flux must be divergence free on the
//! subcell lattice, with no flux into the `Y_s` obstacles, closed by a
//! `Y`-periodic lattice pressure `q`.  The effective law is
//! `K(lambda) = 1/(|Y||Z|) * integral of the cell velocity`, evaluated here
//! from the face fluxes of the subcell lattice.
//!
//! Two independent strategies solve the same discrete problem:
//!
//! * `two_level` — fully converged micro solves per lattice face, with a
//!   Picard iteration on the lattice pressure;
//! * `product` — one micro state per lattice face, advanced by a few
//!   splitting sweeps per lattice iteration, so micro and meso relax
//!   together.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{divergence, ScalarField, StaggeredGrid, VectorField};
use crate::geometry::{build_cell_masks, CellGeometry, Mask};
use crate::saddle::{bingham_sweeps, solve_bingham, BinghamState, FaceActivity, SolverConfig};

/// Solution strategy for the coupled cell problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Product,
    TwoLevel,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Product => "product",
            Strategy::TwoLevel => "two_level",
        }
    }
}

/// Parameters of the cell-problem solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    /// Grid cells per axis on the micro cell `Z`.
    pub resolution: usize,
    pub mu: f64,
    pub g: f64,
    pub strategy: Strategy,
    /// Micro (Bingham) solver parameters.
    pub solver: SolverConfig,
    /// Relative tolerance of the lattice divergence.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Damping of the lattice pressure update.
    pub damping: f64,
    /// Splitting sweeps per lattice iteration (`product` strategy).
    pub sweeps: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            resolution: 8,
            mu: 1.0,
            g: 0.0,
            strategy: Strategy::TwoLevel,
            solver: SolverConfig {
                tol: 1e-7,
                // Strong augmentation keeps the splitting contraction fast even
                // for forcings just above the yield threshold, where moderate
                // parameters stall; the divergence penalty must grow in step.
                r_factor: 100.0,
                r_div_factor: 1000.0,
                ..SolverConfig::default()
            },
            picard_tol: 1e-7,
            picard_max_iter: 400,
            damping: 1.0,
            sweeps: 30,
        }
    }
}

/// Relative magnitude step (natural-log spacing) of the `K(lambda)` memo
/// quantization.
const QUANT_MAG: f64 = 1e-3;
/// Angular step of the `K(lambda)` memo quantization, degrees.
const QUANT_DEG: f64 = 1.0;

fn quantize(force: [f64; 2]) -> Option<((i64, i64), [f64; 2])> {
    let mag = force[0].hypot(force[1]);
    if mag < 1e-300 {
        return None;
    }
    let k = (mag.ln() / QUANT_MAG).round();
    let a = (force[1].atan2(force[0]).to_degrees() / QUANT_DEG).round();
    let rep_mag = (k * QUANT_MAG).exp();
    let rep_ang = (a * QUANT_DEG).to_radians();
    Some((
        (k as i64, a as i64),
        [rep_mag * rep_ang.cos(), rep_mag * rep_ang.sin()],
    ))
}

/// Stateful solver for one cell geometry; caches micro solves.
pub struct CellSolver {
    pub geom: CellGeometry,
    pub cfg: CellConfig,
    z_grid: StaggeredGrid,
    mask_z: Mask,
    lattice: StaggeredGrid,
    mask_lat: Mask,
    lat_act: FaceActivity,
    memo: HashMap<(i64, i64), [f64; 2]>,
    k_z_linear: Option<[[f64; 2]; 2]>,
    k_lat_linear: Option<[[f64; 2]; 2]>,
    warm_z: Option<BinghamState>,
    /// Micro states per lattice face (`product` strategy).
    face_states_u: Vec<Option<BinghamState>>,
    face_states_v: Vec<Option<BinghamState>>,
}

impl CellSolver {
    pub fn new(geom: &CellGeometry, cfg: &CellConfig) -> Result<Self> {
        if geom.z_cell.obstacles.is_empty() {
            return Err(Error::InvalidGeometry(
                "cell problems need a non-empty Z obstacle (otherwise the \
                 constant force is unbalanced)"
                    .into(),
            ));
        }
        if geom.subdivision.iter().any(|&s| s < 2) {
            return Err(Error::InvalidGeometry(
                "cell problems need a subdivision of at least 2 per axis".into(),
            ));
        }
        let (_, mask_z, _) = build_cell_masks(geom, cfg.resolution)?;
        let z_grid = StaggeredGrid::over_box(
            [geom.z_cell.lengths[0], geom.z_cell.lengths[1]],
            [cfg.resolution, cfg.resolution],
            [true, true],
        )?;
        if !mask_z.is_connected([true, true]) {
            return Err(Error::DisconnectedFluid);
        }

        let (n0, n1) = (geom.subdivision[0], geom.subdivision[1]);
        let lattice = StaggeredGrid::over_box(
            [geom.y_cell.lengths[0], geom.y_cell.lengths[1]],
            [n0, n1],
            [true, true],
        )?;
        // a subcell is solid iff it lies inside Y_s (whole-subcell covering
        // is a geometry invariant, so the center test is exact)
        let mut lat_values = ndarray::Array2::from_elem((n0, n1), true);
        for ((i, j), v) in lat_values.indexed_iter_mut() {
            let c = [
                (i as f64 + 0.5) * geom.subcell_len(0),
                (j as f64 + 0.5) * geom.subcell_len(1),
            ];
            if geom.y_cell.in_obstacle(&c) {
                *v = false;
            }
        }
        let mask_lat = Mask {
            values: lat_values,
            spacing: [geom.subcell_len(0), geom.subcell_len(1)],
        };
        if mask_lat.fluid_cells() == 0 {
            return Err(Error::InvalidGeometry("Y_s covers every subcell".into()));
        }
        let lat_act = FaceActivity::from_mask(&lattice, &mask_lat);
        let n_u = (lattice.nx + 1) * lattice.ny;
        let n_v = lattice.nx * (lattice.ny + 1);
        Ok(Self {
            geom: geom.clone(),
            cfg: cfg.clone(),
            z_grid,
            mask_z,
            lattice,
            mask_lat,
            lat_act,
            memo: HashMap::new(),
            k_z_linear: None,
            k_lat_linear: None,
            warm_z: None,
            face_states_u: vec![None; n_u],
            face_states_v: vec![None; n_v],
        })
    }

    /// Velocity average `1/|Z| * integral of u over Z*` (zero extension).
    fn z_average(&self, u: &VectorField) -> [f64; 2] {
        let g = &self.z_grid;
        let vol = g.cell_volume();
        let z_vol = self.geom.z_cell.volume();
        let mut fx = 0.0;
        let mut fy = 0.0;
        for i in 0..g.nx {
            for j in 0..g.ny {
                fx += 0.5 * (u.ux(i, j) + u.ux(i + 1, j));
                fy += 0.5 * (u.vy(i, j) + u.vy(i, j + 1));
            }
        }
        [fx * vol / z_vol, fy * vol / z_vol]
    }

    fn const_force(&self, force: [f64; 2]) -> VectorField {
        VectorField::from_fn(&self.z_grid, |_, _| force[0], |_, _| force[1])
    }

    /// Fully converged micro solve; returns the `Z`-averaged flux.
    fn z_solve(&mut self, force: [f64; 2], g_yield: f64) -> Result<[f64; 2]> {
        let f = self.const_force(force);
        let state = solve_bingham(
            &self.z_grid,
            Some(&self.mask_z),
            &f,
            2.0 * self.cfg.mu,
            g_yield,
            &self.cfg.solver,
            self.warm_z.as_ref(),
        )?;
        let flux = self.z_average(&state.u);
        self.warm_z = Some(state);
        Ok(flux)
    }

    /// Micro matrix of the linearized (`g = 0`) problem on `Z*`, including
    /// the `2*mu` viscosity.
    pub fn z_linear_matrix(&mut self) -> Result<[[f64; 2]; 2]> {
        if let Some(k) = self.k_z_linear {
            return Ok(k);
        }
        self.warm_z = None;
        let c0 = self.z_solve([1.0, 0.0], 0.0)?;
        self.warm_z = None;
        let c1 = self.z_solve([0.0, 1.0], 0.0)?;
        self.warm_z = None;
        // columns are flux responses to the unit forces
        let k = [[c0[0], c1[0]], [c0[1], c1[1]]];
        self.k_z_linear = Some(k);
        Ok(k)
    }

    /// Tangential pressure gradient at a lattice face from the four diagonal
    /// neighbors; zero when a neighbor is solid.
    fn tangential(&self, q: &ScalarField, axis: usize, i: usize, j: usize) -> f64 {
        let (n0, n1) = (self.lattice.nx, self.lattice.ny);
        let wrap = |a: isize, n: usize| -> usize { a.rem_euclid(n as isize) as usize };
        let cell =
            |a: isize, b: isize| -> Option<f64> {
                let idx = (wrap(a, n0), wrap(b, n1));
                if self.mask_lat.values[idx] {
                    Some(q.data[idx])
                } else {
                    None
                }
            };
        let (ii, jj) = (i as isize, j as isize);
        if axis == 0 {
            // x-face between cells (i-1, j) and (i, j): d q / d y
            let vals = [
                cell(ii - 1, jj + 1),
                cell(ii, jj + 1),
                cell(ii - 1, jj - 1),
                cell(ii, jj - 1),
            ];
            match vals {
                [Some(a), Some(b), Some(c), Some(d)] => {
                    (a + b - c - d) / (4.0 * self.lattice.hy)
                }
                _ => 0.0,
            }
        } else {
            // y-face between cells (i, j-1) and (i, j): d q / d x
            let vals = [
                cell(ii + 1, jj - 1),
                cell(ii + 1, jj),
                cell(ii - 1, jj - 1),
                cell(ii - 1, jj),
            ];
            match vals {
                [Some(a), Some(b), Some(c), Some(d)] => {
                    (a + b - c - d) / (4.0 * self.lattice.hx)
                }
                _ => 0.0,
            }
        }
    }

    fn face_force(&self, q: &ScalarField, lambda: [f64; 2], axis: usize, i: usize, j: usize) -> [f64; 2] {
        let (n0, n1) = (self.lattice.nx, self.lattice.ny);
        if axis == 0 {
            let w = (i + n0 - 1) % n0;
            let dqdx = (q.data[(i, j)] - q.data[(w, j)]) / self.lattice.hx;
            [lambda[0] - dqdx, lambda[1] - self.tangential(q, 0, i, j)]
        } else {
            let s = (j + n1 - 1) % n1;
            let dqdy = (q.data[(i, j)] - q.data[(i, s)]) / self.lattice.hy;
            [lambda[0] - self.tangential(q, 1, i, j), lambda[1] - dqdy]
        }
    }

    /// Face flux oracle for the current strategy.  `mode` selects the
    /// nonlinear law, or the precomputed linear micro matrix.
    fn face_flux(
        &mut self,
        mode: OracleMode,
        axis: usize,
        i: usize,
        j: usize,
        force: [f64; 2],
    ) -> Result<[f64; 2]> {
        match mode {
            OracleMode::Linear => {
                let k = self.k_z_linear.expect("linear matrix must be prepared");
                Ok([
                    k[0][0] * force[0] + k[0][1] * force[1],
                    k[1][0] * force[0] + k[1][1] * force[1],
                ])
            }
            OracleMode::Nonlinear => {
                let idx = if axis == 0 {
                    i * self.lattice.ny + j
                } else {
                    i * (self.lattice.ny + 1) + j
                };
                let f = self.const_force(force);
                let warm = if axis == 0 {
                    self.face_states_u[idx].take()
                } else {
                    self.face_states_v[idx].take()
                };
                let state = match self.cfg.strategy {
                    // fully converged micro solve at the exact face force
                    Strategy::TwoLevel => solve_bingham(
                        &self.z_grid,
                        Some(&self.mask_z),
                        &f,
                        2.0 * self.cfg.mu,
                        self.cfg.g,
                        &self.cfg.solver,
                        warm.as_ref(),
                    )?,
                    // a few splitting sweeps; micro and meso relax together
                    Strategy::Product => bingham_sweeps(
                        &self.z_grid,
                        Some(&self.mask_z),
                        &f,
                        2.0 * self.cfg.mu,
                        self.cfg.g,
                        &self.cfg.solver,
                        warm.as_ref(),
                        self.cfg.sweeps,
                    )?,
                };
                let flux = self.z_average(&state.u);
                if axis == 0 {
                    self.face_states_u[idx] = Some(state);
                } else {
                    self.face_states_v[idx] = Some(state);
                }
                Ok(flux)
            }
        }
    }

    fn all_face_states_converged(&self) -> bool {
        self.face_states_u
            .iter()
            .chain(self.face_states_v.iter())
            .flatten()
            .all(|s| s.converged)
    }

    /// Solve the coupled lattice problem and return the effective flux
    /// `K(lambda)` together with the lattice state.
    fn lattice_solve(&mut self, lambda: [f64; 2], mode: OracleMode) -> Result<LatticeSolution> {
        let lattice = self.lattice.clone();
        let act = self.lat_act.clone();
        let mut q = ScalarField::zeros(&lattice);
        let mut flux = VectorField::zeros(&lattice);
        let mut k_est = 0.0f64;
        let mut div_inf = f64::INFINITY;
        let h = lattice.hx.min(lattice.hy);

        for it in 0..self.cfg.picard_max_iter {
            flux.fill(0.0);
            for i in 0..lattice.u_cols() {
                for j in 0..lattice.ny {
                    if !act.ux[(i, j)] {
                        continue;
                    }
                    let force = self.face_force(&q, lambda, 0, i, j);
                    let f = self.face_flux(mode, 0, i, j, force)?;
                    flux.u[(i, j)] = f[0];
                    let fm = force[0].hypot(force[1]);
                    if fm > 1e-300 {
                        k_est = k_est.max(f[0].hypot(f[1]) / fm);
                    }
                }
            }
            for i in 0..lattice.nx {
                for j in 0..lattice.v_rows() {
                    if !act.vy[(i, j)] {
                        continue;
                    }
                    let force = self.face_force(&q, lambda, 1, i, j);
                    let f = self.face_flux(mode, 1, i, j, force)?;
                    flux.v[(i, j)] = f[1];
                    let fm = force[0].hypot(force[1]);
                    if fm > 1e-300 {
                        k_est = k_est.max(f[0].hypot(f[1]) / fm);
                    }
                }
            }

            let mut div = divergence(&flux);
            for ((ci, cj), v) in div.data.indexed_iter_mut() {
                if !self.mask_lat.values[(ci, cj)] {
                    *v = 0.0;
                }
            }
            div_inf = div
                .data
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            let uref = flux.linf();
            let target = self.cfg.picard_tol * (uref / h).max(1e-300);
            let micro_ok = match mode {
                OracleMode::Nonlinear => self.all_face_states_converged(),
                OracleMode::Linear => true,
            };
            if div_inf <= target && micro_ok {
                let k = self.integrate_flux(&flux);
                return Ok(LatticeSolution {
                    k,
                    q,
                    flux,
                    iterations: it + 1,
                    div_inf,
                });
            }
            if k_est <= 0.0 {
                // no face responds: fully rigid but with a nonzero residual
                // would be inconsistent
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: div_inf,
                });
            }
            let mut rhs = div.clone();
            rhs.data.mapv_inplace(|v| -v / k_est);
            let dq = poisson_neumann(&lattice, &self.mask_lat, &rhs, 1e-12)?;
            for ((ci, cj), v) in q.data.indexed_iter_mut() {
                if self.mask_lat.values[(ci, cj)] {
                    *v += self.cfg.damping * dq.data[(ci, cj)];
                }
            }
            q.remove_mean(Some(&self.mask_lat));
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.picard_max_iter,
            residual: div_inf,
        })
    }

    /// `1/|Y| * integral` of the face fluxes (the factor `1/|Z|` is already
    /// in the micro averages).
    fn integrate_flux(&self, flux: &VectorField) -> [f64; 2] {
        let lat = &self.lattice;
        let vol = lat.cell_volume();
        let y_vol = self.geom.y_cell.volume();
        let mut kx = 0.0;
        let mut ky = 0.0;
        for i in 0..lat.u_cols() {
            for j in 0..lat.ny {
                kx += flux.u[(i, j)];
            }
        }
        for i in 0..lat.nx {
            for j in 0..lat.v_rows() {
                ky += flux.v[(i, j)];
            }
        }
        [kx * vol / y_vol, ky * vol / y_vol]
    }

    /// Effective flux `K(lambda)` of the nonlinear law, memoized on a
    /// quantized `lambda` grid (the macro solver re-queries nearby values).
    pub fn eval_k(&mut self, lambda: [f64; 2]) -> Result<[f64; 2]> {
        if self.cfg.g < 0.0 {
            return Err(Error::NegativeYield(self.cfg.g));
        }
        let Some((key, _)) = quantize(lambda) else {
            return Ok([0.0, 0.0]);
        };
        if let Some(&k) = self.memo.get(&key) {
            return Ok(k);
        }
        let k = self.lattice_solve(lambda, OracleMode::Nonlinear)?.k;
        self.memo.insert(key, k);
        Ok(k)
    }

    /// Effective permeability matrix of the linearized (`g = 0`) law,
    /// assembled column-by-column from unit forcings.
    pub fn eval_k_linear(&mut self) -> Result<[[f64; 2]; 2]> {
        if let Some(k) = self.k_lat_linear {
            return Ok(k);
        }
        let k = self.eval_k_linear_uncached()?;
        self.k_lat_linear = Some(k);
        Ok(k)
    }

    fn eval_k_linear_uncached(&mut self) -> Result<[[f64; 2]; 2]> {
        match self.cfg.strategy {
            Strategy::TwoLevel => {
                self.z_linear_matrix()?;
                let c0 = self.lattice_solve([1.0, 0.0], OracleMode::Linear)?.k;
                let c1 = self.lattice_solve([0.0, 1.0], OracleMode::Linear)?.k;
                Ok([[c0[0], c1[0]], [c0[1], c1[1]]])
            }
            Strategy::Product => {
                // run the coupled iteration with the yield switched off
                let saved_g = self.cfg.g;
                self.cfg.g = 0.0;
                self.reset_states();
                let r0 = self.lattice_solve([1.0, 0.0], OracleMode::Nonlinear);
                self.reset_states();
                let r1 = self.lattice_solve([0.0, 1.0], OracleMode::Nonlinear);
                self.cfg.g = saved_g;
                self.reset_states();
                let (c0, c1) = (r0?.k, r1?.k);
                Ok([[c0[0], c1[0]], [c0[1], c1[1]]])
            }
        }
    }

    /// Drop all cached micro states and memo entries.
    pub fn reset_states(&mut self) {
        self.memo.clear();
        self.warm_z = None;
        for s in self
            .face_states_u
            .iter_mut()
            .chain(self.face_states_v.iter_mut())
        {
            *s = None;
        }
    }

    /// Relative flux magnitude below which a forcing counts as rigid.
    pub const RIGID_FLUX_REL: f64 = 1e-4;

    /// True if `K(t * dir)` is negligible relative to the linear response.
    pub fn is_rigid(&mut self, dir: [f64; 2], t: f64) -> Result<bool> {
        let k_lin = self.eval_k_linear()?;
        let lam = [t * dir[0], t * dir[1]];
        let lin = [
            k_lin[0][0] * lam[0] + k_lin[0][1] * lam[1],
            k_lin[1][0] * lam[0] + k_lin[1][1] * lam[1],
        ];
        let lin_mag = lin[0].hypot(lin[1]);
        let k = self.eval_k(lam)?;
        Ok(k[0].hypot(k[1]) <= Self::RIGID_FLUX_REL * lin_mag.max(1e-300))
    }

    /// Yield threshold along a direction: the magnitude `t` at which the
    /// effective flux first becomes nonzero, found by doubling and
    /// bisection.
    pub fn yield_threshold(&mut self, dir: [f64; 2], t_max: f64) -> Result<f64> {
        let n = dir[0].hypot(dir[1]);
        if n <= 0.0 {
            return Err(Error::InadmissibleProbe("zero direction".into()));
        }
        let dir = [dir[0] / n, dir[1] / n];
        if self.cfg.g == 0.0 {
            return Ok(0.0);
        }
        // start near the 1-D yield scale g and bracket by doubling
        let mut lo = 0.0f64;
        let mut hi = self.cfg.g.max(t_max * 1e-6);
        loop {
            if !self.is_rigid(dir, hi)? {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > t_max {
                return Err(Error::NoBracket { t_max });
            }
        }
        for _ in 0..24 {
            let mid = 0.5 * (lo + hi);
            if self.is_rigid(dir, mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OracleMode {
    Nonlinear,
    Linear,
}

/// Converged lattice state (fluxes at subcell faces, lattice pressure).
#[derive(Debug, Clone)]
pub struct LatticeSolution {
    pub k: [f64; 2],
    pub q: ScalarField,
    pub flux: VectorField,
    pub iterations: usize,
    pub div_inf: f64,
}

/// Masked 5-point Neumann Poisson solve on a periodic lattice (CG, the
/// solution has zero mean over fluid cells).
fn poisson_neumann(
    grid: &StaggeredGrid,
    mask: &Mask,
    rhs: &ScalarField,
    tol: f64,
) -> Result<ScalarField> {
    let (nx, ny) = (grid.nx, grid.ny);
    let fluid = mask.fluid_cells();
    if fluid == 0 {
        return Err(Error::DisconnectedFluid);
    }
    let apply = |p: &ScalarField, out: &mut ScalarField| {
        for i in 0..nx {
            for j in 0..ny {
                if !mask.values[(i, j)] {
                    out.data[(i, j)] = 0.0;
                    continue;
                }
                let mut acc = 0.0;
                let nb = [
                    ((i + 1) % nx, j, grid.hx),
                    ((i + nx - 1) % nx, j, grid.hx),
                    (i, (j + 1) % ny, grid.hy),
                    (i, (j + ny - 1) % ny, grid.hy),
                ];
                for (a, b, h) in nb {
                    if mask.values[(a, b)] {
                        acc += (p.data[(i, j)] - p.data[(a, b)]) / (h * h);
                    }
                }
                out.data[(i, j)] = acc;
            }
        }
    };
    let mut b = rhs.clone();
    for ((i, j), v) in b.data.indexed_iter_mut() {
        if !mask.values[(i, j)] {
            *v = 0.0;
        }
    }
    // project out the constant null space
    let mean = b.data.iter().sum::<f64>() / fluid as f64;
    for ((i, j), v) in b.data.indexed_iter_mut() {
        if mask.values[(i, j)] {
            *v -= mean;
        }
    }

    let dot = |a: &ScalarField, c: &ScalarField| -> f64 {
        a.data.iter().zip(c.data.iter()).map(|(x, y)| x * y).sum()
    };
    let mut x = ScalarField::zeros(grid);
    let mut r = b.clone();
    let b_norm = dot(&b, &b).sqrt().max(1e-300);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = ScalarField::zeros(grid);
    for _ in 0..(10 * nx * ny + 50) {
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for (xv, pv) in x.data.iter_mut().zip(p.data.iter()) {
            *xv += alpha * pv;
        }
        for (rv, av) in r.data.iter_mut().zip(ap.data.iter()) {
            *rv -= alpha * av;
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pv, rv) in p.data.iter_mut().zip(r.data.iter()) {
            *pv = rv + beta * *pv;
        }
    }
    x.remove_mean(Some(mask));
    Ok(x)
}

/// Current on-disk format version of [`EffectiveLaw`].
pub const LAW_VERSION: u32 = 1;

/// One sampled point of the effective law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LawSample {
    pub lambda: [f64; 2],
    pub k: [f64; 2],
}

/// Serialized effective Darcy law, bound to a geometry fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveLaw {
    pub version: u32,
    pub geometry_hash: String,
    pub mu: f64,
    pub g: f64,
    pub resolution: usize,
    pub strategy: String,
    pub k_linear: Option<[[f64; 2]; 2]>,
    pub samples: Vec<LawSample>,
}

impl EffectiveLaw {
    pub fn new(solver: &CellSolver) -> Self {
        Self {
            version: LAW_VERSION,
            geometry_hash: solver.geom.content_hash(),
            mu: solver.cfg.mu,
            g: solver.cfg.g,
            resolution: solver.cfg.resolution,
            strategy: solver.cfg.strategy.name().into(),
            k_linear: None,
            samples: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("serialize law: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Load a law file and verify version and geometry fingerprint.
    pub fn load(path: &Path, geom: &CellGeometry) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let law: EffectiveLaw = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("parse law: {e}")))?;
        if law.version != LAW_VERSION {
            return Err(Error::InvalidConfig(format!(
                "law file version {} does not match the supported version {}",
                law.version, LAW_VERSION
            )));
        }
        let hash = geom.content_hash();
        if law.geometry_hash != hash {
            return Err(Error::InvalidConfig(format!(
                "law file geometry hash {} does not match {}",
                law.geometry_hash, hash
            )));
        }
        Ok(law)
    }

    /// Piecewise evaluation used by consumers of a sampled law: nearest
    /// sample by direction, linear interpolation in magnitude.
    pub fn nearest_sample(&self, lambda: [f64; 2]) -> Option<&LawSample> {
        let mag = lambda[0].hypot(lambda[1]);
        if mag == 0.0 {
            return None;
        }
        self.samples.iter().min_by(|a, b| {
            let da = (a.lambda[0] - lambda[0]).hypot(a.lambda[1] - lambda[1]);
            let db = (b.lambda[0] - lambda[0]).hypot(b.lambda[1] - lambda[1]);
            da.partial_cmp(&db).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoxSpec, RectCell};

    fn centered_z() -> RectCell {
        RectCell::new(
            vec![1.0, 1.0],
            vec![BoxSpec::new(vec![0.25, 0.25], vec![0.5, 0.5])],
        )
        .unwrap()
    }

    fn open_y(sub: usize) -> CellGeometry {
        CellGeometry::new(
            RectCell::new(vec![1.0, 1.0], vec![]).unwrap(),
            centered_z(),
            vec![sub, sub],
        )
        .unwrap()
    }

    /// 4x4 lattice with the central 2x2 subcells solid.
    fn blocked_y() -> CellGeometry {
        CellGeometry::new(
            RectCell::new(
                vec![1.0, 1.0],
                vec![BoxSpec::new(vec![0.25, 0.25], vec![0.5, 0.5])],
            )
            .unwrap(),
            centered_z(),
            vec![4, 4],
        )
        .unwrap()
    }

    fn quick_cfg(g: f64, strategy: Strategy) -> CellConfig {
        CellConfig {
            resolution: 8,
            g,
            strategy,
            picard_tol: 1e-6,
            ..CellConfig::default()
        }
    }

    #[test]
    fn rejects_unobstructed_z_cell() {
        let geom = CellGeometry::new(
            RectCell::new(vec![1.0, 1.0], vec![]).unwrap(),
            RectCell::new(vec![1.0, 1.0], vec![]).unwrap(),
            vec![2, 2],
        )
        .unwrap();
        assert!(matches!(
            CellSolver::new(&geom, &quick_cfg(0.0, Strategy::TwoLevel)),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn open_lattice_linear_k_equals_micro_matrix() {
        // with no Y obstacles and a uniform lambda the lattice pressure
        // stays zero, so K must equal the micro matrix K_Z exactly
        let geom = open_y(2);
        let mut solver = CellSolver::new(&geom, &quick_cfg(0.0, Strategy::TwoLevel)).unwrap();
        let kz = solver.z_linear_matrix().unwrap();
        let k = solver.eval_k_linear().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (k[i][j] - kz[i][j]).abs() <= 1e-10 * kz[0][0].abs(),
                    "K {k:?} vs K_Z {kz:?}"
                );
            }
        }
        // symmetric obstacle: diagonal, equal entries, positive
        assert!(k[0][0] > 0.0);
        assert!((k[0][0] - k[1][1]).abs() <= 1e-6 * k[0][0]);
        assert!(k[0][1].abs() <= 1e-6 * k[0][0]);
        assert!(k[1][0].abs() <= 1e-6 * k[0][0]);
    }

    #[test]
    fn blocked_lattice_reduces_permeability() {
        let open = {
            let geom = open_y(4);
            let mut s = CellSolver::new(&geom, &quick_cfg(0.0, Strategy::TwoLevel)).unwrap();
            s.eval_k_linear().unwrap()
        };
        let blocked = {
            let geom = blocked_y();
            let mut s = CellSolver::new(&geom, &quick_cfg(0.0, Strategy::TwoLevel)).unwrap();
            s.eval_k_linear().unwrap()
        };
        assert!(blocked[0][0] > 0.0);
        assert!(
            blocked[0][0] < 0.9 * open[0][0],
            "blocked {blocked:?} open {open:?}"
        );
    }

    #[test]
    fn k_at_zero_force_is_zero_and_odd() {
        let geom = open_y(2);
        let mut solver = CellSolver::new(&geom, &quick_cfg(0.5, Strategy::TwoLevel)).unwrap();
        assert_eq!(solver.eval_k([0.0, 0.0]).unwrap(), [0.0, 0.0]);
        let k_pos = solver.eval_k([8.0, 0.0]).unwrap();
        let k_neg = solver.eval_k([-8.0, 0.0]).unwrap();
        assert!(k_pos[0] > 0.0);
        assert!(
            (k_pos[0] + k_neg[0]).abs() <= 5e-3 * k_pos[0].abs(),
            "{k_pos:?} vs {k_neg:?}"
        );
    }

    #[test]
    fn flux_is_monotone_in_force_magnitude() {
        let geom = open_y(2);
        let mut solver = CellSolver::new(&geom, &quick_cfg(0.5, Strategy::TwoLevel)).unwrap();
        let mut last = 0.0;
        for t in [2.0, 4.0, 8.0, 16.0] {
            let k = solver.eval_k([t, 0.0]).unwrap();
            let mag = k[0].hypot(k[1]);
            assert!(mag >= last - 1e-12, "t {t}: {mag} < {last}");
            last = mag;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn small_yield_approaches_linear_law() {
        let geom = open_y(2);
        let lam = [10.0, 0.0];
        let k_lin = {
            let mut s = CellSolver::new(&geom, &quick_cfg(0.0, Strategy::TwoLevel)).unwrap();
            let k = s.eval_k_linear().unwrap();
            [
                k[0][0] * lam[0] + k[0][1] * lam[1],
                k[1][0] * lam[0] + k[1][1] * lam[1],
            ]
        };
        let mut s = CellSolver::new(&geom, &quick_cfg(1e-3, Strategy::TwoLevel)).unwrap();
        let k = s.eval_k(lam).unwrap();
        let rel = (k[0] - k_lin[0]).hypot(k[1] - k_lin[1]) / k_lin[0].hypot(k_lin[1]);
        assert!(rel <= 5e-2, "relative deviation {rel}");
    }

    #[test]
    fn yield_threshold_separates_rigid_and_flowing() {
        let geom = open_y(2);
        let mut solver = CellSolver::new(&geom, &quick_cfg(0.5, Strategy::TwoLevel)).unwrap();
        let t_c = solver.yield_threshold([1.0, 0.0], 1e4).unwrap();
        assert!(t_c > 0.0);
        assert!(solver.is_rigid([1.0, 0.0], 0.9 * t_c).unwrap());
        assert!(!solver.is_rigid([1.0, 0.0], 1.1 * t_c).unwrap());
    }

    #[test]
    fn no_bracket_when_t_max_too_small() {
        let geom = open_y(2);
        let mut solver = CellSolver::new(&geom, &quick_cfg(0.5, Strategy::TwoLevel)).unwrap();
        let t_c = solver.yield_threshold([1.0, 0.0], 1e4).unwrap();
        assert!(matches!(
            solver.yield_threshold([1.0, 0.0], t_c * 0.5),
            Err(Error::NoBracket { .. })
        ));
    }

    #[test]
    fn product_and_two_level_agree() {
        let geom = blocked_y();
        let lam = [12.0, 5.0];
        let a = {
            let mut s = CellSolver::new(&geom, &quick_cfg(0.4, Strategy::TwoLevel)).unwrap();
            s.eval_k(lam).unwrap()
        };
        let b = {
            let mut s = CellSolver::new(&geom, &quick_cfg(0.4, Strategy::Product)).unwrap();
            s.eval_k(lam).unwrap()
        };
        let scale = a[0].hypot(a[1]).max(1e-300);
        let rel = (a[0] - b[0]).hypot(a[1] - b[1]) / scale;
        assert!(rel <= 5e-2, "two_level {a:?} vs product {b:?} (rel {rel})");
    }

    #[test]
    fn law_round_trips_and_checks_hash() {
        let geom = open_y(2);
        let solver = CellSolver::new(&geom, &quick_cfg(0.3, Strategy::TwoLevel)).unwrap();
        let mut law = EffectiveLaw::new(&solver);
        law.samples.push(LawSample {
            lambda: [1.0, 2.0],
            k: [0.125, -0.0625],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("law.json");
        law.save(&path).unwrap();
        let back = EffectiveLaw::load(&path, &geom).unwrap();
        assert_eq!(back.samples.len(), 1);
        assert_eq!(back.samples[0].k, law.samples[0].k);

        let other = blocked_y();
        assert!(matches!(
            EffectiveLaw::load(&path, &other),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn quantization_respects_resolution() {
        let (k1, r1) = quantize([1.0, 0.0]).unwrap();
        let (k2, _) = quantize([1.0004, 0.0]).unwrap();
        let (k3, _) = quantize([1.1, 0.0]).unwrap();
        assert_eq!(k1, k2);
        assert_ne!(k1, k3);
        assert!((r1[0] - 1.0).abs() <= 1e-3);
        let (a1, _) = quantize([1.0, 0.004]).unwrap();
        let (a2, _) = quantize([1.0, 0.04]).unwrap();
        assert_eq!(k1.1, a1.1);
        assert_ne!(a1.1, a2.1);
        assert!(quantize([0.0, 0.0]).is_none());
    }
}
