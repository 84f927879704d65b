//! Saddle-point solvers for the Stokes and Bingham variational problems on
//! masked staggered grids.
//!
//! The velocity unknowns are the faces whose two adjacent cells are both
//! fluid; all other faces are pinned to zero (no-slip on obstacle walls and
//! on non-periodic domain walls).  Incompressibility is enforced by an
//! augmented-Lagrangian Uzawa iteration with grad-div augmentation, and the
//! non-differentiable yield term by an alternating-direction splitting with
//! exact shrinkage.
//!
//! Scaling convention: the caller passes premultiplied coefficients.  For
//! the fine-scale problem that means `mu_eff = 2*mu*(eps*delta)^2` and
//! `g_eff = g*eps*delta`; the energy is
//! `J(v) = mu_eff/2 |grad v|^2 + g_eff |grad v| - (f, v)` subject to
//! `div v = 0`, with the full (unsymmetrized) gradient in both terms.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fields::{divergence, gradient, ScalarField, StaggeredGrid, TensorField, VectorField};
use crate::geometry::Mask;

/// Which velocity faces are unknowns.
#[derive(Debug, Clone)]
pub struct FaceActivity {
    pub grid: StaggeredGrid,
    pub ux: Array2<bool>,
    pub vy: Array2<bool>,
}

impl FaceActivity {
    /// Active faces of a fully fluid domain (walls on non-periodic axes).
    pub fn all_fluid(grid: &StaggeredGrid) -> Self {
        let mask = Mask::all_fluid(grid.nx, grid.ny, [grid.hx, grid.hy]);
        Self::from_mask(grid, &mask)
    }

    /// A face is active iff both adjacent cells are fluid; faces on a
    /// non-periodic domain boundary are never active.
    pub fn from_mask(grid: &StaggeredGrid, mask: &Mask) -> Self {
        let (nx, ny) = (grid.nx, grid.ny);
        assert_eq!(mask.dims(), (nx, ny), "mask does not match grid");
        let mut ux = Array2::from_elem((nx + 1, ny), false);
        let mut vy = Array2::from_elem((nx, ny + 1), false);
        for i in 0..=nx {
            for j in 0..ny {
                let active = if grid.periodic[0] {
                    if i == nx {
                        false // duplicate layer, canonical face is i = 0
                    } else {
                        let left = (i + nx - 1) % nx;
                        mask.values[(left, j)] && mask.values[(i, j)]
                    }
                } else if i == 0 || i == nx {
                    false
                } else {
                    mask.values[(i - 1, j)] && mask.values[(i, j)]
                };
                ux[(i, j)] = active;
            }
        }
        for i in 0..nx {
            for j in 0..=ny {
                let active = if grid.periodic[1] {
                    if j == ny {
                        false
                    } else {
                        let below = (j + ny - 1) % ny;
                        mask.values[(i, below)] && mask.values[(i, j)]
                    }
                } else if j == 0 || j == ny {
                    false
                } else {
                    mask.values[(i, j - 1)] && mask.values[(i, j)]
                };
                vy[(i, j)] = active;
            }
        }
        Self {
            grid: grid.clone(),
            ux,
            vy,
        }
    }

    pub fn active_count(&self) -> usize {
        self.ux.iter().filter(|&&a| a).count() + self.vy.iter().filter(|&&a| a).count()
    }

    /// Zero every inactive face (including the duplicate periodic layer).
    pub fn project(&self, w: &mut VectorField) {
        for (idx, &a) in self.ux.indexed_iter() {
            if !a {
                w.u[idx] = 0.0;
            }
        }
        for (idx, &a) in self.vy.indexed_iter() {
            if !a {
                w.v[idx] = 0.0;
            }
        }
    }
}

/// The four components of the staggered velocity gradient: diagonal parts at
/// cell centers, mixed parts at nodes.  Node arrays are `(nx+1) x (ny+1)`;
/// on a periodic axis only the first `n` entries are canonical.
#[derive(Debug, Clone)]
pub struct StagGrad {
    pub dudx: Array2<f64>,
    pub dudy: Array2<f64>,
    pub dvdx: Array2<f64>,
    pub dvdy: Array2<f64>,
}

fn node_dims(grid: &StaggeredGrid) -> (usize, usize) {
    (
        if grid.periodic[0] {
            grid.nx
        } else {
            grid.nx + 1
        },
        if grid.periodic[1] {
            grid.ny
        } else {
            grid.ny + 1
        },
    )
}

/// Face value + activity lookup with periodic wrap.  Returns `None` for a
/// face beyond a non-periodic boundary.
#[inline]
fn u_face(act: &FaceActivity, w: &VectorField, i: isize, j: isize) -> Option<(f64, bool)> {
    let g = &act.grid;
    let (nx, ny) = (g.nx as isize, g.ny as isize);
    let i = if g.periodic[0] {
        i.rem_euclid(nx)
    } else if !(0..=nx).contains(&i) {
        return None;
    } else {
        i
    };
    let j = if g.periodic[1] {
        j.rem_euclid(ny)
    } else if !(0..ny).contains(&j) {
        return None;
    } else {
        j
    };
    let idx = (i as usize, j as usize);
    Some((w.u[idx], act.ux[idx]))
}

#[inline]
fn v_face(act: &FaceActivity, w: &VectorField, i: isize, j: isize) -> Option<(f64, bool)> {
    let g = &act.grid;
    let (nx, ny) = (g.nx as isize, g.ny as isize);
    let i = if g.periodic[0] {
        i.rem_euclid(nx)
    } else if !(0..nx).contains(&i) {
        return None;
    } else {
        i
    };
    let j = if g.periodic[1] {
        j.rem_euclid(ny)
    } else if !(0..=ny).contains(&j) {
        return None;
    } else {
        j
    };
    let idx = (i as usize, j as usize);
    Some((w.v[idx], act.vy[idx]))
}

/// One-sided / centered difference across a node from the two face samples
/// below and above it.  A missing or inactive face is a wall through the
/// node, handled with the mirror ghost (factor 2 one-sided difference).
#[inline]
fn node_diff(lo: Option<(f64, bool)>, hi: Option<(f64, bool)>, h: f64) -> f64 {
    let lo = lo.filter(|&(_, a)| a);
    let hi = hi.filter(|&(_, a)| a);
    match (lo, hi) {
        (Some((a, _)), Some((b, _))) => (b - a) / h,
        (None, Some((b, _))) => 2.0 * b / h,
        (Some((a, _)), None) => -2.0 * a / h,
        (None, None) => 0.0,
    }
}

/// Apply the staggered gradient to a velocity field.  The field must be
/// zero on inactive faces.
pub fn apply_grad(w: &VectorField, act: &FaceActivity) -> StagGrad {
    let g = &act.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (nnx, nny) = node_dims(g);
    let mut sg = StagGrad {
        dudx: Array2::zeros((nx, ny)),
        dudy: Array2::zeros((nx + 1, ny + 1)),
        dvdx: Array2::zeros((nx + 1, ny + 1)),
        dvdy: Array2::zeros((nx, ny)),
    };
    for i in 0..nx {
        for j in 0..ny {
            sg.dudx[(i, j)] = (w.ux(i + 1, j) - w.ux(i, j)) / g.hx;
            sg.dvdy[(i, j)] = (w.vy(i, j + 1) - w.vy(i, j)) / g.hy;
        }
    }
    for i in 0..nnx {
        for j in 0..nny {
            let (ii, jj) = (i as isize, j as isize);
            sg.dudy[(i, j)] = node_diff(
                u_face(act, w, ii, jj - 1),
                u_face(act, w, ii, jj),
                g.hy,
            );
            sg.dvdx[(i, j)] = node_diff(
                v_face(act, w, ii - 1, jj),
                v_face(act, w, ii, jj),
                g.hx,
            );
        }
    }
    sg
}

/// Scatter the transpose of [`apply_grad`]: `out += G^T sg` restricted to
/// active faces.  Inner products are plain sums over canonical centers and
/// nodes (the uniform `h^2` weight cancels throughout the solver).
pub fn apply_grad_transpose(sg: &StagGrad, act: &FaceActivity, out: &mut VectorField) {
    let g = &act.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (nnx, nny) = node_dims(g);

    let mut add_u = |i: isize, j: isize, val: f64| {
        let i = if g.periodic[0] {
            i.rem_euclid(nx as isize)
        } else if !(0..=nx as isize).contains(&i) {
            return;
        } else {
            i
        };
        let j = if g.periodic[1] {
            j.rem_euclid(ny as isize)
        } else if !(0..ny as isize).contains(&j) {
            return;
        } else {
            j
        };
        let idx = (i as usize, j as usize);
        if act.ux[idx] {
            out.u[idx] += val;
        }
    };
    for i in 0..nx {
        for j in 0..ny {
            let c = sg.dudx[(i, j)] / g.hx;
            add_u(i as isize + 1, j as isize, c);
            add_u(i as isize, j as isize, -c);
        }
    }
    for i in 0..nnx {
        for j in 0..nny {
            let w = sg.dudy[(i, j)];
            if w == 0.0 {
                continue;
            }
            let (ii, jj) = (i as isize, j as isize);
            // mirror the coefficient pattern of node_diff
            let lo = u_face_active(act, ii, jj - 1);
            let hi = u_face_active(act, ii, jj);
            match (lo, hi) {
                (true, true) => {
                    add_u(ii, jj, w / g.hy);
                    add_u(ii, jj - 1, -w / g.hy);
                }
                (false, true) => add_u(ii, jj, 2.0 * w / g.hy),
                (true, false) => add_u(ii, jj - 1, -2.0 * w / g.hy),
                (false, false) => {}
            }
        }
    }

    let mut add_v = |i: isize, j: isize, val: f64| {
        let i = if g.periodic[0] {
            i.rem_euclid(nx as isize)
        } else if !(0..nx as isize).contains(&i) {
            return;
        } else {
            i
        };
        let j = if g.periodic[1] {
            j.rem_euclid(ny as isize)
        } else if !(0..=ny as isize).contains(&j) {
            return;
        } else {
            j
        };
        let idx = (i as usize, j as usize);
        if act.vy[idx] {
            out.v[idx] += val;
        }
    };
    for i in 0..nx {
        for j in 0..ny {
            let c = sg.dvdy[(i, j)] / g.hy;
            add_v(i as isize, j as isize + 1, c);
            add_v(i as isize, j as isize, -c);
        }
    }
    for i in 0..nnx {
        for j in 0..nny {
            let w = sg.dvdx[(i, j)];
            if w == 0.0 {
                continue;
            }
            let (ii, jj) = (i as isize, j as isize);
            let lo = v_face_active(act, ii - 1, jj);
            let hi = v_face_active(act, ii, jj);
            match (lo, hi) {
                (true, true) => {
                    add_v(ii, jj, w / g.hx);
                    add_v(ii - 1, jj, -w / g.hx);
                }
                (false, true) => add_v(ii, jj, 2.0 * w / g.hx),
                (true, false) => add_v(ii - 1, jj, -2.0 * w / g.hx),
                (false, false) => {}
            }
        }
    }
}

#[inline]
fn u_face_active(act: &FaceActivity, i: isize, j: isize) -> bool {
    let g = &act.grid;
    let (nx, ny) = (g.nx as isize, g.ny as isize);
    let i = if g.periodic[0] {
        i.rem_euclid(nx)
    } else if !(0..=nx).contains(&i) {
        return false;
    } else {
        i
    };
    let j = if g.periodic[1] {
        j.rem_euclid(ny)
    } else if !(0..ny).contains(&j) {
        return false;
    } else {
        j
    };
    act.ux[(i as usize, j as usize)]
}

#[inline]
fn v_face_active(act: &FaceActivity, i: isize, j: isize) -> bool {
    let g = &act.grid;
    let (nx, ny) = (g.nx as isize, g.ny as isize);
    let i = if g.periodic[0] {
        i.rem_euclid(nx)
    } else if !(0..nx).contains(&i) {
        return false;
    } else {
        i
    };
    let j = if g.periodic[1] {
        j.rem_euclid(ny)
    } else if !(0..=ny).contains(&j) {
        return false;
    } else {
        j
    };
    act.vy[(i as usize, j as usize)]
}

impl StagGrad {
    /// Sum of squares over canonical centers and nodes.
    pub fn norm_sq(&self, grid: &StaggeredGrid) -> f64 {
        let (nnx, nny) = node_dims(grid);
        let mut s = 0.0;
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                s += self.dudx[(i, j)].powi(2) + self.dvdy[(i, j)].powi(2);
            }
        }
        for i in 0..nnx {
            for j in 0..nny {
                s += self.dudy[(i, j)].powi(2) + self.dvdx[(i, j)].powi(2);
            }
        }
        s
    }
}

/// Center-collocated gradient: the diagonal parts verbatim, the mixed parts
/// averaged from the four surrounding nodes.  This is the splitting variable
/// of the yield term.
pub fn apply_grad_center(w: &VectorField, act: &FaceActivity) -> TensorField {
    let sg = apply_grad(w, act);
    collocate(&sg, &act.grid)
}

fn collocate(sg: &StagGrad, grid: &StaggeredGrid) -> TensorField {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut t = TensorField::zeros(grid);
    let node = |arr: &Array2<f64>, i: usize, j: usize| -> f64 {
        let i = if grid.periodic[0] { i % nx } else { i };
        let j = if grid.periodic[1] { j % ny } else { j };
        arr[(i, j)]
    };
    for i in 0..nx {
        for j in 0..ny {
            t.xx[(i, j)] = sg.dudx[(i, j)];
            t.yy[(i, j)] = sg.dvdy[(i, j)];
            t.xy[(i, j)] = 0.25
                * (node(&sg.dudy, i, j)
                    + node(&sg.dudy, i + 1, j)
                    + node(&sg.dudy, i, j + 1)
                    + node(&sg.dudy, i + 1, j + 1));
            t.yx[(i, j)] = 0.25
                * (node(&sg.dvdx, i, j)
                    + node(&sg.dvdx, i + 1, j)
                    + node(&sg.dvdx, i, j + 1)
                    + node(&sg.dvdx, i + 1, j + 1));
        }
    }
    t
}

/// `out += G_c^T t` restricted to active faces.
pub fn apply_grad_center_transpose(t: &TensorField, act: &FaceActivity, out: &mut VectorField) {
    // spread the mixed center values back to nodes (transpose of the
    // 4-point average), then reuse the staggered transpose
    let grid = &act.grid;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut dudy = Array2::zeros((nx + 1, ny + 1));
    let mut dvdx = Array2::zeros((nx + 1, ny + 1));
    {
        let spread = |arr: &mut Array2<f64>, i: usize, j: usize, val: f64| {
            let i = if grid.periodic[0] { i % nx } else { i };
            let j = if grid.periodic[1] { j % ny } else { j };
            arr[(i, j)] += val;
        };
        for i in 0..nx {
            for j in 0..ny {
                let wxy = 0.25 * t.xy[(i, j)];
                let wyx = 0.25 * t.yx[(i, j)];
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    spread(&mut dudy, i + di, j + dj, wxy);
                    spread(&mut dvdx, i + di, j + dj, wyx);
                }
            }
        }
    }
    let sg = StagGrad {
        dudx: t.xx.clone(),
        dudy,
        dvdx,
        dvdy: t.yy.clone(),
    };
    apply_grad_transpose(&sg, act, out);
}

/// Solver parameters.  Tolerances are relative to problem scales derived
/// from the data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Outer (Uzawa / splitting) relative tolerance.
    pub tol: f64,
    pub max_outer: usize,
    /// Inner CG relative tolerance.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Yield-splitting augmentation, as a multiple of `mu_eff`.
    pub r_factor: f64,
    /// Grad-div augmentation, as a multiple of `mu_eff`.
    pub r_div_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 20_000,
            cg_tol: 1e-10,
            cg_max_iter: 50_000,
            r_factor: 1.0,
            r_div_factor: 30.0,
        }
    }
}

/// Diagonal of a face operator by stride-4 coloring probes (exact for
/// stencils of reach < 4 faces).
fn probe_diagonal(
    apply: &mut dyn FnMut(&VectorField, &mut VectorField),
    act: &FaceActivity,
) -> VectorField {
    let grid = &act.grid;
    let mut diag = VectorField::zeros(grid);
    let mut probe = VectorField::zeros(grid);
    let mut out = VectorField::zeros(grid);
    const S: usize = 4;
    for comp in 0..2 {
        for a in 0..S {
            for b in 0..S {
                probe.fill(0.0);
                if comp == 0 {
                    for (idx, &on) in act.ux.indexed_iter() {
                        if on && idx.0 % S == a && idx.1 % S == b {
                            probe.u[idx] = 1.0;
                        }
                    }
                } else {
                    for (idx, &on) in act.vy.indexed_iter() {
                        if on && idx.0 % S == a && idx.1 % S == b {
                            probe.v[idx] = 1.0;
                        }
                    }
                }
                out.fill(0.0);
                apply(&probe, &mut out);
                if comp == 0 {
                    for (idx, &on) in act.ux.indexed_iter() {
                        if on && idx.0 % S == a && idx.1 % S == b {
                            diag.u[idx] = out.u[idx];
                        }
                    }
                } else {
                    for (idx, &on) in act.vy.indexed_iter() {
                        if on && idx.0 % S == a && idx.1 % S == b {
                            diag.v[idx] = out.v[idx];
                        }
                    }
                }
            }
        }
    }
    diag
}

/// Preconditioned conjugate gradients on the active faces.  Returns the
/// iteration count; `x` holds the warm-start on entry and the solution on
/// exit.
fn cg_solve(
    apply: &mut dyn FnMut(&VectorField, &mut VectorField),
    rhs: &VectorField,
    x: &mut VectorField,
    act: &FaceActivity,
    diag: &VectorField,
    tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let grid = &act.grid;
    let mut r = rhs.clone();
    let mut ax = VectorField::zeros(grid);
    apply(x, &mut ax);
    r.scaled_add(-1.0, &ax);
    act.project(&mut r);

    let inv_diag = |w: &VectorField| -> VectorField {
        let mut z = w.clone();
        for (idx, &on) in act.ux.indexed_iter() {
            if on && diag.u[idx] > 0.0 {
                z.u[idx] /= diag.u[idx];
            }
        }
        for (idx, &on) in act.vy.indexed_iter() {
            if on && diag.v[idx] > 0.0 {
                z.v[idx] /= diag.v[idx];
            }
        }
        z
    };

    let rhs_norm = rhs.dot(rhs).sqrt();
    let target = tol * rhs_norm.max(f64::MIN_POSITIVE);
    if r.dot(&r).sqrt() <= target {
        return Ok(0);
    }

    let mut z = inv_diag(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = VectorField::zeros(grid);
    for k in 0..max_iter {
        ap.fill(0.0);
        apply(&p, &mut ap);
        act.project(&mut ap);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            // operator is only semidefinite along p (e.g. constants in a
            // fully periodic domain) — rhs must be compatible, stop here
            return Ok(k);
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        if r.dot(&r).sqrt() <= target {
            return Ok(k + 1);
        }
        z = inv_diag(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.scaled_add(beta, &p);
        p = p_new;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: r.dot(&r).sqrt() / rhs_norm.max(f64::MIN_POSITIVE),
    })
}

/// Converged Stokes solution with solver diagnostics.
#[derive(Debug, Clone)]
pub struct StokesSolution {
    pub u: VectorField,
    pub p: ScalarField,
    pub outer_iterations: usize,
    pub cg_iterations: usize,
    pub div_inf: f64,
}

fn div_masked(u: &VectorField, mask: Option<&Mask>) -> ScalarField {
    let mut d = divergence(u);
    if let Some(m) = mask {
        for ((i, j), v) in d.data.indexed_iter_mut() {
            if !m.values[(i, j)] {
                *v = 0.0;
            }
        }
    }
    d
}

fn scalar_linf(s: &ScalarField) -> f64 {
    s.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Solve the masked Stokes problem `-mu_eff lap u + grad p = f`,
/// `div u = 0` with an Uzawa iteration on the grad-div augmented operator.
pub fn solve_stokes(
    grid: &StaggeredGrid,
    mask: Option<&Mask>,
    f: &VectorField,
    mu_eff: f64,
    cfg: &SolverConfig,
) -> Result<StokesSolution> {
    if mu_eff <= 0.0 {
        return Err(Error::InvalidConfig("mu_eff must be positive".into()));
    }
    let act = match mask {
        Some(m) => FaceActivity::from_mask(grid, m),
        None => FaceActivity::all_fluid(grid),
    };
    if act.active_count() == 0 {
        return Err(Error::DisconnectedFluid);
    }
    let r_div = cfg.r_div_factor * mu_eff;

    let mut apply = |w: &VectorField, out: &mut VectorField| {
        let sg = apply_grad(w, &act);
        let mut scaled = sg;
        scaled.dudx.mapv_inplace(|v| v * mu_eff);
        scaled.dudy.mapv_inplace(|v| v * mu_eff);
        scaled.dvdx.mapv_inplace(|v| v * mu_eff);
        scaled.dvdy.mapv_inplace(|v| v * mu_eff);
        apply_grad_transpose(&scaled, &act, out);
        let mut d = div_masked(w, mask);
        d.data.mapv_inplace(|v| v * r_div);
        let gp = gradient(&d);
        let mut gp = gp;
        act.project(&mut gp);
        out.scaled_add(-1.0, &gp);
        act.project(out);
    };

    let diag = probe_diagonal(&mut apply, &act);
    let mut f_act = f.clone();
    act.project(&mut f_act);

    // viscous gradient scale of the forcing; floors the stopping target so
    // a (near-)zero solution is recognized as converged
    let l_char = (grid.nx as f64 * grid.hx).min(grid.ny as f64 * grid.hy);
    let gfloor = 1e-6 * f_act.linf() * l_char / mu_eff.max(f64::MIN_POSITIVE);

    let mut u = VectorField::zeros(grid);
    let mut p = ScalarField::zeros(grid);
    let mut cg_total = 0usize;
    let mut div_inf = f64::INFINITY;

    for outer in 0..cfg.max_outer {
        let mut rhs = f_act.clone();
        let mut gp = gradient(&p);
        act.project(&mut gp);
        rhs.scaled_add(-1.0, &gp);

        cg_total += cg_solve(
            &mut apply,
            &rhs,
            &mut u,
            &act,
            &diag,
            cfg.cg_tol,
            cfg.cg_max_iter,
        )?;

        let d = div_masked(&u, mask);
        div_inf = scalar_linf(&d);
        let gscale = apply_grad(&u, &act)
            .norm_sq(grid)
            .sqrt()
            .max(gfloor)
            .max(f64::MIN_POSITIVE);
        // compare the divergence defect against the gradient magnitude
        let nfaces = (act.active_count() as f64).sqrt();
        if div_inf <= cfg.tol * gscale / nfaces.max(1.0) {
            p.remove_mean(mask);
            return Ok(StokesSolution {
                u,
                p,
                outer_iterations: outer + 1,
                cg_iterations: cg_total,
                div_inf,
            });
        }
        for ((i, j), v) in p.data.indexed_iter_mut() {
            if mask.map_or(true, |m| m.values[(i, j)]) {
                *v -= r_div * d.data[(i, j)];
            }
        }
        p.remove_mean(mask);
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_outer,
        residual: div_inf,
    })
}

/// Converged Bingham solution with multipliers and diagnostics.
#[derive(Debug, Clone)]
pub struct BinghamState {
    pub u: VectorField,
    pub p: ScalarField,
    /// Yield multiplier (deviatoric stress contribution of the yield term).
    pub m: TensorField,
    /// Splitting variable, equal to the collocated gradient at convergence.
    pub w: TensorField,
    pub outer_iterations: usize,
    pub cg_iterations: usize,
    pub div_inf: f64,
    pub split_inf: f64,
    pub du_inf: f64,
    pub converged: bool,
}

fn tensor_linf(t: &TensorField) -> f64 {
    let mut m = 0.0f64;
    for i in 0..t.grid.nx {
        for j in 0..t.grid.ny {
            m = m.max(t.frobenius(i, j));
        }
    }
    m
}

/// Solve the masked Bingham variational inequality by alternating-direction
/// splitting of the yield term with exact shrinkage, Uzawa for the pressure
/// and CG for the velocity updates.
pub fn solve_bingham(
    grid: &StaggeredGrid,
    mask: Option<&Mask>,
    f: &VectorField,
    mu_eff: f64,
    g_eff: f64,
    cfg: &SolverConfig,
    warm: Option<&BinghamState>,
) -> Result<BinghamState> {
    let state = bingham_core(grid, mask, f, mu_eff, g_eff, cfg, warm, cfg.max_outer)?;
    if !state.converged {
        return Err(Error::NonConvergence {
            iterations: state.outer_iterations,
            residual: state.split_inf.max(state.div_inf),
        });
    }
    Ok(state)
}

/// Run at most `sweeps` outer iterations of the same scheme without
/// requiring convergence; used for interleaved (coupled) iterations where
/// an outer driver owns the overall stopping rule.
pub fn bingham_sweeps(
    grid: &StaggeredGrid,
    mask: Option<&Mask>,
    f: &VectorField,
    mu_eff: f64,
    g_eff: f64,
    cfg: &SolverConfig,
    warm: Option<&BinghamState>,
    sweeps: usize,
) -> Result<BinghamState> {
    bingham_core(grid, mask, f, mu_eff, g_eff, cfg, warm, sweeps)
}

#[allow(clippy::too_many_arguments)]
fn bingham_core(
    grid: &StaggeredGrid,
    mask: Option<&Mask>,
    f: &VectorField,
    mu_eff: f64,
    g_eff: f64,
    cfg: &SolverConfig,
    warm: Option<&BinghamState>,
    max_outer: usize,
) -> Result<BinghamState> {
    if mu_eff <= 0.0 {
        return Err(Error::InvalidConfig("mu_eff must be positive".into()));
    }
    if g_eff < 0.0 {
        return Err(Error::NegativeYield(g_eff));
    }
    let act = match mask {
        Some(m) => FaceActivity::from_mask(grid, m),
        None => FaceActivity::all_fluid(grid),
    };
    if act.active_count() == 0 {
        return Err(Error::DisconnectedFluid);
    }
    let r = cfg.r_factor * mu_eff;
    let r_div = cfg.r_div_factor * mu_eff;

    let mut apply = |wv: &VectorField, out: &mut VectorField| {
        let sg = apply_grad(wv, &act);
        let gc = collocate(&sg, grid);
        let mut scaled = sg;
        scaled.dudx.mapv_inplace(|v| v * mu_eff);
        scaled.dudy.mapv_inplace(|v| v * mu_eff);
        scaled.dvdx.mapv_inplace(|v| v * mu_eff);
        scaled.dvdy.mapv_inplace(|v| v * mu_eff);
        apply_grad_transpose(&scaled, &act, out);
        let mut gc_scaled = gc;
        gc_scaled.xx.mapv_inplace(|v| v * r);
        gc_scaled.xy.mapv_inplace(|v| v * r);
        gc_scaled.yx.mapv_inplace(|v| v * r);
        gc_scaled.yy.mapv_inplace(|v| v * r);
        apply_grad_center_transpose(&gc_scaled, &act, out);
        let mut d = div_masked(wv, mask);
        d.data.mapv_inplace(|v| v * r_div);
        let mut gp = gradient(&d);
        act.project(&mut gp);
        out.scaled_add(-1.0, &gp);
        act.project(out);
    };

    let diag = probe_diagonal(&mut apply, &act);
    let mut f_act = f.clone();
    act.project(&mut f_act);

    // viscous-scale reference velocity for the rigid-limit stopping rule
    let l_char = (grid.nx as f64 * grid.hx).min(grid.ny as f64 * grid.hy);
    let u_visc = f_act.linf() * l_char * l_char / mu_eff;

    let (mut u, mut p, mut m, mut w) = match warm {
        Some(s) => (s.u.clone(), s.p.clone(), s.m.clone(), s.w.clone()),
        None => (
            VectorField::zeros(grid),
            ScalarField::zeros(grid),
            TensorField::zeros(grid),
            TensorField::zeros(grid),
        ),
    };
    let mut cg_total = 0usize;
    let (mut div_inf, mut split_inf, mut du_inf) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut outer_done = 0usize;

    for outer in 0..max_outer {
        outer_done = outer + 1;
        // u-solve: (mu G^T G + r Gc^T Gc + r_div D^T D) u
        //            = f - Gc^T (m - r w) - grad p
        let mut rhs = f_act.clone();
        let mut mw = m.clone();
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                mw.xx[(i, j)] -= r * w.xx[(i, j)];
                mw.xy[(i, j)] -= r * w.xy[(i, j)];
                mw.yx[(i, j)] -= r * w.yx[(i, j)];
                mw.yy[(i, j)] -= r * w.yy[(i, j)];
            }
        }
        let mut gct = VectorField::zeros(grid);
        apply_grad_center_transpose(&mw, &act, &mut gct);
        rhs.scaled_add(-1.0, &gct);
        let mut gp = gradient(&p);
        act.project(&mut gp);
        rhs.scaled_add(-1.0, &gp);
        act.project(&mut rhs);

        let u_prev = u.clone();
        cg_total += cg_solve(
            &mut apply,
            &rhs,
            &mut u,
            &act,
            &diag,
            cfg.cg_tol,
            cfg.cg_max_iter,
        )?;

        // shrinkage: w = argmin over the splitting variable
        let gc = apply_grad_center(&u, &act);
        let mut split: f64 = 0.0;
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let s = [
                    m.xx[(i, j)] + r * gc.xx[(i, j)],
                    m.xy[(i, j)] + r * gc.xy[(i, j)],
                    m.yx[(i, j)] + r * gc.yx[(i, j)],
                    m.yy[(i, j)] + r * gc.yy[(i, j)],
                ];
                let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + s[3] * s[3]).sqrt();
                let shrink = if n <= g_eff {
                    0.0
                } else {
                    (1.0 - g_eff / n) / r
                };
                w.xx[(i, j)] = shrink * s[0];
                w.xy[(i, j)] = shrink * s[1];
                w.yx[(i, j)] = shrink * s[2];
                w.yy[(i, j)] = shrink * s[3];
                // multiplier update m = s - r w, so |m|_F <= g_eff always
                m.xx[(i, j)] = s[0] - r * w.xx[(i, j)];
                m.xy[(i, j)] = s[1] - r * w.xy[(i, j)];
                m.yx[(i, j)] = s[2] - r * w.yx[(i, j)];
                m.yy[(i, j)] = s[3] - r * w.yy[(i, j)];
                let dxx = gc.xx[(i, j)] - w.xx[(i, j)];
                let dxy = gc.xy[(i, j)] - w.xy[(i, j)];
                let dyx = gc.yx[(i, j)] - w.yx[(i, j)];
                let dyy = gc.yy[(i, j)] - w.yy[(i, j)];
                split = split.max((dxx * dxx + dxy * dxy + dyx * dyx + dyy * dyy).sqrt());
            }
        }
        split_inf = split;

        let d = div_masked(&u, mask);
        div_inf = scalar_linf(&d);
        for ((i, j), v) in p.data.indexed_iter_mut() {
            if mask.map_or(true, |m2| m2.values[(i, j)]) {
                *v -= r_div * d.data[(i, j)];
            }
        }
        p.remove_mean(mask);

        let mut du = u.clone();
        du.scaled_add(-1.0, &u_prev);
        du_inf = du.linf();

        // scales: gradient magnitude for the splitting/divergence residuals,
        // velocity magnitude (with a viscous floor for the all-rigid case)
        let gscale = tensor_linf(&gc)
            .max(tensor_linf(&w))
            .max(1e-6 * u_visc / l_char.max(f64::MIN_POSITIVE))
            .max(f64::MIN_POSITIVE);
        let uscale = u.linf().max(1e-2 * u_visc).max(f64::MIN_POSITIVE);
        // Just above the yield threshold the true gradient is microscopic and
        // the splitting contraction stalls well below tol relative to it, so
        // the split target is floored at the viscous gradient scale set by the
        // forcing (an absolute criterion at tol of that scale).
        let split_floor = u_visc / l_char.max(f64::MIN_POSITIVE);
        if split_inf <= cfg.tol * gscale.max(split_floor)
            && div_inf <= cfg.tol * gscale.max(split_floor)
            && du_inf <= cfg.tol * uscale
        {
            p.remove_mean(mask);
            return Ok(BinghamState {
                u,
                p,
                m,
                w,
                outer_iterations: outer + 1,
                cg_iterations: cg_total,
                div_inf,
                split_inf,
                du_inf,
                converged: true,
            });
        }
    }
    p.remove_mean(mask);
    Ok(BinghamState {
        u,
        p,
        m,
        w,
        outer_iterations: outer_done,
        cg_iterations: cg_total,
        div_inf,
        split_inf,
        du_inf,
        converged: false,
    })
}

/// Energy `J(v) = mu_eff/2 |G v|^2 + g_eff sum |G_c v|_F - (f, v)` (in the
/// `h^2`-weighted inner products).
pub fn energy(
    v: &VectorField,
    f: &VectorField,
    mu_eff: f64,
    g_eff: f64,
    act: &FaceActivity,
) -> f64 {
    let grid = &act.grid;
    let vol = grid.cell_volume();
    let sg = apply_grad(v, act);
    let visc = 0.5 * mu_eff * sg.norm_sq(grid) * vol;
    let gc = collocate(&sg, grid);
    let mut yield_term = 0.0;
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            yield_term += gc.frobenius(i, j);
        }
    }
    let work = f.dot(v) * vol;
    visc + g_eff * yield_term * vol - work
}

/// Variational-inequality residual against a probe direction: returns
/// `a(u, v-u) + j(v) - j(u) - (f, v-u)`, which must be `>= -tol` for every
/// admissible (divergence-free, active-face) probe `v`.
pub fn vi_gap(
    u: &VectorField,
    v: &VectorField,
    f: &VectorField,
    mu_eff: f64,
    g_eff: f64,
    act: &FaceActivity,
) -> f64 {
    let grid = &act.grid;
    let vol = grid.cell_volume();
    let su = apply_grad(u, act);
    let sv = apply_grad(v, act);
    let mut a = 0.0;
    let (nnx, nny) = node_dims(grid);
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            a += su.dudx[(i, j)] * (sv.dudx[(i, j)] - su.dudx[(i, j)])
                + su.dvdy[(i, j)] * (sv.dvdy[(i, j)] - su.dvdy[(i, j)]);
        }
    }
    for i in 0..nnx {
        for j in 0..nny {
            a += su.dudy[(i, j)] * (sv.dudy[(i, j)] - su.dudy[(i, j)])
                + su.dvdx[(i, j)] * (sv.dvdx[(i, j)] - su.dvdx[(i, j)]);
        }
    }
    a *= mu_eff * vol;
    let ju = {
        let gc = collocate(&su, grid);
        let mut s = 0.0;
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                s += gc.frobenius(i, j);
            }
        }
        g_eff * s * vol
    };
    let jv = {
        let gc = collocate(&sv, grid);
        let mut s = 0.0;
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                s += gc.frobenius(i, j);
            }
        }
        g_eff * s * vol
    };
    let mut diff = v.clone();
    diff.scaled_add(-1.0, u);
    let work = f.dot(&diff) * vol;
    a + jv - ju - work
}

/// Build an exactly divergence-free probe from a stream function given at
/// nodes: `u = d(psi)/dy`, `v = -d(psi)/dx`.  The stream function is zeroed
/// at nodes touching inactive faces so the probe is admissible.
pub fn solenoidal_probe(psi: &Array2<f64>, act: &FaceActivity) -> VectorField {
    let grid = &act.grid;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut psi = psi.clone();
    assert_eq!(psi.dim(), (nx + 1, ny + 1));
    // zero psi at nodes adjacent to any inactive face
    for i in 0..=nx {
        for j in 0..=ny {
            let (ii, jj) = (i as isize, j as isize);
            let clear = !u_face_active(&act, ii, jj)
                || !u_face_active(&act, ii, jj - 1)
                || !v_face_active(&act, ii, jj)
                || !v_face_active(&act, ii - 1, jj);
            if clear {
                psi[(i, j)] = 0.0;
            }
        }
    }
    // canonicalize the periodic duplicate layers
    if grid.periodic[0] {
        for j in 0..=ny {
            psi[(nx, j)] = psi[(0, j)];
        }
    }
    if grid.periodic[1] {
        for i in 0..=nx {
            psi[(i, ny)] = psi[(i, 0)];
        }
    }
    let mut out = VectorField::zeros(grid);
    for i in 0..=nx {
        for j in 0..ny {
            out.u[(i, j)] = (psi[(i, j + 1)] - psi[(i, j)]) / grid.hy;
        }
    }
    for i in 0..nx {
        for j in 0..=ny {
            out.v[(i, j)] = -(psi[(i + 1, j)] - psi[(i, j)]) / grid.hx;
        }
    }
    act.project(&mut out);
    out
}
