//! Macroscopic Darcy solvers on the homogenized domain.
//!
//! The macroscopic problem lives on a sealed box: find a mean-zero pressure
//! `p̂` such that the filtration velocity `u⁰ = K(f − ∇p̂)` is divergence
//! free in Ω with `ν·u⁰ = 0` on the boundary.  The linear solver handles a
//! constant symmetric positive definite permeability tensor; the nonlinear
//! solver accepts an arbitrary flux law `λ ↦ K(λ)` (matrix, sampled table,
//! or live callback) and iterates a damped Picard scheme preconditioned by
//! a linear permeability estimate.
//!
//! Discretization: cell-centered finite volumes on a MAC grid.  Normal
//! pressure gradients are compact two-point differences at faces; the
//! tangential component needed for tensor coupling is the four-point
//! average of the neighboring transverse faces, which makes the resulting
//! operator exactly symmetric.  Boundary faces carry zero flux by
//! construction, so the divergence of the returned velocity is exactly the
//! final solver residual and the no-flux invariant holds to machine
//! precision.

use crate::cell::EffectiveLaw;
use crate::error::{Error, Result};
use crate::fields::{divergence, gradient, ScalarField, StaggeredGrid, VectorField};

/// Solution of a macroscopic Darcy problem.
#[derive(Debug, Clone)]
pub struct MacroSolution {
    /// Mean-zero macroscopic pressure.
    pub p_hat: ScalarField,
    /// Filtration velocity (face-normal components, zero on the boundary).
    pub u0: VectorField,
    /// Iterations spent (conjugate-gradient steps for the linear solver,
    /// accepted Picard steps for the nonlinear one).
    pub iterations: usize,
    /// Final max-norm of the discrete divergence of `u0`.
    pub residual: f64,
    /// Residuals of the accepted iterates, outermost loop only.
    pub history: Vec<f64>,
    /// The forcing admits no flow: the flux vanished identically, which the
    /// law itself certifies (every face force lies inside the yield set).
    pub all_rigid: bool,
}

/// Tuning knobs for the macroscopic solvers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DarcyConfig {
    /// Relative tolerance on the divergence of the flux.
    pub tol: f64,
    /// Picard iteration budget for the nonlinear solver.
    pub max_iter: usize,
    /// Initial damping factor for a Picard step; the step is halved until
    /// the residual decreases, so accepted steps are always monotone.
    pub damping: f64,
    /// Relative tolerance of the inner conjugate-gradient solves.
    pub cg_tol: f64,
    /// Iteration budget of the inner conjugate-gradient solves.
    pub cg_max_iter: usize,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 300,
            damping: 1.0,
            cg_tol: 1e-13,
            cg_max_iter: 200_000,
        }
    }
}

/// A macroscopic flux law `λ ↦ K(λ)`.
pub enum DarcyLaw<'a> {
    /// Linear law with a constant permeability tensor.
    Matrix([[f64; 2]; 2]),
    /// Sampled law evaluated by polar bilinear interpolation.
    Table(PolarTable),
    /// Live evaluation callback (e.g. a bound cell-problem solver).
    Live(&'a mut dyn FnMut([f64; 2]) -> Result<[f64; 2]>),
}

impl<'a> DarcyLaw<'a> {
    pub fn eval(&mut self, lambda: [f64; 2]) -> Result<[f64; 2]> {
        match self {
            DarcyLaw::Matrix(k) => Ok(mat_vec(*k, lambda)),
            DarcyLaw::Table(t) => Ok(t.eval(lambda)),
            DarcyLaw::Live(f) => f(lambda),
        }
    }
}

fn mat_vec(k: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        k[0][0] * v[0] + k[0][1] * v[1],
        k[1][0] * v[0] + k[1][1] * v[1],
    ]
}

fn mat_norm(k: [[f64; 2]; 2]) -> f64 {
    k.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_spd(k: [[f64; 2]; 2]) -> Result<()> {
    let scale = mat_norm(k);
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::SingularK);
    }
    if (k[0][1] - k[1][0]).abs() > 1e-12 * scale {
        return Err(Error::SingularK);
    }
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    if k[0][0] <= 0.0 || det <= 0.0 {
        return Err(Error::SingularK);
    }
    Ok(())
}

fn check_sealed(grid: &StaggeredGrid) -> Result<()> {
    if grid.periodic[0] || grid.periodic[1] {
        return Err(Error::InvalidConfig(
            "the macroscopic domain is a sealed box; use a non-periodic grid".into(),
        ));
    }
    Ok(())
}

/// Four-point average of the transverse (`v`) components around an interior
/// `u` face, giving the tangential vector component at that face.
fn tangential_at_u(w: &VectorField, i: usize, j: usize) -> f64 {
    0.25 * (w.v[(i - 1, j)] + w.v[(i - 1, j + 1)] + w.v[(i, j)] + w.v[(i, j + 1)])
}

/// Four-point average of the transverse (`u`) components around an interior
/// `v` face.
fn tangential_at_v(w: &VectorField, i: usize, j: usize) -> f64 {
    0.25 * (w.u[(i, j - 1)] + w.u[(i + 1, j - 1)] + w.u[(i, j)] + w.u[(i + 1, j)])
}

/// Face-normal components of `K w` for a face-based vector field `w`, with
/// zero flux on boundary faces.
fn tensor_flux(k: [[f64; 2]; 2], w: &VectorField) -> VectorField {
    let g = w.grid.clone();
    let mut out = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            out.u[(i, j)] = k[0][0] * w.u[(i, j)] + k[0][1] * tangential_at_u(w, i, j);
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            out.v[(i, j)] = k[1][0] * tangential_at_v(w, i, j) + k[1][1] * w.v[(i, j)];
        }
    }
    out
}

/// Face-normal components of `K(w)` for a nonlinear law, with zero flux on
/// boundary faces.  Each interior face assembles its full force vector
/// (compact normal part, four-point tangential average) and keeps the
/// normal component of the law's answer.
fn law_flux(law: &mut DarcyLaw, w: &VectorField) -> Result<VectorField> {
    let g = w.grid.clone();
    let mut out = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            let lam = [w.u[(i, j)], tangential_at_u(w, i, j)];
            out.u[(i, j)] = law.eval(lam)?[0];
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            let lam = [tangential_at_v(w, i, j), w.v[(i, j)]];
            out.v[(i, j)] = law.eval(lam)?[1];
        }
    }
    Ok(out)
}

fn dot_cells(a: &ScalarField, b: &ScalarField) -> f64 {
    a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum()
}

fn linf_cells(a: &ScalarField) -> f64 {
    a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `p ↦ −div(K ∇p)` with no-flux boundary faces; symmetric positive
/// semidefinite on mean-zero fields.
fn apply_operator(k: [[f64; 2]; 2], p: &ScalarField) -> ScalarField {
    let mut out = divergence(&tensor_flux(k, &gradient(p)));
    for v in out.data.iter_mut() {
        *v = -*v;
    }
    out
}

/// Conjugate gradients for `−div(K ∇p) = b` on the mean-zero subspace.
fn cg_macro(
    k: [[f64; 2]; 2],
    grid: &StaggeredGrid,
    b: &ScalarField,
    tol: f64,
    max_iter: usize,
) -> Result<(ScalarField, usize)> {
    let cells = (grid.nx * grid.ny) as f64;
    let mut rhs = b.clone();
    let mean = rhs.data.iter().sum::<f64>() / cells;
    for v in rhs.data.iter_mut() {
        *v -= mean;
    }
    let b_norm = dot_cells(&rhs, &rhs).sqrt();
    let mut x = ScalarField::zeros(grid);
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = rhs;
    let mut p = r.clone();
    let mut rr = dot_cells(&r, &r);
    let mut iters = 0;
    while iters < max_iter {
        if rr.sqrt() <= tol * b_norm {
            x.remove_mean(None);
            return Ok((x, iters));
        }
        let ap = apply_operator(k, &p);
        let pap = dot_cells(&p, &ap);
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
        let rr_new = dot_cells(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pv, rv) in p.data.iter_mut().zip(r.data.iter()) {
            *pv = rv + beta * *pv;
        }
        iters += 1;
    }
    if rr.sqrt() <= tol * b_norm {
        x.remove_mean(None);
        return Ok((x, iters));
    }
    Err(Error::NonConvergence {
        iterations: iters,
        residual: rr.sqrt() / b_norm,
    })
}

/// Solve the linear macroscopic Darcy problem: mean-zero `p̂` with
/// `div(K(f − ∇p̂)) = 0` and no-flux walls, `u⁰ = K(f − ∇p̂)`.
pub fn solve_linear_darcy(
    k: [[f64; 2]; 2],
    f: &VectorField,
    cfg: &DarcyConfig,
) -> Result<MacroSolution> {
    check_spd(k)?;
    check_sealed(&f.grid)?;
    let b = {
        let mut d = divergence(&tensor_flux(k, f));
        for v in d.data.iter_mut() {
            *v = -*v;
        }
        d
    };
    let (p_hat, iterations) = cg_macro(k, &f.grid, &b, cfg.cg_tol, cfg.cg_max_iter)?;
    let mut w = f.clone();
    w.scaled_add(-1.0, &gradient(&p_hat));
    let u0 = tensor_flux(k, &w);
    let residual = linf_cells(&divergence(&u0));
    Ok(MacroSolution {
        p_hat,
        u0,
        iterations,
        residual,
        history: Vec::new(),
        all_rigid: false,
    })
}

/// Estimate a linear permeability from the law by secant probes along the
/// axes at the forcing magnitude; used only to precondition Picard steps.
fn estimate_matrix(law: &mut DarcyLaw, probe_mag: f64) -> Result<[[f64; 2]; 2]> {
    if let DarcyLaw::Matrix(k) = law {
        return Ok(*k);
    }
    let m = if probe_mag > 0.0 { probe_mag } else { 1.0 };
    let kx = law.eval([m, 0.0])?;
    let ky = law.eval([0.0, m])?;
    let mut est = [[kx[0] / m, ky[0] / m], [kx[1] / m, ky[1] / m]];
    // symmetrize and regularize: the estimate only preconditions
    let off = 0.5 * (est[0][1] + est[1][0]);
    est[0][1] = off;
    est[1][0] = off;
    let scale = mat_norm(est).max(f64::MIN_POSITIVE);
    let floor = 1e-8 * scale + f64::MIN_POSITIVE;
    if est[0][0] < floor {
        est[0][0] = floor.max(1.0e-8);
    }
    if est[1][1] < floor {
        est[1][1] = floor.max(1.0e-8);
    }
    let det = est[0][0] * est[1][1] - est[0][1] * est[1][0];
    if det <= 0.0 {
        est[0][1] = 0.0;
        est[1][0] = 0.0;
    }
    Ok(est)
}

/// Solve the nonlinear macroscopic Darcy problem `div 𝒦(f − ∇p̂) = 0` with
/// no-flux walls by damped Picard iteration: evaluate the flux at the
/// current force, solve a linearized correction with the permeability
/// estimate, and damp the step until the residual decreases.
///
/// A forcing entirely inside the yield set produces an identically zero
/// flux; this is returned as a valid all-rigid state (`all_rigid = true`,
/// `u⁰ = 0`), not an error — the law itself certifies that no flow is
/// admissible and the returned pressure is one representative of the
/// yield-slack set.
pub fn solve_nonlinear_darcy(
    law: &mut DarcyLaw,
    f: &VectorField,
    cfg: &DarcyConfig,
) -> Result<MacroSolution> {
    check_sealed(&f.grid)?;
    let grid = f.grid.clone();
    let l_char = (grid.nx as f64 * grid.hx).min(grid.ny as f64 * grid.hy);
    let k_est = estimate_matrix(law, f.linf())?;

    let mut p_hat = ScalarField::zeros(&grid);
    let mut flux = law_flux(law, f)?;
    let mut div = divergence(&flux);
    let mut res = linf_cells(&div);
    let flux_scale = flux.linf();
    let target = cfg.tol * (flux_scale / l_char).max(f64::MIN_POSITIVE);

    let mut history = vec![res];
    let mut iterations = 0;
    let mut converged = res <= target;
    while !converged && iterations < cfg.max_iter {
        // linearized correction: −div(K_est ∇ dp) = −div(flux)
        let rhs = {
            let mut r = div.clone();
            for v in r.data.iter_mut() {
                *v = -*v;
            }
            r
        };
        let (dp, _) = cg_macro(k_est, &grid, &rhs, cfg.cg_tol.max(1e-12), cfg.cg_max_iter)?;
        let mut alpha = cfg.damping;
        let mut accepted = false;
        while alpha >= 1e-4 {
            let mut p_try = p_hat.clone();
            for (pv, dv) in p_try.data.iter_mut().zip(dp.data.iter()) {
                *pv += alpha * dv;
            }
            let mut w = f.clone();
            w.scaled_add(-1.0, &gradient(&p_try));
            let flux_try = law_flux(law, &w)?;
            let div_try = divergence(&flux_try);
            let res_try = linf_cells(&div_try);
            if res_try < res {
                p_hat = p_try;
                flux = flux_try;
                div = div_try;
                res = res_try;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations += 1;
        history.push(res);
        converged = res <= target;
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            residual: res / (flux_scale / l_char).max(f64::MIN_POSITIVE),
        });
    }
    p_hat.remove_mean(None);
    let all_rigid = flux.linf() <= 1e-14 * f.linf().max(f64::MIN_POSITIVE);
    let residual = linf_cells(&divergence(&flux));
    Ok(MacroSolution {
        p_hat,
        u0: flux,
        iterations,
        residual,
        history,
        all_rigid,
    })
}

/// Polar bilinear interpolation table built from a sampled effective law.
///
/// Samples are grouped by direction; evaluation brackets the query angle
/// (with wrap-around), interpolates each bracketed ray linearly in
/// magnitude — anchored at `K(0) = 0` below the smallest sample — and
/// blends the two rays by angle.
pub struct PolarTable {
    angles: Vec<f64>,
    rays: Vec<Vec<(f64, [f64; 2])>>,
}

impl PolarTable {
    pub fn from_law(law: &EffectiveLaw) -> Self {
        let mut entries: Vec<(f64, f64, [f64; 2])> = law
            .samples
            .iter()
            .filter_map(|s| {
                let m = s.lambda[0].hypot(s.lambda[1]);
                if m == 0.0 {
                    None
                } else {
                    let mut theta = s.lambda[1].atan2(s.lambda[0]);
                    if theta < 0.0 {
                        theta += std::f64::consts::TAU;
                    }
                    Some((theta, m, s.k))
                }
            })
            .collect();
        entries.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut angles = Vec::new();
        let mut rays: Vec<Vec<(f64, [f64; 2])>> = Vec::new();
        for (theta, m, k) in entries {
            match angles.last() {
                Some(&last) if (theta - last) <= 1e-9 => {
                    rays.last_mut().unwrap().push((m, k));
                }
                _ => {
                    angles.push(theta);
                    rays.push(vec![(m, k)]);
                }
            }
        }
        Self { angles, rays }
    }

    fn eval_ray(&self, idx: usize, m: f64) -> [f64; 2] {
        let ray = &self.rays[idx];
        // anchored at the origin: K(0) = 0
        let (mut m0, mut k0) = (0.0, [0.0, 0.0]);
        for &(mi, ki) in ray {
            if m <= mi {
                let t = if mi > m0 { (m - m0) / (mi - m0) } else { 1.0 };
                return [
                    k0[0] + t * (ki[0] - k0[0]),
                    k0[1] + t * (ki[1] - k0[1]),
                ];
            }
            m0 = mi;
            k0 = ki;
        }
        // beyond the last sample: extrapolate proportionally
        if m0 > 0.0 {
            let t = m / m0;
            [k0[0] * t, k0[1] * t]
        } else {
            [0.0, 0.0]
        }
    }

    pub fn eval(&self, lambda: [f64; 2]) -> [f64; 2] {
        let m = lambda[0].hypot(lambda[1]);
        if m == 0.0 || self.angles.is_empty() {
            return [0.0, 0.0];
        }
        let mut theta = lambda[1].atan2(lambda[0]);
        if theta < 0.0 {
            theta += std::f64::consts::TAU;
        }
        if self.angles.len() == 1 {
            return self.eval_ray(0, m);
        }
        // bracket theta with wrap-around
        let n = self.angles.len();
        let hi = self.angles.partition_point(|&a| a < theta) % n;
        let lo = (hi + n - 1) % n;
        let (a_lo, a_hi) = (self.angles[lo], self.angles[hi]);
        let span = (a_hi - a_lo).rem_euclid(std::f64::consts::TAU);
        let gap = (theta - a_lo).rem_euclid(std::f64::consts::TAU);
        let t = if span > 1e-12 { (gap / span).clamp(0.0, 1.0) } else { 0.0 };
        let k_lo = self.eval_ray(lo, m);
        let k_hi = self.eval_ray(hi, m);
        [
            k_lo[0] + t * (k_hi[0] - k_lo[0]),
            k_lo[1] + t * (k_hi[1] - k_lo[1]),
        ]
    }
}
