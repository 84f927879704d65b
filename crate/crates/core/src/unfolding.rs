//! Discrete periodic unfolding operators on nested grids.
//!
//! The domain grid of a [`DoublePeriodicDomain`] tiles exactly into macro
//! cells of `eps * Y` and further into subcells of `eps * delta * Z`, so
//! both unfolding operators are implemented as *exact index relabelings* of
//! cell-centered data — never as interpolation.  All structural identities
//! (integral identity, gradient rescalings, multiplicativity) therefore
//! hold to rounding error on every grid.
//!
//! Because the domain is exactly covered by `eps * Y` cells, the boundary
//! layer of partially covered cells is empty and no zero-extension branch is
//! needed; the constructor of [`DoublePeriodicDomain`] enforces this.

use ndarray::{Array2, Array4, Array6};

use crate::error::{Error, Result};
use crate::fields::ScalarField;
use crate::geometry::DoublePeriodicDomain;

/// A field unfolded once: indexed by macro cell `(a, b)` and the grid cell
/// `(p, q)` of the reference cell `Y`.  The value is constant in `x` over
/// each macro cell, so the macro index replaces `x`.
#[derive(Debug, Clone)]
pub struct UnfoldedEps {
    pub eps: f64,
    /// Macro cells per axis.
    pub macro_cells: [usize; 2],
    /// Grid cells per axis across `Y`.
    pub y_res: [usize; 2],
    pub y_lengths: [f64; 2],
    pub data: Array4<f64>,
}

/// A field unfolded twice: indexed by macro cell `(a, b)`, the `delta * Z`
/// subcell `(s, t)` of `Y` and the grid cell `(zp, zq)` of the reference
/// cell `Z`.
#[derive(Debug, Clone)]
pub struct UnfoldedDelta {
    pub eps: f64,
    pub delta: f64,
    pub macro_cells: [usize; 2],
    pub subdivision: [usize; 2],
    /// Grid cells per axis across `Z`.
    pub z_res: usize,
    pub z_lengths: [f64; 2],
    pub data: Array6<f64>,
}

fn check_grid(phi: &ScalarField, dom: &DoublePeriodicDomain) -> Result<()> {
    let (nx, ny) = (dom.grid_cells(0), dom.grid_cells(1));
    if phi.grid.nx != nx || phi.grid.ny != ny {
        return Err(Error::GridNotNested(format!(
            "field grid {}x{} does not match the domain grid {}x{}",
            phi.grid.nx, phi.grid.ny, nx, ny
        )));
    }
    let (hx, hy) = (dom.spacing(0), dom.spacing(1));
    if (phi.grid.hx - hx).abs() > 1e-12 * hx || (phi.grid.hy - hy).abs() > 1e-12 * hy {
        return Err(Error::GridNotNested(
            "field spacing does not match the domain spacing".into(),
        ));
    }
    Ok(())
}

/// Unfold a cell-centered field with respect to the `eps * Y` tiling.
pub fn unfold_eps(phi: &ScalarField, dom: &DoublePeriodicDomain) -> Result<UnfoldedEps> {
    check_grid(phi, dom)?;
    let mc = [dom.macro_cells(0), dom.macro_cells(1)];
    let res = [
        dom.geometry.subdivision[0] * dom.grid_per_subcell,
        dom.geometry.subdivision[1] * dom.grid_per_subcell,
    ];
    let mut data = Array4::zeros((mc[0], mc[1], res[0], res[1]));
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for p in 0..res[0] {
                for q in 0..res[1] {
                    data[(a, b, p, q)] = phi.data[(a * res[0] + p, b * res[1] + q)];
                }
            }
        }
    }
    Ok(UnfoldedEps {
        eps: dom.epsilon,
        macro_cells: mc,
        y_res: res,
        y_lengths: [
            dom.geometry.y_cell.lengths[0],
            dom.geometry.y_cell.lengths[1],
        ],
        data,
    })
}

/// Unfold the `y` variable of an already unfolded field with respect to the
/// `delta * Z` tiling of `Y`.
pub fn unfold_delta(unf: &UnfoldedEps, dom: &DoublePeriodicDomain) -> Result<UnfoldedDelta> {
    let sub = [dom.geometry.subdivision[0], dom.geometry.subdivision[1]];
    let gps = dom.grid_per_subcell;
    if unf.y_res != [sub[0] * gps, sub[1] * gps] || unf.macro_cells != [dom.macro_cells(0), dom.macro_cells(1)]
    {
        return Err(Error::GridNotNested(
            "unfolded field does not match the domain's cell lattice".into(),
        ));
    }
    let mc = unf.macro_cells;
    let mut data = Array6::zeros((mc[0], mc[1], sub[0], sub[1], gps, gps));
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for s in 0..sub[0] {
                for t in 0..sub[1] {
                    for zp in 0..gps {
                        for zq in 0..gps {
                            data[[a, b, s, t, zp, zq]] =
                                unf.data[(a, b, s * gps + zp, t * gps + zq)];
                        }
                    }
                }
            }
        }
    }
    Ok(UnfoldedDelta {
        eps: dom.epsilon,
        delta: dom.delta(),
        macro_cells: mc,
        subdivision: sub,
        z_res: gps,
        z_lengths: [
            dom.geometry.z_cell.lengths[0],
            dom.geometry.z_cell.lengths[1],
        ],
        data,
    })
}

/// Composition of both unfoldings.
pub fn unfold_both(phi: &ScalarField, dom: &DoublePeriodicDomain) -> Result<UnfoldedDelta> {
    unfold_delta(&unfold_eps(phi, dom)?, dom)
}

impl UnfoldedEps {
    /// Mean over the `Y` variable; one value per macro cell.
    pub fn mean_y(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.macro_cells[0], self.macro_cells[1]));
        let w = (self.y_res[0] * self.y_res[1]) as f64;
        for a in 0..self.macro_cells[0] {
            for b in 0..self.macro_cells[1] {
                let mut s = 0.0;
                for p in 0..self.y_res[0] {
                    for q in 0..self.y_res[1] {
                        s += self.data[(a, b, p, q)];
                    }
                }
                out[(a, b)] = s / w;
            }
        }
        out
    }

    /// Fold back onto the domain grid (left inverse of [`unfold_eps`]).
    pub fn fold(&self, dom: &DoublePeriodicDomain) -> Result<ScalarField> {
        let grid = crate::fields::StaggeredGrid::over_box(
            [dom.omega[0], dom.omega[1]],
            [dom.grid_cells(0), dom.grid_cells(1)],
            [true, true],
        )?;
        let mut phi = ScalarField::zeros(&grid);
        for a in 0..self.macro_cells[0] {
            for b in 0..self.macro_cells[1] {
                for p in 0..self.y_res[0] {
                    for q in 0..self.y_res[1] {
                        phi.data[(a * self.y_res[0] + p, b * self.y_res[1] + q)] =
                            self.data[(a, b, p, q)];
                    }
                }
            }
        }
        Ok(phi)
    }
}

impl UnfoldedDelta {
    /// Mean over the `Z` variable; indexed by macro cell and subcell.
    pub fn mean_z(&self) -> Array4<f64> {
        let mc = self.macro_cells;
        let sub = self.subdivision;
        let mut out = Array4::zeros((mc[0], mc[1], sub[0], sub[1]));
        let w = (self.z_res * self.z_res) as f64;
        for a in 0..mc[0] {
            for b in 0..mc[1] {
                for s in 0..sub[0] {
                    for t in 0..sub[1] {
                        let mut acc = 0.0;
                        for zp in 0..self.z_res {
                            for zq in 0..self.z_res {
                                acc += self.data[[a, b, s, t, zp, zq]];
                            }
                        }
                        out[(a, b, s, t)] = acc / w;
                    }
                }
            }
        }
        out
    }
}

/// Relative defect of the integral identity
/// `int_Omega f = 1/(|Y||Z|) int_{Omega x Y x Z} T_delta T_eps f`.
///
/// Exact relabeling makes this a pure bookkeeping check; it certifies the
/// measure factors in the implementation, not an approximation property.
pub fn integral_identity_defect(phi: &ScalarField, dom: &DoublePeriodicDomain) -> Result<f64> {
    let lhs: f64 = phi.data.iter().sum::<f64>() * phi.grid.cell_volume();

    let unf = unfold_both(phi, dom)?;
    let y_vol = dom.geometry.y_cell.volume();
    let z_vol = dom.geometry.z_cell.volume();
    // x-measure of one macro cell:
    let macro_vol = dom.epsilon * dom.geometry.y_cell.lengths[0]
        * dom.epsilon
        * dom.geometry.y_cell.lengths[1];
    // y-measure of one delta*Z subcell:
    let sample_y_vol = dom.geometry.subcell_len(0) * dom.geometry.subcell_len(1);
    let mut rhs = 0.0;
    let mz = unf.mean_z();
    let mc = unf.macro_cells;
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for s in 0..unf.subdivision[0] {
                for t in 0..unf.subdivision[1] {
                    // int over z of the sample = mean_z * |Z|; the y-integral
                    // over the subcell contributes the subcell area.
                    rhs += mz[(a, b, s, t)] * sample_y_vol * z_vol;
                }
            }
        }
    }
    rhs *= macro_vol / (y_vol * z_vol);
    let scale = lhs.abs().max(phi.grid.cell_volume());
    Ok((lhs - rhs).abs() / scale)
}

/// Max-norm defect of the rescaling identity
/// `grad_y T_eps(phi) = eps * T_eps(grad phi)` over interior `y` faces.
pub fn gradient_identity_defect_eps(
    phi: &ScalarField,
    dom: &DoublePeriodicDomain,
) -> Result<f64> {
    let unf = unfold_eps(phi, dom)?;
    let hx = dom.spacing(0);
    let hy = dom.spacing(1);
    let hy_y = [
        dom.geometry.y_cell.lengths[0] / unf.y_res[0] as f64,
        dom.geometry.y_cell.lengths[1] / unf.y_res[1] as f64,
    ];
    let mut defect: f64 = 0.0;
    let mc = unf.macro_cells;
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for p in 0..unf.y_res[0] - 1 {
                for q in 0..unf.y_res[1] {
                    // d/dy0 of the unfolded field at the interior face
                    let dy = (unf.data[(a, b, p + 1, q)] - unf.data[(a, b, p, q)]) / hy_y[0];
                    // eps * unfold of d/dx0 at the matching fine face
                    let (i, j) = (a * unf.y_res[0] + p, b * unf.y_res[1] + q);
                    let dx = (phi.data[(i + 1, j)] - phi.data[(i, j)]) / hx;
                    defect = defect.max((dy - dom.epsilon * dx).abs());
                }
            }
            for p in 0..unf.y_res[0] {
                for q in 0..unf.y_res[1] - 1 {
                    let dy = (unf.data[(a, b, p, q + 1)] - unf.data[(a, b, p, q)]) / hy_y[1];
                    let (i, j) = (a * unf.y_res[0] + p, b * unf.y_res[1] + q);
                    let dx = (phi.data[(i, j + 1)] - phi.data[(i, j)]) / hy;
                    defect = defect.max((dy - dom.epsilon * dx).abs());
                }
            }
        }
    }
    Ok(defect)
}

/// Max-norm defect of `grad_z T_delta T_eps(phi) = eps*delta * T_delta
/// T_eps(grad phi)` over interior `z` faces.
pub fn gradient_identity_defect_delta(
    phi: &ScalarField,
    dom: &DoublePeriodicDomain,
) -> Result<f64> {
    let unf = unfold_both(phi, dom)?;
    let hx = dom.spacing(0);
    let hy = dom.spacing(1);
    let hz = [
        dom.geometry.z_cell.lengths[0] / unf.z_res as f64,
        dom.geometry.z_cell.lengths[1] / unf.z_res as f64,
    ];
    let eps_delta = dom.epsilon * dom.delta();
    let gps = unf.z_res;
    let yres = [unf.subdivision[0] * gps, unf.subdivision[1] * gps];
    let mut defect: f64 = 0.0;
    let mc = unf.macro_cells;
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for s in 0..unf.subdivision[0] {
                for t in 0..unf.subdivision[1] {
                    for zp in 0..gps {
                        for zq in 0..gps {
                            let (i, j) = (
                                a * yres[0] + s * gps + zp,
                                b * yres[1] + t * gps + zq,
                            );
                            if zp + 1 < gps {
                                let dz = (unf.data[[a, b, s, t, zp + 1, zq]]
                                    - unf.data[[a, b, s, t, zp, zq]])
                                    / hz[0];
                                let dx = (phi.data[(i + 1, j)] - phi.data[(i, j)]) / hx;
                                defect = defect.max((dz - eps_delta * dx).abs());
                            }
                            if zq + 1 < gps {
                                let dz = (unf.data[[a, b, s, t, zp, zq + 1]]
                                    - unf.data[[a, b, s, t, zp, zq]])
                                    / hz[1];
                                let dx = (phi.data[(i, j + 1)] - phi.data[(i, j)]) / hy;
                                defect = defect.max((dz - eps_delta * dx).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(defect)
}

/// Normalized `L2(Omega x Y)` distance between `T_eps(phi)` and `phi`
/// itself.  For smooth `phi` this is the quantity that vanishes as
/// `eps -> 0`; the double unfolding gives the identical number because the
/// `(y, z)` indices enumerate the same fine cells within each macro cell.
pub fn averaging_gap(phi: &ScalarField, dom: &DoublePeriodicDomain) -> Result<f64> {
    let unf = unfold_eps(phi, dom)?;
    let mc = unf.macro_cells;
    let res = unf.y_res;
    let mut acc = 0.0;
    for a in 0..mc[0] {
        for b in 0..mc[1] {
            for i in 0..res[0] {
                for j in 0..res[1] {
                    let x_val = phi.data[(a * res[0] + i, b * res[1] + j)];
                    for p in 0..res[0] {
                        for q in 0..res[1] {
                            let d = unf.data[(a, b, p, q)] - x_val;
                            acc += d * d;
                        }
                    }
                }
            }
        }
    }
    // normalize by the product measure |Omega| x |Y|
    let n_x = (mc[0] * res[0] * mc[1] * res[1]) as f64;
    let n_y = (res[0] * res[1]) as f64;
    let omega_vol = dom.omega[0] * dom.omega[1];
    let y_vol = dom.geometry.y_cell.volume();
    Ok((acc / (n_x * n_y) * omega_vol * y_vol).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::StaggeredGrid;
    use crate::geometry::{BoxSpec, CellGeometry, RectCell};
    use std::f64::consts::PI;

    fn plain_geometry(sub: usize) -> CellGeometry {
        CellGeometry::new(
            RectCell::new(vec![1.0, 1.0], vec![]).unwrap(),
            RectCell::new(
                vec![1.0, 1.0],
                vec![BoxSpec::new(vec![0.25, 0.25], vec![0.5, 0.5])],
            )
            .unwrap(),
            vec![sub, sub],
        )
        .unwrap()
    }

    fn domain(eps: f64, sub: usize, gps: usize) -> DoublePeriodicDomain {
        DoublePeriodicDomain::new(vec![1.0, 1.0], eps, plain_geometry(sub), gps).unwrap()
    }

    fn smooth_sample(dom: &DoublePeriodicDomain) -> ScalarField {
        let grid = StaggeredGrid::over_box(
            [1.0, 1.0],
            [dom.grid_cells(0), dom.grid_cells(1)],
            [true, true],
        )
        .unwrap();
        ScalarField::from_fn(&grid, |x, y| {
            (2.0 * PI * x).sin() * (2.0 * PI * y).cos() + 0.3 * x * y
        })
    }

    #[test]
    fn unfold_round_trips_exactly() {
        let dom = domain(0.25, 2, 4);
        let phi = smooth_sample(&dom);
        let unf = unfold_eps(&phi, &dom).unwrap();
        let back = unf.fold(&dom).unwrap();
        for (a, b) in phi.data.iter().zip(back.data.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let dom = domain(0.25, 2, 4);
        let grid = StaggeredGrid::over_box([1.0, 1.0], [12, 12], [true, true]).unwrap();
        let phi = ScalarField::zeros(&grid);
        assert!(matches!(
            unfold_eps(&phi, &dom),
            Err(crate::Error::GridNotNested(_))
        ));
    }

    #[test]
    fn integral_identity_is_exact() {
        let dom = domain(0.25, 2, 4);
        let phi = smooth_sample(&dom);
        let defect = integral_identity_defect(&phi, &dom).unwrap();
        assert!(defect < 1e-12, "defect {defect}");
    }

    #[test]
    fn gradient_identities_are_exact() {
        let dom = domain(0.25, 2, 4);
        let phi = smooth_sample(&dom);
        assert!(gradient_identity_defect_eps(&phi, &dom).unwrap() < 1e-12);
        assert!(gradient_identity_defect_delta(&phi, &dom).unwrap() < 1e-12);
    }

    #[test]
    fn unfolding_is_linear_and_multiplicative() {
        let dom = domain(0.5, 2, 4);
        let f = smooth_sample(&dom);
        let mut g = smooth_sample(&dom);
        g.data.mapv_inplace(|v| v * v - 0.7);

        let uf = unfold_eps(&f, &dom).unwrap();
        let ug = unfold_eps(&g, &dom).unwrap();

        let mut combo = f.clone();
        for ((i, j), v) in combo.data.indexed_iter_mut() {
            *v = 2.0 * f.data[(i, j)] - 3.0 * g.data[(i, j)];
        }
        let uc = unfold_eps(&combo, &dom).unwrap();
        let mut prod = f.clone();
        for ((i, j), v) in prod.data.indexed_iter_mut() {
            *v = f.data[(i, j)] * g.data[(i, j)];
        }
        let up = unfold_eps(&prod, &dom).unwrap();

        for idx in 0..uf.data.len() {
            let (fv, gv) = (
                uf.data.as_slice().unwrap()[idx],
                ug.data.as_slice().unwrap()[idx],
            );
            assert_eq!(uc.data.as_slice().unwrap()[idx], 2.0 * fv - 3.0 * gv);
            assert_eq!(up.data.as_slice().unwrap()[idx], fv * gv);
        }
    }

    #[test]
    fn averaging_gap_vanishes_for_macrocell_constants() {
        let dom = domain(0.25, 2, 4);
        let grid = StaggeredGrid::over_box(
            [1.0, 1.0],
            [dom.grid_cells(0), dom.grid_cells(1)],
            [true, true],
        )
        .unwrap();
        let per = dom.grid_cells(0) / dom.macro_cells(0);
        let mut phi = ScalarField::zeros(&grid);
        for ((i, j), v) in phi.data.indexed_iter_mut() {
            *v = ((i / per) * 10 + j / per) as f64;
        }
        assert!(averaging_gap(&phi, &dom).unwrap() < 1e-13);
    }

    #[test]
    fn averaging_gap_decreases_dyadically() {
        let mut dom = domain(0.5, 2, 4);
        let mut gaps = Vec::new();
        for _ in 0..3 {
            let phi = smooth_sample(&dom);
            gaps.push(averaging_gap(&phi, &dom).unwrap());
            dom = dom.halved();
        }
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "gaps {gaps:?}");
        assert!(gaps[2] < 0.6 * gaps[0]);
    }

    #[test]
    fn mean_z_of_z_periodic_field_is_its_average() {
        // a field depending only on z repeats per subcell; mean_z is the
        // same number everywhere.
        let dom = domain(0.5, 2, 4);
        let grid = StaggeredGrid::over_box(
            [1.0, 1.0],
            [dom.grid_cells(0), dom.grid_cells(1)],
            [true, true],
        )
        .unwrap();
        let gps = dom.grid_per_subcell;
        let mut phi = ScalarField::zeros(&grid);
        for ((i, j), v) in phi.data.indexed_iter_mut() {
            *v = ((i % gps) * gps + j % gps) as f64;
        }
        let mz = unfold_both(&phi, &dom).unwrap().mean_z();
        let expect = mz[(0, 0, 0, 0)];
        for v in mz.iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
