//! Periodic cell geometries with solid obstacles at two scales and the
//! doubly perforated macroscopic domain.
//!
//! The reference cells `Y` and `Z` are axis-aligned boxes carrying lists of
//! axis-aligned solid obstacles.  `Y` is tiled by `subdivision` copies of the
//! scaled cell `delta * Z`, and every obstacle of `Y` must be an exact union
//! of whole subcells, so all obstacle boundaries fall on lattice lines and
//! masks discretize the fluid parts exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Relative tolerance for "lands exactly on a lattice line" checks.
const ALIGN_TOL: f64 = 1e-9;

/// An axis-aligned box given by its lower corner and per-axis extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub corner: Vec<f64>,
    pub extent: Vec<f64>,
}

impl BoxSpec {
    pub fn new(corner: Vec<f64>, extent: Vec<f64>) -> Self {
        Self { corner, extent }
    }

    pub fn dim(&self) -> usize {
        self.corner.len()
    }

    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.corner[axis] + self.extent[axis]
    }

    /// Closed-box containment of a point.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &xi)| xi >= self.corner[i] && xi <= self.upper(i))
    }

    /// True if the open interiors of the two boxes intersect.
    pub fn overlaps(&self, other: &BoxSpec) -> bool {
        (0..self.dim())
            .all(|i| self.corner[i] < other.upper(i) && other.corner[i] < self.upper(i))
    }

    /// True if `other` is contained in this box (closed containment).
    pub fn contains_box(&self, other: &BoxSpec) -> bool {
        (0..self.dim()).all(|i| {
            other.corner[i] >= self.corner[i] - ALIGN_TOL
                && other.upper(i) <= self.upper(i) + ALIGN_TOL
        })
    }
}

/// A rectangular reference cell with axis-aligned solid obstacles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RectCell {
    pub lengths: Vec<f64>,
    pub obstacles: Vec<BoxSpec>,
}

impl RectCell {
    pub fn new(lengths: Vec<f64>, obstacles: Vec<BoxSpec>) -> Result<Self> {
        let cell = Self { lengths, obstacles };
        cell.validate()?;
        Ok(cell)
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn obstacle_volume(&self) -> f64 {
        self.obstacles.iter().map(BoxSpec::volume).sum()
    }

    /// Fluid volume of the perforated cell.
    pub fn fluid_volume(&self) -> f64 {
        self.volume() - self.obstacle_volume()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 || self.lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidGeometry(
                "cell lengths must be positive".into(),
            ));
        }
        for (k, b) in self.obstacles.iter().enumerate() {
            if b.dim() != n || b.extent.len() != n {
                return Err(Error::InvalidGeometry(format!(
                    "obstacle {k} has wrong dimension"
                )));
            }
            if b.extent.iter().any(|&e| e <= 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "obstacle {k} has non-positive extent"
                )));
            }
            for i in 0..n {
                // Obstacles live strictly inside the open cell.
                if b.corner[i] <= 0.0 || b.upper(i) >= self.lengths[i] {
                    return Err(Error::InvalidGeometry(format!(
                        "obstacle {k} is not contained in the open cell"
                    )));
                }
            }
        }
        for a in 0..self.obstacles.len() {
            for b in a + 1..self.obstacles.len() {
                if self.obstacles[a].overlaps(&self.obstacles[b]) {
                    return Err(Error::InvalidGeometry(format!(
                        "obstacles {a} and {b} overlap"
                    )));
                }
            }
        }
        if self.obstacle_volume() >= self.volume() {
            return Err(Error::InvalidGeometry(
                "obstacles fill the whole cell, fluid part empty".into(),
            ));
        }
        Ok(())
    }

    /// True if the point (in cell coordinates) lies inside some obstacle.
    pub fn in_obstacle(&self, x: &[f64]) -> bool {
        self.obstacles.iter().any(|b| b.contains(x))
    }
}

/// The two-level cell geometry: the cell `Y` with obstacles `Y_s`, the cell
/// `Z` with obstacles `Z_s`, and the subdivision of `Y` into `delta * Z`
/// subcells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellGeometry {
    pub y_cell: RectCell,
    pub z_cell: RectCell,
    pub subdivision: Vec<usize>,
}

impl CellGeometry {
    pub fn new(y_cell: RectCell, z_cell: RectCell, subdivision: Vec<usize>) -> Result<Self> {
        let geom = Self {
            y_cell,
            z_cell,
            subdivision,
        };
        let report = geom.validate();
        if let Some(c) = report.checks.iter().find(|c| !c.pass) {
            return Err(Error::InvalidGeometry(format!("{}: {}", c.name, c.detail)));
        }
        Ok(geom)
    }

    pub fn dim(&self) -> usize {
        self.y_cell.dim()
    }

    /// The scale ratio `delta` implied by the subdivision.  The same for all
    /// axes by the covering invariant.
    pub fn delta(&self) -> f64 {
        self.y_cell.lengths[0] / (self.subdivision[0] as f64 * self.z_cell.lengths[0])
    }

    fn delta_axis(&self, i: usize) -> f64 {
        self.y_cell.lengths[i] / (self.subdivision[i] as f64 * self.z_cell.lengths[i])
    }

    /// Side length of one subcell along `axis`.
    pub fn subcell_len(&self, axis: usize) -> f64 {
        self.y_cell.lengths[axis] / self.subdivision[axis] as f64
    }

    /// Same cells and obstacles on a subdivision refined by `factor`
    /// (so `delta` shrinks by `factor`).  Obstacles of `Y` stay aligned to
    /// the finer lattice.
    pub fn refine_subdivision(&self, factor: usize) -> CellGeometry {
        CellGeometry {
            y_cell: self.y_cell.clone(),
            z_cell: self.z_cell.clone(),
            subdivision: self.subdivision.iter().map(|&s| s * factor).collect(),
        }
    }

    /// Fluid volume fraction of `Y_f` (both obstacle scales carved out of Y).
    pub fn y_f_fraction(&self) -> f64 {
        let n = self.dim();
        let total_sub: usize = self.subdivision.iter().product();
        let sub_vol: f64 = (0..n).map(|i| self.subcell_len(i)).product();
        let ys_sub = (self.y_cell.obstacle_volume() / sub_vol).round() as usize;
        let zs_frac = self.z_cell.obstacle_volume() / self.z_cell.volume();
        let fluid_sub = total_sub - ys_sub;
        (fluid_sub as f64 * sub_vol * (1.0 - zs_frac)) / self.y_cell.volume()
    }

    /// Fluid fraction of the perforated domain pattern, equal to the fluid
    /// fraction of `Y_f` in `Y`.
    pub fn fluid_fraction(&self) -> f64 {
        self.y_f_fraction()
    }

    /// `|Y*| |Z*| / (|Y| |Z|)`, the factor relating the velocity of
    /// filtration to the weak limit of the fine velocity.
    pub fn star_volume_ratio(&self) -> f64 {
        (self.y_cell.fluid_volume() / self.y_cell.volume())
            * (self.z_cell.fluid_volume() / self.z_cell.volume())
    }

    /// Stable content hash of the geometry (used in law files and manifests).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: f64| h.update(format!("{v:.17e};"));
        for &l in &self.y_cell.lengths {
            feed(l);
        }
        for b in &self.y_cell.obstacles {
            for &c in b.corner.iter().chain(b.extent.iter()) {
                feed(c);
            }
        }
        for &l in &self.z_cell.lengths {
            feed(l);
        }
        for b in &self.z_cell.obstacles {
            for &c in b.corner.iter().chain(b.extent.iter()) {
                feed(c);
            }
        }
        let mut h = h;
        for &s in &self.subdivision {
            h.update(format!("{s};"));
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Run all invariant checks, returning a report instead of failing on
    /// the first violation.
    pub fn validate(&self) -> GeometryReport {
        let mut checks = Vec::new();
        let n = self.dim();

        let cells_ok = self.y_cell.validate().is_ok() && self.z_cell.validate().is_ok();
        checks.push(Check::new(
            "cells-valid",
            cells_ok,
            if cells_ok {
                String::new()
            } else {
                "a reference cell violates its box invariants".into()
            },
        ));
        if !cells_ok || self.subdivision.len() != n || self.z_cell.dim() != n {
            checks.push(Check::new(
                "dimensions",
                self.subdivision.len() == n && self.z_cell.dim() == n,
                "subdivision / cell dimensions disagree".into(),
            ));
            return GeometryReport { checks };
        }

        // delta implied per axis must agree to machine precision.
        let d0 = self.delta_axis(0);
        let iso = (0..n).all(|i| {
            self.subdivision[i] > 0 && (self.delta_axis(i) - d0).abs() <= ALIGN_TOL * d0
        });
        checks.push(Check::new(
            "delta-isotropic",
            iso,
            if iso {
                String::new()
            } else {
                "per-axis delta values disagree; Y is not tiled by delta*Z".into()
            },
        ));

        // Every Y obstacle must be an exact union of whole subcells.
        let mut covering = (true, String::new());
        for (k, b) in self.y_cell.obstacles.iter().enumerate() {
            for i in 0..n {
                let step = self.subcell_len(i);
                for v in [b.corner[i], b.upper(i)] {
                    let q = v / step;
                    if (q - q.round()).abs() > ALIGN_TOL * self.subdivision[i] as f64 {
                        covering = (
                            false,
                            format!("Y obstacle {k} edge {v} not on the delta*Z lattice (axis {i})"),
                        );
                    }
                }
            }
        }
        checks.push(Check::new("ys-covering", covering.0, covering.1));

        // No intersection between Y_s and any delta*(l z0 + Z_s) copy that is
        // not itself buried inside Y_s.
        let mut inter = (true, String::new());
        let delta = d0;
        'outer: for l0 in 0..self.subdivision[0] {
            for l1 in 0..self.subdivision.get(1).copied().unwrap_or(1) {
                let l = [l0, l1];
                for zb in &self.z_cell.obstacles {
                    let copy = BoxSpec::new(
                        (0..n)
                            .map(|i| delta * (l[i] as f64 * self.z_cell.lengths[i] + zb.corner[i]))
                            .collect(),
                        (0..n).map(|i| delta * zb.extent[i]).collect(),
                    );
                    let buried = self.y_cell.obstacles.iter().any(|yb| yb.contains_box(&copy));
                    if buried {
                        continue;
                    }
                    if let Some((k, _)) = self
                        .y_cell
                        .obstacles
                        .iter()
                        .enumerate()
                        .find(|(_, yb)| yb.overlaps(&copy))
                    {
                        inter = (
                            false,
                            format!(
                                "Y obstacle {k} intersects the scaled Z obstacle copy in subcell ({l0},{l1})"
                            ),
                        );
                        break 'outer;
                    }
                }
            }
        }
        checks.push(Check::new("ys-zs-disjoint", inter.0, inter.1));

        GeometryReport { checks }
    }
}

/// Outcome of a single geometry invariant check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }
}

/// Pass/fail report over all geometry invariants.
#[derive(Debug, Clone, Serialize)]
pub struct GeometryReport {
    pub checks: Vec<Check>,
}

impl GeometryReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// The macroscopic box `Omega` with its two perforation scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoublePeriodicDomain {
    pub omega: Vec<f64>,
    pub epsilon: f64,
    pub geometry: CellGeometry,
    pub grid_per_subcell: usize,
}

impl DoublePeriodicDomain {
    pub fn new(
        omega: Vec<f64>,
        epsilon: f64,
        geometry: CellGeometry,
        grid_per_subcell: usize,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidGeometry(format!(
                "epsilon must lie in (0,1), got {epsilon}"
            )));
        }
        let delta = geometry.delta();
        if !(delta * epsilon > 0.0 && delta * epsilon < epsilon) {
            return Err(Error::InvalidGeometry(format!(
                "need 0 < delta*eps < eps, got delta = {delta}"
            )));
        }
        if grid_per_subcell == 0 {
            return Err(Error::InvalidGeometry("grid_per_subcell must be >= 1".into()));
        }
        for (i, &w) in omega.iter().enumerate() {
            let cells = w / (epsilon * geometry.y_cell.lengths[i]);
            if (cells - cells.round()).abs() > ALIGN_TOL * cells.max(1.0) || cells < 1.0 - ALIGN_TOL
            {
                return Err(Error::InvalidGeometry(format!(
                    "Omega is not exactly covered by eps*Y cells along axis {i} ({cells} cells)"
                )));
            }
        }
        Ok(Self {
            omega,
            epsilon,
            geometry,
            grid_per_subcell,
        })
    }

    pub fn delta(&self) -> f64 {
        self.geometry.delta()
    }

    /// Number of `eps*Y` macro cells along `axis`.
    pub fn macro_cells(&self, axis: usize) -> usize {
        (self.omega[axis] / (self.epsilon * self.geometry.y_cell.lengths[axis])).round() as usize
    }

    /// Total grid cells along `axis` (macro cells x subdivision x points per
    /// subcell).
    pub fn grid_cells(&self, axis: usize) -> usize {
        self.macro_cells(axis) * self.geometry.subdivision[axis] * self.grid_per_subcell
    }

    /// Grid spacing along `axis`.
    pub fn spacing(&self, axis: usize) -> f64 {
        self.omega[axis] / self.grid_cells(axis) as f64
    }

    /// The next level of the dyadic sequence: `eps` halves while the
    /// subdivision doubles, so the delta-to-eps ratio is preserved and all
    /// covering assumptions remain true.
    pub fn halved(&self) -> DoublePeriodicDomain {
        DoublePeriodicDomain {
            omega: self.omega.clone(),
            epsilon: self.epsilon / 2.0,
            geometry: self.geometry.refine_subdivision(2),
            grid_per_subcell: self.grid_per_subcell,
        }
    }
}

/// Boolean fluid mask on a regular grid; `true` = fluid.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Array2<bool>,
    pub spacing: [f64; 2],
}

impl Mask {
    pub fn all_fluid(nx: usize, ny: usize, spacing: [f64; 2]) -> Self {
        Self {
            values: Array2::from_elem((nx, ny), true),
            spacing,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn fluid_cells(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn fluid_fraction(&self) -> f64 {
        self.fluid_cells() as f64 / self.values.len() as f64
    }

    /// Flood-fill connectivity of the fluid region, with optional periodic
    /// wrap per axis.
    pub fn is_connected(&self, periodic: [bool; 2]) -> bool {
        let (nx, ny) = self.dims();
        let total = self.fluid_cells();
        if total == 0 {
            return false;
        }
        let start = self
            .values
            .indexed_iter()
            .find(|(_, &v)| v)
            .map(|((i, j), _)| (i, j))
            .unwrap();
        let mut seen = Array2::from_elem((nx, ny), false);
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0usize;
        while let Some((i, j)) = stack.pop() {
            count += 1;
            let push = |ni: usize, nj: usize, seen: &mut Array2<bool>, stack: &mut Vec<_>| {
                if self.values[(ni, nj)] && !seen[(ni, nj)] {
                    seen[(ni, nj)] = true;
                    stack.push((ni, nj));
                }
            };
            if i + 1 < nx {
                push(i + 1, j, &mut seen, &mut stack);
            } else if periodic[0] {
                push(0, j, &mut seen, &mut stack);
            }
            if i > 0 {
                push(i - 1, j, &mut seen, &mut stack);
            } else if periodic[0] {
                push(nx - 1, j, &mut seen, &mut stack);
            }
            if j + 1 < ny {
                push(i, j + 1, &mut seen, &mut stack);
            } else if periodic[1] {
                push(i, 0, &mut seen, &mut stack);
            }
            if j > 0 {
                push(i, j - 1, &mut seen, &mut stack);
            } else if periodic[1] {
                push(i, ny - 1, &mut seen, &mut stack);
            }
        }
        count == total
    }
}

fn check_edges_on_grid(cell: &RectCell, cells_per_axis: [usize; 2]) -> Result<()> {
    for (k, b) in cell.obstacles.iter().enumerate() {
        for i in 0..2 {
            let h = cell.lengths[i] / cells_per_axis[i] as f64;
            for v in [b.corner[i], b.upper(i)] {
                let q = v / h;
                if (q - q.round()).abs() > ALIGN_TOL * cells_per_axis[i] as f64 {
                    return Err(Error::ResolutionTooCoarse(format!(
                        "obstacle {k} edge at {v} does not land on a grid line (axis {i}, h = {h})"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn rasterize(cell: &RectCell, cells: [usize; 2]) -> Result<Mask> {
    check_edges_on_grid(cell, cells)?;
    let h = [
        cell.lengths[0] / cells[0] as f64,
        cell.lengths[1] / cells[1] as f64,
    ];
    let mut values = Array2::from_elem((cells[0], cells[1]), true);
    for ((i, j), v) in values.indexed_iter_mut() {
        let x = [(i as f64 + 0.5) * h[0], (j as f64 + 0.5) * h[1]];
        if cell.in_obstacle(&x) {
            *v = false;
        }
    }
    Ok(Mask { values, spacing: h })
}

/// Discretize the fluid parts `Y*`, `Z*` and `Y_f` of a cell geometry.
///
/// `resolution` is the number of grid cells per `delta*Z` subcell edge, so
/// the `Y` masks carry `subdivision * resolution` cells per axis and the `Z`
/// mask `resolution` cells per axis.
pub fn build_cell_masks(geom: &CellGeometry, resolution: usize) -> Result<(Mask, Mask, Mask)> {
    if geom.dim() != 2 {
        return Err(Error::InvalidGeometry("masks are 2-D only".into()));
    }
    if resolution < 4 {
        return Err(Error::ResolutionTooCoarse(format!(
            "resolution {resolution} < 4 grid cells per subcell"
        )));
    }
    let sub = [geom.subdivision[0], geom.subdivision[1]];
    let y_cells = [sub[0] * resolution, sub[1] * resolution];

    let mask_y = rasterize(&geom.y_cell, y_cells)?;
    let mask_z = rasterize(&geom.z_cell, [resolution, resolution])?;

    // Y_f: carve the scaled Z obstacles out of Y* as well.  The Z mask tile
    // repeats in every subcell; subcells fully inside Y_s stay solid.
    let mut yf = mask_y.values.clone();
    for ((i, j), v) in yf.indexed_iter_mut() {
        if *v && !mask_z.values[(i % resolution, j % resolution)] {
            *v = false;
        }
    }
    let mask_yf = Mask {
        values: yf,
        spacing: mask_y.spacing,
    };
    Ok((mask_y, mask_z, mask_yf))
}

/// Discretize the doubly perforated fluid domain `Omega_{eps,delta}`.
///
/// The mask value at a grid cell is the product of the periodic
/// characteristic functions of `Y*` at scale `eps` and `Z*` at scale
/// `eps*delta`, evaluated at the cell center.
pub fn build_domain_mask(dom: &DoublePeriodicDomain) -> Result<Mask> {
    if dom.geometry.dim() != 2 {
        return Err(Error::InvalidGeometry("masks are 2-D only".into()));
    }
    if dom.grid_per_subcell < 4 {
        return Err(Error::ResolutionTooCoarse(format!(
            "grid_per_subcell {} < 4",
            dom.grid_per_subcell
        )));
    }
    // Exactness of the rasterization inside one subcell and one macro cell.
    let res = dom.grid_per_subcell;
    check_edges_on_grid(&dom.geometry.z_cell, [res, res])?;
    let sub = [dom.geometry.subdivision[0], dom.geometry.subdivision[1]];
    check_edges_on_grid(&dom.geometry.y_cell, [sub[0] * res, sub[1] * res])?;

    let (nx, ny) = (dom.grid_cells(0), dom.grid_cells(1));
    let h = [dom.spacing(0), dom.spacing(1)];
    let eps = dom.epsilon;
    let eps_delta = eps * dom.delta();
    let ylen = [dom.geometry.y_cell.lengths[0], dom.geometry.y_cell.lengths[1]];
    let zlen = [dom.geometry.z_cell.lengths[0], dom.geometry.z_cell.lengths[1]];

    let mut values = Array2::from_elem((nx, ny), true);
    for ((i, j), v) in values.indexed_iter_mut() {
        let x = [(i as f64 + 0.5) * h[0], (j as f64 + 0.5) * h[1]];
        let y = [
            (x[0] / eps).rem_euclid(ylen[0]),
            (x[1] / eps).rem_euclid(ylen[1]),
        ];
        let z = [
            (x[0] / eps_delta).rem_euclid(zlen[0]),
            (x[1] / eps_delta).rem_euclid(zlen[1]),
        ];
        if dom.geometry.y_cell.in_obstacle(&y) || dom.geometry.z_cell.in_obstacle(&z) {
            *v = false;
        }
    }
    Ok(Mask {
        values,
        spacing: h,
    })
}

/// Report-valued validation of a cell geometry (never errors).
pub fn validate_geometry(geom: &CellGeometry) -> GeometryReport {
    geom.validate()
}
