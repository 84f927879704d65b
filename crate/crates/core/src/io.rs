//! Deterministic artifact input/output.
//!
//! Covers study-configuration ingestion (JSON), CSV and structured-grid field
//! export for external visualization, 0/1 mask export, and JSON run
//! manifests.  All emitters format floats with 17 significant digits
//! (`{:.16e}`), which round-trips every finite `f64` exactly, so identical
//! inputs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{ScalarField, StaggeredGrid, VectorField};
use crate::geometry::Mask;
use crate::study::StudyConfig;
use crate::unfolding::{UnfoldedDelta, UnfoldedEps};

/// Fixed float formatting for every text artifact: 17 significant digits in
/// scientific notation, enough to reproduce the exact bit pattern on parse.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Load a study configuration from a JSON file.  Unknown solver fields fall
/// back to their defaults, so configs stay forward-compatible.
pub fn load_study_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Write a study configuration as pretty-printed JSON.
pub fn save_study_config(path: &Path, cfg: &StudyConfig) -> Result<()> {
    write_json(path, cfg)
}

/// Serialize any report as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// CSV of a cell-centered scalar field: a `# grid` header line carrying the
/// exact grid parameters, then `x,y,value` rows in row-major (j outer)
/// order.
pub fn scalar_csv(field: &ScalarField) -> String {
    let g = &field.grid;
    let mut out = grid_header_comment(g);
    out.push_str("x,y,value\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = g.center(i, j);
            let _ = writeln!(
                out,
                "{},{},{}",
                fmt_float(c[0]),
                fmt_float(c[1]),
                fmt_float(field.data[(i, j)])
            );
        }
    }
    out
}

/// Parse a scalar-field CSV produced by [`scalar_csv`]; exact round-trip.
pub fn parse_scalar_csv(text: &str) -> Result<ScalarField> {
    let mut lines = text.lines();
    let grid = parse_grid_header(lines.next().unwrap_or_default())?;
    match lines.next() {
        Some("x,y,value") => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "expected scalar CSV column header, found {other:?}"
            )))
        }
    }
    let mut field = ScalarField::zeros(&grid);
    let mut rows = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::InvalidConfig(format!("malformed CSV row: {line}")));
        }
        let (i, j) = (rows % grid.nx, rows / grid.nx);
        if j >= grid.ny {
            return Err(Error::InvalidConfig("CSV has more rows than grid cells".into()));
        }
        field.data[(i, j)] = parse_float(cols[2])?;
        rows += 1;
    }
    if rows != grid.nx * grid.ny {
        return Err(Error::InvalidConfig(format!(
            "CSV has {rows} rows for a {}x{} grid",
            grid.nx, grid.ny
        )));
    }
    Ok(field)
}

/// CSV of a staggered vector field interpolated to cell centers:
/// `x,y,ux,uy` rows.  Intended for plotting; the exact face values live in
/// the structured-grid format.
pub fn vector_csv(field: &VectorField) -> String {
    let g = &field.grid;
    let mut out = grid_header_comment(g);
    out.push_str("x,y,ux,uy\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = g.center(i, j);
            let ux = 0.5 * (field.ux(i, j) + field.ux(i + 1, j));
            let uy = 0.5 * (field.vy(i, j) + field.vy(i, j + 1));
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_float(c[0]),
                fmt_float(c[1]),
                fmt_float(ux),
                fmt_float(uy)
            );
        }
    }
    out
}

/// CSV of a fluid mask as 0/1 integers, one row per `j`, matching the
/// portable grey-map reading order.
pub fn mask_csv(mask: &Mask) -> String {
    let (nx, ny) = mask.values.dim();
    let mut out = String::new();
    let _ = writeln!(out, "# mask {nx} {ny} {} {}", fmt_float(mask.spacing[0]), fmt_float(mask.spacing[1]));
    for j in 0..ny {
        let row: Vec<&str> = (0..nx)
            .map(|i| if mask.values[(i, j)] { "1" } else { "0" })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Structured-grid file: a plain-text header describing the grid, then one
/// flat array block per component (`scalar`, or `u` and `v` at faces).
pub fn grid_file_scalar(name: &str, field: &ScalarField) -> String {
    let mut out = grid_file_header(&field.grid);
    push_block(&mut out, name, field.data.iter().copied());
    out
}

/// Structured-grid export of a staggered vector field with the exact face
/// data: a `u` block of `(nx+1 or nx) * ny` values and a `v` block of
/// `nx * (ny+1 or ny)` values, row-major with `i` fastest.
pub fn grid_file_vector(field: &VectorField) -> String {
    let g = &field.grid;
    let mut out = grid_file_header(g);
    push_block(
        &mut out,
        "u",
        (0..g.ny).flat_map(|j| (0..g.u_cols()).map(move |i| (i, j))).map(|(i, j)| field.u[(i, j)]),
    );
    push_block(
        &mut out,
        "v",
        (0..g.v_rows()).flat_map(|j| (0..g.nx).map(move |i| (i, j))).map(|(i, j)| field.v[(i, j)]),
    );
    out
}

/// Parse a structured-grid vector file written by [`grid_file_vector`].
pub fn parse_grid_file_vector(text: &str) -> Result<VectorField> {
    let mut lines = text.lines();
    let grid = parse_grid_header(lines.next().unwrap_or_default())?;
    let mut field = VectorField::zeros(&grid);
    let u_len = grid.u_cols() * grid.ny;
    let v_len = grid.nx * grid.v_rows();
    let u_vals = parse_block(&mut lines, "u", u_len)?;
    let v_vals = parse_block(&mut lines, "v", v_len)?;
    for j in 0..grid.ny {
        for i in 0..grid.u_cols() {
            field.u[(i, j)] = u_vals[j * grid.u_cols() + i];
        }
    }
    for j in 0..grid.v_rows() {
        for i in 0..grid.nx {
            field.v[(i, j)] = v_vals[j * grid.nx + i];
        }
    }
    Ok(field)
}

/// CSV of a singly unfolded field: columns `k1,k2,y1,y2,value`, one row per
/// macro cell `(k1, k2)` and `y`-sample (cell centers of the `Y` grid).
pub fn unfolded_eps_csv(unf: &UnfoldedEps) -> String {
    let mut out = String::from("k1,k2,y1,y2,value\n");
    let hy = [
        unf.y_lengths[0] / unf.y_res[0] as f64,
        unf.y_lengths[1] / unf.y_res[1] as f64,
    ];
    for a in 0..unf.macro_cells[0] {
        for b in 0..unf.macro_cells[1] {
            for q in 0..unf.y_res[1] {
                for p in 0..unf.y_res[0] {
                    let _ = writeln!(
                        out,
                        "{a},{b},{},{},{}",
                        fmt_float((p as f64 + 0.5) * hy[0]),
                        fmt_float((q as f64 + 0.5) * hy[1]),
                        fmt_float(unf.data[(a, b, p, q)])
                    );
                }
            }
        }
    }
    out
}

/// CSV of a doubly unfolded field: columns `k1,k2,y1,y2,z1,z2,value`, with
/// `y` the center of the `delta`-subcell and `z` the sample inside the `Z`
/// cell.  `y_lengths` are the side lengths of the `Y` cell (the unfolded
/// tensor itself only stores subcell indices).
pub fn unfolded_delta_csv(unf: &UnfoldedDelta, y_lengths: [f64; 2]) -> String {
    let mut out = String::from("k1,k2,y1,y2,z1,z2,value\n");
    let sub = unf.subdivision;
    let hz = [
        unf.z_lengths[0] / unf.z_res as f64,
        unf.z_lengths[1] / unf.z_res as f64,
    ];
    for a in 0..unf.macro_cells[0] {
        for b in 0..unf.macro_cells[1] {
            for t in 0..sub[1] {
                for s in 0..sub[0] {
                    let y1 = (s as f64 + 0.5) / sub[0] as f64 * y_lengths[0];
                    let y2 = (t as f64 + 0.5) / sub[1] as f64 * y_lengths[1];
                    for zq in 0..unf.z_res {
                        for zp in 0..unf.z_res {
                            let _ = writeln!(
                                out,
                                "{a},{b},{},{},{},{},{}",
                                fmt_float(y1),
                                fmt_float(y2),
                                fmt_float((zp as f64 + 0.5) * hz[0]),
                                fmt_float((zq as f64 + 0.5) * hz[1]),
                                fmt_float(unf.data[[a, b, s, t, zp, zq]])
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reproducibility manifest written next to every run artifact: the
/// subcommand, the geometry content hash, the seed, the full configuration,
/// and the headline results.  Serialization order is fixed by the struct, so
/// identical runs emit byte-identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub geometry_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new<C: Serialize, R: Serialize>(
        command: &str,
        geometry_hash: String,
        seed: u64,
        config: &C,
        results: &R,
    ) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            geometry_hash,
            seed,
            config: serde_json::to_value(config)
                .map_err(|e| Error::InvalidConfig(format!("manifest config: {e}")))?,
            results: serde_json::to_value(results)
                .map_err(|e| Error::InvalidConfig(format!("manifest results: {e}")))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn grid_header_comment(g: &StaggeredGrid) -> String {
    format!(
        "# grid {} {} {} {} {} {}\n",
        g.nx,
        g.ny,
        fmt_float(g.hx),
        fmt_float(g.hy),
        g.periodic[0] as u8,
        g.periodic[1] as u8
    )
}

fn grid_file_header(g: &StaggeredGrid) -> String {
    grid_header_comment(g)
}

fn parse_grid_header(line: &str) -> Result<StaggeredGrid> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != "#" || parts[1] != "grid" {
        return Err(Error::InvalidConfig(format!("bad grid header: {line}")));
    }
    let nx: usize = parts[2]
        .parse()
        .map_err(|_| Error::InvalidConfig("bad nx in grid header".into()))?;
    let ny: usize = parts[3]
        .parse()
        .map_err(|_| Error::InvalidConfig("bad ny in grid header".into()))?;
    let hx = parse_float(parts[4])?;
    let hy = parse_float(parts[5])?;
    let px = parts[6] == "1";
    let py = parts[7] == "1";
    StaggeredGrid::new(nx, ny, hx, hy, [px, py])
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad float: {s}")))
}

fn push_block(out: &mut String, name: &str, values: impl Iterator<Item = f64>) {
    let vals: Vec<String> = values.map(fmt_float).collect();
    let _ = writeln!(out, "block {name} {}", vals.len());
    for v in vals {
        out.push_str(&v);
        out.push('\n');
    }
}

fn parse_block<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    name: &str,
    expect: usize,
) -> Result<Vec<f64>> {
    let head = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("missing block {name}")))?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "block" || parts[1] != name {
        return Err(Error::InvalidConfig(format!("bad block header: {head}")));
    }
    let n: usize = parts[2]
        .parse()
        .map_err(|_| Error::InvalidConfig("bad block length".into()))?;
    if n != expect {
        return Err(Error::InvalidConfig(format!(
            "block {name} has {n} values, expected {expect}"
        )));
    }
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig(format!("block {name} truncated")))?;
        vals.push(parse_float(line)?);
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{CellConfig, CellSolver, EffectiveLaw};
    use crate::darcy::DarcyConfig;
    use crate::geometry::{BoxSpec, CellGeometry, RectCell};
    use crate::saddle::SolverConfig;
    use crate::study::Forcing;
    use ndarray::Array2;

    fn demo_geometry() -> CellGeometry {
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

    fn demo_config() -> StudyConfig {
        StudyConfig {
            omega: [1.0, 1.0],
            geometry: demo_geometry(),
            epsilon0: 0.5,
            levels: 2,
            grid_per_subcell: 4,
            mu: 1.0,
            g: 0.1,
            forcing: Forcing::Vortex { amplitude: 2.0 },
            fine_solver: SolverConfig::default(),
            cell: CellConfig::default(),
            darcy: DarcyConfig::default(),
            macro_resolution: 16,
            compute_poincare: false,
            seed: 42,
        }
    }

    #[test]
    fn a_scalar_csv_round_trips_exactly() {
        let grid = StaggeredGrid::new(5, 3, 0.2, 1.0 / 3.0, [false, false]).unwrap();
        let field = ScalarField::from_fn(&grid, |x, y| (37.0 * x).sin() * (13.0 * y).cos() + 1e-13);
        let text = scalar_csv(&field);
        let back = parse_scalar_csv(&text).unwrap();
        assert_eq!(back.grid.nx, field.grid.nx);
        assert_eq!(back.grid.ny, field.grid.ny);
        assert_eq!(back.grid.hx.to_bits(), field.grid.hx.to_bits());
        for (a, b) in field.data.iter().zip(back.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn a_vector_grid_file_round_trips_exactly() {
        let grid = StaggeredGrid::new(4, 6, 0.25, 1.0 / 6.0, [false, false]).unwrap();
        let field = VectorField::from_fn(
            &grid,
            |x, y| (x * 7.1).cos() + y,
            |x, y| (y * 3.3).sin() - x,
        );
        let text = grid_file_vector(&field);
        let back = parse_grid_file_vector(&text).unwrap();
        for (a, b) in field.u.iter().zip(back.u.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in field.v.iter().zip(back.v.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn identical_inputs_emit_byte_identical_artifacts() {
        let grid = StaggeredGrid::new(6, 6, 1.0 / 6.0, 1.0 / 6.0, [false, false]).unwrap();
        let field = ScalarField::from_fn(&grid, |x, y| x * y + (x * 9.0).sin());
        assert_eq!(scalar_csv(&field), scalar_csv(&field.clone()));
        let cfg = demo_config();
        let a = serde_json::to_string_pretty(&cfg).unwrap();
        let b = serde_json::to_string_pretty(&demo_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn a_study_config_survives_the_json_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.json");
        let cfg = demo_config();
        save_study_config(&path, &cfg).unwrap();
        let back = load_study_config(&path).unwrap();
        assert_eq!(back.levels, cfg.levels);
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.g.to_bits(), cfg.g.to_bits());
        assert_eq!(
            back.geometry.content_hash(),
            cfg.geometry.content_hash()
        );
        match back.forcing {
            Forcing::Vortex { amplitude } => assert_eq!(amplitude, 2.0),
            other => panic!("forcing changed under round-trip: {other:?}"),
        }
    }

    #[test]
    fn the_manifest_hash_matches_the_effective_law_header() {
        let geom = demo_geometry();
        let cfg = CellConfig {
            resolution: 4,
            ..CellConfig::default()
        };
        let solver = CellSolver::new(&geom, &cfg).unwrap();
        let law = EffectiveLaw::new(&solver);
        let manifest = RunManifest::new(
            "cell-linear",
            geom.content_hash(),
            42,
            &cfg,
            &serde_json::json!({ "status": "ok" }),
        )
        .unwrap();
        assert_eq!(manifest.geometry_hash, law.geometry_hash);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["geometry_hash"], serde_json::json!(law.geometry_hash));
    }

    #[test]
    fn a_mask_exports_as_zeros_and_ones() {
        let mut values = Array2::from_elem((3, 2), true);
        values[(1, 0)] = false;
        let mask = Mask {
            values,
            spacing: [0.5, 0.5],
        };
        let text = mask_csv(&mask);
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# mask 3 2"));
        assert_eq!(lines.next().unwrap(), "1,0,1");
        assert_eq!(lines.next().unwrap(), "1,1,1");
    }

    #[test]
    fn unfolded_fields_export_with_cell_local_coordinates() {
        use crate::fine::fine_grid;
        use crate::geometry::DoublePeriodicDomain;
        use crate::unfolding::{unfold_both, unfold_eps};
        let dom =
            DoublePeriodicDomain::new(vec![1.0, 1.0], 0.5, demo_geometry(), 2).unwrap();
        let grid = fine_grid(&dom).unwrap();
        let phi = ScalarField::from_fn(&grid, |x, y| x + 10.0 * y);

        let ue = unfold_eps(&phi, &dom).unwrap();
        let text = unfolded_eps_csv(&ue);
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "k1,k2,y1,y2,value");
        let expect = ue.macro_cells[0] * ue.macro_cells[1] * ue.y_res[0] * ue.y_res[1];
        assert_eq!(rows.len(), expect + 1);
        // the first data row is macro cell (0,0), first y sample: the value
        // is the field at the domain's first grid cell
        let first: Vec<&str> = rows[1].split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(parse_float(first[4]).unwrap().to_bits(), phi.data[(0, 0)].to_bits());

        let ud = unfold_both(&phi, &dom).unwrap();
        let text2 = unfolded_delta_csv(&ud, [1.0, 1.0]);
        let rows2 = text2.lines().count();
        let expect2 = ud.macro_cells[0]
            * ud.macro_cells[1]
            * ud.subdivision[0]
            * ud.subdivision[1]
            * ud.z_res
            * ud.z_res;
        assert_eq!(rows2, expect2 + 1);
    }

    #[test]
    fn malformed_artifacts_are_rejected() {
        assert!(parse_scalar_csv("no header\n").is_err());
        assert!(parse_grid_header("# grid 4 4 0.25").is_err());
        let grid = StaggeredGrid::new(3, 3, 1.0 / 3.0, 1.0 / 3.0, [false, false]).unwrap();
        let field = ScalarField::from_fn(&grid, |_, _| 1.0);
        let mut text = scalar_csv(&field);
        text.push_str("0,0,1\n");
        assert!(parse_scalar_csv(&text).is_err());
    }
}
