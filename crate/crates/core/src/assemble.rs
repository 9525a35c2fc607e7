//! Fine-scale realization of an optimized macro design: tile every macro
//! cell with the nearest database microcell, check the cost-scaling
//! identity and the bridge compatibility across interior faces, and export
//! the voxel structure as PGM, VTK or STL.

use crate::cellopt::CellStatus;
use crate::dbase::Database;
use crate::error::{Error, Result};
use crate::grid::NodalField;
use crate::macroopt::DesignFile;
use crate::phasefield::{bridge_masks, modica_mortola, volume_term, BridgeSpec, CostWeights};
use crate::spline::Chart;
use crate::tensor::ElasticityTensor;
use std::io::Write;
use std::path::Path;

/// A realized two-scale voxel structure.
#[derive(Debug, Clone)]
pub struct TwoScaleStructure {
    pub dim: usize,
    /// Macro cell edge length (= H).
    pub epsilon: f64,
    /// Micro resolution per cell.
    pub micro_n: usize,
    /// Macro cell indices, same order as the design.
    pub cells: Vec<Vec<i64>>,
    /// Database record chosen per cell.
    pub record_ids: Vec<usize>,
    /// Per-cell microcell fields.
    pub fields: Vec<NodalField>,
    /// Substitution error per cell: distance between the requested (ν, E)
    /// and the achieved values of the chosen record.
    pub substitution_error: Vec<f64>,
    /// Lower corner of the bounding box in cell indices.
    pub cell_lo: [i64; 3],
    /// Bounding box extent in cells.
    pub extent: [usize; 3],
}

impl TwoScaleStructure {
    pub fn voxel_counts(&self) -> [usize; 3] {
        let mut counts = [1; 3];
        for k in 0..self.dim {
            counts[k] = self.extent[k] * self.micro_n;
        }
        counts
    }

    fn cell_slot(&self, index: &[i64]) -> Option<usize> {
        self.cells
            .iter()
            .position(|c| c.as_slice() == index)
    }

    /// Voxel occupancy over the bounding box, x-major layout
    /// idx = (ix · ny + iy) · nz + iz; voxels outside the domain are empty.
    pub fn occupancy(&self) -> Vec<bool> {
        let counts = self.voxel_counts();
        let n = self.micro_n;
        let mut occ = vec![false; counts[0] * counts[1] * counts[2]];
        for (slot, cell) in self.cells.iter().enumerate() {
            let field = &self.fields[slot];
            let grid = field.grid;
            for micro in 0..grid.cell_count() {
                let mc = grid.cell_coords(micro);
                // Multilinear value at the voxel center.
                let mut center = 0.0;
                for (a, node) in grid.cell_nodes(micro).into_iter().enumerate() {
                    let _ = a;
                    center += field.values[node];
                }
                center /= grid.nodes_per_cell() as f64;
                if center > 0.0 {
                    let mut g = [0usize; 3];
                    for k in 0..self.dim {
                        g[k] = (cell[k] - self.cell_lo[k]) as usize * n + mc[k];
                    }
                    occ[(g[0] * counts[1] + g[1]) * counts[2] + g[2]] = true;
                }
            }
        }
        occ
    }
}

/// Picks the microcell for every macro cell: the database record nearest in
/// scale-normalized (ν, E) to the chart value at the cell's design point.
pub fn realize(
    design: &DesignFile,
    db: &Database,
    chart: &Chart,
    epsilon: f64,
) -> Result<TwoScaleStructure> {
    if db.manifest.samples.is_empty() {
        return Err(Error::domain("database is empty"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let dim = db.manifest.dim;
    // Record coordinates: achieved values where available, targets for
    // infeasible records.
    let coords: Vec<(f64, f64)> = db
        .manifest
        .samples
        .iter()
        .map(|record| {
            if record.status == CellStatus::Infeasible {
                Ok((record.target_nu, record.target_e))
            } else {
                let tensor = ElasticityTensor::from_upper_triangle(dim, &record.voigt)?;
                tensor.isotropic_nu_e()
            }
        })
        .collect::<Result<_>>()?;
    let nu_span = coords
        .iter()
        .map(|c| c.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let e_span = coords
        .iter()
        .map(|c| c.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let nu_scale = (nu_span.1 - nu_span.0).max(1e-12);
    let e_scale = (e_span.1 - e_span.0).max(1e-12);

    let psi = chart.psi();
    let mut record_ids = Vec::with_capacity(design.cells.len());
    let mut fields = Vec::with_capacity(design.cells.len());
    let mut substitution_error = Vec::with_capacity(design.cells.len());
    for (cell, q) in design.cells.iter().zip(&design.q) {
        let (p, _) = psi.eval(*q)?;
        let nearest = coords
            .iter()
            .enumerate()
            .map(|(id, c)| {
                let dn = (c.0 - p[0]) / nu_scale;
                let de = (c.1 - p[1]) / e_scale;
                (id, (dn * dn + de * de).sqrt())
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"))
            .expect("nonempty database");
        let record = &db.manifest.samples[nearest.0];
        if record.status != CellStatus::Converged {
            return Err(Error::domain(format!(
                "cell {cell:?}: nearest record {} is {:?}",
                record.id, record.status
            )));
        }
        record_ids.push(nearest.0);
        fields.push(db.fields[nearest.0].clone());
        substitution_error.push(nearest.1);
    }

    let mut cell_lo = [i64::MAX; 3];
    let mut cell_hi = [i64::MIN; 3];
    for cell in &design.cells {
        for k in 0..dim {
            cell_lo[k] = cell_lo[k].min(cell[k]);
            cell_hi[k] = cell_hi[k].max(cell[k]);
        }
    }
    let mut extent = [1usize; 3];
    for k in 0..dim {
        extent[k] = (cell_hi[k] - cell_lo[k] + 1) as usize;
    }
    for k in dim..3 {
        cell_lo[k] = 0;
    }
    Ok(TwoScaleStructure {
        dim,
        epsilon,
        micro_n: db.manifest.n,
        cells: design.cells.clone(),
        record_ids,
        fields,
        substitution_error,
        cell_lo,
        extent,
    })
}

/// Outcome of the cost-scaling identity check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostIdentityReport {
    /// Σ_α ε^d · cost_j(α) from the database records.
    pub lhs: f64,
    /// c_V ∫ χ + ĉ_P ε |Dχ| recomputed from the tiled fields.
    pub rhs: f64,
    pub volume_integral: f64,
    pub perimeter_integral: f64,
    pub absolute_mismatch: f64,
    pub relative_mismatch: f64,
    /// Sharp-interface perimeter (voxel face count × face area), reported
    /// for information.
    pub sharp_perimeter: f64,
}

/// Verifies Σ ε^d j = c_V ∫ χ + ĉ_P ε |Dχ| over the realized structure.
pub fn cost_identity_check(
    structure: &TwoScaleStructure,
    db: &Database,
    weights: &CostWeights,
) -> Result<CostIdentityReport> {
    let d = structure.dim as i32;
    let eps = structure.epsilon;
    let eps_d = eps.powi(d);
    let grid = db.grid()?;
    let sigma = db.manifest.sigma;
    let mut lhs = 0.0;
    let mut volume_integral = 0.0;
    let mut perimeter_sum = 0.0;
    for (slot, &record_id) in structure.record_ids.iter().enumerate() {
        let record = &db.manifest.samples[record_id];
        lhs += eps_d * record.cost_j;
        let field = &structure.fields[slot];
        volume_integral += eps_d * volume_term(&grid, field);
        perimeter_sum += eps.powi(d - 1) * modica_mortola(&grid, field, sigma);
    }
    let rhs = weights.c_v * volume_integral + weights.c_p_hat * eps * perimeter_sum;
    let absolute = (lhs - rhs).abs();
    let relative = absolute / lhs.abs().max(1e-300);

    // Sharp perimeter for information: exposed voxel faces.
    let occ = structure.occupancy();
    let counts = structure.voxel_counts();
    let voxel = eps / structure.micro_n as f64;
    let face_area = voxel.powi(d - 1);
    let mut faces = 0usize;
    let at = |ix: i64, iy: i64, iz: i64| -> bool {
        if ix < 0 || iy < 0 || iz < 0 {
            return false;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= counts[0] || iy >= counts[1] || iz >= counts[2] {
            return false;
        }
        occ[(ix * counts[1] + iy) * counts[2] + iz]
    };
    for ix in 0..counts[0] as i64 {
        for iy in 0..counts[1] as i64 {
            for iz in 0..counts[2] as i64 {
                if !at(ix, iy, iz) {
                    continue;
                }
                let neighbors: &[[i64; 3]] = if structure.dim == 2 {
                    &[[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
                } else {
                    &[
                        [1, 0, 0],
                        [-1, 0, 0],
                        [0, 1, 0],
                        [0, -1, 0],
                        [0, 0, 1],
                        [0, 0, -1],
                    ]
                };
                for nb in neighbors {
                    if !at(ix + nb[0], iy + nb[1], iz + nb[2]) {
                        faces += 1;
                    }
                }
            }
        }
    }
    Ok(CostIdentityReport {
        lhs,
        rhs,
        volume_integral,
        perimeter_integral: perimeter_sum,
        absolute_mismatch: absolute,
        relative_mismatch: relative,
        sharp_perimeter: faces as f64 * face_area,
    })
}

/// Bridge-compatibility scan across interior faces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BridgeScanReport {
    pub faces_checked: usize,
    pub nodes_checked: usize,
    pub mismatches: usize,
}

/// Compares thresholded traces of adjacent cells on every shared face at
/// the bridge-mask nodes; exact nodal agreement is required.
pub fn bridge_compatibility_scan(
    structure: &TwoScaleStructure,
    spec: &BridgeSpec,
) -> Result<BridgeScanReport> {
    let grid = structure
        .fields
        .first()
        .map(|f| f.grid)
        .ok_or_else(|| Error::domain("structure has no cells"))?;
    let masks = bridge_masks(&grid, spec)?;
    let n = grid.n;
    let mut faces_checked = 0;
    let mut nodes_checked = 0;
    let mut mismatches = 0;
    for (slot, cell) in structure.cells.iter().enumerate() {
        for axis in 0..structure.dim {
            let mut neighbor = cell.clone();
            neighbor[axis] += 1;
            let Some(other) = structure.cell_slot(&neighbor) else {
                continue;
            };
            faces_checked += 1;
            let here = &structure.fields[slot];
            let there = &structure.fields[other];
            // Nodes on the shared face: coordinate n on this side, 0 on the
            // neighbor side.
            for node in 0..grid.node_count() {
                let coords = grid.node_coords(node);
                if coords[axis] != n {
                    continue;
                }
                if !(masks.hard_flags[node] || masks.soft_flags[node]) {
                    continue;
                }
                let mut mirror = coords;
                mirror[axis] = 0;
                let mirror_node = grid.node_index(&mirror[..structure.dim]);
                nodes_checked += 1;
                let a = here.values[node] > 0.0;
                let b = there.values[mirror_node] > 0.0;
                if a != b {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(BridgeScanReport {
        faces_checked,
        nodes_checked,
        mismatches,
    })
}

/// Writes the 2D occupancy as ASCII PGM (P2), 255 = hard, 0 = soft, rows
/// top to bottom.
pub fn export_pgm(structure: &TwoScaleStructure, path: &Path) -> Result<()> {
    if structure.dim != 2 {
        return Err(Error::format("pgm export requires dim = 2"));
    }
    let occ = structure.occupancy();
    let counts = structure.voxel_counts();
    let (width, height) = (counts[0], counts[1]);
    let mut text = format!("P2\n{width} {height}\n255\n");
    for row in (0..height).rev() {
        let mut line = String::with_capacity(width * 4);
        for col in 0..width {
            if col > 0 {
                line.push(' ');
            }
            let value = if occ[col * counts[1] + row] { 255 } else { 0 };
            line.push_str(&value.to_string());
        }
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text.as_bytes())?;
    Ok(())
}

/// Reads an ASCII PGM back into an occupancy bitmap (x-major layout).
pub fn import_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let text = std::fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    if tokens.next() != Some("P2") {
        return Err(Error::format("not an ASCII PGM file"));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::format(format!("pgm missing {what}")))?
            .parse()
            .map_err(|e| Error::format(format!("pgm bad {what}: {e}")))
    };
    let width = next_usize("width")?;
    let height = next_usize("height")?;
    let _max = next_usize("maxval")?;
    let mut occ = vec![false; width * height];
    for row_from_top in 0..height {
        let row = height - 1 - row_from_top;
        for col in 0..width {
            let value = next_usize("pixel")?;
            occ[col * height + row] = value > 127;
        }
    }
    Ok((width, height, occ))
}

/// Writes the occupancy as legacy ASCII VTK structured points with a 0/1
/// scalar field `chi`.
pub fn export_vtk(structure: &TwoScaleStructure, path: &Path) -> Result<()> {
    let occ = structure.occupancy();
    let counts = structure.voxel_counts();
    let spacing = structure.epsilon / structure.micro_n as f64;
    let mut text = String::new();
    text.push_str("# vtk DataFile Version 3.0\n");
    text.push_str("voxel occupancy\nASCII\nDATASET STRUCTURED_POINTS\n");
    text.push_str(&format!(
        "DIMENSIONS {} {} {}\n",
        counts[0], counts[1], counts[2]
    ));
    text.push_str(&format!("SPACING {spacing} {spacing} {spacing}\n"));
    text.push_str(&format!(
        "ORIGIN {} {} {}\n",
        structure.cell_lo[0] as f64 * structure.epsilon,
        structure.cell_lo[1] as f64 * structure.epsilon,
        structure.cell_lo[2] as f64 * structure.epsilon
    ));
    text.push_str(&format!(
        "POINT_DATA {}\nSCALARS chi int 1\nLOOKUP_TABLE default\n",
        counts[0] * counts[1] * counts[2]
    ));
    // VTK structured points run x fastest.
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            let mut line = String::new();
            for ix in 0..counts[0] {
                if ix > 0 {
                    line.push(' ');
                }
                let value = occ[(ix * counts[1] + iy) * counts[2] + iz];
                line.push(if value { '1' } else { '0' });
            }
            text.push_str(&line);
            text.push('\n');
        }
    }
    std::fs::write(path, text.as_bytes())?;
    Ok(())
}

/// Reads the `chi` field of a legacy VTK structured-points file back into
/// an occupancy bitmap (x-major layout).
pub fn import_vtk(path: &Path) -> Result<([usize; 3], Vec<bool>)> {
    let text = std::fs::read_to_string(path)?;
    let mut dims = None;
    let mut data = Vec::new();
    let mut in_data = false;
    for line in text.lines() {
        if line.starts_with("DIMENSIONS") {
            let parts: Vec<usize> = line
                .split_whitespace()
                .skip(1)
                .map(|t| t.parse().map_err(|e| Error::format(format!("vtk: {e}"))))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::format("vtk DIMENSIONS needs three entries"));
            }
            dims = Some([parts[0], parts[1], parts[2]]);
        } else if line.starts_with("LOOKUP_TABLE") {
            in_data = true;
        } else if in_data {
            for token in line.split_whitespace() {
                let value: i64 = token
                    .parse()
                    .map_err(|e| Error::format(format!("vtk data: {e}")))?;
                data.push(value != 0);
            }
        }
    }
    let dims = dims.ok_or_else(|| Error::format("vtk missing DIMENSIONS"))?;
    if data.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::format(format!(
            "vtk data length {} does not match dimensions {:?}",
            data.len(),
            dims
        )));
    }
    // Convert x-fastest to x-major.
    let mut occ = vec![false; data.len()];
    let mut cursor = 0;
    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                occ[(ix * dims[1] + iy) * dims[2] + iz] = data[cursor];
                cursor += 1;
            }
        }
    }
    Ok((dims, occ))
}

/// Writes a binary STL of the exposed voxel faces of the hard phase.
pub fn export_stl(structure: &TwoScaleStructure, path: &Path) -> Result<()> {
    if structure.dim != 3 {
        return Err(Error::format("stl export requires dim = 3"));
    }
    let occ = structure.occupancy();
    let counts = structure.voxel_counts();
    let voxel = structure.epsilon / structure.micro_n as f64;
    let origin = [
        structure.cell_lo[0] as f64 * structure.epsilon,
        structure.cell_lo[1] as f64 * structure.epsilon,
        structure.cell_lo[2] as f64 * structure.epsilon,
    ];
    let at = |ix: i64, iy: i64, iz: i64| -> bool {
        if ix < 0 || iy < 0 || iz < 0 {
            return false;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= counts[0] || iy >= counts[1] || iz >= counts[2] {
            return false;
        }
        occ[(ix * counts[1] + iy) * counts[2] + iz]
    };

    // Two triangles per exposed face, outward normals, counter-clockwise
    // winding seen from outside.
    let mut triangles: Vec<([f64; 3], [[f64; 3]; 3])> = Vec::new();
    let idx = |k: usize| -> [i64; 3] {
        let mut v = [0i64; 3];
        v[k] = 1;
        v
    };
    for ix in 0..counts[0] as i64 {
        for iy in 0..counts[1] as i64 {
            for iz in 0..counts[2] as i64 {
                if !at(ix, iy, iz) {
                    continue;
                }
                let base = [ix, iy, iz];
                for axis in 0..3usize {
                    for dir in [-1i64, 1] {
                        let step = idx(axis);
                        let nb = [
                            ix + dir * step[0],
                            iy + dir * step[1],
                            iz + dir * step[2],
                        ];
                        if at(nb[0], nb[1], nb[2]) {
                            continue;
                        }
                        // Corners of the exposed face.
                        let (t1, t2) = ((axis + 1) % 3, (axis + 2) % 3);
                        let mut p0 = base;
                        if dir == 1 {
                            p0[axis] += 1;
                        }
                        let corner = |a: i64, b: i64| -> [f64; 3] {
                            let mut v = p0;
                            v[t1] += a;
                            v[t2] += b;
                            [
                                origin[0] + v[0] as f64 * voxel,
                                origin[1] + v[1] as f64 * voxel,
                                origin[2] + v[2] as f64 * voxel,
                            ]
                        };
                        let mut normal = [0.0; 3];
                        normal[axis] = dir as f64;
                        let (c00, c10, c11, c01) =
                            (corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1));
                        if dir == 1 {
                            triangles.push((normal, [c00, c10, c11]));
                            triangles.push((normal, [c00, c11, c01]));
                        } else {
                            triangles.push((normal, [c00, c11, c10]));
                            triangles.push((normal, [c00, c01, c11]));
                        }
                    }
                }
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    let mut header = [0u8; 80];
    let tag = b"voxel structure";
    header[..tag.len()].copy_from_slice(tag);
    file.write_all(&header)?;
    file.write_all(&(triangles.len() as u32).to_le_bytes())?;
    for (normal, verts) in &triangles {
        for v in normal {
            file.write_all(&(*v as f32).to_le_bytes())?;
        }
        for vert in verts {
            for v in vert {
                file.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        file.write_all(&0u16.to_le_bytes())?;
    }
    Ok(())
}

/// Triangle count of a binary STL file.
pub fn stl_triangle_count(path: &Path) -> Result<u32> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 84 {
        return Err(Error::format("stl file too short"));
    }
    Ok(u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbase::{
        BaseJson, BridgeJson, Manifest, SampleRecord, WeightsJson,
    };
    use crate::grid::{build_grid, CellGrid};
    use crate::homogenize::{effective_tensor_of, MicroMaterial};
    use crate::macroopt::DesignFile;
    use crate::phasefield::{BridgeVariant, CostWeights};
    use crate::spline::{fit_psi, Anchor, Chart, CubicBasis, ResampledCosts};
    use crate::tensor::iso_from_nu_e;

    fn micro_db(grid: CellGrid, values: &[f64]) -> Database {
        // Hand-built database: one converged record per given constant
        // plateau value, fields respecting midface bridges.
        let base = iso_from_nu_e(0.25, 10.0, 2).unwrap();
        let mat = MicroMaterial::new(base, 1e-2).unwrap();
        let spec = BridgeSpec {
            variant: BridgeVariant::Midfaces,
            width: 0.25,
            sigma: 2.0 * grid.h(),
        };
        let masks = bridge_masks(&grid, &spec).unwrap();
        let weights = CostWeights::new(1.0, 0.05, 1e-3).unwrap();
        let mut samples = Vec::new();
        let mut fields = Vec::new();
        for (id, &plateau) in values.iter().enumerate() {
            let mut v = NodalField::constant(grid, 1, plateau);
            masks.apply(&mut v);
            let c = effective_tensor_of(grid, &v, &mat, 1e-10).unwrap();
            let (nu, e) = c.isotropic_nu_e().unwrap();
            let volume = volume_term(&grid, &v);
            let mm = modica_mortola(&grid, &v, spec.sigma);
            samples.push(SampleRecord {
                id,
                target_nu: nu,
                target_e: e,
                voigt: c.upper_triangle(),
                volume,
                mm_energy: mm,
                cost_j: weights.c_v * volume + weights.c_p_hat * mm,
                status: CellStatus::Converged,
                seed: id as u64,
                field: format!("fields/{id}.f64"),
            });
            fields.push(v);
        }
        Database {
            manifest: Manifest {
                format_version: crate::FORMAT_VERSION,
                dim: 2,
                n: grid.n,
                sigma: spec.sigma,
                delta: 1e-2,
                base: BaseJson { nu: 0.25, e: 10.0 },
                weights: WeightsJson {
                    c_v: weights.c_v,
                    c_p: weights.c_p,
                    c_p_hat: weights.c_p_hat,
                },
                bridge: BridgeJson {
                    variant: spec.variant,
                    width: spec.width,
                },
                samples,
                repairs: None,
            },
            fields,
        }
    }

    fn chart_over(points: &[(f64, f64)]) -> Chart {
        let tau = 0.25;
        let lo_nu = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi_nu = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let lo_e = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi_e = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let anchors: Vec<Anchor> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .into_iter()
            .map(|q| Anchor {
                q,
                p: [
                    lo_nu + (hi_nu - lo_nu).max(1e-5) * q[0],
                    lo_e + (hi_e - lo_e).max(1e-5) * q[1],
                ],
            })
            .collect();
        let psi = fit_psi(&anchors, tau).unwrap();
        let m = CubicBasis::new(tau).unwrap().len();
        let flat = ResampledCosts {
            values: vec![0.5; m * m],
            feasible: vec![true; m * m],
        };
        Chart::assemble(tau, anchors, &psi, &flat, &flat, 1.0, 1e-3).unwrap()
    }

    fn design_for(cells: Vec<Vec<i64>>, q: Vec<[f64; 2]>) -> DesignFile {
        DesignFile {
            format_version: crate::FORMAT_VERSION,
            problem_hash: "test".into(),
            dim: 2,
            h: 0.5,
            c_p_hat: 1e-3,
            nu_e: vec![[0.0, 0.0]; q.len()],
            cost: vec![0.0; q.len()],
            compliance: 0.0,
            tracking: 0.0,
            cost_integral: 0.0,
            interface_integral: 0.0,
            constraint_norm: 0.0,
            converged: true,
            history: vec![],
            cells,
            q,
        }
    }

    #[test]
    fn single_cell_uses_matching_record() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.9, -0.2]);
        let (nu, e) = db.achieved_nu_e(0).unwrap();
        let chart = chart_over(&[(nu, e), db.achieved_nu_e(1).unwrap()]);
        // q = (0, 0) maps to the low corner; pick the design q so Ψ(q)
        // lands exactly on record 0's coordinates.
        let psi = chart.psi();
        let mut best = ([0.0, 0.0], f64::INFINITY);
        for i in 0..=32 {
            for j in 0..=32 {
                let q = [i as f64 / 32.0, j as f64 / 32.0];
                let (p, _) = psi.eval(q).unwrap();
                let d = (p[0] - nu).abs() + (p[1] - e).abs();
                if d < best.1 {
                    best = (q, d);
                }
            }
        }
        let design = design_for(vec![vec![0, 0]], vec![best.0]);
        let structure = realize(&design, &db, &chart, 0.5).unwrap();
        assert_eq!(structure.record_ids, vec![0]);
        assert_eq!(structure.fields[0].values, db.fields[0].values);
    }

    #[test]
    fn uniform_design_tiles_periodically() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.7]);
        let chart = chart_over(&[db.achieved_nu_e(0).unwrap()]);
        let design = design_for(
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]],
            vec![[0.5, 0.5]; 4],
        );
        let structure = realize(&design, &db, &chart, 0.25).unwrap();
        let occ = structure.occupancy();
        let counts = structure.voxel_counts();
        let n = structure.micro_n;
        for ix in 0..counts[0] {
            for iy in 0..counts[1] {
                let a = occ[ix * counts[1] + iy];
                let b = occ[(ix % n) * counts[1] + (iy % n)];
                assert_eq!(a, b, "tiling must be periodic");
            }
        }
    }

    #[test]
    fn shared_face_bridge_nodes_agree() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.9, -0.2]);
        let chart = chart_over(&[db.achieved_nu_e(0).unwrap(), db.achieved_nu_e(1).unwrap()]);
        let design = design_for(vec![vec![0, 0], vec![1, 0]], vec![[0.0, 0.0], [1.0, 1.0]]);
        let structure = realize(&design, &db, &chart, 0.5).unwrap();
        assert_ne!(structure.record_ids[0], structure.record_ids[1]);
        let report = bridge_compatibility_scan(&structure, &db.bridge_spec()).unwrap();
        assert_eq!(report.faces_checked, 1);
        assert!(report.nodes_checked > 0);
        assert_eq!(report.mismatches, 0);
    }

    #[test]
    fn cost_identity_holds_and_detects_corruption() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.9, -0.2, 0.4]);
        let coords: Vec<(f64, f64)> = (0..3).map(|i| db.achieved_nu_e(i).unwrap()).collect();
        let chart = chart_over(&coords);
        let design = design_for(
            vec![vec![0, 0], vec![1, 0], vec![2, 0]],
            vec![[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]],
        );
        let weights = db.weights().unwrap();
        let structure = realize(&design, &db, &chart, 0.5).unwrap();
        let report = cost_identity_check(&structure, &db, &weights).unwrap();
        assert!(
            report.relative_mismatch <= 1e-10,
            "mismatch {:.3e}",
            report.relative_mismatch
        );

        // Doubling ε scales volume by 2^d and the perimeter contribution by
        // 2 within the identity.
        let structure2 = realize(&design, &db, &chart, 1.0).unwrap();
        let report2 = cost_identity_check(&structure2, &db, &weights).unwrap();
        assert!((report2.volume_integral - 4.0 * report.volume_integral).abs() < 1e-12);
        assert!((report2.perimeter_integral - 2.0 * report.perimeter_integral).abs() < 1e-10);
        assert!(report2.relative_mismatch <= 1e-10);

        // Fault injection: corrupt one tile.
        let mut corrupted = structure.clone();
        for v in corrupted.fields[1].values.iter_mut().take(20) {
            *v = -*v;
        }
        let bad = cost_identity_check(&corrupted, &db, &weights).unwrap();
        assert!(bad.relative_mismatch > 1e-8, "mismatch {:.3e}", bad.relative_mismatch);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.9, -0.3]);
        let chart = chart_over(&[db.achieved_nu_e(0).unwrap(), db.achieved_nu_e(1).unwrap()]);
        let design = design_for(vec![vec![0, 0], vec![1, 0]], vec![[0.0, 0.0], [1.0, 1.0]]);
        let structure = realize(&design, &db, &chart, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.pgm");
        export_pgm(&structure, &path).unwrap();
        let (w, h, occ) = import_pgm(&path).unwrap();
        let counts = structure.voxel_counts();
        assert_eq!((w, h), (counts[0], counts[1]));
        let reference = structure.occupancy();
        let flat: Vec<bool> = (0..counts[0] * counts[1])
            .map(|i| reference[(i / counts[1]) * counts[1] + (i % counts[1])])
            .collect();
        assert_eq!(occ, flat);
    }

    #[test]
    fn vtk_round_trip_and_counts() {
        let grid = build_grid(2, 8).unwrap();
        let db = micro_db(grid, &[0.6]);
        let chart = chart_over(&[db.achieved_nu_e(0).unwrap()]);
        let design = design_for(vec![vec![0, 0], vec![1, 0]], vec![[0.5, 0.5]; 2]);
        let structure = realize(&design, &db, &chart, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.vtk");
        export_vtk(&structure, &path).unwrap();
        let (dims, occ) = import_vtk(&path).unwrap();
        let counts = structure.voxel_counts();
        assert_eq!(dims, counts);
        assert_eq!(dims[0] * dims[1] * dims[2], 16 * 8);
        assert_eq!(occ, structure.occupancy());
    }

    #[test]
    fn stl_of_single_solid_cube_has_twelve_triangles() {
        // One 3D macro cell whose microcell is a single solid voxel block
        // of n = 2: occupancy is a solid cube of 8 voxels; external faces
        // = 6 faces × 4 voxels... Use n = 2 with all-hard field: exposed
        // faces are the 24 outer voxel faces, 48 triangles. For the
        // 12-triangle check use a single occupied voxel instead.
        let grid = build_grid(3, 2).unwrap();
        let mut field = NodalField::constant(grid, 1, -1.0);
        // Occupy only the voxel at the origin corner: its 8 corner nodes.
        for node in 0..grid.node_count() {
            let c = grid.node_coords(node);
            if c[0] <= 1 && c[1] <= 1 && c[2] <= 1 {
                field.values[node] = 1.0;
            }
        }
        // Center values: origin voxel mean = 1 > 0; neighbors mixed < 0.
        let structure = TwoScaleStructure {
            dim: 3,
            epsilon: 1.0,
            micro_n: 2,
            cells: vec![vec![0, 0, 0]],
            record_ids: vec![0],
            fields: vec![field],
            substitution_error: vec![0.0],
            cell_lo: [0, 0, 0],
            extent: [1, 1, 1],
        };
        let occ = structure.occupancy();
        assert_eq!(occ.iter().filter(|&&o| o).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.stl");
        export_stl(&structure, &path).unwrap();
        assert_eq!(stl_triangle_count(&path).unwrap(), 12);
    }

    #[test]
    fn realize_rejects_empty_or_infeasible() {
        let grid = build_grid(2, 8).unwrap();
        let mut db = micro_db(grid, &[0.9]);
        let chart = chart_over(&[db.achieved_nu_e(0).unwrap()]);
        let design = design_for(vec![vec![0, 0]], vec![[0.5, 0.5]]);
        db.manifest.samples[0].status = CellStatus::Disconnected;
        let err = realize(&design, &db, &chart, 0.5).unwrap_err().to_string();
        assert!(err.contains("Disconnected"), "{err}");
        db.manifest.samples.clear();
        db.fields.clear();
        assert!(realize(&design, &db, &chart, 0.5).is_err());
    }
}
