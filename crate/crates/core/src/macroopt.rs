//! Macroscopic restricted free material optimization: multilinear FEM on a
//! union of scaled unit cells, compliance and tracking functionals with
//! adjoint gradients, gauge constraints, and the box-constrained
//! optimization over per-cell chart coordinates q ∈ [0,1]².

use crate::error::{Error, Result};
use crate::fem::ElementKit;
use crate::grid::simpson_rule;
use crate::nlp::{solve_constrained, ConstrainedProblem, Evaluation, NlpSettings, OuterRecord};
use crate::sparse::{dot, solve_spd, SparseOperator};
use crate::spline::Chart;
use crate::tensor::{iso_from_nu_e, nu_range, tensor_from_iso, voigt_size, ElasticityTensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Cell selection of the macroscopic domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellSet {
    /// Explicit multi-indices.
    List(Vec<Vec<i64>>),
    /// A box of cells minus rectangular holes (index ranges, half-open).
    Box {
        #[serde(rename = "box")]
        counts: Vec<i64>,
        #[serde(default)]
        holes: Vec<Vec<[i64; 2]>>,
    },
}

/// Boundary face selector on the domain bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Xmin,
    Xmax,
    Ymin,
    Ymax,
    Zmin,
    Zmax,
}

impl Face {
    fn axis(&self) -> usize {
        match self {
            Face::Xmin | Face::Xmax => 0,
            Face::Ymin | Face::Ymax => 1,
            Face::Zmin | Face::Zmax => 2,
        }
    }

    fn is_max(&self) -> bool {
        matches!(self, Face::Xmax | Face::Ymax | Face::Zmax)
    }
}

/// Prescribed displacement components on a bounding-box face.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletSpec {
    pub face: Face,
    pub components: Vec<usize>,
    pub values: Vec<f64>,
}

/// Constant traction on (a region of) a bounding-box face.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeumannSpec {
    pub face: Face,
    pub traction: Vec<f64>,
    /// Optional coordinate box restricting the loaded patch.
    #[serde(default)]
    pub region: Option<Vec<[f64; 2]>>,
}

/// Body force, constant on a coordinate region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyForceSpec {
    pub region: Vec<[f64; 2]>,
    pub force: Vec<f64>,
}

/// Tracking target: one constant displacement per tracking cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingTarget {
    pub cell: Vec<i64>,
    pub u0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Functional {
    Compliance,
    Tracking { targets: Vec<TrackingTarget> },
}

/// Gauge constraints removing rigid modes that Dirichlet data leaves free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    MeanU2,
    MeanU3,
    MeanCurl1,
}

/// The macroscopic problem description (`problem.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroProblem {
    pub dim: usize,
    #[serde(rename = "H")]
    pub h: f64,
    pub cells: CellSet,
    #[serde(default)]
    pub dirichlet: Vec<DirichletSpec>,
    #[serde(default)]
    pub neumann: Vec<NeumannSpec>,
    #[serde(default)]
    pub body_force: Vec<BodyForceSpec>,
    pub functional: Functional,
    #[serde(default)]
    pub gauges: Vec<Gauge>,
    #[serde(default)]
    pub vol_h: Option<f64>,
    #[serde(default)]
    pub c_p_hat: f64,
}

impl MacroProblem {
    pub fn read(path: &std::path::Path) -> Result<MacroProblem> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("malformed problem: {e}")))
    }
}

/// Union-of-cells mesh with deterministic node and cell ordering.
#[derive(Debug, Clone)]
pub struct MacroMesh {
    pub dim: usize,
    pub h: f64,
    pub cells: Vec<[i64; 3]>,
    pub nodes: Vec<[i64; 3]>,
    node_index: HashMap<[i64; 3], usize>,
    /// Corner node ids per cell, local ordering by binary corner offsets.
    pub cell_nodes: Vec<Vec<usize>>,
    /// Bounding box of node coordinates.
    pub node_lo: [i64; 3],
    pub node_hi: [i64; 3],
}

impl MacroMesh {
    pub fn build(dim: usize, h: f64, set: &CellSet) -> Result<MacroMesh> {
        if dim != 2 && dim != 3 {
            return Err(Error::domain(format!("dim must be 2 or 3, got {dim}")));
        }
        if !(h > 0.0) {
            return Err(Error::domain(format!("H must be positive, got {h}")));
        }
        let mut cells: Vec<[i64; 3]> = Vec::new();
        match set {
            CellSet::List(list) => {
                for entry in list {
                    if entry.len() != dim {
                        return Err(Error::format(format!(
                            "cell index {entry:?} does not have {dim} entries"
                        )));
                    }
                    let mut c = [0i64; 3];
                    c[..dim].copy_from_slice(entry);
                    cells.push(c);
                }
            }
            CellSet::Box { counts, holes } => {
                if counts.len() != dim {
                    return Err(Error::format(format!(
                        "box counts {counts:?} do not have {dim} entries"
                    )));
                }
                let inside_hole = |c: &[i64; 3]| -> bool {
                    holes.iter().any(|hole| {
                        hole.len() == dim
                            && (0..dim).all(|k| c[k] >= hole[k][0] && c[k] < hole[k][1])
                    })
                };
                let mut c = [0i64; 3];
                let counts3 = [
                    counts[0],
                    counts.get(1).copied().unwrap_or(1),
                    counts.get(2).copied().unwrap_or(1),
                ];
                for i in 0..counts3[0] {
                    for j in 0..counts3[1] {
                        for k in 0..if dim == 3 { counts3[2] } else { 1 } {
                            c = [i, j, k];
                            if !inside_hole(&c) {
                                cells.push(c);
                            }
                        }
                    }
                }
                let _ = c;
            }
        }
        if cells.is_empty() {
            return Err(Error::domain("macro domain has no cells"));
        }
        cells.sort_unstable();
        cells.dedup();

        let mut nodes: Vec<[i64; 3]> = Vec::new();
        for cell in &cells {
            for corner in 0..1usize << dim {
                let mut node = *cell;
                for k in 0..dim {
                    node[k] += ((corner >> (dim - 1 - k)) & 1) as i64;
                }
                nodes.push(node);
            }
        }
        nodes.sort_unstable();
        nodes.dedup();
        let node_index: HashMap<[i64; 3], usize> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let cell_nodes = cells
            .iter()
            .map(|cell| {
                (0..1usize << dim)
                    .map(|corner| {
                        let mut node = *cell;
                        for k in 0..dim {
                            node[k] += ((corner >> (dim - 1 - k)) & 1) as i64;
                        }
                        node_index[&node]
                    })
                    .collect()
            })
            .collect();
        let mut node_lo = [i64::MAX; 3];
        let mut node_hi = [i64::MIN; 3];
        for node in &nodes {
            for k in 0..dim {
                node_lo[k] = node_lo[k].min(node[k]);
                node_hi[k] = node_hi[k].max(node[k]);
            }
        }
        Ok(MacroMesh {
            dim,
            h,
            cells,
            nodes,
            node_index,
            cell_nodes,
            node_lo,
            node_hi,
        })
    }

    pub fn node_position(&self, node: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.nodes[node][k] as f64 * self.h;
        }
        x
    }

    pub fn cell_origin(&self, cell: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.cells[cell][k] as f64 * self.h;
        }
        x
    }

    pub fn cell_of_index(&self, index: &[i64]) -> Option<usize> {
        let mut c = [0i64; 3];
        c[..self.dim].copy_from_slice(index);
        self.cells.binary_search(&c).ok()
    }

    pub fn node_of_index(&self, index: &[i64]) -> Option<usize> {
        let mut c = [0i64; 3];
        c[..self.dim].copy_from_slice(index);
        self.node_index.get(&c).copied()
    }
}

/// Per-cell design coordinates in the chart square.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroDesign {
    pub q: Vec<[f64; 2]>,
}

impl MacroDesign {
    pub fn uniform(cells: usize, q: [f64; 2]) -> Self {
        MacroDesign {
            q: vec![q; cells],
        }
    }
}

/// Solved macroscopic state.
#[derive(Debug, Clone)]
pub struct MacroState {
    /// Displacement over all mesh nodes, node-major.
    pub u: Vec<f64>,
    pub compliance: f64,
    pub tracking: f64,
    /// Relative equilibrium residual of the solve.
    pub equilibrium_residual: f64,
    /// Gauge functional values at the state (one per active gauge).
    pub gauge_values: Vec<f64>,
}

/// Assembled, reusable macroscopic FEM engine.
pub struct MacroFem {
    pub mesh: MacroMesh,
    pub problem: MacroProblem,
    kit: ElementKit,
    /// Voigt-basis element matrices K_IJ, layout [I*nvoigt+J][ndof²].
    k_basis: Vec<Vec<f64>>,
    /// Prescribed value per dof (dof = node*dim + comp).
    prescribed: Vec<Option<f64>>,
    /// Free dof ids in ascending dof order.
    free_dofs: Vec<usize>,
    free_of_dof: Vec<Option<usize>>,
    /// Assembled load vector over all dofs (body forces plus tractions).
    load: Vec<f64>,
    /// Gauge functional vectors over free dofs.
    gauge_rows: Vec<Vec<f64>>,
    /// Rigid-mode kernel vectors over free dofs, one per gauge.
    kernel: Vec<Vec<f64>>,
    warm_state: Option<Vec<f64>>,
    warm_adjoint: Option<Vec<f64>>,
}

fn region_contains(region: &[[f64; 2]], x: &[f64; 3], dim: usize) -> bool {
    region.len() == dim && (0..dim).all(|k| x[k] >= region[k][0] && x[k] <= region[k][1])
}

impl MacroFem {
    pub fn new(problem: MacroProblem) -> Result<MacroFem> {
        let mesh = MacroMesh::build(problem.dim, problem.h, &problem.cells)?;
        let dim = mesh.dim;
        let kit = ElementKit::new(dim, mesh.h);
        let nvoigt = voigt_size(dim);
        let nd = kit.ndof;

        // Voigt-basis element stiffness blocks.
        let mut k_basis = vec![vec![0.0; nd * nd]; nvoigt * nvoigt];
        for q in 0..kit.nq {
            let w = kit.wvol[q];
            for i in 0..nvoigt {
                let bi = kit.strain_row(q, i).to_vec();
                for j in 0..nvoigt {
                    let bj = kit.strain_row(q, j).to_vec();
                    let block = &mut k_basis[i * nvoigt + j];
                    for a in 0..nd {
                        for b in 0..nd {
                            block[a * nd + b] += w * bi[a] * bj[b];
                        }
                    }
                }
            }
        }

        let ndof = mesh.nodes.len() * dim;
        let mut prescribed: Vec<Option<f64>> = vec![None; ndof];
        for spec in &problem.dirichlet {
            if spec.components.len() != spec.values.len() {
                return Err(Error::format(
                    "dirichlet components and values differ in length",
                ));
            }
            let axis = spec.face.axis();
            if axis >= dim {
                return Err(Error::format("dirichlet face outside dimension"));
            }
            let plane = if spec.face.is_max() {
                mesh.node_hi[axis]
            } else {
                mesh.node_lo[axis]
            };
            for (node_id, node) in mesh.nodes.iter().enumerate() {
                if node[axis] == plane {
                    for (comp, value) in spec.components.iter().zip(&spec.values) {
                        if *comp >= dim {
                            return Err(Error::format("dirichlet component outside dimension"));
                        }
                        prescribed[node_id * dim + comp] = Some(*value);
                    }
                }
            }
        }
        let free_dofs: Vec<usize> = (0..ndof).filter(|d| prescribed[*d].is_none()).collect();
        let mut free_of_dof = vec![None; ndof];
        for (f, &d) in free_dofs.iter().enumerate() {
            free_of_dof[d] = Some(f);
        }

        // Node masses and body-force load by cell quadrature.
        let mut node_mass = vec![0.0; mesh.nodes.len()];
        let mut load = vec![0.0; ndof];
        let rule = simpson_rule(dim);
        for (cell, nodes) in mesh.cell_nodes.iter().enumerate() {
            let origin = mesh.cell_origin(cell);
            for q in 0..kit.nq {
                let mut point = [0.0; 3];
                for k in 0..dim {
                    point[k] = origin[k] + rule.points[q][k] * mesh.h;
                }
                let mut force = [0.0; 3];
                for spec in &problem.body_force {
                    if region_contains(&spec.region, &point, dim) {
                        for k in 0..dim {
                            force[k] += spec.force[k];
                        }
                    }
                }
                for (a, &node) in nodes.iter().enumerate() {
                    let phi = kit.shape_at(q, a) * kit.wvol[q];
                    node_mass[node] += phi;
                    for k in 0..dim {
                        load[node * dim + k] += phi * force[k];
                    }
                }
            }
        }

        // Neumann tractions by face quadrature on boundary faces of cells
        // lying on the bounding box.
        let face_rule = simpson_rule(dim - 1);
        let face_area = mesh.h.powi(dim as i32 - 1);
        for spec in &problem.neumann {
            let axis = spec.face.axis();
            if axis >= dim || spec.traction.len() != dim {
                return Err(Error::format("invalid neumann spec"));
            }
            let plane = if spec.face.is_max() {
                mesh.node_hi[axis]
            } else {
                mesh.node_lo[axis]
            };
            for (cell_id, cell) in mesh.cells.iter().enumerate() {
                let on_face = if spec.face.is_max() {
                    cell[axis] + 1 == plane
                } else {
                    cell[axis] == plane
                };
                if !on_face {
                    continue;
                }
                let origin = mesh.cell_origin(cell_id);
                let tangents: Vec<usize> = (0..dim).filter(|k| *k != axis).collect();
                for (fq, fw) in face_rule.points.iter().zip(&face_rule.weights) {
                    let mut point = [0.0; 3];
                    point[axis] = if spec.face.is_max() {
                        origin[axis] + mesh.h
                    } else {
                        origin[axis]
                    };
                    for (t, &k) in tangents.iter().enumerate() {
                        point[k] = origin[k] + fq[t] * mesh.h;
                    }
                    if let Some(region) = &spec.region {
                        if !region_contains(region, &point, dim) {
                            continue;
                        }
                    }
                    // Multilinear shape values on the face.
                    for (a, &node) in mesh.cell_nodes[cell_id].iter().enumerate() {
                        let corner_on_face = {
                            let bit = (a >> (dim - 1 - axis)) & 1;
                            (bit == 1) == spec.face.is_max()
                        };
                        if !corner_on_face {
                            continue;
                        }
                        let mut phi = 1.0;
                        for (t, &k) in tangents.iter().enumerate() {
                            let bit = (a >> (dim - 1 - k)) & 1;
                            phi *= if bit == 1 { fq[t] } else { 1.0 - fq[t] };
                        }
                        for k in 0..dim {
                            load[node * dim + k] += fw * face_area * phi * spec.traction[k];
                        }
                    }
                }
            }
        }

        // Gauge functionals (mass-weighted means) and the rigid modes they
        // control.
        let mut gauge_rows = Vec::new();
        let mut kernel = Vec::new();
        let centroid = {
            let mut c = [0.0; 3];
            for node in 0..mesh.nodes.len() {
                let x = mesh.node_position(node);
                for k in 0..dim {
                    c[k] += x[k] / mesh.nodes.len() as f64;
                }
            }
            c
        };
        for gauge in &problem.gauges {
            let mut row = vec![0.0; ndof];
            let mut mode = vec![0.0; ndof];
            match gauge {
                Gauge::MeanU2 => {
                    for node in 0..mesh.nodes.len() {
                        row[node * dim + 1] = node_mass[node];
                        mode[node * dim + 1] = 1.0;
                    }
                }
                Gauge::MeanU3 => {
                    if dim != 3 {
                        return Err(Error::format("mean_u3 gauge requires dim = 3"));
                    }
                    for node in 0..mesh.nodes.len() {
                        row[node * dim + 2] = node_mass[node];
                        mode[node * dim + 2] = 1.0;
                    }
                }
                Gauge::MeanCurl1 => {
                    if dim != 3 {
                        return Err(Error::format("mean_curl1 gauge requires dim = 3"));
                    }
                    // ∫ (∂₂U₃ − ∂₃U₂) by cell quadrature.
                    for (cell, nodes) in mesh.cell_nodes.iter().enumerate() {
                        let _ = cell;
                        for q in 0..kit.nq {
                            for (a, &node) in nodes.iter().enumerate() {
                                let g = &kit.grad[(q * kit.npc + a) * dim..];
                                row[node * dim + 2] += kit.wvol[q] * g[1];
                                row[node * dim + 1] -= kit.wvol[q] * g[2];
                            }
                        }
                    }
                    // Rigid rotation about the x₁ axis through the centroid.
                    for node in 0..mesh.nodes.len() {
                        let x = mesh.node_position(node);
                        mode[node * dim + 1] = -(x[2] - centroid[2]);
                        mode[node * dim + 2] = x[1] - centroid[1];
                    }
                }
            }
            let row_free: Vec<f64> = free_dofs.iter().map(|&d| row[d]).collect();
            let mode_free: Vec<f64> = free_dofs.iter().map(|&d| mode[d]).collect();
            gauge_rows.push(row_free);
            kernel.push(mode_free);
        }
        // Orthogonalize the kernel basis for stable projections.
        for i in 0..kernel.len() {
            for j in 0..i {
                let prev = kernel[j].clone();
                let c = dot(&kernel[i], &prev) / dot(&prev, &prev);
                for (a, b) in kernel[i].iter_mut().zip(&prev) {
                    *a -= c * b;
                }
            }
        }

        Ok(MacroFem {
            mesh,
            problem,
            kit,
            k_basis,
            prescribed,
            free_dofs,
            free_of_dof,
            load,
            gauge_rows,
            kernel,
            warm_state: None,
            warm_adjoint: None,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.mesh.cells.len()
    }

    /// Per-cell elasticity tensors from the chart at the design point.
    pub fn cell_tensors(&self, design: &MacroDesign, chart: &Chart) -> Result<Vec<ElasticityTensor>> {
        let psi = chart.psi();
        let dim = self.mesh.dim;
        let (lo, hi) = nu_range(dim);
        design
            .q
            .iter()
            .map(|q| {
                let (p, _) = psi.eval(*q)?;
                let nu = p[0].clamp(lo + 1e-9, hi - 1e-9);
                let e = p[1].max(1e-9);
                Ok(tensor_from_iso(&iso_from_nu_e(nu, e, dim)?))
            })
            .collect()
    }

    fn assemble(&self, tensors: &[ElasticityTensor]) -> SparseOperator {
        let dim = self.mesh.dim;
        let nvoigt = voigt_size(dim);
        let nd = self.kit.ndof;
        let nfree = self.free_dofs.len();
        let mut triplets = Vec::new();
        let mut elem = vec![0.0; nd * nd];
        for (cell, nodes) in self.mesh.cell_nodes.iter().enumerate() {
            elem.fill(0.0);
            let v = &tensors[cell];
            for i in 0..nvoigt {
                for j in 0..nvoigt {
                    let vij = v.get(i, j);
                    if vij == 0.0 {
                        continue;
                    }
                    let block = &self.k_basis[i * nvoigt + j];
                    for (e, b) in elem.iter_mut().zip(block) {
                        *e += vij * b;
                    }
                }
            }
            for (a, &na) in nodes.iter().enumerate() {
                for ca in 0..dim {
                    let dof_a = na * dim + ca;
                    let Some(fa) = self.free_of_dof[dof_a] else {
                        continue;
                    };
                    for (b, &nb) in nodes.iter().enumerate() {
                        for cb in 0..dim {
                            let dof_b = nb * dim + cb;
                            if self.free_of_dof[dof_b].is_some() {
                                let fb = self.free_of_dof[dof_b].unwrap();
                                triplets.push((fa, fb, elem[(a * dim + ca) * nd + (b * dim + cb)]));
                            }
                        }
                    }
                }
            }
        }
        let mut op = SparseOperator::from_triplets(nfree, triplets);
        op.symmetric = true;
        op
    }

    /// Right-hand side over free dofs: loads minus stiffness times the
    /// prescribed values.
    fn reduced_rhs(&self, tensors: &[ElasticityTensor], rhs_full: &[f64]) -> Vec<f64> {
        let dim = self.mesh.dim;
        let nvoigt = voigt_size(dim);
        let nd = self.kit.ndof;
        let mut rhs: Vec<f64> = self.free_dofs.iter().map(|&d| rhs_full[d]).collect();
        let mut elem = vec![0.0; nd * nd];
        for (cell, nodes) in self.mesh.cell_nodes.iter().enumerate() {
            let any_prescribed = nodes.iter().any(|&n| {
                (0..dim).any(|c| self.prescribed[n * dim + c].is_some())
            });
            if !any_prescribed {
                continue;
            }
            elem.fill(0.0);
            let v = &tensors[cell];
            for i in 0..nvoigt {
                for j in 0..nvoigt {
                    let vij = v.get(i, j);
                    if vij == 0.0 {
                        continue;
                    }
                    let block = &self.k_basis[i * nvoigt + j];
                    for (e, b) in elem.iter_mut().zip(block) {
                        *e += vij * b;
                    }
                }
            }
            for (a, &na) in nodes.iter().enumerate() {
                for ca in 0..dim {
                    let Some(fa) = self.free_of_dof[na * dim + ca] else {
                        continue;
                    };
                    for (b, &nb) in nodes.iter().enumerate() {
                        for cb in 0..dim {
                            if let Some(value) = self.prescribed[nb * dim + cb] {
                                rhs[fa] -= elem[(a * dim + ca) * nd + (b * dim + cb)] * value;
                            }
                        }
                    }
                }
            }
        }
        rhs
    }

    /// Full-dof vector from a free-dof vector plus prescribed values.
    fn expand(&self, free: &[f64], with_dirichlet: bool) -> Vec<f64> {
        let mut full = vec![0.0; self.prescribed.len()];
        for (f, &d) in self.free_dofs.iter().enumerate() {
            full[d] = free[f];
        }
        if with_dirichlet {
            for (d, value) in self.prescribed.iter().enumerate() {
                if let Some(v) = value {
                    full[d] = *v;
                }
            }
        }
        full
    }

    /// Solves K u = rhs with gauge constraints enforced through the
    /// multiplier compatibility system; `warm` picks the warm-start slot.
    fn solve_system(
        &mut self,
        op: &SparseOperator,
        rhs: &[f64],
        adjoint_slot: bool,
    ) -> Result<(Vec<f64>, f64)> {
        let k = self.kernel.len();
        let mut consistent = rhs.to_vec();
        if k > 0 {
            // Multipliers from kernel compatibility: G ker pairing.
            let mut m = nalgebra::DMatrix::zeros(k, k);
            let mut b = nalgebra::DVector::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] = dot(&self.gauge_rows[j], &self.kernel[i]);
                }
                b[i] = dot(&self.kernel[i], rhs);
            }
            let multipliers = m
                .transpose()
                .lu()
                .solve(&b)
                .ok_or_else(|| Error::structure("gauges do not control the rigid modes"))?;
            for j in 0..k {
                for (c, g) in consistent.iter_mut().zip(&self.gauge_rows[j]) {
                    *c -= multipliers[j] * g;
                }
            }
        }
        let warm = if adjoint_slot {
            self.warm_adjoint.as_deref()
        } else {
            self.warm_state.as_deref()
        };
        let (mut u, stats) = solve_spd(op, &consistent, &self.kernel, 1e-12, warm)?;
        if k > 0 {
            // Shift along the kernel to meet the gauge functionals exactly.
            let mut m = nalgebra::DMatrix::zeros(k, k);
            let mut b = nalgebra::DVector::zeros(k);
            for j in 0..k {
                for i in 0..k {
                    m[(j, i)] = dot(&self.gauge_rows[j], &self.kernel[i]);
                }
                b[j] = -dot(&self.gauge_rows[j], &u);
            }
            let shift = m
                .lu()
                .solve(&b)
                .ok_or_else(|| Error::structure("gauges do not control the rigid modes"))?;
            for i in 0..k {
                for (ui, ki) in u.iter_mut().zip(&self.kernel[i]) {
                    *ui += shift[i] * ki;
                }
            }
        }
        if adjoint_slot {
            self.warm_adjoint = Some(u.clone());
        } else {
            self.warm_state = Some(u.clone());
        }
        Ok((u, stats.residual))
    }

    /// Solves the equilibrium problem for a design.
    pub fn solve(&mut self, tensors: &[ElasticityTensor]) -> Result<MacroState> {
        let op = self.assemble(tensors);
        let rhs = self.reduced_rhs(tensors, &self.load.clone());
        let (u_free, residual) = self.solve_system(&op, &rhs, false)?;
        let u = self.expand(&u_free, true);
        let compliance = dot(&self.load, &u);
        let tracking = self.tracking_value(&u);
        let gauge_values = self
            .gauge_rows
            .iter()
            .map(|row| dot(row, &u_free))
            .collect();
        Ok(MacroState {
            u,
            compliance,
            tracking,
            equilibrium_residual: residual,
            gauge_values,
        })
    }

    fn tracking_value(&self, u: &[f64]) -> f64 {
        let Functional::Tracking { targets } = &self.problem.functional else {
            return 0.0;
        };
        let dim = self.mesh.dim;
        let mut total = 0.0;
        for target in targets {
            let Some(cell) = self.mesh.cell_of_index(&target.cell) else {
                continue;
            };
            for q in 0..self.kit.nq {
                let mut diff = [0.0; 3];
                for (a, &node) in self.mesh.cell_nodes[cell].iter().enumerate() {
                    let phi = self.kit.shape_at(q, a);
                    for k in 0..dim {
                        diff[k] += phi * u[node * dim + k];
                    }
                }
                for k in 0..dim {
                    diff[k] -= target.u0[k];
                }
                let norm_sq: f64 = diff[..dim].iter().map(|d| d * d).sum();
                total += self.kit.wvol[q] * norm_sq;
            }
        }
        total
    }

    /// Adjoint load ∂J_mech/∂U over all dofs.
    fn adjoint_load(&self, u: &[f64]) -> Vec<f64> {
        match &self.problem.functional {
            Functional::Compliance => self.load.clone(),
            Functional::Tracking { targets } => {
                let dim = self.mesh.dim;
                let mut t = vec![0.0; u.len()];
                for target in targets {
                    let Some(cell) = self.mesh.cell_of_index(&target.cell) else {
                        continue;
                    };
                    for q in 0..self.kit.nq {
                        let mut diff = [0.0; 3];
                        for (a, &node) in self.mesh.cell_nodes[cell].iter().enumerate() {
                            let phi = self.kit.shape_at(q, a);
                            for k in 0..dim {
                                diff[k] += phi * u[node * dim + k];
                            }
                        }
                        for k in 0..dim {
                            diff[k] -= target.u0[k];
                        }
                        for (a, &node) in self.mesh.cell_nodes[cell].iter().enumerate() {
                            let phi = self.kit.shape_at(q, a);
                            for k in 0..dim {
                                t[node * dim + k] += 2.0 * self.kit.wvol[q] * phi * diff[k];
                            }
                        }
                    }
                }
                t
            }
        }
    }

    /// Mechanical gradient dJ_mech/dV per cell, one symmetric Voigt matrix
    /// of sensitivities per cell.
    pub fn mechanical_gradient(
        &mut self,
        tensors: &[ElasticityTensor],
        state: &MacroState,
    ) -> Result<Vec<Vec<f64>>> {
        let dim = self.mesh.dim;
        let nvoigt = voigt_size(dim);
        let nd = self.kit.ndof;
        let op = self.assemble(tensors);
        let t_full = self.adjoint_load(&state.u);
        let t_free: Vec<f64> = self.free_dofs.iter().map(|&d| t_full[d]).collect();
        let (p_free, _) = self.solve_system(&op, &t_free, true)?;
        let p = self.expand(&p_free, false);

        let mut grads = Vec::with_capacity(self.mesh.cells.len());
        let mut ue = vec![0.0; nd];
        let mut pe = vec![0.0; nd];
        for nodes in &self.mesh.cell_nodes {
            for (a, &node) in nodes.iter().enumerate() {
                for k in 0..dim {
                    ue[a * dim + k] = state.u[node * dim + k];
                    pe[a * dim + k] = p[node * dim + k];
                }
            }
            let mut cell_grad = vec![0.0; nvoigt * nvoigt];
            for i in 0..nvoigt {
                for j in 0..nvoigt {
                    let block = &self.k_basis[i * nvoigt + j];
                    let mut acc = 0.0;
                    for a in 0..nd {
                        let pa = pe[a];
                        if pa == 0.0 {
                            continue;
                        }
                        let row = &block[a * nd..(a + 1) * nd];
                        acc += pa * dot(row, &ue);
                    }
                    // dJ/dV_ij = −pᵀ (dK/dV_ij) u.
                    cell_grad[i * nvoigt + j] = -acc;
                }
            }
            grads.push(cell_grad);
        }
        Ok(grads)
    }
}

/// Derivative of the isotropic Voigt tensor with respect to (ν, E).
fn tensor_derivatives(nu: f64, e: f64, dim: usize) -> Result<[ElasticityTensor; 2]> {
    let d = dim as f64;
    let (kappa, mu, dk_dnu, dk_de, dm_dnu, dm_de) = if dim == 2 {
        let kappa = e / (2.0 * (1.0 - nu));
        let mu = e / (2.0 * (1.0 + nu));
        (
            kappa,
            mu,
            e / (2.0 * (1.0 - nu) * (1.0 - nu)),
            1.0 / (2.0 * (1.0 - nu)),
            -e / (2.0 * (1.0 + nu) * (1.0 + nu)),
            1.0 / (2.0 * (1.0 + nu)),
        )
    } else {
        let kappa = e / (3.0 * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (
            kappa,
            mu,
            2.0 * e / (3.0 * (1.0 - 2.0 * nu) * (1.0 - 2.0 * nu)),
            1.0 / (3.0 * (1.0 - 2.0 * nu)),
            -e / (2.0 * (1.0 + nu) * (1.0 + nu)),
            1.0 / (2.0 * (1.0 + nu)),
        )
    };
    let _ = (kappa, mu);
    // V(κ, μ): normal block (κ − 2μ/d) + 2μ δ, shear diagonal μ.
    let mut dv_dkappa = ElasticityTensor::zeros(dim);
    let mut dv_dmu = ElasticityTensor::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            dv_dkappa.set(i, j, 1.0);
            dv_dmu.set(i, j, if i == j { 2.0 - 2.0 / d } else { -2.0 / d });
        }
    }
    for s in dim..voigt_size(dim) {
        dv_dmu.set(s, s, 1.0);
    }
    let mut dv_dnu = ElasticityTensor::zeros(dim);
    let mut dv_de = ElasticityTensor::zeros(dim);
    for idx in 0..dv_dnu.voigt.len() {
        dv_dnu.voigt[idx] = dk_dnu * dv_dkappa.voigt[idx] + dm_dnu * dv_dmu.voigt[idx];
        dv_de.voigt[idx] = dk_de * dv_dkappa.voigt[idx] + dm_de * dv_dmu.voigt[idx];
    }
    Ok([dv_dnu, dv_de])
}

/// Cost and gradient bookkeeping for one design evaluation.
#[derive(Debug, Clone)]
pub struct MacroCost {
    /// Σ H^d j_ref(q_cell).
    pub cost_integral: f64,
    /// Σ H^d mm-lattice contribution (interface energy of the design).
    pub interface_integral: f64,
    pub mechanical: f64,
    pub total_objective: f64,
    /// Equality constraint residual (present when Vol_H is set).
    pub constraint: Option<f64>,
}

/// Evaluates the macroscopic cost at a solved state.
pub fn macro_cost(
    fem: &MacroFem,
    design: &MacroDesign,
    chart: &Chart,
    state: &MacroState,
) -> Result<MacroCost> {
    let jref = chart.jref();
    let mm = crate::spline::fit_jref(&chart.mm_values, chart.tau)?;
    let hd = fem.mesh.h.powi(fem.mesh.dim as i32);
    let mut cost_integral = 0.0;
    let mut interface_integral = 0.0;
    for q in &design.q {
        let (value, _) = jref.eval(*q)?;
        cost_integral += hd * value[0];
        let (value, _) = mm.eval(*q)?;
        interface_integral += hd * value[0];
    }
    let mechanical = match fem.problem.functional {
        Functional::Compliance => state.compliance,
        Functional::Tracking { .. } => state.tracking,
    };
    let (total_objective, constraint) = match fem.problem.vol_h {
        Some(target) => (mechanical, Some(cost_integral - target)),
        None => (cost_integral + mechanical, None),
    };
    Ok(MacroCost {
        cost_integral,
        interface_integral,
        mechanical,
        total_objective,
        constraint,
    })
}

/// Gradient of the mechanical functional and the cost integral with
/// respect to the per-cell design coordinates.
pub fn macro_gradient(
    fem: &mut MacroFem,
    design: &MacroDesign,
    chart: &Chart,
    state: &MacroState,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let tensors = fem.cell_tensors(design, chart)?;
    let mech_v = fem.mechanical_gradient(&tensors, state)?;
    let psi = chart.psi();
    let jref = chart.jref();
    let dim = fem.mesh.dim;
    let nvoigt = voigt_size(dim);
    let (lo, hi) = nu_range(dim);
    let hd = fem.mesh.h.powi(dim as i32);
    let mut mech = Vec::with_capacity(design.q.len());
    let mut cost = Vec::with_capacity(design.q.len());
    for (cell, q) in design.q.iter().enumerate() {
        let (p, _) = psi.eval(*q)?;
        let jac = psi.jacobian(*q)?;
        let nu = p[0].clamp(lo + 1e-9, hi - 1e-9);
        let e = p[1].max(1e-9);
        let nu_clamped = nu != p[0];
        let e_clamped = e != p[1];
        let [dv_dnu, dv_de] = tensor_derivatives(nu, e, dim)?;
        let mut pair = [0.0; 2];
        for axis in 0..2 {
            let dnu = if nu_clamped { 0.0 } else { jac[0][axis] };
            let de = if e_clamped { 0.0 } else { jac[1][axis] };
            let mut acc = 0.0;
            for i in 0..nvoigt {
                for j in 0..nvoigt {
                    let dv = dnu * dv_dnu.get(i, j) + de * dv_de.get(i, j);
                    acc += mech_v[cell][i * nvoigt + j] * dv;
                }
            }
            pair[axis] = acc;
        }
        mech.push(pair);
        let jg = jref.jacobian(*q)?;
        cost.push([hd * jg[0][0], hd * jg[0][1]]);
    }
    Ok((mech, cost))
}

struct MacroNlp<'a> {
    fem: &'a mut MacroFem,
    chart: &'a Chart,
}

impl ConstrainedProblem for MacroNlp<'_> {
    fn num_vars(&self) -> usize {
        2 * self.fem.num_cells()
    }

    fn num_constraints(&self) -> usize {
        usize::from(self.fem.problem.vol_h.is_some())
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.num_vars()], vec![1.0; self.num_vars()])
    }

    fn evaluate(&mut self, x: &[f64], want_grad: bool) -> Result<Evaluation> {
        let design = MacroDesign {
            q: x.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        };
        let tensors = self.fem.cell_tensors(&design, self.chart)?;
        let state = self.fem.solve(&tensors)?;
        let cost = macro_cost(self.fem, &design, self.chart, &state)?;
        let constraints = cost.constraint.map(|c| vec![c]).unwrap_or_default();
        let (gradient, jacobian) = if want_grad {
            let (mech, cost_grad) = macro_gradient(self.fem, &design, self.chart, &state)?;
            let mut grad = vec![0.0; x.len()];
            let mut jac = Vec::new();
            match self.fem.problem.vol_h {
                Some(_) => {
                    for (cell, pair) in mech.iter().enumerate() {
                        grad[2 * cell] = pair[0];
                        grad[2 * cell + 1] = pair[1];
                    }
                    jac = vec![0.0; x.len()];
                    for (cell, pair) in cost_grad.iter().enumerate() {
                        jac[2 * cell] = pair[0];
                        jac[2 * cell + 1] = pair[1];
                    }
                }
                None => {
                    for cell in 0..mech.len() {
                        grad[2 * cell] = mech[cell][0] + cost_grad[cell][0];
                        grad[2 * cell + 1] = mech[cell][1] + cost_grad[cell][1];
                    }
                }
            }
            (Some(grad), Some(jac))
        } else {
            (None, None)
        };
        Ok(Evaluation {
            objective: cost.total_objective,
            gradient,
            constraints,
            jacobian,
        })
    }
}

/// Result of a macroscopic optimization run.
#[derive(Debug, Clone)]
pub struct MacroOptResult {
    pub design: MacroDesign,
    pub state: MacroState,
    pub cost: MacroCost,
    pub converged: bool,
    pub kkt_residual: f64,
    pub constraint_norm: f64,
    pub history: Vec<OuterRecord>,
}

/// Feasible uniform initial design: q = (0.5, s) with the second (stiffness)
/// coordinate found by bisection on the integrated cost.
pub fn feasible_uniform_init(
    fem: &MacroFem,
    chart: &Chart,
    vol_h: Option<f64>,
) -> Result<MacroDesign> {
    let cells = fem.num_cells();
    let Some(target) = vol_h else {
        return Ok(MacroDesign::uniform(cells, [0.5, 0.5]));
    };
    let jref = chart.jref();
    let hd = fem.mesh.h.powi(fem.mesh.dim as i32);
    let cost_of = |s: f64| -> Result<f64> {
        let (value, _) = jref.eval([0.5, s])?;
        Ok(cells as f64 * hd * value[0])
    };
    // Attainable range over the whole chart square.
    let mut lo_cost = f64::INFINITY;
    let mut hi_cost = f64::NEG_INFINITY;
    for i in 0..=64 {
        for j in 0..=64 {
            let (value, _) = jref.eval([i as f64 / 64.0, j as f64 / 64.0])?;
            let total = cells as f64 * hd * value[0];
            lo_cost = lo_cost.min(total);
            hi_cost = hi_cost.max(total);
        }
    }
    if target < lo_cost || target > hi_cost {
        return Err(Error::domain(format!(
            "Vol_H = {target} is outside the attainable cost range [{lo_cost}, {hi_cost}]"
        )));
    }
    // Bracket on the vertical chart line.
    let samples = 129;
    let mut bracket = None;
    let mut best = (f64::INFINITY, 0.5);
    let mut previous = (0.0f64, cost_of(0.0)? - target);
    for i in 0..samples {
        let s = i as f64 / (samples - 1) as f64;
        let r = cost_of(s)? - target;
        if r.abs() < best.0 {
            best = (r.abs(), s);
        }
        if i > 0 && previous.1 * r <= 0.0 {
            bracket = Some((previous.0, s));
            break;
        }
        previous = (s, r);
    }
    let s_star = match bracket {
        Some((mut a, mut b)) => {
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                let r = cost_of(mid)? - target;
                let ra = cost_of(a)? - target;
                if ra * r <= 0.0 {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            0.5 * (a + b)
        }
        None => best.1,
    };
    Ok(MacroDesign::uniform(cells, [0.5, s_star]))
}

/// Runs the restricted free material optimization.
pub fn macro_optimize(
    fem: &mut MacroFem,
    chart: &Chart,
    init: &MacroDesign,
    settings: &NlpSettings,
) -> Result<MacroOptResult> {
    if init.q.len() != fem.num_cells() {
        return Err(Error::structure(format!(
            "design has {} cells, mesh has {}",
            init.q.len(),
            fem.num_cells()
        )));
    }
    let x0: Vec<f64> = init.q.iter().flat_map(|q| [q[0], q[1]]).collect();
    let chart_owned = chart;
    let mut problem = MacroNlp {
        fem,
        chart: chart_owned,
    };
    let result = solve_constrained(&mut problem, &x0, settings)?;
    let design = MacroDesign {
        q: result.x.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
    };
    let tensors = fem.cell_tensors(&design, chart)?;
    let state = fem.solve(&tensors)?;
    let cost = macro_cost(fem, &design, chart, &state)?;
    Ok(MacroOptResult {
        design,
        state,
        cost,
        converged: result.converged,
        kkt_residual: result.kkt_residual,
        constraint_norm: result.constraint_norm,
        history: result.history,
    })
}

/// Persisted optimization output (`design.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignFile {
    pub format_version: u32,
    pub problem_hash: String,
    pub dim: usize,
    #[serde(rename = "H")]
    pub h: f64,
    pub c_p_hat: f64,
    pub cells: Vec<Vec<i64>>,
    pub q: Vec<[f64; 2]>,
    pub nu_e: Vec<[f64; 2]>,
    pub cost: Vec<f64>,
    pub compliance: f64,
    pub tracking: f64,
    pub cost_integral: f64,
    pub interface_integral: f64,
    pub constraint_norm: f64,
    pub converged: bool,
    pub history: Vec<OuterRecord>,
}

impl DesignFile {
    pub fn build(
        fem: &MacroFem,
        chart: &Chart,
        result: &MacroOptResult,
        problem_hash: String,
    ) -> Result<DesignFile> {
        let psi = chart.psi();
        let jref = chart.jref();
        let mut nu_e = Vec::with_capacity(result.design.q.len());
        let mut cost = Vec::with_capacity(result.design.q.len());
        for q in &result.design.q {
            let (p, _) = psi.eval(*q)?;
            nu_e.push([p[0], p[1]]);
            let (j, _) = jref.eval(*q)?;
            cost.push(j[0]);
        }
        Ok(DesignFile {
            format_version: crate::FORMAT_VERSION,
            problem_hash,
            dim: fem.mesh.dim,
            h: fem.mesh.h,
            c_p_hat: chart.c_p_hat,
            cells: fem
                .mesh
                .cells
                .iter()
                .map(|c| c[..fem.mesh.dim].to_vec())
                .collect(),
            q: result.design.q.clone(),
            nu_e,
            cost,
            compliance: result.state.compliance,
            tracking: result.state.tracking,
            cost_integral: result.cost.cost_integral,
            interface_integral: result.cost.interface_integral,
            constraint_norm: result.constraint_norm,
            converged: result.converged,
            history: result.history.clone(),
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<DesignFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("malformed design: {e}")))
    }
}
