//! Uniform quadrilateral/hexahedral meshes on the unit cell, multilinear
//! shape functions, tensor-product Simpson quadrature and the periodic
//! degree-of-freedom identification.
//!
//! Node and cell indices are row-major with the last axis running fastest,
//! so every index map is deterministic.

use crate::error::{Error, Result};

/// Uniform grid on [0,1]^dim with n cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGrid {
    pub dim: usize,
    pub n: usize,
}

/// Builds a grid; `n >= 2` keeps the periodic identification nontrivial.
pub fn build_grid(dim: usize, n: usize) -> Result<CellGrid> {
    if dim != 2 && dim != 3 {
        return Err(Error::domain(format!("dim must be 2 or 3, got {dim}")));
    }
    if n < 2 {
        return Err(Error::domain(format!("n must be at least 2, got {n}")));
    }
    Ok(CellGrid { dim, n })
}

impl CellGrid {
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    pub fn cell_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Number of corner nodes per cell.
    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn node_index(&self, coords: &[usize]) -> usize {
        let m = self.nodes_per_axis();
        coords.iter().fold(0, |acc, &c| acc * m + c)
    }

    pub fn node_coords(&self, mut index: usize) -> [usize; 3] {
        let m = self.nodes_per_axis();
        let mut coords = [0usize; 3];
        for k in (0..self.dim).rev() {
            coords[k] = index % m;
            index /= m;
        }
        coords
    }

    pub fn cell_index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.n + c)
    }

    pub fn cell_coords(&self, mut index: usize) -> [usize; 3] {
        let mut coords = [0usize; 3];
        for k in (0..self.dim).rev() {
            coords[k] = index % self.n;
            index /= self.n;
        }
        coords
    }

    /// Physical position of a node.
    pub fn node_position(&self, coords: &[usize]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = coords[k] as f64 * self.h();
        }
        x
    }

    /// Corner node indices of a cell; local ordering follows the binary
    /// offsets of the corner with the last axis fastest.
    pub fn cell_nodes(&self, cell: usize) -> Vec<usize> {
        let cc = self.cell_coords(cell);
        let npc = self.nodes_per_cell();
        let mut nodes = Vec::with_capacity(npc);
        for a in 0..npc {
            let mut coords = [0usize; 3];
            for k in 0..self.dim {
                let bit = (a >> (self.dim - 1 - k)) & 1;
                coords[k] = cc[k] + bit;
            }
            nodes.push(self.node_index(&coords[..self.dim]));
        }
        nodes
    }
}

/// Scalar or vector field with one value per lattice node and component,
/// stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub grid: CellGrid,
    pub components: usize,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(grid: CellGrid, components: usize) -> Self {
        NodalField {
            grid,
            components,
            values: vec![0.0; components * grid.node_count()],
        }
    }

    pub fn constant(grid: CellGrid, components: usize, value: f64) -> Self {
        NodalField {
            grid,
            components,
            values: vec![value; components * grid.node_count()],
        }
    }

    pub fn from_values(grid: CellGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != components * grid.node_count() {
            return Err(Error::structure(format!(
                "field length {} does not match {} components on {} nodes",
                values.len(),
                components,
                grid.node_count()
            )));
        }
        Ok(NodalField {
            grid,
            components,
            values,
        })
    }

    #[inline]
    pub fn get(&self, node: usize, component: usize) -> f64 {
        self.values[node * self.components + component]
    }

    #[inline]
    pub fn set(&mut self, node: usize, component: usize, value: f64) {
        self.values[node * self.components + component] = value;
    }
}

/// Tensor-product Simpson rule on the reference cell [0,1]^dim.
///
/// Weights sum to one and the rule is exact for polynomials of degree
/// three per axis.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dim: usize,
    /// Reference coordinates of the quadrature points.
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

pub fn simpson_rule(dim: usize) -> QuadratureRule {
    let pts_1d = [0.0, 0.5, 1.0];
    let wts_1d = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
    let count = 3usize.pow(dim as u32);
    let mut points = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for s in 0..count {
        let mut p = [0.0; 3];
        let mut w = 1.0;
        let mut rest = s;
        for k in (0..dim).rev() {
            let i = rest % 3;
            rest /= 3;
            p[k] = pts_1d[i];
            w *= wts_1d[i];
        }
        points.push(p);
        weights.push(w);
    }
    QuadratureRule {
        dim,
        points,
        weights,
    }
}

/// Multilinear shape function `a` of the reference cell at reference
/// coordinates `x`.
pub fn shape_value(dim: usize, a: usize, x: &[f64; 3]) -> f64 {
    let mut v = 1.0;
    for k in 0..dim {
        let bit = (a >> (dim - 1 - k)) & 1;
        v *= if bit == 1 { x[k] } else { 1.0 - x[k] };
    }
    v
}

/// Gradient of shape function `a` with respect to reference coordinates.
pub fn shape_gradient(dim: usize, a: usize, x: &[f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for d in 0..dim {
        let mut v = 1.0;
        for k in 0..dim {
            let bit = (a >> (dim - 1 - k)) & 1;
            if k == d {
                v *= if bit == 1 { 1.0 } else { -1.0 };
            } else {
                v *= if bit == 1 { x[k] } else { 1.0 - x[k] };
            }
        }
        g[d] = v;
    }
    g
}

/// Identification of opposite-face nodes for periodic fields.
///
/// Every lattice node maps to a master in [0, n)^dim; the free
/// (master) count is n^dim per component.
#[derive(Debug, Clone)]
pub struct PeriodicMap {
    pub grid: CellGrid,
    /// Lattice node -> compact master index in [0, n^dim).
    pub free_of_node: Vec<usize>,
    /// Compact master index -> canonical lattice node.
    pub node_of_free: Vec<usize>,
    /// Number of lattice nodes identified with each master.
    pub multiplicity: Vec<usize>,
}

pub fn periodic_dof_map(grid: &CellGrid) -> PeriodicMap {
    let free_count = grid.cell_count();
    let mut free_of_node = vec![0usize; grid.node_count()];
    let mut node_of_free = vec![0usize; free_count];
    let mut multiplicity = vec![0usize; free_count];
    for node in 0..grid.node_count() {
        let coords = grid.node_coords(node);
        let mut wrapped = [0usize; 3];
        for k in 0..grid.dim {
            wrapped[k] = coords[k] % grid.n;
        }
        let free = wrapped[..grid.dim]
            .iter()
            .fold(0, |acc, &c| acc * grid.n + c);
        free_of_node[node] = free;
        multiplicity[free] += 1;
        if wrapped[..grid.dim] == coords[..grid.dim] {
            node_of_free[free] = node;
        }
    }
    PeriodicMap {
        grid: *grid,
        free_of_node,
        node_of_free,
        multiplicity,
    }
}

impl PeriodicMap {
    pub fn free_count(&self) -> usize {
        self.node_of_free.len()
    }

    /// Restricts a full-lattice field to master values.
    pub fn restrict(&self, field: &NodalField) -> Vec<f64> {
        let comps = field.components;
        let mut out = vec![0.0; self.free_count() * comps];
        for (free, &node) in self.node_of_free.iter().enumerate() {
            for c in 0..comps {
                out[free * comps + c] = field.get(node, c);
            }
        }
        out
    }

    /// Expands master values to the full lattice (slaves copy masters).
    pub fn expand(&self, free_values: &[f64], components: usize) -> NodalField {
        let mut field = NodalField::zeros(self.grid, components);
        for node in 0..self.grid.node_count() {
            let free = self.free_of_node[node];
            for c in 0..components {
                field.set(node, c, free_values[free * components + c]);
            }
        }
        field
    }

    /// Folds per-lattice-node values onto masters by summation; the adjoint
    /// of `expand` (used for gradients of functionals of periodic fields).
    pub fn fold_sum(&self, lattice_values: &[f64], components: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.free_count() * components];
        for node in 0..self.grid.node_count() {
            let free = self.free_of_node[node];
            for c in 0..components {
                out[free * components + c] += lattice_values[node * components + c];
            }
        }
        out
    }
}
