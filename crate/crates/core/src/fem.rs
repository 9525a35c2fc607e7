//! Element-level finite element machinery on uniform grids: multilinear
//! strain matrices at Simpson points, stiffness assembly over periodic
//! degrees of freedom, and corrector right-hand sides.

use crate::error::{Error, Result};
use crate::grid::{shape_gradient, shape_value, simpson_rule, CellGrid, PeriodicMap};
use crate::sparse::{AssemblyPattern, SparseOperator};
use crate::tensor::{voigt_size, ElasticityTensor};

/// Per-quadrature-point shape values, physical gradients and Voigt strain
/// matrices for one uniform cell of size h.
#[derive(Debug, Clone)]
pub struct ElementKit {
    pub dim: usize,
    pub h: f64,
    /// Nodes per cell (2^dim).
    pub npc: usize,
    /// Quadrature points per cell (3^dim).
    pub nq: usize,
    /// Voigt components.
    pub nvoigt: usize,
    /// Element degrees of freedom (npc * dim).
    pub ndof: usize,
    /// Quadrature weights times cell volume, per point.
    pub wvol: Vec<f64>,
    /// Shape values, layout [q][a].
    pub shape: Vec<f64>,
    /// Physical shape gradients, layout [q][a][k].
    pub grad: Vec<f64>,
    /// Engineering-Voigt strain matrices, layout [q][voigt component][dof],
    /// dof = a * dim + c.
    pub strain: Vec<f64>,
}

impl ElementKit {
    pub fn new(dim: usize, h: f64) -> Self {
        let rule = simpson_rule(dim);
        let npc = 1usize << dim;
        let nq = rule.points.len();
        let nvoigt = voigt_size(dim);
        let ndof = npc * dim;
        let volume = h.powi(dim as i32);
        let mut shape = vec![0.0; nq * npc];
        let mut grad = vec![0.0; nq * npc * dim];
        let mut strain = vec![0.0; nq * nvoigt * ndof];
        let wvol: Vec<f64> = rule.weights.iter().map(|w| w * volume).collect();
        for (q, point) in rule.points.iter().enumerate() {
            for a in 0..npc {
                shape[q * npc + a] = shape_value(dim, a, point);
                let g = shape_gradient(dim, a, point);
                for k in 0..dim {
                    grad[(q * npc + a) * dim + k] = g[k] / h;
                }
            }
            // Normal components ε_kk then engineering shears γ_kl = 2 ε_kl
            // in the Voigt order fixed by tensor::voigt_tensor_pairs.
            for a in 0..npc {
                for c in 0..dim {
                    let dof = a * dim + c;
                    let dphi = |k: usize| grad[(q * npc + a) * dim + k];
                    for k in 0..dim {
                        if c == k {
                            strain[(q * nvoigt + k) * ndof + dof] = dphi(k);
                        }
                    }
                    for (slot, &(k, l)) in crate::tensor::voigt_tensor_pairs(dim)
                        .iter()
                        .enumerate()
                        .skip(dim)
                    {
                        let mut value = 0.0;
                        if c == k {
                            value += dphi(l);
                        }
                        if c == l {
                            value += dphi(k);
                        }
                        strain[(q * nvoigt + slot) * ndof + dof] = value;
                    }
                }
            }
        }
        ElementKit {
            dim,
            h,
            npc,
            nq,
            nvoigt,
            ndof,
            wvol,
            shape,
            grad,
            strain,
        }
    }

    #[inline]
    pub fn strain_row(&self, q: usize, voigt: usize) -> &[f64] {
        let base = (q * self.nvoigt + voigt) * self.ndof;
        &self.strain[base..base + self.ndof]
    }

    #[inline]
    pub fn shape_at(&self, q: usize, a: usize) -> f64 {
        self.shape[q * self.npc + a]
    }

    /// Voigt strain of an element displacement vector at quadrature point q.
    pub fn strain_of(&self, q: usize, elem_u: &[f64], out: &mut [f64]) {
        for v in 0..self.nvoigt {
            out[v] = crate::sparse::dot(self.strain_row(q, v), elem_u);
        }
    }

    /// Element stiffness Σ_s ω|K| B^T C B for one constant tensor.
    pub fn stiffness_for_tensor(&self, c: &ElasticityTensor) -> Vec<f64> {
        let mut elem = vec![0.0; self.ndof * self.ndof];
        let mut cb = vec![0.0; self.nvoigt * self.ndof];
        for q in 0..self.nq {
            for i in 0..self.nvoigt {
                for d in 0..self.ndof {
                    let mut acc = 0.0;
                    for j in 0..self.nvoigt {
                        acc += c.get(i, j) * self.strain_row(q, j)[d];
                    }
                    cb[i * self.ndof + d] = acc;
                }
            }
            let w = self.wvol[q];
            for a in 0..self.ndof {
                for b in 0..self.ndof {
                    let mut acc = 0.0;
                    for i in 0..self.nvoigt {
                        acc += self.strain_row(q, i)[a] * cb[i * self.ndof + b];
                    }
                    elem[a * self.ndof + b] += w * acc;
                }
            }
        }
        elem
    }

    /// Per-quadrature-point element stiffness blocks ω|K| B^T C B, one
    /// ndof×ndof block per point, for coefficient fields that scale a fixed
    /// base tensor pointwise.
    pub fn stiffness_blocks(&self, c: &ElasticityTensor) -> Vec<f64> {
        let mut blocks = vec![0.0; self.nq * self.ndof * self.ndof];
        for q in 0..self.nq {
            let w = self.wvol[q];
            for i in 0..self.nvoigt {
                let bi = self.strain_row(q, i);
                for j in 0..self.nvoigt {
                    let cij = c.get(i, j);
                    if cij == 0.0 {
                        continue;
                    }
                    let bj = self.strain_row(q, j);
                    let block = &mut blocks[q * self.ndof * self.ndof..];
                    for a in 0..self.ndof {
                        let f = w * cij * bi[a];
                        if f == 0.0 {
                            continue;
                        }
                        for b in 0..self.ndof {
                            block[a * self.ndof + b] += f * bj[b];
                        }
                    }
                }
            }
        }
        blocks
    }

    /// Per-point corrector load blocks −ω|K| B^T (C w_J) for every Voigt
    /// slot J, layout [q][J][dof].
    pub fn corrector_load_blocks(&self, c: &ElasticityTensor) -> Vec<f64> {
        let mut blocks = vec![0.0; self.nq * self.nvoigt * self.ndof];
        for q in 0..self.nq {
            let w = self.wvol[q];
            for slot in 0..self.nvoigt {
                // σ = C e_slot is the slot column of C.
                for i in 0..self.nvoigt {
                    let sigma_i = c.get(i, slot);
                    if sigma_i == 0.0 {
                        continue;
                    }
                    let bi = self.strain_row(q, i);
                    let out = &mut blocks[(q * self.nvoigt + slot) * self.ndof..];
                    for d in 0..self.ndof {
                        out[d] -= w * sigma_i * bi[d];
                    }
                }
            }
        }
        blocks
    }
}

/// How lattice nodes map to solver degrees of freedom.
pub enum DofMap<'a> {
    /// Every lattice node is free (used for quadratic-form checks).
    Full,
    /// Opposite faces identified.
    Periodic(&'a PeriodicMap),
}

impl DofMap<'_> {
    pub fn free_nodes(&self, grid: &CellGrid) -> usize {
        match self {
            DofMap::Full => grid.node_count(),
            DofMap::Periodic(map) => map.free_count(),
        }
    }

    #[inline]
    pub fn node_to_free(&self, node: usize) -> usize {
        match self {
            DofMap::Full => node,
            DofMap::Periodic(map) => map.free_of_node[node],
        }
    }
}

/// Assembles the elasticity stiffness matrix over the mapped degrees of
/// freedom with a per-quadrature-point tensor sampler, and optionally the
/// corrector load for a constant unit strain (Voigt slot `rhs_strain`).
pub fn assemble_elasticity(
    grid: &CellGrid,
    c_at: &mut dyn FnMut(usize, usize) -> ElasticityTensor,
    dofmap: &DofMap,
    rhs_strain: Option<usize>,
) -> Result<(SparseOperator, Option<Vec<f64>>)> {
    if let DofMap::Periodic(map) = dofmap {
        if map.grid != *grid {
            return Err(Error::structure(
                "periodic map was built for a different grid",
            ));
        }
    }
    let kit = ElementKit::new(grid.dim, grid.h());
    let dim = grid.dim;
    let nfree = dofmap.free_nodes(grid) * dim;
    let mut triplets = Vec::new();
    let mut rhs = rhs_strain.map(|_| vec![0.0; nfree]);
    let mut elem = vec![0.0; kit.ndof * kit.ndof];
    let mut elem_rhs = vec![0.0; kit.ndof];
    let mut dofs = vec![0usize; kit.ndof];
    for cell in 0..grid.cell_count() {
        elem.fill(0.0);
        elem_rhs.fill(0.0);
        for q in 0..kit.nq {
            let c = c_at(cell, q);
            let mut cb = vec![0.0; kit.nvoigt * kit.ndof];
            for i in 0..kit.nvoigt {
                for d in 0..kit.ndof {
                    let mut acc = 0.0;
                    for j in 0..kit.nvoigt {
                        acc += c.get(i, j) * kit.strain_row(q, j)[d];
                    }
                    cb[i * kit.ndof + d] = acc;
                }
            }
            let w = kit.wvol[q];
            for a in 0..kit.ndof {
                for b in 0..kit.ndof {
                    let mut acc = 0.0;
                    for i in 0..kit.nvoigt {
                        acc += kit.strain_row(q, i)[a] * cb[i * kit.ndof + b];
                    }
                    elem[a * kit.ndof + b] += w * acc;
                }
            }
            if let Some(slot) = rhs_strain {
                for d in 0..kit.ndof {
                    elem_rhs[d] -= w * cb[slot * kit.ndof + d];
                }
            }
        }
        for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
            let free = dofmap.node_to_free(node);
            for c in 0..dim {
                dofs[a * dim + c] = free * dim + c;
            }
        }
        for a in 0..kit.ndof {
            for b in 0..kit.ndof {
                triplets.push((dofs[a], dofs[b], elem[a * kit.ndof + b]));
            }
        }
        if let Some(out) = rhs.as_mut() {
            for d in 0..kit.ndof {
                out[dofs[d]] += elem_rhs[d];
            }
        }
    }
    let mut op = SparseOperator::from_triplets(nfree, triplets);
    op.symmetric = true;
    Ok((op, rhs))
}

/// Reusable assembler for stiffness operators whose coefficient is a scalar
/// field times a fixed base tensor, as in two-phase materials. The sparsity
/// pattern, element blocks and degree-of-freedom tables are built once.
pub struct ScaledAssembler {
    pub grid: CellGrid,
    pub kit: ElementKit,
    pattern: AssemblyPattern,
    /// Global dof ids per cell, layout [cell][ndof].
    cell_dofs: Vec<usize>,
    /// Per-point element stiffness for the base tensor, [q][a][b].
    base_blocks: Vec<f64>,
    /// Per-point corrector loads for the base tensor, [q][J][dof].
    load_blocks: Vec<f64>,
    pub nfree: usize,
}

impl ScaledAssembler {
    pub fn new(grid: CellGrid, map: &PeriodicMap, base: &ElasticityTensor) -> Self {
        let kit = ElementKit::new(grid.dim, grid.h());
        let dim = grid.dim;
        let nfree = map.free_count() * dim;
        let mut cell_dofs = vec![0usize; grid.cell_count() * kit.ndof];
        let mut pairs = Vec::with_capacity(grid.cell_count() * kit.ndof * kit.ndof);
        for cell in 0..grid.cell_count() {
            for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
                let free = map.free_of_node[node];
                for c in 0..dim {
                    cell_dofs[cell * kit.ndof + a * dim + c] = free * dim + c;
                }
            }
            let dofs = &cell_dofs[cell * kit.ndof..(cell + 1) * kit.ndof];
            for &ra in dofs {
                for &cb in dofs {
                    pairs.push((ra, cb));
                }
            }
        }
        let pattern = AssemblyPattern::build(nfree, &pairs);
        let base_blocks = kit.stiffness_blocks(base);
        let load_blocks = kit.corrector_load_blocks(base);
        ScaledAssembler {
            grid,
            kit,
            pattern,
            cell_dofs,
            base_blocks,
            load_blocks,
            nfree,
        }
    }

    pub fn ndof_elem(&self) -> usize {
        self.kit.ndof
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        &self.cell_dofs[cell * self.kit.ndof..(cell + 1) * self.kit.ndof]
    }

    /// Assembles the stiffness operator for per-(cell, point) scalar
    /// coefficients `scales`, layout [cell][q].
    pub fn assemble(&self, scales: &[f64]) -> SparseOperator {
        let kit = &self.kit;
        let nd = kit.ndof;
        let mut op = self.pattern.zero_operator(true);
        let mut elem = vec![0.0; nd * nd];
        let mut slot_cursor = 0usize;
        for cell in 0..self.grid.cell_count() {
            elem.fill(0.0);
            for q in 0..kit.nq {
                let s = scales[cell * kit.nq + q];
                let block = &self.base_blocks[q * nd * nd..(q + 1) * nd * nd];
                for (e, b) in elem.iter_mut().zip(block) {
                    *e += s * b;
                }
            }
            for value in elem.iter() {
                op.values[self.pattern.slots[slot_cursor] as usize] += value;
                slot_cursor += 1;
            }
        }
        op
    }

    /// Assembles the corrector load vector for Voigt slot J with the same
    /// scalar coefficients.
    pub fn assemble_load(&self, scales: &[f64], slot: usize) -> Vec<f64> {
        let kit = &self.kit;
        let nd = kit.ndof;
        let mut rhs = vec![0.0; self.nfree];
        for cell in 0..self.grid.cell_count() {
            let dofs = self.cell_dofs(cell);
            for q in 0..kit.nq {
                let s = scales[cell * kit.nq + q];
                let block = &self.load_blocks[(q * kit.nvoigt + slot) * nd..];
                for d in 0..nd {
                    rhs[dofs[d]] += s * block[d];
                }
            }
        }
        rhs
    }

    /// Translation kernel vectors of the periodic operator, one per
    /// displacement component.
    pub fn translation_kernel(&self) -> Vec<Vec<f64>> {
        let dim = self.grid.dim;
        (0..dim)
            .map(|c| {
                let mut v = vec![0.0; self.nfree];
                for node in 0..self.nfree / dim {
                    v[node * dim + c] = 1.0;
                }
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, periodic_dof_map, NodalField};
    use crate::tensor::{iso_from_nu_e, tensor_from_iso};

    fn unit_tensor_2d() -> ElasticityTensor {
        tensor_from_iso(&iso_from_nu_e(0.25, 10.0, 2).unwrap())
    }

    #[test]
    fn assembled_matrix_is_symmetric() {
        let grid = build_grid(2, 4).unwrap();
        let map = periodic_dof_map(&grid);
        let c = unit_tensor_2d();
        let (op, _) =
            assemble_elasticity(&grid, &mut |_, _| c.clone(), &DofMap::Periodic(&map), None)
                .unwrap();
        assert_eq!(op.max_asymmetry(), 0.0);
    }

    #[test]
    fn constant_tensor_has_zero_corrector_load() {
        let grid = build_grid(2, 4).unwrap();
        let map = periodic_dof_map(&grid);
        let c = unit_tensor_2d();
        for slot in 0..3 {
            let (_, rhs) = assemble_elasticity(
                &grid,
                &mut |_, _| c.clone(),
                &DofMap::Periodic(&map),
                Some(slot),
            )
            .unwrap();
            let rhs = rhs.unwrap();
            let worst = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-12, "slot {slot}: residual load {worst}");
        }
    }

    // Hand-assembled 4-node element oracle: one cell, unit material,
    // rigid translations must be in the kernel.
    #[test]
    fn single_cell_row_sums_vanish_on_translations() {
        let grid = build_grid(2, 2).unwrap();
        let c = unit_tensor_2d();
        let (op, _) =
            assemble_elasticity(&grid, &mut |_, _| c.clone(), &DofMap::Full, None).unwrap();
        let nodes = grid.node_count();
        for comp in 0..2 {
            let mut t = vec![0.0; nodes * 2];
            for node in 0..nodes {
                t[node * 2 + comp] = 1.0;
            }
            let mut out = vec![0.0; nodes * 2];
            op.matvec(&t, &mut out);
            let worst = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-12);
        }

        // Independent oracle: assemble the element matrix for the single
        // reference cell by direct Simpson summation of C B(a) : B(b).
        let kit = ElementKit::new(2, grid.h());
        let direct = kit.stiffness_for_tensor(&c);
        let mut ea = vec![0.0; 3];
        let mut eb = vec![0.0; 3];
        let mut expected = vec![0.0; kit.ndof * kit.ndof];
        for q in 0..kit.nq {
            for a in 0..kit.ndof {
                let mut ua = vec![0.0; kit.ndof];
                ua[a] = 1.0;
                kit.strain_of(q, &ua, &mut ea);
                for b in 0..kit.ndof {
                    let mut ub = vec![0.0; kit.ndof];
                    ub[b] = 1.0;
                    kit.strain_of(q, &ub, &mut eb);
                    let mut ce = vec![0.0; 3];
                    c.apply(&eb, &mut ce);
                    expected[a * kit.ndof + b] += kit.wvol[q] * crate::sparse::dot(&ea, &ce);
                }
            }
        }
        for (x, y) in direct.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    // Patch test: a linear displacement field with constant material has
    // zero internal residual away from the boundary.
    #[test]
    fn patch_test_linear_field() {
        let grid = build_grid(2, 5).unwrap();
        let c = unit_tensor_2d();
        let (op, _) =
            assemble_elasticity(&grid, &mut |_, _| c.clone(), &DofMap::Full, None).unwrap();
        let mut u = NodalField::zeros(grid, 2);
        for node in 0..grid.node_count() {
            let p = grid.node_position(&grid.node_coords(node));
            u.set(node, 0, 0.3 * p[0] - 0.1 * p[1]);
            u.set(node, 1, 0.2 * p[0] + 0.4 * p[1]);
        }
        let mut residual = vec![0.0; grid.node_count() * 2];
        op.matvec(&u.values, &mut residual);
        let scale = u.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for node in 0..grid.node_count() {
            let coords = grid.node_coords(node);
            let interior = (0..2).all(|k| coords[k] > 0 && coords[k] < grid.n);
            if interior {
                for comp in 0..2 {
                    assert!(
                        residual[node * 2 + comp].abs() <= 1e-12 * scale.max(1.0),
                        "interior residual at node {node}"
                    );
                }
            }
        }
    }

    // Periodic reduction preserves the quadratic form of periodic fields.
    #[test]
    fn periodic_reduction_preserves_energy() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 4).unwrap();
        let map = periodic_dof_map(&grid);
        let c = unit_tensor_2d();
        let (full, _) =
            assemble_elasticity(&grid, &mut |_, _| c.clone(), &DofMap::Full, None).unwrap();
        let (reduced, _) =
            assemble_elasticity(&grid, &mut |_, _| c.clone(), &DofMap::Periodic(&map), None)
                .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut free = vec![0.0; map.free_count() * 2];
        for v in free.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let lattice = map.expand(&free, 2);
        let e_full = full.quadratic_form(&lattice.values);
        let e_reduced = reduced.quadratic_form(&free);
        assert!((e_full - e_reduced).abs() <= 1e-12 * e_full.abs().max(1.0));
    }

    #[test]
    fn scaled_assembler_matches_generic_path() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 3).unwrap();
        let map = periodic_dof_map(&grid);
        let base = unit_tensor_2d();
        let assembler = ScaledAssembler::new(grid, &map, &base);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scales: Vec<f64> = (0..grid.cell_count() * assembler.kit.nq)
            .map(|_| rng.gen_range(0.1..1.0))
            .collect();
        let fast = assembler.assemble(&scales);
        let nq = assembler.kit.nq;
        let (slow, rhs_slow) = assemble_elasticity(
            &grid,
            &mut |cell, q| base.scaled(scales[cell * nq + q]),
            &DofMap::Periodic(&map),
            Some(1),
        )
        .unwrap();
        for r in 0..fast.n {
            for k in fast.row_ptr[r]..fast.row_ptr[r + 1] {
                let c = fast.col_idx[k];
                let mut other = 0.0;
                for m in slow.row_ptr[r]..slow.row_ptr[r + 1] {
                    if slow.col_idx[m] == c {
                        other = slow.values[m];
                    }
                }
                assert!((fast.values[k] - other).abs() < 1e-12);
            }
        }
        let fast_rhs = assembler.assemble_load(&scales, 1);
        for (a, b) in fast_rhs.iter().zip(rhs_slow.unwrap().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
