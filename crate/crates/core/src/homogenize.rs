//! Cell corrector problems, effective elasticity tensors C*[v] and the
//! homogenization constraint residuals with their phase-field gradients.
//!
//! The two-phase material interpolates C[v] = χ[v] C¹ + (1 − χ[v]) δC¹ with
//! χ[v] = (1 + v)⁴/16, so every pointwise tensor is a scalar multiple of the
//! stiff-phase tensor and assembly reduces to scalar coefficient fields.

use crate::error::{Error, Result};
use crate::fem::ScaledAssembler;
use crate::grid::{periodic_dof_map, CellGrid, NodalField, PeriodicMap};
use crate::sparse::{solve_spd, SolveStats};
use crate::tensor::{
    tensor_from_iso, voigt_upper_len, voigt_upper_pairs, ElasticityTensor, IsoParams, DELTA_MIN,
};

/// Phase indicator profile χ[v] = (1 + v)⁴ / 16.
#[inline]
pub fn chi(v: f64) -> f64 {
    let t = 1.0 + v;
    t * t * t * t / 16.0
}

/// Derivative χ′[v] = (1 + v)³ / 4.
#[inline]
pub fn chi_prime(v: f64) -> f64 {
    let t = 1.0 + v;
    t * t * t / 4.0
}

/// Two-phase microscopic material: stiff phase `base`, soft phase scaled
/// by `delta`.
#[derive(Debug, Clone, Copy)]
pub struct MicroMaterial {
    pub base: IsoParams,
    pub delta: f64,
}

impl MicroMaterial {
    pub fn new(base: IsoParams, delta: f64) -> Result<Self> {
        if !(delta >= DELTA_MIN && delta <= 1.0) {
            return Err(Error::domain(format!(
                "delta must lie in [{DELTA_MIN}, 1], got {delta}"
            )));
        }
        Ok(MicroMaterial { base, delta })
    }

    /// Stiff-phase tensor C¹.
    pub fn base_tensor(&self) -> ElasticityTensor {
        tensor_from_iso(&self.base)
    }

    /// Pointwise stiffness scale s(v) with C[v] = s(v) C¹.
    #[inline]
    pub fn stiffness_scale(&self, v: f64) -> f64 {
        self.delta + (1.0 - self.delta) * chi(v)
    }

    /// Derivative of the stiffness scale with respect to v.
    #[inline]
    pub fn stiffness_scale_prime(&self, v: f64) -> f64 {
        (1.0 - self.delta) * chi_prime(v)
    }
}

/// Blended elasticity tensor χ[v] C¹ + (1 − χ[v]) C².
pub fn material_at(v: f64, mat: &MicroMaterial) -> ElasticityTensor {
    mat.base_tensor().scaled(mat.stiffness_scale(v))
}

/// Cell correctors u^{kl}, one periodic mean-zero vector field per Voigt
/// slot, stored over master degrees of freedom.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub grid: CellGrid,
    /// Master-dof displacement vectors, one per Voigt slot.
    pub fields: Vec<Vec<f64>>,
    /// Worst relative residual over all solves.
    pub worst_residual: f64,
    /// Total conjugate-gradient iterations spent.
    pub iterations: usize,
}

impl CorrectorSet {
    /// Expands corrector `slot` to a full-lattice vector field.
    pub fn expand(&self, map: &PeriodicMap, slot: usize) -> NodalField {
        map.expand(&self.fields[slot], self.grid.dim)
    }
}

/// Stateful homogenization engine: owns the assembler, the periodic map and
/// a warm-start cache so repeated solves during optimization stay cheap.
pub struct Homogenizer {
    pub grid: CellGrid,
    pub map: PeriodicMap,
    pub mat: MicroMaterial,
    pub tol: f64,
    assembler: ScaledAssembler,
    kernel: Vec<Vec<f64>>,
    warm: Vec<Option<Vec<f64>>>,
}

impl Homogenizer {
    pub fn new(grid: CellGrid, mat: MicroMaterial, tol: f64) -> Self {
        let map = periodic_dof_map(&grid);
        let assembler = ScaledAssembler::new(grid, &map, &mat.base_tensor());
        let kernel = assembler.translation_kernel();
        let nvoigt = crate::tensor::voigt_size(grid.dim);
        Homogenizer {
            grid,
            map,
            mat,
            tol,
            assembler,
            kernel,
            warm: vec![None; nvoigt],
        }
    }

    /// Discards the warm-start cache (used between unrelated fields).
    pub fn reset_warm_start(&mut self) {
        for w in self.warm.iter_mut() {
            *w = None;
        }
    }

    /// Stiffness scales s(v) at every quadrature point, layout [cell][q].
    pub fn scales(&self, v: &NodalField) -> Vec<f64> {
        let interp = self.interpolated(v);
        interp
            .into_iter()
            .map(|vq| self.mat.stiffness_scale(vq))
            .collect()
    }

    /// Interpolated phase-field values at quadrature points, layout [cell][q].
    fn interpolated(&self, v: &NodalField) -> Vec<f64> {
        let kit = &self.assembler.kit;
        let grid = &self.grid;
        let mut out = vec![0.0; grid.cell_count() * kit.nq];
        let mut corner = vec![0.0; kit.npc];
        for cell in 0..grid.cell_count() {
            for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
                corner[a] = v.values[node];
            }
            for q in 0..kit.nq {
                let mut interp = 0.0;
                for a in 0..kit.npc {
                    interp += kit.shape_at(q, a) * corner[a];
                }
                out[cell * kit.nq + q] = interp;
            }
        }
        out
    }

    /// Solves the corrector systems for the phase field `v`.
    pub fn solve_correctors(&mut self, v: &NodalField) -> Result<CorrectorSet> {
        if v.grid != self.grid || v.components != 1 {
            return Err(Error::structure("phase field does not match the grid"));
        }
        let scales = self.scales(v);
        let op = self.assembler.assemble(&scales);
        let nvoigt = crate::tensor::voigt_size(self.grid.dim);
        let mut fields = Vec::with_capacity(nvoigt);
        let mut worst = 0.0f64;
        let mut iterations = 0;
        for slot in 0..nvoigt {
            let rhs = self.assembler.assemble_load(&scales, slot);
            let warm = self.warm[slot].as_deref();
            let (x, stats): (Vec<f64>, SolveStats) =
                solve_spd(&op, &rhs, &self.kernel, self.tol, warm).map_err(|e| match e {
                    Error::Solver {
                        msg,
                        residual,
                        iterations,
                    } => Error::Solver {
                        msg: format!("corrector slot {slot}: {msg}"),
                        residual,
                        iterations,
                    },
                    other => other,
                })?;
            worst = worst.max(stats.residual);
            iterations += stats.iterations;
            self.warm[slot] = Some(x.clone());
            fields.push(x);
        }
        Ok(CorrectorSet {
            grid: self.grid,
            fields,
            worst_residual: worst,
            iterations,
        })
    }

    /// Effective tensor C*[v] evaluated with the assembly quadrature.
    pub fn effective_tensor(&self, v: &NodalField, correctors: &CorrectorSet) -> ElasticityTensor {
        let kit = &self.assembler.kit;
        let nvoigt = kit.nvoigt;
        let scales = self.scales(v);
        let base = self.mat.base_tensor();
        let mut c_star = ElasticityTensor::zeros(self.grid.dim);
        let mut elem_u = vec![vec![0.0; kit.ndof]; nvoigt];
        let mut a = vec![vec![0.0; nvoigt]; nvoigt];
        let mut va = vec![vec![0.0; nvoigt]; nvoigt];
        for cell in 0..self.grid.cell_count() {
            let dofs = self.assembler.cell_dofs(cell);
            for slot in 0..nvoigt {
                for (d, &dof) in dofs.iter().enumerate() {
                    elem_u[slot][d] = correctors.fields[slot][dof];
                }
            }
            for q in 0..kit.nq {
                let s = scales[cell * kit.nq + q] * kit.wvol[q];
                for slot in 0..nvoigt {
                    kit.strain_of(q, &elem_u[slot], &mut a[slot]);
                    a[slot][slot] += 1.0;
                    base.apply(&a[slot], &mut va[slot]);
                }
                for i in 0..nvoigt {
                    for j in i..nvoigt {
                        let value = s * crate::sparse::dot(&va[j], &a[i]);
                        let old = c_star.get(i, j);
                        c_star.set(i, j, old + value);
                    }
                }
            }
        }
        for i in 0..nvoigt {
            for j in 0..i {
                let value = c_star.get(j, i);
                c_star.set(i, j, value);
            }
        }
        c_star
    }

    /// Constraint residuals g = C*[v] − target on the Voigt upper triangle,
    /// row-major.
    pub fn constraint_residuals(
        &self,
        v: &NodalField,
        correctors: &CorrectorSet,
        target: &ElasticityTensor,
    ) -> Vec<f64> {
        let c_star = self.effective_tensor(v, correctors);
        c_star
            .upper_triangle()
            .iter()
            .zip(target.upper_triangle())
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Gradients of every constraint with respect to the nodal phase-field
    /// values, one full-lattice field per upper-triangle component.
    ///
    /// Only the explicit partial derivative through χ′[v] enters: the
    /// constraint is stationary with respect to the correctors at the
    /// solution of the cell problems, so their sensitivities drop out.
    pub fn constraint_gradients(
        &self,
        v: &NodalField,
        correctors: &CorrectorSet,
    ) -> Vec<Vec<f64>> {
        let kit = &self.assembler.kit;
        let nvoigt = kit.nvoigt;
        let ncons = voigt_upper_len(self.grid.dim);
        let pairs = voigt_upper_pairs(self.grid.dim);
        let interp = self.interpolated(v);
        let base = self.mat.base_tensor();
        let node_count = self.grid.node_count();
        let mut grads = vec![vec![0.0; node_count]; ncons];
        let mut elem_u = vec![vec![0.0; kit.ndof]; nvoigt];
        let mut a = vec![vec![0.0; nvoigt]; nvoigt];
        let mut va = vec![vec![0.0; nvoigt]; nvoigt];
        let mut qforms = vec![0.0; ncons];
        for cell in 0..self.grid.cell_count() {
            let dofs = self.assembler.cell_dofs(cell);
            let nodes = self.grid.cell_nodes(cell);
            for slot in 0..nvoigt {
                for (d, &dof) in dofs.iter().enumerate() {
                    elem_u[slot][d] = correctors.fields[slot][dof];
                }
            }
            for q in 0..kit.nq {
                let vq = interp[cell * kit.nq + q];
                let factor = kit.wvol[q] * self.mat.stiffness_scale_prime(vq);
                if factor == 0.0 {
                    continue;
                }
                for slot in 0..nvoigt {
                    kit.strain_of(q, &elem_u[slot], &mut a[slot]);
                    a[slot][slot] += 1.0;
                    base.apply(&a[slot], &mut va[slot]);
                }
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    qforms[k] = crate::sparse::dot(&va[j], &a[i]);
                }
                for (local, &node) in nodes.iter().enumerate() {
                    let weight = factor * kit.shape_at(q, local);
                    if weight == 0.0 {
                        continue;
                    }
                    for k in 0..ncons {
                        grads[k][node] += weight * qforms[k];
                    }
                }
            }
        }
        grads
    }
}

/// One-shot corrector solve (see [`Homogenizer`] for repeated use).
pub fn solve_correctors(
    grid: CellGrid,
    v: &NodalField,
    mat: &MicroMaterial,
    tol: f64,
) -> Result<CorrectorSet> {
    Homogenizer::new(grid, *mat, tol).solve_correctors(v)
}

/// One-shot effective tensor for a phase field (solves correctors first).
pub fn effective_tensor_of(
    grid: CellGrid,
    v: &NodalField,
    mat: &MicroMaterial,
    tol: f64,
) -> Result<ElasticityTensor> {
    let mut homog = Homogenizer::new(grid, *mat, tol);
    let correctors = homog.solve_correctors(v)?;
    Ok(homog.effective_tensor(v, &correctors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::tensor::iso_from_nu_e;
    use approx::assert_relative_eq;

    fn material_2d(delta: f64) -> MicroMaterial {
        MicroMaterial::new(iso_from_nu_e(0.25, 10.0, 2).unwrap(), delta).unwrap()
    }

    #[test]
    fn chi_endpoints() {
        assert_eq!(chi(1.0), 1.0);
        assert_eq!(chi(-1.0), 0.0);
        assert_eq!(chi(0.0), 1.0 / 16.0);
        assert_eq!(chi_prime(-1.0), 0.0);
        assert_relative_eq!(chi_prime(1.0), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn material_blend_endpoints() {
        let mat = material_2d(1e-4);
        let c1 = mat.base_tensor();
        let hard = material_at(1.0, &mat);
        for (a, b) in hard.voigt.iter().zip(&c1.voigt) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        let soft = material_at(-1.0, &mat);
        for (a, b) in soft.voigt.iter().zip(&c1.voigt) {
            assert_relative_eq!(*a, 1e-4 * b, max_relative = 1e-15, epsilon = 1e-18);
        }
        let mid = material_at(0.0, &mat);
        let expect = 1.0 / 16.0 + (15.0 / 16.0) * 1e-4;
        for (a, b) in mid.voigt.iter().zip(&c1.voigt) {
            assert_relative_eq!(*a, expect * b, max_relative = 1e-13, epsilon = 1e-18);
        }
    }

    #[test]
    fn homogeneous_cell_recovers_base_tensor() {
        let grid = build_grid(2, 8).unwrap();
        let mat = material_2d(1e-4);
        let v = NodalField::constant(grid, 1, 1.0);
        let mut homog = Homogenizer::new(grid, mat, 1e-10);
        let correctors = homog.solve_correctors(&v).unwrap();
        for field in &correctors.fields {
            let worst = field.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(worst < 1e-10, "corrector should vanish, got {worst}");
        }
        let c_star = homog.effective_tensor(&v, &correctors);
        let c1 = mat.base_tensor();
        for (a, b) in c_star.voigt.iter().zip(&c1.voigt) {
            assert!((a - b).abs() <= 1e-8 * c1.get(0, 0));
        }
    }

    #[test]
    fn soft_cell_recovers_scaled_tensor() {
        let grid = build_grid(2, 4).unwrap();
        let mat = material_2d(1e-4);
        let v = NodalField::constant(grid, 1, -1.0);
        let c_star = effective_tensor_of(grid, &v, &mat, 1e-10).unwrap();
        let expect = mat.base_tensor().scaled(1e-4);
        for (a, b) in c_star.voigt.iter().zip(&expect.voigt) {
            assert!((a - b).abs() <= 1e-8 * expect.get(0, 0).abs().max(1e-30));
        }
    }

    #[test]
    fn delta_one_makes_any_field_homogeneous() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 4).unwrap();
        let mat = material_2d(1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let map = periodic_dof_map(&grid);
        let masters: Vec<f64> = (0..map.free_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let v = map.expand(&masters, 1);
        let mut homog = Homogenizer::new(grid, mat, 1e-10);
        let correctors = homog.solve_correctors(&v).unwrap();
        for field in &correctors.fields {
            let worst = field.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(worst < 1e-10);
        }
        let c_star = homog.effective_tensor(&v, &correctors);
        let c1 = mat.base_tensor();
        for (a, b) in c_star.voigt.iter().zip(&c1.voigt) {
            assert!((a - b).abs() <= 1e-8 * c1.get(0, 0));
        }
    }

    // Stripes along the second axis: u^{11} depends on y₁ only and its
    // second component vanishes.
    #[test]
    fn vertical_laminate_corrector_is_one_dimensional() {
        let grid = build_grid(2, 16).unwrap();
        let mat = material_2d(0.25);
        let mut v = NodalField::zeros(grid, 1);
        for node in 0..grid.node_count() {
            let coords = grid.node_coords(node);
            let y1 = coords[0] as f64 * grid.h();
            v.values[node] = if (0.25..0.75).contains(&y1) { -1.0 } else { 1.0 };
        }
        let mut homog = Homogenizer::new(grid, mat, 1e-12);
        let correctors = homog.solve_correctors(&v).unwrap();
        let u11 = correctors.expand(&homog.map, 0);
        for node in 0..grid.node_count() {
            assert!(u11.get(node, 1).abs() < 1e-8, "u2 should vanish");
        }
        for i in 0..grid.nodes_per_axis() {
            let reference = u11.get(grid.node_index(&[i, 0]), 0);
            for j in 0..grid.nodes_per_axis() {
                let value = u11.get(grid.node_index(&[i, j]), 0);
                assert!((value - reference).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn residuals_are_self_consistent() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 8).unwrap();
        let mat = material_2d(0.1);
        let map = periodic_dof_map(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let masters: Vec<f64> = (0..map.free_count())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        let v = map.expand(&masters, 1);
        let mut homog = Homogenizer::new(grid, mat, 1e-11);
        let correctors = homog.solve_correctors(&v).unwrap();
        let c_star = homog.effective_tensor(&v, &correctors);
        let g = homog.constraint_residuals(&v, &correctors, &c_star);
        assert!(g.iter().all(|x| x.abs() <= 1e-10));
        assert_eq!(g.len(), 6);

        let mut perturbed = c_star.clone();
        perturbed.set(0, 0, c_star.get(0, 0) + 1.0);
        let g = homog.constraint_residuals(&v, &correctors, &perturbed);
        assert!((g[0] + 1.0).abs() <= 1e-10);
        assert!(g[1..].iter().all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn effective_tensor_is_symmetric_for_random_fields() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 8).unwrap();
        let mat = material_2d(1e-2);
        let map = periodic_dof_map(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..3 {
            let masters: Vec<f64> = (0..map.free_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let v = map.expand(&masters, 1);
            let mut homog = Homogenizer::new(grid, mat, 1e-11);
            let correctors = homog.solve_correctors(&v).unwrap();
            let c_star = homog.effective_tensor(&v, &correctors);
            assert!(c_star.asymmetry() <= 1e-10);
        }
    }

    // Reuss/Voigt bracket: the quadratic form of C* lies between the
    // harmonic and arithmetic means of C[v] over the cell.
    #[test]
    fn effective_tensor_between_reuss_and_voigt_means() {
        use rand::{Rng, SeedableRng};
        let grid = build_grid(2, 8).unwrap();
        let mat = material_2d(0.05);
        let map = periodic_dof_map(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let masters: Vec<f64> = (0..map.free_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let v = map.expand(&masters, 1);
        let mut homog = Homogenizer::new(grid, mat, 1e-11);
        let correctors = homog.solve_correctors(&v).unwrap();
        let c_star = homog.effective_tensor(&v, &correctors);

        let scales = homog.scales(&v);
        let rule = crate::grid::simpson_rule(2);
        let wvol: Vec<f64> = rule
            .weights
            .iter()
            .map(|w| w * grid.h() * grid.h())
            .collect();
        let mut arith = 0.0;
        let mut harm_inv = 0.0;
        for cell in 0..grid.cell_count() {
            for (q, w) in wvol.iter().enumerate() {
                let s = scales[cell * wvol.len() + q];
                arith += w * s;
                harm_inv += w / s;
            }
        }
        let harm = 1.0 / harm_inv;
        let base = mat.base_tensor();
        let mut strain = vec![0.0; 3];
        let mut out = vec![0.0; 3];
        for _ in 0..10 {
            for s in strain.iter_mut() {
                *s = rng.gen_range(-1.0..1.0);
            }
            base.apply(&strain, &mut out);
            let base_form = crate::sparse::dot(&strain, &out);
            c_star.apply(&strain, &mut out);
            let star_form = crate::sparse::dot(&strain, &out);
            assert!(star_form <= arith * base_form + 1e-8);
            assert!(star_form >= harm * base_form - 1e-8);
        }
    }
}
