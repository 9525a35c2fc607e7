//! Phase-field functionals on the periodic unit cell: volume of the hard
//! phase, Modica–Mortola interface energy, the microscopic cost J_micro and
//! their exact discrete gradients, plus the manufacturability bridge masks.

use crate::error::{Error, Result};
use crate::fem::ElementKit;
use crate::grid::{CellGrid, NodalField};
use crate::homogenize::{chi, chi_prime};
use serde::{Deserialize, Serialize};

/// Scalar phase field on the cell lattice, values in [−1, 1] after
/// projection; +1 marks the hard phase, −1 the soft phase.
pub type PhaseField = NodalField;

/// Double-well potential W(v) = 9/16 (v² − 1)².
#[inline]
pub fn double_well(v: f64) -> f64 {
    let t = v * v - 1.0;
    9.0 / 16.0 * t * t
}

/// W′(v) = 9/4 v (v² − 1).
#[inline]
pub fn double_well_prime(v: f64) -> f64 {
    9.0 / 4.0 * v * (v * v - 1.0)
}

/// Bridge layout variants at the cell boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BridgeVariant {
    /// One bridge centered on every face.
    #[serde(rename = "midfaces")]
    Midfaces,
    /// One bridge around every cell corner.
    #[serde(rename = "corners")]
    Corners,
    /// Bridges at corners and face centers.
    #[serde(rename = "corners-and-midfaces")]
    CornersAndMidfaces,
    /// Corner bridges of the three-dimensional cell.
    #[serde(rename = "corners3d")]
    Corners3d,
}

/// Geometry of the fixed material bridges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub variant: BridgeVariant,
    /// Fraction of the cell edge occupied by each bridge component.
    pub width: f64,
    /// Interface width of the dilation around the hard set.
    pub sigma: f64,
}

/// Cost weights of the microscopic functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub c_v: f64,
    pub c_p: f64,
    pub c_p_hat: f64,
}

impl CostWeights {
    pub fn new(c_v: f64, c_p: f64, c_p_hat: f64) -> Result<Self> {
        if !(c_p > 0.0) {
            return Err(Error::domain(format!("c_P must be positive, got {c_p}")));
        }
        if c_v < 0.0 || c_p_hat < 0.0 {
            return Err(Error::domain("c_V and ĉ_P must be nonnegative"));
        }
        Ok(CostWeights { c_v, c_p, c_p_hat })
    }
}

/// Axis-aligned box, used for the bridge component geometry.
#[derive(Debug, Clone, Copy)]
struct GeoBox {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl GeoBox {
    fn contains(&self, dim: usize, x: &[f64; 3], tol: f64) -> bool {
        (0..dim).all(|k| x[k] >= self.lo[k] - tol && x[k] <= self.hi[k] + tol)
    }

    fn distance(&self, dim: usize, x: &[f64; 3]) -> f64 {
        let mut acc = 0.0;
        for k in 0..dim {
            let d = (self.lo[k] - x[k]).max(0.0).max(x[k] - self.hi[k]);
            acc += d * d;
        }
        acc.sqrt()
    }
}

/// The hard-set component boxes of a bridge spec, without periodic copies.
fn hard_boxes(dim: usize, spec: &BridgeSpec) -> Result<Vec<GeoBox>> {
    let w2 = spec.width / 2.0;
    let corners = |boxes: &mut Vec<GeoBox>| {
        for corner in 0..1usize << dim {
            let mut lo = [0.0; 3];
            let mut hi = [0.0; 3];
            for k in 0..dim {
                if (corner >> (dim - 1 - k)) & 1 == 1 {
                    lo[k] = 1.0 - w2;
                    hi[k] = 1.0;
                } else {
                    lo[k] = 0.0;
                    hi[k] = w2;
                }
            }
            boxes.push(GeoBox { lo, hi });
        }
    };
    let midfaces = |boxes: &mut Vec<GeoBox>| {
        for axis in 0..dim {
            for side in 0..2 {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for k in 0..dim {
                    if k == axis {
                        if side == 0 {
                            lo[k] = 0.0;
                            hi[k] = w2;
                        } else {
                            lo[k] = 1.0 - w2;
                            hi[k] = 1.0;
                        }
                    } else {
                        lo[k] = 0.5 - w2;
                        hi[k] = 0.5 + w2;
                    }
                }
                boxes.push(GeoBox { lo, hi });
            }
        }
    };
    let mut boxes = Vec::new();
    match spec.variant {
        BridgeVariant::Midfaces => midfaces(&mut boxes),
        BridgeVariant::Corners => corners(&mut boxes),
        BridgeVariant::CornersAndMidfaces => {
            corners(&mut boxes);
            midfaces(&mut boxes);
        }
        BridgeVariant::Corners3d => {
            if dim != 3 {
                return Err(Error::domain("corners3d bridges require dim = 3"));
            }
            corners(&mut boxes);
        }
    }
    Ok(boxes)
}

/// Node masks derived from a bridge spec: hard nodes are fixed at v = 1,
/// soft nodes at v = −1.
#[derive(Debug, Clone)]
pub struct BridgeMasks {
    pub hard: Vec<usize>,
    pub soft: Vec<usize>,
    pub hard_flags: Vec<bool>,
    pub soft_flags: Vec<bool>,
}

/// Computes the hard and soft node sets of a bridge spec.
///
/// Hard nodes lie inside a bridge component; soft nodes are boundary nodes
/// whose torus distance to the hard set exceeds sigma.
pub fn bridge_masks(grid: &CellGrid, spec: &BridgeSpec) -> Result<BridgeMasks> {
    if !(spec.width > 0.0 && spec.width < 0.5) {
        return Err(Error::domain(format!(
            "bridge width must lie in (0, 1/2), got {}",
            spec.width
        )));
    }
    if spec.sigma < grid.h() {
        return Err(Error::domain(format!(
            "sigma = {} must be at least the mesh size h = {}",
            spec.sigma,
            grid.h()
        )));
    }
    let dim = grid.dim;
    let boxes = hard_boxes(dim, spec)?;
    // Periodic copies for the torus metric.
    let mut shifted = Vec::new();
    let shifts: &[f64] = &[-1.0, 0.0, 1.0];
    for b in &boxes {
        let mut stack = vec![*b];
        for k in 0..dim {
            let mut next = Vec::new();
            for s in &stack {
                for &shift in shifts {
                    let mut lo = s.lo;
                    let mut hi = s.hi;
                    lo[k] += shift;
                    hi[k] += shift;
                    next.push(GeoBox { lo, hi });
                }
            }
            stack = next;
        }
        shifted.extend(stack);
    }

    let tol = 1e-9 * grid.h();
    let mut hard_flags = vec![false; grid.node_count()];
    let mut soft_flags = vec![false; grid.node_count()];
    let mut hard = Vec::new();
    let mut soft = Vec::new();
    for node in 0..grid.node_count() {
        let coords = grid.node_coords(node);
        let x = grid.node_position(&coords[..dim]);
        if shifted.iter().any(|b| b.contains(dim, &x, tol)) {
            hard_flags[node] = true;
            hard.push(node);
            continue;
        }
        let on_boundary = (0..dim).any(|k| coords[k] == 0 || coords[k] == grid.n);
        if on_boundary {
            let dist = shifted
                .iter()
                .map(|b| b.distance(dim, &x))
                .fold(f64::INFINITY, f64::min);
            if dist > spec.sigma + tol {
                soft_flags[node] = true;
                soft.push(node);
            }
        }
    }
    if soft.is_empty() {
        return Err(Error::domain(
            "bridge spec leaves no soft boundary nodes; masks overlap the whole boundary",
        ));
    }
    Ok(BridgeMasks {
        hard,
        soft,
        hard_flags,
        soft_flags,
    })
}

impl BridgeMasks {
    /// Overwrites masked nodes with their fixed values.
    pub fn apply(&self, v: &mut NodalField) {
        for &node in &self.hard {
            v.values[node] = 1.0;
        }
        for &node in &self.soft {
            v.values[node] = -1.0;
        }
    }

    /// True when the field honors both masks exactly.
    pub fn is_respected(&self, v: &NodalField) -> bool {
        self.hard.iter().all(|&n| v.values[n] == 1.0)
            && self.soft.iter().all(|&n| v.values[n] == -1.0)
    }
}

fn cell_values(grid: &CellGrid, v: &NodalField, cell: usize, out: &mut [f64]) {
    for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
        out[a] = v.values[node];
    }
}

/// ∫_Q χ[v] dy with the assembly quadrature.
pub fn volume_term(grid: &CellGrid, v: &NodalField) -> f64 {
    let kit = ElementKit::new(grid.dim, grid.h());
    let mut corner = vec![0.0; kit.npc];
    let mut total = 0.0;
    for cell in 0..grid.cell_count() {
        cell_values(grid, v, cell, &mut corner);
        for q in 0..kit.nq {
            let mut interp = 0.0;
            for a in 0..kit.npc {
                interp += kit.shape_at(q, a) * corner[a];
            }
            total += kit.wvol[q] * chi(interp);
        }
    }
    total
}

/// Gradient of `volume_term` with respect to nodal values (full lattice).
pub fn volume_grad(grid: &CellGrid, v: &NodalField) -> Vec<f64> {
    let kit = ElementKit::new(grid.dim, grid.h());
    let mut corner = vec![0.0; kit.npc];
    let mut grad = vec![0.0; grid.node_count()];
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        cell_values(grid, v, cell, &mut corner);
        for q in 0..kit.nq {
            let mut interp = 0.0;
            for a in 0..kit.npc {
                interp += kit.shape_at(q, a) * corner[a];
            }
            let factor = kit.wvol[q] * chi_prime(interp);
            for (a, &node) in nodes.iter().enumerate() {
                grad[node] += factor * kit.shape_at(q, a);
            }
        }
    }
    grad
}

/// Modica–Mortola interface energy L^σ[v] = ½ ∫ σ|∇v|² + W(v)/σ.
pub fn modica_mortola(grid: &CellGrid, v: &NodalField, sigma: f64) -> f64 {
    let kit = ElementKit::new(grid.dim, grid.h());
    let dim = grid.dim;
    let mut corner = vec![0.0; kit.npc];
    let mut total = 0.0;
    for cell in 0..grid.cell_count() {
        cell_values(grid, v, cell, &mut corner);
        for q in 0..kit.nq {
            let mut interp = 0.0;
            let mut gradv = [0.0; 3];
            for a in 0..kit.npc {
                let phi = kit.shape_at(q, a);
                interp += phi * corner[a];
                for k in 0..dim {
                    gradv[k] += kit.grad[(q * kit.npc + a) * dim + k] * corner[a];
                }
            }
            let grad_sq: f64 = gradv[..dim].iter().map(|g| g * g).sum();
            total += kit.wvol[q] * 0.5 * (sigma * grad_sq + double_well(interp) / sigma);
        }
    }
    total
}

/// Gradient of `modica_mortola` with respect to nodal values (full lattice).
pub fn modica_mortola_grad(grid: &CellGrid, v: &NodalField, sigma: f64) -> Vec<f64> {
    let kit = ElementKit::new(grid.dim, grid.h());
    let dim = grid.dim;
    let mut corner = vec![0.0; kit.npc];
    let mut grad = vec![0.0; grid.node_count()];
    for cell in 0..grid.cell_count() {
        let nodes = grid.cell_nodes(cell);
        cell_values(grid, v, cell, &mut corner);
        for q in 0..kit.nq {
            let mut interp = 0.0;
            let mut gradv = [0.0; 3];
            for a in 0..kit.npc {
                let phi = kit.shape_at(q, a);
                interp += phi * corner[a];
                for k in 0..dim {
                    gradv[k] += kit.grad[(q * kit.npc + a) * dim + k] * corner[a];
                }
            }
            let w_prime = double_well_prime(interp);
            for (a, &node) in nodes.iter().enumerate() {
                let mut dot = 0.0;
                for k in 0..dim {
                    dot += gradv[k] * kit.grad[(q * kit.npc + a) * dim + k];
                }
                grad[node] +=
                    kit.wvol[q] * (sigma * dot + 0.5 * w_prime * kit.shape_at(q, a) / sigma);
            }
        }
    }
    grad
}

/// Microscopic cost J_micro[v] = c_V ∫ χ[v] + c_P L^σ[v].
pub fn j_micro(grid: &CellGrid, v: &NodalField, weights: &CostWeights, sigma: f64) -> f64 {
    weights.c_v * volume_term(grid, v) + weights.c_p * modica_mortola(grid, v, sigma)
}

/// Exact gradient of the discrete J_micro (full lattice).
pub fn j_micro_grad(
    grid: &CellGrid,
    v: &NodalField,
    weights: &CostWeights,
    sigma: f64,
) -> Vec<f64> {
    let vol = volume_grad(grid, v);
    let mm = modica_mortola_grad(grid, v, sigma);
    vol.iter()
        .zip(&mm)
        .map(|(a, b)| weights.c_v * a + weights.c_p * b)
        .collect()
}
