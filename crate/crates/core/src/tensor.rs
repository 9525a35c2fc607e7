//! Isotropic elasticity parameter algebra, Voigt tensors and
//! Hashin–Shtrikman bounds.
//!
//! All fourth-order elasticity tensors are stored as symmetric Voigt matrices
//! with the engineering shear convention: strain vectors carry doubled shear
//! components (γ = 2ε₁₂), the shear diagonal of the matrix stores μ, and the
//! contraction C ε : ε is a plain Voigt dot product.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Smallest accepted soft-phase scaling. A vanishing soft phase makes the
/// corrector problem degenerate, so δ = 0 is rejected everywhere.
pub const DELTA_MIN: f64 = 1e-12;

/// Isotropic material parameters, kept mutually consistent in both the
/// (ν, E) and the (κ, μ) representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoParams {
    /// Spatial dimension, 2 or 3.
    pub dim: usize,
    /// Poisson's ratio.
    pub nu: f64,
    /// Young's modulus.
    pub e: f64,
    /// Bulk modulus.
    pub kappa: f64,
    /// Shear modulus.
    pub mu: f64,
    /// First Lamé parameter, λ = κ − 2μ/d.
    pub lambda: f64,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::domain(format!("dim must be 2 or 3, got {dim}")))
    }
}

/// Admissible open interval for Poisson's ratio.
pub fn nu_range(dim: usize) -> (f64, f64) {
    if dim == 2 {
        (-1.0, 1.0)
    } else {
        (-1.0, 0.5)
    }
}

/// Builds isotropic parameters from Poisson's ratio and Young's modulus.
pub fn iso_from_nu_e(nu: f64, e: f64, dim: usize) -> Result<IsoParams> {
    check_dim(dim)?;
    let (lo, hi) = nu_range(dim);
    if !(nu > lo && nu < hi) {
        return Err(Error::domain(format!(
            "nu = {nu} outside admissible interval ({lo}, {hi}) for dim {dim}"
        )));
    }
    if !(e > 0.0) {
        return Err(Error::domain(format!("E must be positive, got {e}")));
    }
    let (kappa, mu) = if dim == 2 {
        (e / (2.0 * (1.0 - nu)), e / (2.0 * (1.0 + nu)))
    } else {
        (e / (3.0 * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    };
    Ok(IsoParams {
        dim,
        nu,
        e,
        kappa,
        mu,
        lambda: kappa - 2.0 * mu / dim as f64,
    })
}

/// Recovers (ν, E) from bulk and shear moduli.
pub fn nu_e_from_moduli(kappa: f64, mu: f64, dim: usize) -> Result<(f64, f64)> {
    check_dim(dim)?;
    if !(kappa > 0.0 && mu > 0.0) {
        return Err(Error::domain(format!(
            "moduli must be positive, got kappa = {kappa}, mu = {mu}"
        )));
    }
    Ok(if dim == 2 {
        ((kappa - mu) / (kappa + mu), 4.0 * kappa * mu / (kappa + mu))
    } else {
        (
            (3.0 * kappa - 2.0 * mu) / (6.0 * kappa + 2.0 * mu),
            9.0 * kappa * mu / (3.0 * kappa + mu),
        )
    })
}

/// Builds isotropic parameters from bulk and shear moduli.
pub fn iso_from_moduli(kappa: f64, mu: f64, dim: usize) -> Result<IsoParams> {
    let (nu, e) = nu_e_from_moduli(kappa, mu, dim)?;
    Ok(IsoParams {
        dim,
        nu,
        e,
        kappa,
        mu,
        lambda: kappa - 2.0 * mu / dim as f64,
    })
}

/// Number of independent Voigt components: 3 in 2D, 6 in 3D.
pub fn voigt_size(dim: usize) -> usize {
    if dim == 2 {
        3
    } else {
        6
    }
}

/// Number of independent entries of a symmetric Voigt matrix
/// (6 constraints in 2D, 21 in 3D).
pub fn voigt_upper_len(dim: usize) -> usize {
    let n = voigt_size(dim);
    n * (n + 1) / 2
}

/// The (row, col) index pairs of the Voigt upper triangle in row-major order.
pub fn voigt_upper_pairs(dim: usize) -> Vec<(usize, usize)> {
    let n = voigt_size(dim);
    let mut pairs = Vec::with_capacity(voigt_upper_len(dim));
    for i in 0..n {
        for j in i..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Tensor index pair (k, l) associated with each Voigt slot.
///
/// 2D order: 11, 22, 12. 3D order: 11, 22, 33, 23, 13, 12.
pub fn voigt_tensor_pairs(dim: usize) -> &'static [(usize, usize)] {
    if dim == 2 {
        &[(0, 0), (1, 1), (0, 1)]
    } else {
        &[(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
    }
}

/// Symmetric elasticity tensor in Voigt form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityTensor {
    pub dim: usize,
    /// Row-major dense Voigt matrix, size voigt_size(dim)².
    pub voigt: Vec<f64>,
}

impl ElasticityTensor {
    pub fn zeros(dim: usize) -> Self {
        let n = voigt_size(dim);
        ElasticityTensor {
            dim,
            voigt: vec![0.0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        voigt_size(self.dim)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.voigt[i * self.size() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let n = self.size();
        self.voigt[i * n + j] = value;
    }

    /// Matrix-vector product with a Voigt strain vector.
    pub fn apply(&self, strain: &[f64], out: &mut [f64]) {
        let n = self.size();
        for i in 0..n {
            let row = &self.voigt[i * n..(i + 1) * n];
            out[i] = row.iter().zip(strain).map(|(a, b)| a * b).sum();
        }
    }

    /// Upper triangle in row-major order (the manifest layout).
    pub fn upper_triangle(&self) -> Vec<f64> {
        voigt_upper_pairs(self.dim)
            .into_iter()
            .map(|(i, j)| self.get(i, j))
            .collect()
    }

    /// Rebuilds a symmetric tensor from its row-major upper triangle.
    pub fn from_upper_triangle(dim: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != voigt_upper_len(dim) {
            return Err(Error::format(format!(
                "expected {} upper-triangle entries for dim {dim}, got {}",
                voigt_upper_len(dim),
                upper.len()
            )));
        }
        let mut t = ElasticityTensor::zeros(dim);
        for (value, (i, j)) in upper.iter().zip(voigt_upper_pairs(dim)) {
            t.set(i, j, *value);
            t.set(j, i, *value);
        }
        Ok(t)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ElasticityTensor {
            dim: self.dim,
            voigt: self.voigt.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest absolute deviation from major symmetry.
    pub fn asymmetry(&self) -> f64 {
        let n = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Isotropic projection: the (κ, μ) pair whose isotropic tensor is
    /// closest to this one, via the invariant traces C_iijj and C_ijij.
    pub fn isotropic_moduli(&self) -> (f64, f64) {
        let d = self.dim as f64;
        let nd = self.dim;
        let mut c_iijj = 0.0;
        for i in 0..nd {
            for j in 0..nd {
                c_iijj += self.get(i, j);
            }
        }
        let kappa = c_iijj / (d * d);
        let mut c_ijij = 0.0;
        for i in 0..nd {
            c_ijij += self.get(i, i);
        }
        for s in nd..voigt_size(nd) {
            c_ijij += 2.0 * self.get(s, s);
        }
        let mu = (c_ijij - d * kappa) / (d * d + d - 2.0);
        (kappa, mu)
    }

    /// (ν, E) of the isotropic projection.
    pub fn isotropic_nu_e(&self) -> Result<(f64, f64)> {
        let (kappa, mu) = self.isotropic_moduli();
        nu_e_from_moduli(kappa, mu, self.dim)
    }
}

/// Builds the Voigt matrix of the isotropic tensor
/// C = κ δ⊗δ + μ (sym ⊗ − (2/d) δ⊗δ): normal block λ + 2μ on the diagonal
/// and λ off it, shear diagonal μ.
pub fn tensor_from_iso(p: &IsoParams) -> ElasticityTensor {
    let mut t = ElasticityTensor::zeros(p.dim);
    for i in 0..p.dim {
        for j in 0..p.dim {
            let value = if i == j {
                p.lambda + 2.0 * p.mu
            } else {
                p.lambda
            };
            t.set(i, j, value);
        }
    }
    for s in p.dim..voigt_size(p.dim) {
        t.set(s, s, p.mu);
    }
    t
}

/// Upper Hashin–Shtrikman bounds at stiff-phase volume fraction θ_s together
/// with the admissible (ν, E) triangle they span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsBounds {
    pub dim: usize,
    /// Upper bound on the bulk modulus.
    pub kappa_u: f64,
    /// Upper bound on the shear modulus.
    pub mu_u: f64,
    /// Triangle vertices (ν_min, 0), (ν_max, 0), (ν_top, E_top).
    pub triangle: [(f64, f64); 3],
}

/// Upper Hashin–Shtrikman bounds for a two-phase material with stiff phase
/// `base` and soft phase `delta · base`.
pub fn hs_upper(theta_s: f64, base: &IsoParams, delta: f64) -> Result<HsBounds> {
    if !(0.0..=1.0).contains(&theta_s) {
        return Err(Error::domain(format!(
            "theta_s must lie in [0, 1], got {theta_s}"
        )));
    }
    if !(delta >= DELTA_MIN && delta <= 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in [{DELTA_MIN}, 1], got {delta}"
        )));
    }
    let d = base.dim as f64;
    let (kappa, mu, lambda) = (base.kappa, base.mu, base.lambda);
    let kappa_u = kappa + (1.0 - theta_s) / (1.0 / ((delta - 1.0) * kappa) + theta_s / (lambda + 2.0 * mu));
    let mu_u = mu
        + (1.0 - theta_s)
            / (1.0 / ((delta - 1.0) * mu)
                + 2.0 * theta_s * (d - 1.0) * (kappa + 2.0 * mu)
                    / ((d * d + d - 2.0) * mu * (lambda + 2.0 * mu)));
    let (nu_top, e_top) = nu_e_from_moduli(kappa_u, mu_u, base.dim)?;
    let nu_max = if base.dim == 2 { 1.0 } else { 0.5 };
    Ok(HsBounds {
        dim: base.dim,
        kappa_u,
        mu_u,
        triangle: [(-1.0, 0.0), (nu_max, 0.0), (nu_top, e_top)],
    })
}

/// Barycentric coordinates of `p` with respect to the bounds triangle.
pub fn hs_barycentric(p: (f64, f64), bounds: &HsBounds) -> [f64; 3] {
    let [a, b, c] = bounds.triangle;
    let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
    let l1 = ((b.0 - p.0) * (c.1 - p.1) - (c.0 - p.0) * (b.1 - p.1)) / det;
    let l2 = ((c.0 - p.0) * (a.1 - p.1) - (a.0 - p.0) * (c.1 - p.1)) / det;
    [l1, l2, 1.0 - l1 - l2]
}

/// Point-in-triangle test, inflated by `tol` in barycentric coordinates.
pub fn hs_contains(p: (f64, f64), bounds: &HsBounds, tol: f64) -> bool {
    hs_barycentric(p, bounds).iter().all(|&l| l >= -tol)
}
