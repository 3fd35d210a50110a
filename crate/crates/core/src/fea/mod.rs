//! Voxel finite elements: steady conduction and small-strain linear
//! elasticity on trilinear hexahedra, with SIMP material interpolation.
//!
//! Every voxel is one element; nodes sit on voxel corners. Element matrices
//! use 2x2x2 Gauss quadrature, stresses are recovered at the centroid.

pub mod cg;
pub mod hex8;

use serde::{Deserialize, Serialize};

pub use cg::{CgStats, ElementOperator, Preconditioner, SolverOpts};

use crate::error::{Error, Result};
use crate::grid::{GridDims, SymTensorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSpec {
    /// Young's modulus (MPa).
    pub e0: f64,
    pub nu: f64,
    /// Conductivity (W/mK).
    pub k0: f64,
    pub e_min: f64,
    pub k_min: f64,
    /// SIMP penalization exponent.
    pub penal: f64,
    pub sigma_yield: f64,
    pub sigma_uts: f64,
    pub eps_uts: f64,
}

impl Default for MaterialSpec {
    /// Room-temperature properties of a precipitation-hardened Ni superalloy.
    fn default() -> Self {
        Self {
            e0: 200_000.0,
            nu: 0.3,
            k0: 11.0,
            e_min: 200_000.0 * 1e-9,
            k_min: 11.0 * 1e-3,
            penal: 3.0,
            sigma_yield: 900.0,
            sigma_uts: 1100.0,
            eps_uts: 0.1,
        }
    }
}

impl MaterialSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.e0 > 0.0 && self.e_min > 0.0 && self.e_min < self.e0) {
            return bad("need 0 < e_min < e0");
        }
        if !(self.k0 > 0.0 && self.k_min > 0.0 && self.k_min < self.k0) {
            return bad("need 0 < k_min < k0");
        }
        if !(self.nu > 0.0 && self.nu < 0.5) {
            return bad("Poisson ratio must lie in (0, 0.5)");
        }
        if !(self.penal >= 1.0) {
            return bad("SIMP exponent must be at least 1");
        }
        if !(self.sigma_uts > 0.0 && self.eps_uts > 0.0 && self.sigma_yield > 0.0) {
            return bad("strength limits must be positive");
        }
        Ok(())
    }

    pub fn modulus(&self, rho: f64) -> f64 {
        simp_interpolate(rho, self.e_min, self.e0, self.penal)
    }

    pub fn conductivity(&self, rho: f64) -> f64 {
        simp_interpolate(rho, self.k_min, self.k0, self.penal)
    }
}

/// Modified SIMP: `lo + rho^p (hi - lo)`.
#[inline]
pub fn simp_interpolate(rho: f64, lo: f64, hi: f64, p: f64) -> f64 {
    lo + rho.powf(p) * (hi - lo)
}

/// d/drho of [`simp_interpolate`].
#[inline]
pub fn simp_derivative(rho: f64, lo: f64, hi: f64, p: f64) -> f64 {
    if rho == 0.0 {
        return if p == 1.0 { hi - lo } else { 0.0 };
    }
    p * rho.powf(p - 1.0) * (hi - lo)
}

/// Steady conduction with homogeneous Dirichlet (zero temperature) nodes.
#[derive(Debug, Clone)]
pub struct ThermalProblem {
    pub dims: GridDims,
    /// Per-element conductivity; zero marks an inactive element.
    pub conductivity: Vec<f64>,
    /// Nodal heat load.
    pub load: Vec<f64>,
    /// Per-node fixed-temperature flag.
    pub fixed: Vec<bool>,
}

/// Linear elasticity with homogeneous displacement constraints and optional
/// per-element eigenstrains.
#[derive(Debug, Clone)]
pub struct ElasticProblem {
    pub dims: GridDims,
    pub nu: f64,
    /// Per-element Young's modulus; zero marks an inactive element.
    pub stiffness: Vec<f64>,
    /// Nodal forces, three per node.
    pub load: Vec<f64>,
    /// Fixed flags, three per node.
    pub fixed: Vec<bool>,
    /// Stress-free strain per element, tensor components (xx, yy, zz, xy, yz, xz).
    pub eigenstrain: Option<Vec<[f64; 6]>>,
}

impl ThermalProblem {
    pub fn check(&self) -> Result<()> {
        let n = self.dims.n_nodes();
        check_len(self.conductivity.len(), self.dims.len())?;
        check_len(self.load.len(), n)?;
        check_len(self.fixed.len(), n)?;
        if !self.fixed.iter().any(|f| *f) {
            return Err(Error::InvalidParameter("thermal problem needs at least one fixed-temperature node".into()));
        }
        Ok(())
    }
}

impl ElasticProblem {
    pub fn check(&self) -> Result<()> {
        let n = 3 * self.dims.n_nodes();
        check_len(self.stiffness.len(), self.dims.len())?;
        check_len(self.load.len(), n)?;
        check_len(self.fixed.len(), n)?;
        if let Some(eig) = &self.eigenstrain {
            check_len(eig.len(), self.dims.len())?;
            if eig.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("eigenstrain must be finite".into()));
            }
        }
        Ok(())
    }

    /// External load plus the equivalent nodal forces of the eigenstrains.
    pub fn total_load(&self) -> Vec<f64> {
        let mut f = self.load.clone();
        let Some(eig) = &self.eigenstrain else { return f };
        let fe = hex8::eigenstrain_load(self.dims.h, self.nu);
        let d = self.dims;
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    let s = self.stiffness[e];
                    if s == 0.0 || eig[e].iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let v = hex8::tensor_to_voigt(&eig[e]);
                    for (a, n) in d.element_nodes(i, j, k).iter().enumerate() {
                        for c in 0..3 {
                            let row = &fe[3 * a + c];
                            f[3 * n + c] += s * (0..6).map(|m| row[m] * v[m]).sum::<f64>();
                        }
                    }
                }
            }
        }
        f
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::SizeMismatch { expected, actual });
    }
    Ok(())
}

pub fn solve_thermal(prob: &ThermalProblem, opts: &SolverOpts) -> Result<Vec<f64>> {
    solve_thermal_from(prob, opts, None).map(|(u, _)| u)
}

/// Thermal solve with an optional warm start.
pub fn solve_thermal_from(
    prob: &ThermalProblem,
    opts: &SolverOpts,
    initial: Option<&[f64]>,
) -> Result<(Vec<f64>, CgStats)> {
    prob.check()?;
    opts.validate()?;
    let ke = hex8::thermal_stiffness(prob.dims.h);
    let op = ElementOperator::new(prob.dims, 1, &ke, &prob.conductivity, &prob.fixed);
    cg::pcg(&op, &prob.load, initial, opts, |_| {})
}

pub fn solve_elastic(prob: &ElasticProblem, opts: &SolverOpts) -> Result<Vec<f64>> {
    solve_elastic_from(prob, opts, None).map(|(u, _)| u)
}

/// Elastic solve with an optional warm start.
pub fn solve_elastic_from(
    prob: &ElasticProblem,
    opts: &SolverOpts,
    initial: Option<&[f64]>,
) -> Result<(Vec<f64>, CgStats)> {
    prob.check()?;
    opts.validate()?;
    let ke = hex8::elastic_stiffness(prob.dims.h, prob.nu);
    let op = ElementOperator::new(prob.dims, 3, &ke, &prob.stiffness, &prob.fixed);
    cg::pcg(&op, &prob.total_load(), initial, opts, |_| {})
}

/// Compliance `u . f`.
pub fn compliance(u: &[f64], f: &[f64]) -> f64 {
    assert_eq!(u.len(), f.len());
    u.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// `u_e^T K_ref u_e` for every element, with `K_ref` the unit-property matrix.
pub fn element_energies(dims: GridDims, dofs_per_node: usize, ke: &[f64], u: &[f64]) -> Vec<f64> {
    let nd = 8 * dofs_per_node;
    let mut out = vec![0.0; dims.len()];
    let mut ue = [0.0f64; 24];
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                for (a, n) in dims.element_nodes(i, j, k).iter().enumerate() {
                    for c in 0..dofs_per_node {
                        ue[dofs_per_node * a + c] = u[dofs_per_node * n + c];
                    }
                }
                let mut acc = 0.0;
                for p in 0..nd {
                    let row = &ke[nd * p..nd * (p + 1)];
                    acc += ue[p] * row.iter().zip(&ue[..nd]).map(|(x, y)| x * y).sum::<f64>();
                }
                out[dims.index(i, j, k)] = acc;
            }
        }
    }
    out
}

/// Centroid strain `B u_e` and stress `C_e (eps - eps*)` for every element.
/// Inactive elements get exact zeros.
pub fn element_stress_strain(u: &[f64], prob: &ElasticProblem) -> (SymTensorField, SymTensorField) {
    let d = prob.dims;
    let b = hex8::strain_displacement([0.0; 3], d.h);
    let c = hex8::elasticity_matrix(1.0, prob.nu);
    let mut sigma = SymTensorField::zeros(d);
    let mut eps = SymTensorField::zeros(d);
    for k in 0..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                let e = d.index(i, j, k);
                let s = prob.stiffness[e];
                if s == 0.0 {
                    continue;
                }
                let mut ue = [0.0; 24];
                for (a, n) in d.element_nodes(i, j, k).iter().enumerate() {
                    for cc in 0..3 {
                        ue[3 * a + cc] = u[3 * n + cc];
                    }
                }
                let mut ev = [0.0; 6];
                for (m, row) in b.iter().enumerate() {
                    ev[m] = row.iter().zip(&ue).map(|(x, y)| x * y).sum();
                }
                let mut mech = ev;
                if let Some(eig) = &prob.eigenstrain {
                    let star = hex8::tensor_to_voigt(&eig[e]);
                    for m in 0..6 {
                        mech[m] -= star[m];
                    }
                }
                let mut sv = [0.0; 6];
                for (m, row) in c.iter().enumerate() {
                    sv[m] = s * row.iter().zip(&mech).map(|(x, y)| x * y).sum::<f64>();
                }
                eps.data[e] = hex8::voigt_to_tensor(&ev);
                sigma.data[e] = sv;
            }
        }
    }
    (sigma, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simp_endpoints() {
        assert_eq!(simp_interpolate(1.0, 0.1, 2.0, 3.0), 2.0);
        assert_eq!(simp_interpolate(0.0, 0.1, 2.0, 3.0), 0.1);
        assert_eq!(simp_interpolate(0.5, 0.0, 1.0, 3.0), 0.125);
    }

    #[test]
    fn simp_derivative_matches_difference() {
        let (lo, hi, p) = (1e-3, 5.0, 3.0);
        for rho in [0.1, 0.37, 0.9] {
            let h = 1e-6;
            let fd = (simp_interpolate(rho + h, lo, hi, p) - simp_interpolate(rho - h, lo, hi, p)) / (2.0 * h);
            assert!((fd - simp_derivative(rho, lo, hi, p)).abs() < 1e-6);
        }
    }

    #[test]
    fn compliance_basics() {
        assert_eq!(compliance(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(compliance(&[1.0, 1.0], &[1.0, 1.0]), 2.0);
    }

    #[test]
    fn material_validation() {
        assert!(MaterialSpec::default().validate().is_ok());
        let m = MaterialSpec { nu: 0.5, ..Default::default() };
        assert!(m.validate().is_err());
        let m = MaterialSpec { e_min: 0.0, ..Default::default() };
        assert!(m.validate().is_err());
    }
}
