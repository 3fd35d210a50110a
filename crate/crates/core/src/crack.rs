//! Stress and strain invariants and the crack indices built from them.
//!
//! Tensors are stored as (xx, yy, zz, xy, yz, xz) with tensorial shear.
//!
//! The build model is elastic, so there is no plastic strain to feed the
//! strain-based fracture index. [`effective_strain`] substitutes the von Mises
//! equivalent total strain in excess of the yield strain.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::Serialize;

use crate::buildsim::BuildResult;
use crate::fea::MaterialSpec;
use crate::grid::{GridDims, ScalarField};

pub type Sym3 = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub sigma: Sym3,
    pub eps: Sym3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Indices {
    pub sfi: f64,
    pub mssi: f64,
    pub tsi: f64,
}

fn matrix(t: &Sym3) -> Matrix3<f64> {
    Matrix3::new(t[0], t[3], t[5], t[3], t[1], t[4], t[5], t[4], t[2])
}

/// Eigenvalues sorted descending.
pub fn principal_values(t: &Sym3) -> [f64; 3] {
    let eig = SymmetricEigen::new(matrix(t));
    let mut v = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn mean(t: &Sym3) -> f64 {
    (t[0] + t[1] + t[2]) / 3.0
}

pub fn von_mises(s: &Sym3) -> f64 {
    let d = (s[0] - s[1]).powi(2) + (s[1] - s[2]).powi(2) + (s[2] - s[0]).powi(2);
    (0.5 * d + 3.0 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5])).sqrt()
}

/// Von Mises equivalent of a strain tensor, `sqrt(2/3 e':e')`.
pub fn equivalent_strain(e: &Sym3) -> f64 {
    let m = mean(e);
    let d = [e[0] - m, e[1] - m, e[2] - m];
    let dd = d.iter().map(|v| v * v).sum::<f64>() + 2.0 * (e[3] * e[3] + e[4] * e[4] + e[5] * e[5]);
    (2.0 / 3.0 * dd).sqrt()
}

/// Plastic strain stand-in for an elastic model.
pub fn effective_strain(e: &Sym3, mat: &MaterialSpec) -> f64 {
    (equivalent_strain(e) - mat.sigma_yield / mat.e0).max(0.0)
}

/// Mean over von Mises stress; zero when the von Mises stress is below `tol_abs`.
pub fn triaxiality(s: &Sym3, tol_abs: f64) -> f64 {
    let vm = von_mises(s);
    if vm < tol_abs {
        0.0
    } else {
        mean(s) / vm
    }
}

/// Singularity guard for the triaxiality of material `mat`.
pub fn triaxiality_tolerance(mat: &MaterialSpec) -> f64 {
    1e-9 * mat.e0
}

pub fn crack_indices(state: &PointState, mat: &MaterialSpec) -> Indices {
    let tau = triaxiality(&state.sigma, triaxiality_tolerance(mat));
    if tau == 0.0 {
        return Indices::default();
    }
    let ps = principal_values(&state.sigma);
    let pe = principal_values(&state.eps);
    let work: f64 = ps.iter().zip(&pe).map(|(a, b)| a * b).sum();
    Indices {
        sfi: tau * effective_strain(&state.eps, mat) / mat.eps_uts,
        mssi: tau * (pe[0] - pe[2]) / mat.eps_uts,
        tsi: tau * work / (mat.sigma_uts * mat.eps_uts),
    }
}

#[derive(Debug, Clone)]
pub struct CrackFields {
    pub sfi: ScalarField,
    pub mssi: ScalarField,
    pub tsi: ScalarField,
    pub tau: ScalarField,
    pub von_mises: ScalarField,
    pub mean_stress: ScalarField,
    pub max_principal_stress: ScalarField,
    pub equivalent_stress: ScalarField,
}

impl CrackFields {
    pub fn zeros(dims: GridDims) -> Self {
        let z = ScalarField::constant(dims, 0.0);
        Self {
            sfi: z.clone(),
            mssi: z.clone(),
            tsi: z.clone(),
            tau: z.clone(),
            von_mises: z.clone(),
            mean_stress: z.clone(),
            max_principal_stress: z.clone(),
            equivalent_stress: z,
        }
    }

    pub fn named(&self) -> [(&'static str, &ScalarField); 8] {
        [
            ("sfi", &self.sfi),
            ("mssi", &self.mssi),
            ("tsi", &self.tsi),
            ("triaxiality", &self.tau),
            ("von_mises", &self.von_mises),
            ("mean_stress", &self.mean_stress),
            ("max_principal_stress", &self.max_principal_stress),
            ("equivalent_stress", &self.equivalent_stress),
        ]
    }
}

/// Per-voxel invariants and indices of a finished build. Voxels that were
/// never deposited stay zero.
pub fn crack_field_from_build(result: &BuildResult, mat: &MaterialSpec) -> CrackFields {
    let dims = result.stress.dims;
    let mut out = CrackFields::zeros(dims);
    let tol = triaxiality_tolerance(mat);
    for e in 0..dims.len() {
        if !result.active[e] {
            continue;
        }
        let state = PointState { sigma: result.stress.data[e], eps: result.strain.data[e] };
        let idx = crack_indices(&state, mat);
        let vm = von_mises(&state.sigma);
        out.sfi.values[e] = idx.sfi;
        out.mssi.values[e] = idx.mssi;
        out.tsi.values[e] = idx.tsi;
        out.tau.values[e] = triaxiality(&state.sigma, tol);
        out.von_mises.values[e] = vm;
        out.equivalent_stress.values[e] = vm;
        out.mean_stress.values[e] = mean(&state.sigma);
        out.max_principal_stress.values[e] = principal_values(&state.sigma)[0];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSummary {
    pub name: String,
    pub max: f64,
    pub argmax: [usize; 3],
    pub p99: f64,
}

/// Max, its voxel, and the 99th percentile (nearest rank) of a field.
pub fn summarize(name: &str, f: &ScalarField) -> FieldSummary {
    let (i, j, k) = f.dims.coords(f.argmax());
    let mut sorted = f.values.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    FieldSummary { name: name.to_string(), max: f.max(), argmax: [i, j, k], p99: sorted[rank - 1] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_sorting() {
        assert_eq!(principal_values(&[3.0, 1.0, 2.0, 0.0, 0.0, 0.0]), [3.0, 2.0, 1.0]);
        assert_eq!(principal_values(&[0.0; 6]), [0.0; 3]);
    }

    #[test]
    fn triaxiality_cases() {
        assert!((triaxiality(&[5.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-9) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(triaxiality(&[0.0, 0.0, 0.0, 4.0, 0.0, 0.0], 1e-9), 0.0);
        assert_eq!(triaxiality(&[2.0, 2.0, 2.0, 0.0, 0.0, 0.0], 1e-9), 0.0);
    }

    #[test]
    fn uniaxial_mssi() {
        let mat = MaterialSpec::default();
        let s = 300.0;
        let state = PointState {
            sigma: [s, 0.0, 0.0, 0.0, 0.0, 0.0],
            eps: [s / mat.e0, -mat.nu * s / mat.e0, -mat.nu * s / mat.e0, 0.0, 0.0, 0.0],
        };
        let idx = crack_indices(&state, &mat);
        let expected = (1.0 + mat.nu) * s / (3.0 * mat.e0 * mat.eps_uts);
        assert!((idx.mssi - expected).abs() < 1e-14);
        assert_eq!(idx.sfi, 0.0);
    }

    #[test]
    fn equivalent_strain_of_uniaxial_incompressible() {
        let e = [0.01, -0.005, -0.005, 0.0, 0.0, 0.0];
        assert!((equivalent_strain(&e) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn percentile_summary() {
        let dims = GridDims::new(10, 10, 1, 1.0).unwrap();
        let f = ScalarField::new(dims, (0..100).map(|v| v as f64).collect()).unwrap();
        let s = summarize("x", &f);
        assert_eq!(s.max, 99.0);
        assert_eq!(s.argmax, [9, 9, 0]);
        assert_eq!(s.p99, 98.0);
    }
}
