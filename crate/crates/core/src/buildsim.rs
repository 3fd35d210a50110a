//! Layer-by-layer build simulation with the inherent strain method.
//!
//! Slabs of voxel layers are activated bottom to top. Newborn material receives
//! the calibrated eigenstrain, the active mesh is brought to equilibrium with
//! the build plate fixed, and strain increments are accumulated from the moment
//! each element is born.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fea::{cg, hex8, ElementOperator, MaterialSpec, SolverOpts};
use crate::grid::{GridDims, ScalarField, SymTensorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InherentStrain {
    pub exx: f64,
    pub eyy: f64,
    pub ezz: f64,
}

impl Default for InherentStrain {
    fn default() -> Self {
        Self { exx: -0.010295, eyy: -0.010295, ezz: -0.03 }
    }
}

impl InherentStrain {
    pub fn zero() -> Self {
        Self { exx: 0.0, eyy: 0.0, ezz: 0.0 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { exx: c * self.exx, eyy: c * self.eyy, ezz: c * self.ezz }
    }

    pub fn tensor(&self) -> [f64; 6] {
        [self.exx, self.eyy, self.ezz, 0.0, 0.0, 0.0]
    }
}

/// Nodes of the bottom face clamped by the build plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateFixity {
    /// Clamp the whole bottom node layer.
    pub fix_bottom_layer: bool,
    /// Edge length, in nodes, of the four square corner groups.
    pub corner_patch: usize,
}

impl Default for PlateFixity {
    fn default() -> Self {
        Self { fix_bottom_layer: true, corner_patch: 2 }
    }
}

impl PlateFixity {
    /// Per-node clamp flags.
    pub fn clamped_nodes(&self, dims: GridDims) -> Vec<bool> {
        let mut out = vec![false; dims.n_nodes()];
        let c = self.corner_patch;
        let near = |i: usize, n: usize| c > 0 && (i < c || i + c > n);
        for j in 0..=dims.ny {
            for i in 0..=dims.nx {
                if self.fix_bottom_layer || (near(i, dims.nx) && near(j, dims.ny)) {
                    out[dims.node_index(i, j, 0)] = true;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSpec {
    pub layers_per_step: usize,
    pub inherent: InherentStrain,
    pub plate: PlateFixity,
    /// Voxels below this density are powder and never deposited.
    pub activation_threshold: f64,
}

impl Default for BuildSpec {
    fn default() -> Self {
        Self {
            layers_per_step: 1,
            inherent: InherentStrain::default(),
            plate: PlateFixity::default(),
            activation_threshold: 0.5,
        }
    }
}

impl BuildSpec {
    pub fn validate(&self, dims: GridDims) -> Result<()> {
        if self.layers_per_step == 0 || self.layers_per_step > dims.nz {
            return Err(Error::InvalidParameter(format!(
                "layers_per_step must lie in [1, {}], got {}",
                dims.nz, self.layers_per_step
            )));
        }
        let i = &self.inherent;
        if !(i.exx.is_finite() && i.eyy.is_finite() && i.ezz.is_finite()) {
            return Err(Error::InvalidParameter("inherent strains must be finite".into()));
        }
        if !(self.activation_threshold > 0.0 && self.activation_threshold <= 1.0) {
            return Err(Error::InvalidParameter("activation_threshold must lie in (0, 1]".into()));
        }
        if !self.plate.fix_bottom_layer && self.plate.corner_patch == 0 {
            return Err(Error::InvalidParameter("build plate clamps no nodes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BuildResult {
    pub stress: SymTensorField,
    /// Total strain accumulated since each element's birth.
    pub strain: SymTensorField,
    /// Nodal displacement, three per node.
    pub displacement: Vec<f64>,
    /// Elements that were deposited and carry load.
    pub active: Vec<bool>,
    /// Slab index at which each element was born, if ever.
    pub birth: Vec<Option<usize>>,
}

/// Half-open z ranges `[k0, k1)` of each deposition step, bottom first.
pub fn layer_schedule(nz: usize, layers_per_step: usize) -> Vec<(usize, usize)> {
    assert!(layers_per_step >= 1);
    (0..nz).step_by(layers_per_step).map(|k0| (k0, (k0 + layers_per_step).min(nz))).collect()
}

/// Marks every deposited element that is face-connected to a clamped element
/// through deposited material.
fn grounded(dims: GridDims, deposited: &[bool], seed: &[bool]) -> Vec<bool> {
    let mut out = vec![false; dims.len()];
    let mut stack: Vec<usize> = (0..dims.len()).filter(|&e| deposited[e] && seed[e]).collect();
    for &e in &stack {
        out[e] = true;
    }
    while let Some(e) = stack.pop() {
        let (i, j, k) = dims.coords(e);
        let mut visit = |ii: usize, jj: usize, kk: usize| {
            let n = dims.index(ii, jj, kk);
            if deposited[n] && !out[n] {
                out[n] = true;
                stack.push(n);
            }
        };
        if i > 0 {
            visit(i - 1, j, k);
        }
        if i + 1 < dims.nx {
            visit(i + 1, j, k);
        }
        if j > 0 {
            visit(i, j - 1, k);
        }
        if j + 1 < dims.ny {
            visit(i, j + 1, k);
        }
        if k > 0 {
            visit(i, j, k - 1);
        }
        if k + 1 < dims.nz {
            visit(i, j, k + 1);
        }
    }
    out
}

fn gather(dims: GridDims, i: usize, j: usize, k: usize, u: &[f64]) -> [f64; 24] {
    let mut ue = [0.0; 24];
    for (a, n) in dims.element_nodes(i, j, k).iter().enumerate() {
        ue[3 * a..3 * a + 3].copy_from_slice(&u[3 * n..3 * n + 3]);
    }
    ue
}

/// Runs the element-birth build of the density field `rho`.
///
/// Elements at or above the activation threshold are deposited with SIMP
/// stiffness; their eigenstrain load scales with that stiffness. Material that
/// would float in powder is deposited once it becomes face-connected to the
/// plate; material that never does stays inactive.
pub fn simulate_build(rho: &ScalarField, mat: &MaterialSpec, spec: &BuildSpec, opts: &SolverOpts) -> Result<BuildResult> {
    spec.validate(rho.dims)?;
    simulate_build_clamped(rho, mat, spec, opts, &spec.plate.clamped_nodes(rho.dims))
}

/// [`simulate_build`] with an explicit per-node clamp set in place of the plate.
/// Elements touching a clamped node of the bottom layer anchor the build.
pub fn simulate_build_clamped(
    rho: &ScalarField,
    mat: &MaterialSpec,
    spec: &BuildSpec,
    opts: &SolverOpts,
    clamped: &[bool],
) -> Result<BuildResult> {
    let dims = rho.dims;
    rho.check_finite()?;
    mat.validate()?;
    opts.validate()?;
    if spec.layers_per_step == 0 || spec.layers_per_step > dims.nz {
        return Err(Error::InvalidParameter("layers_per_step out of range".into()));
    }
    if clamped.len() != dims.n_nodes() {
        return Err(Error::SizeMismatch { expected: dims.n_nodes(), actual: clamped.len() });
    }

    let solid: Vec<bool> = rho.values.iter().map(|r| *r >= spec.activation_threshold).collect();
    let modulus: Vec<f64> = rho.values.iter().map(|r| mat.modulus(r.clamp(0.0, 1.0))).collect();

    let fixed: Vec<bool> = clamped.iter().flat_map(|c| [*c; 3]).collect();
    let seed: Vec<bool> = (0..dims.len())
        .map(|e| {
            let (i, j, k) = dims.coords(e);
            k == 0 && dims.element_nodes(i, j, k)[..4].iter().any(|n| clamped[*n])
        })
        .collect();

    let ke = hex8::elastic_stiffness(dims.h, mat.nu);
    let fe = hex8::eigenstrain_load(dims.h, mat.nu);
    let b0 = hex8::strain_displacement([0.0; 3], dims.h);
    let star = hex8::tensor_to_voigt(&spec.inherent.tensor());
    let star_load: Vec<f64> = fe.iter().map(|row| (0..6).map(|m| row[m] * star[m]).sum()).collect();

    let mut deposited = vec![false; dims.len()];
    let mut birth: Vec<Option<usize>> = vec![None; dims.len()];
    let mut scale = vec![0.0; dims.len()];
    let mut strain_v = vec![[0.0f64; 6]; dims.len()];
    let mut u_total = vec![0.0; 3 * dims.n_nodes()];

    for (t, &(k0, k1)) in layer_schedule(dims.nz, spec.layers_per_step).iter().enumerate() {
        for k in k0..k1 {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let e = dims.index(i, j, k);
                    deposited[e] = solid[e];
                }
            }
        }
        let connected = grounded(dims, &deposited, &seed);
        let mut newborn = Vec::new();
        for e in 0..dims.len() {
            if connected[e] && birth[e].is_none() {
                birth[e] = Some(t);
                scale[e] = modulus[e];
                newborn.push(e);
            }
        }
        if newborn.is_empty() {
            continue;
        }

        let mut rhs = vec![0.0; u_total.len()];
        for &e in &newborn {
            let (i, j, k) = dims.coords(e);
            for (a, n) in dims.element_nodes(i, j, k).iter().enumerate() {
                for c in 0..3 {
                    rhs[3 * n + c] += scale[e] * star_load[3 * a + c];
                }
            }
        }
        let op = ElementOperator::new(dims, 3, &ke, &scale, &fixed);
        let (du, _) = cg::pcg(&op, &rhs, None, opts, |_| {})
            .map_err(|err| Error::Build { slab: t, source: Box::new(err) })?;

        for e in 0..dims.len() {
            if scale[e] == 0.0 {
                continue;
            }
            let (i, j, k) = dims.coords(e);
            let ue = gather(dims, i, j, k, &du);
            for (m, row) in b0.iter().enumerate() {
                strain_v[e][m] += row.iter().zip(&ue).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        for (a, b) in u_total.iter_mut().zip(&du) {
            *a += b;
        }
    }

    let c = hex8::elasticity_matrix(1.0, mat.nu);
    let mut stress = SymTensorField::zeros(dims);
    let mut strain = SymTensorField::zeros(dims);
    for e in 0..dims.len() {
        if scale[e] == 0.0 {
            continue;
        }
        let mech: Vec<f64> = (0..6).map(|m| strain_v[e][m] - star[m]).collect();
        for (m, row) in c.iter().enumerate() {
            stress.data[e][m] = scale[e] * row.iter().zip(&mech).map(|(x, y)| x * y).sum::<f64>();
        }
        strain.data[e] = hex8::voigt_to_tensor(&strain_v[e]);
    }
    let active = scale.iter().map(|s| *s > 0.0).collect();
    Ok(BuildResult { stress, strain, displacement: u_total, active, birth })
}
