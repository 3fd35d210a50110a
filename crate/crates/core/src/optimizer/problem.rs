//! Load cases on the coupon used for design generation.

use serde::{Deserialize, Serialize};

use crate::coupon::CouponSpec;
use crate::error::{Error, Result};
use crate::fea::{MaterialSpec, SolverOpts};
use crate::filters::FilterChain;
use crate::grid::{GridDims, Region, RegionMask};
use crate::mma::MmaParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Physics {
    ThermalCompliance,
    ElasticCompliance,
}

/// Boundary conditions and loads. Thermal cases carry a design-independent
/// volumetric heat source `1 + source_gradient * z / H` over the design region;
/// elastic cases pressurize the faces of a pre-cut diamond channel and clamp
/// the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadCase {
    /// Heat sink over the whole base.
    ThermalSymmetric { source_gradient: f64 },
    /// Heat sink over the left half of the base and the left side face.
    ThermalAsymmetric { source_gradient: f64 },
    /// Uniform pressure on the pre-cut channel.
    HydrostaticPressure { pressure: f64, precut_half_diag: f64 },
    /// Independent pressures on the four quadrants of the pre-cut channel,
    /// ordered lower-left, lower-right, upper-left, upper-right.
    FourSegment { pressures: [f64; 4], precut_half_diag: f64 },
}

impl LoadCase {
    pub fn physics(&self) -> Physics {
        match self {
            LoadCase::ThermalSymmetric { .. } | LoadCase::ThermalAsymmetric { .. } => Physics::ThermalCompliance,
            LoadCase::HydrostaticPressure { .. } | LoadCase::FourSegment { .. } => Physics::ElasticCompliance,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoadCase::ThermalSymmetric { .. } => "thermal_symmetric",
            LoadCase::ThermalAsymmetric { .. } => "thermal_asymmetric",
            LoadCase::HydrostaticPressure { .. } => "hydrostatic_pressure",
            LoadCase::FourSegment { .. } => "four_segment",
        }
    }

    /// Whether the loads are mirror symmetric in x.
    pub fn is_symmetric(&self) -> bool {
        match self {
            LoadCase::ThermalSymmetric { .. } | LoadCase::HydrostaticPressure { .. } => true,
            LoadCase::ThermalAsymmetric { .. } => false,
            LoadCase::FourSegment { pressures, .. } => pressures[0] == pressures[1] && pressures[2] == pressures[3],
        }
    }

    fn precut(&self) -> Option<f64> {
        match self {
            LoadCase::HydrostaticPressure { precut_half_diag, .. } | LoadCase::FourSegment { precut_half_diag, .. } => {
                Some(*precut_half_diag)
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LoadCase::ThermalSymmetric { source_gradient } | LoadCase::ThermalAsymmetric { source_gradient } => {
                *source_gradient > -1.0 && source_gradient.is_finite()
            }
            LoadCase::HydrostaticPressure { pressure, precut_half_diag } => {
                *pressure > 0.0 && *precut_half_diag > 0.0 && *precut_half_diag < 0.5
            }
            LoadCase::FourSegment { pressures, precut_half_diag } => {
                pressures.iter().all(|p| *p >= 0.0 && p.is_finite())
                    && pressures.iter().any(|p| *p > 0.0)
                    && *precut_half_diag > 0.0
                    && *precut_half_diag < 0.5
            }
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("bad {} load parameters", self.name())));
        }
        Ok(())
    }
}

/// A compliance topology optimization problem on the coupon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToProblem {
    pub coupon: CouponSpec,
    #[serde(default)]
    pub material: MaterialSpec,
    pub load: LoadCase,
    /// Target volume fraction of the design region.
    pub vtarget: f64,
    pub filters: FilterChain,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Convergence threshold on the largest design-variable change.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub mma: MmaParams,
    #[serde(default)]
    pub solver: SolverOpts,
    /// Amplitude of the seeded perturbation of the uniform initial design.
    #[serde(default)]
    pub init_noise: f64,
}

fn default_max_iters() -> usize {
    300
}

fn default_tol() -> f64 {
    0.01
}

impl ToProblem {
    /// Coupon problem with the default filter chain: symmetry when the loads
    /// allow it, extrusion, a density filter of 1.5 voxels and the overhang filter.
    pub fn on_coupon(coupon: CouponSpec, load: LoadCase, vtarget: f64) -> Self {
        Self {
            coupon,
            material: MaterialSpec::default(),
            load,
            vtarget,
            filters: FilterChain::standard(1.5 * coupon.h, true, load.is_symmetric()),
            max_iters: default_max_iters(),
            tol: default_tol(),
            mma: MmaParams::default(),
            solver: SolverOpts::default(),
            init_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coupon.validate()?;
        self.material.validate()?;
        self.load.validate()?;
        self.mma.validate()?;
        self.solver.validate()?;
        if !(self.vtarget > 0.0 && self.vtarget <= 1.0) {
            return Err(Error::InvalidParameter(format!("vtarget must lie in (0, 1], got {}", self.vtarget)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("need tol > 0 and max_iters >= 1".into()));
        }
        if !(self.init_noise >= 0.0 && self.init_noise < 0.5) {
            return Err(Error::InvalidParameter("init_noise must lie in [0, 0.5)".into()));
        }
        if self.filters.symmetric() && !self.load.is_symmetric() {
            return Err(Error::InvalidParameter(format!("{} loads are not mirror symmetric", self.load.name())));
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<RegionMask> {
        self.coupon.region_mask(self.load.precut())
    }
}

/// Nodal load vector and fixed-dof flags of a problem.
#[derive(Debug, Clone)]
pub struct Boundary {
    pub load: Vec<f64>,
    pub fixed: Vec<bool>,
}

pub fn boundary(prob: &ToProblem, mask: &RegionMask) -> Result<Boundary> {
    let d = prob.coupon.dims()?;
    match prob.load {
        LoadCase::ThermalSymmetric { source_gradient } => {
            Ok(Boundary { load: heat_source(d, mask, source_gradient), fixed: base_sink(d, false) })
        }
        LoadCase::ThermalAsymmetric { source_gradient } => {
            Ok(Boundary { load: heat_source(d, mask, source_gradient), fixed: base_sink(d, true) })
        }
        LoadCase::HydrostaticPressure { pressure, precut_half_diag } => Ok(Boundary {
            load: channel_pressure(&prob.coupon, precut_half_diag, mask, |_| pressure),
            fixed: clamped_base(d),
        }),
        LoadCase::FourSegment { pressures, precut_half_diag } => {
            let cx = 0.5 * d.nx as f64 * d.h;
            let cz = prob.coupon.channel_center * d.nz as f64 * d.h;
            let load = channel_pressure(&prob.coupon, precut_half_diag, mask, |[x, _, z]| {
                let right = usize::from(x >= cx);
                let upper = usize::from(z >= cz);
                pressures[right + 2 * upper]
            });
            Ok(Boundary { load, fixed: clamped_base(d) })
        }
    }
}

fn heat_source(d: GridDims, mask: &RegionMask, gradient: f64) -> Vec<f64> {
    let mut f = vec![0.0; d.n_nodes()];
    let height = d.nz as f64 * d.h;
    let share = d.voxel_volume() / 8.0;
    for k in 0..d.nz {
        let q = 1.0 + gradient * (k as f64 + 0.5) * d.h / height;
        for j in 0..d.ny {
            for i in 0..d.nx {
                if !mask.is_design(d.index(i, j, k)) {
                    continue;
                }
                for n in d.element_nodes(i, j, k) {
                    f[n] += q * share;
                }
            }
        }
    }
    f
}

fn base_sink(d: GridDims, one_sided: bool) -> Vec<bool> {
    let (nnx, nny, nnz) = d.node_dims();
    let mut fixed = vec![false; d.n_nodes()];
    for k in 0..nnz {
        for j in 0..nny {
            for i in 0..nnx {
                let on_base = k == 0 && (!one_sided || 2 * i <= d.nx);
                let on_left = one_sided && i == 0;
                if on_base || on_left {
                    fixed[d.node_index(i, j, k)] = true;
                }
            }
        }
    }
    fixed
}

fn clamped_base(d: GridDims) -> Vec<bool> {
    let (nnx, nny, _) = d.node_dims();
    let mut fixed = vec![false; 3 * d.n_nodes()];
    for j in 0..nny {
        for i in 0..nnx {
            let n = d.node_index(i, j, 0);
            fixed[3 * n..3 * n + 3].fill(true);
        }
    }
    fixed
}

/// Pressure on every face shared by a pre-cut channel voxel and a non-void
/// voxel, pushing into the non-void side. Notch voids are open to the outside
/// and carry no pressure.
fn channel_pressure(
    coupon: &CouponSpec,
    half_diag: f64,
    mask: &RegionMask,
    pressure_at: impl Fn([f64; 3]) -> f64,
) -> Vec<f64> {
    let d = mask.dims();
    let mut f = vec![0.0; 3 * d.n_nodes()];
    let is_void = |i: usize, j: usize, k: usize| mask.tag(d.index(i, j, k)) == Region::PassiveVoid;
    let channel: Vec<bool> = (0..d.len())
        .map(|e| {
            let (i, _, k) = d.coords(e);
            coupon.in_diamond(i, k, half_diag) && !coupon.in_notch(i, k)
        })
        .collect();
    let area = d.h * d.h;
    for k in 0..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                if !channel[d.index(i, j, k)] {
                    continue;
                }
                // Neighbour offset and the axis of the face normal.
                let neighbours: [(isize, isize, isize, usize); 6] =
                    [(-1, 0, 0, 0), (1, 0, 0, 0), (0, -1, 0, 1), (0, 1, 0, 1), (0, 0, -1, 2), (0, 0, 1, 2)];
                for (di, dj, dk, axis) in neighbours {
                    let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if ni < 0 || nj < 0 || nk < 0 || ni >= d.nx as isize || nj >= d.ny as isize || nk >= d.nz as isize {
                        continue;
                    }
                    let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                    if is_void(ni, nj, nk) {
                        continue;
                    }
                    let sign = (di + dj + dk) as f64;
                    let center = [
                        (i as f64 + 0.5 + 0.5 * di as f64) * d.h,
                        (j as f64 + 0.5 + 0.5 * dj as f64) * d.h,
                        (k as f64 + 0.5 + 0.5 * dk as f64) * d.h,
                    ];
                    let force = pressure_at(center) * area / 4.0;
                    for n in face_nodes(d, i, j, k, di, dj, dk) {
                        f[3 * n + axis] += sign * force;
                    }
                }
            }
        }
    }
    f
}

/// The four nodes of the face of voxel (i, j, k) facing direction (di, dj, dk).
fn face_nodes(d: GridDims, i: usize, j: usize, k: usize, di: isize, dj: isize, dk: isize) -> [usize; 4] {
    let pick = |c: usize, dc: isize| if dc > 0 { c + 1 } else { c };
    if di != 0 {
        let a = pick(i, di);
        [d.node_index(a, j, k), d.node_index(a, j + 1, k), d.node_index(a, j, k + 1), d.node_index(a, j + 1, k + 1)]
    } else if dj != 0 {
        let b = pick(j, dj);
        [d.node_index(i, b, k), d.node_index(i + 1, b, k), d.node_index(i, b, k + 1), d.node_index(i + 1, b, k + 1)]
    } else {
        let c = pick(k, dk);
        [d.node_index(i, j, c), d.node_index(i + 1, j, c), d.node_index(i, j + 1, c), d.node_index(i + 1, j + 1, c)]
    }
}
