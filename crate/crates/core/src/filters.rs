//! Design-variable transforms with exact backward passes: cone density
//! filter, the Langelaar overhang filter for 45 degree self-support, mirror
//! symmetry in x and extrusion along y.
//!
//! Symmetry and extrusion are realized as a reduced design space: one
//! variable per orbit of design voxels, expanded to the full grid before
//! filtering. The standalone averaging projections are provided as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDims, Region, RegionMask};

/// Folds an index back into `[0, n)` by reflection about the end faces.
fn reflect(mut j: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

/// Linear cone-weight filter `w_ij = max(0, r - |x_i - x_j|)`, normalized per
/// voxel. Stencils are truncated at the domain faces, except along y when
/// `reflect_y` is set, where the field is mirrored across the end faces so that
/// y-invariant fields stay y-invariant.
#[derive(Debug, Clone)]
pub struct DensityFilter {
    dims: GridDims,
    reflect_y: bool,
    /// Per (dj, dk) row, weights for di = 0, 1, .. reach.
    rows: Vec<(isize, isize, Vec<f64>)>,
    weight_sum: Vec<f64>,
}

impl DensityFilter {
    pub fn new(dims: GridDims, radius: f64, reflect_y: bool) -> Result<Self> {
        if !(radius >= dims.h) {
            return Err(Error::InvalidParameter(format!("filter radius {radius} is below the voxel size {}", dims.h)));
        }
        let reach = (radius / dims.h).ceil() as isize;
        let mut rows = Vec::new();
        for dk in -reach..=reach {
            for dj in -reach..=reach {
                let w: Vec<f64> = (0..=reach)
                    .map(|di| (radius - dims.h * ((di * di + dj * dj + dk * dk) as f64).sqrt()).max(0.0))
                    .collect();
                if w[0] > 0.0 {
                    rows.push((dj, dk, w));
                }
            }
        }
        let mut f = Self { dims, reflect_y, rows, weight_sum: Vec::new() };
        f.weight_sum = f.accumulate(&vec![1.0; dims.len()]);
        Ok(f)
    }

    fn source_row(&self, j: isize, k: isize) -> Option<(usize, usize)> {
        let d = self.dims;
        if k < 0 || k >= d.nz as isize {
            return None;
        }
        let j = if self.reflect_y {
            reflect(j, d.ny)
        } else if j < 0 || j >= d.ny as isize {
            return None;
        } else {
            j as usize
        };
        Some((j, k as usize))
    }

    /// Unnormalized weighted sums. Mirror-image terms in x are added pairwise
    /// so mirrored voxels see bitwise identical sums.
    fn accumulate(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let nx = d.nx as isize;
        let mut out = vec![0.0; d.len()];
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let ii = i as isize;
                    let mut acc = 0.0;
                    for (dj, dk, w) in &self.rows {
                        let Some((sj, sk)) = self.source_row(j as isize + dj, k as isize + dk) else { continue };
                        let base = d.index(0, sj, sk);
                        acc += w[0] * x[base + i];
                        for (di, wi) in w.iter().enumerate().skip(1) {
                            if *wi == 0.0 {
                                continue;
                            }
                            let (l, r) = (ii - di as isize, ii + di as isize);
                            let pair = match (l >= 0, r < nx) {
                                (true, true) => x[base + l as usize] + x[base + r as usize],
                                (true, false) => x[base + l as usize],
                                (false, true) => x[base + r as usize],
                                (false, false) => continue,
                            };
                            acc += wi * pair;
                        }
                    }
                    out[d.index(i, j, k)] = acc;
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.accumulate(x);
        for (o, s) in out.iter_mut().zip(&self.weight_sum) {
            *o /= s;
        }
        out
    }

    /// Transpose of [`forward`](Self::forward).
    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let nx = d.nx as isize;
        let mut out = vec![0.0; g.len()];
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    let ge = g[e] / self.weight_sum[e];
                    for (dj, dk, w) in &self.rows {
                        let Some((sj, sk)) = self.source_row(j as isize + dj, k as isize + dk) else { continue };
                        let base = d.index(0, sj, sk);
                        for (di, wi) in w.iter().enumerate() {
                            if *wi == 0.0 {
                                continue;
                            }
                            for src in [i as isize - di as isize, i as isize + di as isize] {
                                if src >= 0 && src < nx {
                                    out[base + src as usize] += wi * ge;
                                }
                                if di == 0 {
                                    break;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmFilterParams {
    /// Smooth-max exponent.
    pub p: f64,
    /// Smooth-min regularization.
    pub eps: f64,
    /// Density at which the smooth max of equal supports is exact.
    pub xi0: f64,
}

impl Default for AmFilterParams {
    fn default() -> Self {
        Self { p: 40.0, eps: 1e-6, xi0: 0.5 }
    }
}

impl AmFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 4.0 && self.eps > 0.0 && self.xi0 > 0.0 && self.xi0 < 1.0) {
            return Err(Error::InvalidParameter("AM filter needs P >= 4, eps > 0, 0 < xi0 < 1".into()));
        }
        Ok(())
    }
}

/// Layer-recursive overhang filter. The printed density of a voxel is the
/// smooth minimum of its blueprint density and the smooth maximum of the
/// printed densities of the voxel below and that voxel's four face
/// neighbours. The bottom layer prints as drawn. Passive voxels of the mask
/// print at their tagged value and act as support. With `reflect_y` the y
/// neighbours across an end face are taken from the mirror image.
#[derive(Debug, Clone)]
pub struct AmFilter {
    dims: GridDims,
    params: AmFilterParams,
    fixed: Vec<Option<f64>>,
    reflect_y: bool,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct AmTape {
    blueprint: Vec<f64>,
    printed: Vec<f64>,
    support: Vec<f64>,
    clipped: Vec<bool>,
}

impl AmTape {
    pub fn printed(&self) -> &[f64] {
        &self.printed
    }
}

impl AmFilter {
    pub fn new(dims: GridDims, params: AmFilterParams, mask: Option<&RegionMask>, reflect_y: bool) -> Result<Self> {
        params.validate()?;
        let fixed = match mask {
            Some(m) => {
                if !m.dims().same_shape(&dims) {
                    return Err(Error::SizeMismatch { expected: dims.len(), actual: m.dims().len() });
                }
                (0..dims.len()).map(|e| m.passive_value(e)).collect()
            }
            None => vec![None; dims.len()],
        };
        Ok(Self { dims, params, fixed, reflect_y })
    }

    /// Support voxels in the layer below, as center then the x pair then the y pair.
    fn supports(&self, i: usize, j: usize, k: usize, buf: &mut [Option<usize>; 5]) {
        let d = self.dims;
        let kb = k - 1;
        let y = |jj: isize| {
            if self.reflect_y {
                Some(d.index(i, reflect(jj, d.ny), kb))
            } else if jj >= 0 && (jj as usize) < d.ny {
                Some(d.index(i, jj as usize, kb))
            } else {
                None
            }
        };
        buf[0] = Some(d.index(i, j, kb));
        buf[1] = (i > 0).then(|| d.index(i - 1, j, kb));
        buf[2] = (i + 1 < d.nx).then(|| d.index(i + 1, j, kb));
        buf[3] = y(j as isize - 1);
        buf[4] = y(j as isize + 1);
    }

    fn q(&self, n: usize) -> f64 {
        self.params.p + (n as f64).ln() / self.params.xi0.ln()
    }

    fn smin(&self, x: f64, s: f64) -> f64 {
        let e = self.params.eps;
        0.5 * (x + s - ((x - s).powi(2) + e).sqrt() + e.sqrt())
    }

    fn smin_grad(&self, x: f64, s: f64) -> (f64, f64) {
        let r = (x - s) / ((x - s).powi(2) + self.params.eps).sqrt();
        (0.5 * (1.0 - r), 0.5 * (1.0 + r))
    }

    /// Smooth max of the support values; fills `grad` with the partials when given.
    fn smax(&self, vals: &[Option<f64>; 5], grad: Option<&mut [f64; 5]>) -> f64 {
        let p = self.params.p;
        let n = vals.iter().flatten().count();
        let q = self.q(n);
        let m = vals.iter().flatten().copied().fold(0.0f64, f64::max);
        if m <= 0.0 {
            if let Some(g) = grad {
                *g = [0.0; 5];
            }
            return 0.0;
        }
        let r = |v: &Option<f64>| v.map_or(0.0, |v| (v / m).powf(p));
        let sum_r = r(&vals[0]) + (r(&vals[1]) + r(&vals[2])) + (r(&vals[3]) + r(&vals[4]));
        let out = m.powf(p / q) * sum_r.powf(1.0 / q);
        if let Some(g) = grad {
            for (gi, v) in g.iter_mut().zip(vals) {
                *gi = v.map_or(0.0, |v| (p / q) * out * (v / m).powf(p - 1.0) / (m * sum_r));
            }
        }
        out
    }

    pub fn forward(&self, blueprint: &[f64]) -> AmTape {
        let d = self.dims;
        assert_eq!(blueprint.len(), d.len());
        let mut printed = vec![0.0; d.len()];
        let mut support = vec![0.0; d.len()];
        let mut clipped = vec![false; d.len()];
        let mut buf = [None; 5];
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    if let Some(v) = self.fixed[e] {
                        printed[e] = v;
                        continue;
                    }
                    if k == 0 {
                        printed[e] = blueprint[e];
                        continue;
                    }
                    self.supports(i, j, k, &mut buf);
                    let vals = buf.map(|s| s.map(|s| printed[s]));
                    let s = self.smax(&vals, None);
                    support[e] = s;
                    let v = self.smin(blueprint[e], s);
                    if v > 1.0 {
                        clipped[e] = true;
                        printed[e] = 1.0;
                    } else {
                        printed[e] = v;
                    }
                }
            }
        }
        AmTape { blueprint: blueprint.to_vec(), printed, support, clipped }
    }

    /// Gradient with respect to the blueprint given the gradient with respect
    /// to the printed field.
    pub fn backward(&self, tape: &AmTape, g_printed: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let mut lam = g_printed.to_vec();
        let mut out = vec![0.0; d.len()];
        let mut buf = [None; 5];
        let mut dmax = [0.0; 5];
        for k in (0..d.nz).rev() {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    if self.fixed[e].is_some() || tape.clipped[e] {
                        continue;
                    }
                    if k == 0 {
                        out[e] = lam[e];
                        continue;
                    }
                    let (dx, ds) = self.smin_grad(tape.blueprint[e], tape.support[e]);
                    out[e] = lam[e] * dx;
                    self.supports(i, j, k, &mut buf);
                    let vals = buf.map(|s| s.map(|s| tape.printed[s]));
                    self.smax(&vals, Some(&mut dmax));
                    for (s, g) in buf.iter().zip(&dmax) {
                        if let Some(s) = s {
                            lam[*s] += lam[e] * ds * g;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Mirror average about the x mid-plane.
pub fn symmetry_project(dims: GridDims, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let a = dims.index(i, j, k);
                let b = dims.index(dims.nx - 1 - i, j, k);
                out[a] = 0.5 * (x[a] + x[b]);
            }
        }
    }
    out
}

/// The mirror average is self-adjoint.
pub fn symmetry_backward(dims: GridDims, g: &[f64]) -> Vec<f64> {
    symmetry_project(dims, g)
}

/// Average of every (x, z) column along y, broadcast back.
pub fn extrusion_project(dims: GridDims, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..dims.nz {
        for i in 0..dims.nx {
            let mean = (0..dims.ny).map(|j| x[dims.index(i, j, k)]).sum::<f64>() / dims.ny as f64;
            for j in 0..dims.ny {
                out[dims.index(i, j, k)] = mean;
            }
        }
    }
    out
}

pub fn extrusion_backward(dims: GridDims, g: &[f64]) -> Vec<f64> {
    extrusion_project(dims, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterStage {
    Density { radius: f64 },
    AmOverhang(AmFilterParams),
    SymmetryX,
    ExtrusionY,
}

/// Ordered filter stages. Symmetry and extrusion restrict the design space
/// wherever they appear; density and overhang stages run in listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterChain(pub Vec<FilterStage>);

impl FilterChain {
    pub fn standard(radius: f64, am: bool, symmetric: bool) -> Self {
        let mut stages = Vec::new();
        if symmetric {
            stages.push(FilterStage::SymmetryX);
        }
        stages.push(FilterStage::ExtrusionY);
        stages.push(FilterStage::Density { radius });
        if am {
            stages.push(FilterStage::AmOverhang(AmFilterParams::default()));
        }
        Self(stages)
    }

    pub fn symmetric(&self) -> bool {
        self.0.contains(&FilterStage::SymmetryX)
    }

    pub fn extruded(&self) -> bool {
        self.0.contains(&FilterStage::ExtrusionY)
    }

    pub fn has_am(&self) -> bool {
        self.0.iter().any(|s| matches!(s, FilterStage::AmOverhang(_)))
    }

    pub fn without_am(&self) -> Self {
        Self(self.0.iter().filter(|s| !matches!(s, FilterStage::AmOverhang(_))).copied().collect())
    }
}

/// Design voxels grouped into orbits of the active symmetries; one design
/// variable per orbit.
#[derive(Debug, Clone)]
pub struct DesignSpace {
    mask: RegionMask,
    class: Vec<Option<usize>>,
    n_vars: usize,
}

impl DesignSpace {
    pub fn new(mask: &RegionMask, symmetric: bool, extruded: bool) -> Result<Self> {
        let d = mask.dims();
        let mut class = vec![None; d.len()];
        let mut n_vars = 0;
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    if !mask.is_design(e) || class[e].is_some() {
                        continue;
                    }
                    let is = if symmetric { vec![i, d.nx - 1 - i] } else { vec![i] };
                    let js: Vec<usize> = if extruded { (0..d.ny).collect() } else { vec![j] };
                    for &ii in &is {
                        for &jj in &js {
                            let m = d.index(ii, jj, k);
                            if !mask.is_design(m) {
                                return Err(Error::InvalidParameter(format!(
                                    "design region is not invariant under the requested symmetry at voxel ({ii}, {jj}, {k})"
                                )));
                            }
                            class[m] = Some(n_vars);
                        }
                    }
                    n_vars += 1;
                }
            }
        }
        Ok(Self { mask: mask.clone(), class, n_vars })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn mask(&self) -> &RegionMask {
        &self.mask
    }

    pub fn class_of(&self, voxel: usize) -> Option<usize> {
        self.class[voxel]
    }

    /// Full-grid field with passive values imposed.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_vars);
        self.class
            .iter()
            .enumerate()
            .map(|(e, c)| match c {
                Some(c) => x[*c],
                None => self.mask.passive_value(e).unwrap_or(0.0),
            })
            .collect()
    }

    /// Adjoint of [`expand`](Self::expand): sums orbit gradients.
    pub fn reduce(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vars];
        for (c, v) in self.class.iter().zip(g) {
            if let Some(c) = c {
                out[*c] += v;
            }
        }
        out
    }

    /// Orbit average of a full field, the least-squares inverse of `expand`.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.n_vars];
        let mut count = vec![0usize; self.n_vars];
        for (c, v) in self.class.iter().zip(full) {
            if let Some(c) = c {
                sum[*c] += v;
                count[*c] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect()
    }

    /// Voxels per variable.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut count = vec![0usize; self.n_vars];
        for c in self.class.iter().flatten() {
            count[*c] += 1;
        }
        count
    }
}

enum Stage {
    Density(DensityFilter),
    Am(AmFilter),
}

/// Reduced design variables to physical densities, with the matching backward pass.
pub struct FilterPipeline {
    space: DesignSpace,
    stages: Vec<Stage>,
}

/// Intermediate fields of one forward pass.
pub struct PipelineTape {
    am: Vec<Option<AmTape>>,
    /// Physical (printed) densities.
    pub rho: Vec<f64>,
    /// Densities after the density filter, before the overhang filter.
    pub blueprint: Vec<f64>,
}

impl FilterPipeline {
    pub fn new(mask: &RegionMask, chain: &FilterChain) -> Result<Self> {
        let dims = mask.dims();
        let space = DesignSpace::new(mask, chain.symmetric(), chain.extruded())?;
        let mut stages = Vec::new();
        for s in &chain.0 {
            match s {
                FilterStage::Density { radius } => {
                    stages.push(Stage::Density(DensityFilter::new(dims, *radius, chain.extruded())?))
                }
                FilterStage::AmOverhang(p) => {
                    stages.push(Stage::Am(AmFilter::new(dims, *p, Some(mask), chain.extruded())?))
                }
                FilterStage::SymmetryX | FilterStage::ExtrusionY => {}
            }
        }
        Ok(Self { space, stages })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn dims(&self) -> GridDims {
        self.space.mask.dims()
    }

    pub fn forward(&self, x: &[f64]) -> PipelineTape {
        let mut v = self.space.expand(x);
        let mut am = Vec::with_capacity(self.stages.len());
        let mut blueprint = v.clone();
        for s in &self.stages {
            match s {
                Stage::Density(f) => {
                    v = f.forward(&v);
                    self.space.mask.impose(&mut v);
                    blueprint = v.clone();
                    am.push(None);
                }
                Stage::Am(f) => {
                    blueprint = v.clone();
                    let t = f.forward(&v);
                    v = t.printed.clone();
                    am.push(Some(t));
                }
            }
        }
        PipelineTape { am, rho: v, blueprint }
    }

    /// Gradient with respect to the design variables given `dL/drho`.
    pub fn backward(&self, tape: &PipelineTape, g_rho: &[f64]) -> Vec<f64> {
        let mut g = g_rho.to_vec();
        for (s, t) in self.stages.iter().zip(&tape.am).rev() {
            match s {
                Stage::Density(f) => {
                    self.space.mask.zero_passive(&mut g);
                    g = f.backward(&g);
                }
                Stage::Am(f) => g = f.backward(t.as_ref().expect("overhang tape"), &g),
            }
        }
        self.space.mask.zero_passive(&mut g);
        self.space.reduce(&g)
    }
}

/// Tags every voxel Design except the ones listed.
pub fn mask_with(dims: GridDims, passive: &[(usize, Region)]) -> Result<RegionMask> {
    let mut tags = vec![Region::Design; dims.len()];
    for &(e, r) in passive {
        tags[e] = r;
    }
    RegionMask::new(dims, tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_filter_keeps_constants() {
        let d = GridDims::new(4, 3, 5, 0.5).unwrap();
        for reflect in [false, true] {
            let f = DensityFilter::new(d, 1.2, reflect).unwrap();
            let y = f.forward(&vec![0.7; d.len()]);
            assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
        assert!(DensityFilter::new(d, 0.4, false).is_err());
    }

    #[test]
    fn smooth_ops_at_corners() {
        let d = GridDims::new(1, 1, 2, 1.0).unwrap();
        let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
        assert!((f.smin(0.0, 0.0)).abs() < 1e-15);
        assert_eq!(f.smin(1.0, 1.0), 1.0);
        let s = f.smax(&[Some(0.5); 5], None);
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reflection_folds_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn design_space_orbits() {
        let d = GridDims::new(4, 3, 2, 1.0).unwrap();
        let m = RegionMask::all_design(d);
        assert_eq!(DesignSpace::new(&m, true, true).unwrap().n_vars(), 4);
        assert_eq!(DesignSpace::new(&m, true, false).unwrap().n_vars(), 12);
        assert_eq!(DesignSpace::new(&m, false, true).unwrap().n_vars(), 8);
        let bad = mask_with(d, &[(d.index(0, 0, 0), Region::PassiveSolid)]).unwrap();
        assert!(DesignSpace::new(&bad, true, false).is_err());
    }
}
