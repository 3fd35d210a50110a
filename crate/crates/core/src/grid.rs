//! Voxel grids and the per-voxel fields shared by every stage of the pipeline.
//!
//! Fields are voxel-centered and stored x-fastest, then y, then z, so a
//! contiguous run of `nx * ny` values is one build layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts and the uniform voxel edge length (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub h: f64,
}

impl GridDims {
    pub fn new(nx: usize, ny: usize, nz: usize, h: f64) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidGrid(format!("voxel counts must be positive, got {nx}x{ny}x{nz}")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidGrid(format!("voxel size must be positive, got {h}")));
        }
        Ok(Self { nx, ny, nz, h })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    /// Same voxel counts (the edge length is ignored).
    pub fn same_shape(&self, other: &GridDims) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nz == other.nz
    }

    pub fn node_dims(&self) -> (usize, usize, usize) {
        (self.nx + 1, self.ny + 1, self.nz + 1)
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1) * (self.nz + 1)
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.nx + 1) * (j + (self.ny + 1) * k)
    }

    /// Global node numbers of element `(i, j, k)` in hex8 reference order:
    /// bottom face counter-clockwise, then the top face.
    #[inline]
    pub fn element_nodes(&self, i: usize, j: usize, k: usize) -> [usize; 8] {
        [
            self.node_index(i, j, k),
            self.node_index(i + 1, j, k),
            self.node_index(i + 1, j + 1, k),
            self.node_index(i, j + 1, k),
            self.node_index(i, j, k + 1),
            self.node_index(i + 1, j, k + 1),
            self.node_index(i + 1, j + 1, k + 1),
            self.node_index(i, j + 1, k + 1),
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.h * self.h * self.h
    }
}

/// A real value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub dims: GridDims,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::SizeMismatch { expected: dims.len(), actual: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, values })
    }

    pub fn constant(dims: GridDims, value: f64) -> Self {
        Self { dims, values: vec![value; dims.len()] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.dims.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.dims.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_masked(&self.values, None).unwrap_or(0)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// Lowest-index argmax over the entries selected by `mask` (all when `None`).
pub fn argmax_masked(values: &[f64], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, &v) in values.iter().enumerate() {
        if let Some(m) = mask {
            if !m[idx] {
                continue;
            }
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((idx, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Design,
    PassiveSolid,
    PassiveVoid,
}

/// Per-voxel design/passive tags. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    dims: GridDims,
    tags: Vec<Region>,
    n_design: usize,
}

impl RegionMask {
    pub fn new(dims: GridDims, tags: Vec<Region>) -> Result<Self> {
        if tags.len() != dims.len() {
            return Err(Error::SizeMismatch { expected: dims.len(), actual: tags.len() });
        }
        let n_design = tags.iter().filter(|t| **t == Region::Design).count();
        if n_design == 0 {
            return Err(Error::InvalidGrid("region mask has no design voxels".into()));
        }
        Ok(Self { dims, tags, n_design })
    }

    pub fn all_design(dims: GridDims) -> Self {
        Self { dims, tags: vec![Region::Design; dims.len()], n_design: dims.len() }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn tags(&self) -> &[Region] {
        &self.tags
    }

    #[inline]
    pub fn tag(&self, idx: usize) -> Region {
        self.tags[idx]
    }

    pub fn design_count(&self) -> usize {
        self.n_design
    }

    pub fn is_design(&self, idx: usize) -> bool {
        self.tags[idx] == Region::Design
    }

    /// Fixed value of a passive voxel, `None` for design voxels.
    #[inline]
    pub fn passive_value(&self, idx: usize) -> Option<f64> {
        match self.tags[idx] {
            Region::Design => None,
            Region::PassiveSolid => Some(1.0),
            Region::PassiveVoid => Some(0.0),
        }
    }

    /// Overwrite passive voxels with their fixed values.
    pub fn impose(&self, values: &mut [f64]) {
        for (v, t) in values.iter_mut().zip(&self.tags) {
            match t {
                Region::Design => {}
                Region::PassiveSolid => *v = 1.0,
                Region::PassiveVoid => *v = 0.0,
            }
        }
    }

    /// Zero the entries of passive voxels (adjoint of [`RegionMask::impose`]).
    pub fn zero_passive(&self, grad: &mut [f64]) {
        for (g, t) in grad.iter_mut().zip(&self.tags) {
            if *t != Region::Design {
                *g = 0.0;
            }
        }
    }

    /// Voxels that are not passive void (the coupon body plus the design region).
    pub fn body(&self) -> Vec<bool> {
        self.tags.iter().map(|t| *t != Region::PassiveVoid).collect()
    }
}

/// Build a density field: design voxels take `init`, passives their fixed value.
pub fn make_grid(dims: GridDims, mask: &RegionMask, init: f64) -> Result<ScalarField> {
    if !(0.0..=1.0).contains(&init) {
        return Err(Error::InvalidParameter(format!("initial density {init} outside [0, 1]")));
    }
    if !mask.dims().same_shape(&dims) {
        return Err(Error::SizeMismatch { expected: dims.len(), actual: mask.tags().len() });
    }
    let mut values = vec![init; dims.len()];
    mask.impose(&mut values);
    Ok(ScalarField { dims, values })
}

/// Symmetric 3x3 tensor per voxel, components ordered (xx, yy, zz, xy, yz, xz).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    pub dims: GridDims,
    pub data: Vec<[f64; 6]>,
}

impl SymTensorField {
    pub fn zeros(dims: GridDims) -> Self {
        Self { dims, data: vec![[0.0; 6]; dims.len()] }
    }

    pub const COMPONENTS: [&'static str; 6] = ["xx", "yy", "zz", "xy", "yz", "xz"];

    pub fn component(&self, c: usize) -> ScalarField {
        ScalarField { dims: self.dims, values: self.data.iter().map(|t| t[c]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.data {
            for c in t.iter_mut() {
                *c *= s;
            }
        }
    }
}

#[inline]
fn source_coordinate(dst_i: usize, n_dst: usize, n_src: usize) -> (usize, usize, f64) {
    let s = (dst_i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5;
    let s = s.clamp(0.0, (n_src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_src - 1);
    (i0, i1, s - i0 as f64)
}

/// Trilinear interpolation between voxel centers of two grids spanning the
/// same physical box. Samples outside the outermost centers clamp.
pub fn trilinear_resample(src: &ScalarField, dst: GridDims) -> ScalarField {
    let sd = src.dims;
    if sd.same_shape(&dst) {
        return ScalarField { dims: dst, values: src.values.clone() };
    }
    let xs: Vec<_> = (0..dst.nx).map(|i| source_coordinate(i, dst.nx, sd.nx)).collect();
    let ys: Vec<_> = (0..dst.ny).map(|j| source_coordinate(j, dst.ny, sd.ny)).collect();
    let zs: Vec<_> = (0..dst.nz).map(|k| source_coordinate(k, dst.nz, sd.nz)).collect();
    let mut values = Vec::with_capacity(dst.len());
    for &(k0, k1, tz) in &zs {
        for &(j0, j1, ty) in &ys {
            for &(i0, i1, tx) in &xs {
                let c = |i, j, k| src.get(i, j, k);
                let c00 = c(i0, j0, k0) * (1.0 - tx) + c(i1, j0, k0) * tx;
                let c10 = c(i0, j1, k0) * (1.0 - tx) + c(i1, j1, k0) * tx;
                let c01 = c(i0, j0, k1) * (1.0 - tx) + c(i1, j0, k1) * tx;
                let c11 = c(i0, j1, k1) * (1.0 - tx) + c(i1, j1, k1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                values.push(c0 * (1.0 - tz) + c1 * tz);
            }
        }
    }
    ScalarField { dims: dst, values }
}

/// Evaluate the trilinear blend at a physical point (mm, origin at the grid corner).
pub fn sample_trilinear(field: &ScalarField, point: [f64; 3]) -> f64 {
    let d = field.dims;
    let axis = |p: f64, n: usize| {
        let s = (p / d.h - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        ((i0, (i0 + 1).min(n - 1)), s - i0 as f64)
    };
    let ((i0, i1), tx) = axis(point[0], d.nx);
    let ((j0, j1), ty) = axis(point[1], d.ny);
    let ((k0, k1), tz) = axis(point[2], d.nz);
    let c = |i, j, k| field.get(i, j, k);
    let c0 = (c(i0, j0, k0) * (1.0 - tx) + c(i1, j0, k0) * tx) * (1.0 - ty)
        + (c(i0, j1, k0) * (1.0 - tx) + c(i1, j1, k0) * tx) * ty;
    let c1 = (c(i0, j0, k1) * (1.0 - tx) + c(i1, j0, k1) * tx) * (1.0 - ty)
        + (c(i0, j1, k1) * (1.0 - tx) + c(i1, j1, k1) * tx) * ty;
    c0 * (1.0 - tz) + c1 * tz
}

fn overlap_weights(n_dst: usize, n_src: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_dst)
        .map(|i| {
            let lo = i as f64 / n_dst as f64;
            let hi = (i + 1) as f64 / n_dst as f64;
            let mut w = Vec::new();
            for s in 0..n_src {
                let a = (s as f64 / n_src as f64).max(lo);
                let b = ((s + 1) as f64 / n_src as f64).min(hi);
                if b > a {
                    w.push((s, (b - a) * n_dst as f64));
                }
            }
            w
        })
        .collect()
}

/// Volume-weighted average onto a coarser (or any) grid over the same box.
pub fn volume_average(src: &ScalarField, dst: GridDims) -> ScalarField {
    let sd = src.dims;
    if sd.same_shape(&dst) {
        return ScalarField { dims: dst, values: src.values.clone() };
    }
    let wx = overlap_weights(dst.nx, sd.nx);
    let wy = overlap_weights(dst.ny, sd.ny);
    let wz = overlap_weights(dst.nz, sd.nz);
    let mut values = Vec::with_capacity(dst.len());
    for wk in &wz {
        for wj in &wy {
            for wi in &wx {
                let mut acc = 0.0;
                for &(k, a) in wk {
                    for &(j, b) in wj {
                        for &(i, c) in wi {
                            acc += a * b * c * src.get(i, j, k);
                        }
                    }
                }
                values.push(acc);
            }
        }
    }
    ScalarField { dims: dst, values }
}

/// Rotate a field by 180 degrees about the z (build) axis.
pub fn rotate180_z(f: &ScalarField) -> ScalarField {
    let d = f.dims;
    let mut values = vec![0.0; d.len()];
    for k in 0..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                values[d.index(d.nx - 1 - i, d.ny - 1 - j, k)] = f.get(i, j, k);
            }
        }
    }
    ScalarField { dims: d, values }
}

/// The `ceil(frac * n)` largest entries among those selected by `mask`, plus
/// any entries tied with the smallest of them.
pub fn top_fraction(values: &[f64], mask: Option<&[bool]>, frac: f64) -> Vec<bool> {
    let pick = |i: usize| mask.is_none_or(|m| m[i]);
    let mut chosen: Vec<f64> = (0..values.len()).filter(|&i| pick(i)).map(|i| values[i]).collect();
    if chosen.is_empty() {
        return vec![false; values.len()];
    }
    chosen.sort_by(|a, b| b.total_cmp(a));
    let k = ((frac * chosen.len() as f64).ceil() as usize).clamp(1, chosen.len());
    let cut = chosen[k - 1];
    (0..values.len()).map(|i| pick(i) && values[i] >= cut).collect()
}

/// Grows a voxel set by `r` voxels in every direction (Chebyshev distance).
pub fn dilate(dims: GridDims, set: &[bool], r: usize) -> Vec<bool> {
    let mut out = vec![false; set.len()];
    for (idx, _) in set.iter().enumerate().filter(|(_, s)| **s) {
        let (i, j, k) = dims.coords(idx);
        for kk in k.saturating_sub(r)..=(k + r).min(dims.nz - 1) {
            for jj in j.saturating_sub(r)..=(j + r).min(dims.ny - 1) {
                for ii in i.saturating_sub(r)..=(i + r).min(dims.nx - 1) {
                    out[dims.index(ii, jj, kk)] = true;
                }
            }
        }
    }
    out
}

/// A 2D array indexed (x, z), x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub nx: usize,
    pub nz: usize,
    pub values: Vec<f64>,
}

impl Slice2 {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i + self.nx * k]
    }
}

/// The xz-slice at `j = floor(ny / 2)`.
pub fn central_xz_slice(f: &ScalarField) -> Slice2 {
    let d = f.dims;
    let j = d.ny / 2;
    let mut values = Vec::with_capacity(d.nx * d.nz);
    for k in 0..d.nz {
        for i in 0..d.nx {
            values.push(f.get(i, j, k));
        }
    }
    Slice2 { nx: d.nx, nz: d.nz, values }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSlice {
    pub nx: usize,
    pub nz: usize,
    pub bits: Vec<bool>,
}

impl BitSlice {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Threshold a slice: a bit is set iff the value is at least `threshold`.
pub fn binarize(slice: &Slice2, threshold: f64) -> BitSlice {
    BitSlice { nx: slice.nx, nz: slice.nz, bits: slice.values.iter().map(|v| *v >= threshold).collect() }
}
