//! Test-coupon geometry: a block with a triangular notch at the base, a
//! design region above it where the channel lives, and the baseline
//! diamond-shaped channel of the crack-prone ("no-go") coupon.
//!
//! Proportions are given as fractions of the block so the same coupon can be
//! voxelized at any resolution. x is the symmetry axis, y the extrusion axis
//! and z the build direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDims, Region, RegionMask, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouponSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Voxel edge (mm).
    pub h: f64,
    /// Notch depth as a fraction of the block height; the walls run at 45 degrees.
    pub notch_depth: f64,
    /// Half width of the design region as a fraction of the block width.
    pub design_half_width: f64,
    /// Bottom and top of the design region as fractions of the block height.
    pub design_z: [f64; 2],
    /// Channel center height as a fraction of the block height.
    pub channel_center: f64,
    /// Half diagonal of the diamond channel as a fraction of the block width.
    pub channel_half_diag: f64,
}

impl Default for CouponSpec {
    fn default() -> Self {
        Self {
            nx: 24,
            ny: 12,
            nz: 32,
            h: 0.5,
            notch_depth: 0.2,
            design_half_width: 0.3,
            design_z: [0.2, 0.85],
            channel_center: 0.45,
            channel_half_diag: 0.25,
        }
    }
}

impl CouponSpec {
    pub fn with_dims(self, nx: usize, ny: usize, nz: usize, h: f64) -> Self {
        Self { nx, ny, nz, h, ..self }
    }

    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.nx, self.ny, self.nz, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !(frac(self.notch_depth)
            && frac(self.design_half_width)
            && frac(self.design_z[0])
            && frac(self.design_z[1])
            && self.design_z[0] < self.design_z[1]
            && frac(self.channel_center)
            && self.channel_half_diag >= 0.0)
        {
            return Err(Error::InvalidParameter("coupon proportions must be fractions in [0, 1]".into()));
        }
        Ok(())
    }

    fn extents(&self) -> (f64, f64) {
        (self.nx as f64 * self.h, self.nz as f64 * self.h)
    }

    fn center(&self, i: usize, k: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.h, (k as f64 + 0.5) * self.h)
    }

    pub fn in_notch(&self, i: usize, k: usize) -> bool {
        let (w, hgt) = self.extents();
        let (x, z) = self.center(i, k);
        z < self.notch_depth * hgt - (x - 0.5 * w).abs()
    }

    pub fn in_design_region(&self, i: usize, k: usize) -> bool {
        let (w, hgt) = self.extents();
        let (x, z) = self.center(i, k);
        (x - 0.5 * w).abs() < self.design_half_width * w && z > self.design_z[0] * hgt && z < self.design_z[1] * hgt
    }

    /// Diamond of half diagonal `half_diag` (fraction of width) centered on the channel axis.
    pub fn in_diamond(&self, i: usize, k: usize, half_diag: f64) -> bool {
        let (w, hgt) = self.extents();
        let (x, z) = self.center(i, k);
        (x - 0.5 * w).abs() + (z - self.channel_center * hgt).abs() < half_diag * w
    }

    /// Design region over the passive block; the notch is passive void. An
    /// optional pre-cut diamond (half diagonal as a fraction of width) is
    /// passive void too.
    pub fn region_mask(&self, precut: Option<f64>) -> Result<RegionMask> {
        let dims = self.dims()?;
        let mut tags = Vec::with_capacity(dims.len());
        for k in 0..self.nz {
            for _j in 0..self.ny {
                for i in 0..self.nx {
                    let tag = if self.in_notch(i, k) || precut.is_some_and(|r| self.in_diamond(i, k, r)) {
                        Region::PassiveVoid
                    } else if self.in_design_region(i, k) {
                        Region::Design
                    } else {
                        Region::PassiveSolid
                    };
                    tags.push(tag);
                }
            }
        }
        RegionMask::new(dims, tags)
    }

    /// The crack-prone baseline: solid block, notch, diamond channel.
    pub fn no_go_density(&self) -> Result<ScalarField> {
        let dims = self.dims()?;
        let mut values = Vec::with_capacity(dims.len());
        for k in 0..self.nz {
            for _j in 0..self.ny {
                for i in 0..self.nx {
                    let void = self.in_notch(i, k) || self.in_diamond(i, k, self.channel_half_diag);
                    values.push(if void { 0.0 } else { 1.0 });
                }
            }
        }
        ScalarField::new(dims, values)
    }

    /// Heights (mm) of the notch apex and of the baseline channel's lowest point.
    pub fn ligament_bounds(&self) -> (f64, f64) {
        let (w, hgt) = self.extents();
        (self.notch_depth * hgt, self.channel_center * hgt - self.channel_half_diag * w)
    }

    /// Where the baseline coupon is known to crack: material within `margin`
    /// voxels (in the xz plane) of the notch or of the lower half of the
    /// baseline channel, plus the ligament between them.
    pub fn crack_site_mask(&self, margin: usize) -> Result<Vec<bool>> {
        let dims = self.dims()?;
        let (w, hgt) = self.extents();
        let (lo, hi) = self.ligament_bounds();
        let zc = self.channel_center * hgt;
        let seed = |i: usize, k: usize| {
            let (_, z) = self.center(i, k);
            self.in_notch(i, k) || (self.in_diamond(i, k, self.channel_half_diag) && z <= zc)
        };
        let m = margin as isize;
        let mut out = Vec::with_capacity(dims.len());
        for k in 0..self.nz {
            for _j in 0..self.ny {
                for i in 0..self.nx {
                    let (x, z) = self.center(i, k);
                    let void = self.in_notch(i, k) || self.in_diamond(i, k, self.channel_half_diag);
                    let in_ligament = (x - 0.5 * w).abs() <= 0.5 * (hi - lo).max(self.h) && z >= lo && z <= hi;
                    let near = (-m..=m).any(|dk| {
                        (-m..=m).any(|di| {
                            let (ii, kk) = (i as isize + di, k as isize + dk);
                            ii >= 0
                                && kk >= 0
                                && (ii as usize) < self.nx
                                && (kk as usize) < self.nz
                                && seed(ii as usize, kk as usize)
                        })
                    });
                    out.push(!void && (in_ligament || near));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_coupon_layout() {
        let c = CouponSpec::default();
        c.validate().unwrap();
        let mask = c.region_mask(None).unwrap();
        assert!(mask.design_count() > 0);
        // Notch apex at the bottom center; corners of the base are solid.
        assert_eq!(mask.tag(c.dims().unwrap().index(12, 0, 0)), Region::PassiveVoid);
        assert_eq!(mask.tag(c.dims().unwrap().index(0, 0, 0)), Region::PassiveSolid);
        let (lo, hi) = c.ligament_bounds();
        assert!(hi > lo);
    }

    #[test]
    fn crack_site_surrounds_notch_and_channel_bottom() {
        let c = CouponSpec::default();
        let d = c.dims().unwrap();
        let mask = c.crack_site_mask(1).unwrap();
        let rho = c.no_go_density().unwrap();
        let (lo, hi) = c.ligament_bounds();
        let kmid = ((0.5 * (lo + hi)) / c.h) as usize;
        assert!(mask[d.index(c.nx / 2, 0, kmid)]);
        // Flank of the notch at the base, and never the outer corners or voids.
        let flank = (0..c.nx).find(|&i| rho.get(i, 0, 0) == 0.0).unwrap() - 1;
        assert!(mask[d.index(flank, 0, 0)]);
        assert!(!mask[d.index(0, 0, 0)]);
        assert!(!mask[d.index(0, 0, c.nz - 1)]);
        assert!(mask.iter().zip(&rho.values).all(|(m, r)| !*m || *r == 1.0));
    }

    #[test]
    fn no_go_is_mirror_symmetric_and_extruded() {
        let c = CouponSpec::default();
        let f = c.no_go_density().unwrap();
        for k in 0..c.nz {
            for j in 0..c.ny {
                for i in 0..c.nx {
                    assert_eq!(f.get(i, j, k), f.get(c.nx - 1 - i, j, k));
                    assert_eq!(f.get(i, j, k), f.get(i, 0, k));
                }
            }
        }
        let void = f.values.iter().filter(|v| **v == 0.0).count();
        assert!(void > 0 && void < f.values.len() / 3);
    }

    #[test]
    fn precut_channel_is_passive_void() {
        let c = CouponSpec::default();
        let m = c.region_mask(Some(0.1)).unwrap();
        let d = c.dims().unwrap();
        let zc = (c.channel_center * c.nz as f64) as usize;
        assert_eq!(m.tag(d.index(c.nx / 2, 0, zc)), Region::PassiveVoid);
    }
}
