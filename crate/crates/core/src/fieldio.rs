//! Field serialization: VTK legacy ASCII and a raw little-endian binary.
//!
//! Raw layout: `nx, ny, nz` as `u32`, `h` as `f64`, then every value as
//! `f64` in storage order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridDims, ScalarField};

/// Write named scalar arrays sharing one grid as a STRUCTURED_POINTS dataset.
/// Values sit on the VTK points (one point per voxel center).
pub fn write_vtk<W: Write>(out: &mut W, title: &str, arrays: &[(&str, &ScalarField)]) -> Result<()> {
    let Some((_, first)) = arrays.first() else {
        return Err(Error::Format("no arrays to write".into()));
    };
    let d = first.dims;
    for (name, f) in arrays {
        if !f.dims.same_shape(&d) {
            return Err(Error::Format(format!("array {name} has a different grid")));
        }
        f.check_finite()?;
    }
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{title}")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {} {} {}", d.nx, d.ny, d.nz)?;
    writeln!(out, "ORIGIN {:.16e} {:.16e} {:.16e}", 0.5 * d.h, 0.5 * d.h, 0.5 * d.h)?;
    writeln!(out, "SPACING {:.16e} {:.16e} {:.16e}", d.h, d.h, d.h)?;
    writeln!(out, "POINT_DATA {}", d.len())?;
    for (name, f) in arrays {
        let name: String = name.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in &f.values {
            writeln!(out, "{v:.16e}")?;
        }
    }
    Ok(())
}

pub fn export_vtk(path: &Path, title: &str, arrays: &[(&str, &ScalarField)]) -> Result<()> {
    // Validate before touching the file system so a refused field leaves nothing behind.
    let mut buf = Vec::new();
    write_vtk(&mut buf, title, arrays)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_raw<W: Write>(out: &mut W, f: &ScalarField) -> Result<()> {
    let d = f.dims;
    for n in [d.nx, d.ny, d.nz] {
        let n = u32::try_from(n).map_err(|_| Error::Format("grid too large for raw format".into()))?;
        out.write_all(&n.to_le_bytes())?;
    }
    out.write_all(&d.h.to_le_bytes())?;
    for v in &f.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw<R: Read>(input: &mut R) -> Result<ScalarField> {
    let mut u = [0u8; 4];
    let mut n = [0usize; 3];
    for slot in &mut n {
        input.read_exact(&mut u)?;
        *slot = u32::from_le_bytes(u) as usize;
    }
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    let h = f64::from_le_bytes(b);
    let dims = GridDims::new(n[0], n[1], n[2], h).map_err(|e| Error::Format(e.to_string()))?;
    let mut values = Vec::with_capacity(dims.len());
    for _ in 0..dims.len() {
        input.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after field data", rest.len())));
    }
    ScalarField::new(dims, values)
}

pub fn save_raw(path: &Path, f: &ScalarField) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 8 * f.values.len());
    write_raw(&mut buf, f)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<ScalarField> {
    let bytes = std::fs::read(path)?;
    read_raw(&mut bytes.as_slice())
}
