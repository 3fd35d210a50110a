//! Matrix-free element-by-element operator and preconditioned conjugate gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    Jacobi,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOpts {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self { cg_tol: 1e-8, cg_max_iter: 20_000, preconditioner: Preconditioner::Jacobi }
    }
}

impl SolverOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::InvalidParameter(format!("cg_tol must lie in (0, 1), got {}", self.cg_tol)));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::InvalidParameter("cg_max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// `K = sum_e scale_e * K_ref` over a structured hex grid, with constrained
/// degrees of freedom eliminated. Degrees of freedom touched by no active
/// element are eliminated as well.
pub struct ElementOperator<'a> {
    dims: GridDims,
    dpn: usize,
    ke: &'a [f64],
    scale: &'a [f64],
    fixed: Vec<bool>,
    diag: Vec<f64>,
}

impl<'a> ElementOperator<'a> {
    pub fn new(dims: GridDims, dofs_per_node: usize, ke: &'a [f64], scale: &'a [f64], fixed: &[bool]) -> Self {
        let nd = 8 * dofs_per_node;
        assert_eq!(ke.len(), nd * nd);
        assert_eq!(scale.len(), dims.len());
        let ndof = dims.n_nodes() * dofs_per_node;
        assert_eq!(fixed.len(), ndof);
        let mut op = Self { dims, dpn: dofs_per_node, ke, scale, fixed: fixed.to_vec(), diag: vec![0.0; ndof] };
        let mut diag = vec![0.0; ndof];
        let mut dofs = [0usize; 24];
        op.for_each_element(|e, dofs_e| {
            let s = op.scale[e];
            for (p, &d) in dofs_e.iter().enumerate() {
                diag[d] += s * ke[nd * p + p];
            }
        }, &mut dofs);
        for (d, f) in diag.iter().zip(op.fixed.iter_mut()) {
            if *d <= 0.0 {
                *f = true;
            }
        }
        op.diag = diag;
        op
    }

    pub fn ndof(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.fixed[dof]
    }

    fn for_each_element(&self, mut f: impl FnMut(usize, &[usize]), buf: &mut [usize; 24]) {
        let d = self.dims;
        let nd = 8 * self.dpn;
        for k in 0..d.nz {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let e = d.index(i, j, k);
                    if self.scale[e] == 0.0 {
                        continue;
                    }
                    let nodes = d.element_nodes(i, j, k);
                    for (a, n) in nodes.iter().enumerate() {
                        for c in 0..self.dpn {
                            buf[self.dpn * a + c] = self.dpn * n + c;
                        }
                    }
                    f(e, &buf[..nd]);
                }
            }
        }
    }

    /// `y = K u` restricted to free degrees of freedom (`u` must vanish on fixed ones).
    pub fn apply(&self, u: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let nd = 8 * self.dpn;
        let ke = self.ke;
        let mut ue = [0.0f64; 24];
        let mut buf = [0usize; 24];
        self.for_each_element(
            |e, dofs| {
                let s = self.scale[e];
                for (q, &dq) in dofs.iter().enumerate() {
                    ue[q] = u[dq];
                }
                for (p, &dp) in dofs.iter().enumerate() {
                    let row = &ke[nd * p..nd * (p + 1)];
                    let acc: f64 = row.iter().zip(&ue[..nd]).map(|(a, b)| a * b).sum();
                    y[dp] += s * acc;
                }
            },
            &mut buf,
        );
        for (v, f) in y.iter_mut().zip(&self.fixed) {
            if *f {
                *v = 0.0;
            }
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned CG on the free degrees of freedom. `observer` sees every iterate.
pub fn pcg(
    op: &ElementOperator<'_>,
    rhs: &[f64],
    initial: Option<&[f64]>,
    opts: &SolverOpts,
    mut observer: impl FnMut(&[f64]),
) -> Result<(Vec<f64>, CgStats)> {
    let n = op.ndof();
    assert_eq!(rhs.len(), n);
    let mut b = rhs.to_vec();
    for (v, f) in b.iter_mut().zip(&op.fixed) {
        if *f {
            *v = 0.0;
        }
    }
    let b_norm = dot(&b, &b).sqrt();
    let mut x = match initial {
        Some(x0) => x0.iter().zip(&op.fixed).map(|(v, f)| if *f { 0.0 } else { *v }).collect(),
        None => vec![0.0; n],
    };
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], CgStats { iterations: 0, relative_residual: 0.0 }));
    }
    let inv_diag: Vec<f64> = match opts.preconditioner {
        Preconditioner::Jacobi => {
            op.diagonal().iter().zip(&op.fixed).map(|(d, f)| if *f { 0.0 } else { 1.0 / d }).collect()
        }
        Preconditioner::None => op.fixed.iter().map(|f| if *f { 0.0 } else { 1.0 }).collect(),
    };
    let mut r = vec![0.0; n];
    op.apply(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(&b) {
        *ri = bi - *ri;
    }
    let mut res = dot(&r, &r).sqrt() / b_norm;
    if res <= opts.cg_tol {
        return Ok((x, CgStats { iterations: 0, relative_residual: res }));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=opts.cg_max_iter {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        observer(&x);
        res = dot(&r, &r).sqrt() / b_norm;
        if res <= opts.cg_tol {
            return Ok((x, CgStats { iterations: it, relative_residual: res }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence { iterations: opts.cg_max_iter, residual: res })
}
