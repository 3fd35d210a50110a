//! Trilinear 8-node hexahedron on a cube of edge `h`.

/// Reference coordinates of the local nodes, matching `GridDims::element_nodes`.
pub const NODE_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

const GAUSS: f64 = 0.577_350_269_189_625_8;

fn gauss_points() -> impl Iterator<Item = [f64; 3]> {
    let g = [-GAUSS, GAUSS];
    g.into_iter().flat_map(move |z| g.into_iter().flat_map(move |y| g.into_iter().map(move |x| [x, y, z])))
}

/// Physical shape-function gradients at a reference point.
pub fn shape_gradients(xi: [f64; 3], h: f64) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (a, s) in NODE_SIGNS.iter().enumerate() {
        let f = [1.0 + s[0] * xi[0], 1.0 + s[1] * xi[1], 1.0 + s[2] * xi[2]];
        // dN/dxi * dxi/dx with dxi/dx = 2/h.
        let c = 0.125 * 2.0 / h;
        out[a] = [c * s[0] * f[1] * f[2], c * s[1] * f[0] * f[2], c * s[2] * f[0] * f[1]];
    }
    out
}

/// Strain-displacement matrix (6x24, Voigt rows xx, yy, zz, 2xy, 2yz, 2xz).
pub fn strain_displacement(xi: [f64; 3], h: f64) -> [[f64; 24]; 6] {
    let g = shape_gradients(xi, h);
    let mut b = [[0.0; 24]; 6];
    for (a, d) in g.iter().enumerate() {
        let c = 3 * a;
        b[0][c] = d[0];
        b[1][c + 1] = d[1];
        b[2][c + 2] = d[2];
        b[3][c] = d[1];
        b[3][c + 1] = d[0];
        b[4][c + 1] = d[2];
        b[4][c + 2] = d[1];
        b[5][c] = d[2];
        b[5][c + 2] = d[0];
    }
    b
}

/// Isotropic elasticity matrix in Voigt form for modulus `e`.
pub fn elasticity_matrix(e: f64, nu: f64) -> [[f64; 6]; 6] {
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let mut c = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = lambda;
        }
        c[i][i] = lambda + 2.0 * mu;
        c[i + 3][i + 3] = mu;
    }
    c
}

/// Conductivity matrix (8x8, row-major) for unit conductivity.
pub fn thermal_stiffness(h: f64) -> Vec<f64> {
    let det_j = (0.5 * h).powi(3);
    let mut k = vec![0.0; 64];
    for xi in gauss_points() {
        let g = shape_gradients(xi, h);
        for a in 0..8 {
            for b in 0..8 {
                k[8 * a + b] += det_j * (g[a][0] * g[b][0] + g[a][1] * g[b][1] + g[a][2] * g[b][2]);
            }
        }
    }
    k
}

/// Stiffness matrix (24x24, row-major) for unit Young's modulus.
pub fn elastic_stiffness(h: f64, nu: f64) -> Vec<f64> {
    let det_j = (0.5 * h).powi(3);
    let c = elasticity_matrix(1.0, nu);
    let mut k = vec![0.0; 576];
    for xi in gauss_points() {
        let b = strain_displacement(xi, h);
        let mut cb = [[0.0; 24]; 6];
        for i in 0..6 {
            for j in 0..24 {
                cb[i][j] = (0..6).map(|m| c[i][m] * b[m][j]).sum();
            }
        }
        for p in 0..24 {
            for q in 0..24 {
                k[24 * p + q] += det_j * (0..6).map(|m| b[m][p] * cb[m][q]).sum::<f64>();
            }
        }
    }
    k
}

/// Integrated `B^T C` (24x6) for unit modulus; multiplying by a Voigt
/// eigenstrain gives the equivalent nodal force.
pub fn eigenstrain_load(h: f64, nu: f64) -> Vec<[f64; 6]> {
    let det_j = (0.5 * h).powi(3);
    let c = elasticity_matrix(1.0, nu);
    let mut f = vec![[0.0; 6]; 24];
    for xi in gauss_points() {
        let b = strain_displacement(xi, h);
        for (p, row) in f.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += det_j * (0..6).map(|m| b[m][p] * c[m][j]).sum::<f64>();
            }
        }
    }
    f
}

/// Tensor components (xx, yy, zz, xy, yz, xz) to Voigt with engineering shear.
#[inline]
pub fn tensor_to_voigt(t: &[f64; 6]) -> [f64; 6] {
    [t[0], t[1], t[2], 2.0 * t[3], 2.0 * t[4], 2.0 * t[5]]
}

#[inline]
pub fn voigt_to_tensor(v: &[f64; 6]) -> [f64; 6] {
    [v[0], v[1], v[2], 0.5 * v[3], 0.5 * v[4], 0.5 * v[5]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thermal_rows_sum_to_zero() {
        let k = thermal_stiffness(0.7);
        for a in 0..8 {
            let s: f64 = (0..8).map(|b| k[8 * a + b]).sum();
            assert!(s.abs() < 1e-14);
        }
        // Known diagonal of the unit-cube Laplacian: h/3.
        assert!((k[0] - 0.7 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn elastic_matrix_symmetric_with_rigid_modes() {
        let k = elastic_stiffness(1.3, 0.3);
        for p in 0..24 {
            for q in 0..24 {
                assert!((k[24 * p + q] - k[24 * q + p]).abs() < 1e-12);
            }
        }
        // Translations and an infinitesimal rotation produce no forces.
        let rotation: Vec<f64> = NODE_SIGNS.iter().flat_map(|s| [-s[1], s[0], 0.0]).collect();
        for mode in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let u: Vec<f64> = (0..24).map(|d| mode[d % 3]).collect();
            for p in 0..24 {
                let f: f64 = (0..24).map(|q| k[24 * p + q] * u[q]).sum();
                assert!(f.abs() < 1e-12);
            }
        }
        for p in 0..24 {
            let f: f64 = (0..24).map(|q| k[24 * p + q] * rotation[q]).sum();
            assert!(f.abs() < 1e-12);
        }
    }
}
