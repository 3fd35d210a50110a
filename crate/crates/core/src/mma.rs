//! Method of Moving Asymptotes for `min f0(x)` subject to `f_i(x) <= 0` and
//! box bounds, with the convex separable subproblem solved by a primal-dual
//! interior-point method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmaParams {
    /// Initial asymptote distance as a fraction of the variable range.
    pub asy_init: f64,
    pub asy_incr: f64,
    pub asy_decr: f64,
    /// Largest change of any variable per update, as a fraction of its range.
    pub move_limit: f64,
    /// Interior-point termination threshold.
    pub kkt_tol: f64,
}

impl Default for MmaParams {
    fn default() -> Self {
        Self { asy_init: 0.5, asy_incr: 1.2, asy_decr: 0.7, move_limit: 0.2, kkt_tol: 1e-9 }
    }
}

impl MmaParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.asy_init > 0.0
            && self.asy_incr >= 1.0
            && self.asy_decr > 0.0
            && self.asy_decr <= 1.0
            && self.move_limit > 0.0
            && self.move_limit <= 1.0
            && self.kkt_tol > 0.0;
        if !ok {
            return Err(Error::InvalidParameter("MMA parameters out of range".into()));
        }
        Ok(())
    }
}

const ALBEFA: f64 = 0.1;
const RAA0: f64 = 1e-5;
const C_ARTIFICIAL: f64 = 1000.0;

/// Asymptotes and iterate history carried between updates.
#[derive(Debug, Clone)]
pub struct MmaState {
    params: MmaParams,
    xmin: Vec<f64>,
    xmax: Vec<f64>,
    low: Vec<f64>,
    upp: Vec<f64>,
    xold1: Vec<f64>,
    xold2: Vec<f64>,
    iter: usize,
}

impl MmaState {
    pub fn new(xmin: Vec<f64>, xmax: Vec<f64>, params: MmaParams) -> Result<Self> {
        params.validate()?;
        if xmin.len() != xmax.len() {
            return Err(Error::SizeMismatch { expected: xmin.len(), actual: xmax.len() });
        }
        if xmin.iter().zip(&xmax).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter("MMA needs xmin < xmax for every variable".into()));
        }
        let n = xmin.len();
        Ok(Self {
            params,
            xmin,
            xmax,
            low: vec![0.0; n],
            upp: vec![0.0; n],
            xold1: Vec::new(),
            xold2: Vec::new(),
            iter: 0,
        })
    }

    /// Unit box `[0, 1]^n`.
    pub fn unit(n: usize, params: MmaParams) -> Result<Self> {
        Self::new(vec![0.0; n], vec![1.0; n], params)
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn lower_asymptotes(&self) -> &[f64] {
        &self.low
    }

    pub fn upper_asymptotes(&self) -> &[f64] {
        &self.upp
    }

    /// One MMA step from `x` given the objective gradient, constraint values
    /// `g` and constraint gradients `dg` (one row per constraint).
    pub fn update(&mut self, x: &[f64], df0: &[f64], g: &[f64], dg: &[Vec<f64>]) -> Result<Vec<f64>> {
        let sub = self.subproblem(x, df0, g, dg)?;
        Ok(sub.solve(self.params.kkt_tol))
    }

    /// Moves the asymptotes and returns the convex approximation at `x`
    /// without solving it.
    pub fn subproblem(&mut self, x: &[f64], df0: &[f64], g: &[f64], dg: &[Vec<f64>]) -> Result<Subproblem> {
        let n = self.xmin.len();
        let m = g.len();
        for len in [x.len(), df0.len()].into_iter().chain(dg.iter().map(Vec::len)) {
            if len != n {
                return Err(Error::SizeMismatch { expected: n, actual: len });
            }
        }
        if dg.len() != m {
            return Err(Error::SizeMismatch { expected: m, actual: dg.len() });
        }
        if let Some(i) = x.iter().chain(df0).chain(g).chain(dg.iter().flatten()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if x.iter().zip(self.xmin.iter().zip(&self.xmax)).any(|(v, (lo, hi))| v < lo || v > hi) {
            return Err(Error::InvalidParameter("MMA iterate outside its bounds".into()));
        }
        self.iter += 1;
        let p = self.params;
        let range: Vec<f64> = self.xmin.iter().zip(&self.xmax).map(|(a, b)| b - a).collect();

        if self.iter <= 2 {
            for j in 0..n {
                self.low[j] = x[j] - p.asy_init * range[j];
                self.upp[j] = x[j] + p.asy_init * range[j];
            }
        } else {
            for j in 0..n {
                let trend = (x[j] - self.xold1[j]) * (self.xold1[j] - self.xold2[j]);
                let factor = if trend > 0.0 {
                    p.asy_incr
                } else if trend < 0.0 {
                    p.asy_decr
                } else {
                    1.0
                };
                let low = x[j] - factor * (self.xold1[j] - self.low[j]);
                let upp = x[j] + factor * (self.upp[j] - self.xold1[j]);
                self.low[j] = low.max(x[j] - 10.0 * range[j]).min(x[j] - 0.01 * range[j]);
                self.upp[j] = upp.min(x[j] + 10.0 * range[j]).max(x[j] + 0.01 * range[j]);
            }
        }

        let mut alfa = vec![0.0; n];
        let mut beta = vec![0.0; n];
        for j in 0..n {
            alfa[j] = (self.low[j] + ALBEFA * (x[j] - self.low[j])).max(x[j] - p.move_limit * range[j]).max(self.xmin[j]);
            beta[j] = (self.upp[j] - ALBEFA * (self.upp[j] - x[j])).min(x[j] + p.move_limit * range[j]).min(self.xmax[j]);
        }

        let sub = Subproblem::approximate(x, &self.low, &self.upp, &range, df0, g, dg, alfa, beta);
        self.xold2 = std::mem::take(&mut self.xold1);
        self.xold1 = x.to_vec();
        if self.xold2.is_empty() {
            self.xold2 = x.to_vec();
        }
        if let Some(worst) = sub.unreachable_constraint() {
            return Err(Error::Infeasible { min_value: worst });
        }
        Ok(sub)
    }
}

/// Convex separable approximation
/// `min sum_j p0_j/(U_j-x_j) + q0_j/(x_j-L_j) + z + sum_i c y_i`
/// `s.t. sum_j P_ij/(U_j-x_j) + Q_ij/(x_j-L_j) - y_i <= b_i`, `alfa <= x <= beta`.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub alfa: Vec<f64>,
    pub beta: Vec<f64>,
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// Row-major `m x n`.
    pub pm: Vec<Vec<f64>>,
    pub qm: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Subproblem {
    #[allow(clippy::too_many_arguments)]
    fn approximate(
        x: &[f64],
        low: &[f64],
        upp: &[f64],
        range: &[f64],
        df0: &[f64],
        g: &[f64],
        dg: &[Vec<f64>],
        alfa: Vec<f64>,
        beta: Vec<f64>,
    ) -> Self {
        let n = x.len();
        let ux2: Vec<f64> = (0..n).map(|j| (upp[j] - x[j]).powi(2)).collect();
        let xl2: Vec<f64> = (0..n).map(|j| (x[j] - low[j]).powi(2)).collect();
        let inv_range: Vec<f64> = range.iter().map(|r| 1.0 / r.max(1e-5)).collect();
        let split = |d: &[f64]| {
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            for j in 0..n {
                let (pp, qq) = (d[j].max(0.0), (-d[j]).max(0.0));
                let reg = 0.001 * (pp + qq) + RAA0 * inv_range[j];
                p[j] = (pp + reg) * ux2[j];
                q[j] = (qq + reg) * xl2[j];
            }
            (p, q)
        };
        let (p0, q0) = split(df0);
        let mut pm = Vec::with_capacity(g.len());
        let mut qm = Vec::with_capacity(g.len());
        let mut b = Vec::with_capacity(g.len());
        for (gi, row) in g.iter().zip(dg) {
            let (p, q) = split(row);
            let at_x: f64 = (0..n).map(|j| p[j] / (upp[j] - x[j]) + q[j] / (x[j] - low[j])).sum();
            b.push(at_x - gi);
            pm.push(p);
            qm.push(q);
        }
        Self { low: low.to_vec(), upp: upp.to_vec(), alfa, beta, p0, q0, pm, qm, b }
    }

    /// Smallest value of each constraint approximation over the box; returns the
    /// worst one if any is positive.
    fn unreachable_constraint(&self) -> Option<f64> {
        let mut worst = None;
        for i in 0..self.b.len() {
            let mut total = -self.b[i];
            for j in 0..self.alfa.len() {
                let (p, q) = (self.pm[i][j], self.qm[i][j]);
                let (sp, sq) = (p.sqrt(), q.sqrt());
                let xs = ((self.low[j] * sp + self.upp[j] * sq) / (sp + sq)).clamp(self.alfa[j], self.beta[j]);
                total += p / (self.upp[j] - xs) + q / (xs - self.low[j]);
            }
            let tol = 1e-9 * self.b[i].abs().max(1.0);
            if total > tol && worst.is_none_or(|w| total > w) {
                worst = Some(total);
            }
        }
        worst
    }

    /// Primal-dual Newton iterations on the relaxed KKT system, shrinking the
    /// relaxation by 10 until it drops below `tol`.
    pub fn solve(&self, tol: f64) -> Vec<f64> {
        let n = self.alfa.len();
        let m = self.b.len();
        let (a0, c, d) = (1.0, C_ARTIFICIAL, 0.0);

        let mut v = IpState {
            x: (0..n).map(|j| 0.5 * (self.alfa[j] + self.beta[j])).collect(),
            y: vec![1.0; m],
            z: 1.0,
            lam: vec![1.0; m],
            xsi: (0..n).map(|j| (1.0 / (0.5 * (self.beta[j] - self.alfa[j]))).max(1.0)).collect(),
            eta: (0..n).map(|j| (1.0 / (0.5 * (self.beta[j] - self.alfa[j]))).max(1.0)).collect(),
            mu: vec![(0.5 * c).max(1.0); m],
            zet: 1.0,
            s: vec![1.0; m],
        };

        let mut epsi = 1.0;
        while epsi > tol {
            let mut res = self.residual(&v, epsi, a0, c, d);
            let mut resnorm = norm2(&res);
            let mut resmax = norm_inf(&res);
            let mut inner = 0;
            while resmax > 0.9 * epsi && inner < 200 {
                inner += 1;
                let dir = self.newton_direction(&v, epsi, a0, c, d);
                let mut step = 1.0 / v.max_step_ratio(&dir, &self.alfa, &self.beta).max(1.0);
                let old = v.clone();
                let mut tries = 0;
                loop {
                    tries += 1;
                    v = old.advanced(&dir, step);
                    res = self.residual(&v, epsi, a0, c, d);
                    let newnorm = norm2(&res);
                    step *= 0.5;
                    if newnorm <= resnorm || tries >= 50 {
                        resnorm = newnorm;
                        break;
                    }
                }
                resmax = norm_inf(&res);
            }
            epsi *= 0.1;
        }
        v.x
    }

    fn residual(&self, v: &IpState, epsi: f64, a0: f64, c: f64, d: f64) -> Vec<f64> {
        let n = v.x.len();
        let m = v.lam.len();
        let mut r = Vec::with_capacity(3 * n + 4 * m + 2);
        for j in 0..n {
            let (ux, xl) = (self.upp[j] - v.x[j], v.x[j] - self.low[j]);
            let (plam, qlam) = self.lam_terms(j, &v.lam);
            r.push(plam / (ux * ux) - qlam / (xl * xl) - v.xsi[j] + v.eta[j]);
        }
        for i in 0..m {
            r.push(c + d * v.y[i] - v.mu[i] - v.lam[i]);
        }
        r.push(a0 - v.zet);
        for i in 0..m {
            let gi: f64 = (0..n).map(|j| self.pm[i][j] / (self.upp[j] - v.x[j]) + self.qm[i][j] / (v.x[j] - self.low[j])).sum();
            r.push(gi - v.y[i] + v.s[i] - self.b[i]);
        }
        for j in 0..n {
            r.push(v.xsi[j] * (v.x[j] - self.alfa[j]) - epsi);
        }
        for j in 0..n {
            r.push(v.eta[j] * (self.beta[j] - v.x[j]) - epsi);
        }
        for i in 0..m {
            r.push(v.mu[i] * v.y[i] - epsi);
        }
        r.push(v.zet * v.z - epsi);
        for i in 0..m {
            r.push(v.lam[i] * v.s[i] - epsi);
        }
        r
    }

    fn lam_terms(&self, j: usize, lam: &[f64]) -> (f64, f64) {
        let mut plam = self.p0[j];
        let mut qlam = self.q0[j];
        for (i, l) in lam.iter().enumerate() {
            plam += self.pm[i][j] * l;
            qlam += self.qm[i][j] * l;
        }
        (plam, qlam)
    }

    fn newton_direction(&self, v: &IpState, epsi: f64, a0: f64, c: f64, d: f64) -> IpState {
        let n = v.x.len();
        let m = v.lam.len();
        let mut delx = vec![0.0; n];
        let mut diagx = vec![0.0; n];
        let mut gg = vec![vec![0.0; n]; m];
        let mut gvec = vec![0.0; m];
        for j in 0..n {
            let (ux, xl) = (self.upp[j] - v.x[j], v.x[j] - self.low[j]);
            let (ux2, xl2) = (ux * ux, xl * xl);
            let (plam, qlam) = self.lam_terms(j, &v.lam);
            let (xa, bx) = (v.x[j] - self.alfa[j], self.beta[j] - v.x[j]);
            delx[j] = plam / ux2 - qlam / xl2 - epsi / xa + epsi / bx;
            diagx[j] = 2.0 * (plam / (ux2 * ux) + qlam / (xl2 * xl)) + v.xsi[j] / xa + v.eta[j] / bx;
            for i in 0..m {
                gg[i][j] = self.pm[i][j] / ux2 - self.qm[i][j] / xl2;
                gvec[i] += self.pm[i][j] / ux + self.qm[i][j] / xl;
            }
        }
        let dely: Vec<f64> = (0..m).map(|i| c + d * v.y[i] - v.lam[i] - epsi / v.y[i]).collect();
        let delz = a0 - epsi / v.z;
        let dellam: Vec<f64> = (0..m).map(|i| gvec[i] - v.y[i] - self.b[i] + epsi / v.lam[i]).collect();
        let diagy: Vec<f64> = (0..m).map(|i| d + v.mu[i] / v.y[i]).collect();
        let diaglamyi: Vec<f64> = (0..m).map(|i| v.s[i] / v.lam[i] + 1.0 / diagy[i]).collect();

        // Reduced (m+1)x(m+1) system in (dlam, dz); a_i = 0.
        let mut aa = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut bb = DVector::<f64>::zeros(m + 1);
        for i in 0..m {
            aa[(i, i)] = diaglamyi[i];
            for k in 0..m {
                aa[(i, k)] += (0..n).map(|j| gg[i][j] * gg[k][j] / diagx[j]).sum::<f64>();
            }
            bb[i] = dellam[i] + dely[i] / diagy[i] - (0..n).map(|j| gg[i][j] * delx[j] / diagx[j]).sum::<f64>();
        }
        aa[(m, m)] = -v.zet / v.z;
        bb[m] = delz;
        let sol = aa.lu().solve(&bb).unwrap_or_else(|| DVector::zeros(m + 1));
        let dlam: Vec<f64> = sol.iter().take(m).copied().collect();
        let dz = sol[m];

        let dx: Vec<f64> = (0..n)
            .map(|j| -delx[j] / diagx[j] - (0..m).map(|i| gg[i][j] * dlam[i]).sum::<f64>() / diagx[j])
            .collect();
        let dy: Vec<f64> = (0..m).map(|i| -dely[i] / diagy[i] + dlam[i] / diagy[i]).collect();
        let dxsi: Vec<f64> = (0..n)
            .map(|j| {
                let xa = v.x[j] - self.alfa[j];
                -v.xsi[j] + epsi / xa - v.xsi[j] * dx[j] / xa
            })
            .collect();
        let deta: Vec<f64> = (0..n)
            .map(|j| {
                let bx = self.beta[j] - v.x[j];
                -v.eta[j] + epsi / bx + v.eta[j] * dx[j] / bx
            })
            .collect();
        let dmu: Vec<f64> = (0..m).map(|i| -v.mu[i] + epsi / v.y[i] - v.mu[i] * dy[i] / v.y[i]).collect();
        let dzet = -v.zet + epsi / v.z - v.zet * dz / v.z;
        let ds: Vec<f64> = (0..m).map(|i| -v.s[i] + epsi / v.lam[i] - v.s[i] * dlam[i] / v.lam[i]).collect();
        IpState { x: dx, y: dy, z: dz, lam: dlam, xsi: dxsi, eta: deta, mu: dmu, zet: dzet, s: ds }
    }
}

#[derive(Debug, Clone)]
struct IpState {
    x: Vec<f64>,
    y: Vec<f64>,
    z: f64,
    lam: Vec<f64>,
    xsi: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    zet: f64,
    s: Vec<f64>,
}

impl IpState {
    fn positives(&self) -> impl Iterator<Item = &f64> {
        self.y
            .iter()
            .chain(std::iter::once(&self.z))
            .chain(&self.lam)
            .chain(&self.xsi)
            .chain(&self.eta)
            .chain(&self.mu)
            .chain(std::iter::once(&self.zet))
            .chain(&self.s)
    }

    /// Largest `-1.01 * d / v` over positive variables and the box distances.
    fn max_step_ratio(&self, dir: &IpState, alfa: &[f64], beta: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (v, d) in self.positives().zip(dir.positives()) {
            worst = worst.max(-1.01 * d / v);
        }
        for j in 0..self.x.len() {
            worst = worst.max(-1.01 * dir.x[j] / (self.x[j] - alfa[j]));
            worst = worst.max(1.01 * dir.x[j] / (beta[j] - self.x[j]));
        }
        worst
    }

    fn advanced(&self, dir: &IpState, t: f64) -> IpState {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, d)| x + t * d).collect::<Vec<_>>();
        IpState {
            x: add(&self.x, &dir.x),
            y: add(&self.y, &dir.y),
            z: self.z + t * dir.z,
            lam: add(&self.lam, &dir.lam),
            xsi: add(&self.xsi, &dir.xsi),
            eta: add(&self.eta, &dir.eta),
            mu: add(&self.mu, &dir.mu),
            zet: self.zet + t * dir.zet,
            s: add(&self.s, &dir.s),
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_bounds_and_sizes() {
        assert!(MmaState::new(vec![0.0, 1.0], vec![1.0, 1.0], MmaParams::default()).is_err());
        let mut s = MmaState::unit(2, MmaParams::default()).unwrap();
        assert!(s.update(&[0.5], &[1.0, 1.0], &[-1.0], &[vec![0.0, 0.0]]).is_err());
        assert!(s.update(&[0.5, 1.5], &[1.0, 1.0], &[-1.0], &[vec![0.0, 0.0]]).is_err());
        assert!(s.update(&[0.5, f64::NAN], &[1.0, 1.0], &[-1.0], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn asymptotes_bracket_the_iterate() {
        let mut s = MmaState::unit(3, MmaParams::default()).unwrap();
        let mut x = vec![0.3, 0.6, 0.9];
        for _ in 0..6 {
            let xn = s.update(&x, &[1.0, -1.0, 0.5], &[-0.5], &[vec![0.1, 0.1, 0.1]]).unwrap();
            for j in 0..3 {
                assert!(s.lower_asymptotes()[j] < x[j] && x[j] < s.upper_asymptotes()[j]);
            }
            x = xn;
        }
    }

    #[test]
    fn unreachable_constraint_is_an_error() {
        let mut s = MmaState::unit(2, MmaParams::default()).unwrap();
        // sum(x) / 2 - 0.1 <= 0 from x = 1 cannot be met with a 0.2 move limit.
        let err = s.update(&[1.0, 1.0], &[1.0, 1.0], &[0.9], &[vec![0.5, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }
}
