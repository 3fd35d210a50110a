//! Compliance topology optimization on the coupon: filtered densities, adjoint
//! sensitivities and MMA updates under a single volume constraint.

mod problem;

pub use problem::{boundary, Boundary, LoadCase, Physics, ToProblem};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fea::{self, hex8, ElasticProblem, MaterialSpec, ThermalProblem};
use crate::filters::{FilterPipeline, PipelineTape};
use crate::grid::{GridDims, RegionMask, ScalarField};
use crate::mma::MmaState;
use crate::rng::substream;

/// One row of the optimization history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    /// Volume fraction of the design region.
    pub volume: f64,
    /// Largest design-variable change of the step that produced this iterate.
    pub max_change: f64,
    /// Crack-index term, when one is part of the objective.
    pub max_mssi: Option<f64>,
}

/// Everything derived from a [`ToProblem`] that stays fixed during a run.
pub struct ToSetup {
    pub problem: ToProblem,
    pub mask: RegionMask,
    pub pipeline: FilterPipeline,
    pub boundary: Boundary,
    ke: Vec<f64>,
}

/// State solution at one design.
pub struct StateEval {
    pub tape: PipelineTape,
    pub u: Vec<f64>,
    /// Compliance `u . f`.
    pub compliance: f64,
}

impl ToSetup {
    pub fn new(problem: ToProblem) -> Result<Self> {
        problem.validate()?;
        let mask = problem.mask()?;
        let pipeline = FilterPipeline::new(&mask, &problem.filters)?;
        let boundary = boundary(&problem, &mask)?;
        let d = mask.dims();
        let ke = match problem.load.physics() {
            Physics::ThermalCompliance => hex8::thermal_stiffness(d.h),
            Physics::ElasticCompliance => hex8::elastic_stiffness(d.h, problem.material.nu),
        };
        Ok(Self { problem, mask, pipeline, boundary, ke })
    }

    pub fn dims(&self) -> GridDims {
        self.mask.dims()
    }

    pub fn physics(&self) -> Physics {
        self.problem.load.physics()
    }

    pub fn n_vars(&self) -> usize {
        self.pipeline.space().n_vars()
    }

    fn dofs_per_node(&self) -> usize {
        match self.physics() {
            Physics::ThermalCompliance => 1,
            Physics::ElasticCompliance => 3,
        }
    }

    fn interpolation(&self) -> (f64, f64) {
        let m: &MaterialSpec = &self.problem.material;
        match self.physics() {
            Physics::ThermalCompliance => (m.k_min, m.k0),
            Physics::ElasticCompliance => (m.e_min, m.e0),
        }
    }

    /// Uniform `vtarget`, plus seeded noise when the problem asks for it.
    pub fn initial_design(&self, seed: u64) -> Vec<f64> {
        let n = self.n_vars();
        let vt = self.problem.vtarget;
        let amp = self.problem.init_noise;
        if amp == 0.0 {
            return vec![vt; n];
        }
        let mut rng = substream(seed, "optimizer.init");
        (0..n).map(|_| (vt + amp * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)).collect()
    }

    /// Filters `x` and solves the state equation, optionally warm-started.
    pub fn solve_state(&self, x: &[f64], warm: Option<&[f64]>) -> Result<StateEval> {
        let tape = self.pipeline.forward(x);
        let (lo, hi) = self.interpolation();
        let p = self.problem.material.penal;
        let scale: Vec<f64> = tape.rho.iter().map(|r| fea::simp_interpolate(*r, lo, hi, p)).collect();
        let d = self.dims();
        let u = match self.physics() {
            Physics::ThermalCompliance => {
                let prob = ThermalProblem {
                    dims: d,
                    conductivity: scale,
                    load: self.boundary.load.clone(),
                    fixed: self.boundary.fixed.clone(),
                };
                fea::solve_thermal_from(&prob, &self.problem.solver, warm)?.0
            }
            Physics::ElasticCompliance => {
                let prob = ElasticProblem {
                    dims: d,
                    nu: self.problem.material.nu,
                    stiffness: scale,
                    load: self.boundary.load.clone(),
                    fixed: self.boundary.fixed.clone(),
                    eigenstrain: None,
                };
                fea::solve_elastic_from(&prob, &self.problem.solver, warm)?.0
            }
        };
        let compliance = fea::compliance(&u, &self.boundary.load);
        Ok(StateEval { tape, u, compliance })
    }

    /// `d(compliance)/d(rho)` per voxel of the physical field. The problem is
    /// self-adjoint, so the adjoint state is `u` itself.
    pub fn compliance_sensitivity_rho(&self, rho: &[f64], u: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.interpolation();
        let p = self.problem.material.penal;
        let energies = fea::element_energies(self.dims(), self.dofs_per_node(), &self.ke, u);
        rho.iter().zip(&energies).map(|(r, e)| -fea::simp_derivative(*r, lo, hi, p) * e).collect()
    }

    /// Compliance sensitivity with respect to the design variables.
    pub fn compliance_sensitivity(&self, state: &StateEval) -> Vec<f64> {
        let g = self.compliance_sensitivity_rho(&state.tape.rho, &state.u);
        self.pipeline.backward(&state.tape, &g)
    }

    /// Volume fraction of the design region and its gradient over the physical field.
    pub fn volume_rho(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        let n = self.mask.design_count() as f64;
        let mut v = 0.0;
        let mut g = vec![0.0; rho.len()];
        for (e, r) in rho.iter().enumerate() {
            if self.mask.is_design(e) {
                v += r;
                g[e] = 1.0 / n;
            }
        }
        (v / n, g)
    }

    /// Constraint `V / Vtarget - 1` and its gradient with respect to the design variables.
    pub fn volume_constraint(&self, tape: &PipelineTape) -> (f64, Vec<f64>) {
        let vt = self.problem.vtarget;
        let (v, g) = self.volume_rho(&tape.rho);
        let g: Vec<f64> = g.iter().map(|x| x / vt).collect();
        (v / vt - 1.0, self.pipeline.backward(tape, &g))
    }

    pub fn physical(&self, tape: &PipelineTape) -> ScalarField {
        ScalarField { dims: self.dims(), values: tape.rho.clone() }
    }
}

/// An extra objective term evaluated on the physical density field.
pub trait DensityObjective {
    /// Value and gradient with respect to the physical densities.
    fn evaluate(&mut self, rho: &ScalarField) -> Result<(f64, Vec<f64>)>;
}

/// How the compliance and extra-term gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityScaling {
    /// `(1 - w) dphi + w dzeta`, divided by the initial weighted objective.
    Raw,
    /// `dzeta` rescaled to the largest magnitude of `dphi` before blending,
    /// then divided by the initial compliance.
    #[default]
    MaxAbsNormalized,
}

/// Weighted objective `(1 - w) compliance + w term`.
pub struct Blend<'a> {
    pub weight: f64,
    pub scaling: SensitivityScaling,
    pub term: &'a mut dyn DensityObjective,
}

/// Blends two physical-field gradients.
pub fn blend_gradients(dphi: &[f64], dzeta: &[f64], w: f64, scaling: SensitivityScaling) -> Vec<f64> {
    match scaling {
        SensitivityScaling::Raw => dphi.iter().zip(dzeta).map(|(a, b)| (1.0 - w) * a + w * b).collect(),
        SensitivityScaling::MaxAbsNormalized => {
            let norm = |g: &[f64]| {
                let m = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            };
            let r = norm(dphi) / norm(dzeta);
            dphi.iter().zip(dzeta).map(|(a, b)| (1.0 - w) * a + w * (r * b)).collect()
        }
    }
}

/// Result of an optimization run.
#[derive(Debug, Clone)]
pub struct ToOutcome {
    /// Final design variables.
    pub x: Vec<f64>,
    /// Final physical densities.
    pub design: ScalarField,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// Compliance of the final design.
    pub compliance: f64,
    /// Design-variable vector of every evaluated iterate.
    pub iterates: Vec<Vec<f64>>,
}

/// Plain compliance minimization.
pub fn to_loop(prob: &ToProblem, seed: u64) -> Result<ToOutcome> {
    let setup = ToSetup::new(prob.clone())?;
    optimize(&setup, seed, None)
}

/// Filter, solve, sensitivities, MMA, until the largest design change drops
/// below the tolerance or the iteration budget runs out. The last history
/// row describes the returned design.
pub fn optimize(setup: &ToSetup, seed: u64, mut blend: Option<Blend<'_>>) -> Result<ToOutcome> {
    let prob = &setup.problem;
    let mut x = setup.initial_design(seed);
    let mut mma = MmaState::unit(x.len(), prob.mma)?;
    let mut history = Vec::new();
    let mut iterates = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut scale0: Option<f64> = None;
    let mut change = 0.0;
    let wrap = |iteration: usize| move |e: Error| Error::Optimization { iteration, source: Box::new(e) };

    for iter in 0.. {
        let state = setup.solve_state(&x, warm.as_deref()).map_err(wrap(iter))?;
        let dphi = setup.compliance_sensitivity_rho(&state.tape.rho, &state.u);
        let (objective, grad_rho, zeta) = match blend.as_mut() {
            None => (state.compliance, dphi, None),
            Some(b) => {
                let rho = setup.physical(&state.tape);
                let (zeta, dzeta) = b.term.evaluate(&rho).map_err(wrap(iter))?;
                let w = b.weight;
                let obj = (1.0 - w) * state.compliance + w * zeta;
                (obj, blend_gradients(&dphi, &dzeta, w, b.scaling), Some(zeta))
            }
        };
        let (vol, _) = setup.volume_rho(&state.tape.rho);
        history.push(IterationRecord { iter, objective: state.compliance, volume: vol, max_change: change, max_mssi: zeta });
        iterates.push(x.clone());

        let converged = iter > 0 && change < prob.tol;
        if converged || iter >= prob.max_iters {
            return Ok(ToOutcome {
                design: setup.physical(&state.tape),
                x,
                history,
                converged,
                compliance: state.compliance,
                iterates,
            });
        }

        let reference = match blend.as_ref().map(|b| b.scaling) {
            Some(SensitivityScaling::MaxAbsNormalized) => state.compliance,
            _ => objective,
        };
        let s0 = *scale0.get_or_insert(if reference.abs() > 0.0 { reference.abs() } else { 1.0 });
        let scaled: Vec<f64> = grad_rho.iter().map(|g| g / s0).collect();
        let df = setup.pipeline.backward(&state.tape, &scaled);
        let (g, dg) = setup.volume_constraint(&state.tape);
        let next = mma.update(&x, &df, &[g], &[dg]).map_err(wrap(iter))?;
        change = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = next;
        warm = Some(state.u);
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_blend_reduces_exactly() {
        let a = [1.5, -2.0, 0.3];
        let b = [7.0, 1e9, -4.0];
        assert_eq!(blend_gradients(&a, &b, 0.0, SensitivityScaling::Raw), a.to_vec());
        assert_eq!(blend_gradients(&a, &b, 1.0, SensitivityScaling::Raw), b.to_vec());
        let half = blend_gradients(&a, &b, 0.5, SensitivityScaling::Raw);
        for i in 0..3 {
            assert_eq!(half[i], 0.5 * a[i] + 0.5 * b[i]);
        }
    }

    #[test]
    fn normalized_blend_bounds() {
        let g = blend_gradients(&[4.0, -2.0], &[0.0, 0.01], 0.5, SensitivityScaling::MaxAbsNormalized);
        assert_eq!(g, vec![2.0, -1.0 + 0.5 * (400.0 * 0.01)]);
        let a = [1.5, -2.0, 0.3];
        assert_eq!(blend_gradients(&a, &[3.0, 1.0, 2.0], 0.0, SensitivityScaling::MaxAbsNormalized), a.to_vec());
    }
}
