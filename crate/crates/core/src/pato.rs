//! Producibility-aware optimization: compliance traded against the surrogate's
//! maximum crack index, with the final design checked by a full build
//! simulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buildsim::{simulate_build, BuildSpec};
use crate::crack::crack_field_from_build;
use crate::error::{Error, Result};
use crate::grid::{argmax_masked, dilate, top_fraction, ScalarField};
use crate::optimizer::{blend_gradients, optimize, Blend, DensityObjective, SensitivityScaling, StateEval, ToOutcome, ToProblem, ToSetup};
use crate::surrogate::UNet;

/// Voxels over which the maximum crack index is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaRegion {
    /// Passive solid plus design region.
    #[default]
    Body,
    Design,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatoConfig {
    pub problem: ToProblem,
    pub w: f64,
    #[serde(default)]
    pub scaling: SensitivityScaling,
    #[serde(default)]
    pub build: BuildSpec,
    #[serde(default)]
    pub zeta_region: ZetaRegion,
    /// Share of the surrogate field, by value, that forms the predicted hot region.
    #[serde(default = "default_top")]
    pub hot_fraction: f64,
    /// Voxels of slack around the predicted hot region.
    #[serde(default = "default_dilation")]
    pub hot_dilation: usize,
}

fn default_top() -> f64 {
    0.05
}

fn default_dilation() -> usize {
    1
}

impl PatoConfig {
    pub fn new(problem: ToProblem, w: f64) -> Self {
        Self {
            problem,
            w,
            scaling: SensitivityScaling::default(),
            build: BuildSpec::default(),
            zeta_region: ZetaRegion::Body,
            hot_fraction: default_top(),
            hot_dilation: default_dilation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_weight(self.w)?;
        if !(self.hot_fraction > 0.0 && self.hot_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!("hot_fraction must lie in (0, 1], got {}", self.hot_fraction)));
        }
        self.problem.validate()?;
        self.build.validate(self.problem.coupon.dims()?)
    }
}

pub fn validate_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParameter(format!("weight w must satisfy 0 <= w <= 1, got {w}")));
    }
    Ok(())
}

/// Maximum surrogate crack index over a voxel set, as an objective term.
pub struct SurrogateTerm<'a> {
    pub net: &'a UNet,
    pub mask: Vec<bool>,
}

impl DensityObjective for SurrogateTerm<'_> {
    fn evaluate(&mut self, rho: &ScalarField) -> Result<(f64, Vec<f64>)> {
        let g = self.net.input_gradient(rho, Some(&self.mask));
        Ok((g.max_mssi, g.input_gradient.values))
    }
}

fn zeta_mask(setup: &ToSetup, region: ZetaRegion) -> Vec<bool> {
    match region {
        ZetaRegion::Body => setup.mask.body(),
        ZetaRegion::Design => (0..setup.dims().len()).map(|e| setup.mask.is_design(e)).collect(),
    }
}

/// Gradient of `(1 - w) compliance + w zeta` with respect to the design
/// variables, before the per-run normalization applied inside the loop.
pub fn combined_sensitivity(
    setup: &ToSetup,
    state: &StateEval,
    term: &mut dyn DensityObjective,
    w: f64,
    scaling: SensitivityScaling,
) -> Result<Vec<f64>> {
    validate_weight(w)?;
    let dphi = setup.compliance_sensitivity_rho(&state.tape.rho, &state.u);
    let (_, dzeta) = term.evaluate(&setup.physical(&state.tape))?;
    Ok(setup.pipeline.backward(&state.tape, &blend_gradients(&dphi, &dzeta, w, scaling)))
}

#[derive(Debug, Clone)]
pub struct PatoOutcome {
    pub run: ToOutcome,
    /// Surrogate prediction on the final design.
    pub surrogate_field: ScalarField,
    pub zeta: f64,
    /// Crack index of the final design from a full build simulation.
    pub sim_field: ScalarField,
    pub zeta_sim: f64,
    /// Whether the simulated maximum falls inside the dilated predicted hot region.
    pub argmax_in_region: bool,
}

pub fn pato_loop(cfg: &PatoConfig, net: &UNet, seed: u64) -> Result<PatoOutcome> {
    cfg.validate()?;
    let setup = ToSetup::new(cfg.problem.clone())?;
    let mask = zeta_mask(&setup, cfg.zeta_region);
    let mut term = SurrogateTerm { net, mask: mask.clone() };
    let blend = Blend { weight: cfg.w, scaling: cfg.scaling, term: &mut term };
    let run = optimize(&setup, seed, Some(blend))?;
    verify(cfg, net, &mask, run)
}

fn verify(cfg: &PatoConfig, net: &UNet, mask: &[bool], run: ToOutcome) -> Result<PatoOutcome> {
    let design = &run.design;
    let surrogate_field = net.predict(design);
    let zeta = net.predict_max(design, Some(mask));
    let sim = simulate_build(design, &cfg.problem.material, &cfg.build, &cfg.problem.solver)?;
    let sim_field = crack_field_from_build(&sim, &cfg.problem.material).mssi;
    let at = argmax_masked(&sim_field.values, Some(mask)).ok_or_else(|| Error::InvalidParameter("empty crack-index region".into()))?;
    let hot = dilate(design.dims, &top_fraction(&surrogate_field.values, Some(mask), cfg.hot_fraction), cfg.hot_dilation);
    Ok(PatoOutcome {
        zeta_sim: sim_field.values[at],
        argmax_in_region: hot[at],
        surrogate_field,
        zeta,
        sim_field,
        run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub vtarget: f64,
    pub w: f64,
    pub compliance: f64,
    pub max_mssi_surrogate: f64,
    pub max_mssi_sim: f64,
    pub iters: usize,
    pub converged: bool,
    pub argmax_in_region: bool,
}

impl TradeoffRecord {
    fn from_outcome(vtarget: f64, w: f64, o: &PatoOutcome) -> Self {
        Self {
            vtarget,
            w,
            compliance: o.run.compliance,
            max_mssi_surrogate: o.zeta,
            max_mssi_sim: o.zeta_sim,
            iters: o.run.history.len() - 1,
            converged: o.run.converged,
            argmax_in_region: o.argmax_in_region,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub vtarget: f64,
    pub w: f64,
    pub message: String,
}

/// One PATO run per `(vtarget, w)` pair, sorted by `(vtarget, w)`. Failed runs
/// are reported separately and do not stop the sweep.
pub fn tradeoff_sweep(
    base: &PatoConfig,
    vtargets: &[f64],
    weights: &[f64],
    net: &UNet,
    seed: u64,
) -> Result<(Vec<TradeoffRecord>, Vec<SweepFailure>)> {
    for w in weights {
        validate_weight(*w)?;
    }
    let mut jobs: Vec<(f64, f64)> = vtargets.iter().flat_map(|v| weights.iter().map(move |w| (*v, *w))).collect();
    jobs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let results: Vec<Result<TradeoffRecord>> = jobs
        .par_iter()
        .map(|&(vt, w)| {
            let mut cfg = base.clone();
            cfg.problem.vtarget = vt;
            cfg.w = w;
            pato_loop(&cfg, net, seed).map(|o| TradeoffRecord::from_outcome(vt, w, &o))
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((vt, w), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(SweepFailure { vtarget: vt, w, message: e.to_string() }),
        }
    }
    Ok((records, failures))
}

/// Per volume target, the lowest-w run compared against the highest-w run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub vtarget: f64,
    pub w_low: f64,
    pub w_high: f64,
    /// Surrogate maximum strictly lower at the higher weight.
    pub zeta_lower: bool,
    /// Compliance no lower at the higher weight.
    pub compliance_higher: bool,
}

pub fn tradeoff_trends(records: &[TradeoffRecord]) -> Vec<Trend> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let vt = records[i].vtarget;
        let group: Vec<&TradeoffRecord> = records[i..].iter().take_while(|r| r.vtarget == vt).collect();
        i += group.len();
        let lo = group.iter().min_by(|a, b| a.w.total_cmp(&b.w)).unwrap();
        let hi = group.iter().max_by(|a, b| a.w.total_cmp(&b.w)).unwrap();
        if group.len() < 2 || lo.w == hi.w {
            continue;
        }
        out.push(Trend {
            vtarget: vt,
            w_low: lo.w,
            w_high: hi.w,
            zeta_lower: hi.max_mssi_surrogate < lo.max_mssi_surrogate,
            compliance_higher: hi.compliance >= lo.compliance,
        });
    }
    out
}
