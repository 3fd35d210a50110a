//! JSON run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use pato_core::buildsim::BuildSpec;
use pato_core::coupon::CouponSpec;
use pato_core::dataset::{ApParams, VariantConfig};
use pato_core::fea::{MaterialSpec, SolverOpts};
use pato_core::filters::FilterChain;
use pato_core::mma::MmaParams;
use pato_core::optimizer::{LoadCase, SensitivityScaling, ToProblem};
use pato_core::pato::{validate_weight, PatoConfig, ZetaRegion};
use pato_core::surrogate::{TrainConfig, UNetSpec, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub coupon: CouponSpec,
    #[serde(default)]
    pub material: MaterialSpec,
    #[serde(default)]
    pub build: BuildSpec,
    #[serde(default)]
    pub solver: SolverOpts,
    #[serde(default)]
    pub topo: Option<TopoSection>,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub pato: Option<PatoSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopoSection {
    pub load: LoadCase,
    pub vtarget: f64,
    #[serde(default = "default_topo_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub init_noise: f64,
    /// The standard chain for the load case when absent.
    #[serde(default)]
    pub filters: Option<FilterChain>,
    #[serde(default)]
    pub mma: Option<MmaParams>,
}

fn default_topo_iters() -> usize {
    300
}

fn default_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub problems: Vec<LoadCase>,
    pub vtargets: Vec<f64>,
    /// Offsets added to the run seed, one variant per entry.
    pub seeds: Vec<u64>,
    #[serde(default = "default_variant_iters")]
    pub max_iters: usize,
    #[serde(default = "default_noise")]
    pub init_noise: f64,
    #[serde(default = "yes")]
    pub vary_loads: bool,
}

fn default_variant_iters() -> usize {
    100
}

fn default_noise() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default = "half")]
    pub density_threshold: f64,
    /// Minimum `1 - dice` between selected samples.
    #[serde(default = "default_distance")]
    pub distance_threshold: f64,
    #[serde(default)]
    pub affinity: ApParams,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self { density_threshold: half(), distance_threshold: default_distance(), affinity: ApParams::default() }
    }
}

fn half() -> f64 {
    0.5
}

fn default_distance() -> f64 {
    0.05
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Simulation grid; half the sample resolution when absent.
    #[serde(default)]
    pub low_res: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    #[serde(default = "default_net")]
    pub net: UNetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "fifth")]
    pub test_fraction: f64,
    #[serde(default = "fifth")]
    pub val_fraction: f64,
    #[serde(default = "yes")]
    pub augment: bool,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self { net: default_net(), train: TrainConfig::default(), test_fraction: fifth(), val_fraction: fifth(), augment: true }
    }
}

fn default_net() -> UNetSpec {
    UNetSpec::new(Variant::Plain)
}

fn fifth() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatoSection {
    pub model: PathBuf,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default)]
    pub scaling: SensitivityScaling,
    #[serde(default)]
    pub zeta_region: ZetaRegion,
    #[serde(default = "default_hot")]
    pub hot_fraction: f64,
    #[serde(default = "one")]
    pub hot_dilation: usize,
}

fn default_w() -> f64 {
    0.95
}

fn default_hot() -> f64 {
    0.05
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub vtargets: Vec<f64>,
    pub weights: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn topo(&self) -> Result<&TopoSection, CliError> {
        self.topo.as_ref().ok_or_else(|| invalid("missing `topo` section"))
    }

    pub fn problem(&self) -> Result<ToProblem, CliError> {
        let t = self.topo()?;
        let mut p = ToProblem::on_coupon(self.coupon, t.load, t.vtarget);
        p.material = self.material;
        p.solver = self.solver;
        p.max_iters = t.max_iters;
        p.tol = t.tol;
        p.init_noise = t.init_noise;
        if let Some(f) = &t.filters {
            p.filters = f.clone();
        }
        if let Some(m) = t.mma {
            p.mma = m;
        }
        p.validate().map_err(|e| invalid(format!("topo: {e}")))?;
        Ok(p)
    }

    pub fn variants(&self) -> Result<VariantConfig, CliError> {
        let d = self.dataset.as_ref().ok_or_else(|| invalid("missing `dataset` section"))?;
        if d.problems.is_empty() || d.vtargets.is_empty() || d.seeds.is_empty() {
            return Err(invalid("dataset: problems, vtargets and seeds must be nonempty"));
        }
        self.coupon.validate().map_err(|e| invalid(format!("coupon: {e}")))?;
        Ok(VariantConfig {
            coupon: self.coupon,
            material: self.material,
            problems: d.problems.clone(),
            vtargets: d.vtargets.clone(),
            seeds: d.seeds.iter().map(|s| self.seed.wrapping_add(*s)).collect(),
            max_iters: d.max_iters,
            init_noise: d.init_noise,
            vary_loads: d.vary_loads,
        })
    }

    pub fn pato_section(&self) -> Result<&PatoSection, CliError> {
        let p = self.pato.as_ref().ok_or_else(|| invalid("missing `pato` section"))?;
        check_weight("pato.w", p.w)?;
        Ok(p)
    }

    pub fn pato(&self) -> Result<PatoConfig, CliError> {
        let s = self.pato_section()?;
        let mut cfg = PatoConfig::new(self.problem()?, s.w);
        cfg.scaling = s.scaling;
        cfg.build = self.build;
        cfg.zeta_region = s.zeta_region;
        cfg.hot_fraction = s.hot_fraction;
        cfg.hot_dilation = s.hot_dilation;
        cfg.validate().map_err(|e| invalid(format!("pato: {e}")))?;
        Ok(cfg)
    }

    pub fn sweep(&self) -> Result<&SweepSection, CliError> {
        let s = self.sweep.as_ref().ok_or_else(|| invalid("missing `sweep` section"))?;
        if s.vtargets.is_empty() || s.weights.is_empty() {
            return Err(invalid("sweep: vtargets and weights must be nonempty"));
        }
        for w in &s.weights {
            check_weight("sweep.weights", *w)?;
        }
        Ok(s)
    }

    pub fn check_build(&self) -> Result<(), CliError> {
        let d = self.coupon.dims().map_err(|e| invalid(format!("coupon: {e}")))?;
        self.material.validate().map_err(|e| invalid(format!("material: {e}")))?;
        self.solver.validate().map_err(|e| invalid(format!("solver: {e}")))?;
        self.build.validate(d).map_err(|e| invalid(format!("build: {e}")))
    }
}

fn check_weight(key: &str, w: f64) -> Result<(), CliError> {
    validate_weight(w).map_err(|_| invalid(format!("{key} = {w} is outside the allowed range 0 <= w <= 1")))
}
