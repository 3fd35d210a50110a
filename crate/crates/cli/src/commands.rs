use std::path::Path;

use pato_core::buildsim::simulate_build;
use pato_core::crack::{crack_field_from_build, summarize};
use pato_core::dataset::{
    affinity_propagation, classical_mds, design_slice, evaluate_sample, generate_variants, half_dims, rank_k_exemplars,
    split_dataset, AffinityMatrix, SampleRecord,
};
use pato_core::fieldio::load_raw;
use pato_core::grid::{GridDims, ScalarField};
use pato_core::optimizer::to_loop;
use pato_core::pato::{pato_loop, tradeoff_sweep, tradeoff_trends};
use pato_core::surrogate::{load_checkpoint, material_mask, mre, pairs, train as fit, UNet};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset_io;
use crate::output::OutDir;
use crate::CliError;

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    pub name: &'static str,
}

impl Context<'_> {
    fn open(&self) -> Result<OutDir, CliError> {
        OutDir::create(self.out)
    }
}

fn load_model(path: &Path) -> Result<UNet, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("surrogate model {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn load_field(path: &Path) -> Result<ScalarField, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("field file {} not found", path.display())));
    }
    Ok(load_raw(path)?)
}

#[derive(Serialize)]
struct VariantRow<'a> {
    id: &'a str,
    problem: &'a str,
    vtarget: f64,
    seed: u64,
}

#[derive(Serialize)]
struct FailureRow<'a> {
    id: &'a str,
    message: &'a str,
}

pub fn gen_data(ctx: Context<'_>) -> Result<(), CliError> {
    let vc = ctx.cfg.variants()?;
    let (samples, failures) = generate_variants(&vc);
    if samples.is_empty() {
        let first = failures.first().map(|f| f.message.as_str()).unwrap_or("no runs");
        return Err(CliError::Solver(format!("every variant failed: {first}")));
    }
    let mut out = ctx.open()?;
    dataset_io::save(&mut out, &samples)?;
    let rows: Vec<VariantRow> = samples
        .iter()
        .map(|s| VariantRow { id: &s.id, problem: &s.provenance.problem, vtarget: s.provenance.vtarget, seed: s.provenance.seed })
        .collect();
    out.csv("variants", &rows)?;
    if !failures.is_empty() {
        let rows: Vec<FailureRow> = failures.iter().map(|f| FailureRow { id: &f.id, message: &f.message }).collect();
        out.csv("failures", &rows)?;
    }
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct SelectionRow<'a> {
    id: &'a str,
    cluster: usize,
    rank: usize,
}

#[derive(Serialize)]
struct MdsRow<'a> {
    id: &'a str,
    x: f64,
    y: f64,
    cluster: usize,
    exemplar: bool,
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    converged: bool,
    iterations: usize,
    exemplars: Vec<&'a str>,
    selected: Vec<&'a str>,
}

pub fn select(ctx: Context<'_>, data: &Path) -> Result<(), CliError> {
    let sc = &ctx.cfg.select;
    if !(sc.density_threshold > 0.0 && sc.density_threshold < 1.0) || !(0.0..=1.0).contains(&sc.distance_threshold) {
        return Err(CliError::Config("select: density_threshold must lie in (0, 1), distance_threshold in [0, 1]".into()));
    }
    let samples = dataset_io::load(data)?;
    let slices: Vec<_> = samples.iter().map(|s| design_slice(&s.geometry, sc.density_threshold)).collect();
    let s = AffinityMatrix::from_slices(&slices)?;
    let clusters = affinity_propagation(&s, &sc.affinity)?;
    let chosen = rank_k_exemplars(&s, &clusters, sc.distance_threshold);
    let coords = classical_mds(&s);

    let mut out = ctx.open()?;
    let picked: Vec<SampleRecord> = chosen.iter().map(|c| samples[c.id].clone()).collect();
    dataset_io::save(&mut out, &picked)?;
    let rows: Vec<SelectionRow> =
        chosen.iter().map(|c| SelectionRow { id: &samples[c.id].id, cluster: c.cluster, rank: c.rank }).collect();
    out.csv("selection", &rows)?;
    let rows: Vec<MdsRow> = samples
        .iter()
        .enumerate()
        .map(|(i, smp)| MdsRow {
            id: &smp.id,
            x: coords[i][0],
            y: coords[i][1],
            cluster: clusters.assignment[i],
            exemplar: clusters.exemplars.contains(&i),
        })
        .collect();
    out.csv("mds", &rows)?;
    out.json(
        "selection",
        &SelectionSummary {
            converged: clusters.converged,
            iterations: clusters.iterations,
            exemplars: clusters.exemplars.iter().map(|&e| samples[e].id.as_str()).collect(),
            selected: chosen.iter().map(|c| samples[c.id].id.as_str()).collect(),
        },
    )?;
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct LabelRow<'a> {
    id: &'a str,
    max_mssi: f64,
}

fn low_grid(ctx: &Context<'_>, d: GridDims) -> Result<GridDims, CliError> {
    Ok(match ctx.cfg.eval.low_res {
        Some([nx, ny, nz]) => GridDims::new(nx, ny, nz, d.h * d.nx as f64 / nx.max(1) as f64)?,
        None => half_dims(d)?,
    })
}

pub fn eval(ctx: Context<'_>, data: &Path) -> Result<(), CliError> {
    ctx.cfg.check_build()?;
    let mut samples = dataset_io::load(data)?;
    let grids = samples.iter().map(|s| low_grid(&ctx, s.geometry.dims)).collect::<Result<Vec<_>, _>>()?;
    let c = ctx.cfg;
    let labels: Vec<_> = samples
        .par_iter()
        .zip(&grids)
        .map(|(s, low)| evaluate_sample(&s.geometry, *low, s.geometry.dims, &c.material, &c.build, &c.solver))
        .collect();
    for (s, l) in samples.iter_mut().zip(labels) {
        s.label = Some(l?);
    }
    let mut out = ctx.open()?;
    dataset_io::save(&mut out, &samples)?;
    let rows: Vec<LabelRow> = samples.iter().map(|s| LabelRow { id: &s.id, max_mssi: s.label.as_ref().map_or(0.0, |l| l.max()) }).collect();
    out.csv("labels", &rows)?;
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct TestRow<'a> {
    id: &'a str,
    mre: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    n_train: usize,
    n_val: usize,
    n_test: usize,
    params: usize,
    output_scale: f64,
    epochs: usize,
    best_epoch: usize,
    stopped_early: bool,
    test_loss: f64,
    test_mre: f64,
}

pub fn train(ctx: Context<'_>, data: &Path) -> Result<(), CliError> {
    let sc = &ctx.cfg.surrogate;
    sc.net.validate()?;
    let mut tc = sc.train.clone();
    tc.seed = ctx.cfg.seed;
    tc.validate()?;
    let samples = dataset_io::load(data)?;
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(CliError::Data(format!("sample {} has no label; run `eval` first", s.id)));
    }
    let split = split_dataset(&samples, sc.test_fraction, sc.val_fraction, ctx.cfg.seed, sc.augment)?;
    let (tr, va, te) = (pairs(&split.train)?, pairs(&split.val)?, pairs(&split.test)?);
    let mut net = UNet::new(sc.net.clone(), ctx.cfg.seed)?;
    net.fit_output_scale(&tr);
    let outcome = fit(&mut net, &tr, &va, &tc)?;
    let (test_loss, test_mre) = net.evaluate(&te)?;

    let mut out = ctx.open()?;
    out.model("surrogate", &net)?;
    out.csv("history", &outcome.history)?;
    let rows: Vec<TestRow> = split
        .test
        .iter()
        .zip(&te)
        .map(|(s, p)| {
            let pred = net.predict(&p.input);
            let m = mre(&pred.values, &p.target.values, Some(&material_mask(&p.input)))?;
            Ok(TestRow { id: &s.id, mre: m })
        })
        .collect::<Result<_, CliError>>()?;
    if !rows.is_empty() {
        out.csv("test", &rows)?;
    }
    out.json(
        "training",
        &TrainSummary {
            n_train: tr.len(),
            n_val: va.len(),
            n_test: te.len(),
            params: net.param_count(),
            output_scale: net.output_scale,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            test_loss,
            test_mre,
        },
    )?;
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct PredictSummary {
    max_mssi: f64,
    argmax: [usize; 3],
}

pub fn predict(ctx: Context<'_>, model: &Path, input: &Path) -> Result<(), CliError> {
    let net = load_model(model)?;
    let rho = load_field(input)?;
    rho.check_finite()?;
    let pred = net.predict(&rho);
    let gates = net.gate_fields(&rho);
    let names: Vec<String> = (0..gates.len()).map(|l| format!("attention_{l}")).collect();
    let mut arrays: Vec<(&str, &ScalarField)> = vec![("density", &rho), ("mssi", &pred)];
    arrays.extend(names.iter().map(String::as_str).zip(gates.iter()));

    let mut out = ctx.open()?;
    out.field("prediction", &pred)?;
    out.vtk("prediction", &arrays)?;
    let (i, j, k) = pred.dims.coords(pred.argmax());
    out.json("prediction", &PredictSummary { max_mssi: pred.max(), argmax: [i, j, k] })?;
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct TopoSummary {
    compliance: f64,
    volume: f64,
    iterations: usize,
    converged: bool,
}

pub fn topo(ctx: Context<'_>) -> Result<(), CliError> {
    let prob = ctx.cfg.problem()?;
    let run = to_loop(&prob, ctx.cfg.seed)?;
    let mut out = ctx.open()?;
    out.field("design", &run.design)?;
    out.vtk("design", &[("density", &run.design)])?;
    out.csv("history", &run.history)?;
    let last = run.history.last().expect("history has the final iterate");
    out.json(
        "result",
        &TopoSummary { compliance: run.compliance, volume: last.volume, iterations: last.iter, converged: run.converged },
    )?;
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct PatoSummary {
    w: f64,
    compliance: f64,
    max_mssi_surrogate: f64,
    max_mssi_sim: f64,
    argmax_in_region: bool,
    iterations: usize,
    converged: bool,
}

pub fn pato(ctx: Context<'_>) -> Result<(), CliError> {
    let pc = ctx.cfg.pato()?;
    let net = load_model(&ctx.cfg.pato_section()?.model)?;
    let o = pato_loop(&pc, &net, ctx.cfg.seed)?;
    let mut out = ctx.open()?;
    out.field("design", &o.run.design)?;
    out.field("mssi_surrogate", &o.surrogate_field)?;
    out.field("mssi_sim", &o.sim_field)?;
    out.vtk("design", &[("density", &o.run.design), ("mssi_surrogate", &o.surrogate_field), ("mssi_sim", &o.sim_field)])?;
    out.csv("history", &o.run.history)?;
    out.json(
        "result",
        &PatoSummary {
            w: pc.w,
            compliance: o.run.compliance,
            max_mssi_surrogate: o.zeta,
            max_mssi_sim: o.zeta_sim,
            argmax_in_region: o.argmax_in_region,
            iterations: o.run.history.len() - 1,
            converged: o.run.converged,
        },
    )?;
    out.finish(ctx.name, ctx.cfg)
}

/// One line of the trade-off table.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub vtarget: f64,
    pub w: f64,
    pub compliance: f64,
    pub max_mssi_surrogate: f64,
    pub max_mssi_sim: f64,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Serialize)]
struct SweepFailureRow<'a> {
    vtarget: f64,
    w: f64,
    message: &'a str,
}

pub fn sweep(ctx: Context<'_>) -> Result<(), CliError> {
    let sw = ctx.cfg.sweep()?;
    let base = ctx.cfg.pato()?;
    let net = load_model(&ctx.cfg.pato_section()?.model)?;
    let (records, failures) = tradeoff_sweep(&base, &sw.vtargets, &sw.weights, &net, ctx.cfg.seed)?;
    if records.is_empty() {
        let first = failures.first().map(|f| f.message.as_str()).unwrap_or("no runs");
        return Err(CliError::Solver(format!("every sweep run failed: {first}")));
    }
    let mut out = ctx.open()?;
    let rows: Vec<SweepRow> = records
        .iter()
        .map(|r| SweepRow {
            vtarget: r.vtarget,
            w: r.w,
            compliance: r.compliance,
            max_mssi_surrogate: r.max_mssi_surrogate,
            max_mssi_sim: r.max_mssi_sim,
            iters: r.iters,
            converged: r.converged,
        })
        .collect();
    out.csv("sweep", &rows)?;
    let trends = tradeoff_trends(&records);
    if !trends.is_empty() {
        #[derive(Serialize)]
        struct TrendRow {
            vtarget: f64,
            w_low: f64,
            w_high: f64,
            zeta_lower: bool,
            compliance_higher: bool,
        }
        let rows: Vec<TrendRow> = trends
            .iter()
            .map(|t| TrendRow {
                vtarget: t.vtarget,
                w_low: t.w_low,
                w_high: t.w_high,
                zeta_lower: t.zeta_lower,
                compliance_higher: t.compliance_higher,
            })
            .collect();
        out.csv("trends", &rows)?;
    }
    if !failures.is_empty() {
        let rows: Vec<SweepFailureRow> =
            failures.iter().map(|f| SweepFailureRow { vtarget: f.vtarget, w: f.w, message: &f.message }).collect();
        out.csv("failures", &rows)?;
    }
    out.finish(ctx.name, ctx.cfg)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    field: &'a str,
    max: f64,
    argmax_i: usize,
    argmax_j: usize,
    argmax_k: usize,
    p99: f64,
}

pub fn crack_index(ctx: Context<'_>, input: Option<&Path>) -> Result<(), CliError> {
    let c = ctx.cfg;
    c.check_build()?;
    let rho = match input {
        Some(p) => load_field(p)?,
        None => c.coupon.no_go_density()?,
    };
    rho.check_finite()?;
    let result = simulate_build(&rho, &c.material, &c.build, &c.solver)?;
    let fields = crack_field_from_build(&result, &c.material);
    let named = fields.named();
    let mut out = ctx.open()?;
    out.field("mssi", &fields.mssi)?;
    let mut arrays: Vec<(&str, &ScalarField)> = vec![("density", &rho)];
    arrays.extend(named.iter().copied());
    out.vtk("crack_indices", &arrays)?;
    let summaries: Vec<_> = named.iter().map(|(n, f)| summarize(n, f)).collect();
    let rows: Vec<SummaryRow> = summaries
        .iter()
        .map(|s| SummaryRow { field: &s.name, max: s.max, argmax_i: s.argmax[0], argmax_j: s.argmax[1], argmax_k: s.argmax[2], p99: s.p99 })
        .collect();
    out.csv("summary", &rows)?;
    out.finish(ctx.name, ctx.cfg)
}

pub fn export(ctx: Context<'_>, input: &Path) -> Result<(), CliError> {
    let f = load_field(input)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("field").to_string();
    let mut out = ctx.open()?;
    out.vtk(&stem, &[(stem.as_str(), &f)])?;
    out.finish(ctx.name, ctx.cfg)
}
