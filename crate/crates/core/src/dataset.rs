//! Training data: design variants from the optimizer, crack labels from
//! low-resolution build simulation, and diversity-based subset selection.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buildsim::{simulate_build, BuildSpec};
use crate::coupon::CouponSpec;
use crate::crack::crack_field_from_build;
use crate::error::{Error, Result};
use crate::fea::{MaterialSpec, SolverOpts};
use crate::grid::{binarize, central_xz_slice, rotate180_z, trilinear_resample, volume_average, BitSlice, GridDims, ScalarField};
use crate::optimizer::{to_loop, LoadCase, ToProblem};
use crate::rng::substream;

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub problem: String,
    pub load: LoadCase,
    pub vtarget: f64,
    pub seed: u64,
    #[serde(default)]
    pub rotated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub geometry: ScalarField,
    pub provenance: Provenance,
    /// MSSI at the geometry's resolution.
    pub label: Option<ScalarField>,
}

/// The cartesian grid of optimization runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub coupon: CouponSpec,
    #[serde(default)]
    pub material: MaterialSpec,
    pub problems: Vec<LoadCase>,
    pub vtargets: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_variant_iters")]
    pub max_iters: usize,
    /// Initial-design perturbation passed to every run.
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
    /// Draw load parameters from the seed.
    #[serde(default = "default_true")]
    pub vary_loads: bool,
}

fn default_variant_iters() -> usize {
    100
}

fn default_init_noise() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantFailure {
    pub id: String,
    pub message: String,
}

/// Load parameters for one seed: source gradient in [0, 1] for thermal cases,
/// pre-cut size scaled by [0.8, 1.2] for hydrostatic pressure, quadrant
/// pressures in [0.2, 1] for four-segment loading.
pub fn vary_load(load: LoadCase, seed: u64) -> LoadCase {
    let mut rng = substream(seed, "dataset.load");
    match load {
        LoadCase::ThermalSymmetric { .. } => LoadCase::ThermalSymmetric { source_gradient: rng.random_range(0.0..1.0) },
        LoadCase::ThermalAsymmetric { .. } => LoadCase::ThermalAsymmetric { source_gradient: rng.random_range(0.0..1.0) },
        LoadCase::HydrostaticPressure { pressure, precut_half_diag } => LoadCase::HydrostaticPressure {
            pressure,
            precut_half_diag: precut_half_diag * rng.random_range(0.8..1.2),
        },
        LoadCase::FourSegment { precut_half_diag, .. } => LoadCase::FourSegment {
            pressures: std::array::from_fn(|_| rng.random_range(0.2..1.0)),
            precut_half_diag,
        },
    }
}

fn variant_id(load: &LoadCase, vtarget: f64, seed: u64) -> String {
    format!("{}-v{:.2}-s{}", load.name(), vtarget, seed)
}

/// Runs every (problem, volume target, seed) combination. Failed runs are
/// reported next to the successful samples instead of aborting the batch.
pub fn generate_variants(cfg: &VariantConfig) -> (Vec<SampleRecord>, Vec<VariantFailure>) {
    let mut jobs = Vec::new();
    for load in &cfg.problems {
        for &vt in &cfg.vtargets {
            for &seed in &cfg.seeds {
                jobs.push((*load, vt, seed));
            }
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(base, vtarget, seed)| {
            let id = variant_id(&base, vtarget, seed);
            let load = if cfg.vary_loads { vary_load(base, seed) } else { base };
            let mut prob = ToProblem::on_coupon(cfg.coupon, load, vtarget);
            prob.material = cfg.material;
            prob.max_iters = cfg.max_iters;
            prob.init_noise = cfg.init_noise;
            match to_loop(&prob, seed) {
                Ok(out) => Ok(SampleRecord {
                    id,
                    geometry: out.design,
                    provenance: Provenance { problem: base.name().into(), load, vtarget, seed, rotated: false },
                    label: None,
                }),
                Err(e) => Err(VariantFailure { id, message: e.to_string() }),
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(f) => failures.push(f),
        }
    }
    (samples, failures)
}

/// Half the resolution per axis (rounded up), spanning the same box along x.
pub fn half_dims(d: GridDims) -> Result<GridDims> {
    let half = |n: usize| n.div_ceil(2);
    let nx = half(d.nx);
    GridDims::new(nx, half(d.ny), half(d.nz), d.h * d.nx as f64 / nx as f64)
}

/// Crack label of a geometry: simulate the build on a coarse grid and
/// interpolate the MSSI back up to `train`.
pub fn evaluate_sample(
    geom: &ScalarField,
    low: GridDims,
    train: GridDims,
    mat: &MaterialSpec,
    build: &BuildSpec,
    solver: &SolverOpts,
) -> Result<ScalarField> {
    if low.nx > train.nx || low.ny > train.ny || low.nz > train.nz {
        return Err(Error::InvalidParameter("low-resolution grid finer than training grid".into()));
    }
    let coarse = volume_average(geom, low);
    let result = simulate_build(&coarse, mat, build, solver)?;
    let mssi = crack_field_from_build(&result, mat).mssi;
    Ok(trilinear_resample(&mssi, train))
}

/// Labels every sample at its own resolution, in parallel.
pub fn label_samples(
    samples: &mut [SampleRecord],
    mat: &MaterialSpec,
    build: &BuildSpec,
    solver: &SolverOpts,
) -> Result<()> {
    let labels: Vec<Result<ScalarField>> = samples
        .par_iter()
        .map(|s| {
            let train = s.geometry.dims;
            evaluate_sample(&s.geometry, half_dims(train)?, train, mat, build, solver)
        })
        .collect();
    for (s, l) in samples.iter_mut().zip(labels) {
        s.label = Some(l?);
    }
    Ok(())
}

/// Dice coefficient of two bit sets; 1 when both are empty.
pub fn dice(a: &BitSlice, b: &BitSlice) -> Result<f64> {
    if a.nx != b.nx || a.nz != b.nz {
        return Err(Error::SizeMismatch { expected: a.bits.len(), actual: b.bits.len() });
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        na += *x as usize;
        nb += *y as usize;
        both += (*x && *y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Binarized central xz-slice of a design.
pub fn design_slice(geom: &ScalarField, threshold: f64) -> BitSlice {
    binarize(&central_xz_slice(geom), threshold)
}

/// Symmetric similarity matrix with unit diagonal and entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::SizeMismatch { expected: n * n, actual: values.len() });
        }
        for i in 0..n {
            if values[i * n + i] != 1.0 {
                return Err(Error::InvalidParameter(format!("affinity diagonal at {i} is not 1")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(0.0..=1.0).contains(&v) || v != values[j * n + i] {
                    return Err(Error::InvalidParameter(format!("affinity entry ({i}, {j}) invalid")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn from_slices(slices: &[BitSlice]) -> Result<Self> {
        let n = slices.len();
        let mut values = vec![1.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = dice(&slices[i], &slices[j])?;
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self::new(n, values)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.get(i, j)
    }

    /// Median of the off-diagonal entries (1 for fewer than two samples).
    pub fn median_similarity(&self) -> f64 {
        let mut off: Vec<f64> = (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        if off.is_empty() {
            return 1.0;
        }
        off.sort_by(f64::total_cmp);
        let m = off.len();
        if m % 2 == 1 {
            off[m / 2]
        } else {
            0.5 * (off[m / 2 - 1] + off[m / 2])
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApParams {
    pub damping: f64,
    /// Self-similarity; the median similarity when absent.
    pub preference: Option<f64>,
    pub max_iter: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        Self { damping: 0.5, preference: None, max_iter: 1000 }
    }
}

/// Clusters found by affinity propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    /// Exemplar sample id of each cluster, ascending.
    pub exemplars: Vec<usize>,
    /// Cluster index of each sample.
    pub assignment: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl ExemplarSet {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(move |(_, c)| **c == cluster).map(|(i, _)| i)
    }
}

const AP_TOL: f64 = 1e-6;
const AP_STABLE_ITERS: usize = 10;
/// Per-index penalty on candidate exemplars so exact ties resolve towards the
/// lowest id instead of stalling the messages at a saddle.
const AP_TIE_BIAS: f64 = 1e-9;

/// Responsibility/availability message passing. Samples whose self
/// responsibility plus self availability is positive become exemplars; every
/// other sample joins its most similar exemplar, lowest id on ties.
/// Candidate exemplars carry a penalty of 1e-9 per index, so between otherwise
/// equal candidates the lowest id wins. A final refinement moves each
/// exemplar to its cluster's medoid.
pub fn affinity_propagation(s: &AffinityMatrix, params: &ApParams) -> Result<ExemplarSet> {
    if !(0.5..1.0).contains(&params.damping) || params.max_iter == 0 {
        return Err(Error::InvalidParameter("damping must lie in [0.5, 1) and max_iter be positive".into()));
    }
    let n = s.len();
    if n == 0 {
        return Ok(ExemplarSet { exemplars: vec![], assignment: vec![], converged: true, iterations: 0 });
    }
    let pref = params.preference.unwrap_or_else(|| s.median_similarity());
    let sim = |i: usize, k: usize| (if i == k { pref } else { s.get(i, k) }) - AP_TIE_BIAS * k as f64;
    let lam = params.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut stable = 0;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        iterations += 1;
        let mut change = 0.0f64;
        for i in 0..n {
            let (mut best, mut second, mut best_k) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[i * n + k] + sim(i, k);
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let other = if k == best_k { second } else { best };
                let new = lam * r[i * n + k] + (1.0 - lam) * (sim(i, k) - other);
                change = change.max((new - r[i * n + k]).abs());
                r[i * n + k] = new;
            }
        }
        for k in 0..n {
            let pos: f64 = (0..n).filter(|i| *i != k).map(|i| r[i * n + k].max(0.0)).sum();
            for i in 0..n {
                let target = if i == k { pos } else { (r[k * n + k] + pos - r[i * n + k].max(0.0)).min(0.0) };
                let new = lam * a[i * n + k] + (1.0 - lam) * target;
                change = change.max((new - a[i * n + k]).abs());
                a[i * n + k] = new;
            }
        }
        if change < AP_TOL {
            stable += 1;
            if stable >= AP_STABLE_ITERS {
                converged = true;
                break;
            }
        } else {
            stable = 0;
        }
    }

    let evidence = |k: usize| r[k * n + k] + a[k * n + k];
    let mut exemplars: Vec<usize> = (0..n).filter(|k| evidence(*k) > 0.0).collect();
    if exemplars.is_empty() {
        // No sample claims itself: fall back to the single most self-evident one.
        let best = (0..n).fold(0, |b, k| if evidence(k) > evidence(b) { k } else { b });
        exemplars.push(best);
    }
    let mut assignment = assign(s, &exemplars);
    // Refinement: each cluster's exemplar becomes the member with the largest
    // total similarity to its cluster, then samples are reassigned.
    let mut refined: Vec<usize> = (0..exemplars.len())
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|i| assignment[*i] == c).collect();
            let total = |m: usize| members.iter().map(|j| s.get(m, *j)).sum::<f64>();
            members.iter().copied().fold(members[0], |b, m| if total(m) > total(b) + 1e-12 { m } else { b })
        })
        .collect();
    refined.sort_unstable();
    refined.dedup();
    if refined != exemplars {
        exemplars = refined;
        assignment = assign(s, &exemplars);
    }
    Ok(ExemplarSet { exemplars, assignment, converged, iterations })
}

/// Cluster index of each sample: exemplars keep their own cluster, others join
/// the most similar exemplar, lowest id on ties.
fn assign(s: &AffinityMatrix, exemplars: &[usize]) -> Vec<usize> {
    (0..s.len())
        .map(|i| {
            if let Ok(c) = exemplars.binary_search(&i) {
                return c;
            }
            let mut best = 0;
            for (c, &k) in exemplars.iter().enumerate() {
                if s.get(i, k) > s.get(i, exemplars[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub id: usize,
    pub cluster: usize,
    pub rank: usize,
}

/// Grows the exemplar set rank by rank. In each round every cluster, in
/// order, proposes the unselected member farthest (1 - dice) from everything
/// selected so far; it is accepted if that distance reaches `threshold`.
/// Stops after a round with no acceptance.
pub fn rank_k_exemplars(s: &AffinityMatrix, clusters: &ExemplarSet, threshold: f64) -> Vec<Selection> {
    let mut chosen: Vec<Selection> = clusters
        .exemplars
        .iter()
        .enumerate()
        .map(|(c, &id)| Selection { id, cluster: c, rank: 1 })
        .collect();
    let mut taken = vec![false; s.len()];
    for sel in &chosen {
        taken[sel.id] = true;
    }
    for rank in 2.. {
        let mut accepted = false;
        for c in 0..clusters.exemplars.len() {
            let mut best: Option<(usize, f64)> = None;
            for m in clusters.members(c).filter(|m| !taken[*m]) {
                let d = chosen.iter().map(|x| s.distance(m, x.id)).fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((m, d));
                }
            }
            if let Some((m, d)) = best {
                if d >= threshold {
                    chosen.push(Selection { id: m, cluster: c, rank });
                    taken[m] = true;
                    accepted = true;
                }
            }
        }
        if !accepted {
            break;
        }
    }
    chosen
}

/// Two-dimensional classical MDS of the distances `1 - s`. Negative
/// eigenvalues of the centered Gram matrix are clipped to zero.
pub fn classical_mds(s: &AffinityMatrix) -> Vec<[f64; 2]> {
    let n = s.len();
    if n == 0 {
        return vec![];
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| s.distance(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + total));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|x, y| eig.eigenvalues[*y].total_cmp(&eig.eigenvalues[*x]).then(x.cmp(y)));
    // Eigenvalues at roundoff level count as zero.
    let floor = 1e-12 * eig.eigenvalues[order[0]].abs();
    let mut coords = vec![[0.0; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[e];
        let scale = if lambda > floor { lambda.sqrt() } else { 0.0 };
        let v = eig.eigenvectors.column(e);
        // Fix the sign: the largest-magnitude entry is positive.
        let lead = (0..n).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][axis] = sign * scale * v[i];
        }
    }
    coords
}

/// The input samples followed by copies rotated 180 degrees about z.
pub fn augment_rotate180(samples: &[SampleRecord]) -> Vec<SampleRecord> {
    let mut out = samples.to_vec();
    out.extend(samples.iter().map(|s| SampleRecord {
        id: format!("{}-r180", s.id),
        geometry: rotate180_z(&s.geometry),
        provenance: Provenance { rotated: !s.provenance.rotated, ..s.provenance.clone() },
        label: s.label.as_ref().map(rotate180_z),
    }));
    out
}

/// Seeded partition of `0..n` into sorted (train, test) index lists. Both
/// parts are nonempty when `n >= 2`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    partition(n, test_fraction, seed, "dataset.split")
}

fn partition(n: usize, fraction: f64, seed: u64, stream: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter("split fractions must lie in [0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, stream));
    let mut n_out = (n as f64 * fraction).round() as usize;
    if n >= 2 && fraction > 0.0 {
        n_out = n_out.clamp(1, n - 1);
    }
    let mut out = idx.split_off(n - n_out);
    idx.sort_unstable();
    out.sort_unstable();
    Ok((idx, out))
}

/// Train, validation and test samples for the surrogate.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Splits off the test set, then carves the validation set out of the rest.
/// Augmentation runs on each part separately.
pub fn split_dataset(
    samples: &[SampleRecord],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
    augment: bool,
) -> Result<DataSplit> {
    let (rest, test) = split_indices(samples.len(), test_fraction, seed)?;
    let (train, val) = partition(rest.len(), val_fraction, seed, "dataset.val")?;
    let pick = |ids: &mut dyn Iterator<Item = usize>| {
        let part: Vec<SampleRecord> = ids.map(|i| samples[i].clone()).collect();
        if augment {
            augment_rotate180(&part)
        } else {
            part
        }
    };
    Ok(DataSplit {
        train: pick(&mut train.iter().map(|&i| rest[i])),
        val: pick(&mut val.iter().map(|&i| rest[i])),
        test: pick(&mut test.into_iter()),
    })
}
