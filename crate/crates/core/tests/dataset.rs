use pato_core::buildsim::{simulate_build, BuildSpec, InherentStrain};
use pato_core::coupon::CouponSpec;
use pato_core::crack::crack_field_from_build;
use pato_core::dataset::*;
use pato_core::fea::{MaterialSpec, SolverOpts};
use pato_core::grid::{BitSlice, GridDims, ScalarField};
use pato_core::optimizer::LoadCase;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(nx: usize, nz: usize, on: &[usize]) -> BitSlice {
    let mut b = vec![false; nx * nz];
    for i in on {
        b[*i] = true;
    }
    BitSlice { nx, nz, bits: b }
}

#[test]
fn dice_examples() {
    let a = bits(4, 2, &[0, 1, 2, 3]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &bits(4, 2, &[4, 5, 6, 7])).unwrap(), 0.0);
    assert_eq!(dice(&a, &bits(4, 2, &[2, 3, 4, 5])).unwrap(), 0.5);
    assert_eq!(dice(&bits(4, 2, &[]), &bits(4, 2, &[])).unwrap(), 1.0);
    assert!(dice(&a, &bits(2, 4, &[])).is_err());
}

#[test]
fn affinity_matrix_examples() {
    let a = bits(3, 3, &[0, 4, 8]);
    let s = AffinityMatrix::from_slices(&[a.clone(), a.clone(), a]).unwrap();
    assert!(s.rows().flatten().all(|v| *v == 1.0));
    let s = AffinityMatrix::from_slices(&[bits(2, 2, &[0]), bits(2, 2, &[3])]).unwrap();
    assert_eq!((s.get(0, 1), s.get(1, 0), s.get(0, 0)), (0.0, 0.0, 1.0));

    assert!(AffinityMatrix::new(2, vec![1.0, 0.3, 0.4, 1.0]).is_err());
    assert!(AffinityMatrix::new(2, vec![0.9, 0.3, 0.3, 1.0]).is_err());
    assert!(AffinityMatrix::new(2, vec![1.0, 1.3, 1.3, 1.0]).is_err());
}

fn random_slice(rng: &mut ChaCha8Rng, nx: usize, nz: usize, p: f64) -> BitSlice {
    BitSlice { nx, nz, bits: (0..nx * nz).map(|_| rng.random_bool(p)).collect() }
}

#[test]
fn random_triple_matches_direct_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sl: Vec<_> = (0..3).map(|_| random_slice(&mut rng, 7, 5, 0.4)).collect();
    let s = AffinityMatrix::from_slices(&sl).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let inter = sl[i].bits.iter().zip(&sl[j].bits).filter(|(a, b)| **a && **b).count();
            let expect = 2.0 * inter as f64 / (sl[i].count() + sl[j].count()) as f64;
            assert!((s.get(i, j) - expect).abs() < 1e-15);
        }
    }
}

/// Slices in `k` groups: each group owns a band of columns plus one column
/// shared by all groups, members flip a few bits.
fn clustered_slices(k: usize, per: &[usize], seed: u64) -> Vec<BitSlice> {
    let (nx, nz) = (5 * k + 1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, &m) in per.iter().enumerate() {
        for _ in 0..m {
            let mut b = vec![false; nx * nz];
            for z in 0..nz {
                for x in (5 * c..5 * c + 5).chain([nx - 1]) {
                    b[x + nx * z] = true;
                }
            }
            for _ in 0..rng.random_range(1..6) {
                let i = rng.random_range(0..nx * nz);
                b[i] = !b[i];
            }
            out.push(BitSlice { nx, nz, bits: b });
        }
    }
    out
}

/// Exhaustive k-medoids: the exemplar set minimizing total distance.
fn brute_force_medoids(s: &AffinityMatrix, k: usize) -> Vec<usize> {
    let n = s.len();
    let mut best = (f64::INFINITY, vec![]);
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let cost: f64 = (0..n).map(|i| combo.iter().map(|m| s.distance(i, *m)).fold(f64::INFINITY, f64::min)).sum();
        if cost < best.0 - 1e-12 {
            best = (cost, combo.clone());
        }
        let mut p = k;
        while p > 0 && combo[p - 1] == n - k + p - 1 {
            p -= 1;
        }
        if p == 0 {
            return best.1;
        }
        combo[p - 1] += 1;
        for q in p..k {
            combo[q] = combo[q - 1] + 1;
        }
    }
}

fn check_against_medoids(k: usize, per: &[usize], seed: u64) {
    let s = AffinityMatrix::from_slices(&clustered_slices(k, per, seed)).unwrap();
    let ap = affinity_propagation(&s, &ApParams::default()).unwrap();
    assert!(ap.converged);
    assert_eq!(ap.exemplars.len(), k, "seed {seed}");
    assert_eq!(ap.exemplars, brute_force_medoids(&s, k), "seed {seed}");
    for (c, &e) in ap.exemplars.iter().enumerate() {
        assert_eq!(ap.assignment[e], c);
    }
}

#[test]
fn two_clusters_match_exhaustive_medoids() {
    for seed in 0..20 {
        check_against_medoids(2, &[3, 3], seed);
        check_against_medoids(2, &[5, 6], seed);
    }
}

#[test]
fn three_clusters_match_exhaustive_medoids() {
    for seed in 0..20 {
        check_against_medoids(3, &[4, 4, 4], seed);
        check_against_medoids(3, &[3, 5, 4], seed);
    }
}

#[test]
fn single_sample_is_its_own_exemplar() {
    let s = AffinityMatrix::new(1, vec![1.0]).unwrap();
    let ap = affinity_propagation(&s, &ApParams::default()).unwrap();
    assert_eq!((ap.exemplars, ap.assignment), (vec![0], vec![0]));
}

#[test]
fn bad_damping_is_rejected() {
    let s = AffinityMatrix::new(1, vec![1.0]).unwrap();
    for damping in [0.4, 1.0] {
        assert!(affinity_propagation(&s, &ApParams { damping, ..Default::default() }).is_err());
    }
}

fn from_distances(n: usize, d: &[(usize, usize, f64)], default: f64) -> AffinityMatrix {
    let mut v = vec![1.0 - default; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for &(i, j, x) in d {
        v[i * n + j] = 1.0 - x;
        v[j * n + i] = 1.0 - x;
    }
    AffinityMatrix::new(n, v).unwrap()
}

fn three_by_three() -> ExemplarSet {
    ExemplarSet { exemplars: vec![0, 3, 6], assignment: vec![0, 0, 0, 1, 1, 1, 2, 2, 2], converged: true, iterations: 0 }
}

#[test]
fn rank_k_follows_hand_trace() {
    let s = from_distances(
        9,
        &[
            (0, 1, 0.10),
            (0, 2, 0.30),
            (1, 2, 0.25),
            (3, 4, 0.02),
            (3, 5, 0.04),
            (4, 5, 0.03),
            (6, 7, 0.20),
            (6, 8, 0.08),
            (7, 8, 0.15),
        ],
        0.9,
    );
    let sel = rank_k_exemplars(&s, &three_by_three(), 0.05);
    let got: Vec<_> = sel.iter().map(|x| (x.id, x.cluster, x.rank)).collect();
    assert_eq!(got, vec![(0, 0, 1), (3, 1, 1), (6, 2, 1), (2, 0, 2), (7, 2, 2), (1, 0, 3), (8, 2, 3)]);
}

#[test]
fn rank_k_stopping_rules() {
    let close = from_distances(9, &[], 0.0);
    let near = from_distances(9, &[(0, 1, 0.01), (0, 2, 0.01), (3, 4, 0.02), (6, 8, 0.04)], 0.01);
    for s in [close, near] {
        let sel = rank_k_exemplars(&s, &three_by_three(), 0.05);
        assert_eq!(sel.iter().map(|x| x.id).collect::<Vec<_>>(), vec![0, 3, 6]);
    }
    let pair = from_distances(2, &[(0, 1, 0.8)], 0.8);
    let one = ExemplarSet { exemplars: vec![0], assignment: vec![0, 0], converged: true, iterations: 0 };
    let sel = rank_k_exemplars(&pair, &one, 0.05);
    assert_eq!(sel[1], Selection { id: 1, cluster: 0, rank: 2 });
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[test]
fn mds_examples() {
    let two = classical_mds(&AffinityMatrix::new(2, vec![1.0, 0.4, 0.4, 1.0]).unwrap());
    assert!((dist(two[0], two[1]) - 0.6).abs() < 1e-9);

    let tri = classical_mds(&from_distances(3, &[], 0.5));
    let d = [dist(tri[0], tri[1]), dist(tri[1], tri[2]), dist(tri[0], tri[2])];
    assert!(d.iter().all(|x| (x - 0.5).abs() < 1e-9), "{d:?}");

    let dup = classical_mds(&from_distances(3, &[(0, 1, 0.0), (0, 2, 0.7), (1, 2, 0.7)], 0.7));
    assert!(dist(dup[0], dup[1]) < 1e-9);
    assert!((dist(dup[0], dup[2]) - 0.7).abs() < 1e-9);
}

fn field(d: GridDims, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField::new(d, (0..d.len()).map(|_| rng.random()).collect()).unwrap()
}

fn record(id: &str, geometry: ScalarField, label: Option<ScalarField>) -> SampleRecord {
    SampleRecord {
        id: id.into(),
        geometry,
        provenance: Provenance {
            problem: "thermal_symmetric".into(),
            load: LoadCase::ThermalSymmetric { source_gradient: 0.0 },
            vtarget: 0.3,
            seed: 0,
            rotated: false,
        },
        label,
    }
}

#[test]
fn rotation_augmentation() {
    let d = GridDims::new(4, 3, 2, 1.0).unwrap();
    let s = vec![record("a", field(d, 1), Some(field(d, 2))), record("b", field(d, 3), None)];
    let aug = augment_rotate180(&s);
    assert_eq!(aug.len(), 4);
    assert_eq!(aug[2].id, "a-r180");
    assert!(aug[2].provenance.rotated);
    let back = augment_rotate180(&aug[2..]);
    assert_eq!(back[2].geometry, s[0].geometry);
    assert_eq!(back[2].label, s[0].label);

    // Invariant under the rotation: value depends on distance from the z axis only.
    let mut sym = ScalarField::constant(d, 0.0);
    for k in 0..2 {
        for j in 0..3 {
            for i in 0..4 {
                let r = (i as f64 - 1.5).powi(2) + (j as f64 - 1.0).powi(2);
                sym.set(i, j, k, r + k as f64);
            }
        }
    }
    let aug = augment_rotate180(&[record("s", sym.clone(), None)]);
    assert_eq!(aug[1].geometry, sym);
}

#[test]
fn split_is_seeded_and_partitions() {
    let (tr, te) = split_indices(20, 0.2, 9).unwrap();
    assert_eq!((tr.len(), te.len()), (16, 4));
    assert_eq!(split_indices(20, 0.2, 9).unwrap(), (tr.clone(), te.clone()));
    let mut all: Vec<_> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    assert_ne!(split_indices(20, 0.2, 10).unwrap().1, te);
    assert_eq!(split_indices(2, 0.01, 0).unwrap().1.len(), 1);
}

#[test]
fn dataset_split_keeps_rotated_twins_together() {
    let d = GridDims::new(2, 2, 2, 1.0).unwrap();
    let s: Vec<SampleRecord> = (0..20).map(|i| record(&format!("s{i}"), field(d, i), Some(field(d, 100 + i)))).collect();
    let split = split_dataset(&s, 0.2, 0.25, 3, true).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (24, 8, 8));
    let base = |r: &SampleRecord| r.id.trim_end_matches("-r180").to_string();
    let parts = [&split.train, &split.val, &split.test];
    for (a, p) in parts.iter().enumerate() {
        for r in p.iter() {
            for q in parts.iter().skip(a + 1) {
                assert!(q.iter().all(|o| base(o) != base(r)), "{} leaks", r.id);
            }
        }
        let n = p.len() / 2;
        for (orig, rot) in p[..n].iter().zip(&p[n..]) {
            assert_eq!(format!("{}-r180", orig.id), rot.id);
        }
    }
    let again = split_dataset(&s, 0.2, 0.25, 3, true).unwrap();
    assert_eq!(again.val.iter().map(|r| &r.id).collect::<Vec<_>>(), split.val.iter().map(|r| &r.id).collect::<Vec<_>>());
    let plain = split_dataset(&s, 0.2, 0.25, 3, false).unwrap();
    assert_eq!(plain.train.len(), 12);
}

fn coupon_geometry(nx: usize, ny: usize, nz: usize) -> ScalarField {
    CouponSpec::default().with_dims(nx, ny, nz, 12.0 / nx as f64).no_go_density().unwrap()
}

#[test]
fn evaluation_at_training_resolution_is_the_direct_simulation() {
    let g = coupon_geometry(8, 4, 10);
    let (mat, build, solver) = (MaterialSpec::default(), BuildSpec::default(), SolverOpts::default());
    let label = evaluate_sample(&g, g.dims, g.dims, &mat, &build, &solver).unwrap();
    let direct = crack_field_from_build(&simulate_build(&g, &mat, &build, &solver).unwrap(), &mat).mssi;
    assert_eq!(label, direct);
    assert!(label.max() > 0.0);
}

#[test]
fn zero_inherent_strain_gives_zero_label() {
    let g = coupon_geometry(8, 4, 10);
    let build = BuildSpec { inherent: InherentStrain::zero(), ..Default::default() };
    let low = half_dims(g.dims).unwrap();
    let label = evaluate_sample(&g, low, g.dims, &MaterialSpec::default(), &build, &SolverOpts::default()).unwrap();
    assert_eq!(label.dims, g.dims);
    assert!(label.values.iter().all(|v| *v == 0.0));
}

#[test]
fn low_grid_must_not_be_finer() {
    let g = coupon_geometry(8, 4, 10);
    let fine = GridDims::new(16, 4, 10, 0.75).unwrap();
    let r = evaluate_sample(&g, fine, g.dims, &MaterialSpec::default(), &BuildSpec::default(), &SolverOpts::default());
    assert!(r.is_err());
}

#[test]
fn half_dims_span_the_same_width() {
    let d = GridDims::new(16, 8, 24, 0.75).unwrap();
    let h = half_dims(d).unwrap();
    assert_eq!((h.nx, h.ny, h.nz), (8, 4, 12));
    assert!((h.h - 1.5).abs() < 1e-15);
}

fn tiny_config(problems: Vec<LoadCase>, vtargets: Vec<f64>, seeds: Vec<u64>) -> VariantConfig {
    VariantConfig {
        coupon: CouponSpec::default().with_dims(8, 4, 10, 1.5),
        material: MaterialSpec::default(),
        problems,
        vtargets,
        seeds,
        max_iters: 5,
        init_noise: 0.05,
        vary_loads: true,
    }
}

#[test]
fn variant_grid_counts_and_ids() {
    let (s, f) = generate_variants(&tiny_config(vec![LoadCase::ThermalSymmetric { source_gradient: 0.0 }], vec![0.3], vec![1]));
    assert_eq!((s.len(), f.len()), (1, 0));
    assert_eq!(s[0].geometry.dims.nx, 8);

    let problems = vec![
        LoadCase::ThermalSymmetric { source_gradient: 0.0 },
        LoadCase::ThermalAsymmetric { source_gradient: 0.0 },
    ];
    let (s, f) = generate_variants(&tiny_config(problems, vec![0.3, 0.5], vec![1, 2, 3]));
    assert_eq!(s.len() + f.len(), 12);
    let mut ids: Vec<_> = s.iter().map(|x| x.id.clone()).collect();
    ids.dedup();
    assert_eq!(ids.len(), s.len());
}

#[test]
fn failed_runs_are_reported_not_fatal() {
    let cfg = tiny_config(vec![LoadCase::ThermalSymmetric { source_gradient: 0.0 }], vec![0.3, 1.5], vec![1]);
    let (s, f) = generate_variants(&cfg);
    assert_eq!((s.len(), f.len()), (1, 1));
    assert!(f[0].id.contains("v1.50"));
}

#[test]
fn load_variation_is_seeded() {
    let base = LoadCase::FourSegment { pressures: [1.0; 4], precut_half_diag: 0.15 };
    assert_eq!(vary_load(base, 3), vary_load(base, 3));
    assert_ne!(vary_load(base, 3), vary_load(base, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn affinity_invariants_and_selection_spacing(seed in 0u64..10_000, n in 1usize..14, p in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sl: Vec<_> = (0..n).map(|_| random_slice(&mut rng, 6, 5, p)).collect();
        let s = AffinityMatrix::from_slices(&sl).unwrap();
        for i in 0..n {
            prop_assert_eq!(s.get(i, i), 1.0);
            for j in 0..n {
                prop_assert_eq!(s.get(i, j), s.get(j, i));
                prop_assert!((0.0..=1.0).contains(&s.get(i, j)));
            }
        }
        let ap = affinity_propagation(&s, &ApParams::default()).unwrap();
        prop_assert!(!ap.exemplars.is_empty());
        prop_assert!(ap.exemplars.iter().all(|e| *e < n));
        prop_assert_eq!(ap.assignment.len(), n);
        let sel = rank_k_exemplars(&s, &ap, 0.05);
        for (a, x) in sel.iter().enumerate().filter(|(_, x)| x.rank > 1) {
            for y in &sel[..a] {
                prop_assert!(s.distance(x.id, y.id) >= 0.05);
            }
        }
        let mut ids: Vec<_> = sel.iter().map(|x| x.id).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), sel.len());
    }
}

