use pato_core::filters::{
    extrusion_backward, extrusion_project, symmetry_backward, symmetry_project, AmFilter, AmFilterParams,
    DensityFilter, FilterChain, FilterPipeline,
};
use pato_core::grid::{GridDims, Region, RegionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst component error of `analytic` against central differences of
/// `f` at `x`, relative to the largest analytic component.
fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        worst = worst.max(((fp - fm) / (2.0 * step) - analytic[i]).abs());
    }
    worst / scale
}

#[test]
fn density_filter_spike_matches_direct_weights() {
    let d = GridDims::new(5, 4, 6, 0.5).unwrap();
    let r = 1.1;
    let f = DensityFilter::new(d, r, false).unwrap();
    let spike = d.index(2, 1, 3);
    let mut x = vec![0.0; d.len()];
    x[spike] = 1.0;
    let y = f.forward(&x);
    let pos = |e: usize| {
        let (i, j, k) = d.coords(e);
        [i as f64 * d.h, j as f64 * d.h, k as f64 * d.h]
    };
    let w = |a: usize, b: usize| {
        let (p, q) = (pos(a), pos(b));
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        (r - dist).max(0.0)
    };
    for e in 0..d.len() {
        let total: f64 = (0..d.len()).map(|b| w(e, b)).sum();
        assert!((y[e] - w(e, spike) / total).abs() < 1e-15);
    }
}

#[test]
fn density_filter_adjoint_identity() {
    let d = GridDims::new(6, 5, 4, 1.0).unwrap();
    for (s, reflect) in (0..6).zip([false, true].into_iter().cycle()) {
        let f = DensityFilter::new(d, 2.3, reflect).unwrap();
        let x = random(d.len(), s, -1.0, 1.0);
        let y = random(d.len(), 100 + s, -1.0, 1.0);
        let lhs = dot(&f.forward(&x), &y);
        let rhs = dot(&x, &f.backward(&y));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

/// Exact min/max recursion on the same stencil.
fn exact_printed(d: GridDims, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    for k in 1..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                let mut m = p[d.index(i, j, k - 1)];
                for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a >= 0 && b >= 0 && (a as usize) < d.nx && (b as usize) < d.ny {
                        m = m.max(p[d.index(a as usize, b as usize, k - 1)]);
                    }
                }
                let e = d.index(i, j, k);
                p[e] = x[e].min(m);
            }
        }
    }
    p
}

#[test]
fn am_filter_keeps_dense_domain() {
    let d = GridDims::new(5, 4, 6, 1.0).unwrap();
    let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
    let t = f.forward(&vec![1.0; d.len()]);
    assert!(t.printed().iter().all(|v| (v - 1.0).abs() <= 1e-3 && *v <= 1.0));
}

#[test]
fn am_filter_removes_floating_voxel() {
    let d = GridDims::new(5, 5, 5, 1.0).unwrap();
    let mut x = vec![0.0; d.len()];
    x[d.index(2, 2, 3)] = 1.0;
    let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
    let t = f.forward(&x);
    assert!(t.printed()[d.index(2, 2, 3)] <= 1e-3);
}

#[test]
fn am_filter_preserves_45_degree_staircase() {
    let d = GridDims::new(6, 6, 6, 1.0).unwrap();
    let mut x = vec![0.0; d.len()];
    // A wall leaning one voxel per layer, plus an overhang that should vanish.
    for k in 0..6 {
        for j in 0..6 {
            x[d.index(k.min(5), j, k)] = 1.0;
        }
    }
    x[d.index(0, 2, 5)] = 1.0;
    let exact = exact_printed(d, &x);
    let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
    let t = f.forward(&x);
    for (a, b) in t.printed().iter().zip(&exact) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
    assert!(exact[d.index(0, 2, 5)] == 0.0);
}

#[test]
fn am_filter_backward_matches_fd() {
    let d = GridDims::new(6, 6, 6, 1.0).unwrap();
    let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
    for s in 0..3 {
        let x = random(d.len(), s, 0.05, 0.95);
        let c = random(d.len(), 50 + s, -1.0, 1.0);
        let loss = |x: &[f64]| dot(f.forward(x).printed(), &c);
        let g = f.backward(&f.forward(&x), &c);
        let err = fd_error(loss, &x, &g, 1e-6);
        assert!(err <= 1e-6, "seed {s}: {err}");
    }
}

#[test]
fn am_filter_is_monotone_and_bounded() {
    let d = GridDims::new(6, 5, 6, 1.0).unwrap();
    let f = AmFilter::new(d, AmFilterParams::default(), None, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in 0..20 {
        let x = random(d.len(), 200 + s, 0.0, 1.0);
        let mut y = x.clone();
        for v in y.iter_mut() {
            if rng.random_bool(0.3) {
                *v = (*v + rng.random_range(0.0..0.5)).min(1.0);
            }
        }
        let (px, py) = (f.forward(&x), f.forward(&y));
        for (a, b) in px.printed().iter().zip(py.printed()) {
            assert!(*b >= *a - 1e-15);
            assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn passive_voxels_print_as_tagged_and_support() {
    let d = GridDims::new(3, 1, 3, 1.0).unwrap();
    let mut tags = vec![Region::Design; d.len()];
    for i in 0..3 {
        tags[d.index(i, 0, 1)] = Region::PassiveSolid;
    }
    tags[d.index(1, 0, 0)] = Region::PassiveVoid;
    let mask = RegionMask::new(d, tags).unwrap();
    let f = AmFilter::new(d, AmFilterParams::default(), Some(&mask), false).unwrap();
    let t = f.forward(&vec![0.0; d.len()].iter().enumerate().map(|(e, _)| if e == d.index(1, 0, 2) { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    assert_eq!(t.printed()[d.index(0, 0, 1)], 1.0);
    assert_eq!(t.printed()[d.index(1, 0, 0)], 0.0);
    assert!(t.printed()[d.index(1, 0, 2)] > 0.999);
}

#[test]
fn symmetry_projection_rules() {
    let d = GridDims::new(4, 2, 3, 1.0).unwrap();
    let x = random(d.len(), 1, 0.0, 1.0);
    let s = symmetry_project(d, &x);
    assert_eq!(symmetry_project(d, &s), s);
    let mut spike = vec![0.0; d.len()];
    spike[d.index(0, 1, 2)] = 0.8;
    let s = symmetry_project(d, &spike);
    assert_eq!(s[d.index(0, 1, 2)], 0.4);
    assert_eq!(s[d.index(3, 1, 2)], 0.4);
    assert_eq!(s.iter().filter(|v| **v != 0.0).count(), 2);
    let y = random(d.len(), 2, -1.0, 1.0);
    let g = symmetry_backward(d, &y);
    assert!(fd_error(|v| dot(&symmetry_project(d, v), &y), &x, &g, 0.5) <= 1e-12);
}

#[test]
fn extrusion_projection_rules() {
    let d = GridDims::new(3, 4, 2, 1.0).unwrap();
    let x = random(d.len(), 3, 0.0, 1.0);
    let e = extrusion_project(d, &x);
    assert_eq!(extrusion_project(d, &e), e);
    let mut spike = vec![0.0; d.len()];
    spike[d.index(1, 2, 1)] = 0.8;
    let e = extrusion_project(d, &spike);
    for j in 0..4 {
        assert!((e[d.index(1, j, 1)] - 0.2).abs() < 1e-16);
    }
    let y = random(d.len(), 4, -1.0, 1.0);
    let g = extrusion_backward(d, &y);
    assert!(fd_error(|v| dot(&extrusion_project(d, v), &y), &x, &g, 0.5) <= 1e-12);
}

#[test]
fn density_backward_matches_fd() {
    let d = GridDims::new(6, 6, 6, 1.0).unwrap();
    let x = random(d.len(), 5, 0.0, 1.0);
    let c = random(d.len(), 6, -1.0, 1.0);
    for reflect in [false, true] {
        let f = DensityFilter::new(d, 1.8, reflect).unwrap();
        let g = f.backward(&c);
        // The map is linear, so a wide step carries no truncation error.
        assert!(fd_error(|v| dot(&f.forward(v), &c), &x, &g, 0.5) <= 1e-12);
    }
}

#[test]
fn full_chain_backward_matches_fd_and_stays_in_unit_interval() {
    let d = GridDims::new(6, 4, 6, 1.0).unwrap();
    let mut tags = vec![Region::Design; d.len()];
    for i in 0..6 {
        for j in 0..4 {
            tags[d.index(i, j, 5)] = Region::PassiveSolid;
        }
    }
    for j in 0..4 {
        tags[d.index(2, j, 0)] = Region::PassiveVoid;
        tags[d.index(3, j, 0)] = Region::PassiveVoid;
    }
    let mask = RegionMask::new(d, tags).unwrap();
    let chain = FilterChain::standard(1.5, true, true);
    let pipe = FilterPipeline::new(&mask, &chain).unwrap();
    let n = pipe.space().n_vars();
    let x = random(n, 7, 0.05, 0.95);
    let c = random(d.len(), 8, -1.0, 1.0);
    let tape = pipe.forward(&x);
    assert!(tape.rho.iter().all(|v| (0.0..=1.0).contains(v)));
    for e in 0..d.len() {
        if let Some(v) = mask.passive_value(e) {
            assert_eq!(tape.rho[e], v);
        }
    }
    let g = pipe.backward(&tape, &c);
    let err = fd_error(|v| dot(&pipe.forward(v).rho, &c), &x, &g, 1e-6);
    assert!(err <= 1e-6, "{err}");
    // Exact mirror symmetry and extrusion of the physical field.
    for k in 0..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                assert_eq!(tape.rho[d.index(i, j, k)].to_bits(), tape.rho[d.index(d.nx - 1 - i, 0, k)].to_bits());
            }
        }
    }
}
