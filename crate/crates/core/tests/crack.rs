use nalgebra::{Matrix3, Rotation3, Vector3};
use pato_core::buildsim::BuildResult;
use pato_core::crack::{crack_field_from_build, crack_indices, principal_values, triaxiality, PointState, Sym3};
use pato_core::fea::MaterialSpec;
use pato_core::grid::{GridDims, SymTensorField};
use proptest::prelude::*;

/// Roots of det(t - x I) by bisection on the characteristic cubic,
/// bracketed between Gershgorin bounds and the cubic's stationary points.
fn cubic_roots(t: &Sym3) -> [f64; 3] {
    let (a, b, c, d, e, f) = (t[0], t[1], t[2], t[3], t[4], t[5]);
    let i1 = a + b + c;
    let i2 = a * b + b * c + c * a - d * d - e * e - f * f;
    let i3 = a * b * c + 2.0 * d * e * f - a * e * e - b * f * f - c * d * d;
    let p = |x: f64| x * x * x - i1 * x * x + i2 * x - i3;
    let bound = 1.0 + [a.abs() + d.abs() + f.abs(), b.abs() + d.abs() + e.abs(), c.abs() + e.abs() + f.abs()]
        .into_iter()
        .fold(0.0, f64::max);
    // Stationary points of p split the real line into monotone pieces.
    let disc = (i1 * i1 - 3.0 * i2).max(0.0).sqrt();
    let s_lo = (i1 - disc) / 3.0;
    let s_hi = (i1 + disc) / 3.0;
    let solve = |mut lo: f64, mut hi: f64| {
        let rising = p(hi) >= p(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (p(mid) >= 0.0) == rising {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    [solve(s_hi, bound), solve(s_lo, s_hi), solve(-bound, s_lo)]
}

fn sym_strategy(scale: f64) -> impl Strategy<Value = Sym3> {
    proptest::array::uniform6(-scale..scale)
}

fn to_matrix(t: &Sym3) -> Matrix3<f64> {
    Matrix3::new(t[0], t[3], t[5], t[3], t[1], t[4], t[5], t[4], t[2])
}

fn from_matrix(m: &Matrix3<f64>) -> Sym3 {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(1, 2)], m[(0, 2)]]
}

proptest! {
    #[test]
    fn principal_values_match_cubic_roots(t in sym_strategy(10.0)) {
        let v = principal_values(&t);
        let r = cubic_roots(&t);
        prop_assert!(v[0] >= v[1] && v[1] >= v[2]);
        for c in 0..3 {
            prop_assert!((v[c] - r[c]).abs() < 1e-9, "{:?} vs {:?}", v, r);
        }
    }

    #[test]
    fn mssi_is_rotation_invariant(
        s in sym_strategy(500.0),
        e in sym_strategy(0.01),
        axis in proptest::array::uniform3(-1.0f64..1.0),
        angle in -3.0f64..3.0,
    ) {
        prop_assume!(Vector3::from(axis).norm() > 1e-3);
        let mat = MaterialSpec::default();
        let q = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle);
        let rot = |t: &Sym3| from_matrix(&(q.matrix() * to_matrix(t) * q.matrix().transpose()));
        let a = crack_indices(&PointState { sigma: s, eps: e }, &mat);
        let b = crack_indices(&PointState { sigma: rot(&s), eps: rot(&e) }, &mat);
        prop_assert!((a.mssi - b.mssi).abs() <= 1e-9 * a.mssi.abs().max(1e-12));
    }

    #[test]
    fn mssi_scales_with_strain(s in sym_strategy(500.0), e in sym_strategy(0.01), c in 0.1f64..10.0) {
        let mat = MaterialSpec::default();
        let a = crack_indices(&PointState { sigma: s, eps: e }, &mat);
        let scaled = e.map(|v| c * v);
        let b = crack_indices(&PointState { sigma: s, eps: scaled }, &mat);
        prop_assert!((b.mssi - c * a.mssi).abs() <= 1e-10 * (c * a.mssi).abs().max(1e-15));
    }

    #[test]
    fn indices_vanish_without_triaxiality(e in sym_strategy(0.01), shear in proptest::array::uniform3(-300.0f64..300.0)) {
        // Zero trace means zero mean stress.
        let sigma = [0.0, 0.0, 0.0, shear[0], shear[1], shear[2]];
        let mat = MaterialSpec::default();
        prop_assert_eq!(triaxiality(&sigma, 1e-9), 0.0);
        let idx = crack_indices(&PointState { sigma, eps: e }, &mat);
        prop_assert_eq!((idx.sfi, idx.mssi, idx.tsi), (0.0, 0.0, 0.0));
    }
}

#[test]
fn zero_state_gives_zero_indices() {
    let idx = crack_indices(&PointState { sigma: [0.0; 6], eps: [0.0; 6] }, &MaterialSpec::default());
    assert_eq!((idx.sfi, idx.mssi, idx.tsi), (0.0, 0.0, 0.0));
}

#[test]
fn isotropic_strain_gives_zero_mssi() {
    let state = PointState { sigma: [300.0, 10.0, -50.0, 0.0, 0.0, 0.0], eps: [0.002, 0.002, 0.002, 0.0, 0.0, 0.0] };
    assert_eq!(crack_indices(&state, &MaterialSpec::default()).mssi, 0.0);
}

fn single_voxel(sigma: Sym3, eps: Sym3, active: bool) -> BuildResult {
    let dims = GridDims::new(1, 1, 1, 1.0).unwrap();
    let mut stress = SymTensorField::zeros(dims);
    let mut strain = SymTensorField::zeros(dims);
    stress.data[0] = sigma;
    strain.data[0] = eps;
    BuildResult { stress, strain, displacement: vec![0.0; 24], active: vec![active], birth: vec![Some(0)] }
}

#[test]
fn field_matches_point_oracle() {
    let mat = MaterialSpec::default();
    let s = 450.0;
    let sigma = [s, 0.0, 0.0, 0.0, 0.0, 0.0];
    let eps = [s / mat.e0, -mat.nu * s / mat.e0, -mat.nu * s / mat.e0, 0.0, 0.0, 0.0];
    let f = crack_field_from_build(&single_voxel(sigma, eps, true), &mat);
    let expected = (1.0 + mat.nu) * s / (3.0 * mat.e0 * mat.eps_uts);
    assert!((f.mssi.values[0] - expected).abs() < 1e-15);
    assert_eq!(f.max_principal_stress.values[0], s);
    assert!((f.von_mises.values[0] - s).abs() < 1e-12);
    assert!((f.tau.values[0] - 1.0 / 3.0).abs() < 1e-15);

    let zero = crack_field_from_build(&single_voxel([0.0; 6], [0.0; 6], true), &mat);
    assert!(zero.named().iter().all(|(_, f)| f.values[0] == 0.0));
    let void = crack_field_from_build(&single_voxel(sigma, eps, false), &mat);
    assert!(void.named().iter().all(|(_, f)| f.values[0] == 0.0));
}
