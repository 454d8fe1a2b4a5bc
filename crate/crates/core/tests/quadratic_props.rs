use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rgm_core::data::{gen_orthogonal, GeneratorKind, GeneratorSpec};
use rgm_core::mechanisms::SeededRng;
use rgm_core::quadratic::{
    build_quadratic, certify_relative_sensitivity, delta_plus, feature_clip, greedy_margin, ptr_test,
    relative_term, CertifyParams, ClipMode, ClipShape, DeltaPlus,
};
use rgm_core::{Error, FeatureDataset};

fn dataset(d: usize, n: usize, scale: f64, seed: u64) -> FeatureDataset {
    let mut rng = SeededRng::new(seed, 0);
    let x = DMatrix::from_fn(d, n, |_, _| scale * rng.standard_normal());
    let y = DVector::from_fn(n, |_, _| rng.standard_normal());
    FeatureDataset::new(x, y).unwrap()
}

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeededRng::new(seed, 1);
    let l = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    let m = &l * l.transpose() + DMatrix::identity(d, d) * 0.5;
    (&m + m.transpose()) * 0.5
}

fn mode_of(q: bool) -> ClipMode {
    if q {
        ClipMode::Quartic
    } else {
        ClipMode::Ellipsoid
    }
}

proptest! {
    #[test]
    fn clipping_lands_inside_and_is_idempotent(
        d in 1usize..6, n in 1usize..30, lscale in -1.0f64..1.5, r_c in 0.1f64..5.0,
        quartic: bool, seed: u64,
    ) {
        let data = dataset(d, n, 10f64.powf(lscale), seed);
        let shape = ClipShape::new(spd(d, seed), r_c).unwrap();
        let mode = mode_of(quartic);
        let once = feature_clip(&data, &shape, mode).unwrap();
        let twice = feature_clip(&once, &shape, mode).unwrap();
        for j in 0..n {
            let before = data.column(j);
            let after = once.column(j);
            prop_assert!(shape.score(&after, mode) <= r_c * (1.0 + 1e-12));
            // direction kept, never stretched
            prop_assert!(after.norm() <= before.norm() * (1.0 + 1e-12));
            prop_assert!((after.dot(&before) - after.norm() * before.norm()).abs() <= 1e-9 * before.norm_squared().max(1e-300));
            if shape.score(&before, mode) <= r_c {
                prop_assert_eq!(&after, &before);
            }
            prop_assert!((twice.column(j) - &after).amax() <= 1e-9 * after.amax().max(1.0));
        }
        prop_assert_eq!(&once.y, &data.y);
    }

    #[test]
    fn margin_shrinks_as_rho_grows(d in 1usize..5, n in 5usize..60, r1 in 0.01f64..0.5, r2 in 0.01f64..0.5, seed: u64) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let shape = ClipShape::identity(d, 2.0).unwrap();
        let data = feature_clip(&dataset(d, n, 1.0, seed), &shape, ClipMode::Quartic).unwrap();
        let model = build_quadratic(&data, 0.0).unwrap();
        let at_lo = delta_plus(&data, &model, &shape, lo).unwrap();
        let at_hi = delta_plus(&data, &model, &shape, hi).unwrap();
        prop_assert!(at_hi.as_f64() <= at_lo.as_f64(), "{} at {} vs {} at {}", at_hi, hi, at_lo, lo);
    }

    #[test]
    fn greedy_equals_subset_search(scores in prop::collection::vec(0.0f64..4.0, 1..11), n in 1usize..12) {
        let m = scores.len();
        let mut best = None;
        for mask in 1u32..(1 << m) {
            let sum: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| scores[i]).sum();
            if sum >= n as f64 * (1.0 - 1e-12) {
                let k = mask.count_ones() as usize;
                best = Some(best.map_or(k, |b: usize| b.min(k)));
            }
        }
        let want = best.map_or(DeltaPlus::Infinite, DeltaPlus::Finite);
        prop_assert_eq!(greedy_margin(&scores, n), want);
    }

    #[test]
    fn orthogonal_half_bounds_relative_term(
        d in 1usize..7, copies in 1usize..6, extra_scale in 0.0f64..3.0, seed: u64,
    ) {
        // half the records fixed orthogonal, the other half arbitrary
        let spec = GeneratorSpec { kind: GeneratorKind::Orthogonal { d, n: d * copies, scales: vec![] }, seed };
        let ortho = gen_orthogonal(&spec).unwrap();
        let other = dataset(d, d * copies, extra_scale, seed ^ 0x55);
        let mut x = DMatrix::zeros(d, 2 * d * copies);
        x.columns_mut(0, d * copies).copy_from(&ortho.x);
        x.columns_mut(d * copies, d * copies).copy_from(&other.x);
        let model = build_quadratic(&FeatureDataset::new(x, DVector::zeros(2 * d * copies)).unwrap(), 0.0).unwrap();
        let mut rng = SeededRng::new(seed, 9);
        let x0 = DVector::from_fn(d, |_, _| rng.standard_normal()).normalize();
        let term = relative_term(&x0, &model.a).unwrap();
        let bound = (2.0 * d as f64).powi(2);
        prop_assert!(term <= bound * (1.0 + 1e-9), "{} > {}", term, bound);
    }

    #[test]
    fn relative_term_scale_free(d in 1usize..6, lscale in -3.0f64..3.0, seed: u64) {
        let s = 10f64.powf(lscale);
        let data = dataset(d, 4 * d, 1.0, seed);
        let x0 = data.column(0);
        let a = build_quadratic(&data, 0.0).unwrap().a;
        let base = relative_term(&x0, &a).unwrap();
        let scaled = relative_term(&(x0 * s), &(a * (s * s))).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-8 * base);
    }
}

#[test]
fn orthogonal_exact_relative_term() {
    // equal proportions: each direction holds n/d records, so A = I/d
    for d in [2usize, 4, 8] {
        let spec = GeneratorSpec {
            kind: GeneratorKind::Orthogonal { d, n: 8 * d, scales: vec![] },
            seed: 3,
        };
        let model = build_quadratic(&gen_orthogonal(&spec).unwrap(), 0.0).unwrap();
        for k in 0..d {
            let term = relative_term(&DVector::from_fn(d, |i, _| (i == k) as u8 as f64), &model.a).unwrap();
            assert!((term - (d * d) as f64).abs() < 1e-9 * (d * d) as f64);
        }
    }
}

#[test]
fn finite_difference_gradient() {
    let data = dataset(4, 25, 1.3, 17);
    let model = build_quadratic(&data, 0.07).unwrap();
    let theta = DVector::from_vec(vec![0.3, -1.2, 0.8, 2.0]);
    let g = model.gradient(&theta);
    let h = 1e-5;
    for i in 0..4 {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (model.value(&up) - model.value(&dn)) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-7 * g.amax().max(1.0), "{i}: {fd} vs {}", g[i]);
    }
    // mean of per-record gradients plus the ridge term
    let mut mean = DVector::zeros(4);
    for j in 0..data.len() {
        mean += data.sample_gradient(j, &theta);
    }
    mean /= data.len() as f64;
    mean += &theta * 0.07;
    assert!((mean - g).amax() < 1e-12);
}

#[test]
fn ptr_acceptance_probability() {
    // P(k + Lap(1/eps) > t) = exp(-eps (t - k)) / 2 for k <= t
    let (eps, delta) = (1.0, 0.1);
    let t = -f64::ln(delta) / eps;
    let trials = 200_000;
    for k in [0usize, 1] {
        let mut rng = SeededRng::derived(5, "ptr-test", k as u64, 0);
        let hits = (0..trials)
            .filter(|_| ptr_test(DeltaPlus::Finite(k), eps, delta, &mut rng).unwrap().accepted)
            .count();
        let p = 0.5 * (-(eps * (t - k as f64))).exp();
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let got = hits as f64 / trials as f64;
        assert!((got - p).abs() < 4.0 * se, "k = {k}: {got} vs {p}");
    }
    let mut rng = SeededRng::new(0, 0);
    assert!(ptr_test(DeltaPlus::Infinite, eps, delta, &mut rng).unwrap().accepted);
}

#[test]
fn isolated_direction_is_rejected() {
    // one record alone spans the last coordinate; dropping it breaks the
    // curvature condition, so the margin is at most one
    let (d, n) = (3, 400);
    let mut data = dataset(d, n, 1.0, 23);
    for j in 0..n {
        data.x[(d - 1, j)] = if j == 0 { 1.0 } else { 0.0 };
    }
    let shape = ClipShape::identity(d, 3.0).unwrap();
    let clipped = feature_clip(&data, &shape, ClipMode::Quartic).unwrap();
    let model = build_quadratic(&clipped, 0.0).unwrap();
    let dp = delta_plus(&clipped, &model, &shape, 1e-4).unwrap();
    assert!(dp.as_f64() <= 1.0, "{dp}");

    let params = CertifyParams {
        shape,
        mode: ClipMode::Quartic,
        rho: 1e-4,
        mu_reg: 0.0,
        ptr_eps: 1.0,
        ptr_delta: 1e-6,
        kappa: None,
        b_clip: f64::INFINITY,
    };
    for seed in 0..20 {
        let out = certify_relative_sensitivity(&data, &params, &mut SeededRng::derived(seed, "ptr", 0, 0)).unwrap();
        assert!(!out.certificate.is_accepted());
        assert!(out.certificate.eta.is_none());
        assert!(matches!(out.certificate.sensitivity(), Err(Error::RejectedCertificate)));
    }
}

#[test]
fn delta_plus_json_forms() {
    assert_eq!(serde_json::to_string(&DeltaPlus::Infinite).unwrap(), "\"inf\"");
    assert_eq!(serde_json::from_str::<DeltaPlus>("12").unwrap(), DeltaPlus::Finite(12));
    assert!(serde_json::from_str::<DeltaPlus>("\"nan\"").is_err());
}
