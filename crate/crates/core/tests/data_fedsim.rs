use nalgebra::{DMatrix, DVector};
use rgm_core::data::{
    build_sigma, gen_gaussian, parse_libsvm, parse_libsvm_reader, write_libsvm, GeneratorKind, GeneratorSpec,
    SigmaSpec,
};
use rgm_core::fedsim::{
    pooled_model, prepare_nodes, run_federated, split_dataset, split_indices, Aggregation, EtaConstants, FedConfig,
    MethodSpec, Privatizer, SplitSpec, SplitStrategy,
};
use rgm_core::mechanisms::SeededRng;
use rgm_core::optim::{vanilla_gd, GdConfig, GradientNoise};
use rgm_core::quadratic::build_quadratic;
use rgm_core::{Error, FeatureDataset};

fn gaussian(d: usize, n: usize, sigma: SigmaSpec, noise: f64, seed: u64) -> FeatureDataset {
    gen_gaussian(&GeneratorSpec {
        kind: GeneratorKind::Gaussian {
            d,
            n,
            sigma,
            mean: None,
            theta_true: Some((0..d).map(|i| 1.0 - 0.5 * i as f64).collect()),
            label_noise: noise,
            binary_labels: false,
        },
        seed,
    })
    .unwrap()
}

#[test]
fn libsvm_file_round_trip() {
    let data = gaussian(5, 40, SigmaSpec::RandomSpd { condition_number: 30.0 }, 0.1, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.libsvm");
    write_libsvm(&data, std::fs::File::create(&path).unwrap()).unwrap();
    let back = parse_libsvm(&path).unwrap();
    assert_eq!(back.dim(), 5);
    assert!((&back.x - &data.x).amax() <= 1e-12 * data.x.amax());
    assert!((&back.y - &data.y).amax() <= 1e-12 * data.y.amax());
}

#[test]
fn libsvm_sparse_and_malformed() {
    let text = "# header\n1.5 1:2 4:-1\n\n-2 2:0.25 # trailing\n";
    let data = parse_libsvm_reader(text.as_bytes()).unwrap();
    assert_eq!((data.dim(), data.len()), (4, 2));
    assert_eq!(data.x[(3, 0)], -1.0);
    assert_eq!(data.x[(1, 1)], 0.25);
    assert_eq!(data.y.as_slice(), &[1.5, -2.0]);
    for (bad, line) in [("1 1:2\n1 3:1 2:1\n", 2), ("1 0:1\n", 1), ("x 1:1\n", 1), ("1 1:nan\n", 1), ("1 2\n", 1)] {
        match parse_libsvm_reader(bad.as_bytes()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{bad:?}"),
            other => panic!("{bad:?}: {other:?}"),
        }
    }
}

#[test]
fn gaussian_second_moments() {
    let d = 3;
    let spec = SigmaSpec::RandomSpd { condition_number: 10.0 };
    let n = 40_000;
    let data = gaussian(d, n, spec.clone(), 0.0, 13);
    // same seed, same stream: the covariance the generator drew
    let sigma = build_sigma(&spec, d, &mut SeededRng::derived(13, "gen", 0, 0)).unwrap();
    let emp = &data.x * data.x.transpose() / n as f64;
    for i in 0..d {
        for j in 0..d {
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((emp[(i, j)] - sigma[(i, j)]).abs() < 5.0 * se, "{i},{j}: {} vs {}", emp[(i, j)], sigma[(i, j)]);
        }
    }
    let mean = data.x.column_mean();
    for i in 0..d {
        assert!(mean[i].abs() < 5.0 * (sigma[(i, i)] / n as f64).sqrt());
    }
}

#[test]
fn noiseless_labels_recover_regression_vector() {
    let data = gaussian(4, 500, SigmaSpec::Diagonal { values: vec![1.0, 2.0, 0.5, 0.1] }, 0.0, 21);
    let theta = build_quadratic(&data, 0.0).unwrap().optimum().unwrap();
    let want = DVector::from_vec(vec![1.0, 0.5, 0.0, -0.5]);
    assert!((theta - want).amax() < 1e-6);
}

fn split(strategy: SplitStrategy, nodes: usize, b: f64) -> SplitSpec {
    SplitSpec {
        strategy,
        num_nodes: nodes,
        bias_b: b,
        samples_per_node: None,
        seed: 4,
    }
}

#[test]
fn splits_partition_records() {
    let data = gaussian(2, 101, SigmaSpec::Identity, 0.5, 3);
    let parts = split_indices(&data, &split(SplitStrategy::Random, 4, 0.0)).unwrap();
    let mut seen: Vec<usize> = parts.concat();
    assert!(parts.iter().all(|p| p.len() == 25));
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 100);

    let by_label = split_dataset(&data, &split(SplitStrategy::Label, 2, 0.0)).unwrap();
    assert!(by_label[0].y.iter().all(|&y| y > 0.0));
    assert!(by_label[1].y.iter().all(|&y| y <= 0.0));
    assert_eq!(by_label[0].len(), by_label[1].len());

    let plain = split_dataset(&data, &split(SplitStrategy::Random, 2, 0.0)).unwrap();
    let biased = split_dataset(&data, &split(SplitStrategy::Bias, 2, 1.5)).unwrap();
    assert_eq!(plain[0], biased[0]);
    assert_eq!(plain[1].x, biased[1].x);
    assert!((&biased[1].y - plain[1].y.add_scalar(1.5)).amax() < 1e-15);
}

fn fed_nodes(method: MethodSpec) -> Vec<rgm_core::fedsim::NodeState> {
    let data = gaussian(3, 6000, SigmaSpec::Diagonal { values: vec![1.0, 0.6, 0.3] }, 0.2, 8);
    let parts = split_dataset(&data, &split(SplitStrategy::Random, 3, 0.0)).unwrap();
    prepare_nodes(parts, 0.01, &method, 2.0, 0.5, 8).unwrap()
}

fn fed_cfg(iters: usize) -> FedConfig {
    FedConfig {
        tau: 0.4,
        iters,
        theta0: DVector::zeros(3),
        seed: 77,
        aggregation: Aggregation::Mean,
    }
}

const RGM: MethodSpec = MethodSpec::Rgm {
    ptr_eps: 1.0,
    ptr_delta: 1e-6,
    eta_constants: EtaConstants::Omitted,
};

#[test]
fn runs_identical_across_thread_counts() {
    let nodes = fed_nodes(RGM);
    assert!(nodes.iter().all(|n| matches!(n.privatizer, Privatizer::Rgm { .. })));
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_federated(&nodes, &fed_cfg(60)).unwrap())
    };
    let one = run(1);
    for threads in [2, 5] {
        let many = run(threads);
        assert_eq!(one.csv_rows(), many.csv_rows());
        assert_eq!(one.trajectory.iterates, many.trajectory.iterates);
    }
}

#[test]
fn per_node_noise_matches_declared_variance() {
    let nodes = fed_nodes(RGM);
    let res = run_federated(&nodes, &fed_cfg(200)).unwrap();
    for (i, node) in nodes.iter().enumerate() {
        let (mut got, mut want, mut var) = (0.0, 0.0, 0.0);
        for t in 0..200 {
            let v = node.declared_variance(&res.trajectory.iterates[t]);
            got += res.per_node_noise[i][t];
            want += 3.0 * v;
            var += 6.0 * v * v;
        }
        assert!((got - want).abs() < 4.0 * var.sqrt(), "node {i}: {got} vs {want}");
    }
}

#[test]
fn noiseless_federation_is_pooled_gd() {
    let nodes = fed_nodes(MethodSpec::Vanilla);
    let cfg = fed_cfg(100);
    let fed = run_federated(&nodes, &cfg).unwrap();
    let pooled = pooled_model(&nodes, Aggregation::Mean).unwrap();
    let gd = vanilla_gd(
        &pooled,
        &GdConfig {
            tau: cfg.tau,
            iters: cfg.iters,
            theta0: cfg.theta0.clone(),
            noise: GradientNoise::None,
            seed: 0,
        },
    )
    .unwrap();
    for (a, b) in fed.trajectory.iterates.iter().zip(&gd.iterates) {
        assert!((a - b).amax() < 1e-12);
    }
    assert!(fed.per_node_noise.iter().flatten().all(|&p| p == 0.0));
    // equal node sizes: pooled objective equals the single-dataset one
    let all: Vec<&FeatureDataset> = nodes.iter().map(|n| &n.data).collect();
    let x = DMatrix::from_columns(&all.iter().flat_map(|d| d.x.column_iter()).collect::<Vec<_>>());
    let y = DVector::from_iterator(x.ncols(), all.iter().flat_map(|d| d.y.iter().copied()));
    let joint = build_quadratic(&FeatureDataset::new(x, y).unwrap(), 0.01).unwrap();
    assert!((joint.a - pooled.a).amax() < 1e-12);
}
