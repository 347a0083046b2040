use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use projbnn::data::{
    gen_sine_tasks, gen_toy_four_modes, gen_toy_latent_rbf, rows_by_norm, split_indices, Dataset, SplitKind,
    SplitSpec,
};
use projbnn::ensemble::{collect_fge_snapshots, cyclic_lr, filter_top_k, FgeConfig, SnapshotSet};
use projbnn::eval::{marginal_test_ll, predictive_bands, rmse};
use projbnn::multitask::{elbo_meta, interior_quantiles};
use projbnn::nn::{gaussian_log_density, mlp_forward_batch, Activation, Architecture, Matrix, ObservationModel, WeightVector};
use projbnn::pipeline::{run_pipeline, RunConfig};
use projbnn::projector::{pcae_loss, train_pcae, AutoencoderParams, PcaeBatch, PcaeConfig};
use projbnn::rng::standard_normals;
use projbnn::vi::{
    kl_gaussian_diag, ElboTerms, EpsDraw, MeanFieldGaussian, Method, PhiPosterior, PriorSpec, Priors, Projection,
    TaskBatch,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dataset(rows: usize, cols: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = Matrix::new(rows, cols, standard_normals(&mut r, rows * cols)).unwrap();
    let y = Matrix::new(rows, 1, standard_normals(&mut r, rows)).unwrap();
    Dataset::new("p", x, y).unwrap()
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Rbf), Just(Activation::Tanh), Just(Activation::Relu)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_pass_is_bitwise_deterministic(
        hidden in 1usize..8,
        act in activation(),
        seed in any::<u64>(),
    ) {
        let arch = Architecture::new(vec![2, hidden, 1], act).unwrap();
        let mut r = rng(seed);
        let w = standard_normals(&mut r, arch.num_params());
        let x = Matrix::new(5, 2, standard_normals(&mut r, 10)).unwrap();
        let a = mlp_forward_batch(&arch, &w, &x).unwrap();
        let b = mlp_forward_batch(&arch, &w, &x).unwrap();
        prop_assert!(a.data.iter().zip(&b.data).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn splits_partition_the_rows(
        n in 20usize..200,
        kind in prop_oneof![Just(SplitKind::Random), Just(SplitKind::Extrapolation), Just(SplitKind::Interpolation)],
        seed in any::<u64>(),
    ) {
        let d = dataset(n, 2, seed);
        let idx = split_indices(&d, &SplitSpec { kind, fractions: [0.8, 0.1, 0.1], seed }).unwrap();
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.valid).chain(&idx.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        let order = rows_by_norm(&d);
        let k = (0.05 * n as f64).ceil() as usize;
        let mut extremes: Vec<usize> = order[..k].iter().chain(&order[n - k..]).copied().collect();
        extremes.sort_unstable();
        let mut test = idx.test.clone();
        test.sort_unstable();
        match kind {
            SplitKind::Extrapolation => prop_assert_eq!(test, extremes),
            SplitKind::Interpolation => prop_assert!(test.iter().all(|r| !extremes.contains(r))),
            SplitKind::Random => {}
        }
    }

    #[test]
    fn generators_depend_only_on_the_seed(seed in any::<u64>()) {
        prop_assert_eq!(gen_toy_latent_rbf(seed).unwrap().data, gen_toy_latent_rbf(seed).unwrap().data);
        prop_assert_eq!(gen_toy_four_modes(seed).unwrap().data, gen_toy_four_modes(seed).unwrap().data);
        prop_assert_eq!(gen_sine_tasks(3, 10, seed).unwrap(), gen_sine_tasks(3, 10, seed).unwrap());
    }

    #[test]
    fn cyclic_rate_descends_between_its_endpoints(
        len in 2usize..500,
        lr_min in 1e-6f64..1e-3,
        span in 1.5f64..1000.0,
    ) {
        let lr_max = lr_min * span;
        let rates: Vec<f64> = (0..3 * len).map(|t| cyclic_lr(t % len, len, lr_max, lr_min).unwrap()).collect();
        for cycle in rates.chunks(len) {
            prop_assert_eq!(cycle[0], lr_max);
            prop_assert_eq!(cycle[len - 1], lr_min);
            prop_assert!(cycle.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn top_k_is_a_sorted_prefix(rmse in prop::collection::vec(0.0f64..10.0, 1..80), frac in 0.0f64..1.0) {
        let arch = Architecture::affine(1, 1, false).unwrap();
        let n = rmse.len();
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let set = SnapshotSet {
            weights: (0..n).map(|i| WeightVector::new(&arch, vec![i as f64]).unwrap()).collect(),
            valid_rmse: rmse.clone(),
            arch_fingerprint: arch.fingerprint(),
            chain: vec![0; n],
        };
        let top = filter_top_k(&set, k).unwrap();
        let mut sorted = rmse.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(&top.valid_rmse[..], &sorted[..k]);
        for (w, e) in top.weights.iter().zip(&top.valid_rmse) {
            prop_assert_eq!(rmse[w.values[0] as usize], *e);
        }
    }

    #[test]
    fn kl_vanishes_exactly_at_the_prior(dim in 1usize..10, variance in 0.01f64..5.0, shift in 0.01f64..2.0) {
        let p = PriorSpec::new(variance).unwrap();
        let at_prior = MeanFieldGaussian::from_prior(dim, &p);
        prop_assert!(kl_gaussian_diag(&at_prior, &p).abs() <= 1e-12);
        let mut off = at_prior.clone();
        off.mu[0] += shift;
        prop_assert!(kl_gaussian_diag(&off, &p) > 0.0);
    }

    #[test]
    fn duplicated_samples_leave_the_marginal_unchanged(
        s in 1usize..20,
        n in 1usize..10,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let ll: Vec<f64> = standard_normals(&mut r, s * n).iter().map(|v| v - 2.0).collect();
        let once = Matrix::new(n, s, ll.clone()).unwrap();
        let doubled: Vec<f64> = ll.chunks(s).flat_map(|row| row.iter().chain(row)).copied().collect();
        let twice = Matrix::new(n, 2 * s, doubled).unwrap();
        prop_assert_eq!(marginal_test_ll(&once).unwrap(), marginal_test_ll(&twice).unwrap());
    }

    #[test]
    fn rmse_is_symmetric(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn band_std_never_drops_below_observation_noise(
        samples in 2usize..30,
        sigma in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let arch = Architecture::new(vec![1, 4, 1], Activation::Tanh).unwrap();
        let mut r = rng(seed);
        let ws: Vec<Vec<f64>> = (0..samples).map(|_| standard_normals(&mut r, arch.num_params())).collect();
        let grid: Vec<f64> = (0..25).map(|i| -3.0 + 0.25 * i as f64).collect();
        let obs = ObservationModel::new(sigma).unwrap();
        let b = predictive_bands(&arch, &ws, &grid, &[0.025, 0.975], obs).unwrap();
        prop_assert!(b.total_std.iter().all(|s| *s >= sigma));
    }

    #[test]
    fn plain_reconstruction_loss_is_the_mean_squared_norm(
        dw in 1usize..12,
        dz in 1usize..4,
        r_snap in 1usize..6,
        seed in any::<u64>(),
    ) {
        let dz = dz.min(dw);
        let target = Architecture::affine(1, dw, false).unwrap();
        let enc = Architecture::new(vec![dw, 3, dz], Activation::Tanh).unwrap();
        let dec = Architecture::new(vec![dz, 3, dw], Activation::Tanh).unwrap();
        let mut r = rng(seed);
        let p = AutoencoderParams::new(
            enc.clone(),
            dec.clone(),
            WeightVector::new(&enc, standard_normals(&mut r, enc.num_params())).unwrap(),
            WeightVector::new(&dec, standard_normals(&mut r, dec.num_params())).unwrap(),
            &target,
        )
        .unwrap();
        let snaps = Matrix::new(r_snap, dw, standard_normals(&mut r, r_snap * dw)).unwrap();
        let data = Dataset::new("d", Matrix::column(&[0.5]), Matrix::new(1, dw, vec![0.0; dw]).unwrap()).unwrap();
        let batch = PcaeBatch { snapshots: &snaps, gamma: &Matrix::zeros(r_snap, dw), data: &data };
        let loss = pcae_loss(&p, &target, &batch, ObservationModel::default(), 0.0).unwrap();
        let rec = p.reconstruct(&snaps).unwrap();
        let mse = snaps.data.iter().zip(&rec.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r_snap as f64;
        prop_assert!((loss - mse).abs() <= 1e-12 * mse.max(1.0));

        let w = WeightVector::new(&target, snaps.row(0).to_vec()).unwrap();
        let back = p.decode(&p.encode(&w).unwrap()).unwrap();
        prop_assert_eq!(back.len(), w.len());
        prop_assert_eq!(back.arch_fingerprint, w.arch_fingerprint);
    }

    #[test]
    fn shared_decoder_kl_is_counted_once(tasks in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let target = Architecture::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let dec = Architecture::new(vec![2, 4, target.num_params()], Activation::Tanh).unwrap();
        let q_z: Vec<MeanFieldGaussian> = (0..tasks)
            .map(|_| MeanFieldGaussian::new(standard_normals(&mut r, 2), vec![-0.5, -1.0]).unwrap())
            .collect();
        let q_phi = MeanFieldGaussian::new(standard_normals(&mut r, dec.num_params()), vec![-3.0; dec.num_params()]).unwrap();
        let phi = PhiPosterior::Gaussian(q_phi.clone());
        let batches: Vec<TaskBatch> = (0..tasks)
            .map(|t| TaskBatch::full(&dataset(6, 1, seed.wrapping_add(t as u64))))
            .collect();
        let priors = Priors { latent: PriorSpec::new(1.0).unwrap(), decoder: PriorSpec::default() };
        let eps: Vec<EpsDraw> = (0..4)
            .map(|_| EpsDraw {
                z: (0..tasks).map(|_| standard_normals(&mut r, 2)).collect(),
                phi: standard_normals(&mut r, dec.num_params()),
            })
            .collect();
        let terms = ElboTerms {
            latents: &q_z,
            projection: Projection::Decoder { arch: &dec, phi: &phi },
            target_arch: &target,
            batches: &batches,
            obs: ObservationModel::default(),
            priors: &priors,
        };
        let est = terms.estimate(&eps, false).unwrap();
        let by_hand = q_z.iter().map(|q| kl_gaussian_diag(q, &priors.latent)).sum::<f64>()
            + kl_gaussian_diag(&q_phi, &priors.decoder);
        prop_assert!((est.kl - by_hand).abs() <= 1e-9 * by_hand.max(1.0));
        let meta = elbo_meta(&q_z, &phi, &dec, &target, &batches, ObservationModel::default(), &priors, &eps).unwrap();
        prop_assert_eq!(meta, est.value);
    }
}

#[test]
fn quantile_grid_round_trips_through_the_normal_cdf() {
    let unit = Normal::new(0.0, 1.0).unwrap();
    for n in [2, 5, 10, 101] {
        for u in interior_quantiles(n) {
            assert!((unit.cdf(unit.inverse_cdf(u)) - u).abs() <= 1e-9);
        }
    }
}

#[test]
fn gaussian_density_integrates_to_one() {
    let mut r = rng(5);
    for std in [0.1, 1.0] {
        let (lo, hi) = (-10.0 * std, 10.0 * std);
        let n = 200_000;
        let mean = (0..n)
            .map(|_| gaussian_log_density(&[r.random_range(lo..hi)], &[0.0], std).unwrap().exp())
            .sum::<f64>()
            / n as f64;
        assert!((mean * (hi - lo) - 1.0).abs() < 0.01, "std {std}: {}", mean * (hi - lo));
    }
}

/// Per-draw reparametrized gradients average to the gradient of the exact
/// ELBO of a one-weight linear model.
#[test]
fn reparametrized_gradient_is_unbiased() {
    let d = dataset(25, 1, 9);
    let obs = ObservationModel::default();
    let priors = Priors::default();
    let arch = Architecture::affine(1, 1, false).unwrap();
    let q = MeanFieldGaussian::new(vec![0.3], vec![-1.7]).unwrap();
    let (m, s2) = (q.mu[0], q.std()[0].powi(2));
    let (sy2, tau2) = (obs.sigma_y.powi(2), priors.latent.variance);
    let sxx: f64 = d.x.data.iter().map(|x| x * x).sum();
    let sxy: f64 = d.x.data.iter().zip(&d.y.data).map(|(x, y)| x * y).sum();
    let exact = [(sxy - m * sxx) / sy2 - m / tau2, -s2 * sxx / sy2 - (s2 / tau2 - 1.0)];

    let batch = TaskBatch::full(&d);
    let latents = [q];
    let terms = ElboTerms {
        latents: &latents,
        projection: Projection::Identity,
        target_arch: &arch,
        batches: std::slice::from_ref(&batch),
        obs,
        priors: &priors,
    };
    let mut r = rng(10);
    let draws: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            let eps = [EpsDraw { z: vec![standard_normals(&mut r, 1)], phi: Vec::new() }];
            terms.estimate(&eps, true).unwrap().grad.unwrap().latents[0].clone()
        })
        .collect();
    for (j, target) in exact.iter().enumerate() {
        let v: Vec<f64> = draws.iter().map(|g| g[j]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let se = (v.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt();
        assert!((mean - target).abs() <= 3.0 * se.max(1e-12), "component {j}: {mean} vs {target} (se {se})");
    }
}

fn small_fge() -> (Architecture, Dataset, FgeConfig) {
    let toy = gen_toy_latent_rbf(2).unwrap();
    let cfg = FgeConfig {
        snapshots: 7,
        keep_top_k: 3,
        cycle_epochs: 2,
        seed: 4,
        ..FgeConfig::default()
    };
    (toy.arch, toy.data, cfg)
}

#[test]
fn harvest_yields_the_requested_count_deterministically() {
    let (arch, data, cfg) = small_fge();
    let start = WeightVector::zeros(&arch);
    let run = || collect_fge_snapshots(&arch, &start, &data, &data, ObservationModel::default(), 1.0, &cfg).unwrap();
    let a = run();
    assert_eq!(a.len(), 7);
    assert_eq!(a, run());
}

#[test]
fn autoencoder_training_lowers_its_loss() {
    let (arch, data, cfg) = small_fge();
    let mut r = rng(12);
    let start = WeightVector::new(&arch, standard_normals(&mut r, arch.num_params())).unwrap();
    let snaps = collect_fge_snapshots(&arch, &start, &data, &data, ObservationModel::default(), 1.0, &cfg).unwrap();
    for seed in 0..3 {
        let pc = PcaeConfig { latent_dim: 2, iterations: 200, seed, ..PcaeConfig::default() };
        let (_, report) = train_pcae(&snaps, &arch, &data, ObservationModel::default(), &pc).unwrap();
        assert!(report.final_loss <= report.initial_loss, "seed {seed}: {report:?}");
    }
}

#[test]
fn runs_reproduce_from_config_and_seed() {
    let cfg = RunConfig { method: Method::Bbb, scale: 0.02, lr_grid: vec![0.01], seed: 5, ..RunConfig::default() };
    let a = run_pipeline(&cfg, &mut |_| {}).unwrap();
    let b = run_pipeline(&cfg, &mut |_| {}).unwrap();
    assert_eq!(a.metrics.without_timing(), b.metrics.without_timing());
    assert_eq!(a.model.model, b.model.model);
}
