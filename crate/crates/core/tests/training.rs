use std::fs;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use cu_core::losses::LossFamily;
use cu_core::metrics::{
    evaluate_split, kl_gaussian, kl_gaussian_mean_offset, kl_laplace_mc, l1_of_sigma, EvalOptions, OraclePredictor,
    SigmaAveraging,
};
use cu_core::model::CuNetwork;
use cu_core::prob::{laplace_logpdf_exact, NoiseFamily, SquareMatrix};
use cu_core::selfcheck::random_spd;
use cu_core::synthgen::{generate_dataset, load_dataset, DatasetConfig, Split, SplitSizes};
use cu_core::trainer::{adam_step, clip_grad_norm, network_config, train, AdamState, LrSchedule, TrainConfig};
use cu_core::CuError;

fn dataset(family: NoiseFamily, sizes: (usize, usize, usize)) -> (tempfile::TempDir, cu_core::synthgen::Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = DatasetConfig::toy(family, 11);
    cfg.sizes = SplitSizes {
        train: sizes.0,
        val: sizes.1,
        test: sizes.2,
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    (dir, ds)
}

fn small_config(family: LossFamily, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(family, 5);
    c.epochs = epochs;
    c.hidden = 16;
    c
}

fn fresh(c: &TrainConfig, ds: &cu_core::synthgen::Dataset) -> CuNetwork {
    CuNetwork::init_params(network_config(c, ds.manifest.agents, ds.manifest.timesteps), c.seed).unwrap()
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut p = vec![1.0, -2.0, 0.5];
    let g = vec![0.3, -4.0, 1e-3];
    let mut s = AdamState::new(3, 0.01);
    adam_step(&mut p, &g, &mut s).unwrap();
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
    for (k, want) in [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)]
        .iter()
        .enumerate()
    {
        assert!((p[k] - want).abs() < 1e-15, "{k}: {} vs {want}", p[k]);
    }
    let before = (p.clone(), s.clone());
    assert!(matches!(adam_step(&mut p, &[f64::NAN, 0.0, 0.0], &mut s), Err(CuError::NonFiniteGradient)));
    assert_eq!((p, s), before);
}

#[test]
fn clipping_rescales_to_max_norm() {
    let mut g = vec![3.0, 4.0];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    let mut small = vec![0.3, 0.4];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small, vec![0.3, 0.4]);
}

#[test]
fn step_schedule_drops_at_two_thirds_and_eight_ninths() {
    let s = LrSchedule::default_step();
    let lrs: Vec<f64> = (0..36).map(|e| s.lr_at(1e-3, e, 36)).collect();
    assert!(lrs[..24].iter().all(|v| *v == 1e-3));
    assert!(lrs[24..32].iter().all(|v| (*v - 1e-4).abs() < 1e-18));
    assert!(lrs[32..].iter().all(|v| (*v - 1e-5).abs() < 1e-19));
}

#[test]
fn steps_per_epoch_follow_batch_size() {
    // 36 000 / 72 = 500 steps per epoch at full size; same ratio, scaled down
    let (_d, ds) = dataset(NoiseFamily::Gaussian, (720, 20, 5));
    let c = small_config(LossFamily::GaussianFull, 3);
    let out = train(&c, &ds, fresh(&c, &ds), None).unwrap();
    assert!(out.log.epochs.iter().all(|e| e.steps == 10 && e.skipped_steps == 0));
    assert_eq!(out.log.total_steps, 30);
    let (_d, ds) = dataset(NoiseFamily::Gaussian, (100, 20, 5));
    let out = train(&c, &ds, fresh(&c, &ds), None).unwrap();
    assert_eq!(out.log.epochs[0].steps, 2);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_d, ds) = dataset(NoiseFamily::Laplace, (144, 10, 5));
    let mut c = small_config(LossFamily::LaplaceFull, 2);
    c.lr = 0.0;
    c.lr_schedule = LrSchedule::Constant;
    let net = fresh(&c, &ds);
    let out = train(&c, &ds, net.clone(), None).unwrap();
    assert_eq!(out.final_net.params(), net.params());
    assert_eq!(out.log.epochs[0].val_loss, out.log.epochs[1].val_loss);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let (_d, ds) = dataset(NoiseFamily::Gaussian, (720, 50, 5));
    let c = small_config(LossFamily::GaussianFull, 4);
    let (r1, r2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&c, &ds, fresh(&c, &ds), Some(r1.path())).unwrap();
    let b = train(&c, &ds, fresh(&c, &ds), Some(r2.path())).unwrap();
    assert_eq!(a.final_net.params(), b.final_net.params());
    assert_eq!(a.log.epochs, b.log.epochs);
    for f in ["log.jsonl", "config.json", "best.ckpt", "checkpoints/epoch_4.ckpt"] {
        assert_eq!(fs::read(r1.path().join(f)).unwrap(), fs::read(r2.path().join(f)).unwrap(), "{f}");
    }
    let first = &a.log.epochs[0];
    let last = a.log.epochs.last().unwrap();
    assert!(last.train_loss < first.train_loss);
    assert_eq!(fs::read_to_string(r1.path().join("log.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn family_mismatch_needs_opt_in() {
    let (_d, ds) = dataset(NoiseFamily::Laplace, (72, 10, 5));
    let mut c = small_config(LossFamily::GaussianDia, 1);
    assert!(matches!(train(&c, &ds, fresh(&c, &ds), None), Err(CuError::DatasetFamilyMismatch { .. })));
    c.allow_cross_family = true;
    assert!(train(&c, &ds, fresh(&c, &ds), None).is_ok());
    let other = small_config(LossFamily::GaussianFull, 1);
    c.allow_cross_family = true;
    assert!(matches!(train(&c, &ds, fresh(&other, &ds), None), Err(CuError::FamilyMismatch { .. })));
}

#[test]
fn huge_learning_rate_diverges_or_survives_without_nan_parameters() {
    let (_d, ds) = dataset(NoiseFamily::Gaussian, (144, 10, 5));
    let mut c = small_config(LossFamily::GaussianFull, 2);
    c.lr = 1e6;
    c.grad_clip = None;
    match train(&c, &ds, fresh(&c, &ds), None) {
        Err(CuError::DivergedLoss { .. }) => {}
        Ok(out) => assert!(out.final_net.params().iter().all(|p| p.is_finite())),
        Err(e) => panic!("unexpected {e}"),
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_reports() {
    let (_d, ds) = dataset(NoiseFamily::Laplace, (144, 10, 40));
    let c = small_config(LossFamily::LaplaceFull, 1);
    let run = tempfile::tempdir().unwrap();
    let out = train(&c, &ds, fresh(&c, &ds), Some(run.path())).unwrap();
    let (loaded, epoch) = CuNetwork::load(&run.path().join("best.ckpt")).unwrap();
    assert_eq!(epoch, Some(1));
    assert_eq!(loaded, out.best_net);
    let opts = EvalOptions {
        kl_samples: 20_000,
        ..EvalOptions::default()
    };
    let a = evaluate_split(&out.best_net, &ds, Split::Test, &opts).unwrap();
    let b = evaluate_split(&loaded, &ds, Split::Test, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let mut bytes = fs::read(run.path().join("best.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    assert!(matches!(CuNetwork::from_checkpoint_bytes(&bytes), Err(CuError::CorruptCheckpoint(_))));
    assert!(matches!(CuNetwork::from_checkpoint_bytes(&bytes[..n - 8]), Err(CuError::CorruptCheckpoint(_))));
}

#[test]
fn oracle_scores_zero_on_both_families() {
    for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace] {
        let (_d, ds) = dataset(family, (1, 1, 300));
        let oracle = OraclePredictor::from_dataset(&ds).unwrap();
        for averaging in [SigmaAveraging::Precision, SigmaAveraging::Covariance] {
            let opts = EvalOptions {
                kl_samples: 20_000,
                sigma_averaging: averaging,
                ..EvalOptions::default()
            };
            let r = evaluate_split(&oracle, &ds, Split::Test, &opts).unwrap();
            assert_eq!(r.l2_mu, 0.0);
            assert!(r.l1_sigma <= 1e-10, "{family}: {}", r.l1_sigma);
            match r.mc_std_error {
                None => assert!(r.kl <= 1e-10),
                Some(se) => assert!(r.kl.abs() <= 3.0 * se + 1e-12, "{} ± {se}", r.kl),
            }
            assert!(r.ade > 0.0 && r.fde > 0.0);
        }
    }
}

#[test]
fn id_model_is_scored_against_identity_covariance() {
    let (_d, ds) = dataset(NoiseFamily::Gaussian, (72, 10, 30));
    let c = small_config(LossFamily::IdL2, 1);
    let r = evaluate_split(&fresh(&c, &ds), &ds, Split::Test, &EvalOptions::default()).unwrap();
    let gt = SquareMatrix::new(3, r.sigma_gt.clone()).unwrap();
    assert_eq!(r.sigma_est, SquareMatrix::identity(3).into_entries());
    assert!((r.l1_sigma - l1_of_sigma(&SquareMatrix::identity(3), &gt).unwrap()).abs() < 1e-15);
}

fn na(m: &SquareMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.dim(), m.dim(), m.entries())
}

/// `½[tr(Σe⁻¹Σg) + δᵀΣe⁻¹δ − m + ln det Σe − ln det Σg]` from nalgebra.
fn kl_dense(mg: &[f64], sg: &SquareMatrix, me: &[f64], se: &SquareMatrix) -> f64 {
    let (a, b) = (na(sg), na(se));
    let inv = b.clone().try_inverse().unwrap();
    let d = nalgebra::DVector::from_iterator(mg.len(), mg.iter().zip(me).map(|(x, y)| x - y));
    0.5 * ((&inv * &a).trace() + (d.transpose() * &inv * &d)[(0, 0)] - mg.len() as f64 + b.determinant().ln()
        - a.determinant().ln())
}

#[test]
fn gaussian_kl_matches_dense_formula_and_offset_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..50 {
        let m = 1 + k % 5;
        let (sg, se) = (random_spd(&mut rng, m), random_spd(&mut rng, m));
        let mg: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let me: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let got = kl_gaussian(&mg, &sg, &me, &se).unwrap();
        let want = kl_dense(&mg, &sg, &me, &se);
        assert!((got - want).abs() <= 1e-10 * want.max(1.0));
        let mut second = SquareMatrix::zeros(m);
        for i in 0..m {
            for j in 0..m {
                second.set(i, j, (mg[i] - me[i]) * (mg[j] - me[j]));
            }
        }
        let via_offset = kl_gaussian_mean_offset(&sg, &se, &second).unwrap();
        assert!((via_offset - want).abs() <= 1e-10 * want.max(1.0));
    }
}

#[test]
fn laplace_kl_agrees_with_importance_sampling() {
    // second route: draws from a wide Gaussian proposal, weights p_g/q, exact densities on both sides
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for k in 0..4 {
        let (sg, se) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let mg: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let me: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let lambda = 1.0;
        let mc = kl_laplace_mc(&mg, &sg, &me, &se, lambda, 200_000, 40 + k).unwrap();

        // proposal: the same mixture with doubled covariance and doubled mean of z
        let prop_cov = na(&sg) * 2.0;
        let root = prop_cov.clone().cholesky().unwrap().l();
        let exp = Exp::new(1.0 / (2.0 * lambda)).unwrap();
        let prop_sigma = SquareMatrix::new(3, prop_cov.iter().copied().collect::<Vec<_>>()).unwrap();
        let n = 200_000;
        let mut is_rng = ChaCha8Rng::seed_from_u64(900 + k);
        let (mut sw, mut swf, mut swf2) = (0.0, 0.0, Vec::with_capacity(n));
        for _ in 0..n {
            let z: f64 = is_rng.sample(exp);
            let e = nalgebra::DVector::from_iterator(3, (0..3).map(|_| is_rng.sample::<f64, _>(StandardNormal)));
            let y: Vec<f64> = (&root * e * z.sqrt()).iter().zip(&mg).map(|(a, b)| a + b).collect();
            let lq = laplace_logpdf_exact(&y, &mg, &prop_sigma, 2.0 * lambda).unwrap();
            let lg = laplace_logpdf_exact(&y, &mg, &sg, lambda).unwrap();
            let le = laplace_logpdf_exact(&y, &me, &se, lambda).unwrap();
            let w = (lg - lq).exp();
            sw += w;
            swf += w * (lg - le);
            swf2.push((w, lg - le));
        }
        let est = swf / sw;
        let var: f64 = swf2.iter().map(|(w, f)| (w * (f - est)).powi(2)).sum::<f64>() / (sw * sw);
        let se_is = var.sqrt();
        let tol = 3.0 * (mc.std_error.powi(2) + se_is.powi(2)).sqrt();
        assert!((mc.estimate - est).abs() <= tol, "pair {k}: MC {} ± {} vs IS {est} ± {se_is}", mc.estimate, mc.std_error);
    }
}

#[test]
fn laplace_kl_of_identical_laws_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let s = random_spd(&mut rng, 3);
    let mu = [0.3, -1.0, 2.0];
    let r = kl_laplace_mc(&mu, &s, &mu, &s, 1.7, 10_000, 1).unwrap();
    assert_eq!(r.estimate, 0.0);
    assert!(matches!(kl_laplace_mc(&mu, &s, &mu, &s, 1.7, 100, 1), Err(CuError::InvalidParameter(_))));
}

#[test]
fn laplace_kl_is_seed_stable_and_thread_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let (a, b) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
    let run = || kl_laplace_mc(&[0.0; 3], &a, &[0.5, 0.0, -0.5], &b, 1.0, 30_000, 9).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
    assert_eq!(one, many);
}

proptest! {
    #[test]
    fn gaussian_kl_nonnegative_and_translation_invariant(seed in any::<u64>(), shift in -50.0..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..6usize);
        let (sg, se) = (random_spd(&mut rng, m), random_spd(&mut rng, m));
        let mg: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let me: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let base = kl_gaussian(&mg, &sg, &me, &se).unwrap();
        prop_assert!(base >= 0.0);
        let mg2: Vec<f64> = mg.iter().map(|v| v + shift).collect();
        let me2: Vec<f64> = me.iter().map(|v| v + shift).collect();
        let moved = kl_gaussian(&mg2, &sg, &me2, &se).unwrap();
        prop_assert!((moved - base).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(kl_gaussian(&mg, &sg, &mg, &sg).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn l1_of_sigma_is_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        prop_assert_eq!(l1_of_sigma(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(l1_of_sigma(&a, &b).unwrap(), l1_of_sigma(&b, &a).unwrap());
        let dense = (na(&a) - na(&b)).abs().mean();
        let got = l1_of_sigma(&a, &b).unwrap();
        prop_assert!(got > 0.0 && (got - dense).abs() <= 1e-12 * dense);
    }
}
