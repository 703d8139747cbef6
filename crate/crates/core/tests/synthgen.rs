use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use cu_core::prob::NoiseFamily;
use cu_core::synthgen::{
    cu_strength, generate_dataset, load_dataset, make_sigma_gt, make_sigma_gt_with_min_cu, DatasetConfig,
    InstanceGenerator, Split, SplitSizes,
};
use cu_core::CuError;

fn small(family: NoiseFamily, seed: u64, sizes: (usize, usize, usize)) -> DatasetConfig {
    let mut c = DatasetConfig::toy(family, seed);
    c.sizes = SplitSizes {
        train: sizes.0,
        val: sizes.1,
        test: sizes.2,
    };
    c
}

fn read_all(dir: &Path, split: Split) -> cu_core::Result<Vec<cu_core::synthgen::Instance>> {
    load_dataset(dir)?.reader(split)?.collect()
}

#[test]
fn files_round_trip_to_the_generator_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(NoiseFamily::Laplace, 3, (20, 5, 6));
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.manifest, manifest);
    for split in Split::ALL {
        let mut gen = InstanceGenerator::from_manifest(&manifest).unwrap();
        let mut rng = split.rng(cfg.seed);
        let read = read_all(dir.path(), split).unwrap();
        assert_eq!(read.len(), manifest.sizes.get(split));
        for inst in read {
            assert_eq!(inst, gen.generate(&mut rng));
        }
    }
}

#[test]
fn same_seed_same_bytes_other_seed_differs() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(NoiseFamily::Gaussian, 9, (10, 3, 3)), a.path()).unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 9, (10, 3, 3)), b.path()).unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 10, (10, 3, 3)), c.path()).unwrap();
    for f in ["manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.path().join("train.jsonl")).unwrap(), fs::read(c.path().join("train.jsonl")).unwrap());
}

#[test]
fn test_split_does_not_depend_on_other_split_sizes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(NoiseFamily::Gaussian, 4, (5, 2, 8)), a.path()).unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 4, (50, 20, 8)), b.path()).unwrap();
    assert_eq!(fs::read(a.path().join("test.jsonl")).unwrap(), fs::read(b.path().join("test.jsonl")).unwrap());
}

#[test]
fn noise_identity_holds_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(NoiseFamily::Laplace, 5, (30, 1, 1)), dir.path()).unwrap();
    let mut gen = InstanceGenerator::from_manifest(&m).unwrap();
    let mut rng = Split::Train.rng(5);
    for _ in 0..30 {
        let inst = gen.generate(&mut rng);
        for ((x, mu), e) in inst.x.coords.iter().zip(&inst.mu_gt.coords).zip(&inst.epsilon) {
            assert_eq!(x - mu, *e);
            assert_eq!(mu + e, *x);
        }
    }
}

#[test]
fn means_move_at_constant_velocity() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 6, (20, 1, 1)), dir.path()).unwrap();
    for inst in read_all(dir.path(), Split::Train).unwrap() {
        let mu = &inst.mu_gt;
        for i in 0..mu.agents {
            for t in 1..mu.timesteps - 1 {
                for a in 0..2 {
                    assert_eq!(mu.at(i, t + 1, a) - 2.0 * mu.at(i, t, a) + mu.at(i, t - 1, a), 0.0);
                }
            }
        }
    }
}

#[test]
fn noise_moments_match_manifest_covariance() {
    for (family, lambda, tol) in [(NoiseFamily::Gaussian, 1.0, 0.02), (NoiseFamily::Laplace, 2.0, 0.03)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(family, 8, (2000, 1, 1));
        cfg.lambda = lambda;
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        let mut n = 0.0;
        for inst in read_all(dir.path(), Split::Train).unwrap() {
            for t in 0..inst.x.timesteps {
                for a in 0..2 {
                    let e: Vec<f64> = (0..3).map(|i| inst.epsilon[inst.x.index(i, t, a)]).collect();
                    for i in 0..3 {
                        for j in 0..3 {
                            acc[(i, j)] += e[i] * e[j];
                        }
                    }
                    n += 1.0;
                }
            }
        }
        let target = DMatrix::from_row_slice(3, 3, &m.sigma_gt) * lambda;
        let err = (acc / n - &target).norm() / target.norm();
        assert!(err <= tol, "{family}: relative Frobenius error {err}");
    }
}

#[test]
fn sigma_gt_is_well_conditioned_and_collaborative() {
    for seed in 0..1000 {
        let s = make_sigma_gt_with_min_cu(seed, 3, 1.0, 0.5, 100_000).unwrap();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(3, 3, s.entries())).eigenvalues;
        let cond = eig.max() / eig.min();
        assert!(eig.min() > 0.0 && cond < 100.0, "seed {seed}: condition {cond}");
        assert!(cu_strength(&s).unwrap() >= 0.5);
    }
    assert_eq!(make_sigma_gt(3, 3, 1.0).unwrap(), make_sigma_gt(3, 3, 1.0).unwrap());
    assert_ne!(make_sigma_gt(3, 3, 1.0).unwrap(), make_sigma_gt(4, 3, 1.0).unwrap());
}

#[test]
fn cu_strength_of_diagonal_is_zero() {
    let s = cu_core::prob::SquareMatrix::from_diag(&[1.0, 4.0, 0.25]);
    assert_eq!(cu_strength(&s).unwrap(), 0.0);
}

fn corrupt_line(path: &Path, line: usize, f: impl Fn(&str) -> String) {
    let text = fs::read_to_string(path).unwrap();
    let out: Vec<String> = text.lines().enumerate().map(|(k, l)| if k + 1 == line { f(l) } else { l.to_string() }).collect();
    fs::write(path, out.join("\n") + "\n").unwrap();
}

fn expect_corrupt_at(dir: &Path, split: Split, want_line: usize, needle: &str) {
    match read_all(dir, split) {
        Err(CuError::CorruptRecord { line, reason, .. }) => {
            assert_eq!(line, want_line, "{reason}");
            assert!(reason.contains(needle), "{reason}");
        }
        other => panic!("expected corrupt record, got {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn missing_timestep_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 1, (6, 2, 2)), dir.path()).unwrap();
    // drop the last timestep of the first agent's x on line 4
    corrupt_line(&dir.path().join("train.jsonl"), 4, |l| {
        let x = l.find("\"x\":[[").unwrap() + 6;
        let end = l[x..].find("]]").unwrap() + x;
        let cut = l[x..end].rfind(",[").unwrap() + x;
        format!("{}{}", &l[..cut], &l[end + 1..])
    });
    expect_corrupt_at(dir.path(), Split::Train, 4, "expected 50 timesteps");
}

#[test]
fn truncated_and_extended_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 2, (6, 2, 2)), dir.path()).unwrap();
    let path = dir.path().join("val.jsonl");
    let original = fs::read_to_string(&path).unwrap();
    let first = original.lines().next().unwrap().to_string();
    fs::write(&path, format!("{first}\n")).unwrap();
    expect_corrupt_at(dir.path(), Split::Val, 2, "expected 2 records");
    fs::write(&path, format!("{original}{first}\n")).unwrap();
    expect_corrupt_at(dir.path(), Split::Val, 3, "more than 2 records");
    fs::write(&path, format!("{first}\n{{\"mu_gt\":")).unwrap();
    expect_corrupt_at(dir.path(), Split::Val, 2, "malformed");
}

#[test]
fn tampered_values_fail_the_split_digest() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(NoiseFamily::Laplace, 2, (6, 2, 2)), dir.path()).unwrap();
    let path = dir.path().join("test.jsonl");
    corrupt_line(&path, 1, |l| {
        let k = l.find("e+").or_else(|| l.find("e-")).unwrap();
        let d = l.as_bytes()[k - 1];
        let swapped = if d == b'1' { '2' } else { '1' };
        format!("{}{}{}", &l[..k - 1], swapped, &l[k..])
    });
    assert!(matches!(read_all(dir.path(), Split::Test), Err(CuError::ManifestMismatch { .. })));
    assert!(read_all(dir.path(), Split::Train).is_ok());
}

#[test]
fn tampered_manifest_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(NoiseFamily::Gaussian, 2, (2, 1, 1)), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"lambda\": 1.0", "\"lambda\": 1.5", 1)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(CuError::ManifestMismatch { .. })));
    fs::write(&path, "{\"format_version\": 1}").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(CuError::InvalidManifest(_))));
    fs::remove_file(&path).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(CuError::Io { .. })));
}

#[test]
fn zero_sigma_gives_noiseless_instances() {
    let sigma = cu_core::prob::SquareMatrix::zeros(3);
    let mut gen = InstanceGenerator::new(NoiseFamily::Gaussian, &sigma, 1.0, 10, Default::default()).unwrap();
    let inst = gen.generate(&mut Split::Train.rng(0));
    assert_eq!(inst.x.coords, inst.mu_gt.coords);
    assert!(inst.epsilon.iter().all(|e| *e == 0.0));
}
