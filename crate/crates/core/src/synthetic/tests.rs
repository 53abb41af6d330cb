use sha2::{Digest, Sha256};

use super::*;
use crate::Region;

fn spec(size: usize) -> PhantomSpec {
    PhantomSpec { size, ..PhantomSpec::default() }
}

#[test]
fn default_spec_is_valid() {
    let s = PhantomSpec::default();
    s.validate().unwrap();
    assert_eq!(s.size, 32);
    assert!(min_singular_value(&s.mixing) > 0.1);
}

#[test]
fn singular_value_oracle() {
    // Diagonal matrix: singular values are the absolute diagonal entries.
    let m = [[2.0, 0.0, 0.0, 0.0], [0.0, -0.3, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 5.0]];
    assert!((min_singular_value(&m) - 0.3).abs() < 1e-12);
}

#[test]
fn rows_pair_flair_with_t2_and_t1_with_t1c() {
    let m = DEFAULT_MIXING;
    let cos = |a: usize, b: usize| {
        let dot: f64 = (0..4).map(|t| m[a][t] * m[b][t]).sum();
        let na: f64 = m[a].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = m[b].iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    for m in Modality::ALL {
        let partner = m.partner();
        for other in Modality::ALL {
            if other != m && other != partner {
                assert!(cos(m.index(), partner.index()) > cos(m.index(), other.index()), "{m} vs {other}");
            }
        }
    }
}

#[test]
fn same_index_is_identical() {
    let s = spec(16);
    assert_eq!(generate_sample(&s, 5).unwrap(), generate_sample(&s, 5).unwrap());
    assert_ne!(generate_sample(&s, 5).unwrap().volumes, generate_sample(&s, 6).unwrap().volumes);
    let other_seed = PhantomSpec { seed: 7, ..s.clone() };
    assert_ne!(generate_sample(&s, 5).unwrap().labels, generate_sample(&other_seed, 5).unwrap().labels);
}

#[test]
fn parallel_generation_matches_sequential() {
    let s = spec(12);
    let batch = generate_samples(&s, 3..9).unwrap();
    for (k, sample) in batch.iter().enumerate() {
        assert_eq!(sample, &generate_sample(&s, 3 + k).unwrap());
    }
}

#[test]
fn labels_nested_for_hundred_samples() {
    let s = spec(16);
    for sample in generate_samples(&s, 0..100).unwrap() {
        sample.check_labels().unwrap();
        for r in Region::ALL {
            assert!(sample.labels.channel(r as usize).iter().any(|&v| v == 1.0));
        }
    }
}

#[test]
fn volumes_are_normalized() {
    for sample in generate_samples(&spec(16), 0..10).unwrap() {
        for v in &sample.volumes {
            let n = v.numel() as f64;
            let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
        }
    }
}

#[test]
fn tumour_voxels_strongly_correlated_without_noise() {
    let s = PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::default() };
    for i in 0..20 {
        let sample = generate_sample(&s, i).unwrap();
        let mask: Vec<bool> = sample.labels.channel(0).iter().map(|&v| v == 1.0).collect();
        for a in 0..4 {
            for b in a + 1..4 {
                let r = masked_correlation(sample.volumes[a].data(), sample.volumes[b].data(), &mask);
                assert!(r.abs() >= 0.5, "sample {i} pair ({a},{b}): {r}");
            }
        }
    }
}

#[test]
fn head_correlation_exceeds_floor() {
    for sigma in [0.0, 0.05, 0.1] {
        let s = PhantomSpec { noise_sigma: sigma, ..PhantomSpec::default() };
        for i in 0..10 {
            let sample = generate_sample(&s, i).unwrap();
            let mask = brain_mask(&s, i).unwrap();
            for a in 0..4 {
                for b in a + 1..4 {
                    let r = masked_correlation(sample.volumes[a].data(), sample.volumes[b].data(), &mask);
                    assert!(r.abs() > HEAD_CORRELATION_FLOOR, "sigma {sigma} sample {i} ({a},{b}): {r}");
                }
            }
        }
    }
}

#[test]
fn brain_mask_contains_tumour() {
    let s = spec(16);
    for i in 0..5 {
        let brain = brain_mask(&s, i).unwrap();
        let sample = generate_sample(&s, i).unwrap();
        for (&inside, &t) in brain.iter().zip(sample.labels.channel(0)) {
            assert!(inside || t == 0.0);
        }
    }
}

#[test]
fn masked_correlation_oracle() {
    let a = [1.0, 2.0, 3.0, 100.0];
    let b = [2.0, 4.0, 6.0, -7.0];
    let mask = [true, true, true, false];
    assert!((masked_correlation(&a, &b, &mask) - 1.0).abs() < 1e-12);
    let c = [3.0, 2.0, 1.0, 0.0];
    assert!((masked_correlation(&a, &c, &mask) + 1.0).abs() < 1e-12);
}

#[test]
fn mean_tumour_fraction_within_range() {
    let s = PhantomSpec::default();
    let samples = generate_samples(&s, 0..100).unwrap();
    let mean = samples
        .iter()
        .map(|x| x.labels.channel(0).iter().sum::<f32>() as f64 / x.labels.channel(0).len() as f64)
        .sum::<f64>()
        / samples.len() as f64;
    assert!(mean >= s.tumor_fraction.min && mean <= s.tumor_fraction.max, "{mean}");
}

#[test]
fn validation_rejects_bad_specs() {
    let base = PhantomSpec::default();
    let singular = PhantomSpec {
        mixing: [[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        ..base.clone()
    };
    let unordered = PhantomSpec {
        core_radius: RadiusRange::new(0.2, 0.3),
        ..base.clone()
    };
    let noisy = PhantomSpec { noise_sigma: -1.0, ..base.clone() };
    let tiny = PhantomSpec { size: 3, ..base.clone() };
    for bad in [singular, unordered, noisy, tiny] {
        assert!(bad.validate().is_err(), "{bad:?}");
        assert!(generate_sample(&bad, 0).is_err());
    }
}

#[test]
fn impossible_regions_fail_after_budget() {
    // At this size the enhancing ellipsoid never covers a voxel centre.
    let s = PhantomSpec {
        size: 4,
        enhancing_radius: RadiusRange::new(0.01, 0.02),
        ..PhantomSpec::default()
    };
    match generate_sample(&s, 0) {
        Err(Error::NestingFailed(n)) => assert_eq!(n, MAX_ATTEMPTS),
        other => panic!("expected nesting failure, got {other:?}"),
    }
}

fn file_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest: String = Sha256::digest(fs::read(&p).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), digest));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_split_and_reproducible_files() {
    let s = spec(8);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&s, 80, 20, a.path()).unwrap();
    assert_eq!(manifest.train.len(), 80);
    assert_eq!(manifest.test.len(), 20);
    assert!(manifest.train.iter().all(|i| !manifest.test.contains(i)));
    make_dataset(&s, 80, 20, b.path()).unwrap();
    let (ha, hb) = (file_hashes(a.path()), file_hashes(b.path()));
    assert_eq!(ha.len(), 100 * 10 + 1);
    assert_eq!(ha, hb);
    assert!(DatasetManifest::sample_dir(a.path(), 3).join("flair.bin").exists());
}

#[test]
fn dataset_round_trip() {
    let s = spec(8);
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&s, 4, 2, dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    let direct = Dataset::generate(&s, 4, 2).unwrap();
    assert_eq!(loaded.manifest, direct.manifest);
    assert_eq!(loaded.train, direct.train);
    assert_eq!(loaded.test, direct.test);
    assert_eq!(loaded.test[0].meta.index, 4);
}

#[test]
fn dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_dataset(&spec(8), 0, 2, dir.path()).is_err());
    match Dataset::load(&dir.path().join("missing")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("manifest.json")),
        other => panic!("expected io error, got {other:?}"),
    }
}
