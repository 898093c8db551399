use super::*;

fn manifest(count: usize, seed: u64) -> DatasetManifest {
    DatasetManifest::plan(count, count / 5, 32, SamplingMode::LogUniform, seed, None).unwrap()
}

#[test]
fn sampled_params_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [SamplingMode::LogUniform, SamplingMode::LinearUniform] {
        for _ in 0..10_000 {
            let p = sample_params(&mut rng, mode);
            assert!(p.is_legal(), "{mode} {p:?}");
        }
    }
}

#[test]
fn log_uniform_splits_the_decades_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let below = (0..n)
        .filter(|_| sample_params(&mut rng, SamplingMode::LogUniform).k[0] < 1e-5)
        .count();
    let frac = below as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    // Linear sampling almost never reaches the lower decade.
    let below = (0..n)
        .filter(|_| sample_params(&mut rng, SamplingMode::LinearUniform).k[0] < 1e-5)
        .count();
    assert!((below as f64 / n as f64) < 0.1);
}

#[test]
fn sampling_is_deterministic() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| sample_params(&mut rng, SamplingMode::LogUniform).k)
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn crop_geometry() {
    let wide = Image::from_fn(300, 200, 3, |x, _, _| if !(50..250).contains(&x) { 1.0 } else { 0.5 });
    let out = crop_to_disk(&wide, 200).unwrap();
    assert_eq!((out.width(), out.height()), (200, 200));
    // The bright side bands lie outside the centered crop.
    assert_eq!(out.get(100, 100, 0), 0.5);
    assert!(out.data().iter().all(|&v| v == 0.0 || v == 0.5));
    let geom = RadialGeometry::square(200);
    for (px, inside) in out.data().chunks(3).zip(geom.disk_mask()) {
        if !inside {
            assert_eq!(px, &[0.0; 3]);
        }
    }
    let square = Image::from_fn(64, 64, 3, |_, _, _| 0.25);
    let out = crop_to_disk(&square, 64).unwrap();
    let zeroed = out.data().chunks(3).filter(|p| p[0] == 0.0).count();
    let outside = RadialGeometry::square(64).disk_mask().iter().filter(|&&m| !m).count();
    assert_eq!(zeroed, outside);
    assert_eq!(crop_to_disk(&square, 32).unwrap().width(), 32);
}

#[test]
fn plan_partitions_ids() {
    let m = manifest(50, 9);
    assert_eq!(m.train_ids.len(), 40);
    assert_eq!(m.test_ids.len(), 10);
    assert!(m.train_ids.iter().all(|id| !m.test_ids.contains(id)));
    m.validate().unwrap();
    let mut bad = m.clone();
    bad.test_ids[0] = bad.train_ids[0].clone();
    assert!(bad.validate().is_err());
    assert!(DatasetManifest::plan(4, 5, 32, SamplingMode::LogUniform, 0, None).is_err());
    assert!(DatasetManifest::plan(4, 1, 31, SamplingMode::LogUniform, 0, None).is_err());
}

#[test]
fn generated_sample_is_consistent() {
    let m = manifest(10, 2);
    let s = generate_sample(&m, 3, &[]).unwrap();
    assert_eq!(s.meta.id, "s00003");
    assert!(s.params().is_legal());
    let back = DistortionParams::from_normalized(s.meta.normalized);
    for i in 0..4 {
        assert!(((back.k[i] - s.meta.k[i]) / s.meta.k[i]).abs() <= 1e-9);
    }
    // The fisheye is regenerable from the ground truth and coefficients.
    let again = synthesize_fisheye(&s.gt, &s.params(), &RadialGeometry::square(32))
        .unwrap()
        .image
        .quantized();
    assert_eq!(again.data(), s.fisheye.data());
    let outside = RadialGeometry::square(32).disk_mask();
    for (px, inside) in s.gt.data().chunks(3).zip(outside) {
        if !inside {
            assert_eq!(px, &[0.0; 3]);
        }
    }
}

#[test]
fn rebuild_is_bit_identical() {
    let m = manifest(12, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = build_dataset(&m, a.path()).unwrap();
    let rb = build_dataset(&DatasetManifest::load(a.path()).unwrap(), b.path()).unwrap();
    assert_eq!(ra.written, 12);
    assert_eq!(ra.manifest_hash, rb.manifest_hash);
    let (da, db) = (directory_digest(a.path()).unwrap(), directory_digest(b.path()).unwrap());
    assert_eq!(da.len(), 12 * 3 + 1);
    assert_eq!(da, db);
    let ds = Dataset::open(a.path()).unwrap();
    assert_eq!(ds.train.len() + ds.test.len(), 12);
    let direct = generate_sample(&m, 7, &[]).unwrap();
    let loaded = ds.train.iter().chain(&ds.test).find(|s| s.meta.id == "s00007").unwrap();
    assert_eq!(loaded.fisheye.data(), direct.fisheye.data());
    assert_eq!(loaded.meta, direct.meta);
}

#[test]
fn source_directory_ingest_skips_bad_files() {
    let src = tempfile::tempdir().unwrap();
    Image::from_fn(40, 30, 3, |x, y, _| ((x + y) % 7) as f32 / 7.0)
        .save_png(src.path().join("a.png"))
        .unwrap();
    std::fs::write(src.path().join("b.png"), b"not an image").unwrap();
    let ing = ingest_and_crop(src.path(), 32).unwrap();
    assert_eq!(ing.images.len(), 1);
    assert_eq!(ing.skipped, vec!["b.png".to_string()]);
    let m = DatasetManifest::plan(3, 1, 32, SamplingMode::LogUniform, 0, Some(src.path().to_path_buf())).unwrap();
    let out = tempfile::tempdir().unwrap();
    build_dataset(&m, out.path()).unwrap();
    let loaded = DatasetManifest::load(out.path()).unwrap();
    assert_eq!(loaded.skipped, vec!["b.png".to_string()]);
    assert!(!out.path().join(".partial").exists());
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(ingest_and_crop(empty.path(), 32), Err(Error::Degenerate(_))));
}

#[test]
fn scenes_differ_by_seed() {
    let a = procedural_scene(&mut ChaCha8Rng::seed_from_u64(1), 32);
    let b = procedural_scene(&mut ChaCha8Rng::seed_from_u64(2), 32);
    assert_ne!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
