use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn toy(blocks: usize) -> FishformerConfig {
    FishformerConfig {
        image_size: 32,
        blocks,
        rings: 4,
        channels: 8,
        heads: 2,
        ..Default::default()
    }
}

fn random_image<T: Scalar>(seed: u64, size: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [size, size, 3],
        (0..size * size * 3).map(|_| T::of(rng.gen_range(0.0..1.0))).collect(),
    )
    .unwrap()
}

fn run<T: Scalar>(model: &Fishformer<T>, img: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<(Vec<usize>, Vec<T>)>) {
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let out = model.forward(&g, &p, &g.constant(img.clone())).unwrap();
    let attn = out.attention.iter().map(|a| (a.shape(), a.data())).collect();
    (out.global.data(), out.patches.data(), attn)
}

#[test]
fn shapes_ranges_and_attention_rows() {
    for slicing in [SlicingMode::Annulus, SlicingMode::Square] {
        let cfg = FishformerConfig { slicing, ..toy(3) };
        let model = Fishformer::<f32>::new(cfg, 1).unwrap();
        let (global, patches, attn) = run(&model, &random_image(2, 32));
        assert_eq!(global.len(), 4);
        assert_eq!(patches.len(), 4 * 4);
        assert!(global.iter().chain(&patches).all(|&v| v > 0.0 && v < 1.0));
        // Two layers per block plus one LAM stage.
        assert_eq!(attn.len(), 2 * 3 + 1);
        for (shape, data) in attn {
            assert_eq!(&shape[2..], &[TOKENS, TOKENS]);
            for row in data.chunks(TOKENS) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn ring_bookkeeping_per_block() {
    let cfg = FishformerConfig {
        image_size: 128,
        blocks: 5,
        rings: 16,
        ..Default::default()
    };
    let model = Fishformer::<f32>::new(cfg, 0).unwrap();
    let counts: Vec<usize> = model.partitions().iter().map(Partition::len).collect();
    assert_eq!(counts, vec![16, 8, 4, 2, 1]);
    let sizes: Vec<usize> = model.partitions().iter().map(Partition::width).collect();
    assert_eq!(sizes, vec![128, 64, 32, 16, 8]);
}

#[test]
fn config_validation() {
    assert!(matches!(Fishformer::<f32>::new(toy(1), 0), Err(Error::Config(_))));
    let too_many = FishformerConfig { rings: 32, ..toy(2) };
    assert!(Fishformer::<f32>::new(too_many, 0).is_err());
    let bad_square = FishformerConfig {
        slicing: SlicingMode::Square,
        rings: 8,
        ..toy(2)
    };
    assert!(Fishformer::<f32>::new(bad_square, 0).is_err());
}

#[test]
fn deterministic_given_seed() {
    let a = Fishformer::<f32>::new(toy(2), 7).unwrap();
    let b = Fishformer::<f32>::new(toy(2), 7).unwrap();
    assert_eq!(a.params(), b.params());
    let img = random_image(3, 32);
    assert_eq!(run(&a, &img).0, run(&b, &img).0);
}

#[test]
fn two_blocks_have_one_lam_stage_in_first_block_shape() {
    let model = Fishformer::<f64>::new(toy(2), 0).unwrap();
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = g.constant(
        Tensor::new(
            [4, TOKENS, 8],
            (0..4 * TOKENS * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap(),
    );
    let next = g.constant(Tensor::full([2, TOKENS, 16], 0.5));
    assert_eq!(model.lam.len(), 1);
    let (out, down, probs) = model.lam_stage(&g, &p, &model.lam[0], &q, &next).unwrap();
    assert_eq!(out.shape(), vec![4, TOKENS, 8]);
    assert!(down.is_none());
    for row in probs.data().chunks(TOKENS) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn deliver_builds_a_full_chain() {
    let cfg = FishformerConfig {
        deliver: true,
        ..toy(3)
    };
    let model = Fishformer::<f32>::new(cfg, 0).unwrap();
    assert_eq!(model.lam.len(), 2);
    let (global, _, attn) = run(&model, &random_image(5, 32));
    assert_eq!(attn.len(), 2 * 3 + 2);
    let plain = Fishformer::<f32>::new(toy(3), 0).unwrap();
    assert_ne!(global, run(&plain, &random_image(5, 32)).0);
}

#[test]
fn combination_modes_are_distinct() {
    let img = random_image(4, 32);
    let outputs: Vec<Vec<f64>> = LamCombo::ALL
        .iter()
        .map(|&lam_combo| {
            let m = Fishformer::<f64>::new(FishformerConfig { lam_combo, ..toy(2) }, 3).unwrap();
            run(&m, &img).1
        })
        .collect();
    for i in 0..6 {
        for j in i + 1..6 {
            assert_ne!(
                outputs[i],
                outputs[j],
                "{:?} vs {:?}",
                LamCombo::ALL[i],
                LamCombo::ALL[j]
            );
        }
    }
    let skip = run(&Fishformer::<f64>::new(toy(2), 3).unwrap(), &img).1;
    let lbl = Fishformer::<f64>::new(
        FishformerConfig {
            lam_chain: LamChain::LayerByLayer,
            ..toy(2)
        },
        3,
    )
    .unwrap();
    assert_ne!(skip, run(&lbl, &img).1);
}

#[test]
fn zeroed_output_layers_leave_tokens_unchanged() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = LeWinLayer::new(&mut store, &mut rng, "l", 8, 2, 2);
    for id in [
        layer.attn.proj.w,
        layer.attn.proj.b.unwrap(),
        layer.ffn.fc2.w,
        layer.ffn.fc2.b.unwrap(),
    ] {
        store.values_mut()[id].data_mut().fill(0.0);
    }
    let g = Graph::new();
    let p = store.bind(&g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let random = Tensor::new(
        [3, TOKENS, 8],
        (0..3 * TOKENS * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    for x in [Tensor::zeros([3, TOKENS, 8]), random] {
        let v = g.constant(x.clone());
        let (y, _) = layer.forward(&p, &v).unwrap();
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn downsample_shapes_constants_and_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let down = Downsample::new(&mut store, &mut rng, "d", 4);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let y = down.forward(&p, &g.constant(Tensor::full([8, 8, 4], 0.3))).unwrap();
    assert_eq!(y.shape(), vec![4, 4, 8]);
    let d = y.data();
    for px in d.chunks(8) {
        assert_eq!(px, &d[..8]);
    }
    assert!(down.forward(&p, &g.constant(Tensor::zeros([5, 4, 4]))).is_err());

    let mut small = ParamStore::<f64>::new();
    let down = Downsample::new(&mut small, &mut rng, "d", 3);
    let mut inputs = small.values().to_vec();
    inputs.push(random_image::<f64>(1, 4));
    let report = gradcheck::check(&inputs, |_, v| Ok(down.forward(v, &v[2])?.square().sum())).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn patch_head_is_per_row() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = Head::new(&mut store, &mut rng, "h", [6, 5, 4, 4]);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let rows = random_image::<f64>(2, 2).reshape([2, 6]).unwrap();
    let swapped = Tensor::new([2, 6], [&rows.data()[6..], &rows.data()[..6]].concat()).unwrap();
    let a = head.forward(&p, &g.constant(rows)).unwrap().data();
    let b = head.forward(&p, &g.constant(swapped)).unwrap().data();
    assert_eq!(&a[..4], &b[4..]);
    assert_eq!(&a[4..], &b[..4]);
}

#[test]
fn interpolation_rows_sum_to_one() {
    for (o, i) in [(8, 4), (4, 8), (3, 3), (1, 4), (4, 1)] {
        let m = interpolation_matrix::<f64>(o, i);
        for row in m.data().chunks(i) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(interpolation_matrix::<f64>(2, 2).data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ffwt");
    let model = Fishformer::<f32>::new(toy(2), 11).unwrap();
    model.save(&path).unwrap();
    let loaded = Fishformer::<f32>::load(&path).unwrap();
    assert_eq!(loaded.params(), model.params());
    let img = random_image(6, 32);
    let (a, b) = (run(&model, &img), run(&loaded, &img));
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

#[test]
fn checkpoint_version_and_magic_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ffwt");
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::full([2, 3], 1.5));
    write_checkpoint(&path, &store).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FFWT");
    assert_eq!(read_checkpoint(&path).unwrap(), store);
    bytes[4] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        read_checkpoint(&path),
        Err(Error::Version { found: 9, expected: 1 })
    ));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
}

#[test]
fn forward_gradients_match_finite_differences() {
    let model = Fishformer::<f64>::new(toy(2), 5).unwrap();
    let img = random_image::<f64>(8, 32);
    let inputs = model.params().values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let entries: Vec<(usize, usize)> = (0..200)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].len()))
        })
        .collect();
    let report = gradcheck::check_subset(&inputs, &entries, |g, p| {
        let out = model.forward(g, p, &g.constant(img.clone()))?;
        out.global.sum().add(&out.patches.square().mean())
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
