use std::path::PathBuf;

use fishformer_core::image::Image;
use fishformer_core::metrics::{ms_ssim, psnr, ssim};

#[derive(serde::Deserialize)]
struct Reference {
    a: String,
    b: String,
    psnr: f64,
    ssim: f64,
    ms_ssim: f64,
}

#[test]
fn metrics_agree_with_frozen_reference_values() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics");
    let refs: Vec<Reference> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reference.json")).unwrap()).unwrap();
    assert_eq!(refs.len(), 5);
    for r in refs {
        let a = Image::load(dir.join(&r.a)).unwrap();
        let b = Image::load(dir.join(&r.b)).unwrap();
        let got = [psnr(&a, &b).unwrap(), ssim(&a, &b).unwrap(), ms_ssim(&a, &b).unwrap()];
        for (name, g, want) in [
            ("psnr", got[0], r.psnr),
            ("ssim", got[1], r.ssim),
            ("ms_ssim", got[2], r.ms_ssim),
        ] {
            assert!((g - want).abs() <= 1e-3, "{} {name}: {g} vs {want}", r.a);
        }
    }
}
