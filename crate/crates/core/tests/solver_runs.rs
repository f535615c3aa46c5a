mod common;

use hazesplit_core::image::{load_image, ImagePlane};
use hazesplit_core::metrics::psnr;
use hazesplit_core::solver::{dehaze, SolverConfig};
use hazesplit_core::transfer::extract_style;

fn data(name: &str) -> ImagePlane {
    load_image(format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn haze_free_input_reconstructs_itself() {
    let clean = data("scene64.png");
    let cfg = SolverConfig {
        seed: 1,
        ..SolverConfig::default()
    };
    let (layers, record) = dehaze::<f32>(&clean, &cfg).unwrap();
    assert_eq!(record.losses.len(), 500);
    assert!(record.losses.last().unwrap().rec < record.losses[0].rec);
    let recon = layers.recompose().unwrap();
    let score = psnr(&recon, &clean).unwrap();
    println!("haze-free self-reconstruction: {score:.2} dB");
    assert!(score >= 30.0, "{score}");
    for plane in [&layers.radiance, &layers.transmission, &layers.airlight] {
        assert!(plane.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn style_extraction_keeps_source_dims_and_is_repeatable() {
    let mut r = common::rng(30);
    let hazy = common::random_plane(&mut r, 35, 42, 3);
    let cfg = SolverConfig {
        epochs: 4,
        seed: 9,
        ..SolverConfig::default()
    };
    let (a, ra) = extract_style::<f32>(&hazy, &cfg).unwrap();
    let (b, rb) = extract_style::<f32>(&hazy, &cfg).unwrap();
    assert_eq!(a.source_dims, (35, 42));
    assert_eq!(a.transmission.dims(), (35, 42));
    assert_eq!(a.airlight.dims(), (35, 42));
    assert_eq!(a, b);
    assert!(ra.same_trajectory(&rb));
}

#[test]
fn precision_is_recorded() {
    let mut r = common::rng(31);
    let hazy = common::random_plane(&mut r, 32, 32, 3);
    let cfg = SolverConfig {
        epochs: 2,
        ..SolverConfig::default()
    };
    let (_, rec) = dehaze::<f64>(&hazy, &cfg).unwrap();
    assert_eq!(rec.precision, "f64");
    assert_eq!(rec.losses.len(), 2);
}
