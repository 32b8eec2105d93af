use panicle_core::eval::{correlation_matrix, heatmap_svg, scatter_svg, PairedSeries};
use panicle_core::seeded_rng;
use rand::Rng;
use std::path::PathBuf;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Set PANICLE_BLESS=1 to rewrite the frozen files after an intended change.
fn check(name: &str, text: &str) {
    let path = golden(name);
    if std::env::var_os("PANICLE_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert!(want == text, "{name} differs from the frozen copy");
}

#[test]
fn frozen_plots() {
    let mut rng = seeded_rng(2024);
    let meas: Vec<f64> = (0..20).map(|_| rng.random_range(14.0..26.0)).collect();
    let pred: Vec<f64> = meas.iter().map(|m| m + rng.random_range(-0.6..0.6)).collect();
    let s = PairedSeries::new("length", "cm", pred.clone(), meas.clone()).unwrap();
    check("scatter_length.svg", &scatter_svg(&s));

    let volume: Vec<f64> = meas.iter().map(|m| 0.2 * m + rng.random_range(-0.5..0.5)).collect();
    let c = correlation_matrix(&[
        ("length".into(), meas),
        ("predicted".into(), pred),
        ("volume".into(), volume),
    ])
    .unwrap();
    check("heatmap.svg", &heatmap_svg(&c));
}
