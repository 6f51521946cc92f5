//! Fixture helpers shared by the integration test binaries.

use std::path::Path;

use resmps_core::data::save_idx;

/// 4x4 images in two brightness classes: dark squares are class 0,
/// bright ones class 1, with deterministic per-pixel variety.
pub fn write_fixture(dir: &Path, n_train: usize, n_test: usize) {
    let make = |n: usize, phase: usize| -> (Vec<u8>, Vec<u8>) {
        let mut pixels = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            let base = if class == 0 { 20 } else { 150 };
            for j in 0..16 {
                pixels.push(base + (((i + phase) * 37 + j * 11) % 70) as u8);
            }
            labels.push(class);
        }
        (pixels, labels)
    };
    let (tp, tl) = make(n_train, 0);
    save_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        4,
        4,
        &tp,
        &tl,
    )
    .unwrap();
    let (vp, vl) = make(n_test, 1000);
    save_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        4,
        4,
        &vp,
        &vl,
    )
    .unwrap();
}

/// Drop the trailing (wall-clock) column of each metrics row.
pub fn strip_seconds(tsv: &str) -> String {
    tsv.lines()
        .map(|l| l.rsplit_once('\t').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}
