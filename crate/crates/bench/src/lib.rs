//! Deterministic inputs shared by the benchmarks.

use ndarray::Array2;

/// A `t × c` window of incommensurate sines, one phase per channel.
pub fn sine_window(t: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, c), |(i, j)| {
        let x = i as f64;
        (x / 7.3 + j as f64).sin() + 0.5 * (x / 2.9 + 2.0 * j as f64).cos()
    })
}

/// `n` scores with a bump over each of a few labeled ranges, plus a
/// low-amplitude ripple so ties are rare.
pub fn scored_series(n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut labels = vec![0u8; n];
    for start in (n / 10..n).step_by(n / 5 + 1) {
        labels[start..(start + 40).min(n)].fill(1);
    }
    let scores = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| 0.1 * ((i as f64) * 0.37).sin().abs() + 0.6 * f64::from(l))
        .collect();
    (scores, labels)
}
