//! Real FFT helpers on top of `rustfft` with a per-thread planner cache.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        Arc::clone(cache.entry((n, inverse)).or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        }))
    })
}

/// One-sided spectrum length for an `n`-point real transform.
pub fn rfft_len(n: usize) -> usize {
    n / 2 + 1
}

/// Multiplicity of bin `f` when a one-sided spectrum is expanded to two sides.
pub fn rfft_bin_weight(f: usize, n: usize) -> f64 {
    if f == 0 || (n.is_multiple_of(2) && f == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// Unnormalized forward real FFT; returns `(re, im)` of length `n/2 + 1`.
pub fn rfft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan(n, false).process(&mut buf);
    let bins = rfft_len(n);
    (
        buf[..bins].iter().map(|c| c.re).collect(),
        buf[..bins].iter().map(|c| c.im).collect(),
    )
}

/// Inverse real FFT (with 1/n) of a one-sided spectrum to an `n`-point signal.
///
/// The imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft(re: &[f64], im: &[f64], n: usize) -> Vec<f64> {
    let bins = rfft_len(n);
    debug_assert_eq!(re.len(), bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..bins {
        buf[f] = Complex64::new(re[f], im[f]);
    }
    for f in 1..n - bins + 1 {
        buf[n - f] = buf[f].conj();
    }
    plan(n, true).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}
