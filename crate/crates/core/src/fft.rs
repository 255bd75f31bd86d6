//! Thin 2D FFT layer over rustfft with per-thread plan caching.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    })
}

fn fft_rows(a: &mut Array2<Complex64>, inverse: bool) {
    let n = a.ncols();
    if n == 0 {
        return;
    }
    let fft = plan(n, inverse);
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("rows of a standard-layout array");
        fft.process(slice);
    }
}

fn transposed(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().as_standard_layout().into_owned()
}

/// Unnormalized forward 2D DFT.
pub(crate) fn fft2(a: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = a.as_standard_layout().into_owned();
    fft_rows(&mut out, false);
    let mut t = transposed(&out);
    fft_rows(&mut t, false);
    transposed(&t)
}

/// Inverse 2D DFT, normalized by 1/(rows*cols).
pub(crate) fn ifft2(a: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = a.as_standard_layout().into_owned();
    fft_rows(&mut out, true);
    let mut t = transposed(&out);
    fft_rows(&mut t, true);
    let mut result = transposed(&t);
    let scale = 1.0 / (result.nrows() * result.ncols()) as f64;
    result.mapv_inplace(|v| v * scale);
    result
}

/// DFT sample frequencies as signed integer indices: 0, 1, ..., n/2, -(n/2-1), ..., -1.
pub(crate) fn freq_index(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k <= n / 2 {
                k as f64
            } else {
                k as f64 - n as f64
            }
        })
        .collect()
}

/// DFT sample frequencies in cycles per physical unit for sampling pitch `d`.
pub(crate) fn freq_physical(n: usize, d: f64) -> Vec<f64> {
    let scale = 1.0 / (n as f64 * d);
    freq_index(n).into_iter().map(|k| k * scale).collect()
}
