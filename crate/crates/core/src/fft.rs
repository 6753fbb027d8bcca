//! Shared FFT plumbing: cached plans, normalized inverse, frequency grids.
//!
//! Conventions used crate-wide:
//! - forward DFT `X[k] = sum_n x[n] exp(-j 2 pi k n / N)` (unnormalized),
//!   inverse carries the `1/N`;
//! - bin `k` corresponds to physical frequency `fftfreq(k) = k/N * fs` for
//!   `k < N/2` and `(k - N)/N * fs` otherwise;
//! - a positive group delay `tau` multiplies bin `k` by `exp(-j omega_k tau)`.

use crate::C64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type PlanMap = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<PlanMap>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = plans.lock().expect("fft plan cache poisoned");
    map.entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// In-place unnormalized forward DFT.
pub fn fft(buf: &mut [C64]) {
    plan(buf.len(), false).process(buf);
}

/// In-place inverse DFT, normalized by `1/N`.
pub fn ifft(buf: &mut [C64]) {
    let n = buf.len();
    plan(n, true).process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Forward DFT of a borrowed slice.
pub fn fft_of(x: &[C64]) -> Vec<C64> {
    let mut buf = x.to_vec();
    fft(&mut buf);
    buf
}

/// Inverse DFT of a borrowed slice (normalized).
pub fn ifft_of(x: &[C64]) -> Vec<C64> {
    let mut buf = x.to_vec();
    ifft(&mut buf);
    buf
}

/// Physical bin frequencies in Hz for an `n`-point grid at `sample_rate_hz`.
pub fn freq_grid_hz(n: usize, sample_rate_hz: f64) -> Vec<f64> {
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let k_signed = if 2 * k < n { k as f64 } else { k as f64 - nf };
            k_signed / nf * sample_rate_hz
        })
        .collect()
}

/// Angular bin frequencies in rad/ps (the unit system of the fiber math:
/// ps, km, W) for an `n`-point grid at `sample_rate_hz`.
pub fn omega_grid_rad_per_ps(n: usize, sample_rate_hz: f64) -> Vec<f64> {
    freq_grid_hz(n, sample_rate_hz)
        .into_iter()
        .map(|f_hz| 2.0 * std::f64::consts::PI * f_hz * 1e-12)
        .collect()
}
