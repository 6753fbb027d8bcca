//! Dual-polarization symbol and waveform containers plus the transceiver
//! operations: symbol generation, root-raised-cosine pulse shaping, ideal
//! low-pass resampling, matched filtering, genie phase correction, and
//! effective-SNR accounting.
//!
//! All filtering is circular (block processing on a ring); the pulse used by
//! the shaping/matched pipeline is rendered by sampling the ideal RRC
//! magnitude spectrum on the DFT grid, which makes the cascade exactly
//! Nyquist on the ring. The closed-form time-domain taps are also available
//! (`rrc_taps`) for callers that need an explicit FIR.

use crate::error::{Error, Result};
use crate::{fft, C64};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};

// ── containers ──────────────────────────────────────────────────────────

/// A dual-polarization complex symbol sequence (one entry per symbol slot).
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSequence {
    x: Vec<C64>,
    y: Vec<C64>,
}

impl SymbolSequence {
    pub fn new(x: Vec<C64>, y: Vec<C64>) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!(
                "symbol sequence needs equal non-empty polarizations, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(SymbolSequence { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[C64] {
        &self.x
    }

    pub fn y(&self) -> &[C64] {
        &self.y
    }

    /// Total energy over both polarizations.
    pub fn energy(&self) -> f64 {
        norm_sq_pair(&self.x, &self.y)
    }
}

/// A dual-polarization waveform sampled at `sample_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPolSignal {
    x: Vec<C64>,
    y: Vec<C64>,
    sample_rate_hz: f64,
}

impl DualPolSignal {
    pub fn new(x: Vec<C64>, y: Vec<C64>, sample_rate_hz: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!(
                "signal needs equal non-empty polarizations, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::invalid(format!(
                "sample rate must be positive and finite, got {sample_rate_hz}"
            )));
        }
        Ok(DualPolSignal {
            x,
            y,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn x(&self) -> &[C64] {
        &self.x
    }

    pub fn y(&self) -> &[C64] {
        &self.y
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [C64], &mut [C64]) {
        (&mut self.x, &mut self.y)
    }

    /// Mean power (W) over both polarizations: `mean(|x|^2 + |y|^2)`.
    pub fn mean_power_w(&self) -> f64 {
        norm_sq_pair(&self.x, &self.y) / self.x.len() as f64
    }

    /// Total energy over both polarizations.
    pub fn energy(&self) -> f64 {
        norm_sq_pair(&self.x, &self.y)
    }
}

/// Root-raised-cosine pulse description.
///
/// `span_symbols` bounds the closed-form FIR rendering (`rrc_taps`); the
/// shaping/matched pipeline instead samples the pulse spectrum on the DFT
/// grid (`render_spectrum`), which is exactly Nyquist under circular
/// convolution regardless of span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseShape {
    pub rolloff: f64,
    pub span_symbols: usize,
    pub sps: usize,
}

impl PulseShape {
    pub fn new(rolloff: f64, span_symbols: usize, sps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rolloff) {
            return Err(Error::invalid(format!(
                "roll-off must lie in [0, 1], got {rolloff}"
            )));
        }
        if span_symbols == 0 || sps == 0 {
            return Err(Error::invalid(
                "pulse span and samples-per-symbol must be positive",
            ));
        }
        Ok(PulseShape {
            rolloff,
            span_symbols,
            sps,
        })
    }

    /// Unit-energy RRC spectrum sampled on an `n`-point DFT grid at this
    /// shape's oversampling. Real and even, so the pulse is zero-phase.
    pub fn render_spectrum(&self, n: usize) -> Vec<f64> {
        let beta = self.rolloff;
        let sps = self.sps as f64;
        let mut h = vec![0.0f64; n];
        let mut energy = 0.0;
        for (k, hv) in h.iter_mut().enumerate() {
            // |f| in units of the symbol rate.
            let k_signed = if 2 * k < n {
                k as f64
            } else {
                k as f64 - n as f64
            };
            let f = (k_signed / n as f64 * sps).abs();
            let lo = (1.0 - beta) / 2.0;
            let hi = (1.0 + beta) / 2.0;
            *hv = if f <= lo {
                1.0
            } else if f < hi && beta > 0.0 {
                (0.5 * (1.0 + (std::f64::consts::PI / beta * (f - lo)).cos())).sqrt()
            } else {
                0.0
            };
            energy += *hv * *hv;
        }
        // Parseval: time-domain energy == mean of |H|^2.
        let scale = (n as f64 / energy).sqrt();
        for hv in h.iter_mut() {
            *hv *= scale;
        }
        h
    }
}

// ── scalar conversions ──────────────────────────────────────────────────

/// dBm to watts; negative infinity maps to exactly zero power.
pub fn dbm_to_watts(power_dbm: f64) -> f64 {
    if power_dbm == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf((power_dbm - 30.0) / 10.0)
    }
}

// ── symbol generation ───────────────────────────────────────────────────

/// Draw `n_sym` dual-polarization symbols from a circular complex Gaussian
/// constellation at a total launch power of `power_dbm` (split equally
/// between the polarizations).
///
/// Draw order is pinned (per symbol: x-re, x-im, y-re, y-im) so a given
/// generator state yields a unique sequence.
pub fn generate_symbols<R: Rng>(n_sym: usize, power_dbm: f64, rng: &mut R) -> Result<SymbolSequence> {
    if n_sym == 0 {
        return Err(Error::invalid("symbol count must be positive"));
    }
    let per_pol_var = dbm_to_watts(power_dbm) / 2.0;
    let comp_std = (per_pol_var / 2.0).sqrt();
    let mut x = Vec::with_capacity(n_sym);
    let mut y = Vec::with_capacity(n_sym);
    for _ in 0..n_sym {
        let (xr, xi): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let (yr, yi): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        x.push(C64::new(xr * comp_std, xi * comp_std));
        y.push(C64::new(yr * comp_std, yi * comp_std));
    }
    SymbolSequence::new(x, y)
}

// ── pulse shaping and filtering ─────────────────────────────────────────

/// Closed-form time-domain root-raised-cosine taps: odd count
/// (`span_symbols * sps + 1`), symmetric, normalized to unit energy.
pub fn rrc_taps(shape: &PulseShape) -> Vec<f64> {
    let n = shape.span_symbols * shape.sps + 1;
    let beta = shape.rolloff;
    let mut taps = vec![0.0f64; n];
    for (i, tap) in taps.iter_mut().enumerate() {
        let t = (i as f64 - (n - 1) as f64 / 2.0) / shape.sps as f64; // symbol periods
        *tap = if t.abs() < 1e-12 {
            1.0 + beta * (4.0 / std::f64::consts::PI - 1.0)
        } else if beta > 0.0 && ((4.0 * beta * t).abs() - 1.0).abs() < 1e-9 {
            let a = std::f64::consts::PI / (4.0 * beta);
            beta / std::f64::consts::SQRT_2
                * ((1.0 + 2.0 / std::f64::consts::PI) * a.sin()
                    + (1.0 - 2.0 / std::f64::consts::PI) * a.cos())
        } else {
            let pi_t = std::f64::consts::PI * t;
            let num = (pi_t * (1.0 - beta)).sin() + 4.0 * beta * t * (pi_t * (1.0 + beta)).cos();
            let den = pi_t * (1.0 - (4.0 * beta * t).powi(2));
            num / den
        };
    }
    let energy: f64 = taps.iter().map(|v| v * v).sum();
    let scale = energy.sqrt().recip();
    for tap in taps.iter_mut() {
        *tap *= scale;
    }
    taps
}

/// Upsample symbols by zero insertion and shape with the RRC pulse, scaled
/// so the waveform's mean power equals the symbol variance (the per-symbol
/// pulse carries energy `sps`).
pub fn rrc_shape(
    symbols: &SymbolSequence,
    shape: &PulseShape,
    symbol_rate_hz: f64,
) -> Result<DualPolSignal> {
    if !(symbol_rate_hz > 0.0) {
        return Err(Error::invalid("symbol rate must be positive"));
    }
    let n = symbols.len() * shape.sps;
    let spectrum = shape.render_spectrum(n);
    let gain = (shape.sps as f64).sqrt();
    let shape_one = |syms: &[C64]| -> Vec<C64> {
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for (k, s) in syms.iter().enumerate() {
            buf[k * shape.sps] = *s;
        }
        fft::fft(&mut buf);
        for (v, h) in buf.iter_mut().zip(&spectrum) {
            *v *= gain * *h;
        }
        fft::ifft(&mut buf);
        buf
    };
    DualPolSignal::new(
        shape_one(symbols.x()),
        shape_one(symbols.y()),
        symbol_rate_hz * shape.sps as f64,
    )
}

/// Ideal brick-wall low-pass to `target_rate_hz` followed by decimation.
///
/// Bins with `|f| < target/2` are retained, all others zeroed; the
/// decimation factor must be integral. Idempotent at matched bandwidth.
pub fn lowpass_downsample(sig: &DualPolSignal, target_rate_hz: f64) -> Result<DualPolSignal> {
    let fs = sig.sample_rate_hz();
    if !(target_rate_hz > 0.0) || target_rate_hz > fs {
        return Err(Error::invalid(format!(
            "target rate {target_rate_hz} must lie in (0, {fs}]"
        )));
    }
    let ratio = fs / target_rate_hz;
    let factor = ratio.round() as usize;
    if factor == 0 || (ratio - factor as f64).abs() > 1e-9 {
        return Err(Error::mismatch(format!(
            "decimation factor {ratio} is not integral"
        )));
    }
    let n = sig.len();
    if n % factor != 0 {
        return Err(Error::mismatch(format!(
            "signal length {n} not divisible by decimation factor {factor}"
        )));
    }
    let freqs = fft::freq_grid_hz(n, fs);
    let half_bw = target_rate_hz / 2.0;
    let one = |samples: &[C64]| -> Vec<C64> {
        let mut buf = samples.to_vec();
        fft::fft(&mut buf);
        for (v, f) in buf.iter_mut().zip(&freqs) {
            if f.abs() >= half_bw {
                *v = C64::new(0.0, 0.0);
            }
        }
        fft::ifft(&mut buf);
        buf.into_iter().step_by(factor).collect()
    };
    DualPolSignal::new(one(sig.x()), one(sig.y()), target_rate_hz)
}

/// Matched filter (time-reversed conjugate of the pulse, which is the pulse
/// itself: real and even) followed by downsampling to the symbol rate.
///
/// The signal's rate must equal `symbol_rate_hz * shape.sps`.
pub fn matched_filter_downsample(
    sig: &DualPolSignal,
    shape: &PulseShape,
    symbol_rate_hz: f64,
) -> Result<SymbolSequence> {
    let want_fs = symbol_rate_hz * shape.sps as f64;
    if (sig.sample_rate_hz() - want_fs).abs() > 1e-6 * want_fs {
        return Err(Error::mismatch(format!(
            "signal rate {} does not match symbol rate x sps = {}",
            sig.sample_rate_hz(),
            want_fs
        )));
    }
    let n = sig.len();
    if n % shape.sps != 0 {
        return Err(Error::mismatch(format!(
            "signal length {n} not divisible by sps {}",
            shape.sps
        )));
    }
    let spectrum = shape.render_spectrum(n);
    let gain = matched_filter_gain(shape.sps);
    let one = |samples: &[C64]| -> Vec<C64> {
        let mut buf = samples.to_vec();
        fft::fft(&mut buf);
        for (v, h) in buf.iter_mut().zip(&spectrum) {
            *v *= gain * *h;
        }
        fft::ifft(&mut buf);
        buf.into_iter().step_by(shape.sps).collect()
    };
    SymbolSequence::new(one(sig.x()), one(sig.y()))
}

/// Inverse of the shaping gain: the composite per-symbol response is the
/// raised cosine with unit center tap.
pub(crate) fn matched_filter_gain(sps: usize) -> f64 {
    (sps as f64).sqrt() / sps as f64
}

// ── genie phase correction and effective SNR ────────────────────────────

/// Genie-aided common phase correction: rotates the estimate by
/// `exp(-j phi)` with `phi = arg(<reference, estimate>)`, the inner product
/// taken over both polarizations concatenated. Returns the corrected
/// estimate and `phi`.
pub fn genie_phase_correct(
    estimate: &SymbolSequence,
    reference: &SymbolSequence,
) -> Result<(SymbolSequence, f64)> {
    if estimate.len() != reference.len() {
        return Err(Error::mismatch(format!(
            "estimate length {} vs reference length {}",
            estimate.len(),
            reference.len()
        )));
    }
    if reference.energy() == 0.0 {
        return Err(Error::invalid("all-zero reference sequence"));
    }
    let z = inner_product_pair(
        reference.x(),
        reference.y(),
        estimate.x(),
        estimate.y(),
    );
    let phi = z.im.atan2(z.re);
    let rot = C64::new(phi.cos(), -phi.sin());
    let apply = |v: &[C64]| v.iter().map(|s| s * rot).collect::<Vec<_>>();
    Ok((
        SymbolSequence::new(apply(estimate.x()), apply(estimate.y()))?,
        phi,
    ))
}

/// Effective SNR of an estimate against the transmitted reference.
///
/// A perfect estimate has infinite SNR; that case is reported through the
/// dedicated [`Snr::Infinite`] sentinel rather than a floating-point
/// infinity so downstream statistics cannot silently absorb it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    Infinite,
}

impl Snr {
    /// Linear power ratio, if finite.
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Snr::Finite(r) => Some(*r),
            Snr::Infinite => None,
        }
    }

    /// Decibel value, if finite.
    pub fn db(&self) -> Option<f64> {
        self.ratio().map(|r| 10.0 * r.log10())
    }

    /// Decibel value; panics on the infinite sentinel (callers that have
    /// already ruled it out, e.g. noisy-channel evaluations).
    pub fn expect_finite_db(&self, context: &str) -> f64 {
        self.db()
            .unwrap_or_else(|| panic!("unexpected infinite SNR in {context}"))
    }
}

/// `||estimate||^2 / ||estimate - reference||^2` over both polarizations,
/// with compensated summation.
pub fn effective_snr(estimate: &SymbolSequence, reference: &SymbolSequence) -> Result<Snr> {
    let (num, den) = snr_sums(estimate, reference)?;
    if den == 0.0 {
        return Ok(Snr::Infinite);
    }
    Ok(Snr::Finite(num / den))
}

/// The two compensated sums behind both the effective SNR and the training
/// loss: `(||estimate||^2, ||estimate - reference||^2)`.
pub(crate) fn snr_sums(estimate: &SymbolSequence, reference: &SymbolSequence) -> Result<(f64, f64)> {
    if estimate.len() != reference.len() {
        return Err(Error::mismatch(format!(
            "estimate length {} vs reference length {}",
            estimate.len(),
            reference.len()
        )));
    }
    let mut num = NeumaierSum::default();
    let mut den = NeumaierSum::default();
    for (e, r) in estimate
        .x()
        .iter()
        .zip(reference.x())
        .chain(estimate.y().iter().zip(reference.y()))
    {
        num.add(e.norm_sqr());
        den.add((e - r).norm_sqr());
    }
    Ok((num.value(), den.value()))
}

/// Neumaier-compensated accumulator.
#[derive(Default)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn norm_sq_pair(x: &[C64], y: &[C64]) -> f64 {
    let mut acc = NeumaierSum::default();
    for v in x.iter().chain(y) {
        acc.add(v.norm_sqr());
    }
    acc.value()
}

pub(crate) fn inner_product_pair(ax: &[C64], ay: &[C64], bx: &[C64], by: &[C64]) -> C64 {
    let mut re = NeumaierSum::default();
    let mut im = NeumaierSum::default();
    for (a, b) in ax.iter().zip(bx).chain(ay.iter().zip(by)) {
        let p = a.conj() * b;
        re.add(p.re);
        im.add(p.im);
    }
    C64::new(re.value(), im.value())
}

// ── waveform persistence ────────────────────────────────────────────────

const WAVEFORM_MAGIC: &[u8; 4] = b"DPS1";

/// Write a waveform: magic `DPS1`, little-endian u32 sample count,
/// little-endian f64 sample rate, then interleaved little-endian f64
/// quadruples (re_x, im_x, re_y, im_y).
pub fn write_waveform<W: Write>(mut w: W, sig: &DualPolSignal) -> Result<()> {
    w.write_all(WAVEFORM_MAGIC)?;
    let n = u32::try_from(sig.len())
        .map_err(|_| Error::invalid(format!("waveform too long for format: {}", sig.len())))?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&sig.sample_rate_hz().to_le_bytes())?;
    for (xv, yv) in sig.x().iter().zip(sig.y()) {
        for comp in [xv.re, xv.im, yv.re, yv.im] {
            w.write_all(&comp.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a waveform written by [`write_waveform`], validating the header.
pub fn read_waveform<R: Read>(mut r: R) -> Result<DualPolSignal> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WAVEFORM_MAGIC {
        return Err(Error::format(format!(
            "bad waveform magic {magic:?}, expected {WAVEFORM_MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    if n == 0 {
        return Err(Error::format("waveform declares zero samples"));
    }
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf)?;
    let sample_rate_hz = f64::from_le_bytes(f64buf);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut quad = [0.0f64; 4];
        for q in quad.iter_mut() {
            r.read_exact(&mut f64buf).map_err(|e| {
                Error::format(format!("waveform truncated mid-sample: {e}"))
            })?;
            *q = f64::from_le_bytes(f64buf);
        }
        x.push(C64::new(quad[0], quad[1]));
        y.push(C64::new(quad[2], quad[3]));
    }
    DualPolSignal::new(x, y, sample_rate_hz)
}
