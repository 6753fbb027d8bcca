//! Reverse-mode gradients through the inverse model and the receiver
//! chain (matched filter, genie phase correction, normalized MSE).
//!
//! Complex quantities use the real-pair convention: the adjoint of a
//! complex value `z` is `dL/dRe(z) + j dL/dIm(z)`, so complex parameters
//! contribute two independent real gradient entries. For a complex-linear
//! map `w = A u` this gives `u~ = A^H w~`; for the unnormalized DFT the
//! adjoint is `N * ifft`, and for the normalized inverse it is `fft / N`
//! (the factors cancel along a filter, and are carried explicitly into
//! the parameter-gradient sums).

use crate::model::{
    self, DgdParams, LdbpModel, LdbpStep, PreparedLinear, PreparedStep, RotationParams,
};
use crate::signal::{
    inner_product_pair, matched_filter_downsample, matched_filter_gain, snr_sums,
    DualPolSignal, PulseShape, SymbolSequence,
};
use crate::{fft, C64, Error, Result};

// ── forward recording ───────────────────────────────────────────────────

struct StepCache {
    /// Spectrum of the step input (both polarizations).
    input_spec: (Vec<C64>, Vec<C64>),
    /// Time-domain input of the Kerr activation, when the step has one.
    kerr_input: Option<(Vec<C64>, Vec<C64>)>,
}

/// Intermediate values recorded by one forward pass of the model,
/// sufficient to replay the chain rule backwards.
pub struct GradientTape {
    steps: Vec<StepCache>,
    output: DualPolSignal,
}

impl GradientTape {
    /// Run the model over `input`, recording per-step intermediates.
    pub(crate) fn record(
        model: &LdbpModel,
        prepared: &[PreparedStep],
        input: &DualPolSignal,
    ) -> Result<GradientTape> {
        if (input.sample_rate_hz() - model.sample_rate_hz).abs()
            > 1e-6 * model.sample_rate_hz
        {
            return Err(Error::mismatch(format!(
                "input rate {} != model rate {}",
                input.sample_rate_hz(),
                model.sample_rate_hz
            )));
        }
        if prepared.len() != model.steps.len() {
            return Err(Error::mismatch(
                "prepared factors do not match the model".to_string(),
            ));
        }
        let mut x = input.x().to_vec();
        let mut y = input.y().to_vec();
        let mut steps = Vec::with_capacity(prepared.len());
        for step in prepared {
            fft::fft(&mut x);
            fft::fft(&mut y);
            let input_spec = (x.clone(), y.clone());
            for (k, m) in step.combined.iter().enumerate() {
                let (a, b) = (x[k], y[k]);
                x[k] = m[0] * a + m[1] * b;
                y[k] = m[2] * a + m[3] * b;
            }
            fft::ifft(&mut x);
            fft::ifft(&mut y);
            let kerr_input = if step.theta != 0.0 {
                let cache = (x.clone(), y.clone());
                model::kerr_in_place(&mut x, &mut y, step.theta);
                Some(cache)
            } else {
                None
            };
            steps.push(StepCache { input_spec, kerr_input });
        }
        Ok(GradientTape {
            steps,
            output: DualPolSignal::new(x, y, model.sample_rate_hz)?,
        })
    }

    pub(crate) fn output(&self) -> &DualPolSignal {
        &self.output
    }

    /// Pull an adjoint of the model output back to parameter gradients
    /// (flat, aligned with [`LdbpModel::pack_params`], frozen groups
    /// included) and the adjoint of the model input.
    pub(crate) fn backward(
        &self,
        model: &LdbpModel,
        prepared: &[PreparedStep],
        adj_out: (&[C64], &[C64]),
    ) -> Result<(Vec<f64>, (Vec<C64>, Vec<C64>))> {
        let n = self.output.len();
        if adj_out.0.len() != n || adj_out.1.len() != n {
            return Err(Error::mismatch("adjoint length != signal length".to_string()));
        }
        let mut grads = vec![0.0; model.n_params()];
        let mut offsets = Vec::with_capacity(model.steps.len());
        let mut acc = 0;
        for step in &model.steps {
            offsets.push(acc);
            let (cd, dgd, rot) = step.param_group_counts();
            acc += cd + dgd + rot;
        }

        let mut ax = adj_out.0.to_vec();
        let mut ay = adj_out.1.to_vec();
        for k in (0..model.steps.len()).rev() {
            let step = &model.steps[k];
            let pstep = &prepared[k];
            let cache = &self.steps[k];

            if let Some((vx, vy)) = &cache.kerr_input {
                backprop_kerr(&mut ax, &mut ay, vx, vy, pstep.theta);
            }

            // Adjoint of the linear part: with `as = fft(a)` (unnormalized;
            // `N x` the true per-bin adjoint), parameter sums pick up the
            // 1/N once, and the input adjoint is a plain ifft at the end.
            fft::fft(&mut ax);
            fft::fft(&mut ay);
            let (ux, uy) = &cache.input_spec;
            backprop_linear_step(
                step,
                pstep,
                model,
                ux,
                uy,
                &mut ax,
                &mut ay,
                &mut grads[offsets[k]..],
            )?;
            fft::ifft(&mut ax);
            fft::ifft(&mut ay);
        }
        Ok((grads, (ax, ay)))
    }
}

/// Kerr activation `w = u exp(j theta ||u||^2)` pulled backwards:
/// `u~ = w~ e^{-j phi} - 2 theta S u` with
/// `S = Im(conj(w~_x) w_x + conj(w~_y) w_y)` per sample.
fn backprop_kerr(ax: &mut [C64], ay: &mut [C64], vx: &[C64], vy: &[C64], theta: f64) {
    for i in 0..ax.len() {
        let phi = theta * (vx[i].norm_sqr() + vy[i].norm_sqr());
        let rot = C64::from_polar(1.0, phi);
        let wx = vx[i] * rot;
        let wy = vy[i] * rot;
        let s = (ax[i].conj() * wx + ay[i].conj() * wy).im;
        let coef = 2.0 * theta * s;
        ax[i] = ax[i] * rot.conj() - coef * vx[i];
        ay[i] = ay[i] * rot.conj() - coef * vy[i];
    }
}

/// Adjoint of one combined linear step in the frequency domain.
///
/// Inputs: `u` = cached input spectrum, `a` = unnormalized adjoint
/// spectrum of the step output (overwritten in place with the input's).
/// `grads` starts at this step's slice of the flat gradient vector.
#[allow(clippy::too_many_arguments)]
fn backprop_linear_step(
    step: &LdbpStep,
    pstep: &PreparedStep,
    model: &LdbpModel,
    ux: &[C64],
    uy: &[C64],
    ax: &mut [C64],
    ay: &mut [C64],
    grads: &mut [f64],
) -> Result<()> {
    let n = ux.len();
    let inv_n = 1.0 / n as f64;
    let (cd_count, dgd_count, _) = step.param_group_counts();

    match &pstep.linear {
        PreparedLinear::Decomposed { cd, dgd_x, dgd_y, rotation } => {
            let r = rotation;
            let mut cd_adj = vec![C64::new(0.0, 0.0); n];
            let mut dx_adj = vec![C64::new(0.0, 0.0); n];
            let mut dy_adj = vec![C64::new(0.0, 0.0); n];
            let mut r_adj = [C64::new(0.0, 0.0); 4];
            for k in 0..n {
                let px = cd[k] * ux[k];
                let py = cd[k] * uy[k];
                let gx = dgd_x[k] * px;
                let gy = dgd_y[k] * py;
                let (vx, vy) = (ax[k], ay[k]);
                // rotation entries: V = R G
                r_adj[0] += vx * gx.conj();
                r_adj[1] += vx * gy.conj();
                r_adj[2] += vy * gx.conj();
                r_adj[3] += vy * gy.conj();
                // through the rotation: Q = R^H V
                let qx = r[0].conj() * vx + r[2].conj() * vy;
                let qy = r[1].conj() * vx + r[3].conj() * vy;
                // delay-filter responses are per-polarization scalars
                dx_adj[k] = qx * px.conj();
                dy_adj[k] = qy * py.conj();
                // through the delay: P~ = conj(D) Q
                let pax = dgd_x[k].conj() * qx;
                let pay = dgd_y[k].conj() * qy;
                // scalar dispersion response feeds both polarizations
                cd_adj[k] = pax * ux[k].conj() + pay * uy[k].conj();
                // through the dispersion filter to the step input
                ax[k] = cd[k].conj() * pax;
                ay[k] = cd[k].conj() * pay;
            }

            accumulate_cd_grads(&mut grads[..cd_count], &cd_adj);

            let dgd_grads = &mut grads[cd_count..cd_count + dgd_count];
            match &step.dgd {
                DgdParams::FreeTaps(taps) => {
                    accumulate_dgd_tap_grads(dgd_grads, &dx_adj, &dy_adj, taps.len());
                }
                DgdParams::LagrangeDelay { tau_ps, n_taps } => {
                    let f = *n_taps;
                    let mut tap_grads = vec![0.0; f];
                    accumulate_dgd_tap_grads(&mut tap_grads, &dx_adj, &dy_adj, f);
                    let x = model::delay_samples(*tau_ps, model.sample_rate_hz)
                        + (f / 2) as f64;
                    let scale = 0.5e-12 * model.sample_rate_hz;
                    let dd = model::lagrange_basis_derivative(x, f);
                    dgd_grads[0] = tap_grads
                        .iter()
                        .zip(&dd)
                        .map(|(g, d)| g * d * scale)
                        .sum();
                }
                DgdParams::Mimo(_) => unreachable!("decomposed step with MIMO taps"),
            }

            let rot_grads = &mut grads[cd_count + dgd_count..];
            match &step.rotation {
                RotationParams::Free(_) => {
                    for (i, g) in r_adj.iter().enumerate() {
                        rot_grads[2 * i] = g.re * inv_n;
                        rot_grads[2 * i + 1] = g.im * inv_n;
                    }
                }
                RotationParams::Su2Star { .. } => {
                    // R = [[a, b], [-conj(b), conj(a)]]:
                    // a~ = R~_00 + conj(R~_11), b~ = R~_01 - conj(R~_10)
                    let a_adj = (r_adj[0] + r_adj[3].conj()) * inv_n;
                    let b_adj = (r_adj[1] - r_adj[2].conj()) * inv_n;
                    rot_grads[0] = a_adj.re;
                    rot_grads[1] = a_adj.im;
                    rot_grads[2] = b_adj.re;
                    rot_grads[3] = b_adj.im;
                }
                RotationParams::None => {
                    return Err(Error::invalid("decomposed step without rotation"))
                }
            }
        }
        PreparedLinear::Mimo { cd, w } => {
            let mut cd_adj = vec![C64::new(0.0, 0.0); n];
            let mut w_adj: [Vec<C64>; 4] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]);
            for k in 0..n {
                let px = cd[k] * ux[k];
                let py = cd[k] * uy[k];
                let (vx, vy) = (ax[k], ay[k]);
                w_adj[0][k] = vx * px.conj();
                w_adj[1][k] = vx * py.conj();
                w_adj[2][k] = vy * px.conj();
                w_adj[3][k] = vy * py.conj();
                // through the MIMO filter: P~ = W^H V
                let m = &w[k];
                let pax = m[0].conj() * vx + m[2].conj() * vy;
                let pay = m[1].conj() * vx + m[3].conj() * vy;
                cd_adj[k] = pax * ux[k].conj() + pay * uy[k].conj();
                ax[k] = cd[k].conj() * pax;
                ay[k] = cd[k].conj() * pay;
            }

            accumulate_cd_grads(&mut grads[..cd_count], &cd_adj);

            let DgdParams::Mimo(taps) = &step.dgd else {
                return Err(Error::invalid("MIMO factors for a decomposed step"));
            };
            let f = taps.len();
            let center = f / 2;
            let dgd_grads = &mut grads[cd_count..cd_count + dgd_count];
            for (entry, spec_adj) in w_adj.iter_mut().enumerate() {
                fft::ifft(spec_adj);
                for m in 0..f {
                    let g = spec_adj[(m + n - center) % n];
                    dgd_grads[8 * m + 2 * entry] = g.re;
                    dgd_grads[8 * m + 2 * entry + 1] = g.im;
                }
            }
        }
    }
    Ok(())
}

/// Symmetric-half dispersion-tap gradients from the per-bin adjoint of
/// the (scalar, both-polarization) filter response.
fn accumulate_cd_grads(grads: &mut [f64], cd_adj: &[C64]) {
    let n = cd_adj.len();
    let mut lags = cd_adj.to_vec();
    fft::ifft(&mut lags);
    let half = grads.len() / 2;
    for i in 0..half {
        let g = if i == 0 {
            lags[0]
        } else {
            lags[i] + lags[n - i]
        };
        grads[2 * i] = g.re;
        grads[2 * i + 1] = g.im;
    }
}

/// Real delay-tap gradients: the x branch reads lag `(m - c)`, the
/// flipped y branch lag `(F - 1 - m - c)`.
fn accumulate_dgd_tap_grads(grads: &mut [f64], dx_adj: &[C64], dy_adj: &[C64], f: usize) {
    let n = dx_adj.len();
    let center = f / 2;
    let mut lags_x = dx_adj.to_vec();
    let mut lags_y = dy_adj.to_vec();
    fft::ifft(&mut lags_x);
    fft::ifft(&mut lags_y);
    for m in 0..f {
        let ix = (m + n - center) % n;
        let iy = (f - 1 - m + n - center) % n;
        grads[m] = lags_x[ix].re + lags_y[iy].re;
    }
}

// ── receiver-chain adjoints ─────────────────────────────────────────────

/// NMSE `||e - r||^2 / ||e||^2` and the adjoint of the estimate.
pub(crate) fn nmse_value_and_adjoint(
    estimate: &SymbolSequence,
    reference: &SymbolSequence,
) -> Result<(f64, Vec<C64>, Vec<C64>)> {
    let (num, den) = snr_sums(estimate, reference)?;
    if num == 0.0 {
        return Err(Error::invalid("all-zero estimate has undefined NMSE"));
    }
    let loss = den / num;
    // d(den)/de = 2(e - r), d(num)/de = 2e; quotient rule
    let scale = 1.0 / (num * num);
    let adj = |e: &[C64], r: &[C64]| -> Vec<C64> {
        e.iter()
            .zip(r)
            .map(|(ev, rv)| ((ev - rv) * num - ev * den) * 2.0 * scale)
            .collect()
    };
    Ok((
        loss,
        adj(estimate.x(), reference.x()),
        adj(estimate.y(), reference.y()),
    ))
}

/// Forward genie phase correction that also returns what the backward
/// pass needs: the corrected estimate, `exp(-j phi)`, and the inner
/// product `z = <r, e>`.
fn genie_forward(
    estimate: &SymbolSequence,
    reference: &SymbolSequence,
) -> Result<(SymbolSequence, C64, C64)> {
    if estimate.len() != reference.len() {
        return Err(Error::mismatch("genie reference length mismatch".to_string()));
    }
    let z = inner_product_pair(reference.x(), reference.y(), estimate.x(), estimate.y());
    if z.norm_sqr() == 0.0 {
        return Err(Error::invalid(
            "estimate orthogonal to reference: genie phase undefined",
        ));
    }
    let rot = (z / z.norm()).conj();
    let apply = |v: &[C64]| v.iter().map(|s| s * rot).collect::<Vec<_>>();
    Ok((
        SymbolSequence::new(apply(estimate.x()), apply(estimate.y()))?,
        rot,
        z,
    ))
}

/// Adjoint of `out = e * exp(-j phi)`, `phi = arg(z)`, `z = <r, e>`:
/// `e~ = out~ e^{j phi} + j Im(T) z r / |z|^2` with `T = <out~, out>`
/// (conjugation on the adjoint side).
fn genie_backward(
    out: &SymbolSequence,
    adj_out_x: &[C64],
    adj_out_y: &[C64],
    reference: &SymbolSequence,
    rot: C64,
    z: C64,
) -> (Vec<C64>, Vec<C64>) {
    let t = inner_product_pair(adj_out_x, adj_out_y, out.x(), out.y());
    let coef = C64::new(0.0, t.im / z.norm_sqr()) * z;
    let back = |adj: &[C64], r: &[C64]| -> Vec<C64> {
        adj.iter()
            .zip(r)
            .map(|(a, rv)| a * rot.conj() + coef * rv)
            .collect()
    };
    (
        back(adj_out_x, reference.x()),
        back(adj_out_y, reference.y()),
    )
}

/// Adjoint of the matched filter + decimation: zero-stuff the symbol
/// adjoints, then apply the same (real) filter response.
fn matched_filter_adjoint(
    adj_x: &[C64],
    adj_y: &[C64],
    shape: &PulseShape,
    n_samples: usize,
) -> (Vec<C64>, Vec<C64>) {
    let spectrum = shape.render_spectrum(n_samples);
    let gain = matched_filter_gain(shape.sps);
    let one = |adj: &[C64]| -> Vec<C64> {
        let mut buf = vec![C64::new(0.0, 0.0); n_samples];
        for (k, a) in adj.iter().enumerate() {
            buf[k * shape.sps] = *a;
        }
        fft::fft(&mut buf);
        for (v, h) in buf.iter_mut().zip(&spectrum) {
            *v *= gain * *h;
        }
        fft::ifft(&mut buf);
        buf
    };
    (one(adj_x), one(adj_y))
}

// ── the full differentiated pipeline for one minibatch element ──────────

/// Loss and parameter gradient of one received sequence: model forward,
/// matched filter + downsample, genie phase correction, NMSE — all inside
/// the differentiated path. Gradient entries of frozen parameter groups
/// are zeroed. Also returns the corrected symbol estimate for metrics.
pub(crate) fn element_loss_and_grad(
    model: &LdbpModel,
    prepared: &[PreparedStep],
    received: &DualPolSignal,
    reference: &SymbolSequence,
    rx_pulse: &PulseShape,
    symbol_rate_hz: f64,
) -> Result<(f64, Vec<f64>, SymbolSequence)> {
    let tape = GradientTape::record(model, prepared, received)?;
    let raw_estimate = matched_filter_downsample(tape.output(), rx_pulse, symbol_rate_hz)?;
    let (estimate, rot, z) = genie_forward(&raw_estimate, reference)?;
    let (loss, adj_x, adj_y) = nmse_value_and_adjoint(&estimate, reference)?;
    let (adj_x, adj_y) = genie_backward(&estimate, &adj_x, &adj_y, reference, rot, z);
    let (adj_x, adj_y) =
        matched_filter_adjoint(&adj_x, &adj_y, rx_pulse, tape.output().len());
    let (mut grads, _) = tape.backward(model, prepared, (&adj_x, &adj_y))?;
    for (g, trainable) in grads.iter_mut().zip(model.trainable_mask()) {
        if !trainable {
            *g = 0.0;
        }
    }
    Ok((loss, grads, estimate))
}

/// Loss of one received sequence without gradients (validation path);
/// returns the NMSE and the genie-corrected estimate.
pub(crate) fn element_loss(
    model: &LdbpModel,
    prepared: &[PreparedStep],
    received: &DualPolSignal,
    reference: &SymbolSequence,
    rx_pulse: &PulseShape,
    symbol_rate_hz: f64,
) -> Result<(f64, SymbolSequence)> {
    let out = model.forward_prepared(prepared, received)?;
    let raw_estimate = matched_filter_downsample(&out, rx_pulse, symbol_rate_hz)?;
    let (estimate, _, _) = genie_forward(&raw_estimate, reference)?;
    let (num, den) = snr_sums(&estimate, reference)?;
    if num == 0.0 {
        return Err(Error::invalid("all-zero estimate has undefined NMSE"));
    }
    Ok((den / num, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        init_model, reinit_polarization, Parameterization, RotationInit, StepTrainable,
    };
    use crate::plan::model_plan;
    use crate::rng;
    use crate::signal::{effective_snr, generate_symbols};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RX_RATE_HZ: f64 = 64e9;
    const SYMBOL_RATE_HZ: f64 = 32e9;

    fn desk_fiber() -> crate::channel::FiberParams {
        crate::channel::FiberParams {
            alpha_db_per_km: 0.2,
            beta2_ps2_per_km: -21.67,
            gamma_rad_per_w_km: 1.2,
            tau_pmd_ps_per_sqrt_km: 0.2,
            correlation_length_km: 0.5,
            span_length_km: 100.0,
            n_spans: 2,
            noise_figure_db: 4.5,
            center_wavelength_nm: 1550.0,
        }
    }

    fn random_signal(n: usize, seed: u64) -> DualPolSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect::<Vec<_>>()
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        DualPolSignal::new(x, y, RX_RATE_HZ).unwrap()
    }

    fn random_symbols(n: usize, seed: u64) -> SymbolSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_symbols(n, 0.0, &mut rng).unwrap()
    }

    /// A small two-step model with every group filled in, for gradient
    /// checks. `nl` enables the Kerr activations.
    fn small_model(p: Parameterization, seed: u64, nonlinear: bool) -> LdbpModel {
        let fp = crate::channel::FiberParams {
            n_spans: 1,
            span_length_km: 10.0,
            ..desk_fiber()
        };
        let plan = model_plan(&fp, 2, 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = init_model(
            &plan,
            p,
            RotationInit::RandomSu2,
            5,
            fp.beta2_ps2_per_km,
            // The test signal carries unit-scale sample power, so the real
            // fiber coefficient already yields ~1.4 rad of Kerr phase per
            // step: strongly nonlinear, yet smooth enough that a 1e-6
            // central difference resolves the true derivative.
            if nonlinear { fp.gamma_rad_per_w_km } else { 0.0 },
            RX_RATE_HZ,
            &mut rng,
        )
        .unwrap();
        // move everything off the identity so no gradient is trivially zero
        let v: Vec<f64> = model
            .pack_params()
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.03 * ((i as f64 * 2.7).sin()))
            .collect();
        model.unpack_params(&v).unwrap();
        model
    }

    fn pipeline_loss(
        model: &LdbpModel,
        received: &DualPolSignal,
        reference: &SymbolSequence,
        rx_pulse: &PulseShape,
    ) -> f64 {
        let prepared = model.prepare(received.len()).unwrap();
        element_loss(model, &prepared, received, reference, rx_pulse, SYMBOL_RATE_HZ)
            .unwrap()
            .0
    }

    /// Central finite differences over every coordinate.
    fn finite_difference_grad(
        model: &LdbpModel,
        received: &DualPolSignal,
        reference: &SymbolSequence,
        rx_pulse: &PulseShape,
    ) -> Vec<f64> {
        let base = model.pack_params();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let h = 1e-6 * base[i].abs().max(1.0);
            let mut probe = model.clone();
            let mut v = base.clone();
            v[i] = base[i] + h;
            probe.unpack_params(&v).unwrap();
            let hi = pipeline_loss(&probe, received, reference, rx_pulse);
            v[i] = base[i] - h;
            probe.unpack_params(&v).unwrap();
            let lo = pipeline_loss(&probe, received, reference, rx_pulse);
            grad[i] = (hi - lo) / (2.0 * h);
        }
        grad
    }

    fn check_gradients(p: Parameterization, nonlinear: bool, seed: u64) {
        let model = small_model(p, seed, nonlinear);
        let n_sym = 32;
        let received = random_signal(2 * n_sym, seed + 100);
        let reference = random_symbols(n_sym, seed + 200);
        let rx_pulse = PulseShape::new(0.1, 16, 2).unwrap();

        let prepared = model.prepare(received.len()).unwrap();
        // the recording pass must reproduce the plain forward bit for bit
        let tape = GradientTape::record(&model, &prepared, &received).unwrap();
        let direct = model.forward_prepared(&prepared, &received).unwrap();
        for (a, b) in tape
            .output()
            .x()
            .iter()
            .chain(tape.output().y())
            .zip(direct.x().iter().chain(direct.y()))
        {
            assert_eq!(a, b);
        }
        let (loss, grads, _) = element_loss_and_grad(
            &model,
            &prepared,
            &received,
            &reference,
            &rx_pulse,
            SYMBOL_RATE_HZ,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);

        let fd = finite_difference_grad(&model, &received, &reference, &rx_pulse);
        let scale = fd.iter().map(|g| g.abs()).fold(0.0f64, f64::max);
        assert!(scale > 0.0, "degenerate test: all-zero gradient");
        for (i, (a, f)) in grads.iter().zip(&fd).enumerate() {
            let rel = (a - f).abs() / f.abs().max(1e-8 * scale);
            assert!(
                rel < 1e-5,
                "{p}: coordinate {i}: analytic {a} vs finite-difference {f} (rel {rel})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_free_dgd_su2_star() {
        check_gradients(Parameterization::FreeDgdSu2Star, true, 1);
    }

    #[test]
    fn gradients_match_finite_differences_free_dgd_free_matrix() {
        check_gradients(Parameterization::FreeDgdFreeMatrix, true, 2);
    }

    #[test]
    fn gradients_match_finite_differences_free_mimo() {
        check_gradients(Parameterization::FreeMimo, true, 3);
    }

    #[test]
    fn gradients_match_finite_differences_lagrange_free_matrix() {
        check_gradients(Parameterization::LagrangeFreeMatrix, true, 4);
    }

    #[test]
    fn gradients_match_finite_differences_lagrange_su2_star() {
        check_gradients(Parameterization::LagrangeSu2Star, true, 5);
    }

    #[test]
    fn gradients_match_finite_differences_linear_model() {
        check_gradients(Parameterization::FreeDgdFreeMatrix, false, 6);
    }

    #[test]
    fn single_tap_gradient_matches_the_least_squares_closed_form() {
        // one step, one complex dispersion tap c, identity elsewhere,
        // gamma = 0: the model output is c * v, and
        // NMSE(c) = ||c v - s||^2 / (|c|^2 ||v||^2) has a closed-form
        // gradient by the quotient rule.
        let mut model = small_model(Parameterization::FreeDgdFreeMatrix, 7, false);
        model.steps.truncate(1);
        let step = &mut model.steps[0];
        let c0 = C64::new(0.9, -0.35);
        step.cd_taps_half = vec![c0];
        let mut delta = vec![0.0; 5];
        delta[2] = 1.0;
        step.dgd = DgdParams::FreeTaps(delta);
        step.rotation = RotationParams::Free([
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
        ]);
        step.nonlinear_length_km = 0.0;

        let n = 64;
        let v = random_signal(n, 8);
        let s = random_symbols(n, 9);
        // bypass matched filter and genie: drive tape internals directly
        let prepared = model.prepare(n).unwrap();
        let tape = GradientTape::record(&model, &prepared, &v).unwrap();
        let est = SymbolSequence::new(tape.output().x().to_vec(), tape.output().y().to_vec())
            .unwrap();
        let (loss, adj_x, adj_y) = nmse_value_and_adjoint(&est, &s).unwrap();
        let (grads, _) = tape.backward(&model, &prepared, (&adj_x, &adj_y)).unwrap();

        // closed form
        let vv: f64 = v.x().iter().chain(v.y()).map(|z| z.norm_sqr()).sum();
        let vs: C64 = v
            .x()
            .iter()
            .zip(s.x())
            .chain(v.y().iter().zip(s.y()))
            .map(|(a, b)| a.conj() * b)
            .sum();
        let ss: f64 = s.x().iter().chain(s.y()).map(|z| z.norm_sqr()).sum();
        let num = c0.norm_sqr() * vv; // ||c v||^2
        let den = c0.norm_sqr() * vv - 2.0 * (c0.conj() * vs).re + ss;
        assert!((loss - den / num).abs() < 1e-12);
        let den_adj = 2.0 * (c0 * vv - vs);
        let num_adj = 2.0 * c0 * vv;
        let want = (den_adj * num - num_adj * den) / (num * num);
        assert!(
            (grads[0] - want.re).abs() < 1e-10 && (grads[1] - want.im).abs() < 1e-10,
            "got ({}, {}), want {want}",
            grads[0],
            grads[1]
        );
    }

    #[test]
    fn frozen_groups_produce_zero_gradient_entries() {
        let mut model = small_model(Parameterization::FreeDgdSu2Star, 10, true);
        model.set_trainable(false, true, true);
        let received = random_signal(64, 11);
        let reference = random_symbols(32, 12);
        let rx_pulse = PulseShape::new(0.1, 16, 2).unwrap();
        let prepared = model.prepare(64).unwrap();
        let (_, grads, _) = element_loss_and_grad(
            &model,
            &prepared,
            &received,
            &reference,
            &rx_pulse,
            SYMBOL_RATE_HZ,
        )
        .unwrap();
        let mask = model.trainable_mask();
        let mut frozen_seen = 0;
        let mut live = 0.0f64;
        for (g, trainable) in grads.iter().zip(mask) {
            if trainable {
                live += g.abs();
            } else {
                assert_eq!(*g, 0.0);
                frozen_seen += 1;
            }
        }
        assert!(frozen_seen > 0 && live > 0.0);
    }

    #[test]
    fn nmse_is_the_reciprocal_of_effective_snr() {
        let est = random_symbols(48, 13);
        let reference = random_symbols(48, 14);
        let (loss, _, _) = nmse_value_and_adjoint(&est, &reference).unwrap();
        let snr = effective_snr(&est, &reference).unwrap().ratio().unwrap();
        assert!((loss * snr - 1.0).abs() < 1e-12);

        // perfect estimate: zero loss
        let (zero, _, _) = nmse_value_and_adjoint(&est, &est).unwrap();
        assert_eq!(zero, 0.0);

        // all-zero estimate rejected
        let zeros = SymbolSequence::new(
            vec![C64::new(0.0, 0.0); 8],
            vec![C64::new(0.0, 0.0); 8],
        )
        .unwrap();
        let short = random_symbols(8, 15);
        assert!(nmse_value_and_adjoint(&zeros, &short).is_err());
    }

    #[test]
    fn genie_correction_is_transparent_to_global_phase() {
        // rotating the estimate by any global phase leaves the corrected
        // output (and therefore the loss) unchanged
        let reference = random_symbols(32, 16);
        let est = random_symbols(32, 17);
        let (out_a, _, _) = genie_forward(&est, &reference).unwrap();
        let rot = C64::from_polar(1.0, 1.234);
        let rotated = SymbolSequence::new(
            est.x().iter().map(|v| v * rot).collect(),
            est.y().iter().map(|v| v * rot).collect(),
        )
        .unwrap();
        let (out_b, _, _) = genie_forward(&rotated, &reference).unwrap();
        for (a, b) in out_a.x().iter().zip(out_b.x()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn lumped_mimo_step_gradients_survive_mixed_models() {
        // pretrained decomposed model with an appended wider MIMO step:
        // gradients must still match finite differences
        let mut model = small_model(Parameterization::FreeDgdSu2Star, 18, true);
        model.set_trainable(false, false, false);
        let f = 7;
        let mut taps = vec![[C64::new(0.0, 0.0); 4]; f];
        taps[f / 2] = [
            C64::new(1.0, 0.02),
            C64::new(0.03, -0.01),
            C64::new(-0.02, 0.04),
            C64::new(0.98, -0.03),
        ];
        model.steps.push(crate::model::LdbpStep {
            cd_taps_half: vec![C64::new(1.0, 0.0)],
            dgd: DgdParams::Mimo(taps),
            rotation: RotationParams::None,
            nonlinear_length_km: 0.0,
            trainable: StepTrainable { cd: false, dgd: true, rotation: false },
        });
        model.validate().unwrap();

        let received = random_signal(64, 19);
        let reference = random_symbols(32, 20);
        let rx_pulse = PulseShape::new(0.1, 16, 2).unwrap();
        let prepared = model.prepare(64).unwrap();
        let (_, grads, _) = element_loss_and_grad(
            &model,
            &prepared,
            &received,
            &reference,
            &rx_pulse,
            SYMBOL_RATE_HZ,
        )
        .unwrap();
        let fd = finite_difference_grad(&model, &received, &reference, &rx_pulse);
        let mask = model.trainable_mask();
        let scale = fd
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(g, _)| g.abs())
            .fold(0.0f64, f64::max);
        assert!(scale > 0.0);
        for i in 0..grads.len() {
            if mask[i] {
                let rel = (grads[i] - fd[i]).abs() / fd[i].abs().max(1e-8 * scale);
                assert!(rel < 1e-5, "coordinate {i}: {} vs {}", grads[i], fd[i]);
            }
        }
    }

    #[test]
    fn stage_two_reinit_keeps_dispersion_taps_and_freezes_them() {
        let model = small_model(Parameterization::FreeDgdSu2Star, 21, true);
        let mut rng = rng::rng_from(21, &[rng::stream::MODEL_INIT]);
        let stage2 = reinit_polarization(
            &model,
            Parameterization::FreeMimo,
            RotationInit::RandomSu2,
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(stage2.n_steps(), model.n_steps());
        for (a, b) in stage2.steps.iter().zip(&model.steps) {
            assert_eq!(a.cd_taps_half, b.cd_taps_half);
            assert_eq!(a.nonlinear_length_km, b.nonlinear_length_km);
            assert!(!a.trainable.cd && a.trainable.dgd);
            assert!(matches!(a.dgd, DgdParams::Mimo(_)));
        }
    }
}

