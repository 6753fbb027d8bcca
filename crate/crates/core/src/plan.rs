//! Spatial planning for the inverse model: logarithmic step-length
//! schedules, per-step dispersion distances with span-boundary merging,
//! attenuation-weighted nonlinear lengths, and filter-length allocation.

use serde::{Deserialize, Serialize};

use crate::channel::FiberParams;
use crate::{Error, Result};

/// Step lengths (km, in propagation order) for one span, denser where the
/// power is higher. Boundaries follow
/// `z_i = -ln(1 - (i/n)*(1 - e^(-s*a*L))) / (s*a)` with attenuation `a`
/// (nepers/km) and adjustment exponent `s`; `s = 0` (or a lossless fiber)
/// falls back to uniform spacing. Larger `s` concentrates steps near the
/// span input.
pub fn mod_log_step_lengths(
    span_length_km: f64,
    n_steps: usize,
    alpha_nepers_per_km: f64,
    exponent: f64,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    if !(span_length_km > 0.0) {
        return Err(Error::invalid("span_length_km must be > 0"));
    }
    if !(exponent >= 0.0) || !exponent.is_finite() {
        return Err(Error::invalid("schedule exponent must be finite and >= 0"));
    }
    if alpha_nepers_per_km < 0.0 {
        return Err(Error::invalid("alpha must be >= 0"));
    }
    let sa = exponent * alpha_nepers_per_km;
    if sa == 0.0 {
        return Ok(vec![span_length_km / n_steps as f64; n_steps]);
    }
    let depth = 1.0 - (-sa * span_length_km).exp();
    let z = |i: usize| -> f64 { -(1.0 - (i as f64 / n_steps as f64) * depth).ln() / sa };
    let mut h = Vec::with_capacity(n_steps);
    let mut prev = 0.0;
    for i in 1..=n_steps {
        let zi = if i == n_steps { span_length_km } else { z(i) };
        h.push(zi - prev);
        prev = zi;
    }
    Ok(h)
}

/// One linear-plus-activation stage of the inverse model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStep {
    /// Fiber distance (km, positive) whose dispersion this step undoes.
    pub cd_distance_km: f64,
    /// Odd dispersion-filter length allocated to this step.
    pub cd_filter_len: usize,
    /// Signed distance (km) entering the nonlinear phase of the activation
    /// after this step; negative (phase is being removed),
    /// attenuation-weighted, and exactly zero for the trailing half-step.
    pub nonlinear_length_km: f64,
}

/// Ordered inverse-model stages, walking the link from the receiver back to
/// the transmitter with the half-steps at span boundaries merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub steps: Vec<ModelStep>,
}

impl ModelPlan {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Total dispersion distance covered by all steps (km).
    pub fn total_cd_km(&self) -> f64 {
        self.steps.iter().map(|s| s.cd_distance_km).sum()
    }

    /// Total (negative) nonlinear distance over all activations (km).
    pub fn total_nonlinear_km(&self) -> f64 {
        self.steps.iter().map(|s| s.nonlinear_length_km).sum()
    }
}

/// Round to the nearest odd integer, never below 3.
fn nearest_odd_at_least_3(x: f64) -> usize {
    let k = ((x - 1.0) / 2.0).round() as i64;
    (2 * k + 1).max(3) as usize
}

/// Build the inverse-model plan for a link: `steps_per_span` symmetric
/// steps per span plus one trailing linear half-step, so
/// `n_spans * steps_per_span + 1` stages in total.
///
/// Spacing follows [`mod_log_step_lengths`] with the given exponent.
/// Dispersion-filter lengths are allocated proportionally to each stage's
/// distance, averaging about `mean_cd_filter_len` taps; nonlinear lengths
/// are the attenuation-weighted effective lengths of the corresponding
/// forward segments, negated.
pub fn model_plan(
    fp: &FiberParams,
    steps_per_span: usize,
    mod_log_exponent: f64,
    mean_cd_filter_len: usize,
) -> Result<ModelPlan> {
    fp.validate()?;
    if mean_cd_filter_len == 0 {
        return Err(Error::invalid("mean_cd_filter_len must be >= 1"));
    }
    let n = steps_per_span;
    let alpha = fp.alpha_nepers_per_km();
    let h = mod_log_step_lengths(fp.span_length_km, n, alpha, mod_log_exponent)?;

    // Forward segment boundaries and attenuation-weighted lengths for one
    // span: leff_j = integral of e^(-alpha*z) over segment j.
    let mut z = vec![0.0; n + 1];
    for j in 0..n {
        z[j + 1] = z[j] + h[j];
    }
    let leff: Vec<f64> = (0..n)
        .map(|j| {
            if alpha == 0.0 {
                h[j]
            } else {
                ((-alpha * z[j]).exp() - (-alpha * z[j + 1]).exp()) / alpha
            }
        })
        .collect();

    // Forward linear stages over the whole link (midpoints between
    // nonlinear segments, merged at span boundaries), then reverse.
    let g = fp.n_spans * n; // number of nonlinear segments
    let mut lins = Vec::with_capacity(g + 1);
    lins.push(0.5 * h[0]);
    for gi in 1..g {
        lins.push(0.5 * (h[(gi - 1) % n] + h[gi % n]));
    }
    lins.push(0.5 * h[n - 1]);

    let s_total = g + 1;
    let mean_d: f64 = lins.iter().sum::<f64>() / s_total as f64;
    let steps = (0..s_total)
        .map(|k| {
            let d = lins[s_total - 1 - k];
            let nl = if k + 1 < s_total {
                -leff[(g - 1 - k) % n]
            } else {
                0.0
            };
            ModelStep {
                cd_distance_km: d,
                cd_filter_len: nearest_odd_at_least_3(
                    mean_cd_filter_len as f64 * d / mean_d,
                ),
                nonlinear_length_km: nl,
            }
        })
        .collect();
    Ok(ModelPlan { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_fiber() -> FiberParams {
        FiberParams {
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

    #[test]
    fn schedule_matches_the_frozen_closed_form() {
        let alpha = 0.2 * std::f64::consts::LN_10 / 10.0;
        let h = mod_log_step_lengths(100.0, 4, alpha, 0.5).unwrap();
        let want = [
            11.069829749368967,
            14.89390130120664,
            22.84793285153695,
            51.18833609788743,
        ];
        for (a, b) in h.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((h.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_steps_grow_monotonically_and_sum_to_the_span() {
        let alpha = 0.2 * std::f64::consts::LN_10 / 10.0;
        for &(n, s) in &[(4usize, 1.0), (10, 0.5), (200, 0.25), (3, 2.0)] {
            let h = mod_log_step_lengths(100.0, n, alpha, s).unwrap();
            assert_eq!(h.len(), n);
            assert!((h.iter().sum::<f64>() - 100.0).abs() < 1e-9);
            for w in h.windows(2) {
                assert!(w[1] > w[0], "steps must grow toward the span end");
            }
        }
    }

    #[test]
    fn schedule_falls_back_to_uniform() {
        let alpha = 0.2 * std::f64::consts::LN_10 / 10.0;
        for h in [
            mod_log_step_lengths(80.0, 5, alpha, 0.0).unwrap(),
            mod_log_step_lengths(80.0, 5, 0.0, 1.0).unwrap(),
        ] {
            assert!(h.iter().all(|&x| (x - 16.0).abs() < 1e-12));
        }
        assert!(mod_log_step_lengths(80.0, 0, alpha, 1.0).is_err());
        assert!(mod_log_step_lengths(0.0, 4, alpha, 1.0).is_err());
        assert!(mod_log_step_lengths(80.0, 4, alpha, -0.5).is_err());
    }

    #[test]
    fn model_plan_walks_the_link_backward_with_merged_half_steps() {
        let fp = desk_fiber();
        let plan = model_plan(&fp, 4, 0.5, 25).unwrap();
        assert_eq!(plan.n_steps(), 9);
        assert!((plan.total_cd_km() - 200.0).abs() < 1e-9);
        // first stage: half of the last (largest) forward step
        assert!((plan.steps[0].cd_distance_km - 51.18833609788743 / 2.0).abs() < 1e-9);
        // boundary stage between the spans: mean of last and first steps
        assert!(
            (plan.steps[4].cd_distance_km
                - (51.18833609788743 + 11.069829749368967) / 2.0)
                .abs()
                < 1e-9
        );
        // trailing half-step: half of the first forward step, no activation
        assert!((plan.steps[8].cd_distance_km - 11.069829749368967 / 2.0).abs() < 1e-9);
        assert_eq!(plan.steps[8].nonlinear_length_km, 0.0);
        for s in &plan.steps[..8] {
            assert!(s.nonlinear_length_km < 0.0);
        }
    }

    #[test]
    fn nonlinear_lengths_recover_the_attenuation_weighted_span_integral() {
        let fp = desk_fiber();
        let alpha = fp.alpha_nepers_per_km();
        let span_leff = (1.0 - (-alpha * 100.0).exp()) / alpha;
        for sigma in [0.0, 0.5, 1.0] {
            let plan = model_plan(&fp, 4, sigma, 25).unwrap();
            let total = -plan.total_nonlinear_km();
            assert!(
                (total - 2.0 * span_leff).abs() < 1e-9,
                "sigma {sigma}: {total} vs {}",
                2.0 * span_leff
            );
        }
        // frozen: span_leff for 0.2 dB/km over 100 km
        assert!((span_leff - 21.497576854210962).abs() < 1e-12);
    }

    #[test]
    fn activations_strengthen_toward_the_transmitter_within_each_span() {
        // Uniform spacing isolates the attenuation weighting: walking
        // backward, each span's activations must grow in magnitude.
        let plan = model_plan(&desk_fiber(), 4, 0.0, 25).unwrap();
        for span_block in [0usize, 4] {
            for k in span_block..span_block + 3 {
                assert!(
                    plan.steps[k + 1].nonlinear_length_km < plan.steps[k].nonlinear_length_km,
                    "step {k}"
                );
            }
        }
    }

    #[test]
    fn filter_lengths_are_odd_and_track_the_step_distances() {
        let plan = model_plan(&desk_fiber(), 4, 0.5, 25).unwrap();
        let mut mean = 0.0;
        for s in &plan.steps {
            assert!(s.cd_filter_len % 2 == 1 && s.cd_filter_len >= 3);
            mean += s.cd_filter_len as f64;
        }
        mean /= plan.n_steps() as f64;
        assert!((mean - 25.0).abs() < 4.0, "mean filter length {mean}");
        // proportionality: longer distance never gets a shorter filter
        let mut sorted = plan.steps.clone();
        sorted.sort_by(|a, b| a.cd_distance_km.total_cmp(&b.cd_distance_km));
        for w in sorted.windows(2) {
            assert!(w[0].cd_filter_len <= w[1].cd_filter_len);
        }
    }

    #[test]
    fn uniform_plan_matches_hand_computed_distances() {
        let plan = model_plan(&desk_fiber(), 4, 0.0, 25).unwrap();
        let want = [12.5, 25.0, 25.0, 25.0, 25.0, 25.0, 25.0, 25.0, 12.5];
        for (s, w) in plan.steps.iter().zip(want.iter()) {
            assert!((s.cd_distance_km - w).abs() < 1e-12);
        }
        // leff of a uniform 25 km segment starting at z = 75 km, negated
        let alpha = desk_fiber().alpha_nepers_per_km();
        let first = ((-alpha * 75.0).exp() - (-alpha * 100.0f64).exp()) / alpha;
        assert!((plan.steps[0].nonlinear_length_km + first).abs() < 1e-12);
    }

    #[test]
    fn single_step_spans_collapse_to_boundary_merges() {
        let fp = FiberParams { n_spans: 3, ..desk_fiber() };
        let plan = model_plan(&fp, 1, 0.0, 25).unwrap();
        assert_eq!(plan.n_steps(), 4);
        let want = [50.0, 100.0, 100.0, 50.0];
        for (s, w) in plan.steps.iter().zip(want.iter()) {
            assert!((s.cd_distance_km - w).abs() < 1e-12);
        }
    }
}
