//! Losses, optimizers, the staged training procedures, the lumped-equalizer
//! baseline trainer, and convergence statistics.
//!
//! Training runs against a fixed link realization with data generated
//! online: every minibatch element draws fresh symbols and fresh amplifier
//! noise from seed-derived streams, while the per-section polarization
//! state stays pinned for the whole run. Learning curves are measured on
//! one fixed validation batch (reserved seed stream) whose channel output
//! is synthesized once up front.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::channel::{FiberParams, PmdRealization, SsfmEngine, SsfmPlan};
use crate::model::{
    init_model, reinit_polarization, DgdParams, LdbpModel, LdbpStep, Parameterization,
    RotationInit, RotationParams, StepTrainable,
};
use crate::plan::model_plan;
use crate::rng::{self, stream};
use crate::signal::{
    generate_symbols, lowpass_downsample, rrc_shape, snr_sums, DualPolSignal, PulseShape,
    SymbolSequence,
};
use crate::{tape, C64, Error, Result};

// ── loss ────────────────────────────────────────────────────────────────

/// Normalized mean squared error `‖ŝ−s‖² / ‖ŝ‖²`, the exact reciprocal of
/// the effective SNR of the same pair.
pub fn nmse_loss(estimate: &SymbolSequence, reference: &SymbolSequence) -> Result<f64> {
    let (num, den) = snr_sums(estimate, reference)?;
    if num == 0.0 {
        return Err(Error::invalid("all-zero estimate has undefined NMSE"));
    }
    Ok(den / num)
}

// ── optimizers ──────────────────────────────────────────────────────────

/// Which update rule a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::Adam, OptimizerKind::Sgd];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown optimizer '{s}' (adam|sgd)")))
    }
}

/// Adam state: first/second moment estimates with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    /// Fresh state with the conventional β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn new(n_params: usize, learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One Adam update in place. Frozen coordinates arrive as exact zeros in
/// `grads` and therefore keep zero moments and an exactly unchanged value.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::mismatch(format!(
            "optimizer sized for {} parameters, got {} params / {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Plain gradient descent `θ ← θ − η g` in place.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::mismatch(format!(
            "{} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Unified optimizer handle for the training loops.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize, learning_rate: f64) -> Optimizer {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n_params, learning_rate)),
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(state, params, grads),
            Optimizer::Sgd { learning_rate } => sgd_step(params, grads, *learning_rate),
        }
    }
}

// ── configuration ───────────────────────────────────────────────────────

/// Geometry of the transmit/receive chain around the fiber.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransmissionSetup {
    pub symbol_rate_hz: f64,
    /// Oversampling of the waveform that enters the fiber.
    pub forward_sps: usize,
    /// Oversampling of the waveform the receiver model runs at.
    pub receiver_sps: usize,
    pub pulse_rolloff: f64,
    pub pulse_span_symbols: usize,
    /// Split-step resolution of the forward (data-generating) channel.
    pub channel_steps_per_span: usize,
}

impl TransmissionSetup {
    pub fn validate(&self) -> Result<()> {
        if !(self.symbol_rate_hz > 0.0) {
            return Err(Error::invalid("symbol rate must be positive"));
        }
        if self.forward_sps == 0 || self.receiver_sps == 0 || self.channel_steps_per_span == 0 {
            return Err(Error::invalid(
                "oversampling factors and channel steps must be positive",
            ));
        }
        if self.forward_sps % self.receiver_sps != 0 {
            return Err(Error::invalid(
                "the forward oversampling must be an integer multiple of the receiver's",
            ));
        }
        Ok(())
    }

    pub fn forward_sample_rate_hz(&self) -> f64 {
        self.symbol_rate_hz * self.forward_sps as f64
    }

    pub fn receiver_sample_rate_hz(&self) -> f64 {
        self.symbol_rate_hz * self.receiver_sps as f64
    }

    pub fn tx_pulse(&self) -> Result<PulseShape> {
        PulseShape::new(self.pulse_rolloff, self.pulse_span_symbols, self.forward_sps)
    }

    pub fn rx_pulse(&self) -> Result<PulseShape> {
        PulseShape::new(self.pulse_rolloff, self.pulse_span_symbols, self.receiver_sps)
    }
}

/// Structure of the inverse model (step counts and filter lengths).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelLayout {
    /// Model steps per span before boundary merging.
    pub steps_per_span: usize,
    /// Exponent of the modified-logarithmic step-size rule.
    pub mod_log_exponent: f64,
    /// Average dispersion-filter length the per-step allocation preserves.
    pub mean_cd_filter_len: usize,
    /// Length of every per-step delay/polarization filter.
    pub dgd_filter_len: usize,
}

impl ModelLayout {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_span == 0 {
            return Err(Error::invalid("model steps per span must be positive"));
        }
        if !(self.mod_log_exponent >= 0.0) {
            return Err(Error::invalid("step-size exponent must be >= 0"));
        }
        if self.mean_cd_filter_len == 0 || self.dgd_filter_len == 0 {
            return Err(Error::invalid("filter lengths must be positive"));
        }
        Ok(())
    }
}

/// Hyperparameters of one optimization run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub n_iterations: usize,
    /// Symbols per transmitted sequence.
    pub n_symbols: usize,
    /// Launch power per sequence.
    pub power_dbm: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub parameterization: Parameterization,
    pub rotation_init: RotationInit,
    /// Master seed; all data, noise, and initialization streams derive
    /// from it.
    pub seed: u64,
    /// Sequences in the fixed validation batch.
    pub validation_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 || self.n_symbols == 0 || self.validation_size == 0 {
            return Err(Error::invalid(
                "minibatch size, sequence length, and validation size must be positive",
            ));
        }
        if !self.power_dbm.is_finite() {
            return Err(Error::invalid("launch power must be finite"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        Ok(())
    }
}

// ── records ─────────────────────────────────────────────────────────────

/// One row of a learning curve. Loss and validation SNR are both measured
/// at the parameter vector *before* that iteration's update, so row 0
/// reports the initialization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Minibatch-averaged NMSE.
    pub loss: f64,
    /// Pooled effective SNR over the fixed validation batch, in dB.
    pub eff_snr_db: f64,
    pub wall_ms: f64,
}

/// Learning curve plus the final parameter vector of a training run.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    pub iterations: Vec<IterationRecord>,
    pub final_params: Vec<f64>,
}

impl TrainRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loss).collect()
    }

    pub fn eff_snrs_db(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.eff_snr_db).collect()
    }

    /// CSV export: `iteration,loss,eff_snr_db,wall_ms`, one row per
    /// iteration, floats printed in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,loss,eff_snr_db,wall_ms")?;
        for r in &self.iterations {
            writeln!(w, "{},{},{},{}", r.iteration, r.loss, r.eff_snr_db, r.wall_ms)?;
        }
        Ok(())
    }
}

/// Smallest iteration index from which the validation SNR (raw per-
/// iteration dB values, no smoothing) stays within 1% of its final value.
/// An empty record yields 0.
pub fn convergence_iterations(record: &TrainRecord) -> usize {
    let snrs = record.eff_snrs_db();
    let Some(&last) = snrs.last() else { return 0 };
    let threshold = 0.99 * last;
    let mut k = snrs.len();
    while k > 0 && snrs[k - 1] >= threshold {
        k -= 1;
    }
    k
}

// ── data synthesis ──────────────────────────────────────────────────────

/// A fixed link plus the transmit/receive chain: everything needed to
/// synthesize (reference symbols, received waveform) pairs on demand.
pub(crate) struct Lab {
    engine: SsfmEngine,
    tx_pulse: PulseShape,
    rx_pulse: PulseShape,
    symbol_rate_hz: f64,
    receiver_rate_hz: f64,
    n_symbols: usize,
    power_dbm: f64,
    seed: u64,
}

impl Lab {
    pub(crate) fn new(
        fiber: &FiberParams,
        setup: &TransmissionSetup,
        pmd: &PmdRealization,
        config: &TrainConfig,
    ) -> Result<Lab> {
        setup.validate()?;
        config.validate()?;
        let n_forward = config.n_symbols * setup.forward_sps;
        let plan = SsfmPlan::uniform(fiber.span_length_km, setup.channel_steps_per_span)?;
        let engine = SsfmEngine::new(fiber, &plan, pmd, n_forward, setup.forward_sample_rate_hz())?;
        Ok(Lab {
            engine,
            tx_pulse: setup.tx_pulse()?,
            rx_pulse: setup.rx_pulse()?,
            symbol_rate_hz: setup.symbol_rate_hz,
            receiver_rate_hz: setup.receiver_sample_rate_hz(),
            n_symbols: config.n_symbols,
            power_dbm: config.power_dbm,
            seed: config.seed,
        })
    }

    /// Samples at the receiver rate per synthesized sequence.
    pub(crate) fn receiver_len(&self) -> usize {
        self.n_symbols * (self.rx_pulse.sps)
    }

    /// Draw one (symbols, received waveform) pair from the seed streams
    /// labeled by `prefix` (symbols and amplifier noise use distinct
    /// sub-streams).
    pub(crate) fn synthesize(&self, prefix: &[u64]) -> Result<(SymbolSequence, DualPolSignal)> {
        let mut labels = prefix.to_vec();
        labels.push(stream::SYMBOLS);
        let mut symbol_rng = rng::rng_from(self.seed, &labels);
        let symbols = generate_symbols(self.n_symbols, self.power_dbm, &mut symbol_rng)?;
        let launched = rrc_shape(&symbols, &self.tx_pulse, self.symbol_rate_hz)?;
        *labels.last_mut().expect("non-empty") = stream::ASE_NOISE;
        let mut noise_rng = rng::rng_from(self.seed, &labels);
        let received = self.engine.propagate(&launched, true, &mut noise_rng)?;
        let received = lowpass_downsample(&received, self.receiver_rate_hz)?;
        Ok((symbols, received))
    }
}

// ── the shared optimization loop ────────────────────────────────────────

pub(crate) fn pooled_snr_db(sums: &[(f64, f64)], iteration: usize) -> Result<f64> {
    let num: f64 = sums.iter().map(|s| s.0).sum();
    let den: f64 = sums.iter().map(|s| s.1).sum();
    let db = 10.0 * (num / den).log10();
    if !db.is_finite() {
        return Err(Error::Diverged { iteration, loss: den / num });
    }
    Ok(db)
}

/// Run `config.n_iterations` optimizer steps on `model` against the data
/// source `lab`, logging loss and validation SNR at the pre-update
/// parameters of every iteration.
fn run_training(lab: &Lab, model: &mut LdbpModel, config: &TrainConfig) -> Result<TrainRecord> {
    let validation: Vec<(SymbolSequence, DualPolSignal)> = (0..config.validation_size)
        .into_par_iter()
        .map(|i| lab.synthesize(&[stream::VALIDATION, i as u64]))
        .collect::<Result<_>>()?;

    let mut optimizer = Optimizer::new(config.optimizer, model.n_params(), config.learning_rate);
    let mut iterations = Vec::with_capacity(config.n_iterations);

    for kappa in 0..config.n_iterations {
        let started = Instant::now();
        let prepared = model.prepare(lab.receiver_len())?;

        // validation at the current parameters
        let val_sums: Vec<(f64, f64)> = validation
            .par_iter()
            .map(|(symbols, received)| -> Result<(f64, f64)> {
                let (loss, estimate) = tape::element_loss(
                    model,
                    &prepared,
                    received,
                    symbols,
                    &lab.rx_pulse,
                    lab.symbol_rate_hz,
                )?;
                let (num, den) = snr_sums(&estimate, symbols)?;
                // loss/metric duality: the logged NMSE and effective SNR
                // are reciprocal by construction
                if den > 0.0 {
                    let product = loss * (num / den);
                    assert!(
                        (product - 1.0).abs() <= 1e-12,
                        "NMSE x effective-SNR = {product} != 1 at iteration {kappa}"
                    );
                }
                Ok((num, den))
            })
            .collect::<Result<_>>()?;
        let eff_snr_db = pooled_snr_db(&val_sums, kappa)?;

        // minibatch loss and gradient at the current parameters
        let elements: Vec<(f64, Vec<f64>)> = (0..config.minibatch_size)
            .into_par_iter()
            .map(|i| -> Result<(f64, Vec<f64>)> {
                let (symbols, received) =
                    lab.synthesize(&[stream::TRAINING, kappa as u64, i as u64])?;
                let (loss, grads, _) = tape::element_loss_and_grad(
                    model,
                    &prepared,
                    &received,
                    &symbols,
                    &lab.rx_pulse,
                    lab.symbol_rate_hz,
                )?;
                Ok((loss, grads))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / config.minibatch_size as f64;
        let loss = elements.iter().map(|(l, _)| l).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: kappa, loss });
        }
        let mut grads = vec![0.0; model.n_params()];
        for (_, g) in &elements {
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi * scale;
            }
        }

        let mut params = model.pack_params();
        optimizer.step(&mut params, &grads)?;
        model.unpack_params(&params)?;

        iterations.push(IterationRecord {
            iteration: kappa,
            loss,
            eff_snr_db,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    debug_assert_eq!(iterations.len(), config.n_iterations);
    Ok(TrainRecord { iterations, final_params: model.pack_params() })
}

// ── the staged trainers ─────────────────────────────────────────────────

/// Stage 1: learn the dispersion taps over a link without polarization
/// effects. The model starts from the designed inverse-dispersion taps
/// with identity polarization stages; only the dispersion taps train.
pub fn train_ldbp(
    fiber: &FiberParams,
    setup: &TransmissionSetup,
    layout: &ModelLayout,
    config: &TrainConfig,
) -> Result<(LdbpModel, TrainRecord)> {
    fiber.validate()?;
    layout.validate()?;
    let pmd = PmdRealization::pmd_free(fiber.n_sections()?);
    let lab = Lab::new(fiber, setup, &pmd, config)?;

    let plan = model_plan(
        fiber,
        layout.steps_per_span,
        layout.mod_log_exponent,
        layout.mean_cd_filter_len,
    )?;
    let mut init_rng = rng::rng_from(config.seed, &[stream::MODEL_INIT]);
    let mut model = init_model(
        &plan,
        config.parameterization,
        RotationInit::Identity,
        layout.dgd_filter_len,
        fiber.beta2_ps2_per_km,
        fiber.gamma_rad_per_w_km,
        setup.receiver_sample_rate_hz(),
        &mut init_rng,
    )?;
    model.set_trainable(true, false, false);

    let record = run_training(&lab, &mut model, config)?;
    Ok((model, record))
}

/// Stage 2: re-initialize the polarization stages of a pretrained model
/// in the configured parameterization, freeze the dispersion taps, and
/// train against one fixed link realization.
pub fn train_ldbp_pmd(
    fiber: &FiberParams,
    setup: &TransmissionSetup,
    layout: &ModelLayout,
    pretrained: &LdbpModel,
    pmd: &PmdRealization,
    config: &TrainConfig,
) -> Result<(LdbpModel, TrainRecord)> {
    fiber.validate()?;
    layout.validate()?;
    let lab = Lab::new(fiber, setup, pmd, config)?;

    let mut init_rng = rng::rng_from(config.seed, &[stream::MODEL_INIT]);
    let mut model = reinit_polarization(
        pretrained,
        config.parameterization,
        config.rotation_init,
        layout.dgd_filter_len,
        &mut init_rng,
    )?;

    let record = run_training(&lab, &mut model, config)?;
    Ok((model, record))
}

/// Continue training an existing model (trainable groups as flagged on
/// the model itself) against one fixed link realization. The model is not
/// re-initialized; the optimizer state starts fresh.
pub fn continue_training(
    fiber: &FiberParams,
    setup: &TransmissionSetup,
    pmd: &PmdRealization,
    start: &LdbpModel,
    config: &TrainConfig,
) -> Result<(LdbpModel, TrainRecord)> {
    fiber.validate()?;
    let lab = Lab::new(fiber, setup, pmd, config)?;
    let mut model = start.clone();
    let record = run_training(&lab, &mut model, config)?;
    Ok((model, record))
}

/// Pooled validation SNR (dB) of a fixed model on a link: synthesizes
/// `config.validation_size` sequences from the validation stream of
/// `config.seed` at `config.power_dbm` and pools the per-sequence
/// signal/error sums. The same seed and sizes reproduce the validation
/// batch a training run with that config scored against.
pub fn evaluate_model(
    fiber: &FiberParams,
    setup: &TransmissionSetup,
    pmd: &PmdRealization,
    model: &LdbpModel,
    config: &TrainConfig,
) -> Result<f64> {
    fiber.validate()?;
    let lab = Lab::new(fiber, setup, pmd, config)?;
    let prepared = model.prepare(lab.receiver_len())?;
    let sums: Vec<(f64, f64)> = (0..config.validation_size)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let (symbols, received) = lab.synthesize(&[stream::VALIDATION, i as u64])?;
            let (_, estimate) = tape::element_loss(
                model,
                &prepared,
                &received,
                &symbols,
                &lab.rx_pulse,
                lab.symbol_rate_hz,
            )?;
            snr_sums(&estimate, &symbols)
        })
        .collect::<Result<_>>()?;
    pooled_snr_db(&sums, 0)
}

/// Loss and gradient of one received sequence under `model`: the fully
/// differentiated receiver chain (model forward → matched filter → data-
/// aided phase correction → normalized mean-square error), with gradient
/// entries of frozen parameter groups exactly zero. Gradients are ordered
/// like [`LdbpModel::pack_params`]. Also returns the phase-corrected
/// symbol estimate the loss was computed from.
pub fn element_loss_and_gradient(
    model: &LdbpModel,
    received: &DualPolSignal,
    reference: &SymbolSequence,
    rx_pulse: &PulseShape,
    symbol_rate_hz: f64,
) -> Result<(f64, Vec<f64>, SymbolSequence)> {
    let prepared = model.prepare(received.len())?;
    tape::element_loss_and_grad(model, &prepared, received, reference, rx_pulse, symbol_rate_hz)
}

/// Baseline: freeze the pretrained model entirely and train one trailing
/// full 2x2 complex filter of `mimo_length` taps (initialized to the
/// center-tap identity) against a fixed link realization.
pub fn train_lumped_mimo(
    fiber: &FiberParams,
    setup: &TransmissionSetup,
    pretrained: &LdbpModel,
    pmd: &PmdRealization,
    mimo_length: usize,
    config: &TrainConfig,
) -> Result<(LdbpModel, TrainRecord)> {
    fiber.validate()?;
    if mimo_length == 0 {
        return Err(Error::invalid("the lumped filter needs at least one tap"));
    }
    let lab = Lab::new(fiber, setup, pmd, config)?;

    let mut model = pretrained.clone();
    model.set_trainable(false, false, false);
    let mut taps = vec![[C64::new(0.0, 0.0); 4]; mimo_length];
    taps[mimo_length / 2] = [
        C64::new(1.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(1.0, 0.0),
    ];
    model.steps.push(LdbpStep {
        cd_taps_half: vec![C64::new(1.0, 0.0)],
        dgd: DgdParams::Mimo(taps),
        rotation: RotationParams::None,
        nonlinear_length_km: 0.0,
        trainable: StepTrainable { cd: false, dgd: true, rotation: false },
    });
    model.validate()?;

    let record = run_training(&lab, &mut model, config)?;
    Ok((model, record))
}
