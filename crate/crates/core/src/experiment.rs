//! Configuration-driven experiment runner: profiles, resumable training
//! grids, baselines, sweeps, and machine-readable (plot-ready) CSV output.
//!
//! An experiment is fully determined by one [`ExperimentConfig`] value: the
//! link, the transceiver, the model layout, the training hyperparameters,
//! the grid of (parameterization × rotation-init × link-realization) cells,
//! and the output directory. Every random draw derives from the single
//! master seed through labeled streams, and every artifact below the output
//! directory is written with deterministic bytes (no wall-clock content),
//! so re-running a finished study — or resuming an interrupted one — yields
//! bit-identical files. Completed stages are detected on disk and skipped.
//!
//! Artifact layout under `output_dir`:
//!
//! ```text
//! config.toml                      resolved configuration echo
//! pretrain.json                    stage-1 model checkpoint
//! pretrain_curve.csv               stage-1 learning curve
//! pmd/r{r}.json                    per-realization polarization state
//! cells/{param}-{init}-r{r}.json   one stage-2 training cell
//! curves/{param}-{init}.csv        mean/std learning curve over realizations
//! results.csv                      summary table over the whole grid
//! power_sweep.csv                  fixed-model SNR across launch powers
//! baselines.csv                    non-learned reference receivers
//! filter_cells/f{F}-r{r}.json      delay-filter-length sweep cells
//! filter_curves/f{F}.csv           mean curve per filter length
//! filter_length.csv                filter-length sweep summary
//! swap_cells/{param}-{init}-r{a}-to-r{b}.json
//! pmd_swap.csv                     retraining-after-link-swap summary
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ideal_pmd_inverse, reference_dbp, FiberParams, PmdRealization};
use crate::model::{complexity, LdbpModel, Parameterization, RotationInit};
use crate::rng::{self, derive_seed, stream};
use crate::signal::{
    genie_phase_correct, matched_filter_downsample, snr_sums, DualPolSignal, SymbolSequence,
};
use crate::train::{
    continue_training, convergence_iterations, evaluate_model, train_ldbp, train_ldbp_pmd, Lab,
    ModelLayout, OptimizerKind, TrainConfig, TrainRecord, TransmissionSetup,
};
use crate::{tape, Error, Result};

/// Configuration format version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

// ── configuration ────────────────────────────────────────────────────────

/// Everything that determines an experiment run, byte for byte, given the
/// code version. Serialized as TOML with explicit units in key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Version of this configuration schema (must equal [`CONFIG_VERSION`]).
    pub config_version: u32,
    pub fiber: FiberParams,
    pub setup: TransmissionSetup,
    pub layout: ModelLayout,
    /// Base training hyperparameters. Per grid cell, `parameterization`
    /// and `rotation_init` are overridden by the grid lists below and
    /// `learning_rate` by `learning_rates_per_parameterization`; `seed`
    /// is the master seed of the whole experiment.
    pub train: TrainConfig,
    /// Iterations of the dispersion-only pretraining stage.
    pub pretrain_iterations: usize,
    pub pretrain_learning_rate: f64,
    /// Grid axis 1: polarization parameterizations to train.
    pub parameterizations: Vec<Parameterization>,
    /// Grid axis 2: rotation initializations to train.
    pub rotation_inits: Vec<RotationInit>,
    /// Grid axis 3: independent link realizations (sampled from the master
    /// seed's realization stream).
    pub n_realizations: usize,
    /// Per-parameterization learning rates, keyed by
    /// [`Parameterization::name`]; missing keys fall back to
    /// `train.learning_rate`.
    pub learning_rates_per_parameterization: BTreeMap<String, f64>,
    /// Launch powers (dBm) for the fixed-model evaluation sweep.
    pub power_sweep_dbm: Vec<f64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale profile: two 100 km spans, finishes the full study suite
    /// in well under an hour on a laptop while keeping every qualitative
    /// effect of the full-scale setup. Learning rates are the full-scale
    /// per-parameterization rates scaled ×5 so that 300 iterations cover
    /// the same optimizer path length as the full run's 1500.
    pub fn desk(seed: u64, output_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            fiber: FiberParams {
                alpha_db_per_km: 0.2,
                beta2_ps2_per_km: -21.67,
                gamma_rad_per_w_km: 1.2,
                tau_pmd_ps_per_sqrt_km: 0.2,
                correlation_length_km: 0.5,
                span_length_km: 100.0,
                n_spans: 2,
                noise_figure_db: 4.5,
                center_wavelength_nm: 1550.0,
            },
            setup: TransmissionSetup {
                symbol_rate_hz: 32e9,
                forward_sps: 6,
                receiver_sps: 2,
                pulse_rolloff: 0.1,
                pulse_span_symbols: 16,
                channel_steps_per_span: 200,
            },
            layout: ModelLayout {
                steps_per_span: 4,
                mod_log_exponent: 0.5,
                mean_cd_filter_len: 25,
                dgd_filter_len: 5,
            },
            train: TrainConfig {
                minibatch_size: 16,
                n_iterations: 300,
                n_symbols: 512,
                power_dbm: 8.0,
                learning_rate: 2.5e-3,
                optimizer: OptimizerKind::Adam,
                parameterization: Parameterization::FreeDgdSu2Star,
                rotation_init: RotationInit::RandomSu2,
                seed,
                validation_size: 8,
            },
            pretrain_iterations: 100,
            pretrain_learning_rate: 1e-4,
            parameterizations: Parameterization::ALL.to_vec(),
            rotation_inits: RotationInit::ALL.to_vec(),
            n_realizations: 5,
            learning_rates_per_parameterization: scaled_learning_rates(5.0),
            power_sweep_dbm: vec![-10.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            output_dir,
        }
    }

    /// Full-scale profile: ten 100 km spans at forward split-step
    /// resolution 1000 steps/span, 40 link realizations, 1500 iterations.
    /// Ships as configuration only — wall-clock feasibility depends on the
    /// machine; it is not exercised by the test suite.
    pub fn paper(seed: u64, output_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            fiber: FiberParams {
                correlation_length_km: 0.1,
                n_spans: 10,
                ..ExperimentConfig::desk(seed, output_dir.clone()).fiber
            },
            setup: TransmissionSetup {
                channel_steps_per_span: 1000,
                ..ExperimentConfig::desk(seed, output_dir.clone()).setup
            },
            train: TrainConfig {
                minibatch_size: 50,
                n_iterations: 1500,
                n_symbols: 1024,
                learning_rate: 5e-4,
                validation_size: 16,
                ..ExperimentConfig::desk(seed, output_dir.clone()).train
            },
            pretrain_iterations: 500,
            n_realizations: 40,
            learning_rates_per_parameterization: scaled_learning_rates(1.0),
            power_sweep_dbm: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            ..ExperimentConfig::desk(seed, output_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config_version {} (this build reads {})",
                self.config_version, CONFIG_VERSION
            )));
        }
        self.fiber.validate()?;
        self.setup.validate()?;
        self.layout.validate()?;
        self.train.validate()?;
        if !(self.pretrain_learning_rate >= 0.0) {
            return Err(Error::config("pretrain_learning_rate must be >= 0"));
        }
        if self.parameterizations.is_empty() || self.rotation_inits.is_empty() {
            return Err(Error::config(
                "parameterizations and rotation_inits must be non-empty",
            ));
        }
        for (i, p) in self.parameterizations.iter().enumerate() {
            if self.parameterizations[..i].contains(p) {
                return Err(Error::config(format!("duplicate parameterization {}", p.name())));
            }
        }
        for (i, r) in self.rotation_inits.iter().enumerate() {
            if self.rotation_inits[..i].contains(r) {
                return Err(Error::config(format!("duplicate rotation init {}", r.name())));
            }
        }
        if self.n_realizations == 0 {
            return Err(Error::config("n_realizations must be >= 1"));
        }
        let known: Vec<&str> = Parameterization::ALL.iter().map(|p| p.name()).collect();
        for key in self.learning_rates_per_parameterization.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::config(format!(
                    "unknown parameterization '{key}' in learning_rates_per_parameterization \
                     (expected one of: {})",
                    known.join(", ")
                )));
            }
        }
        for (key, lr) in &self.learning_rates_per_parameterization {
            if !(*lr >= 0.0) {
                return Err(Error::config(format!("learning rate for '{key}' must be >= 0")));
            }
        }
        if self.power_sweep_dbm.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("power_sweep_dbm entries must be finite"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir must be non-empty"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("configuration parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("configuration serialize error: {e}")))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Training rate for one parameterization (override map, then base).
    pub fn learning_rate_for(&self, p: Parameterization) -> f64 {
        self.learning_rates_per_parameterization
            .get(p.name())
            .copied()
            .unwrap_or(self.train.learning_rate)
    }

    // — artifact paths —

    pub fn config_echo_path(&self) -> PathBuf {
        self.output_dir.join("config.toml")
    }
    pub fn pretrain_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("pretrain.json")
    }
    pub fn pretrain_curve_path(&self) -> PathBuf {
        self.output_dir.join("pretrain_curve.csv")
    }
    pub fn pmd_path(&self, r: usize) -> PathBuf {
        self.output_dir.join("pmd").join(format!("r{r}.json"))
    }
    pub fn cell_path(&self, p: Parameterization, init: RotationInit, r: usize) -> PathBuf {
        self.output_dir.join("cells").join(format!("{}-{}-r{r}.json", p.name(), init.name()))
    }
    pub fn curve_path(&self, p: Parameterization, init: RotationInit) -> PathBuf {
        self.output_dir.join("curves").join(format!("{}-{}.csv", p.name(), init.name()))
    }
    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join("results.csv")
    }
    pub fn power_sweep_path(&self) -> PathBuf {
        self.output_dir.join("power_sweep.csv")
    }
    pub fn baselines_path(&self) -> PathBuf {
        self.output_dir.join("baselines.csv")
    }
    pub fn filter_cell_path(&self, f: usize, r: usize) -> PathBuf {
        self.output_dir.join("filter_cells").join(format!("f{f}-r{r}.json"))
    }
    pub fn filter_curve_path(&self, f: usize) -> PathBuf {
        self.output_dir.join("filter_curves").join(format!("f{f}.csv"))
    }
    pub fn filter_summary_path(&self) -> PathBuf {
        self.output_dir.join("filter_length.csv")
    }
    pub fn swap_cell_path(
        &self,
        p: Parameterization,
        init: RotationInit,
        from: usize,
        to: usize,
    ) -> PathBuf {
        self.output_dir
            .join("swap_cells")
            .join(format!("{}-{}-r{from}-to-r{to}.json", p.name(), init.name()))
    }
    pub fn pmd_swap_path(&self) -> PathBuf {
        self.output_dir.join("pmd_swap.csv")
    }
}

/// The full-scale per-parameterization training rates, scaled by `factor`.
fn scaled_learning_rates(factor: f64) -> BTreeMap<String, f64> {
    let base = [
        (Parameterization::FreeMimo, 1e-3),
        (Parameterization::FreeDgdFreeMatrix, 1e-3),
        (Parameterization::FreeDgdSu2Star, 5e-4),
        (Parameterization::LagrangeFreeMatrix, 5e-4),
        (Parameterization::LagrangeSu2Star, 2e-3),
    ];
    base.into_iter().map(|(p, lr)| (p.name().to_string(), lr * factor)).collect()
}

// ── CSV schemas ──────────────────────────────────────────────────────────

/// Versioned column schemas of every CSV the runner emits. A file
/// validates if its header equals the schema string and every data row has
/// the same number of comma-separated fields.
pub mod schema {
    use crate::{Error, Result};

    pub const VERSION: u32 = 1;
    pub const PRETRAIN_CURVE: &str = "iteration,loss,eff_snr_db";
    pub const RESULTS: &str = "parameterization,rotation_init,peak_mean_snr_db,std_at_peak_db,\
                               mean_convergence_iterations,dof_per_step,rm_per_step,n_diverged";
    pub const CURVE: &str = "iteration,mean_loss,mean_eff_snr_db,std_eff_snr_db";
    pub const POWER_SWEEP: &str =
        "parameterization,rotation_init,power_dbm,mean_eff_snr_db,std_eff_snr_db";
    pub const BASELINES: &str = "realization,baseline,power_dbm,eff_snr_db";
    pub const FILTER_SWEEP: &str = "dgd_filter_len,peak_mean_snr_db,std_at_peak_db,\
                                    mean_convergence_iterations,n_diverged";
    pub const PMD_SWAP: &str = "parameterization,rotation_init,from_realization,to_realization,\
                                swapped_final_snr_db,fresh_final_snr_db,convergence_iterations";

    /// Check one CSV text against a schema string.
    pub fn validate_csv(expected_header: &str, content: &str) -> Result<()> {
        let mut lines = content.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty CSV"))?;
        if header != expected_header {
            return Err(Error::format(format!(
                "CSV header mismatch: got '{header}', schema v{VERSION} expects \
                 '{expected_header}'"
            )));
        }
        let n_cols = expected_header.split(',').count();
        for (i, line) in lines.enumerate() {
            let got = line.split(',').count();
            if got != n_cols {
                return Err(Error::format(format!(
                    "CSV row {} has {got} fields, expected {n_cols}",
                    i + 2
                )));
            }
        }
        Ok(())
    }
}

/// Write a CSV file with deterministic bytes, self-checking it against its
/// schema first.
fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    schema::validate_csv(header, &text)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ── cell records ─────────────────────────────────────────────────────────

/// One logged iteration of a cell, without wall-clock content. `loss` is
/// absent only for the synthetic row a zero-iteration run emits (there is
/// no minibatch, only the initialization's validation SNR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub loss: Option<f64>,
    pub eff_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Diverged { iteration: usize },
}

/// Persisted outcome of one training cell; deterministic bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub schema_version: u32,
    pub parameterization: Parameterization,
    pub rotation_init: RotationInit,
    pub realization: usize,
    /// Master seed of this cell's data/initialization streams.
    pub seed: u64,
    pub status: CellStatus,
    pub rows: Vec<CurveRow>,
    pub convergence_iterations: usize,
    /// Trained model (absent if the run diverged).
    pub model: Option<LdbpModel>,
}

impl CellRecord {
    pub fn final_snr_db(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eff_snr_db)
    }
}

fn curve_rows(record: &TrainRecord) -> Vec<CurveRow> {
    record
        .iterations
        .iter()
        .map(|r| CurveRow { iteration: r.iteration, loss: Some(r.loss), eff_snr_db: r.eff_snr_db })
        .collect()
}

// ── stable grid indices and seeds ────────────────────────────────────────

fn parameterization_code(p: Parameterization) -> u64 {
    Parameterization::ALL.iter().position(|&q| q == p).expect("listed") as u64
}

fn rotation_init_code(i: RotationInit) -> u64 {
    RotationInit::ALL.iter().position(|&q| q == i).expect("listed") as u64
}

/// Cell seeds depend on the cell's identity, never on its position in the
/// configured grid, so overlapping studies share identical cells.
fn cell_seed(master: u64, p: Parameterization, init: RotationInit, r: usize) -> u64 {
    derive_seed(
        master,
        &[stream::CELL, parameterization_code(p), rotation_init_code(init), r as u64],
    )
}

// ── shared stages ────────────────────────────────────────────────────────

/// Stage-1 model (dispersion taps trained on the polarization-free link),
/// computed once per output directory and reloaded afterwards.
pub fn ensure_pretrained(cfg: &ExperimentConfig) -> Result<LdbpModel> {
    cfg.validate()?;
    let path = cfg.pretrain_checkpoint_path();
    if path.exists() {
        let (model, lineage) = LdbpModel::load_checkpoint(&path)?;
        if lineage.first() != Some(&cfg.train.seed) {
            return Err(Error::config(format!(
                "{} belongs to a different master seed — use a fresh output directory",
                path.display()
            )));
        }
        return Ok(model);
    }

    let config = TrainConfig {
        n_iterations: cfg.pretrain_iterations,
        learning_rate: cfg.pretrain_learning_rate,
        rotation_init: RotationInit::Identity,
        ..cfg.train.clone()
    };
    let (model, record) = train_ldbp(&cfg.fiber, &cfg.setup, &cfg.layout, &config)?;

    let rows: Vec<String> = record
        .iterations
        .iter()
        .map(|r| format!("{},{},{}", r.iteration, r.loss, r.eff_snr_db))
        .collect();
    write_csv(&cfg.pretrain_curve_path(), schema::PRETRAIN_CURVE, &rows)?;
    model.save_checkpoint(&path, &[cfg.train.seed, stream::MODEL_INIT])?;
    Ok(model)
}

/// The `r`-th link realization of the experiment, cached on disk. A cached
/// file is cross-checked against a fresh draw so stale artifacts from a
/// different seed or code version cannot leak into a resumed run.
pub fn link_realization(cfg: &ExperimentConfig, r: usize) -> Result<PmdRealization> {
    if r >= cfg.n_realizations {
        return Err(Error::invalid(format!(
            "realization {r} out of range (configured {})",
            cfg.n_realizations
        )));
    }
    let mut rng = rng::rng_from(cfg.train.seed, &[stream::PMD_REALIZATION, r as u64]);
    let drawn = PmdRealization::sample(&cfg.fiber, &mut rng)?;
    let path = cfg.pmd_path(r);
    if path.exists() {
        let cached: PmdRealization = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if cached != drawn {
            return Err(Error::config(format!(
                "{} does not match the configured seed — use a fresh output directory",
                path.display()
            )));
        }
        return Ok(cached);
    }
    write_json(&path, &drawn)?;
    Ok(drawn)
}

fn cell_train_config(
    cfg: &ExperimentConfig,
    p: Parameterization,
    init: RotationInit,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        parameterization: p,
        rotation_init: init,
        learning_rate: cfg.learning_rate_for(p),
        seed,
        ..cfg.train.clone()
    }
}

/// Train (or reload) one grid cell. Divergence is recorded in the cell,
/// not returned as an error.
pub fn ensure_cell(
    cfg: &ExperimentConfig,
    pretrained: &LdbpModel,
    pmd: &PmdRealization,
    p: Parameterization,
    init: RotationInit,
    r: usize,
) -> Result<CellRecord> {
    let path = cfg.cell_path(p, init, r);
    let seed = cell_seed(cfg.train.seed, p, init, r);
    if path.exists() {
        let cell: CellRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if cell.schema_version != schema::VERSION
            || cell.parameterization != p
            || cell.rotation_init != init
            || cell.realization != r
            || cell.seed != seed
        {
            return Err(Error::config(format!(
                "{} does not match the configured run — use a fresh output directory",
                path.display()
            )));
        }
        return Ok(cell);
    }

    let config = cell_train_config(cfg, p, init, seed);
    let cell = match train_ldbp_pmd(&cfg.fiber, &cfg.setup, &cfg.layout, pretrained, pmd, &config)
    {
        Ok((model, record)) => {
            let mut rows = curve_rows(&record);
            if rows.is_empty() {
                // zero-iteration run: emit the initialization's SNR
                let snr = evaluate_model(&cfg.fiber, &cfg.setup, pmd, &model, &config)?;
                rows.push(CurveRow { iteration: 0, loss: None, eff_snr_db: snr });
            }
            CellRecord {
                schema_version: schema::VERSION,
                parameterization: p,
                rotation_init: init,
                realization: r,
                seed,
                status: CellStatus::Ok,
                convergence_iterations: convergence_iterations(&record),
                rows,
                model: Some(model),
            }
        }
        Err(Error::Diverged { iteration, .. }) => CellRecord {
            schema_version: schema::VERSION,
            parameterization: p,
            rotation_init: init,
            realization: r,
            seed,
            status: CellStatus::Diverged { iteration },
            rows: Vec::new(),
            convergence_iterations: 0,
            model: None,
        },
        Err(e) => return Err(e),
    };
    write_json(&path, &cell)?;
    Ok(cell)
}

/// Reload the full configured grid from disk (for the verbs that evaluate
/// previously trained models).
pub fn load_cells(cfg: &ExperimentConfig) -> Result<Vec<CellRecord>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &p in &cfg.parameterizations {
        for &init in &cfg.rotation_inits {
            for r in 0..cfg.n_realizations {
                let path = cfg.cell_path(p, init, r);
                if !path.exists() {
                    return Err(Error::config(format!(
                        "missing training cell {} — run the training verb first",
                        path.display()
                    )));
                }
                cells.push(serde_json::from_str(&fs::read_to_string(&path)?)?);
            }
        }
    }
    Ok(cells)
}

// ── aggregation ──────────────────────────────────────────────────────────

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1 denominator); 0 for fewer than 2 points.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean/std learning curve over the healthy cells of one grid point, as
/// CSV rows.
fn aggregate_curve(cells: &[&CellRecord]) -> Vec<String> {
    let ok: Vec<&CellRecord> = cells
        .iter()
        .copied()
        .filter(|c| c.status == CellStatus::Ok && !c.rows.is_empty())
        .collect();
    let Some(len) = ok.iter().map(|c| c.rows.len()).min() else {
        return Vec::new();
    };
    (0..len)
        .map(|k| {
            let snrs: Vec<f64> = ok.iter().map(|c| c.rows[k].eff_snr_db).collect();
            let losses: Option<Vec<f64>> = ok.iter().map(|c| c.rows[k].loss).collect();
            let mean_loss = losses.map(|l| format!("{}", mean(&l))).unwrap_or_default();
            format!(
                "{},{},{},{}",
                ok[0].rows[k].iteration,
                mean_loss,
                mean(&snrs),
                sample_std(&snrs)
            )
        })
        .collect()
}

// ── the grid study ───────────────────────────────────────────────────────

/// One summary row of the grid study (one parameterization × init pair,
/// aggregated over realizations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub parameterization: Parameterization,
    pub rotation_init: RotationInit,
    /// Peak of the realization-mean learning curve (dB).
    pub peak_mean_snr_db: f64,
    /// Sample std over realizations at the peak iteration (dB).
    pub std_at_peak_db: f64,
    pub mean_convergence_iterations: f64,
    pub dof_per_step: usize,
    pub rm_per_step: usize,
    pub n_diverged: usize,
}

/// Summary of a whole grid study; one row per (parameterization, init).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub rows: Vec<ResultRow>,
}

impl ResultSet {
    pub fn to_csv_string(&self) -> String {
        let mut text = String::from(schema::RESULTS);
        text.push('\n');
        for r in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.parameterization.name(),
                r.rotation_init.name(),
                r.peak_mean_snr_db,
                r.std_at_peak_db,
                r.mean_convergence_iterations,
                r.dof_per_step,
                r.rm_per_step,
                r.n_diverged
            ));
        }
        text
    }

    pub fn n_diverged(&self) -> usize {
        self.rows.iter().map(|r| r.n_diverged).sum()
    }
}

fn result_row(
    cfg: &ExperimentConfig,
    p: Parameterization,
    init: RotationInit,
    cells: &[&CellRecord],
) -> ResultRow {
    let ok: Vec<&CellRecord> = cells
        .iter()
        .copied()
        .filter(|c| c.status == CellStatus::Ok && !c.rows.is_empty())
        .collect();
    let n_diverged = cells.len() - ok.len();

    let (peak, std_at_peak, mean_conv) = if ok.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let len = ok.iter().map(|c| c.rows.len()).min().expect("non-empty");
        let mut peak_k = 0;
        let mut peak_mean = f64::NEG_INFINITY;
        for k in 0..len {
            let m = mean(&ok.iter().map(|c| c.rows[k].eff_snr_db).collect::<Vec<_>>());
            if m > peak_mean {
                peak_mean = m;
                peak_k = k;
            }
        }
        let at_peak: Vec<f64> = ok.iter().map(|c| c.rows[peak_k].eff_snr_db).collect();
        let convs: Vec<f64> = ok.iter().map(|c| c.convergence_iterations as f64).collect();
        (peak_mean, sample_std(&at_peak), mean(&convs))
    };

    // per-step complexity is a property of (parameterization, F) alone
    let probe = LdbpModel {
        steps: Vec::new(),
        parameterization: p,
        dgd_filter_len: cfg.layout.dgd_filter_len,
        gamma_rad_per_w_km: cfg.fiber.gamma_rad_per_w_km,
        sample_rate_hz: cfg.setup.receiver_sample_rate_hz(),
    };
    let cx = complexity(&probe);
    ResultRow {
        parameterization: p,
        rotation_init: init,
        peak_mean_snr_db: peak,
        std_at_peak_db: std_at_peak,
        mean_convergence_iterations: mean_conv,
        dof_per_step: cx.dof_per_step,
        rm_per_step: cx.rm_per_step,
        n_diverged,
    }
}

/// Train the whole (parameterization × rotation-init × realization) grid,
/// resuming any cells already on disk, and emit the per-grid-point mean
/// learning curves plus the summary table. Divergent cells are recorded
/// and counted, never fatal.
pub fn run_initialization_study(cfg: &ExperimentConfig) -> Result<ResultSet> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.config_echo_path(), cfg.to_toml_string()?)?;

    let pretrained = ensure_pretrained(cfg)?;
    let pmds: Vec<PmdRealization> =
        (0..cfg.n_realizations).map(|r| link_realization(cfg, r)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &p in &cfg.parameterizations {
        for &init in &cfg.rotation_inits {
            let mut cells = Vec::with_capacity(cfg.n_realizations);
            for (r, pmd) in pmds.iter().enumerate() {
                cells.push(ensure_cell(cfg, &pretrained, pmd, p, init, r)?);
            }
            let refs: Vec<&CellRecord> = cells.iter().collect();
            write_csv(&cfg.curve_path(p, init), schema::CURVE, &aggregate_curve(&refs))?;
            rows.push(result_row(cfg, p, init, &refs));
        }
    }

    let results = ResultSet { rows };
    let text = results.to_csv_string();
    schema::validate_csv(schema::RESULTS, &text)?;
    fs::write(cfg.results_path(), text)?;
    Ok(results)
}

// ── power sweep ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSweepRow {
    pub parameterization: Parameterization,
    pub rotation_init: RotationInit,
    pub power_dbm: f64,
    pub mean_eff_snr_db: f64,
    pub std_eff_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSweep {
    pub rows: Vec<PowerSweepRow>,
}

/// Evaluate the trained (fixed, never retrained) models of the grid across
/// the configured launch-power list, pooling mean/std over realizations.
/// Each model is evaluated on its own cell's validation stream, so the
/// training-power point reproduces the training-time validation data.
pub fn run_power_sweep(cfg: &ExperimentConfig, cells: &[CellRecord]) -> Result<PowerSweep> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut rows = Vec::new();
    for &p in &cfg.parameterizations {
        for &init in &cfg.rotation_inits {
            let grid_point: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| {
                    c.parameterization == p && c.rotation_init == init && c.model.is_some()
                })
                .collect();
            for &power in &cfg.power_sweep_dbm {
                let mut snrs = Vec::with_capacity(grid_point.len());
                for cell in &grid_point {
                    let pmd = link_realization(cfg, cell.realization)?;
                    let config = TrainConfig {
                        power_dbm: power,
                        ..cell_train_config(cfg, p, init, cell.seed)
                    };
                    let model = cell.model.as_ref().expect("filtered");
                    snrs.push(evaluate_model(&cfg.fiber, &cfg.setup, &pmd, model, &config)?);
                }
                if !snrs.is_empty() {
                    rows.push(PowerSweepRow {
                        parameterization: p,
                        rotation_init: init,
                        power_dbm: power,
                        mean_eff_snr_db: mean(&snrs),
                        std_eff_snr_db: sample_std(&snrs),
                    });
                }
            }
        }
    }

    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.parameterization.name(),
                r.rotation_init.name(),
                r.power_dbm,
                r.mean_eff_snr_db,
                r.std_eff_snr_db
            )
        })
        .collect();
    write_csv(&cfg.power_sweep_path(), schema::POWER_SWEEP, &csv_rows)?;
    Ok(PowerSweep { rows })
}

// ── baselines ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub realization: usize,
    pub baseline: String,
    pub power_dbm: f64,
    pub eff_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

/// The non-learned reference receivers for one link realization, across
/// the power list (or the training power if the list is empty):
///
/// - `ldbp-pmd-free`: the pretrained dispersion model on the matching link
///   without polarization effects — the polarization-unimpaired target.
/// - `ldbp-uncompensated`: the same model on the impaired link, nothing
///   compensating the polarization state.
/// - `ldbp-ideal-inverse`: impaired link, exact frequency-domain inverse of
///   the link's overall polarization transfer applied before the model.
/// - `dbp-pmd-free` / `dbp-ideal-inverse`: as above with the split-step
///   reference backpropagation (forward resolution) instead of the model.
pub fn run_baselines(cfg: &ExperimentConfig, realization: usize) -> Result<BaselineReport> {
    cfg.validate()?;
    let pretrained = ensure_pretrained(cfg)?;
    let pmd = link_realization(cfg, realization)?;
    baselines_for(cfg, &pretrained, &pmd, realization)
}

/// Baselines against an explicitly provided polarization state (the public
/// entry above samples it from the configured realization stream).
pub fn baselines_for(
    cfg: &ExperimentConfig,
    pretrained: &LdbpModel,
    pmd: &PmdRealization,
    realization: usize,
) -> Result<BaselineReport> {
    let powers: Vec<f64> = if cfg.power_sweep_dbm.is_empty() {
        vec![cfg.train.power_dbm]
    } else {
        cfg.power_sweep_dbm.clone()
    };
    let pmd_free = PmdRealization::pmd_free(pmd.taus_ps.len());
    let seed = derive_seed(cfg.train.seed, &[stream::BASELINE, realization as u64]);
    let rx_pulse = cfg.setup.rx_pulse()?;
    let dbp_steps =
        vec![
            cfg.fiber.span_length_km / cfg.setup.channel_steps_per_span as f64;
            cfg.setup.channel_steps_per_span
        ];

    let mut rows = Vec::new();
    for &power in &powers {
        let config = TrainConfig { power_dbm: power, seed, ..cfg.train.clone() };
        let lab_free = Lab::new(&cfg.fiber, &cfg.setup, &pmd_free, &config)?;
        let lab_pmd = Lab::new(&cfg.fiber, &cfg.setup, pmd, &config)?;
        let prepared = pretrained.prepare(lab_free.receiver_len())?;

        type Pair = (SymbolSequence, DualPolSignal);
        let draw = |lab: &Lab| -> Result<Vec<Pair>> {
            (0..config.validation_size)
                .into_par_iter()
                .map(|i| lab.synthesize(&[stream::VALIDATION, i as u64]))
                .collect()
        };
        let batch_free = draw(&lab_free)?;
        let batch_pmd = draw(&lab_pmd)?;

        let model_snr = |batch: &[Pair], invert_pol: bool| -> Result<f64> {
            let sums: Vec<(f64, f64)> = batch
                .par_iter()
                .map(|(symbols, received)| -> Result<(f64, f64)> {
                    let received = if invert_pol {
                        ideal_pmd_inverse(received, pmd)?
                    } else {
                        received.clone()
                    };
                    let (_, estimate) = tape::element_loss(
                        pretrained,
                        &prepared,
                        &received,
                        symbols,
                        &rx_pulse,
                        cfg.setup.symbol_rate_hz,
                    )?;
                    snr_sums(&estimate, symbols)
                })
                .collect::<Result<_>>()?;
            crate::train::pooled_snr_db(&sums, 0)
        };
        let dbp_snr = |batch: &[Pair], invert_pol: bool| -> Result<f64> {
            let sums: Vec<(f64, f64)> = batch
                .par_iter()
                .map(|(symbols, received)| -> Result<(f64, f64)> {
                    let received = if invert_pol {
                        ideal_pmd_inverse(received, pmd)?
                    } else {
                        received.clone()
                    };
                    let unwound = reference_dbp(&received, &cfg.fiber, &dbp_steps)?;
                    let down =
                        matched_filter_downsample(&unwound, &rx_pulse, cfg.setup.symbol_rate_hz)?;
                    let (estimate, _) = genie_phase_correct(&down, symbols)?;
                    snr_sums(&estimate, symbols)
                })
                .collect::<Result<_>>()?;
            crate::train::pooled_snr_db(&sums, 0)
        };

        for (name, snr) in [
            ("ldbp-pmd-free", model_snr(&batch_free, false)?),
            ("ldbp-uncompensated", model_snr(&batch_pmd, false)?),
            ("ldbp-ideal-inverse", model_snr(&batch_pmd, true)?),
            ("dbp-pmd-free", dbp_snr(&batch_free, false)?),
            ("dbp-ideal-inverse", dbp_snr(&batch_pmd, true)?),
        ] {
            rows.push(BaselineRow {
                realization,
                baseline: name.to_string(),
                power_dbm: power,
                eff_snr_db: snr,
            });
        }
    }
    Ok(BaselineReport { rows })
}

/// Baselines over every configured realization, written to one CSV.
pub fn run_baseline_suite(cfg: &ExperimentConfig) -> Result<Vec<BaselineReport>> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.n_realizations);
    for r in 0..cfg.n_realizations {
        reports.push(run_baselines(cfg, r)?);
    }
    let rows: Vec<String> = reports
        .iter()
        .flat_map(|rep| rep.rows.iter())
        .map(|r| format!("{},{},{},{}", r.realization, r.baseline, r.power_dbm, r.eff_snr_db))
        .collect();
    write_csv(&cfg.baselines_path(), schema::BASELINES, &rows)?;
    Ok(reports)
}

// ── delay-filter-length sweep ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSweepRow {
    pub dgd_filter_len: usize,
    pub peak_mean_snr_db: f64,
    pub std_at_peak_db: f64,
    pub mean_convergence_iterations: f64,
    pub n_diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSweep {
    pub rows: Vec<FilterSweepRow>,
}

/// Train the structured-rotation parameterization at each delay-filter
/// length in `filter_lengths` (random rotation init) over all realizations
/// and emit the mean curve per length plus a summary table.
pub fn run_filter_length_sweep(
    cfg: &ExperimentConfig,
    filter_lengths: &[usize],
) -> Result<FilterSweep> {
    cfg.validate()?;
    if filter_lengths.is_empty() {
        return Err(Error::invalid("filter_lengths must be non-empty"));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let pretrained = ensure_pretrained(cfg)?;
    let p = Parameterization::FreeDgdSu2Star;
    let init = RotationInit::RandomSu2;

    let mut rows = Vec::new();
    for &f in filter_lengths {
        if f == 0 {
            return Err(Error::invalid("delay filter length must be >= 1"));
        }
        let sweep_cfg = ExperimentConfig {
            layout: ModelLayout { dgd_filter_len: f, ..cfg.layout.clone() },
            ..cfg.clone()
        };
        let mut cells = Vec::with_capacity(cfg.n_realizations);
        for r in 0..cfg.n_realizations {
            let pmd = link_realization(cfg, r)?;
            let path = cfg.filter_cell_path(f, r);
            let seed = derive_seed(cfg.train.seed, &[stream::FILTER_SWEEP, f as u64, r as u64]);
            let cell = if path.exists() {
                let cell: CellRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
                if cell.seed != seed || cell.realization != r {
                    return Err(Error::config(format!(
                        "{} does not match the configured run — use a fresh output directory",
                        path.display()
                    )));
                }
                cell
            } else {
                let config = cell_train_config(&sweep_cfg, p, init, seed);
                let cell = match train_ldbp_pmd(
                    &sweep_cfg.fiber,
                    &sweep_cfg.setup,
                    &sweep_cfg.layout,
                    &pretrained,
                    &pmd,
                    &config,
                ) {
                    Ok((model, record)) => {
                        let mut rows = curve_rows(&record);
                        if rows.is_empty() {
                            let snr = evaluate_model(
                                &sweep_cfg.fiber,
                                &sweep_cfg.setup,
                                &pmd,
                                &model,
                                &config,
                            )?;
                            rows.push(CurveRow { iteration: 0, loss: None, eff_snr_db: snr });
                        }
                        CellRecord {
                            schema_version: schema::VERSION,
                            parameterization: p,
                            rotation_init: init,
                            realization: r,
                            seed,
                            status: CellStatus::Ok,
                            convergence_iterations: convergence_iterations(&record),
                            rows,
                            model: Some(model),
                        }
                    }
                    Err(Error::Diverged { iteration, .. }) => CellRecord {
                        schema_version: schema::VERSION,
                        parameterization: p,
                        rotation_init: init,
                        realization: r,
                        seed,
                        status: CellStatus::Diverged { iteration },
                        rows: Vec::new(),
                        convergence_iterations: 0,
                        model: None,
                    },
                    Err(e) => return Err(e),
                };
                write_json(&path, &cell)?;
                cell
            };
            cells.push(cell);
        }
        let refs: Vec<&CellRecord> = cells.iter().collect();
        write_csv(&cfg.filter_curve_path(f), schema::CURVE, &aggregate_curve(&refs))?;
        let summary = result_row(&sweep_cfg, p, init, &refs);
        rows.push(FilterSweepRow {
            dgd_filter_len: f,
            peak_mean_snr_db: summary.peak_mean_snr_db,
            std_at_peak_db: summary.std_at_peak_db,
            mean_convergence_iterations: summary.mean_convergence_iterations,
            n_diverged: summary.n_diverged,
        });
    }

    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.dgd_filter_len,
                r.peak_mean_snr_db,
                r.std_at_peak_db,
                r.mean_convergence_iterations,
                r.n_diverged
            )
        })
        .collect();
    write_csv(&cfg.filter_summary_path(), schema::FILTER_SWEEP, &csv_rows)?;
    Ok(FilterSweep { rows })
}

// ── retraining after a link swap ─────────────────────────────────────────

/// Continue training a converged model against a different link
/// realization (same data distribution, new polarization state) and report
/// the recovery curve.
pub fn run_pmd_swap(
    cfg: &ExperimentConfig,
    start: &LdbpModel,
    new_pmd: &PmdRealization,
    seed: u64,
) -> Result<(LdbpModel, TrainRecord)> {
    cfg.validate()?;
    let config = TrainConfig {
        parameterization: start.parameterization,
        learning_rate: cfg.learning_rate_for(start.parameterization),
        seed,
        ..cfg.train.clone()
    };
    continue_training(&cfg.fiber, &cfg.setup, new_pmd, start, &config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdSwapRow {
    pub parameterization: Parameterization,
    pub rotation_init: RotationInit,
    pub from_realization: usize,
    pub to_realization: usize,
    pub swapped_final_snr_db: f64,
    pub fresh_final_snr_db: f64,
    pub convergence_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdSwapReport {
    pub rows: Vec<PmdSwapRow>,
}

/// For every grid point, retrain the realization-0 model on realization 1
/// and compare its final SNR against the fresh-trained cell of realization
/// 1. Requires the grid cells on disk and ≥ 2 realizations.
pub fn run_pmd_swap_study(cfg: &ExperimentConfig) -> Result<PmdSwapReport> {
    cfg.validate()?;
    if cfg.n_realizations < 2 {
        return Err(Error::config("the link-swap study needs >= 2 realizations"));
    }
    let cells = load_cells(cfg)?;
    let (from, to) = (0usize, 1usize);
    let new_pmd = link_realization(cfg, to)?;

    let mut rows = Vec::new();
    for &p in &cfg.parameterizations {
        for &init in &cfg.rotation_inits {
            let find = |r: usize| {
                cells.iter().find(|c| {
                    c.parameterization == p && c.rotation_init == init && c.realization == r
                })
            };
            let (Some(source), Some(fresh)) = (find(from), find(to)) else { continue };
            let (Some(start), Some(fresh_snr)) = (&source.model, fresh.final_snr_db()) else {
                continue; // a diverged endpoint has nothing to compare
            };

            let path = cfg.swap_cell_path(p, init, from, to);
            let seed = derive_seed(
                cfg.train.seed,
                &[
                    stream::SWAP,
                    parameterization_code(p),
                    rotation_init_code(init),
                    from as u64,
                    to as u64,
                ],
            );
            let cell = if path.exists() {
                let cell: CellRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
                if cell.seed != seed {
                    return Err(Error::config(format!(
                        "{} does not match the configured run — use a fresh output directory",
                        path.display()
                    )));
                }
                cell
            } else {
                let cell = match run_pmd_swap(cfg, start, &new_pmd, seed) {
                    Ok((model, record)) => CellRecord {
                        schema_version: schema::VERSION,
                        parameterization: p,
                        rotation_init: init,
                        realization: to,
                        seed,
                        status: CellStatus::Ok,
                        convergence_iterations: convergence_iterations(&record),
                        rows: curve_rows(&record),
                        model: Some(model),
                    },
                    Err(Error::Diverged { iteration, .. }) => CellRecord {
                        schema_version: schema::VERSION,
                        parameterization: p,
                        rotation_init: init,
                        realization: to,
                        seed,
                        status: CellStatus::Diverged { iteration },
                        rows: Vec::new(),
                        convergence_iterations: 0,
                        model: None,
                    },
                    Err(e) => return Err(e),
                };
                write_json(&path, &cell)?;
                cell
            };

            if let Some(swapped_snr) = cell.final_snr_db() {
                rows.push(PmdSwapRow {
                    parameterization: p,
                    rotation_init: init,
                    from_realization: from,
                    to_realization: to,
                    swapped_final_snr_db: swapped_snr,
                    fresh_final_snr_db: fresh_snr,
                    convergence_iterations: cell.convergence_iterations,
                });
            }
        }
    }

    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.parameterization.name(),
                r.rotation_init.name(),
                r.from_realization,
                r.to_realization,
                r.swapped_final_snr_db,
                r.fresh_final_snr_db,
                r.convergence_iterations
            )
        })
        .collect();
    write_csv(&cfg.pmd_swap_path(), schema::PMD_SWAP, &csv_rows)?;
    Ok(PmdSwapReport { rows })
}

// ── report ───────────────────────────────────────────────────────────────

/// Human-readable summary of whatever artifacts exist in the output
/// directory, validating each CSV against its schema along the way.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let mut out = String::new();
    out.push_str(&format!(
        "experiment output: {}\nmaster seed: {}\nlink: {} x {} km, {} steps/span forward, \
         section length {} km\nmodel: {} steps/span + boundary step, mean dispersion filter {} \
         taps, delay filter {} taps\n",
        cfg.output_dir.display(),
        cfg.train.seed,
        cfg.fiber.n_spans,
        cfg.fiber.span_length_km,
        cfg.setup.channel_steps_per_span,
        cfg.fiber.correlation_length_km,
        cfg.layout.steps_per_span,
        cfg.layout.mean_cd_filter_len,
        cfg.layout.dgd_filter_len,
    ));

    let section = |title: &str, path: &Path, header: &str, out: &mut String| -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(path)?;
        schema::validate_csv(header, &text)?;
        out.push_str(&format!("\n== {title} ({}) ==\n", path.display()));
        for line in text.lines() {
            out.push_str("  ");
            out.push_str(&line.replace(',', "  "));
            out.push('\n');
        }
        Ok(())
    };

    section("grid summary", &cfg.results_path(), schema::RESULTS, &mut out)?;
    section("power sweep", &cfg.power_sweep_path(), schema::POWER_SWEEP, &mut out)?;
    section("baselines", &cfg.baselines_path(), schema::BASELINES, &mut out)?;
    section("delay-filter lengths", &cfg.filter_summary_path(), schema::FILTER_SWEEP, &mut out)?;
    section("link-swap retraining", &cfg.pmd_swap_path(), schema::PMD_SWAP, &mut out)?;

    if out.lines().count() <= 4 {
        out.push_str("\n(no study artifacts yet — run a training verb first)\n");
    }
    Ok(out)
}
