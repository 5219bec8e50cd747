//! Experiment orchestration: the model-variant sweep, the ablation grid,
//! record aggregation, and deterministic seed derivation. Everything is
//! driven by one JSON config; re-running a config reproduces every record
//! bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::{gen_synthetic, load_csv, make_folds, normalize, Dataset, Fold, NormStats, SyntheticConfig};
use crate::hwsim::{report_for_shape, CycleReport, DesignKind, DEFAULT_CLOCK_HZ};
use crate::intinfer::{convert_with_norm, int_forward, QuantizedMlp};
use crate::mlp::{evaluate_denormalized, init_model, mse, train, TrainConfig};
use crate::qat::{qat_train, QatModel, QuantScheme};

/// Where the experiment data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Csv { path: String, input_columns: Vec<String>, target_column: String },
    Synthetic(SyntheticConfig),
}

/// Model variant under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    MFloat,
    MFixed,
    MLinear,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::MFloat => "m-float",
            Variant::MFixed => "m-fixed",
            Variant::MLinear => "m-linear",
        }
    }

    fn schemes(&self) -> Option<(QuantScheme, QuantScheme)> {
        match self {
            Variant::MFloat => None,
            Variant::MFixed => Some((QuantScheme::FIXED68, QuantScheme::FIXED68)),
            Variant::MLinear => Some((QuantScheme::LINEAR8, QuantScheme::LINEAR8)),
        }
    }

    fn design(&self) -> Option<DesignKind> {
        match self {
            Variant::MFloat => None,
            Variant::MFixed => Some(DesignKind::FixedBaseline),
            Variant::MLinear => Some(DesignKind::PipelinedLinear),
        }
    }
}

/// Optional per-(design, hidden) power override in milliwatts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerOverride {
    pub design: DesignKind,
    pub hidden: usize,
    pub milliwatts: f64,
}

/// The single experiment configuration consumed by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub hidden_sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub folds: usize,
    pub runs_per_fold: usize,
    pub master_seed: u64,
    pub train: TrainConfig,
    pub clock_hz: f64,
    pub power_mw: Vec<PowerOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DataSource::Synthetic(SyntheticConfig::default()),
            hidden_sizes: vec![10, 30],
            variants: vec![Variant::MFloat, Variant::MFixed, Variant::MLinear],
            folds: 7,
            runs_per_fold: 3,
            master_seed: 42,
            train: TrainConfig::default(),
            clock_hz: DEFAULT_CLOCK_HZ,
            power_mw: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() {
            bail!("at least one hidden size required");
        }
        if self.variants.is_empty() {
            bail!("at least one variant required");
        }
        if self.runs_per_fold < 1 {
            bail!("runs_per_fold must be >= 1");
        }
        Ok(())
    }

    /// Stable short hash of the canonical config serialization; names the
    /// run directory.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config is serializable");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DataSource::Synthetic(cfg) => Ok(gen_synthetic(cfg)),
            DataSource::Csv { path, input_columns, target_column } => {
                load_csv(path, input_columns, target_column)
                    .with_context(|| format!("loading {path}"))
            }
        }
    }

    fn power_for(&self, design: DesignKind, hidden: usize) -> Option<f64> {
        self.power_mw
            .iter()
            .find(|p| p.design == design && p.hidden == hidden)
            .map(|p| p.milliwatts)
    }
}

/// run_seed = hash(master seed, fold, run index, variant, size)
pub fn derive_seed(master: u64, fold: usize, run: usize, variant_tag: &str, hidden: usize) -> u64 {
    let key = format!("{master}:{fold}:{run}:{variant_tag}:{hidden}");
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// One sweep cell result. Quantization and hardware fields are absent for
/// M-Float records; `error` is set when the cell's training diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub run: usize,
    pub variant: String,
    pub hidden: usize,
    pub scheme_hidden: String,
    pub scheme_output: String,
    pub seed: u64,
    pub test_mse: Option<f64>,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub agreement_rate: Option<f64>,
    pub max_err_lsb: Option<f64>,
    pub cycles: Option<u64>,
    pub latency_us: Option<f64>,
    pub energy_uj: Option<f64>,
    pub error: String,
}

fn scheme_letter(s: QuantScheme) -> &'static str {
    match s {
        QuantScheme::AffineAdaptive { .. } => "L",
        QuantScheme::FixedPoint { .. } => "F",
    }
}

/// Fake-quant vs integer agreement over a dataset, in output LSB units.
pub fn agreement_stats(m: &QatModel, qm: &QuantizedMlp, ds: &Dataset) -> (f64, f64) {
    let lsb = qm.output_params.scale;
    let mut within = 0usize;
    let mut max_err = 0.0f64;
    for x in &ds.inputs {
        let y_fq = m.forward(x);
        let (_, y_int) = int_forward(qm, x).expect("shapes match");
        let err = (y_fq - y_int).abs() / lsb;
        max_err = max_err.max(err);
        if err <= 1.0 + 1e-9 {
            within += 1;
        }
    }
    (within as f64 / ds.len() as f64, max_err)
}

struct NormalizedFold {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
    stats: NormStats,
}

fn normalize_fold(fold: &Fold) -> NormalizedFold {
    let stats = NormStats::from_dataset(&fold.train);
    NormalizedFold {
        train: normalize(&fold.train, &stats),
        validation: normalize(&fold.validation, &stats),
        test: normalize(&fold.test, &stats),
        stats,
    }
}

/// Trains one quantized cell and fills in the quantization/hardware fields.
/// Returns the converted model for optional packaging.
fn run_quantized_cell(
    nf: &NormalizedFold,
    hidden: usize,
    schemes: (QuantScheme, QuantScheme),
    design: DesignKind,
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    record: &mut RunRecord,
) -> Result<Option<QuantizedMlp>> {
    record.scheme_hidden = scheme_letter(schemes.0).to_string();
    record.scheme_output = scheme_letter(schemes.1).to_string();
    let (model, history) = match qat_train(&nf.train, &nf.validation, hidden, schemes, train_cfg) {
        Ok(r) => r,
        Err(e) => {
            record.error = e.to_string();
            return Ok(None);
        }
    };
    let pred: Vec<f64> = nf.test.inputs.iter().map(|x| model.forward(x)).collect();
    let span = nf.stats.target_span();
    record.test_mse = Some(mse(&pred, &nf.test.targets) * span * span);
    record.epochs = Some(history.val_loss.len());
    record.best_epoch = Some(history.best_epoch);

    let qm = convert_with_norm(&model, nf.stats.clone())?;
    let (rate, max_err) = agreement_stats(&model, &qm, &nf.test);
    record.agreement_rate = Some(rate);
    record.max_err_lsb = Some(max_err);

    let hw: CycleReport = report_for_shape(
        hidden,
        nf.train.dim(),
        design,
        cfg.clock_hz,
        cfg.power_for(design, hidden),
    );
    record.cycles = Some(hw.total_cycles);
    record.latency_us = Some(hw.latency_us());
    record.energy_uj = Some(hw.energy_uj());
    Ok(Some(qm))
}

/// Runs the full (fold × run × variant × size) sweep. When `package_dir` is
/// given, each converted quantized model is exported there.
pub fn run_training_sweep(
    cfg: &ExperimentConfig,
    package_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let folds = make_folds(&ds, cfg.folds)?;
    if let Some(dir) = package_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut records = Vec::new();
    for (fold_idx, fold) in folds.iter().enumerate() {
        let nf = normalize_fold(fold);
        for &hidden in &cfg.hidden_sizes {
            for &variant in &cfg.variants {
                for run in 0..cfg.runs_per_fold {
                    let seed = derive_seed(cfg.master_seed, fold_idx, run, variant.tag(), hidden);
                    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
                    let mut record = RunRecord {
                        fold: fold_idx,
                        run,
                        variant: variant.tag().to_string(),
                        hidden,
                        scheme_hidden: String::new(),
                        scheme_output: String::new(),
                        seed,
                        test_mse: None,
                        epochs: None,
                        best_epoch: None,
                        agreement_rate: None,
                        max_err_lsb: None,
                        cycles: None,
                        latency_us: None,
                        energy_uj: None,
                        error: String::new(),
                    };
                    match variant.schemes() {
                        None => {
                            // Same two-phase protocol as the quantized cells
                            // (which pretrain in float and then fine-tune),
                            // so variants differ only in quantization, not in
                            // optimization budget.
                            let model = init_model(nf.train.dim(), hidden, seed);
                            let result = train(model, &nf.train, &nf.validation, &train_cfg)
                                .and_then(|(m, _)| train(m, &nf.train, &nf.validation, &train_cfg));
                            match result {
                                Ok((model, history)) => {
                                    record.test_mse =
                                        Some(evaluate_denormalized(&model, &nf.test, &nf.stats));
                                    record.epochs = Some(history.val_loss.len());
                                    record.best_epoch = Some(history.best_epoch);
                                }
                                Err(e) => record.error = e.to_string(),
                            }
                        }
                        Some(schemes) => {
                            let design = variant.design().expect("quantized variant");
                            let qm = run_quantized_cell(
                                &nf, hidden, schemes, design, cfg, &train_cfg, &mut record,
                            )?;
                            if let (Some(qm), Some(dir)) = (qm, package_dir) {
                                let name = format!(
                                    "{}-h{}-fold{}-run{}.json",
                                    variant.tag(),
                                    hidden,
                                    fold_idx,
                                    run
                                );
                                crate::intinfer::export_package(&qm, dir.join(name))?;
                            }
                        }
                    }
                    records.push(record);
                }
            }
        }
    }
    Ok(records)
}

/// The 4-cell {L,F}×{L,F} ablation grid on fold 0, per hidden size.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let folds = make_folds(&ds, cfg.folds)?;
    let nf = normalize_fold(&folds[0]);

    let grid = [
        (QuantScheme::LINEAR8, QuantScheme::LINEAR8),
        (QuantScheme::LINEAR8, QuantScheme::FIXED68),
        (QuantScheme::FIXED68, QuantScheme::LINEAR8),
        (QuantScheme::FIXED68, QuantScheme::FIXED68),
    ];
    let mut records = Vec::new();
    for &hidden in &cfg.hidden_sizes {
        for &schemes in &grid {
            for run in 0..cfg.runs_per_fold {
                let cell_tag = format!(
                    "ablation-{}{}",
                    scheme_letter(schemes.0),
                    scheme_letter(schemes.1)
                );
                let seed = derive_seed(cfg.master_seed, 0, run, &cell_tag, hidden);
                let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
                let mut record = RunRecord {
                    fold: 0,
                    run,
                    variant: cell_tag,
                    hidden,
                    scheme_hidden: String::new(),
                    scheme_output: String::new(),
                    seed,
                    test_mse: None,
                    epochs: None,
                    best_epoch: None,
                    agreement_rate: None,
                    max_err_lsb: None,
                    cycles: None,
                    latency_us: None,
                    energy_uj: None,
                    error: String::new(),
                };
                let design = match schemes {
                    (QuantScheme::FixedPoint { .. }, QuantScheme::FixedPoint { .. }) => {
                        DesignKind::FixedBaseline
                    }
                    _ => DesignKind::PipelinedLinear,
                };
                run_quantized_cell(&nf, hidden, schemes, design, cfg, &train_cfg, &mut record)?;
                records.push(record);
            }
        }
    }
    Ok(records)
}

pub fn write_records_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Aggregate statistics for one (variant, hidden) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: String,
    pub hidden: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub variance: f64,
}

/// Per-cell summary plus the M-Linear vs M-Fixed percent reduction per size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    /// hidden size -> percent MSE reduction of M-Linear relative to M-Fixed,
    /// (fixed - linear)/fixed * 100, from cell medians.
    pub linear_vs_fixed_reduction_pct: BTreeMap<usize, f64>,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn percent_reduction(fixed: f64, linear: f64) -> f64 {
    (fixed - linear) / fixed * 100.0
}

/// Medians, means, min and variance per (variant, hidden) cell over all
/// records with a finite test MSE.
pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    if records.is_empty() {
        bail!("no records to summarize");
    }
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(mse) = r.test_mse {
            groups.entry((r.variant.clone(), r.hidden)).or_default().push(mse);
        }
    }
    let mut cells = Vec::new();
    for ((variant, hidden), mut values) in groups {
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let variance =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let med = median(&mut values);
        cells.push(CellSummary { variant, hidden, count, mean, median: med, min, variance });
    }
    let mut reduction = BTreeMap::new();
    let med_of = |cells: &[CellSummary], variant: &str, hidden: usize| -> Option<f64> {
        cells
            .iter()
            .find(|c| c.variant == variant && c.hidden == hidden)
            .map(|c| c.median)
    };
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = cells.iter().map(|c| c.hidden).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for h in sizes {
        if let (Some(fixed), Some(linear)) =
            (med_of(&cells, "m-fixed", h), med_of(&cells, "m-linear", h))
        {
            reduction.insert(h, percent_reduction(fixed, linear));
        }
    }
    Ok(Summary { cells, linear_vs_fixed_reduction_pct: reduction })
}
