use std::path::{Path, PathBuf};
use std::time::Instant;

use fairprice_core::data::{
    generate_synthetic, generate_synthetic_frequency, split_indices, write_csv, RawTable, SchemaConfig, TableEncoder,
};
use fairprice_core::dependence::{HgrEstimator, HgrNnConfig, RdcConfig};
use fairprice_core::pricing::{
    evaluate, fit_autoencoder, fit_two_stage, AutoencoderConfig, Evaluation, EvaluationConfig, TwoStageConfig,
    TwoStageModel,
};
use fairprice_core::{persist, FairTrainConfig, Portfolio, PricingModel, Task, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    Arch, Cli, Command, ComponentEstimatorArg, EstimatorArg, FitArgs, HgrArgs, ModelArgs, PenaltyArg, SweepArgs,
    SynthArgs, TaskArg,
};
use crate::output::{read_bytes, CliError, CliResult, RunManifest, Workdir};

pub const THREADS_ENV: &str = "FAIRPRICE_THREADS";

pub fn run(cli: Cli) -> CliResult<()> {
    let wd = Workdir::new(cli.workdir);
    let started = cli.timings.then(Instant::now);
    match cli.command {
        Command::Synth(a) => synth(&wd, &a, started),
        Command::Fit(a) => fit(&wd, &a, started),
        Command::Sweep(a) => sweep(&wd, &a, started),
        Command::Hgr(a) => hgr(&wd, &a, started),
    }
}

/// `dir/name.csv` → `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Serialize)]
struct SynthConfig {
    n: usize,
    seed: u64,
    task: TaskArg,
}

fn synth(wd: &Workdir, a: &SynthArgs, started: Option<Instant>) -> CliResult<()> {
    let portfolio = match a.task {
        TaskArg::Binary => generate_synthetic(a.n, a.seed)?,
        TaskArg::Frequency => generate_synthetic_frequency(a.n, a.seed)?,
        TaskArg::Severity => return Err(CliError::Usage("synthetic data supports the binary and frequency tasks".into())),
    };
    let out = wd.resolve(&a.out);
    let mut csv = Vec::new();
    write_csv(&portfolio, &mut csv)?;
    let schema_path = sibling(&out, "schema.json");
    let mut manifest = RunManifest::new(
        "synth",
        SynthConfig {
            n: a.n,
            seed: a.seed,
            task: a.task,
        },
        vec![a.seed],
    )?;
    manifest.write_output(&out, &file_label(&out), &csv)?;
    manifest.write_output(&schema_path, &file_label(&schema_path), portfolio.schema().to_json()?.as_bytes())?;
    manifest.finish(&sibling(&out, "manifest.json"), started)
}

/// Encoded train and test splits of one seed.
struct Prepared {
    train: Portfolio,
    test: Portfolio,
    encoder: TableEncoder,
    warnings: Vec<String>,
}

struct Inputs {
    table: RawTable,
    schema: SchemaConfig,
    data_bytes: Vec<u8>,
    schema_bytes: Vec<u8>,
}

fn load_inputs(wd: &Workdir, m: &ModelArgs) -> CliResult<Inputs> {
    if !(m.train_frac > 0.0 && m.train_frac < 1.0) {
        return Err(CliError::Usage("--train-frac must lie strictly between 0 and 1".into()));
    }
    let data_path = wd.resolve(&m.data);
    let schema_path = wd.resolve(&m.schema);
    let data_bytes = read_bytes(&data_path)?;
    let schema_bytes = read_bytes(&schema_path)?;
    let mut schema = SchemaConfig::from_json(&String::from_utf8_lossy(&schema_bytes))?;
    if let Some(t) = m.task {
        schema.task = t.into();
    }
    Ok(Inputs {
        table: RawTable::read(&data_path)?,
        schema,
        data_bytes,
        schema_bytes,
    })
}

/// Encoder statistics come from the training rows only.
fn prepare(inputs: &Inputs, train_frac: f64, seed: u64) -> CliResult<Prepared> {
    let (train_idx, test_idx) = split_indices(inputs.table.rows.len(), train_frac, seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(CliError::Usage("the split leaves an empty train or test set".into()));
    }
    let train_table = inputs.table.select_rows(&train_idx);
    let encoder = TableEncoder::fit(&train_table, &inputs.schema)?;
    let (train, mut warnings) = encoder.encode(&train_table)?;
    let (test, test_warnings) = encoder.encode(&inputs.table.select_rows(&test_idx))?;
    warnings.extend(test_warnings.into_iter().map(|w| format!("test split: {w}")));
    Ok(Prepared {
        train,
        test,
        encoder,
        warnings,
    })
}

fn check_penalty(penalty: PenaltyArg, lambda: f64) -> CliResult<()> {
    if penalty == PenaltyArg::None && lambda != 0.0 {
        return Err(CliError::Usage("--penalty none requires --lambda 0".into()));
    }
    Ok(())
}

fn fair_config(m: &ModelArgs, penalty: PenaltyArg, lambda: f64, seed: u64) -> FairTrainConfig {
    let defaults = TrainConfig::default();
    FairTrainConfig {
        penalty: penalty.kind(),
        objective: m.objective.into(),
        lambda,
        train: TrainConfig {
            epochs: m.epochs.unwrap_or(defaults.epochs),
            batch_size: m.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: m.learning_rate.unwrap_or(defaults.learning_rate),
            seed,
            ..defaults
        },
        ..FairTrainConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
enum ArchConfig {
    TwoStage(TwoStageConfig),
    Autoencoder(AutoencoderConfig),
}

fn arch_config(arch: Arch, fair: FairTrainConfig) -> ArchConfig {
    match arch {
        Arch::TwoStage => ArchConfig::TwoStage(TwoStageConfig {
            component_train: fair.train.clone(),
            fair,
            ..TwoStageConfig::default()
        }),
        Arch::Autoencoder => ArchConfig::Autoencoder(AutoencoderConfig {
            fair,
            ..AutoencoderConfig::default()
        }),
    }
}

fn evaluation_config(m: &ModelArgs) -> EvaluationConfig {
    EvaluationConfig {
        components: match m.component_estimator {
            ComponentEstimatorArg::Nn => Some(HgrEstimator::Neural(HgrNnConfig::default())),
            ComponentEstimatorArg::Rdc => Some(HgrEstimator::Rdc(RdcConfig::default())),
            ComponentEstimatorArg::None => None,
        },
        ..EvaluationConfig::default()
    }
}

#[derive(Serialize)]
struct FitSnapshot<'a> {
    model_args: &'a ModelArgs,
    task: Task,
    penalty: PenaltyArg,
    seed: u64,
    model: &'a ArchConfig,
    evaluation: &'a EvaluationConfig,
}

fn fit(wd: &Workdir, a: &FitArgs, started: Option<Instant>) -> CliResult<()> {
    check_penalty(a.penalty, a.lambda)?;
    let inputs = load_inputs(wd, &a.model)?;
    let prepared = prepare(&inputs, a.model.train_frac, a.seed)?;
    let cfg = arch_config(a.arch, fair_config(&a.model, a.penalty, a.lambda, a.seed));
    let eval_cfg = evaluation_config(&a.model);
    let (model, trace) = match &cfg {
        ArchConfig::TwoStage(c) => {
            let (m, t) = fit_two_stage(&prepared.train, c)?;
            (PricingModel::TwoStage(m), t)
        }
        ArchConfig::Autoencoder(c) => {
            let (m, t) = fit_autoencoder(&prepared.train, c)?;
            (PricingModel::Autoencoder(m), t)
        }
    };
    let evaluation = evaluate(&model, &prepared.test, &eval_cfg)?;

    let mut manifest = RunManifest::new(
        "fit",
        FitSnapshot {
            model_args: &a.model,
            task: inputs.schema.task,
            penalty: a.penalty,
            seed: a.seed,
            model: &cfg,
            evaluation: &eval_cfg,
        },
        vec![a.seed],
    )?;
    manifest.add_input(&a.model.data, &inputs.data_bytes);
    manifest.add_input(&a.model.schema, &inputs.schema_bytes);
    manifest.warnings = prepared.warnings;
    manifest.warnings.extend(trace.warnings.iter().cloned());
    let out = wd.resolve(&a.out);
    let report_csv = format!("{}\n{}\n", Evaluation::csv_header(), evaluation.csv_row());
    let files: [(&str, Vec<u8>); 5] = [
        ("model.json", model.to_json()?.into_bytes()),
        ("encoder.json", persist::to_json("table_encoder", &prepared.encoder)?.into_bytes()),
        ("trace.csv", trace.to_csv().into_bytes()),
        ("report.json", evaluation.to_json()?.into_bytes()),
        ("report.csv", report_csv.into_bytes()),
    ];
    for (name, bytes) in files {
        manifest.write_output(&out.join(name), name, &bytes)?;
    }
    manifest.finish(&out.join("manifest.json"), started)
}

const SWEEP_KEY_COLUMNS: [&str; 5] = ["arch", "lambda", "seed", "status", "error"];

/// One finished cell: the CSV fields after the key columns.
type CellResult = Result<Evaluation, String>;

#[derive(Serialize)]
struct SweepSnapshot<'a> {
    model_args: &'a ModelArgs,
    task: Task,
    archs: Vec<&'static str>,
    penalty: PenaltyArg,
    lambdas: &'a [String],
    threads: usize,
    evaluation: &'a EvaluationConfig,
}

fn worker_threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

/// Runs every λ of one (architecture, seed) pair. Two-stage components do
/// not depend on λ, so they are fitted once and only the final predictor is
/// refitted.
fn sweep_unit(inputs: &Inputs, a: &SweepArgs, lambdas: &[f64], arch: Arch, seed: u64) -> Vec<CellResult> {
    let eval_cfg = evaluation_config(&a.model);
    let prepared = match prepare(inputs, a.model.train_frac, seed) {
        Ok(p) => p,
        Err(e) => return vec![Err(e.to_string()); lambdas.len()],
    };
    let mut components: Option<TwoStageModel> = None;
    let mut cell = |lambda: f64| -> CliResult<Evaluation> {
        let model = match arch_config(arch, fair_config(&a.model, a.penalty, lambda, seed)) {
            ArchConfig::TwoStage(c) => {
                let m = match &components {
                    Some(base) => {
                        let mut m = base.clone();
                        m.refit_final(&prepared.train, &c.final_hidden, &c.fair)?;
                        m
                    }
                    None => {
                        let (m, _) = fit_two_stage(&prepared.train, &c)?;
                        components = Some(m.clone());
                        m
                    }
                };
                PricingModel::TwoStage(m)
            }
            ArchConfig::Autoencoder(c) => PricingModel::Autoencoder(fit_autoencoder(&prepared.train, &c)?.0),
        };
        Ok(evaluate(&model, &prepared.test, &eval_cfg)?)
    };
    lambdas.iter().map(|&l| cell(l).map_err(|e| e.to_string())).collect()
}

fn sweep(wd: &Workdir, a: &SweepArgs, started: Option<Instant>) -> CliResult<()> {
    let lambdas = a
        .lambdas
        .iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("invalid lambda `{s}`")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    for &l in &lambdas {
        check_penalty(a.penalty, l)?;
    }
    let threads = worker_threads()?;
    let inputs = load_inputs(wd, &a.model)?;
    let units: Vec<(Arch, u64)> = a.arch.iter().flat_map(|&arch| a.seeds.iter().map(move |&s| (arch, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Vec<CellResult>> =
        pool.install(|| units.par_iter().map(|&(arch, seed)| sweep_unit(&inputs, a, &lambdas, arch, seed)).collect());

    let mut writer = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = SWEEP_KEY_COLUMNS
        .iter()
        .map(ToString::to_string)
        .chain(Evaluation::csv_header().split(',').map(str::to_string))
        .collect();
    writer.write_record(&header).map_err(fairprice_core::Error::from)?;
    // Rows in (arch, λ, seed) order regardless of completion order.
    for (ai, arch) in a.arch.iter().enumerate() {
        for (li, lambda) in a.lambdas.iter().enumerate() {
            for (si, seed) in a.seeds.iter().enumerate() {
                let (status, error, cells) = match &results[ai * a.seeds.len() + si][li] {
                    Ok(e) => ("ok", String::new(), e.csv_row()),
                    Err(msg) => ("error", msg.clone(), Evaluation::empty_csv_row()),
                };
                let mut record = vec![arch.name().to_string(), lambda.trim().to_string(), seed.to_string()];
                record.push(status.to_string());
                record.push(error);
                record.extend(cells.split(',').map(str::to_string));
                writer.write_record(&record).map_err(fairprice_core::Error::from)?;
            }
        }
    }
    let csv = writer.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;

    let eval_cfg = evaluation_config(&a.model);
    let mut manifest = RunManifest::new(
        "sweep",
        SweepSnapshot {
            model_args: &a.model,
            task: inputs.schema.task,
            archs: a.arch.iter().map(|a| a.name()).collect(),
            penalty: a.penalty,
            lambdas: &a.lambdas,
            threads,
            evaluation: &eval_cfg,
        },
        a.seeds.clone(),
    )?;
    manifest.add_input(&a.model.data, &inputs.data_bytes);
    manifest.add_input(&a.model.schema, &inputs.schema_bytes);
    let out = wd.resolve(&a.out);
    manifest.write_output(&out.join("sweep.csv"), "sweep.csv", &csv)?;
    manifest.finish(&out.join("manifest.json"), started)
}

#[derive(Serialize)]
struct HgrSnapshot<'a> {
    columns: &'a [String],
    estimator: &'a HgrEstimator,
}

fn hgr(wd: &Workdir, a: &HgrArgs, started: Option<Instant>) -> CliResult<()> {
    let [u_name, v_name] = a.cols.as_slice() else {
        return Err(CliError::Usage("--cols takes exactly two column names, `u,v`".into()));
    };
    let data_path = wd.resolve(&a.data);
    let bytes = read_bytes(&data_path)?;
    let table = RawTable::read(&data_path)?;
    let u = table.numeric_column(u_name)?;
    let v = table.numeric_column(v_name)?;
    let estimator = match a.estimator {
        EstimatorArg::Nn => HgrEstimator::Neural(HgrNnConfig {
            seed: a.seed,
            ..HgrNnConfig::default()
        }),
        EstimatorArg::Witsenhausen => HgrEstimator::Witsenhausen { bins: a.bins },
        EstimatorArg::Rdc => HgrEstimator::Rdc(RdcConfig {
            seed: a.seed,
            ..RdcConfig::default()
        }),
    };
    let estimate = estimator.estimate(
        &fairprice_core::Matrix::column_vector(&u),
        &fairprice_core::Matrix::column_vector(&v),
    )?;
    let json = persist::to_json("hgr_estimate", &estimate)?;
    match &a.out {
        None => {
            println!("{json}");
            Ok(())
        }
        Some(path) => {
            let out = wd.resolve(path);
            let mut manifest = RunManifest::new(
                "hgr",
                HgrSnapshot {
                    columns: &a.cols,
                    estimator: &estimator,
                },
                vec![a.seed],
            )?;
            manifest.add_input(&a.data, &bytes);
            manifest.write_output(&out, &file_label(&out), json.as_bytes())?;
            manifest.finish(&sibling(&out, "manifest.json"), started)
        }
    }
}
