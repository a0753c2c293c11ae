use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sparsekp::codec::DecodeParams;
use sparsekp::eval::{GroundTruth, MetricsReport};
use sparsekp::loss::{gradcheck_with, make_ablation_config, LossConfig, ABLATION_ROWS};
use sparsekp::synth::{build_dataset, DatasetManifest, Sample, Split};
use sparsekp::trainer::{predict, train_on, TrainConfig, TrainLog};
use sparsekp::{LossVariant, ModelState, Scalar};

use crate::config::{Precision, RunConfig};
use crate::plot::bar_chart_svg;
use crate::results::{self, ResultRow};
use crate::CliError;

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const BENCHMARK_STEM: &str = "benchmark";
pub const ABLATION_STEM: &str = "ablation";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    DatasetManifest::load(path).map_err(|e| CliError::Validation(format!("dataset not usable: {e}")))
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<DatasetManifest, CliError> {
    cfg.validate()?;
    let dir = out.unwrap_or(&cfg.dataset);
    Ok(build_dataset(&cfg.scene, &cfg.split, cfg.master_seed, dir)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub kind: &'static str,
    pub name: String,
    pub max_rel_error: f64,
}

/// Max relative error for every loss variant and every ablation row.
/// `corrupt` scales each analytic gradient, to exercise the failure path.
pub fn gradcheck(trials: usize, seed: u64, corrupt: Option<f64>) -> Vec<GradcheckRow> {
    let factor = corrupt.unwrap_or(1.0);
    let check = |cfg: &LossConfig| gradcheck_with(cfg, trials, seed, |g| g * factor);
    let variants = LossVariant::ALL.iter().map(|&v| GradcheckRow {
        kind: "variant",
        name: v.name().to_string(),
        max_rel_error: check(&LossConfig::for_variant(v)),
    });
    let rows = ABLATION_ROWS.iter().map(|&row| GradcheckRow {
        kind: "ablation",
        name: row.to_string(),
        max_rel_error: check(&make_ablation_config(row).expect("known ablation row")),
    });
    variants.chain(rows).collect()
}

pub fn gradcheck_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<9} {:<22} {:>12}\n", "kind", "name", "max_rel_err");
    for r in rows {
        let flag = if r.max_rel_error < GRADCHECK_TOL { "" } else { "  FAIL" };
        out.push_str(&format!("{:<9} {:<22} {:>12.3e}{flag}\n", r.kind, r.name, r.max_rel_error));
    }
    out
}

pub fn cmd_gradcheck(out: Option<&Path>, trials: usize, seed: u64, corrupt: Option<f64>) -> Result<String, CliError> {
    if trials == 0 {
        return Err(CliError::Validation("trials must be >= 1".into()));
    }
    let rows = gradcheck(trials, seed, corrupt);
    let table = gradcheck_table(&rows);
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        for r in &rows {
            w.serialize(r).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    let bad: Vec<_> = rows.iter().filter(|r| !(r.max_rel_error < GRADCHECK_TOL)).map(|r| r.name.as_str()).collect();
    if bad.is_empty() {
        Ok(table)
    } else {
        Err(CliError::Runtime(format!(
            "{table}gradient check above {GRADCHECK_TOL:e} for: {}",
            bad.join(", ")
        )))
    }
}

/// Predicts, decodes and scores every sample.
pub fn evaluate_samples<T: Scalar>(
    state: &ModelState<T>,
    samples: &[Sample],
    decode: &DecodeParams,
) -> sparsekp::Result<MetricsReport> {
    let preds = predict(state, samples, decode)?;
    let masks: Vec<_> = samples.iter().map(Sample::masks).collect();
    let truth: Vec<_> = samples
        .iter()
        .zip(&masks)
        .map(|(s, m)| GroundTruth {
            instances: m,
            station_map: &s.station_map,
            presence: s.station_presence,
        })
        .collect();
    MetricsReport::compute(&preds, &truth)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write_file(&dir.join("metrics.csv"), report.to_csv())?;
    write_file(&dir.join("metrics.json"), report.to_json())
}

pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainLog, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let dir = out.unwrap_or(&cfg.out);
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    let log = match cfg.precision {
        Precision::F64 => train_on::<f64>(&train, &val, &cfg.model, &cfg.train, &cfg.codec, Some(dir))?.1,
        Precision::F32 => train_on::<f32>(&train, &val, &cfg.model, &cfg.train, &cfg.codec, Some(dir))?.1,
    };
    Ok(log)
}

/// Scores a checkpoint on one split, decoding with the threshold of `variant`
/// (the configured loss when `None`).
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    variant: Option<LossVariant>,
    out: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let decode = cfg.decode.params_for(variant.unwrap_or(cfg.train.loss.variant));
    let state = ModelState::<f64>::load_checkpoint(checkpoint)
        .map_err(|e| CliError::Validation(format!("checkpoint not usable: {e}")))?;
    let samples = manifest.load_split(split)?;
    let report = match cfg.precision {
        Precision::F64 => evaluate_samples(&state, &samples, &decode)?,
        Precision::F32 => evaluate_samples(&state.cast::<f32>(), &samples, &decode)?,
    };
    let dir = out.unwrap_or(&cfg.out);
    create_dir(dir)?;
    write_report(dir, &report)?;
    Ok(report)
}

/// One cell of a benchmark or ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub loss: LossConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub row: ResultRow,
    pub log: Option<TrainLog>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

struct Data {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn run_typed<T: Scalar>(cfg: &RunConfig, data: &Data, spec: &RunSpec, dir: &Path) -> sparsekp::Result<(TrainLog, MetricsReport)> {
    let train_cfg = TrainConfig {
        loss: spec.loss,
        seed: spec.seed,
        ..cfg.train.clone()
    };
    let (state, log) = train_on::<T>(&data.train, &data.val, &cfg.model, &train_cfg, &cfg.codec, Some(dir))?;
    let report = evaluate_samples(&state, &data.test, &cfg.decode.params_for(spec.loss.variant))?;
    Ok((log, report))
}

fn run_one(cfg: &RunConfig, data: &Data, spec: &RunSpec, runs_dir: &Path) -> Result<RunOutcome, CliError> {
    let dir = runs_dir.join(format!("{}-seed{}", spec.label, spec.seed));
    create_dir(&dir)?;
    let started = Instant::now();
    let result = match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, data, spec, &dir),
        Precision::F32 => run_typed::<f32>(cfg, data, spec, &dir),
    };
    let elapsed = started.elapsed().as_secs_f64();
    match result {
        Ok((log, report)) => {
            write_report(&dir, &report)?;
            eprintln!(
                "{} seed {}: locF1 {:.4} ({} epochs, {elapsed:.0}s)",
                spec.label,
                spec.seed,
                report.localization.f1,
                log.records.len()
            );
            let loc = report.localization;
            let ml = &report.stations;
            Ok(RunOutcome {
                spec: spec.clone(),
                row: ResultRow {
                    loss: spec.label.clone(),
                    seed: spec.seed.to_string(),
                    loc_p: Some(loc.precision),
                    loc_r: Some(loc.recall),
                    loc_f1: Some(loc.f1),
                    ml_p: Some(ml.precision),
                    ml_r: Some(ml.recall),
                    ml_f1: Some(ml.f1),
                },
                log: Some(log),
                report: Some(report),
                error: None,
                seconds: elapsed,
            })
        }
        Err(e @ sparsekp::Error::Diverged { .. }) => {
            let message = e.to_string();
            eprintln!("{} seed {}: failed: {message}", spec.label, spec.seed);
            write_file(&dir.join("failed.txt"), format!("{message}\n"))?;
            Ok(RunOutcome {
                spec: spec.clone(),
                row: ResultRow::failed(&spec.label, spec.seed),
                log: None,
                report: None,
                error: Some(message),
                seconds: elapsed,
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Validation("threads must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Trains and scores every run, then writes `{stem}.csv`, `{stem}.json` and
/// `{stem}.svg` into `out`. Rows keep the order of `specs`, medians follow.
pub fn run_matrix(
    cfg: &RunConfig,
    specs: &[RunSpec],
    out: &Path,
    stem: &str,
    title: &str,
    threads: Option<usize>,
) -> Result<Vec<RunOutcome>, CliError> {
    cfg.validate()?;
    for s in specs {
        s.loss.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let pool = thread_pool(threads)?;
    let manifest = load_manifest(&cfg.dataset)?;
    let data = Data {
        train: manifest.load_split(Split::Train)?,
        val: manifest.load_split(Split::Val)?,
        test: manifest.load_split(Split::Test)?,
    };
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;

    let outcomes = pool.install(|| {
        specs
            .par_iter()
            .map(|s| run_one(cfg, &data, s, &runs_dir))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let medians = results::median_rows(&rows);
    rows.extend(medians.iter().cloned());
    results::write_csv(&out.join(format!("{stem}.csv")), &rows)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&out.join(format!("{stem}.json")), json + "\n")?;
    write_file(&out.join(format!("{stem}.svg")), bar_chart_svg(title, &medians))?;
    Ok(outcomes)
}

pub fn benchmark_specs(cfg: &RunConfig, losses: &[LossVariant], seeds: &[u64]) -> Vec<RunSpec> {
    losses
        .iter()
        .flat_map(|&v| {
            seeds.iter().map(move |&seed| RunSpec {
                label: v.name().to_string(),
                loss: LossConfig { variant: v, ..cfg.train.loss },
                seed,
            })
        })
        .collect()
}

/// Ablation rows keep the configured reduction and reinforcement scope.
pub fn ablation_specs(cfg: &RunConfig, rows: &[String], seeds: &[u64]) -> Result<Vec<RunSpec>, CliError> {
    let mut out = Vec::new();
    for row in rows {
        let loss = make_ablation_config(row).map_err(|_| {
            CliError::Validation(format!("unknown ablation row {row:?}; valid rows: {}", ABLATION_ROWS.join(", ")))
        })?;
        let loss = LossConfig {
            reduction: cfg.train.loss.reduction,
            reinforce_scope: cfg.train.loss.reinforce_scope,
            ..loss
        };
        out.extend(seeds.iter().map(|&seed| RunSpec {
            label: row.clone(),
            loss,
            seed,
        }));
    }
    Ok(out)
}

pub fn cmd_benchmark(
    cfg: &RunConfig,
    losses: &[LossVariant],
    seeds: &[u64],
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<RunOutcome>, CliError> {
    if losses.is_empty() || seeds.is_empty() {
        return Err(CliError::Validation("need at least one loss and one seed".into()));
    }
    let specs = benchmark_specs(cfg, losses, seeds);
    run_matrix(cfg, &specs, out, BENCHMARK_STEM, "Median over seeds per loss", threads)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    rows: &[String],
    seeds: &[u64],
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<RunOutcome>, CliError> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(CliError::Validation("need at least one row and one seed".into()));
    }
    let specs = ablation_specs(cfg, rows, seeds)?;
    run_matrix(cfg, &specs, out, ABLATION_STEM, "Median over seeds per ablation row", threads)
}

/// Re-renders plots and tables from result CSVs already in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let mut text = String::new();
    let mut found: Vec<PathBuf> = Vec::new();
    for (stem, title) in [
        (BENCHMARK_STEM, "Median over seeds per loss"),
        (ABLATION_STEM, "Median over seeds per ablation row"),
    ] {
        let csv = dir.join(format!("{stem}.csv"));
        if !csv.exists() {
            continue;
        }
        let rows = results::read_csv(&csv)?;
        let mut medians: Vec<_> = rows.iter().filter(|r| r.is_median()).cloned().collect();
        if medians.is_empty() {
            medians = results::median_rows(&rows);
        }
        found.push(csv);
        write_file(&dir.join(format!("{stem}.svg")), bar_chart_svg(title, &medians))?;
        text.push_str(&format!("{stem}\n{}\n", results::render_table(&rows)));
    }
    if found.is_empty() {
        return Err(CliError::Validation(format!(
            "no {BENCHMARK_STEM}.csv or {ABLATION_STEM}.csv in {}",
            dir.display()
        )));
    }
    Ok(text)
}
