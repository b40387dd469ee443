//! The command-line pipeline: `simulate -> infer -> predict -> evaluate`,
//! plus `report` and `export-prefs`. Stages communicate only through files.
//!
//! Configuration is a flat TOML file whose keys are the field names of
//! [`ScenarioConfig`], [`ModelConfig`], [`SamplerConfig`] and
//! [`PipelineConfig`]. A `.json` manifest written by an earlier run is
//! accepted in its place. Stages that read a posterior or predictive file
//! start from the configuration recorded in that file; the `--config` file
//! and then command-line flags override it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::evaluation::{
    calibration_deviation, default_p_grid, mae_matrix, reliability_curve, truncation_count, weight_draws,
};
use crate::inference::{effective_sample_size, fit, split_r_hat, Method, PosteriorSamples, SamplerConfig};
use crate::io::{
    fingerprint_bytes, load_dataset, load_posterior, load_predictive, manifest_path, save_dataset, save_json,
    save_manifest, save_posterior, save_predictive, write_atomic, Dataset, Manifest,
};
use crate::model::{Likelihood, ModelConfig, Variant};
use crate::prediction::{nominal_error, predict_dataset, select_shrinkage_for, shrink_samples, PredictiveRun};
use crate::simulator::{run_simulation, ScenarioConfig};

/// Settings of the pipeline stages themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Leading fraction of the records used for training; the remaining
    /// records form the test split. With 1 every record is predicted.
    pub train_fraction: f64,
    /// Trailing fraction of the training split held out from fitting and
    /// used to select the shrinkage factor; 0 disables shrinkage.
    pub validation_fraction: f64,
    pub shrink_grid: Vec<f64>,
    /// Nominal coverages in percent.
    pub p_grid: Vec<f64>,
    /// Truncation threshold for the significant-cluster count.
    pub delta: f64,
    /// Predictive draws per scenario; 0 means one per posterior draw.
    pub predictive_draws: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            validation_fraction: 0.0,
            shrink_grid: vec![1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
            p_grid: default_p_grid(),
            delta: 1e-6,
            predictive_draws: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail("train_fraction must lie in (0, 1]");
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction must lie in [0, 1)");
        }
        if self.shrink_grid.is_empty() || self.shrink_grid.iter().any(|s| !(*s >= 1.0 && s.is_finite())) {
            return fail("shrink_grid must be non-empty with every entry >= 1");
        }
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(*p > 0.0 && *p < 100.0)) {
            return fail("p_grid entries must lie in (0, 100)");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta must lie in (0, 1)");
        }
        Ok(())
    }

    /// Record ranges `(fit, validation, test)` of a dataset with `d` records.
    pub fn splits(&self, d: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let n_train = ((self.train_fraction * d as f64).ceil() as usize).min(d);
        let n_val = if self.validation_fraction > 0.0 {
            ((self.validation_fraction * n_train as f64).ceil() as usize).min(n_train.saturating_sub(1))
        } else {
            0
        };
        let test = if n_train < d { n_train..d } else { 0..d };
        (0..n_train - n_val, n_train - n_val..n_train, test)
    }
}

/// Every configurable setting of a pipeline run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub pipeline: PipelineConfig,
}

fn object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => unreachable!("configuration structs serialise to objects"),
    }
}

fn section<T: serde::de::DeserializeOwned>(map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    fn sections(&self) -> [Map<String, Value>; 4] {
        [
            object(serde_json::to_value(&self.scenario).expect("config serialises")),
            object(serde_json::to_value(&self.model).expect("config serialises")),
            object(serde_json::to_value(&self.sampler).expect("config serialises")),
            object(serde_json::to_value(&self.pipeline).expect("config serialises")),
        ]
    }

    /// The flat key/value form written into manifests.
    pub fn to_value(&self) -> Value {
        let mut flat = Map::new();
        for part in self.sections() {
            flat.extend(part);
        }
        Value::Object(flat)
    }

    /// Overrides the settings named in `flat`, leaving the rest untouched.
    pub fn merge(&self, flat: &Value) -> Result<Self> {
        let entries = flat
            .as_object()
            .ok_or_else(|| Error::Config("configuration must be a table of keys".into()))?;
        let mut parts = self.sections();
        for (key, value) in entries {
            let owner = parts
                .iter_mut()
                .find(|p| p.contains_key(key))
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
            owner.insert(key.clone(), value.clone());
        }
        let [scenario, model, sampler, pipeline] = parts;
        Ok(Self {
            scenario: section(scenario)?,
            model: section(model)?,
            sampler: section(sampler)?,
            pipeline: section(pipeline)?,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::default().merge(&serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Reads flat settings from a TOML file or from the `config` of a JSON
    /// manifest.
    pub fn read_overrides(path: &Path) -> Result<Value> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            return Ok(match value.get("config") {
                Some(config) if value.get("command").is_some() => config.clone(),
                _ => value,
            });
        }
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "usertransfer",
    version,
    about = "Preference-cluster inference for user load transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate availability and load records into a dataset CSV.
    Simulate(SimulateArgs),
    /// Sample the posterior of a cluster model on the training split.
    Infer(InferArgs),
    /// Draw posterior predictive loads for the test split.
    Predict(PredictArgs),
    /// Score predictive draws against the observed loads.
    Evaluate(EvaluateArgs),
    /// Summarise convergence, weights and truncation of a posterior.
    Report(ReportArgs),
    /// Dump posterior preference rows for external embedding tools.
    ExportPrefs(ExportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML configuration, or a JSON manifest of an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Sets the scenario seed and the sampler base seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "N")]
    pub chains: Option<usize>,
    #[arg(long, value_name = "N")]
    pub draws: Option<usize>,
    #[arg(long, value_name = "N")]
    pub warmup: Option<usize>,
    #[arg(long, value_enum)]
    pub model: Option<Variant>,
    #[arg(long, value_enum)]
    pub likelihood: Option<Likelihood>,
    #[arg(long, value_name = "W")]
    pub clusters: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub posterior: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Predictive draws per scenario.
    #[arg(long, value_name = "N")]
    pub draws: Option<usize>,
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub shrink_grid: Option<Vec<f64>>,
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub predictive: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub posterior: PathBuf,
    #[arg(long, value_name = "REAL")]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub posterior: PathBuf,
}

/// Parses `args` (including the program name), runs the stage and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Infer(a) => infer(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::ExportPrefs(a) => export_prefs(a),
    }
}

/// Layers the recorded configuration of an input, the `--config` file and
/// the common flags.
fn resolve(common: &CommonArgs, recorded: Option<&Manifest>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(m) = recorded {
        cfg = cfg.merge(&m.config)?;
    }
    if let Some(path) = &common.config {
        cfg = cfg.merge(&RunConfig::read_overrides(path)?)?;
    }
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
        cfg.sampler.base_seed = seed;
    }
    Ok(cfg)
}

fn file_fingerprint(path: &Path) -> Result<String> {
    Ok(fingerprint_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Schema(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = resolve(&args.common, None)?;
    let data = run_simulation(&cfg.scenario)?;
    save_dataset(&args.common.out, &data)?;
    let mut manifest = Manifest::new("simulate", cfg.to_value());
    manifest.seeds.insert("seed".into(), cfg.scenario.seed);
    save_manifest(&manifest_path(&args.common.out), &manifest)?;
    log::info!("wrote {} records to {}", data.len(), args.common.out.display());
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let mut cfg = resolve(&args.common, None)?;
    if let Some(v) = args.chains {
        cfg.sampler.n_chains = v;
    }
    if let Some(v) = args.draws {
        cfg.sampler.n_draws = v;
    }
    if let Some(v) = args.warmup {
        cfg.sampler.n_warmup = v;
    }
    if let Some(v) = args.model {
        cfg.model.variant = v;
    }
    if let Some(v) = args.likelihood {
        cfg.model.likelihood = v;
    }
    if let Some(v) = args.clusters {
        cfg.model.clusters = v;
    }
    if let Some(v) = args.method {
        cfg.sampler.method = v;
    }
    cfg.pipeline.validate()?;
    if cfg.sampler.n_chains < 2 || cfg.sampler.n_draws < 100 {
        log::warn!("fewer than 2 chains or 100 draws: convergence diagnostics will be unreliable");
    }
    let data = load_dataset(&args.data)?;
    let (fit_range, _, _) = cfg.pipeline.splits(data.len());
    let train = data.subset(fit_range);
    let mut posterior = fit(&train, &cfg.model, &cfg.sampler)?;
    posterior.dataset_fingerprint = Some(data.fingerprint());
    for (name, value) in convergence(&posterior) {
        if let Some((r_hat, ess)) = value {
            log::info!("{name}: split R-hat {r_hat:.3}, ESS {ess:.0}");
        }
    }
    let mut manifest = Manifest::new("infer", cfg.to_value());
    manifest.inputs.insert("data".into(), data.fingerprint());
    manifest.seeds.insert("base_seed".into(), cfg.sampler.base_seed);
    save_posterior(&args.common.out, &posterior, Some(&manifest))
}

/// Split R-hat and ESS of `c`, `alpha` and the log density, where defined.
fn convergence(posterior: &PosteriorSamples) -> Vec<(&'static str, Option<(f64, f64)>)> {
    let diag = |chains: &[Vec<f64>]| Some((split_r_hat(chains).ok()?, effective_sample_size(chains).ok()?));
    let mut out = vec![("c", diag(&posterior.concentration_trace()))];
    if let Some(alpha) = posterior.alpha_trace() {
        out.push(("alpha", diag(&alpha)));
    }
    let lp: Vec<Vec<f64>> = posterior.chains.iter().map(|c| c.log_density.clone()).collect();
    if lp
        .iter()
        .zip(&posterior.chains)
        .all(|(l, c)| !l.is_empty() && l.len() == c.draws.len())
    {
        out.push(("lp", diag(&lp)));
    }
    out
}

fn predict(args: &PredictArgs) -> Result<()> {
    let (posterior, recorded) = load_posterior(&args.posterior)?;
    let mut cfg = resolve(&args.common, recorded.as_ref())?;
    if let Some(v) = args.draws {
        cfg.pipeline.predictive_draws = v;
    }
    if let Some(v) = &args.shrink_grid {
        cfg.pipeline.shrink_grid = v.clone();
    }
    if let Some(v) = &args.p_grid {
        cfg.pipeline.p_grid = v.clone();
    }
    cfg.pipeline.validate()?;
    let data = load_dataset(&args.data)?;
    if posterior.dataset_fingerprint.as_deref() != Some(data.fingerprint().as_str()) {
        log::warn!(
            "{} differs from the dataset the posterior was fitted to; the train/test split may not line up",
            args.data.display()
        );
    }
    let seed = cfg.sampler.base_seed;
    let q = (cfg.pipeline.predictive_draws > 0).then_some(cfg.pipeline.predictive_draws);
    let (_, val_range, test_range) = cfg.pipeline.splits(data.len());

    let mut shrinkage = None;
    if !val_range.is_empty() {
        let validation = data.subset(val_range.clone());
        let run = predict_dataset(&posterior, &validation, q, seed)?;
        let truths: Vec<Vec<f64>> = validation.records().iter().map(|r| r.x.clone()).collect();
        let selection = select_shrinkage_for(&run.scenarios, &truths, &cfg.pipeline.shrink_grid, &cfg.pipeline.p_grid)?;
        log::info!(
            "selected shrinkage s = {} on {} validation records",
            selection.s,
            validation.len()
        );
        shrinkage = Some(selection.s);
    }

    let offset = test_range.start;
    let test = data.subset(test_range);
    let mut run = predict_dataset(&posterior, &test, q, seed)?;
    for set in &mut run.scenarios {
        set.scenario += offset;
        if let Some(s) = shrinkage {
            *set = shrink_samples(set, s)?;
        }
    }
    run.shrinkage = shrinkage;

    let mut manifest = Manifest::new("predict", cfg.to_value());
    manifest
        .inputs
        .insert("posterior".into(), file_fingerprint(&args.posterior)?);
    manifest.inputs.insert("data".into(), data.fingerprint());
    manifest.seeds.insert("base_seed".into(), seed);
    save_predictive(&args.common.out, &run, Some(&manifest))?;
    write_atomic(
        &sibling(&args.common.out, ".summary.csv"),
        &prediction_summary(&run, &data)?,
    )
}

fn prediction_summary(run: &PredictiveRun, data: &Dataset) -> Result<Vec<u8>> {
    let header: Vec<String> = ["scenario", "provider", "available", "truth", "nominal", "sd", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for set in &run.scenarios {
        let truth = &data.records()[set.scenario].x;
        let nominal = set.nominal()?;
        let sd = set.sd()?;
        let err = nominal_error(&nominal, truth)?;
        for i in 0..nominal.len() {
            rows.push(vec![
                set.scenario.to_string(),
                (i + 1).to_string(),
                set.u[i].to_string(),
                truth[i].to_string(),
                nominal[i].to_string(),
                sd[i].to_string(),
                err[i].to_string(),
            ]);
        }
    }
    csv_bytes(&header, &rows)
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let (run, recorded) = load_predictive(&args.predictive)?;
    let mut cfg = resolve(&args.common, recorded.as_ref())?;
    if let Some(v) = &args.p_grid {
        cfg.pipeline.p_grid = v.clone();
    }
    cfg.pipeline.validate()?;
    let data = load_dataset(&args.data)?;
    let mut truths = Vec::with_capacity(run.scenarios.len());
    for set in &run.scenarios {
        let rec = data
            .records()
            .get(set.scenario)
            .ok_or_else(|| Error::Data(format!("scenario {} is not a record of the dataset", set.scenario)))?;
        if rec.u.as_slice() != set.u.as_slice() {
            return Err(Error::Data(format!(
                "scenario {} has different availability in the dataset",
                set.scenario
            )));
        }
        truths.push(rec.x.clone());
    }

    let curve = reliability_curve(&run.scenarios, &truths, &cfg.pipeline.p_grid)?;
    let mut errors = Vec::with_capacity(truths.len());
    let mut pooled = Vec::new();
    let mut sds = Vec::new();
    for (set, truth) in run.scenarios.iter().zip(&truths) {
        let err = nominal_error(&set.nominal()?, truth)?;
        let sd = set.sd()?;
        for i in set.u.support() {
            pooled.push(err[i]);
            sds.push(sd[i]);
        }
        errors.push(err);
    }
    let mae = mae_matrix(&errors)?;
    let n = pooled.len().max(1) as f64;
    sds.sort_by(f64::total_cmp);
    let median_sd = match sds.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => sds[k / 2],
        k => 0.5 * (sds[k / 2 - 1] + sds[k / 2]),
    };

    let mut manifest = Manifest::new("evaluate", cfg.to_value());
    manifest
        .inputs
        .insert("predictive".into(), file_fingerprint(&args.predictive)?);
    manifest.inputs.insert("data".into(), data.fingerprint());
    let report = json!({
        "manifest": manifest,
        "scenarios": run.scenarios.len(),
        "shrinkage": run.shrinkage,
        "nominal_error": {
            "mean": pooled.iter().sum::<f64>() / n,
            "mean_abs": pooled.iter().map(|e| e.abs()).sum::<f64>() / n,
            "within_5": pooled.iter().filter(|e| e.abs() <= 5.0).count() as f64 / n,
        },
        "median_sd": median_sd,
        "calibration_deviation": calibration_deviation(&curve),
        "max_deviation_10_90": curve.max_deviation(10.0, 90.0),
        "reliability_curve": curve,
        "mae": mae,
    });
    save_json(&args.common.out, &report)?;

    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| vec![p.nominal.to_string(), p.empirical.to_string(), p.count.to_string()])
        .collect();
    let header = ["nominal", "empirical", "count"].map(String::from);
    write_atomic(&sibling(&args.common.out, ".curve.csv"), &csv_bytes(&header, &rows)?)?;

    let providers = mae.provider_mae.len();
    let mut header = vec!["scenario".to_string()];
    header.extend((1..=providers).map(|i| format!("provider_{i}")));
    header.push("mean".into());
    let mut rows: Vec<Vec<String>> = run
        .scenarios
        .iter()
        .zip(&mae.abs_errors)
        .zip(&mae.scenario_mae)
        .map(|((set, row), mean)| {
            let mut r = vec![set.scenario.to_string()];
            r.extend(row.iter().map(|v| v.to_string()));
            r.push(mean.to_string());
            r
        })
        .collect();
    let mut r = vec!["mean".to_string()];
    r.extend(mae.provider_mae.iter().map(|v| v.to_string()));
    r.push(String::new());
    rows.push(r);
    write_atomic(&sibling(&args.common.out, ".mae.csv"), &csv_bytes(&header, &rows)?)
}

fn report(args: &ReportArgs) -> Result<()> {
    let (posterior, recorded) = load_posterior(&args.posterior)?;
    let mut cfg = resolve(&args.common, recorded.as_ref())?;
    if let Some(v) = args.delta {
        cfg.pipeline.delta = v;
    }
    cfg.pipeline.validate()?;
    let diagnostics: Vec<Value> = convergence(&posterior)
        .into_iter()
        .map(|(name, v)| {
            json!({
                "parameter": name,
                "r_hat": v.map(|d| d.0),
                "ess": v.map(|d| d.1),
            })
        })
        .collect();
    let chains: Vec<Value> = posterior
        .chains
        .iter()
        .map(|c| json!({ "draws": c.draws.len(), "acceptance": c.acceptance, "divergent": c.divergent }))
        .collect();
    let truncation = match posterior.model.variant {
        Variant::Complete if posterior.n_draws() > 0 => {
            Some(truncation_count(&weight_draws(&posterior), cfg.pipeline.delta)?)
        }
        _ => None,
    };
    let mut manifest = Manifest::new("report", cfg.to_value());
    manifest
        .inputs
        .insert("posterior".into(), file_fingerprint(&args.posterior)?);
    let out = json!({
        "manifest": manifest,
        "model": posterior.model,
        "sampler": posterior.sampler,
        "draws": posterior.n_draws(),
        "chains": chains,
        "diagnostics": diagnostics,
        "mean_weights": posterior.mean_weights(),
        "truncation": truncation,
    });
    save_json(&args.common.out, &out)
}

fn export_prefs(args: &ExportArgs) -> Result<()> {
    let (posterior, recorded) = load_posterior(&args.posterior)?;
    let cfg = resolve(&args.common, recorded.as_ref())?;
    let n = posterior.n_providers;
    let mut header: Vec<String> = ["chain", "draw", "cluster", "weight"].map(String::from).to_vec();
    header.extend((1..=n).map(|i| format!("l_{i}")));
    let mut rows = Vec::new();
    for (k, chain) in posterior.chains.iter().enumerate() {
        for (d, params) in chain.draws.iter().enumerate() {
            let w = params.mixture_weights();
            for (j, row) in params.preferences().to_rows().iter().enumerate() {
                let mut r = vec![k.to_string(), d.to_string(), (j + 1).to_string(), w[j].to_string()];
                r.extend(row.iter().map(|v| v.to_string()));
                rows.push(r);
            }
        }
    }
    write_atomic(&args.common.out, &csv_bytes(&header, &rows)?)?;
    let mut manifest = Manifest::new("export-prefs", cfg.to_value());
    manifest
        .inputs
        .insert("posterior".into(), file_fingerprint(&args.posterior)?);
    save_manifest(&manifest_path(&args.common.out), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configuration_keys_are_unique_across_sections() {
        let parts = RunConfig::default().sections();
        let total: usize = parts.iter().map(Map::len).sum();
        let mut keys: Vec<&String> = parts.iter().flat_map(|p| p.keys()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), total);
    }

    #[test]
    fn flat_toml_overrides_defaults() {
        let cfg = RunConfig::from_toml_str("n_users = 30\nvariant = \"naive\"\nn_chains = 2\ndelta = 0.001\n").unwrap();
        assert_eq!(cfg.scenario.n_users, 30);
        assert_eq!(cfg.model.variant, Variant::Naive);
        assert_eq!(cfg.sampler.n_chains, 2);
        assert_eq!(cfg.pipeline.delta, 0.001);
        assert_eq!(cfg.model.clusters, ModelConfig::default().clusters);
    }

    #[test]
    fn unknown_or_mistyped_keys_are_config_errors() {
        assert!(matches!(RunConfig::from_toml_str("n_user = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml_str("n_users = \"x\""),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flat_value_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.scenario.state_period = Some(50);
        cfg.sampler.base_seed = 99;
        assert_eq!(RunConfig::default().merge(&cfg.to_value()).unwrap(), cfg);
    }

    #[test]
    fn splits_partition_records() {
        let cfg = PipelineConfig {
            validation_fraction: 0.25,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.splits(10), (0..6, 6..8, 8..10));
        let all = PipelineConfig {
            train_fraction: 1.0,
            ..PipelineConfig::default()
        };
        assert_eq!(all.splits(4), (0..4, 4..4, 0..4));
    }
}
