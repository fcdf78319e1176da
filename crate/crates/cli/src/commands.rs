use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::{DMatrix, DVector};
use pdeplus::benchmark::run_benchmark;
use pdeplus::initdir::InitMethod;
use pdeplus::io::{read_covariates_csv, read_long_csv, read_queries_csv, write_long_csv, write_predictions_csv};
use pdeplus::kriging::ProductSumCovariance;
use pdeplus::pdeplus::{pdeplus_fit, PdePlusConfig, PdePlusModel};
use pdeplus::simgen::{matched_cos, SimTruth};
use pdeplus::STDataset;
use serde::Serialize;

use crate::config::ModelFlags;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub example: u8,
    /// Locations; 100 for example 1 and 150 for example 2 if absent.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `data.csv` and `truth.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Long-format observations `id,s1,s2,t,y`.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Per-location covariates `id,x1,…,xp`; built from the coordinates if absent.
    #[arg(long, value_name = "FILE")]
    pub covariates: Option<PathBuf>,
    /// Truth JSON written by `simulate`, for direction-recovery diagnostics.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON written by `fit`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Queries `id,s1,s2,t`.
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Covariates `id,x1,…,xp` of the query ids, for models fitted with `--covariates`.
    #[arg(long, value_name = "FILE")]
    pub covariates: Option<PathBuf>,
    /// Directory receiving `predictions.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub test_fraction: Option<f64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory receiving `benchmark.csv`, `benchmark.txt` and `report.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::file(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::file(path, e))
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

/// Runs `write` on a fresh file, attributing any failure to the path.
fn write_with(path: &Path, write: impl FnOnce(BufWriter<File>) -> pdeplus::Result<()>) -> Result<(), CliError> {
    write(create(path)?).map_err(|e| CliError::load(path, e))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let example = pdeplus::simgen::Example::from_tag(args.example).map_err(|e| CliError::Config(e.to_string()))?;
    let n = args.n.unwrap_or(match example {
        pdeplus::simgen::Example::Trigonometric => 100,
        pdeplus::simgen::Example::ProductSum => 150,
    });
    let (data, truth) = example.generate(n, args.seed)?;
    out_dir(&args.out)?;
    write_with(&args.out.join("data.csv"), |w| write_long_csv(&data, w))?;
    let text = serde_json::to_string_pretty(&truth).map_err(pdeplus::Error::from)?;
    write_text(&args.out.join("truth.json"), &text)?;
    log::info!("wrote {} rows to {}", data.n() * data.t_len(), args.out.display());
    Ok(())
}

fn load_data(path: &Path, covariates: Option<&Path>) -> Result<STDataset, CliError> {
    let data = read_long_csv(open(path)?).map_err(|e| CliError::load(path, e))?;
    match covariates {
        None => Ok(data),
        Some(cpath) => {
            let x = read_covariates_csv(open(cpath)?, data.ids()).map_err(|e| CliError::load(cpath, e))?;
            Ok(data.with_covariates(x).map_err(|e| CliError::load(cpath, e))?)
        }
    }
}

#[derive(Serialize)]
struct PassReport<'a> {
    kappa: usize,
    iterations: usize,
    converged: bool,
    rss_trace: &'a [f64],
    init_method: InitMethod,
    init_eigenvalues: &'a [f64],
    eigenvalue_profiles: &'a [(InitMethod, Vec<f64>)],
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    n: usize,
    t_len: usize,
    p: usize,
    kappa: usize,
    config: &'a PdePlusConfig,
    passes: Vec<PassReport<'a>>,
    covariance: &'a ProductSumCovariance,
    /// Estimated directions on the raw covariate scale, one vector per component.
    directions: Vec<Vec<f64>>,
    /// Basis functions `ŵ_j(t)`, one series per component.
    basis: Vec<Vec<f64>>,
    /// `|cos|` between estimated and true directions, when a truth file is given.
    cos_vs_truth: Option<Vec<f64>>,
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let config = args.model.model()?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = load_data(&args.data, args.covariates.as_deref())?;
    let truth: Option<SimTruth> = match &args.truth {
        Some(path) => Some(
            serde_json::from_reader(open(path)?).map_err(|e| CliError::load(path, pdeplus::Error::from(e)))?,
        ),
        None => None,
    };
    log::info!("fitting {} locations x {} times", data.n(), data.t_len());
    let model = pdeplus_fit(&data, &config)?;
    out_dir(&args.out)?;
    write_text(&args.out.join("model.json"), &model.to_json()?)?;

    let raw = model.raw_thetas();
    let cos_vs_truth = match (&truth, &raw) {
        (Some(truth), Some(raw)) => Some(matched_cos(raw, &truth.thetas)?),
        _ => None,
    };
    let diag = model.diagnostics();
    let report = Diagnostics {
        n: data.n(),
        t_len: data.t_len(),
        p: data.p(),
        kappa: model.kappa(),
        config: model.config(),
        passes: diag
            .passes
            .iter()
            .map(|p| PassReport {
                kappa: p.kappa,
                iterations: p.iterations,
                converged: p.converged,
                rss_trace: &p.rss_trace,
                init_method: p.init_method,
                init_eigenvalues: &p.init_eigenvalues,
                eigenvalue_profiles: &p.init_profiles,
            })
            .collect(),
        covariance: model.covariance(),
        directions: raw.as_ref().map(columns).unwrap_or_default(),
        basis: model.mean().map(|m| columns(&m.w_hats)).unwrap_or_default(),
        cos_vs_truth,
    };
    let text = serde_json::to_string_pretty(&report).map_err(pdeplus::Error::from)?;
    write_text(&args.out.join("diagnostics.json"), &text)?;
    write_plot_data(&model, &args.out)
}

/// `basis_j.csv` with `(t, ŵ_j(t))` and `index_j.csv` with
/// `(θ̂_jᵀx(s_i), f̃_j(s_i))` for every component `j`.
fn write_plot_data(model: &PdePlusModel, dir: &Path) -> Result<(), CliError> {
    let Some(mean) = model.mean() else {
        return Ok(());
    };
    for j in 0..mean.w_hats.ncols() {
        let mut basis = String::from("t,w\n");
        for (t, w) in model.times().iter().zip(mean.w_hats.column(j).iter()) {
            basis.push_str(&format!("{t},{w}\n"));
        }
        write_text(&dir.join(format!("basis_{}.csv", j + 1)), &basis)?;
        let mut index = String::from("id,index,f\n");
        for (i, id) in model.learn_ids().iter().enumerate() {
            index.push_str(&format!(
                "{id},{},{}\n",
                mean.scaled.index_values[(i, j)],
                mean.scaled.f_tilde[(i, j)]
            ));
        }
        write_text(&dir.join(format!("index_{}.csv", j + 1)), &index)?;
    }
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.model).map_err(|e| CliError::file(&args.model, e))?;
    let model = PdePlusModel::from_json(&text).map_err(|e| CliError::load(&args.model, e))?;
    let queries = read_queries_csv(open(&args.queries)?).map_err(|e| CliError::load(&args.queries, e))?;
    let d = model.learn_locations().ncols();
    if let Some(q) = queries.iter().find(|q| q.location.len() != d) {
        return Err(CliError::load(
            &args.queries,
            pdeplus::Error::InvalidInput(format!("query {} has {} coordinates, model has {d}", q.id, q.location.len())),
        ));
    }
    let covariates = match &args.covariates {
        Some(path) => {
            let mut ids: Vec<String> = Vec::new();
            for q in &queries {
                if !ids.contains(&q.id) {
                    ids.push(q.id.clone());
                }
            }
            let x = read_covariates_csv(open(path)?, &ids).map_err(|e| CliError::load(path, e))?;
            Some((ids, x))
        }
        None => None,
    };
    let mut z = Vec::with_capacity(queries.len());
    for q in &queries {
        let loc = DMatrix::from_row_slice(1, d, &q.location);
        let cov = covariates.as_ref().map(|(ids, x)| {
            let row = ids.iter().position(|id| *id == q.id).expect("every query id was looked up");
            x.rows(row, 1).into_owned()
        });
        let t = DVector::from_element(1, q.t);
        z.push(model.predict_grid(&loc, cov.as_ref(), &t)?[(0, 0)]);
    }
    out_dir(&args.out)?;
    write_with(&args.out.join("predictions.csv"), |w| write_predictions_csv(&queries, &z, w))
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let (mut config, _) = args.model.resolve()?;
    config.n = args.n.unwrap_or(config.n);
    config.seed = args.seed.unwrap_or(config.seed);
    config.replicates = args.replicates.unwrap_or(config.replicates);
    config.test_fraction = args.test_fraction.unwrap_or(config.test_fraction);
    config.workers = args.workers.unwrap_or(config.workers);
    config.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if config.replicates == 0 {
        return Err(CliError::Config("need at least one replicate".into()));
    }
    let report = run_benchmark(&config)?;
    for f in &report.failures {
        log::warn!("replicate {} (seed {}) failed: {}", f.index, f.seed, f.error);
    }
    out_dir(&args.out)?;
    write_with(&args.out.join("benchmark.csv"), |w| report.write_csv(w))?;
    let table = report.to_table();
    write_text(&args.out.join("benchmark.txt"), &table)?;
    let json = serde_json::to_string_pretty(&report).map_err(pdeplus::Error::from)?;
    write_text(&args.out.join("report.json"), &json)?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| CliError::file(Path::new("<stdout>"), e))
}
