//! Replicate harness for the simulated examples: generate, split, fit the
//! predictor and the baselines, score on held-out locations.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{naive_grid, OrdinaryKrigingModel};
use crate::data::split_learn_test;
use crate::error::{Error, Result};
use crate::pde::PdeConfig;
use crate::pdeplus::{pdeplus_fit, PdePlusConfig};
use crate::simgen::{matched_cos, median, rimse_rpmse, Example, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PDE+")]
    PdePlus,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "kriging")]
    Kriging,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PdePlus, Method::Naive, Method::Kriging];

    pub fn label(self) -> &'static str {
        match self {
            Method::PdePlus => "PDE+",
            Method::Naive => "naive",
            Method::Kriging => "kriging",
        }
    }
}

/// Reference `(RIMSE mean, RIMSE sd, RPMSE mean, RPMSE sd)` for the
/// implemented methods, shown next to our numbers for context only.
pub fn reference_values(example: Example, method: Method) -> Option<(f64, f64, f64, f64)> {
    match (example, method) {
        (Example::Trigonometric, Method::PdePlus) => Some((4.517, 1.119, 1.188, 0.460)),
        (Example::Trigonometric, Method::Naive) => Some((37.103, 3.412, 8.902, 0.641)),
        (Example::Trigonometric, Method::Kriging) => Some((5.912, 1.197, 1.618, 0.433)),
        (Example::ProductSum, Method::PdePlus) => Some((5.759, 1.313, 1.654, 0.545)),
        (Example::ProductSum, Method::Naive) => Some((65.722, 8.934, 17.656, 2.602)),
        (Example::ProductSum, Method::Kriging) => Some((7.375, 2.171, 2.612, 0.988)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub example: Example,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub model: PdePlusConfig,
    /// Fail the run when more than this fraction of replicates fail.
    pub max_failure_fraction: f64,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub workers: usize,
}

impl BenchmarkConfig {
    /// Sizes and bandwidths used for the two simulated examples.
    pub fn for_example(example: Example, replicates: usize, seed: u64) -> Self {
        let (n, h_y) = match example {
            Example::Trigonometric => (100, 3.0),
            Example::ProductSum => (150, 10.0),
        };
        let mut pde = PdeConfig::new(h_y, 0.5);
        pde.kappa_override = Some(2);
        Self {
            example,
            n,
            replicates,
            seed,
            test_fraction: 0.2,
            model: PdePlusConfig::new(pde),
            max_failure_fraction: 0.1,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub rimse: f64,
    pub rpmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub pdeplus: Score,
    pub naive: Score,
    pub kriging: Score,
    /// `|cos|` of each true direction against its matched estimate.
    pub cos_abs: Vec<f64>,
    pub seconds: f64,
}

impl ReplicateResult {
    pub fn score(&self, method: Method) -> Score {
        match method {
            Method::PdePlus => self.pdeplus,
            Method::Naive => self.naive,
            Method::Kriging => self.kriging,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rimse: Summary,
    pub rpmse: Summary,
    pub reference: Option<(f64, f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub replicates: Vec<ReplicateResult>,
    pub failures: Vec<ReplicateFailure>,
    pub summaries: Vec<MethodSummary>,
    /// Median `|cos|` per true direction over successful replicates.
    pub median_cos: Vec<f64>,
    pub seconds: f64,
}

/// One replicate with seed `seed`: data and split both derive from it.
pub fn run_replicate(config: &BenchmarkConfig, index: usize, seed: u64) -> Result<ReplicateResult> {
    let start = Instant::now();
    let (data, truth) = config.example.generate(config.n, seed)?;
    let split = split_learn_test(data.n(), config.test_fraction, seed)?;
    let learn = data.subset(&split.learn)?;
    let test = data.subset(&split.test)?;

    let model = pdeplus_fit(&learn, &config.model)?;
    let z = model.predict_grid(test.locations(), None, test.times())?;
    let (rimse, rpmse) = rimse_rpmse(test.y(), &z)?;

    let naive = naive_grid(&learn, test.n());
    let (n_rimse, n_rpmse) = rimse_rpmse(test.y(), &naive)?;

    let ok = OrdinaryKrigingModel::fit(&learn, config.model.variogram, &config.model.variogram_fit)?;
    let ok_pred = ok.predict_grid(test.locations(), test.times())?;
    let (k_rimse, k_rpmse) = rimse_rpmse(test.y(), &ok_pred)?;

    let cos_abs = match model.raw_thetas() {
        Some(t) => matched_cos(&t, &truth.thetas)?,
        None => vec![0.0; truth.thetas.ncols()],
    };
    Ok(ReplicateResult {
        index,
        seed,
        pdeplus: Score { rimse, rpmse },
        naive: Score {
            rimse: n_rimse,
            rpmse: n_rpmse,
        },
        kriging: Score {
            rimse: k_rimse,
            rpmse: k_rpmse,
        },
        cos_abs,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs all replicates on a worker pool (seed of replicate `r` is
/// `seed + r`); results are collected in replicate order, so the report does
/// not depend on scheduling. Failing replicates are recorded and excluded;
/// too many failures abort.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if config.replicates == 0 {
        return Err(Error::invalid("need at least one replicate"));
    }
    config.model.validate()?;
    let start = Instant::now();
    let workers = match config.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(config.replicates);
    let next = AtomicUsize::new(0);
    let mut outcomes: Vec<(usize, u64, Result<ReplicateResult>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let r = next.fetch_add(1, Ordering::Relaxed);
                        if r >= config.replicates {
                            return done;
                        }
                        let seed = config.seed.wrapping_add(r as u64);
                        done.push((r, seed, run_replicate(config, r, seed)));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    });
    outcomes.sort_by_key(|(r, _, _)| *r);
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, seed, outcome) in outcomes {
        match outcome {
            Ok(res) => {
                log::info!(
                    "replicate {r}: PDE+ {:.3}, naive {:.3}, kriging {:.3}",
                    res.pdeplus.rimse,
                    res.naive.rimse,
                    res.kriging.rimse
                );
                replicates.push(res);
            }
            Err(e) => {
                log::warn!("replicate {r} (seed {seed}) failed: {e}");
                failures.push(ReplicateFailure {
                    index: r,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let failed = failures.len() as f64 / config.replicates as f64;
    if failed > config.max_failure_fraction || replicates.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} replicates failed (limit {:.0}%); first: {}",
            failures.len(),
            config.replicates,
            config.max_failure_fraction * 100.0,
            failures.first().map_or("", |f| f.error.as_str())
        )));
    }
    let summaries = Method::ALL
        .iter()
        .map(|&method| {
            let rimse: Vec<f64> = replicates.iter().map(|r| r.score(method).rimse).collect();
            let rpmse: Vec<f64> = replicates.iter().map(|r| r.score(method).rpmse).collect();
            MethodSummary {
                method,
                rimse: Summary::of(&rimse).expect("non-empty"),
                rpmse: Summary::of(&rpmse).expect("non-empty"),
                reference: reference_values(config.example, method),
            }
        })
        .collect();
    let dirs = replicates[0].cos_abs.len();
    let median_cos = (0..dirs)
        .map(|j| median(&replicates.iter().map(|r| r.cos_abs[j]).collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    Ok(BenchmarkReport {
        config: config.clone(),
        replicates,
        failures,
        summaries,
        median_cos,
        seconds: start.elapsed().as_secs_f64(),
    })
}

impl BenchmarkReport {
    pub fn summary(&self, method: Method) -> &MethodSummary {
        self.summaries.iter().find(|s| s.method == method).expect("all methods summarized")
    }

    /// Table with one row per method: mean and sd of both metrics, plus
    /// the reference values.
    pub fn to_table(&self) -> String {
        let fmt_sd = |s: Option<f64>| s.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
        let mut out = format!(
            "Example {} | n = {} | {} replicates ({} failed) | {:.1} s\n",
            self.config.example.tag(),
            self.config.n,
            self.replicates.len(),
            self.failures.len(),
            self.seconds
        );
        out.push_str(&format!(
            "{:<8} {:>10} {:>8} {:>10} {:>8}   {:>22}\n",
            "method", "RIMSE", "sd", "RPMSE", "sd", "reference RIMSE/RPMSE"
        ));
        for s in &self.summaries {
            let reference = s
                .reference
                .map_or_else(|| "-".to_string(), |(a, _, c, _)| format!("{a:.3} / {c:.3}"));
            out.push_str(&format!(
                "{:<8} {:>10.3} {:>8} {:>10.3} {:>8}   {:>22}\n",
                s.method.label(),
                s.rimse.mean,
                fmt_sd(s.rimse.sd),
                s.rpmse.mean,
                fmt_sd(s.rpmse.sd),
                reference
            ));
        }
        let cos: Vec<String> = self.median_cos.iter().map(|c| format!("{c:.4}")).collect();
        out.push_str(&format!("median |cos|: {}\n", cos.join(", ")));
        out
    }

    /// CSV with one row per method.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["method", "rimse_mean", "rimse_sd", "rpmse_mean", "rpmse_sd", "replicates"])?;
        let sd = |s: Option<f64>| s.map_or_else(String::new, |v| v.to_string());
        for s in &self.summaries {
            wtr.write_record([
                s.method.label().to_string(),
                s.rimse.mean.to_string(),
                sd(s.rimse.sd),
                s.rpmse.mean.to_string(),
                sd(s.rpmse.sd),
                s.rimse.count.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(replicates: usize, workers: usize) -> BenchmarkConfig {
        let mut config = BenchmarkConfig::for_example(Example::Trigonometric, replicates, 3);
        config.n = 40;
        config.workers = workers;
        config
    }

    fn strip_timing(mut report: BenchmarkReport) -> BenchmarkReport {
        report.seconds = 0.0;
        report.config.workers = 0;
        for r in &mut report.replicates {
            r.seconds = 0.0;
        }
        report
    }

    #[test]
    fn report_has_one_row_per_method() {
        let report = run_benchmark(&small(2, 1)).unwrap();
        assert_eq!(report.replicates.len(), 2);
        assert_eq!(report.summaries.len(), 3);
        assert_eq!(report.median_cos.len(), 2);
        let table = report.to_table();
        for m in Method::ALL {
            assert!(table.contains(m.label()));
        }
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn single_replicate_has_no_spread() {
        let report = run_benchmark(&small(1, 1)).unwrap();
        assert!(report.summaries.iter().all(|s| s.rimse.sd.is_none()));
        assert!(report.to_table().contains("NA"));
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let a = strip_timing(run_benchmark(&small(3, 1)).unwrap());
        let b = strip_timing(run_benchmark(&small(3, 3)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_replicates_is_an_error() {
        assert!(run_benchmark(&small(0, 1)).is_err());
    }

    #[test]
    fn reference_values_are_annotated() {
        assert_eq!(reference_values(Example::Trigonometric, Method::PdePlus), Some((4.517, 1.119, 1.188, 0.460)));
        assert_eq!(reference_values(Example::ProductSum, Method::Kriging).map(|r| r.0), Some(7.375));
    }
}
