//! Sweeps over (method, labeled ratio, seed), with a markdown summary table
//! and SVG curves.
//!
//! Output layout under `out`:
//! - `runs/<method>_r<num>-<den>_s<seed>/`: one run directory each
//! - `summary.csv`: `method,ratio,seed,final_miou,status`
//! - `table.md`: rows are methods, columns ratios, cells mean ± stdev of
//!   the final mIoU over seeds, in percent
//! - `miou_vs_ratio.svg`, `overlap_vs_epoch.svg`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{parse_kv, parse_list};
use crate::data::Ratio;
use crate::error::{config_err, Result};
use crate::methods::{run_config, EpochRecord, MethodKind, Seeds, TrainConfig};
use crate::plot::{line_plot, PlotSpec, Series};
use crate::rundir::write_run_dir;

pub const THREADS_ENV: &str = "CPSLAB_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub methods: Vec<MethodKind>,
    pub ratios: Vec<Ratio>,
    pub seeds: Vec<u64>,
    /// Shared settings; method, ratio and seeds are replaced per run.
    pub base: TrainConfig,
    pub out: PathBuf,
}

impl ExperimentSpec {
    /// Reads `methods`, `ratios`, `seeds` and `out`; every other key is
    /// passed to the base training config.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self {
            methods: vec![MethodKind::Supervised, MethodKind::Cps],
            ratios: vec![Ratio { num: 1, den: 8 }],
            seeds: vec![0],
            base: TrainConfig::default(),
            out: PathBuf::from("sweep_out"),
        };
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "methods" => spec.methods = parse_list(&k, &v)?,
                "ratios" => spec.ratios = parse_list(&k, &v)?,
                "seeds" => spec.seeds = parse_list(&k, &v)?,
                "out" => spec.out = PathBuf::from(v),
                _ => spec.base.set(&k, &v)?,
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(config_err!(
                "experiment needs at least one method, ratio and seed"
            ));
        }
        for cfg in self.configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Configs of every run, method-major then ratio then seed.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &ratio in &self.ratios {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.method = method;
                    cfg.data.ratio = ratio;
                    cfg.seeds = Seeds::for_run(self.base.seeds.data, seed);
                    out.push(cfg);
                }
            }
        }
        out
    }
}

pub fn run_name(cfg: &TrainConfig) -> String {
    format!(
        "{}_r{}-{}_s{}",
        cfg.method, cfg.data.ratio.num, cfg.data.ratio.den, cfg.seeds.partition
    )
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub method: MethodKind,
    pub ratio: Ratio,
    pub seed: u64,
    pub outcome: std::result::Result<Vec<EpochRecord>, String>,
}

impl RunSummary {
    pub fn final_miou(&self) -> Option<f64> {
        self.outcome
            .as_ref()
            .ok()
            .and_then(|r| r.last())
            .map(|r| r.miou)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// Final mIoU of every successful seed of one cell.
    pub fn cell(&self, method: MethodKind, ratio: Ratio) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.method == method && r.ratio == ratio)
            .filter_map(|r| r.final_miou())
            .collect()
    }
}

pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n.min(available.max(1)).max(1),
        _ => available,
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_one(cfg: &TrainConfig, out: &Path) -> std::result::Result<Vec<EpochRecord>, String> {
    let result = run_config(cfg).map_err(|e| e.to_string())?;
    write_run_dir(&out.join("runs").join(run_name(cfg)), &result).map_err(|e| e.to_string())?;
    Ok(result.records)
}

/// Runs every configuration, continuing past failures, and writes the
/// summary files.
pub fn run_experiments(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out)?;
    let configs = spec.configs();
    let slots: Vec<Mutex<Option<std::result::Result<Vec<EpochRecord>, String>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = worker_threads().min(configs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let cfg = &configs[i];
                log::info!("run {}/{}: {}", i + 1, configs.len(), run_name(cfg));
                let outcome = run_one(cfg, &spec.out);
                if let Err(e) = &outcome {
                    log::error!("{} failed: {e}", run_name(cfg));
                }
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let runs = configs
        .iter()
        .zip(slots)
        .map(|(cfg, slot)| RunSummary {
            method: cfg.method,
            ratio: cfg.data.ratio,
            seed: cfg.seeds.partition,
            outcome: slot
                .into_inner()
                .expect("slot lock")
                .unwrap_or_else(|| Err("run did not execute".into())),
        })
        .collect();
    let report = ExperimentReport { runs };
    write_outputs(spec, &report)?;
    Ok(report)
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("method,ratio,seed,final_miou,status\n");
    for r in &report.runs {
        let (miou, status) = match &r.outcome {
            Ok(_) => (
                r.final_miou().map_or(String::new(), |m| format!("{m:.6}")),
                "ok".to_string(),
            ),
            Err(e) => (
                String::new(),
                format!("failed: {}", e.replace([',', '\n'], ";")),
            ),
        };
        let _ = writeln!(out, "{},{},{},{miou},{status}", r.method, r.ratio, r.seed);
    }
    out
}

pub fn markdown_table(spec: &ExperimentSpec, report: &ExperimentReport) -> String {
    let mut out = String::from("| Method |");
    for r in &spec.ratios {
        let _ = write!(out, " {r} |");
    }
    out.push_str("\n|---|");
    for _ in &spec.ratios {
        out.push_str("---|");
    }
    out.push('\n');
    for &m in &spec.methods {
        let _ = write!(out, "| {m} |");
        for &r in &spec.ratios {
            let cell = report.cell(m, r);
            if cell.is_empty() {
                out.push_str(" n/a |");
            } else {
                let (mean, std) = mean_std(&cell);
                let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * mean, 100.0 * std);
            }
        }
        out.push('\n');
    }
    out
}

fn miou_plot(spec: &ExperimentSpec, report: &ExperimentReport) -> String {
    let ticks: Vec<(f64, String)> = spec
        .ratios
        .iter()
        .map(|r| (r.value().log2(), r.to_string()))
        .collect();
    let series: Vec<Series> = spec
        .methods
        .iter()
        .map(|&m| Series {
            label: m.to_string(),
            points: spec
                .ratios
                .iter()
                .filter_map(|&r| {
                    let cell = report.cell(m, r);
                    (!cell.is_empty()).then(|| (r.value().log2(), 100.0 * mean_std(&cell).0))
                })
                .collect(),
        })
        .collect();
    line_plot(
        &PlotSpec {
            title: "mIoU vs labeled ratio",
            x_label: "labeled ratio",
            y_label: "mIoU (%)",
            x_ticks: Some(ticks),
        },
        &series,
    )
}

/// Seed-averaged overlap per epoch for every run that reports one.
fn overlap_plot(spec: &ExperimentSpec, report: &ExperimentReport) -> String {
    let mut series = Vec::new();
    for &m in &spec.methods {
        for &r in &spec.ratios {
            let curves: Vec<Vec<f64>> = report
                .runs
                .iter()
                .filter(|s| s.method == m && s.ratio == r)
                .filter_map(|s| s.outcome.as_ref().ok())
                .filter_map(|recs| recs.iter().map(|e| e.overlap).collect::<Option<Vec<f64>>>())
                .collect();
            let Some(len) = curves.iter().map(|c| c.len()).min() else {
                continue;
            };
            let points = (0..len)
                .map(|e| {
                    let vals: Vec<f64> = curves.iter().map(|c| c[e]).collect();
                    ((e + 1) as f64, mean_std(&vals).0)
                })
                .collect();
            series.push(Series {
                label: format!("{m} {r}"),
                points,
            });
        }
    }
    line_plot(
        &PlotSpec {
            title: "Prediction overlap between the two networks",
            x_label: "epoch",
            y_label: "overlap ratio",
            x_ticks: None,
        },
        &series,
    )
}

fn write_outputs(spec: &ExperimentSpec, report: &ExperimentReport) -> Result<()> {
    fs::write(spec.out.join("summary.csv"), summary_csv(report))?;
    fs::write(spec.out.join("table.md"), markdown_table(spec, report))?;
    fs::write(spec.out.join("miou_vs_ratio.svg"), miou_plot(spec, report))?;
    fs::write(
        spec.out.join("overlap_vs_epoch.svg"),
        overlap_plot(spec, report),
    )?;
    Ok(())
}
