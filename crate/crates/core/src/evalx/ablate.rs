//! Ablation and sparse:dense ratio grids over several seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refine::InferConfig;
use crate::train::{run_training, Ablation, TrainConfig, TrainSet};

use super::{run_eval, Judge, MetricsReport, ProcessJudge, TemplateJudge};

pub const RATIO_GRID: [f64; 4] = [2.0, 5.0, 10.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// The five training variants at the manifest's ratio.
    Variants,
    /// The full method at each ratio of [`RATIO_GRID`], sparse count fixed.
    Ratio,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "variants" | "ablation" => Ok(Grid::Variants),
            "ratio" => Ok(Grid::Ratio),
            _ => Err(Error::Config(format!("unknown grid `{s}` (expected `variants` or `ratio`)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub manifest: DatasetManifest,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub judge_command: Option<String>,
    /// Concurrent runs; 0 uses every available core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Ablation,
    pub ratio: f64,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: Ablation,
    pub ratio: f64,
    pub detect_acc: Stat,
    pub rouge_l: Stat,
    /// Unscored runs count as 0.
    pub judge_score: Stat,
    /// Mean of detection accuracy and judge score.
    pub combined: Stat,
    /// Per-round judge score, averaged over seeds.
    pub round_judge: Vec<f64>,
    /// Per-round mean combined entropy, averaged over seeds.
    pub round_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunSummary>,
}

impl AblationReport {
    pub fn cell(&self, variant: Ablation, ratio: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.variant == variant && c.ratio == ratio)
    }
}

fn run_one(spec: &GridSpec, variant: Ablation, ratio: f64, seed: u64) -> Result<RunSummary> {
    let base = &spec.manifest;
    let mut manifest = base.clone();
    manifest.seed = seed;
    if spec.grid == Grid::Ratio {
        manifest.counts = DatasetManifest::with_ratio(seed, base.counts.sparse, ratio, base.counts.test).counts;
    }
    let data = generate_dataset(&manifest)?;
    let train_cfg = TrainConfig {
        seed,
        ablation: variant,
        ..spec.train.clone()
    };
    let set = TrainSet::new(&data.sparse, &data.dense)?;
    let outcome = run_training(&train_cfg, &spec.model, &set, None)?;
    let infer = InferConfig {
        seed,
        ..variant.infer_config(&spec.infer)
    };
    let mut judge: Box<dyn Judge> = match &spec.judge_command {
        Some(cmd) => Box::new(ProcessJudge::new(cmd.clone())),
        None => Box::new(TemplateJudge),
    };
    let eval = run_eval(&outcome.model, &data.test, &infer, judge.as_mut())?;
    Ok(RunSummary {
        variant,
        ratio,
        seed,
        checkpoint_sha256: hex::encode(Sha256::digest(outcome.model.checkpoint_bytes())),
        report: eval.report,
    })
}

fn padded(curve: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|r| curve[r.min(curve.len() - 1)]).collect()
}

fn summarise(variant: Ablation, ratio: f64, runs: &[&RunSummary]) -> CellSummary {
    let judge = |r: &RunSummary| r.report.judge_score.unwrap_or(0.0);
    let len = runs.iter().map(|r| r.report.curves.len()).max().unwrap_or(0);
    let mean_curve = |f: &dyn Fn(&RunSummary) -> Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; len];
        for r in runs {
            for (a, v) in acc.iter_mut().zip(padded(&f(r), len)) {
                *a += v / runs.len() as f64;
            }
        }
        acc
    };
    CellSummary {
        variant,
        ratio,
        detect_acc: Stat::of(runs.iter().map(|r| r.report.detect_acc).collect()),
        rouge_l: Stat::of(runs.iter().map(|r| r.report.rouge_l).collect()),
        judge_score: Stat::of(runs.iter().map(|r| judge(r)).collect()),
        combined: Stat::of(runs.iter().map(|r| (r.report.detect_acc + judge(r)) / 2.0).collect()),
        round_judge: mean_curve(&|r| r.report.curves.iter().map(|c| c.judge_score.unwrap_or(0.0)).collect()),
        round_c: mean_curve(&|r| r.report.curves.iter().map(|c| c.mean_c).collect()),
    }
}

/// Trains and evaluates every cell of the grid for every seed. Runs are
/// independent and may execute concurrently; results do not depend on
/// the worker count.
pub fn run_ablations(spec: &GridSpec) -> Result<AblationReport> {
    let cells: Vec<(Ablation, f64)> = match spec.grid {
        Grid::Variants => Ablation::ALL
            .iter()
            .map(|&a| (a, spec.manifest.sparse_dense_ratio()))
            .collect(),
        Grid::Ratio => RATIO_GRID.iter().map(|&r| (Ablation::Full, r)).collect(),
    };
    run_cells(spec, &cells)
}

/// Like [`run_ablations`] for an explicit list of `(variant, ratio)`
/// cells. The ratio only takes effect on the ratio grid.
pub fn run_cells(spec: &GridSpec, cells: &[(Ablation, f64)]) -> Result<AblationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let workers = match spec.workers {
        0 => thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, seed)) = jobs.get(j) else { break };
                let (variant, ratio) = cells[c];
                let r = run_one(spec, variant, ratio, seed);
                results.lock().expect("no poisoned runs")[j] = Some(r);
            });
        }
    });
    let runs: Vec<RunSummary> = results
        .into_inner()
        .expect("no poisoned runs")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, &(variant, _))| {
            let mine: Vec<&RunSummary> = jobs
                .iter()
                .zip(&runs)
                .filter(|((jc, _), _)| *jc == c)
                .map(|(_, r)| r)
                .collect();
            summarise(variant, mine[0].ratio, &mine)
        })
        .collect();
    Ok(AblationReport {
        grid: spec.grid,
        seeds: spec.seeds.clone(),
        cells: summaries,
        runs,
    })
}

/// Plain-text table: one row per variant (or ratio), mean ± std columns.
pub fn format_table(report: &AblationReport) -> String {
    let pm = |s: &Stat| format!("{:.3} ± {:.3}", s.mean, s.std);
    let mut out = String::new();
    match report.grid {
        Grid::Variants => {
            out.push_str(&format!(
                "{:<16} {:<16} {:<16} {:<16}\n",
                "variant", "detection", "rouge-l", "judge"
            ));
            for c in &report.cells {
                out.push_str(&format!(
                    "{:<16} {:<16} {:<16} {:<16}\n",
                    c.variant.name(),
                    pm(&c.detect_acc),
                    pm(&c.rouge_l),
                    pm(&c.judge_score)
                ));
            }
        }
        Grid::Ratio => {
            out.push_str(&format!("{:<10}", "metric"));
            for c in &report.cells {
                out.push_str(&format!(" {:<16}", format!("{}", c.ratio)));
            }
            out.push('\n');
            let rows: [(&str, fn(&CellSummary) -> &Stat); 3] = [
                ("detection", |c| &c.detect_acc),
                ("rouge-l", |c| &c.rouge_l),
                ("judge", |c| &c.judge_score),
            ];
            for (name, f) in rows {
                out.push_str(&format!("{name:<10}"));
                for c in &report.cells {
                    out.push_str(&format!(" {:<16}", pm(f(c))));
                }
                out.push('\n');
            }
        }
    }
    out.push_str(&format!("seeds: {:?}\n", report.seeds));
    out
}
