use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use armor::config::RunConfig;
use armor::datagen::{self, Episode, Split};
use armor::evalx::{self, Grid, GridSpec, Judge, ProcessJudge, TemplateJudge};
use armor::model::Model;
use armor::refine::{self, InferConfig};
use armor::train::{self, Ablation, TrainSet};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "armor", version, about = "Failure detection and reasoning with self-refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Run refinement on one episode file or on a dataset's test split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        episode: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the diagnostics dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate an ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `variants` or `ratio`.
        #[arg(long, default_value = "variants")]
        grid: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Bad input: flags, config, missing or malformed files.
#[derive(Debug)]
struct Invalid(anyhow::Error);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(e.into()))
}

fn is_validation(e: &armor::Error) -> bool {
    use armor::Error as E;
    matches!(
        e,
        E::Config(_) | E::Parse { .. } | E::Io { .. } | E::Json(_) | E::Invariant { .. } | E::UnknownToken(_)
    )
}

/// Classifies library errors raised while reading inputs.
fn input<T>(r: armor::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| if is_validation(&e) { invalid(e) } else { e.into() })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => input(RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = input(cfg.apply_env())? {
        eprintln!("seed overridden from {}: {seed}", armor::config::SEED_ENV);
    }
    Ok(cfg)
}

/// Config used to build the checkpoint's model: explicit, else the echo
/// written beside the checkpoint, else defaults.
fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path) -> anyhow::Result<RunConfig> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join("config.json");
    load_config(beside.exists().then_some(beside.as_path()))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| invalid(anyhow!("missing --{name} (or paths.{name} in the config)")))
}

fn existing_dir(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(invalid(anyhow!("{what} directory `{}` does not exist", p.display())))
    }
}

fn existing_file(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(anyhow!("{what} `{}` does not exist", p.display())))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn make_judge(cfg: &RunConfig) -> Box<dyn Judge> {
    match &cfg.judge_command {
        Some(cmd) => Box::new(ProcessJudge::new(cmd.clone())),
        None => Box::new(TemplateJudge),
    }
}

fn gen_data(config: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config.as_deref())?;
    let out = required(out, &cfg.paths.data, "out")?;
    let data = input(datagen::generate_dataset(&cfg.data))?;
    input(datagen::write_dataset(&data, &out))?;
    input(cfg.echo(&out))?;
    println!(
        "wrote {} sparse, {} dense, {} test episodes to {}",
        data.sparse.len(),
        data.dense.len(),
        data.test.len(),
        out.display()
    );
    println!("checksum {}", input(datagen::dataset_checksum(&out))?);
    Ok(())
}

fn train_cmd(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    ablation: Option<String>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(a) = ablation {
        cfg.train.ablation = input(Ablation::parse(&a))?;
    }
    let data = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.checkpoints, "out")?;
    existing_dir(&data, "data")?;
    let dataset = input(datagen::load_all(&data))?;
    cfg.data = dataset.manifest.clone();
    input(cfg.validate())?;
    let set = input(TrainSet::new(&dataset.sparse, &dataset.dense))?;
    input(cfg.echo(&out))?;
    let outcome = train::run_training(&cfg.train, &cfg.model, &set, Some(&out))?;
    println!(
        "trained `{}` for {} steps; checkpoint {}",
        cfg.train.ablation.name(),
        outcome.log.len(),
        out.join("model.bin").display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<Model> {
    existing_file(checkpoint, "checkpoint")?;
    Model::load(cfg.model.clone(), checkpoint).map_err(|e| invalid(anyhow!("{}: {e}", checkpoint.display())))
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    checkpoint: PathBuf,
    episode: Option<PathBuf>,
    data: Option<PathBuf>,
    rounds: Option<usize>,
    samples: Option<usize>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = config_for_checkpoint(config.as_deref(), &checkpoint)?;
    if let Some(r) = rounds {
        cfg.infer.max_rounds = r;
    }
    if let Some(m) = samples {
        cfg.infer.samples = m;
    }
    input(cfg.infer.validate())?;
    let out = required(out, &cfg.paths.reports, "out")?;
    let episodes: Vec<Episode> = match (episode, data) {
        (Some(p), _) => {
            existing_file(&p, "episode file")?;
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let ep: Episode = serde_json::from_str(text.trim())
                .map_err(|e| invalid(anyhow!("{}: not an episode: {e}", p.display())))?;
            input(ep.validate())?;
            vec![ep]
        }
        (None, Some(d)) => {
            existing_dir(&d, "data")?;
            input(datagen::load_dataset(&d, Split::Test))?
        }
        (None, None) => return Err(invalid(anyhow!("one of --episode or --data is required"))),
    };
    let model = load_model(&cfg, &checkpoint)?;
    let frames: Vec<Vec<f64>> = episodes.iter().map(Episode::frames_flat).collect();
    let jobs: Vec<(&[f64], Vec<u64>)> = episodes
        .iter()
        .zip(&frames)
        .map(|(ep, f)| {
            let key = refine::episode_key(&ep.episode_id);
            (f.as_slice(), (0..cfg.infer.samples).map(|m| cfg.infer.trajectory_seed(key, m)).collect())
        })
        .collect();
    let results = refine::refine_many(&jobs, &model, &cfg.infer)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut dump = String::new();
    for (ep, res) in episodes.iter().zip(&results) {
        let words = evalx::reasoning_words(model.vocab(), &res.reasoning);
        println!(
            "{}\t{}\t{:.4}\t{}",
            ep.episode_id,
            if res.det_label.is_failure() { "failure" } else { "success" },
            res.det_prob,
            words.join(" ")
        );
        let line = serde_json::json!({
            "episode_id": ep.episode_id,
            "det_label": res.det_label,
            "det_prob": res.det_prob,
            "reasoning": words,
            "diagnostics": res.diagnostics,
        });
        dump.push_str(&line.to_string());
        dump.push('\n');
    }
    let path = out.join("diagnostics.jsonl");
    fs::write(&path, dump).with_context(|| format!("writing {}", path.display()))?;
    input(cfg.echo(&out))?;
    Ok(())
}

fn eval_cmd(
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    report: Option<PathBuf>,
    config: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = config_for_checkpoint(config.as_deref(), &checkpoint)?;
    let data = required(data, &cfg.paths.data, "data")?;
    let report = required(report, &cfg.paths.reports, "report")?;
    existing_dir(&data, "data")?;
    let test = input(datagen::load_dataset(&data, Split::Test))?;
    let model = load_model(&cfg, &checkpoint)?;
    let infer: InferConfig = cfg.train.ablation.infer_config(&cfg.infer);
    let mut judge = make_judge(&cfg);
    let outcome = evalx::run_eval(&model, &test, &infer, judge.as_mut())?;
    fs::create_dir_all(&report).with_context(|| format!("creating {}", report.display()))?;
    write_json(&report.join("report.json"), &outcome.report)?;
    let mut lines = String::new();
    for e in &outcome.episodes {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    fs::write(report.join("episodes.jsonl"), lines).context("writing episodes.jsonl")?;
    input(cfg.echo(&report))?;
    print!("{}", evalx::format_report(&outcome.report));
    Ok(())
}

fn ablate_cmd(
    config: Option<PathBuf>,
    grid: String,
    report: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    workers: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    let grid = input(Grid::parse(&grid))?;
    if let Some(s) = seeds {
        cfg.ablate.seeds = s;
    }
    if let Some(w) = workers {
        cfg.ablate.workers = w;
    }
    input(cfg.validate())?;
    let report = required(report, &cfg.paths.reports, "report")?;
    input(cfg.echo(&report))?;
    let spec = GridSpec {
        grid,
        seeds: cfg.ablate.seeds.clone(),
        manifest: cfg.data.clone(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        infer: cfg.infer.clone(),
        judge_command: cfg.judge_command.clone(),
        workers: cfg.ablate.workers,
    };
    let result = evalx::run_ablations(&spec)?;
    let table = evalx::format_table(&result);
    write_json(&report.join("ablation.json"), &result)?;
    fs::write(report.join("table.txt"), &table).context("writing table.txt")?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => gen_data(config, out),
        Cmd::Train {
            config,
            data,
            out,
            ablation,
        } => train_cmd(config, data, out, ablation),
        Cmd::Infer {
            checkpoint,
            episode,
            data,
            rounds,
            samples,
            config,
            out,
        } => infer_cmd(checkpoint, episode, data, rounds, samples, config, out),
        Cmd::Eval {
            checkpoint,
            data,
            report,
            config,
        } => eval_cmd(checkpoint, data, report, config),
        Cmd::Ablate {
            config,
            grid,
            report,
            seeds,
            workers,
        } => ablate_cmd(config, grid, report, seeds, workers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let validation = e.downcast_ref::<Invalid>().is_some();
            eprintln!("error: {e:#}");
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
