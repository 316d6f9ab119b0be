//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 5 to 8 train 30 models at full size; set `ARMOR_ACCEPT_QUICK=1`
//! to run only 1 to 4. The process exits non-zero on a failed criterion only
//! when `ARMOR_ACCEPT_STRICT=1`, so `cargo test` reports the table either way.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod common;

use std::time::Instant;

use armor::datagen::{generate_dataset, DatasetManifest, SplitCounts};
use armor::model::{RoundOutput, EOS};
use armor::evalx::*;
use armor::model::ModelConfig;
use armor::refine::InferConfig;
use armor::rng;
use armor::train::*;

struct Outcome {
    failed: Vec<usize>,
}

impl Outcome {
    fn line(&mut self, id: usize, label: &str, pass: bool, detail: String) {
        println!("criterion {id} {label:<28} {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn gradients(o: &mut Outcome) {
    let t = Instant::now();
    let g = common::full_model_gradient_check(11);
    let secs = t.elapsed().as_secs_f64();
    o.line(
        1,
        "gradient check",
        g.failures == 0 && secs < 120.0,
        format!(
            "({} scalars, {} with |grad| > 1e-6, max abs err {:.1e}, max rel err {:.1e} at {}, {} over tolerance, {secs:.1}s)",
            g.checked, g.nonzero, g.max_abs, g.max_rel, g.worst, g.failures
        ),
    );
}

fn metric_oracles(o: &mut Outcome) {
    let mut mismatches = 0;
    let mut pairs = 0usize;
    let seqs = common::all_sequences(5);
    for a in &seqs {
        for b in seqs.iter().filter(|b| !b.is_empty()) {
            pairs += 1;
            if rouge_l(a, b).unwrap() != common::rouge_oracle(a, b) {
                mismatches += 1;
            }
        }
    }
    // Lengths 6 to 8: a fixed-seed sample of pairs.
    let mut r = rng::stream(2024, &[]);
    for _ in 0..200_000 {
        use rand::Rng;
        let mut seq = |lo: usize| -> Vec<u8> {
            let n = r.random_range(lo..=8);
            (0..n).map(|_| r.random_range(0..4u8)).collect()
        };
        let (a, b) = (seq(0), seq(1));
        pairs += 1;
        if rouge_l(&a, &b).unwrap() != common::rouge_oracle(&a, &b) {
            mismatches += 1;
        }
    }
    let cases = common::detect_cases();
    let bad_acc = cases
        .iter()
        .filter(|(p, l, want)| detect_accuracy(p, l).unwrap() != *want)
        .count();
    let h = RoundOutput::new(0.5, vec![EOS], vec![vec![1.0]]).h_det;
    let ln2_err = (h - std::f64::consts::LN_2).abs();
    o.line(
        2,
        "metric oracles",
        mismatches == 0 && bad_acc == 0 && ln2_err <= 1e-12,
        format!(
            "(rouge {mismatches}/{pairs} mismatches, accuracy {bad_acc}/{} wrong, |H(0.5)-ln2| = {ln2_err:.1e})",
            cases.len()
        ),
    );
}

fn refinement_semantics(o: &mut Outcome) {
    let mut wrong = Vec::new();
    let scenarios = common::scenarios();
    for s in &scenarios {
        let (stop, best, reason, selected) = common::run_scenario(s);
        let want_sel = (s.stop_round - 1, *s.best.last().unwrap());
        if (stop, &best, reason, selected) != (s.stop_round, &s.best, s.reason, want_sel) {
            wrong.push(s.name);
        }
    }
    o.line(
        3,
        "refinement semantics",
        wrong.is_empty(),
        format!("({} scenarios, mismatched: {wrong:?})", scenarios.len()),
    );
}

fn gating(o: &mut Outcome) {
    let d = generate_dataset(&DatasetManifest::new(5, SplitCounts { sparse: 24, dense: 8, test: 1 })).unwrap();
    let set = TrainSet::new(&d.sparse, &d.dense).unwrap();
    let batch: Vec<&Example> = set.sparse.iter().chain(&set.dense).collect();
    let dense: Vec<&Example> = set.dense.iter().collect();
    let model = common::scrambled(common::small_config(), 5, 0.1);
    let mut t = Trainer::new(model, TrainConfig::default(), 10).unwrap();
    let mut r = rng::stream(5, &[]);
    let mut checked = 0;
    let mut leaks = 0;
    let mut dense_off = 0;
    let reports = [
        ("warm-up", t.warmup_step(&batch).unwrap()),
        // Sparse episodes carry no reasoning to condition on and never
        // enter this stage.
        ("expert", t.expert_conditioned_step(&dense, &mut r).unwrap()),
        ("online", t.online_step(&batch, &mut r).unwrap()),
    ];
    for (phase, rep) in &reports {
        for s in &rep.samples {
            checked += 1;
            if !s.dense && s.ntp_weight != 0.0 {
                leaks += 1;
                eprintln!("{phase}: sparse sample {} has NTP weight {}", s.episode_id, s.ntp_weight);
            }
            if s.dense && s.ntp_weight == 0.0 {
                dense_off += 1;
            }
        }
    }
    o.line(
        4,
        "heterogeneous gating",
        leaks == 0 && dense_off == 0 && checked > 0,
        format!("({checked} sample losses over 3 phases, {leaks} sparse with NTP, {dense_off} dense without)"),
    );
}

fn spec(grid: Grid, seeds: &[u64]) -> GridSpec {
    GridSpec {
        grid,
        seeds: seeds.to_vec(),
        manifest: DatasetManifest::with_ratio(0, 2000, 10.0, 300),
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        infer: InferConfig::default(),
        judge_command: None,
        workers: 0,
    }
}

fn end_to_end(o: &mut Outcome) {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let seeds = [0, 1, 2, 3];
    let t = Instant::now();
    let variants = run_ablations(&spec(Grid::Variants, &seeds)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    print!("{}", format_table(&variants));
    let full = variants.cell(Ablation::Full, 10.0).unwrap();
    let multi = variants.cell(Ablation::MultitaskOnly, 10.0).unwrap();
    for c in &variants.cells {
        println!(
            "  {:<16} combined {:.3}  round judge {:?}",
            c.variant.name(),
            c.combined.mean,
            c.round_judge.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    o.line(
        5,
        "(a) full absolute level",
        full.detect_acc.mean >= 0.90 && full.judge_score.mean >= 0.80,
        format!("(detection {:.3}, judge {:.3})", full.detect_acc.mean, full.judge_score.mean),
    );
    let gap = full.judge_score.mean - multi.judge_score.mean;
    o.line(5, "(b) judge over multitask", gap >= 0.05, format!("(gap {gap:.3})"));
    let beaten: Vec<String> = variants
        .cells
        .iter()
        .filter(|c| c.variant != Ablation::Full && c.combined.mean > full.combined.mean)
        .map(|c| format!("{} {:.4}", c.variant.name(), c.combined.mean))
        .collect();
    o.line(
        5,
        "(c) full best combined",
        beaten.is_empty(),
        format!("(full {:.4}; above it: {beaten:?})", full.combined.mean),
    );
    o.line(
        5,
        "runtime under 30 min",
        secs < 1800.0,
        format!("({:.1} min for 20 runs on {cores} core(s))", secs / 60.0),
    );

    let j = &full.round_judge;
    let c = &full.round_c;
    let rises = j.len() > 1 && j[1] > j[0];
    let worst = (1..c.len().saturating_sub(1))
        .map(|r| c[r + 1] - c[r])
        .fold(f64::NEG_INFINITY, f64::max);
    o.line(
        6,
        "refinement rounds",
        rises && (c.len() < 3 || worst <= 1e-3),
        format!("(judge by round {j:.3?}, C by round {c:.4?}, largest C rise after round 1 {worst:.1e})"),
    );

    let t = Instant::now();
    let ratios = run_cells(&spec(Grid::Ratio, &seeds), &[(Ablation::Full, 2.0), (Ablation::Full, 30.0)]).unwrap();
    let r2 = ratios.cell(Ablation::Full, 2.0).unwrap().judge_score.mean;
    let r30 = ratios.cell(Ablation::Full, 30.0).unwrap().judge_score.mean;
    let r10 = full.judge_score.mean;
    o.line(
        7,
        "ratio sweep",
        r2 >= r10 && r10 >= r30,
        format!(
            "(judge at 2 / 10 / 30: {r2:.3} / {r10:.3} / {r30:.3}, {:.1} min)",
            t.elapsed().as_secs_f64() / 60.0
        ),
    );

    let again = run_cells(&spec(Grid::Variants, &[0]), &[(Ablation::Full, 10.0)]).unwrap();
    let first = variants
        .runs
        .iter()
        .find(|r| r.variant == Ablation::Full && r.seed == 0)
        .unwrap();
    let second = &again.runs[0];
    let report_hash = |r: &RunSummary| {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(&r.report).unwrap()))
    };
    o.line(
        8,
        "reproducibility",
        first.checkpoint_sha256 == second.checkpoint_sha256 && report_hash(first) == report_hash(second),
        format!(
            "(checkpoint {} vs {}, report {} vs {})",
            &first.checkpoint_sha256[..12],
            &second.checkpoint_sha256[..12],
            &report_hash(first)[..12],
            &report_hash(second)[..12]
        ),
    );
}

fn main() {
    let flag = |name: &str| std::env::var(name).is_ok_and(|v| v == "1");
    let mut o = Outcome { failed: Vec::new() };
    gradients(&mut o);
    metric_oracles(&mut o);
    refinement_semantics(&mut o);
    gating(&mut o);
    if flag("ARMOR_ACCEPT_QUICK") {
        println!("criteria 5-8 skipped (ARMOR_ACCEPT_QUICK=1)");
    } else {
        end_to_end(&mut o);
    }
    o.failed.dedup();
    println!("acceptance: {} failing criteria {:?}", o.failed.len(), o.failed);
    if flag("ARMOR_ACCEPT_STRICT") && !o.failed.is_empty() {
        std::process::exit(1);
    }
}
