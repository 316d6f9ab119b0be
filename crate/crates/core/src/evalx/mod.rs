//! Metrics, evaluation of a trained policy and the ablation harness.

mod ablate;
mod judge;
mod metrics;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Episode, Label};
use crate::error::{Error, Result};
use crate::model::{TokenId, Vocab, EOS, PAD};
use crate::refine::{self, InferConfig, Policy, RefineDiagnostics};

pub use ablate::{
    format_table, run_ablations, run_cells, AblationReport, CellSummary, Grid, GridSpec, RunSummary, Stat, RATIO_GRID,
};
pub use judge::{Judge, JudgeRequest, JudgeResponse, ProcessJudge, TemplateJudge, JUDGE_TIMEOUT, MATCH_F1};
pub use metrics::{detect_accuracy, lcs_len, rouge_l, token_f1};

/// Metrics of one refinement round, scoring each episode's best
/// trajectory at that round (or its final answer if it stopped earlier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Episodes that actually executed this round.
    pub reached: usize,
    pub mean_h_det: f64,
    pub mean_h_reason: f64,
    pub mean_c: f64,
    pub detect_acc: f64,
    pub rouge_l: f64,
    pub judge_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub detect_acc: f64,
    pub rouge_l: f64,
    /// Mean over scored episodes; `None` when the judge scored none.
    pub judge_score: Option<f64>,
    pub scored: usize,
    pub unscored: usize,
    pub mean_stop_round: f64,
    pub curves: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub label: Label,
    pub predicted: Label,
    pub det_prob: f64,
    pub reasoning: Vec<String>,
    pub reference: Vec<String>,
    pub rouge_l: f64,
    pub judge_score: Option<f64>,
    pub diagnostics: RefineDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeResult>,
}

/// Generated ids as words, without EOS and PAD.
pub fn reasoning_words(vocab: &Vocab, ids: &[TokenId]) -> Vec<String> {
    let kept: Vec<TokenId> = ids.iter().copied().filter(|&t| t != EOS && t != PAD).collect();
    vocab.decode(&kept)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs refinement on every test episode and aggregates metrics overall
/// and per round.
pub fn run_eval<P: Policy + ?Sized>(
    policy: &P,
    test: &[Episode],
    cfg: &InferConfig,
    judge: &mut dyn Judge,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let vocab = Vocab::standard();
    let frames: Vec<Vec<f64>> = test.iter().map(Episode::frames_flat).collect();
    let jobs: Vec<(&[f64], Vec<u64>)> = test
        .iter()
        .zip(&frames)
        .map(|(ep, f)| {
            let key = refine::episode_key(&ep.episode_id);
            (f.as_slice(), (0..cfg.samples).map(|m| cfg.trajectory_seed(key, m)).collect())
        })
        .collect();
    let results = refine::refine_many(&jobs, policy, cfg)?;
    let rounds = results.iter().map(|r| r.diagnostics.stop_round).max().unwrap_or(1);

    // Judge every distinct (episode, candidate) once.
    let mut cache: HashMap<(usize, Vec<TokenId>), Option<f64>> = HashMap::new();
    let mut judge_ids = |i: usize, ids: &[TokenId], reference: &[String]| -> Option<f64> {
        if let Some(s) = cache.get(&(i, ids.to_vec())) {
            return *s;
        }
        let req = JudgeRequest {
            id: test[i].episode_id.clone(),
            candidate: reasoning_words(vocab, ids),
            reference: reference.to_vec(),
        };
        let s = judge.score(&req).ok();
        cache.insert((i, ids.to_vec()), s);
        s
    };

    let mut episodes = Vec::with_capacity(test.len());
    for (i, (ep, res)) in test.iter().zip(&results).enumerate() {
        let reference = ep
            .reasoning
            .clone()
            .ok_or_else(|| Error::Precondition(format!("test episode `{}` has no reasoning", ep.episode_id)))?;
        let words = reasoning_words(vocab, &res.reasoning);
        episodes.push(EpisodeResult {
            episode_id: ep.episode_id.clone(),
            label: ep.label,
            predicted: res.det_label,
            det_prob: res.det_prob,
            rouge_l: rouge_l(&words, &reference)?,
            judge_score: judge_ids(i, &res.reasoning, &reference),
            reasoning: words,
            reference,
            diagnostics: res.diagnostics.clone(),
        });
    }

    let labels: Vec<Label> = test.iter().map(|e| e.label).collect();
    let mut curves = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let outs: Vec<_> = results.iter().map(|x| x.diagnostics.best_at(r)).collect();
        let preds: Vec<Label> = outs.iter().map(|o| o.det_label).collect();
        let mut rouge = Vec::with_capacity(test.len());
        let mut judged = Vec::new();
        for (i, o) in outs.iter().enumerate() {
            let reference = &episodes[i].reference;
            rouge.push(rouge_l(&reasoning_words(vocab, &o.reasoning), reference)?);
            if let Some(s) = judge_ids(i, &o.reasoning, reference) {
                judged.push(s);
            }
        }
        curves.push(RoundMetrics {
            round: r,
            reached: results.iter().filter(|x| x.diagnostics.stop_round > r).count(),
            mean_h_det: mean(outs.iter().map(|o| o.h_det)),
            mean_h_reason: mean(outs.iter().map(|o| o.h_reason)),
            mean_c: mean(results.iter().map(|x| x.diagnostics.best_score_at(r))),
            detect_acc: detect_accuracy(&preds, &labels)?,
            rouge_l: mean(rouge.into_iter()),
            judge_score: (!judged.is_empty()).then(|| mean(judged.into_iter())),
        });
    }

    let preds: Vec<Label> = episodes.iter().map(|e| e.predicted).collect();
    let scored: Vec<f64> = episodes.iter().filter_map(|e| e.judge_score).collect();
    let report = MetricsReport {
        episodes: test.len(),
        detect_acc: detect_accuracy(&preds, &labels)?,
        rouge_l: mean(episodes.iter().map(|e| e.rouge_l)),
        judge_score: (!scored.is_empty()).then(|| mean(scored.iter().copied())),
        scored: scored.len(),
        unscored: test.len() - scored.len(),
        mean_stop_round: mean(results.iter().map(|r| r.diagnostics.stop_round as f64)),
        curves,
    };
    Ok(EvalOutcome { report, episodes })
}

/// Human-readable summary of one evaluation.
pub fn format_report(r: &MetricsReport) -> String {
    let judge = |j: Option<f64>| j.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    let mut s = format!(
        "episodes {}  detection {:.3}  rouge-l {:.3}  judge {} (scored {}, unscored {})  mean stop round {:.2}\n",
        r.episodes,
        r.detect_acc,
        r.rouge_l,
        judge(r.judge_score),
        r.scored,
        r.unscored,
        r.mean_stop_round
    );
    s.push_str("round  reached  H_det   H_reason  C       detection  rouge-l  judge\n");
    for c in &r.curves {
        s.push_str(&format!(
            "{:<6} {:<8} {:<7.4} {:<9.4} {:<7.4} {:<10.3} {:<8.3} {}\n",
            c.round,
            c.reached,
            c.mean_h_det,
            c.mean_h_reason,
            c.mean_c,
            c.detect_acc,
            c.rouge_l,
            judge(c.judge_score)
        ));
    }
    s
}
