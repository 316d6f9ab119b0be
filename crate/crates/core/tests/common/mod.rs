//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::cell::Cell;

use armor::datagen::{generate_dataset, DatasetManifest, Label, SplitCounts};
use armor::model::{ConditioningContext, Model, ModelConfig, RoundOutput, EOS};
use armor::refine::{refine_with_seeds, InferConfig, Policy, StopReason};
use armor::rng::{self, Rng};
use armor::train::{online_gradients, Example, TrainSet};

/// LCS length by trying every subsequence of `a`, longest first.
pub fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
    let is_sub = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let n = a.len();
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let s: Vec<u8> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if is_sub(&s) {
            best = k;
        }
    }
    best
}

/// F-measure from the oracle LCS: P = l/|c|, R = l/|r|.
pub fn rouge_oracle(c: &[u8], r: &[u8]) -> f64 {
    let l = lcs_oracle(c, r);
    if c.is_empty() || l == 0 {
        return 0.0;
    }
    2.0 * l as f64 / (c.len() + r.len()) as f64
}

/// Every sequence over `{0,1,2,3}` with length at most `max`.
pub fn all_sequences(max: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..4u8 {
                let mut x: Vec<u8> = s.clone();
                x.push(t);
                next.push(x);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

const F: Label = Label::Failure;
const S: Label = Label::Success;

/// Twenty detection cases with hand-counted accuracy (hits / n).
pub fn detect_cases() -> Vec<(Vec<Label>, Vec<Label>, f64)> {
    vec![
        (vec![F], vec![F], 1.0),
        (vec![S], vec![F], 0.0),
        (vec![F, S], vec![F, S], 1.0),
        (vec![F, S], vec![S, F], 0.0),
        (vec![F, F], vec![F, S], 0.5),
        (vec![S, S, S], vec![S, S, F], 2.0 / 3.0),
        (vec![F, F, F], vec![S, S, F], 1.0 / 3.0),
        (vec![F, S, F, S], vec![F, F, F, S], 0.75),
        (vec![S, S, S, S], vec![F, F, F, F], 0.0),
        (vec![F, F, S, S], vec![F, F, S, S], 1.0),
        (vec![F, S, F, S, F], vec![F, F, F, F, F], 0.6),
        (vec![S, S, S, S, F], vec![S, F, S, F, F], 0.6),
        (vec![F, F, F, F, F, S], vec![F, F, F, F, F, F], 5.0 / 6.0),
        (vec![S, F, S, F, S, F], vec![F, S, F, S, F, S], 0.0),
        (vec![F, S, S, F, F, S, S], vec![F, S, S, F, F, S, F], 6.0 / 7.0),
        (vec![F, F, F, F, S, S, S, S], vec![F, S, F, S, F, S, F, S], 0.5),
        (vec![S; 9], vec![S, S, S, F, S, S, S, F, S], 7.0 / 9.0),
        (vec![F; 10], vec![F, S, F, S, F, S, F, S, F, S], 0.5),
        (vec![F, S, F, S, F, S, F, S, F, S, F, S], vec![F, S, F, S, F, S, F, S, F, S, S, F], 10.0 / 12.0),
        (vec![S, F, F, F, F, F, F, F, F, F, F, F, F, F, F, F], vec![F; 16], 15.0 / 16.0),
    ]
}

/// Fake policy returning preset `(h_det, h_reason)` by round and trajectory.
pub struct Scripted {
    pub h: Vec<Vec<(f64, f64)>>,
    pub round: Cell<usize>,
}

impl Policy for Scripted {
    fn predict_batch(&self, items: &[(&[f64], &ConditioningContext)], _: f64, _: &mut [Rng]) -> armor::Result<Vec<RoundOutput>> {
        let r = self.round.get();
        self.round.set(r + 1);
        Ok((0..items.len())
            .map(|m| {
                let (h_det, h_reason) = self.h[r][m];
                RoundOutput {
                    det_prob: 0.75,
                    det_label: Label::Failure,
                    reasoning: vec![7 + m, 7 + r, EOS],
                    step_dists: Vec::new(),
                    h_det,
                    h_reason,
                }
            })
            .collect())
    }
}

pub struct Scenario {
    pub name: &'static str,
    pub tolerance: f64,
    pub lambda: f64,
    pub max_rounds: usize,
    /// `h[round][trajectory]`, rows for every round up to `max_rounds`.
    pub h: Vec<Vec<(f64, f64)>>,
    /// Hand-traced: rounds executed, `m*` per executed round, reason.
    pub stop_round: usize,
    pub best: Vec<usize>,
    pub reason: StopReason,
}

fn c(v: &[f64]) -> Vec<(f64, f64)> {
    v.iter().map(|&x| (x, 0.0)).collect()
}

/// Ten scenarios with dyadic entropies, so every comparison is exact.
/// C = h_det + λ·h_reason; break when C(m*) ≥ C_min − ε.
pub fn scenarios() -> Vec<Scenario> {
    use StopReason::*;
    let pad = |mut h: Vec<Vec<(f64, f64)>>, m: usize, t: usize| {
        while h.len() < t {
            h.push(vec![(9.0, 0.0); m]);
        }
        h
    };
    vec![
        // r0 min 0.25 (m1); r1 tie at 0.25 -> m0, 0.25 >= 0.125 -> break.
        Scenario {
            name: "plateau",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(vec![c(&[0.5, 0.25, 0.75]), c(&[0.25, 0.25, 0.25])], 3, 4),
            stop_round: 2,
            best: vec![1, 0],
            reason: Tolerance,
        },
        // r0 min 0.5; r1 min 0.375 = 0.5 - 0.125 exactly -> break.
        Scenario {
            name: "drop equals tolerance",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(vec![c(&[1.0, 0.75, 0.5]), c(&[0.375, 0.5, 0.625])], 3, 4),
            stop_round: 2,
            best: vec![2, 0],
            reason: Tolerance,
        },
        // 0.3125 < 0.375 continue; 0.125 < 0.1875 continue; 0.0 >= 0.0 break.
        Scenario {
            name: "drop beyond tolerance",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: vec![
                c(&[1.0, 0.75, 0.5]),
                c(&[0.5, 0.3125, 0.75]),
                c(&[0.25, 0.25, 0.125]),
                c(&[0.0, 0.5, 0.5]),
            ],
            stop_round: 4,
            best: vec![2, 1, 2, 0],
            reason: Tolerance,
        },
        // Drops of 0.5 every round: runs to the horizon.
        Scenario {
            name: "horizon",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: vec![c(&[2.0, 2.5, 3.0]), c(&[2.0, 1.5, 2.5]), c(&[1.0, 1.0, 1.25]), c(&[0.75, 0.5, 0.5])],
            stop_round: 4,
            best: vec![0, 1, 0, 1],
            reason: Horizon,
        },
        // Worse second round still ends the loop and returns its m*.
        Scenario {
            name: "increase",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(vec![c(&[0.5, 0.25, 1.0]), c(&[1.0, 0.75, 0.875])], 3, 4),
            stop_round: 2,
            best: vec![1, 1],
            reason: Tolerance,
        },
        // C: r0 [0.75, 0.5, 0.75] m1; r1 [0.25, 0.25, 0.375] m0, 0.25 < 0.375;
        // r2 all 0.25 >= 0.125 -> break with m0.
        Scenario {
            name: "reasoning entropy weighted",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(
                vec![
                    vec![(0.25, 1.0), (0.5, 0.0), (0.0, 1.5)],
                    vec![(0.125, 0.25), (0.25, 0.0), (0.0, 0.75)],
                    vec![(0.25, 0.0), (0.125, 0.25), (0.0, 0.5)],
                ],
                3,
                4,
            ),
            stop_round: 3,
            best: vec![1, 0, 0],
            reason: Tolerance,
        },
        // ε = 0: equal C breaks.
        Scenario {
            name: "zero tolerance",
            tolerance: 0.0,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(vec![c(&[0.5, 0.5, 0.5]), c(&[0.5, 0.5, 0.5])], 3, 4),
            stop_round: 2,
            best: vec![0, 0],
            reason: Tolerance,
        },
        // One trajectory: 0.25 < 0.375 continue; 0.25 >= 0.125 break.
        Scenario {
            name: "single trajectory",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 4,
            h: pad(vec![c(&[0.5]), c(&[0.25]), c(&[0.25])], 1, 4),
            stop_round: 3,
            best: vec![0, 0, 0],
            reason: Tolerance,
        },
        // One round allowed.
        Scenario {
            name: "single round",
            tolerance: 0.125,
            lambda: 0.5,
            max_rounds: 1,
            h: vec![c(&[0.75, 0.25, 0.25])],
            stop_round: 1,
            best: vec![1],
            reason: Horizon,
        },
        // Tie across the last two trajectories, then 0.5 = 0.625 - 0.125.
        Scenario {
            name: "ties and boundary",
            tolerance: 0.125,
            lambda: 0.25,
            max_rounds: 3,
            h: pad(
                vec![
                    vec![(0.75, 0.0), (0.5, 0.5), (0.5, 0.5)],
                    vec![(0.25, 1.0), (0.5, 0.0), (0.0, 2.0)],
                ],
                3,
                3,
            ),
            stop_round: 2,
            best: vec![1, 0],
            reason: Tolerance,
        },
    ]
}

/// Runs a scenario; returns `(stop_round, best, reason, selected (round, m))`.
pub fn run_scenario(s: &Scenario) -> (usize, Vec<usize>, StopReason, (usize, usize)) {
    let m = s.h[0].len();
    let p = Scripted {
        h: s.h.clone(),
        round: Cell::new(0),
    };
    let cfg = InferConfig {
        samples: m,
        max_rounds: s.max_rounds,
        tolerance: s.tolerance,
        lambda: s.lambda,
        ..InferConfig::default()
    };
    let out = refine_with_seeds(&[0.0], &p, &cfg, (0..m as u64).collect()).unwrap();
    let d = out.diagnostics;
    (d.stop_round, d.best, d.stop_reason, (d.selected_round, d.selected_trajectory))
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        ffn_dim: 16,
        decoder_layers: 1,
        attn_heads: 2,
        max_reasoning_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Every parameter shifted by Gaussian noise, zero-initialised ones included.
pub fn scrambled(cfg: ModelConfig, seed: u64, scale: f64) -> Model {
    let mut m = Model::new(cfg, seed).unwrap();
    let mut r = rng::stream(seed, &[99]);
    let ids: Vec<_> = m.store().ids().collect();
    for id in ids {
        for v in m.store_mut().value_mut(id).data_mut() {
            *v += scale * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
        }
    }
    m
}

pub struct GradCheck {
    pub checked: usize,
    pub nonzero: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub worst: String,
    pub failures: usize,
}

/// Central differences (h = 1e-5) on every scalar of every parameter of a
/// scrambled model, on a two-round online objective over sparse and dense
/// samples. Passes when rel ≤ 1e-4 or abs ≤ 1e-7.
pub fn full_model_gradient_check(seed: u64) -> GradCheck {
    let d = generate_dataset(&DatasetManifest::new(seed, SplitCounts { sparse: 2, dense: 2, test: 1 })).unwrap();
    let set = TrainSet::new(&d.sparse, &d.dense).unwrap();
    let batch: Vec<&Example> = set.sparse.iter().chain(&set.dense).collect();
    let mut model = scrambled(small_config(), seed, 0.3);
    let contexts: Vec<Vec<ConditioningContext>> = batch
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let label = if i % 2 == 0 { Label::Failure } else { Label::Success };
            vec![
                ConditioningContext::initial(),
                ConditioningContext::from_prediction(label, &[7 + i, 12, 20, EOS]),
            ]
        })
        .collect();
    let (_, _, grads) = online_gradients(&model, &batch, contexts.clone()).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.store().ids().collect();
    let mut out = GradCheck {
        checked: 0,
        nonzero: 0,
        max_abs: 0.0,
        max_rel: 0.0,
        worst: String::new(),
        failures: 0,
    };
    for (pi, id) in ids.into_iter().enumerate() {
        let n = model.store().value(id).data().len();
        for k in 0..n {
            let x = model.store().value(id).data()[k];
            let mut at = |v: f64| {
                model.store_mut().value_mut(id).data_mut()[k] = v;
                online_gradients(&model, &batch, contexts.clone()).unwrap().0
            };
            let numeric = (at(x + h) - at(x - h)) / (2.0 * h);
            model.store_mut().value_mut(id).data_mut()[k] = x;
            let analytic = grads[pi][k];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-300);
            out.checked += 1;
            out.max_abs = out.max_abs.max(abs);
            if analytic.abs() > 1e-6 {
                out.nonzero += 1;
                if rel > out.max_rel {
                    out.max_rel = rel;
                    out.worst = format!("{}[{k}]", model.store().name(id));
                }
            }
            if abs > 1e-7 && rel > 1e-4 {
                out.failures += 1;
            }
        }
    }
    out
}
