//! The refinement MDP: state transitions, training rollouts and the
//! entropy-guided multi-trajectory inference loop.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::Label;
use crate::error::{Error, Result};
use crate::model::{ConditioningContext, Model, RoundOutput, TokenId};
use crate::rng::{self, Rng};

/// Anything that can produce one round of joint predictions.
pub trait Policy {
    /// One output per item; item `i` draws only from `rngs[i]`.
    fn predict_batch(
        &self,
        items: &[(&[f64], &ConditioningContext)],
        temperature: f64,
        rngs: &mut [Rng],
    ) -> Result<Vec<RoundOutput>>;
}

impl Policy for Model {
    fn predict_batch(
        &self,
        items: &[(&[f64], &ConditioningContext)],
        temperature: f64,
        rngs: &mut [Rng],
    ) -> Result<Vec<RoundOutput>> {
        Model::predict_batch(self, items, temperature, rngs)
    }
}

/// `s_t = [x, l^{t-1}, e^{t-1}, p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub frames: Arc<[f64]>,
    pub prev: Option<(Label, Vec<TokenId>)>,
    pub round: usize,
}

impl RefineState {
    pub fn initial(frames: Arc<[f64]>) -> Self {
        Self {
            frames,
            prev: None,
            round: 0,
        }
    }

    pub fn context(&self) -> ConditioningContext {
        match &self.prev {
            None => ConditioningContext::initial(),
            Some((l, e)) => ConditioningContext::from_prediction(*l, e),
        }
    }

    /// Deterministic transition carrying the action forward.
    pub fn transition(&self, action: &RoundOutput) -> Self {
        Self {
            frames: Arc::clone(&self.frames),
            prev: Some((action.det_label, action.reasoning.clone())),
            round: self.round + 1,
        }
    }
}

/// Samples `t_rounds` successive rounds for each episode, feeding each
/// round's sampled output into the next round's context. Returns, per
/// episode, the context used and the output produced at every round.
pub fn rollout_batch<P: Policy + ?Sized>(
    frames: &[&[f64]],
    policy: &P,
    t_rounds: usize,
    temperature: f64,
    rngs: &mut [Rng],
) -> Result<Vec<Vec<(ConditioningContext, RoundOutput)>>> {
    if t_rounds == 0 {
        return Err(Error::Precondition("rollout horizon must be at least 1".into()));
    }
    let mut states: Vec<RefineState> = frames.iter().map(|f| RefineState::initial(Arc::from(*f))).collect();
    let mut out: Vec<Vec<(ConditioningContext, RoundOutput)>> = vec![Vec::with_capacity(t_rounds); frames.len()];
    for _ in 0..t_rounds {
        let ctxs: Vec<ConditioningContext> = states.iter().map(RefineState::context).collect();
        let items: Vec<(&[f64], &ConditioningContext)> =
            states.iter().zip(&ctxs).map(|(s, c)| (&*s.frames, c)).collect();
        let preds = policy.predict_batch(&items, temperature, rngs)?;
        for (i, (ctx, pred)) in ctxs.into_iter().zip(preds).enumerate() {
            states[i] = states[i].transition(&pred);
            out[i].push((ctx, pred));
        }
    }
    Ok(out)
}

/// Single-episode form of [`rollout_batch`].
pub fn rollout_training<P: Policy + ?Sized>(
    frames: &[f64],
    policy: &P,
    t_rounds: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<(ConditioningContext, RoundOutput)>> {
    Ok(rollout_batch(&[frames], policy, t_rounds, temperature, std::slice::from_mut(rng))?
        .pop()
        .expect("one episode"))
}

/// Which output to return once the loop stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    /// The stop round's best trajectory.
    #[default]
    Current,
    /// The lowest score seen over all executed rounds.
    GlobalMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Trajectories `M`.
    pub samples: usize,
    /// Maximum rounds `T_refine`.
    pub max_rounds: usize,
    /// Stopping tolerance `ε`.
    pub tolerance: f64,
    /// Weight `λ` of the reasoning entropy.
    pub lambda: f64,
    pub temperature: f64,
    pub seed: u64,
    pub select: Select,
    /// Keep sampling to `max_rounds` after the stop decision, for
    /// diagnostics only. Never changes the returned answer.
    pub full_horizon: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            samples: 3,
            max_rounds: 4,
            tolerance: 1e-4,
            lambda: 0.1,
            temperature: 0.7,
            seed: 0,
            select: Select::Current,
            full_horizon: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.max_rounds == 0 {
            return Err(Error::Config("samples and max_rounds must be at least 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 || !(self.lambda >= 0.0) {
            return Err(Error::Config("tolerance and lambda must be non-negative".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be finite and ≥ 0", self.temperature)));
        }
        Ok(())
    }

    /// RNG seed of trajectory `m` for the episode keyed `episode_key`.
    pub fn trajectory_seed(&self, episode_key: u64, m: usize) -> u64 {
        rng::derive_seed(self.seed, &[episode_key, m as u64])
    }
}

/// One trajectory's outputs and scores, round by round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rounds: Vec<RoundOutput>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineDiagnostics {
    pub trajectories: Vec<Trajectory>,
    /// `m*` per executed round (0-based rounds).
    pub best: Vec<usize>,
    /// Rounds executed before stopping, counting the stop round.
    pub stop_round: usize,
    pub stop_reason: StopReason,
    /// Round and trajectory of the returned output.
    pub selected_round: usize,
    pub selected_trajectory: usize,
}

impl RefineDiagnostics {
    /// The round-`r` best output, or the last executed round's when the
    /// loop stopped before `r`.
    pub fn best_at(&self, r: usize) -> &RoundOutput {
        let r = r.min(self.stop_round - 1);
        &self.trajectories[self.best[r]].rounds[r]
    }

    pub fn best_score_at(&self, r: usize) -> f64 {
        let r = r.min(self.stop_round - 1);
        self.trajectories[self.best[r]].scores[r]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub det_label: Label,
    pub det_prob: f64,
    pub reasoning: Vec<TokenId>,
    pub diagnostics: RefineDiagnostics,
}

/// Lowest score, ties to the lowest index.
fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Stopping rule over per-round scores (`scores[round][trajectory]`).
/// Returns `(rounds executed, best per round, reason)`.
pub fn stop_rule(scores: &[Vec<f64>], tolerance: f64, max_rounds: usize) -> (usize, Vec<usize>, StopReason) {
    let mut c_min = f64::INFINITY;
    let mut best = Vec::new();
    for (t, round) in scores.iter().enumerate().take(max_rounds) {
        let m = argmin(round);
        best.push(m);
        if round[m] >= c_min - tolerance {
            return (t + 1, best, StopReason::Tolerance);
        }
        c_min = round[m];
    }
    (best.len(), best, StopReason::Horizon)
}

struct Episode {
    states: Vec<RefineState>,
    rngs: Vec<Rng>,
    trajectories: Vec<Trajectory>,
    best: Vec<usize>,
    c_min: f64,
    stop: Option<(usize, StopReason)>,
}

/// Runs refinement for many episodes at once. Each `(frames, seeds)`
/// entry gets one trajectory per seed; all live trajectories of a round
/// share one policy call, which does not affect any individual result.
pub fn refine_many<P: Policy + ?Sized>(
    episodes: &[(&[f64], Vec<u64>)],
    policy: &P,
    cfg: &InferConfig,
) -> Result<Vec<RefineResult>> {
    cfg.validate()?;
    let mut eps: Vec<Episode> = episodes
        .iter()
        .map(|(f, seeds)| {
            let frames: Arc<[f64]> = Arc::from(*f);
            Episode {
                states: seeds.iter().map(|_| RefineState::initial(Arc::clone(&frames))).collect(),
                rngs: seeds.iter().map(|&s| rng::stream(s, &[])).collect(),
                trajectories: seeds
                    .iter()
                    .map(|_| Trajectory {
                        rounds: Vec::new(),
                        scores: Vec::new(),
                    })
                    .collect(),
                best: Vec::new(),
                c_min: f64::INFINITY,
                stop: None,
            }
        })
        .collect();
    if let Some((i, _)) = episodes.iter().enumerate().find(|(_, (_, s))| s.is_empty()) {
        return Err(Error::Precondition(format!("episode {i} has no trajectories")));
    }
    for t in 0..cfg.max_rounds {
        let live: Vec<usize> = (0..eps.len())
            .filter(|&i| eps[i].stop.is_none() || cfg.full_horizon)
            .collect();
        if live.is_empty() {
            break;
        }
        let mut rngs: Vec<Rng> = Vec::new();
        for &i in &live {
            rngs.append(&mut eps[i].rngs);
        }
        let ctxs: Vec<Vec<ConditioningContext>> = live
            .iter()
            .map(|&i| eps[i].states.iter().map(RefineState::context).collect())
            .collect();
        let items: Vec<(&[f64], &ConditioningContext)> = live
            .iter()
            .zip(&ctxs)
            .flat_map(|(&i, cs)| eps[i].states.iter().zip(cs).map(|(s, c)| (&*s.frames, c)))
            .collect();
        let preds = policy.predict_batch(&items, cfg.temperature, &mut rngs);
        // Return the streams before propagating any error.
        let mut rng_iter = rngs.into_iter();
        for &i in &live {
            let m = eps[i].states.len();
            eps[i].rngs.extend(rng_iter.by_ref().take(m));
        }
        let mut preds = preds?.into_iter();
        for &i in &live {
            let ep = &mut eps[i];
            let mut scores = Vec::with_capacity(ep.states.len());
            for m in 0..ep.states.len() {
                let p = preds.next().expect("one output per trajectory");
                let c = p.combined(cfg.lambda);
                ep.states[m] = ep.states[m].transition(&p);
                ep.trajectories[m].rounds.push(p);
                ep.trajectories[m].scores.push(c);
                scores.push(c);
            }
            let m_star = argmin(&scores);
            if ep.stop.is_some() {
                // Diagnostics past the stop decision.
                ep.best.push(m_star);
                continue;
            }
            ep.best.push(m_star);
            if scores[m_star] >= ep.c_min - cfg.tolerance {
                ep.stop = Some((t + 1, StopReason::Tolerance));
            } else {
                ep.c_min = scores[m_star];
                if t + 1 == cfg.max_rounds {
                    ep.stop = Some((t + 1, StopReason::Horizon));
                }
            }
        }
    }
    Ok(eps
        .into_iter()
        .map(|ep| {
            let (stop_round, stop_reason) = ep.stop.expect("every episode stops by the horizon");
            let (sel_round, sel_traj) = match cfg.select {
                Select::Current => (stop_round - 1, ep.best[stop_round - 1]),
                Select::GlobalMin => {
                    let mut sel = (0, ep.best[0]);
                    for r in 1..stop_round {
                        let m = ep.best[r];
                        if ep.trajectories[m].scores[r] < ep.trajectories[sel.1].scores[sel.0] {
                            sel = (r, m);
                        }
                    }
                    sel
                }
            };
            let out = &ep.trajectories[sel_traj].rounds[sel_round];
            RefineResult {
                det_label: out.det_label,
                det_prob: out.det_prob,
                reasoning: out.reasoning.clone(),
                diagnostics: RefineDiagnostics {
                    trajectories: ep.trajectories,
                    best: ep.best,
                    stop_round,
                    stop_reason,
                    selected_round: sel_round,
                    selected_trajectory: sel_traj,
                },
            }
        })
        .collect())
}

/// Refinement for one episode with explicit per-trajectory seeds.
pub fn refine_with_seeds<P: Policy + ?Sized>(
    frames: &[f64],
    policy: &P,
    cfg: &InferConfig,
    seeds: Vec<u64>,
) -> Result<RefineResult> {
    Ok(refine_many(&[(frames, seeds)], policy, cfg)?.pop().expect("one episode"))
}

/// Refinement for one episode, trajectories seeded from `cfg.seed` and
/// `episode_key`.
pub fn refine_inference<P: Policy + ?Sized>(
    frames: &[f64],
    policy: &P,
    cfg: &InferConfig,
    episode_key: u64,
) -> Result<RefineResult> {
    let seeds = (0..cfg.samples).map(|m| cfg.trajectory_seed(episode_key, m)).collect();
    refine_with_seeds(frames, policy, cfg, seeds)
}

/// Stable 64-bit key for an episode id.
pub fn episode_key(episode_id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(episode_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Returns preset `(h_det-ish prob, reasoning)` outputs by round and
    /// batch position.
    struct Scripted {
        /// `probs[round][trajectory]`
        probs: Vec<Vec<f64>>,
        round: Cell<usize>,
    }

    impl Policy for Scripted {
        fn predict_batch(
            &self,
            items: &[(&[f64], &ConditioningContext)],
            _t: f64,
            _r: &mut [Rng],
        ) -> Result<Vec<RoundOutput>> {
            let r = self.round.get();
            self.round.set(r + 1);
            Ok((0..items.len())
                .map(|m| RoundOutput::new(self.probs[r][m], vec![crate::model::EOS], vec![vec![1.0]]))
                .collect())
        }
    }

    #[test]
    fn transition_carries_action() {
        let s0 = RefineState::initial(Arc::from(vec![1.0, 2.0]));
        let a = RoundOutput::new(0.9, vec![7, 1], vec![vec![1.0], vec![1.0]]);
        let s1 = s0.transition(&a);
        assert_eq!(s1.round, 1);
        assert_eq!(s1.prev, Some((Label::Failure, vec![7, 1])));
        assert!(Arc::ptr_eq(&s0.frames, &s1.frames));
        assert_eq!(s1, s0.transition(&a));
        assert_eq!(s0.context(), ConditioningContext::initial());
    }

    #[test]
    fn stop_rule_compares_after_first_round() {
        let (n, best, why) = stop_rule(&[vec![0.5, 0.3], vec![0.3, 0.4]], 1e-4, 4);
        assert_eq!((n, best, why), (2, vec![1, 0], StopReason::Tolerance));
        let (n, _, why) = stop_rule(&[vec![0.5], vec![0.4], vec![0.3]], 1e-4, 3);
        assert_eq!((n, why), (3, StopReason::Horizon));
    }

    #[test]
    fn single_round_single_sample_is_one_prediction() {
        let p = Scripted {
            probs: vec![vec![0.8]],
            round: Cell::new(0),
        };
        let cfg = InferConfig {
            samples: 1,
            max_rounds: 1,
            ..InferConfig::default()
        };
        let r = refine_with_seeds(&[0.0], &p, &cfg, vec![0]).unwrap();
        assert_eq!(r.diagnostics.stop_round, 1);
        assert_eq!(r.det_prob, 0.8);
        let h = crate::diffcore::kernels::bernoulli_entropy(0.8);
        assert_eq!(r.diagnostics.trajectories[0].scores[0], h);
    }

    #[test]
    fn global_min_selection() {
        // Round 0 best 0.95 (low entropy); round 1 worse, so the loop
        // breaks at round 1.
        let p = Scripted {
            probs: vec![vec![0.95, 0.6], vec![0.7, 0.8]],
            round: Cell::new(0),
        };
        let cfg = InferConfig {
            samples: 2,
            select: Select::GlobalMin,
            ..InferConfig::default()
        };
        let r = refine_with_seeds(&[0.0], &p, &cfg, vec![0, 1]).unwrap();
        assert_eq!(r.diagnostics.stop_round, 2);
        assert_eq!((r.diagnostics.selected_round, r.diagnostics.selected_trajectory), (0, 0));
        assert_eq!(r.det_prob, 0.95);
    }
}
