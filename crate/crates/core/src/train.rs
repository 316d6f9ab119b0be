//! Offline imitation (warm-up, expert-conditioned) followed by online
//! refinement on the policy's own rollouts.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{Episode, Label};
use crate::diffcore::{clip_grad_norm, AdamW, CosineSchedule, Graph, LearningRates};
use crate::error::{Error, Result};
use crate::model::{ConditioningContext, Model, ModelConfig, PrevDetection, TaskPrompt, TokenId, TrainItem, Vocab, EOS};
use crate::refine::{self, InferConfig};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    MultitaskOnly,
    RefinementOnly,
    OfflineOnly,
    OnlineOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::MultitaskOnly,
        Ablation::RefinementOnly,
        Ablation::OfflineOnly,
        Ablation::OnlineOnly,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::MultitaskOnly => "multitask_only",
            Ablation::RefinementOnly => "refinement_only",
            Ablation::OfflineOnly => "offline_only",
            Ablation::OnlineOnly => "online_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }

    /// Epochs per stage. Dropped stages hand their epochs to the remaining
    /// ones so every variant trains for the same total.
    pub fn plan(self, offline_epochs: usize, online_epochs: usize) -> StagePlan {
        let total = 2 * offline_epochs + online_epochs;
        match self {
            Ablation::Full => StagePlan {
                warmup: offline_epochs,
                expert: offline_epochs,
                online: online_epochs,
            },
            Ablation::MultitaskOnly | Ablation::RefinementOnly => StagePlan {
                warmup: total,
                expert: 0,
                online: 0,
            },
            Ablation::OfflineOnly => {
                let expert = total / 2;
                StagePlan {
                    warmup: total - expert,
                    expert,
                    online: 0,
                }
            }
            Ablation::OnlineOnly => StagePlan {
                warmup: 0,
                expert: 0,
                online: total,
            },
        }
    }

    /// Inference settings for the variant: the multitask baseline answers
    /// in a single round from a single sample.
    pub fn infer_config(self, base: &InferConfig) -> InferConfig {
        match self {
            Ablation::MultitaskOnly => InferConfig {
                samples: 1,
                max_rounds: 1,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub warmup: usize,
    pub expert: usize,
    pub online: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub offline_epochs: usize,
    pub online_epochs: usize,
    /// Rollout horizon `T` of the online stage.
    pub horizon: usize,
    pub batch_size: usize,
    pub lr_heads: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    /// Sampling temperature of training rollouts.
    pub rollout_temperature: f64,
    /// How many times each dense episode appears per online epoch.
    pub dense_oversample: usize,
    /// Expert-conditioned stage: supervise only the masked task.
    pub masked_task_loss_only: bool,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            offline_epochs: 3,
            online_epochs: 10,
            horizon: 3,
            batch_size: 64,
            lr_heads: 1e-3,
            lr_encoder: 2e-4,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            grad_clip: 1.0,
            rollout_temperature: 1.0,
            dense_oversample: 2,
            masked_task_loss_only: false,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.lr_heads > 0.0 && self.lr_encoder >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("weight_decay must be ≥ 0 and warmup_ratio in [0,1]");
        }
        if !(self.grad_clip > 0.0) || !(self.rollout_temperature >= 0.0) {
            return bad("grad_clip must be positive and rollout_temperature ≥ 0");
        }
        if self.dense_oversample == 0 {
            return bad("dense_oversample must be at least 1");
        }
        Ok(())
    }

    pub fn plan(&self) -> StagePlan {
        self.ablation.plan(self.offline_epochs, self.online_epochs)
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            heads: self.lr_heads,
            encoder: self.lr_encoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Expert,
    Online,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Expert => "expert",
            Phase::Online => "online",
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub phase: Phase,
    pub round: usize,
    /// Mean BCE over the batch at this round.
    pub loss_bce: f64,
    /// Mean NTP over the dense samples; absent when the batch has none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ntp: Option<f64>,
    pub lr: f64,
    pub dense_fraction: f64,
}

/// Loss terms of one sample at one round, with the weights that entered
/// the optimised objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub episode_id: String,
    pub round: usize,
    pub dense: bool,
    pub bce: f64,
    pub bce_weight: f64,
    /// Mean token NLL; 0 when the sample has no reasoning.
    pub ntp: f64,
    pub ntp_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub records: Vec<TrainRecord>,
    pub samples: Vec<SampleLoss>,
}

/// Episode prepared for training: flattened frames and the EOS-terminated
/// reasoning target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub episode_id: String,
    pub frames: Vec<f64>,
    pub label: Label,
    pub target: Option<Vec<TokenId>>,
    /// Reasoning ids without EOS, for conditioning.
    pub reasoning: Option<Vec<TokenId>>,
}

impl Example {
    pub fn from_episode(ep: &Episode, vocab: &Vocab) -> Result<Self> {
        let reasoning = ep.reasoning.as_ref().map(|r| vocab.encode(r)).transpose()?;
        Ok(Self {
            episode_id: ep.episode_id.clone(),
            frames: ep.frames_flat(),
            label: ep.label,
            target: reasoning.as_ref().map(|r| {
                let mut t = r.clone();
                t.push(EOS);
                t
            }),
            reasoning,
        })
    }

    pub fn is_dense(&self) -> bool {
        self.target.is_some()
    }
}

/// One supervised unit: an example under a fixed context.
struct Unit<'a> {
    ex: &'a Example,
    ctx: ConditioningContext,
    round: usize,
    bce_on: bool,
    ntp_on: bool,
}

/// Which ground-truth input the expert-conditioned stage hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedTask {
    Detect,
    Reason,
}

/// Uniform choice of the task to mask.
pub fn sample_masked_task(rng: &mut Rng) -> MaskedTask {
    if rng.random::<bool>() {
        MaskedTask::Detect
    } else {
        MaskedTask::Reason
    }
}

/// Expert context with the selected task's ground truth removed.
pub fn expert_context(ex: &Example, masked: MaskedTask) -> Result<ConditioningContext> {
    let reasoning = ex
        .reasoning
        .clone()
        .ok_or_else(|| Error::Precondition(format!("`{}` has no reasoning", ex.episode_id)))?;
    Ok(match masked {
        MaskedTask::Detect => ConditioningContext {
            prev_detection: PrevDetection::None,
            prev_reasoning: Some(reasoning),
            task_prompt: TaskPrompt::Both,
        },
        MaskedTask::Reason => ConditioningContext {
            prev_detection: ex.label.into(),
            prev_reasoning: None,
            task_prompt: TaskPrompt::Both,
        },
    })
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: AdamW,
    schedule: CosineSchedule,
    step: usize,
    dropout: Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let dropout = rng::stream(cfg.seed, &[0xD0]);
        Ok(Self {
            model,
            schedule: CosineSchedule::new(total_steps, cfg.warmup_ratio),
            cfg,
            opt: AdamW::default(),
            step: 0,
            dropout,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn current_lr(&self) -> LearningRates {
        self.cfg.learning_rates().scaled(self.schedule.factor(self.step))
    }

    /// Builds the loss over `units`, normalised by `batch` episodes,
    /// backpropagates and applies one optimiser update.
    fn update(&mut self, units: &[Unit<'_>], batch: usize, phase: Phase) -> Result<StepReport> {
        let (loss, samples) = objective(&self.model, units, batch, Some(&mut self.dropout))?;
        let grads = loss.graph.backward(loss.var)?;
        grads.accumulate_into(self.model.store_mut());
        let grad_norm = clip_grad_norm(self.model.store_mut(), self.cfg.grad_clip);
        let lr = self.current_lr();
        self.opt.step(self.model.store_mut(), &lr, self.cfg.weight_decay)?;
        let records = summarise(&samples, self.step, phase, lr.heads);
        self.step += 1;
        Ok(StepReport {
            loss: loss.value,
            grad_norm,
            records,
            samples,
        })
    }

    /// Unconditioned round-0 supervision on sparse and dense episodes.
    pub fn warmup_step(&mut self, batch: &[&Example]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let units: Vec<Unit<'_>> = batch
            .iter()
            .map(|ex| Unit {
                ex,
                ctx: ConditioningContext::initial(),
                round: 0,
                bce_on: true,
                ntp_on: ex.is_dense(),
            })
            .collect();
        self.update(&units, batch.len(), Phase::Warmup)
    }

    /// Ground-truth conditioned supervision with one task masked per sample.
    pub fn expert_conditioned_step(&mut self, batch: &[&Example], rng: &mut Rng) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let mut units = Vec::with_capacity(batch.len());
        for ex in batch {
            if !ex.is_dense() {
                return Err(Error::Precondition(format!(
                    "expert-conditioned stage needs dense episodes, `{}` is sparse",
                    ex.episode_id
                )));
            }
            let masked = sample_masked_task(rng);
            let only = self.cfg.masked_task_loss_only;
            units.push(Unit {
                ex,
                ctx: expert_context(ex, masked)?,
                round: 0,
                bce_on: !only || masked == MaskedTask::Detect,
                ntp_on: !only || masked == MaskedTask::Reason,
            });
        }
        self.update(&units, batch.len(), Phase::Expert)
    }

    /// Rolls out `T` rounds with the current policy, then supervises every
    /// round under its recorded context in a single update.
    pub fn online_step(&mut self, batch: &[&Example], rng: &mut Rng) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let frames: Vec<&[f64]> = batch.iter().map(|e| e.frames.as_slice()).collect();
        let mut rngs: Vec<Rng> = batch.iter().map(|_| rng::stream(rng.random(), &[])).collect();
        let rollouts = refine::rollout_batch(
            &frames,
            &self.model,
            self.cfg.horizon,
            self.cfg.rollout_temperature,
            &mut rngs,
        )?;
        let units = online_units(batch, rollouts.into_iter().map(|r| r.into_iter().map(|(c, _)| c).collect()).collect());
        self.update(&units, batch.len(), Phase::Online)
    }
}

/// Units of an online step from recorded per-round contexts.
fn online_units<'a>(batch: &[&'a Example], contexts: Vec<Vec<ConditioningContext>>) -> Vec<Unit<'a>> {
    let mut units = Vec::new();
    for (ex, ctxs) in batch.iter().zip(contexts) {
        for (round, ctx) in ctxs.into_iter().enumerate() {
            units.push(Unit {
                ex,
                ctx,
                round,
                bce_on: true,
                ntp_on: ex.is_dense(),
            });
        }
    }
    units
}

struct Objective {
    graph: Graph,
    var: crate::diffcore::Var,
    value: f64,
}

/// Recomputes the differentiable objective for fixed contexts and returns
/// it together with its per-sample decomposition.
fn objective(
    model: &Model,
    units: &[Unit<'_>],
    batch: usize,
    dropout: Option<&mut Rng>,
) -> Result<(Objective, Vec<SampleLoss>)> {
    let inv_b = 1.0 / batch as f64;
    let items: Vec<TrainItem<'_>> = units
        .iter()
        .map(|u| TrainItem {
            frames: &u.ex.frames,
            ctx: &u.ctx,
            target: if u.ntp_on { u.ex.target.as_deref() } else { None },
        })
        .collect();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &items, dropout)?;
    let mut samples: Vec<SampleLoss> = units
        .iter()
        .map(|u| SampleLoss {
            episode_id: u.ex.episode_id.clone(),
            round: u.round,
            dense: u.ex.is_dense(),
            bce: 0.0,
            bce_weight: if u.bce_on { inv_b } else { 0.0 },
            ntp: 0.0,
            ntp_weight: if u.ntp_on && u.ex.is_dense() { inv_b } else { 0.0 },
        })
        .collect();
    let probs = g.value(out.det_prob).data().to_vec();
    let targets: Vec<f64> = units.iter().map(|u| u.ex.label.target()).collect();
    let bce_w: Vec<f64> = samples.iter().map(|s| s.bce_weight).collect();
    for (s, (&p, &y)) in samples.iter_mut().zip(probs.iter().zip(&targets)) {
        s.bce = crate::diffcore::losses::bce(p, y);
    }
    let mut loss = g.bce(out.det_prob, &targets, &bce_w)?;
    if let Some(tp) = out.token_probs {
        let mut row_w = vec![0.0; out.targets.len()];
        let tv = g.value(tp);
        for (s, rows) in samples.iter_mut().zip(&out.target_rows) {
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            s.ntp = rows
                .clone()
                .map(|r| -tv.row(r)[out.targets[r]].max(1e-12).ln())
                .sum::<f64>()
                / n;
            for r in rows.clone() {
                row_w[r] = s.ntp_weight / n;
            }
        }
        let ntp = g.nll(tp, &out.targets, &row_w)?;
        loss = g.add(loss, ntp)?;
    }
    let value = g.value(loss).data()[0];
    Ok((Objective { graph: g, var: loss, value }, samples))
}

fn summarise(samples: &[SampleLoss], step: usize, phase: Phase, lr: f64) -> Vec<TrainRecord> {
    let rounds = samples.iter().map(|s| s.round).max().map_or(0, |r| r + 1);
    (0..rounds)
        .map(|r| {
            let at: Vec<&SampleLoss> = samples.iter().filter(|s| s.round == r).collect();
            let n = at.len() as f64;
            let dense: Vec<&&SampleLoss> = at.iter().filter(|s| s.ntp_weight > 0.0).collect();
            TrainRecord {
                step,
                phase,
                round: r,
                loss_bce: at.iter().map(|s| s.bce).sum::<f64>() / n,
                loss_ntp: (!dense.is_empty())
                    .then(|| dense.iter().map(|s| s.ntp).sum::<f64>() / dense.len() as f64),
                lr,
                dense_fraction: at.iter().filter(|s| s.dense).count() as f64 / n,
            }
        })
        .collect()
}

/// Objective value and per-sample decomposition for one warm-up batch,
/// without updating anything (dropout off).
pub fn warmup_losses(model: &Model, batch: &[&Example]) -> Result<(f64, Vec<SampleLoss>)> {
    let units: Vec<Unit<'_>> = batch
        .iter()
        .map(|ex| Unit {
            ex,
            ctx: ConditioningContext::initial(),
            round: 0,
            bce_on: true,
            ntp_on: ex.is_dense(),
        })
        .collect();
    let (o, s) = objective(model, &units, batch.len(), None)?;
    Ok((o.value, s))
}

/// Objective, decomposition and parameter gradients of an online batch
/// under recorded contexts (`contexts[i][round]`), dropout off.
pub fn online_gradients(
    model: &Model,
    batch: &[&Example],
    contexts: Vec<Vec<ConditioningContext>>,
) -> Result<(f64, Vec<SampleLoss>, Vec<Vec<f64>>)> {
    let units = online_units(batch, contexts);
    let (o, s) = objective(model, &units, batch.len(), None)?;
    let grads = o.graph.backward(o.var)?;
    let mut store = model.store().clone();
    store.zero_grad();
    grads.accumulate_into(&mut store);
    let g = store.ids().map(|id| store.grad(id).to_vec()).collect();
    Ok((o.value, s, g))
}

/// Training data prepared once per run.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub sparse: Vec<Example>,
    pub dense: Vec<Example>,
}

impl TrainSet {
    pub fn new(sparse: &[Episode], dense: &[Episode]) -> Result<Self> {
        let v = Vocab::standard();
        Ok(Self {
            sparse: sparse.iter().map(|e| Example::from_episode(e, v)).collect::<Result<_>>()?,
            dense: dense.iter().map(|e| Example::from_episode(e, v)).collect::<Result<_>>()?,
        })
    }

    fn union(&self, dense_copies: usize) -> Vec<&Example> {
        let mut all: Vec<&Example> = self.sparse.iter().collect();
        for _ in 0..dense_copies {
            all.extend(self.dense.iter());
        }
        all
    }
}

fn batches(n: usize, bs: usize) -> usize {
    n.div_ceil(bs)
}

/// Optimiser steps a plan will take on `data`.
pub fn total_steps(cfg: &TrainConfig, data: &TrainSet) -> usize {
    let p = cfg.plan();
    let bs = cfg.batch_size;
    p.warmup * batches(data.sparse.len() + data.dense.len(), bs)
        + p.expert * batches(data.dense.len(), bs)
        + p.online * batches(data.sparse.len() + cfg.dense_oversample * data.dense.len(), bs)
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

/// Runs every stage of the configured variant. When `out_dir` is given,
/// writes `checkpoint-<stage>.bin` at each stage boundary, `model.bin` at
/// the end and the log as `train_log.jsonl`.
pub fn run_training(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.sparse.is_empty() && data.dense.is_empty() {
        return Err(Error::Precondition("no training data".into()));
    }
    if data.sparse.iter().any(Example::is_dense) || data.dense.iter().any(|e| !e.is_dense()) {
        return Err(Error::Precondition("sparse/dense split mismatch".into()));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let plan = cfg.plan();
    let model = Model::new(model_cfg.clone(), rng::derive_seed(cfg.seed, &[0x10]))?;
    let mut trainer = Trainer::new(model, cfg.clone(), total_steps(cfg, data))?;
    let mut log = Vec::new();
    let bs = cfg.batch_size;

    let checkpoint = |trainer: &Trainer, name: &str| -> Result<()> {
        if let Some(d) = out_dir {
            trainer.model().save(&d.join(format!("checkpoint-{name}.bin")))?;
        }
        Ok(())
    };

    let mut run_stage = |trainer: &mut Trainer, phase: Phase, epochs: usize, pool: Vec<&Example>| -> Result<()> {
        let stage = phase as u64;
        let mut task_rng = rng::stream(cfg.seed, &[0x5A, stage]);
        for epoch in 0..epochs {
            let mut order = pool.clone();
            order.shuffle(&mut rng::stream(cfg.seed, &[0x5B, stage, epoch as u64]));
            for chunk in order.chunks(bs) {
                let report = match phase {
                    Phase::Warmup => trainer.warmup_step(chunk)?,
                    Phase::Expert => trainer.expert_conditioned_step(chunk, &mut task_rng)?,
                    Phase::Online => trainer.online_step(chunk, &mut task_rng)?,
                };
                log.extend(report.records);
            }
        }
        Ok(())
    };

    if plan.warmup > 0 {
        run_stage(&mut trainer, Phase::Warmup, plan.warmup, data.union(1))?;
        checkpoint(&trainer, "warmup")?;
    }
    if plan.expert > 0 {
        run_stage(&mut trainer, Phase::Expert, plan.expert, data.dense.iter().collect())?;
        checkpoint(&trainer, "expert")?;
    }
    if plan.online > 0 {
        run_stage(&mut trainer, Phase::Online, plan.online, data.union(cfg.dense_oversample))?;
        checkpoint(&trainer, "online")?;
    }
    if let Some(d) = out_dir {
        trainer.model().save(&d.join("model.bin"))?;
        write_log(&log, &d.join("train_log.jsonl"))?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}

pub fn write_log(log: &[TrainRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in log {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
