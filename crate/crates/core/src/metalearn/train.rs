use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{infer_episode, outer_gradient, AdaptConfig, Context, GridLoss, MetaError, Model};
use crate::augment::{augment_query, MixupConfig};
use crate::dataset::{Dataset, Split};
use crate::diffcore::{evaluate, value_and_gradient, Adam, AdamState, Optimizer, ParamTree, Sgd, Tensor};
use crate::evaluator::{aggregate, EpisodeResult, MetricsReport};
use crate::sampler::{sample_episode, Episode, EpisodeConfig, SamplerError};
use crate::seeds::{derive_seed, indexed_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner step size ε.
    pub epsilon: f64,
    /// Outer step size γ.
    pub gamma: f64,
    pub inner_steps: usize,
    pub max_episodes: usize,
    pub weight_decay: f64,
    pub second_order: bool,
    pub optimizer: OptimizerKind,
    /// `false` trains jointly on support and augmented query at θ.
    pub bilevel: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    /// Validate every this many episodes; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.4,
            gamma: 1e-3,
            inner_steps: 1,
            max_episodes: 10_000,
            weight_decay: 5e-4,
            second_order: false,
            optimizer: OptimizerKind::Sgd,
            bilevel: true,
            mixup: true,
            mixup_alpha: 1.0,
            val_every: 500,
            val_episodes: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: &str| Err(MetaError::InvalidConfig(m.into()));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be a finite non-negative number");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be a finite non-negative number");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.mixup {
            MixupConfig { alpha: self.mixup_alpha }.validate()?;
        }
        Ok(())
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig { epsilon: self.epsilon, inner_steps: self.inner_steps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub episode: usize,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub val_hm: Option<f64>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6} {:.6}", self.episode, self.inner_loss, self.outer_loss)?;
        match self.val_hm {
            Some(h) => write!(f, " {h:.4}"),
            None => write!(f, " -"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub theta: ParamTree,
    pub val_hm: f64,
    pub episode: usize,
}

/// Everything needed to continue a run from episode `next_episode`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub next_episode: usize,
    pub theta: ParamTree,
    pub best: Option<Best>,
    pub adam: Option<AdamState>,
    pub log: Vec<LogEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
    pub best: Option<(f64, usize)>,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

/// Outer-loop optimizer state plus the per-episode update.
pub struct Trainer {
    cfg: TrainConfig,
    opt: Opt,
    layers: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, gcn_layers: usize) -> Result<Self, MetaError> {
        cfg.validate()?;
        let opt = match cfg.optimizer {
            OptimizerKind::Sgd => Opt::Sgd(Sgd { lr: cfg.gamma, weight_decay: cfg.weight_decay }),
            OptimizerKind::Adam => Opt::Adam(Adam::new(cfg.gamma, cfg.weight_decay)),
        };
        Ok(Self { cfg: *cfg, opt, layers: gcn_layers })
    }

    pub fn adam_state(&self) -> Option<AdamState> {
        match &self.opt {
            Opt::Adam(a) => a.state(),
            Opt::Sgd(_) => None,
        }
    }

    pub fn restore_adam(&mut self, state: AdamState) {
        if let Opt::Adam(a) = &mut self.opt {
            a.restore(state);
        }
    }

    /// Augmented query features and soft targets, or the plain query set
    /// when mixup is off.
    fn query_set<R: Rng>(&self, ctx: &Context, episode: &Episode, rng: &mut R) -> Result<(Tensor, Tensor), MetaError> {
        if !self.cfg.mixup {
            return Ok(ctx.query_batch(episode));
        }
        let mixed = augment_query(ctx.ds, episode, &MixupConfig { alpha: self.cfg.mixup_alpha }, rng)?;
        let images: Vec<&Tensor> = mixed.iter().map(|m| &m.image).collect();
        let feats = ctx.backbone.pooled(&images)?;
        let n = episode.grid_size();
        let mut targets = Tensor::zeros(&[mixed.len(), n]);
        for (r, m) in mixed.iter().enumerate() {
            targets.data_mut()[r * n..(r + 1) * n].copy_from_slice(m.label.data());
        }
        Ok((feats, targets))
    }

    /// One training episode: adapt on S, build Q̃, update θ from the loss on
    /// Q̃ at θ′. Returns `(support loss at θ, outer loss)`.
    pub fn outer_step<R: Rng>(
        &mut self,
        ctx: &Context,
        theta: &mut ParamTree,
        episode: &Episode,
        rng: &mut R,
    ) -> Result<(f64, f64), MetaError> {
        let (a_hat, v0) = ctx.graph_inputs(episode)?;
        let (n1, n2) = (episode.p1.len(), episode.p2.len());
        let (sf, st) = ctx.support_batch(episode);
        let (qf, qt) = self.query_set(ctx, episode, rng)?;
        let fs = GridLoss { targets: &st, n1, n2, gcn_layers: self.layers };
        let s_in = [a_hat.clone(), v0.clone(), sf];
        let (inner, outer, grad) = if self.cfg.bilevel {
            let fq = GridLoss { targets: &qt, n1, n2, gcn_layers: self.layers };
            let o = outer_gradient(&fs, &s_in, &fq, &[a_hat, v0, qf], theta, &self.cfg.adapt(), self.cfg.second_order)?;
            (o.inner_loss, o.outer_loss, o.grad)
        } else {
            let inner = evaluate(&fs, theta, &s_in)?.data()[0];
            let feats = concat_rows(&s_in[2], &qf);
            let targets = concat_rows(&st, &qt);
            let fj = GridLoss { targets: &targets, n1, n2, gcn_layers: self.layers };
            let (loss, g) = value_and_gradient(&fj, theta, &[a_hat, v0, feats])?;
            (inner, loss, g)
        };
        if !(inner.is_finite() && outer.is_finite() && grad.all_finite()) {
            return Err(MetaError::NonFinite("episode loss"));
        }
        match &mut self.opt {
            Opt::Sgd(o) => o.step(theta, &grad)?,
            Opt::Adam(o) => o.step(theta, &grad)?,
        }
        Ok((inner, outer))
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("matching columns")
}

/// `n` episodes from `split`, episode `k` drawn from its own stream.
pub fn sample_episodes(ds: &Dataset, split: Split, cfg: &EpisodeConfig, n: usize, seed: u64) -> Result<Vec<Episode>, SamplerError> {
    (0..n).map(|k| sample_episode(ds, split, cfg, &mut indexed_rng(seed, k))).collect()
}

/// Runs inference on every episode and aggregates the metrics.
pub fn evaluate_episodes(ctx: &Context, model: &Model, adapt: &AdaptConfig, episodes: &[Episode]) -> Result<MetricsReport, MetaError> {
    let results: Vec<EpisodeResult> = episodes
        .par_iter()
        .map(|e| -> Result<EpisodeResult, MetaError> { Ok(EpisodeResult::from_episode(e, &infer_episode(ctx, model, adapt, e)?)?) })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(&results)?)
}

pub fn train(ctx: &Context, model: Model, cfg: &TrainConfig, episodes: &EpisodeConfig) -> Result<TrainOutcome, MetaError> {
    train_resumable(ctx, model, cfg, episodes, None, |_| Ok(()))
}

/// Episodic training on the train split with validation-based checkpoint
/// selection. `on_checkpoint` sees the full state after every validation.
pub fn train_resumable(
    ctx: &Context,
    model: Model,
    cfg: &TrainConfig,
    episodes: &EpisodeConfig,
    resume: Option<TrainState>,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<(), MetaError>,
) -> Result<TrainOutcome, MetaError> {
    let mut trainer = Trainer::new(cfg, model.config.gcn.layers)?;
    let mut state = resume.unwrap_or_else(|| TrainState {
        next_episode: 0,
        theta: model.theta.clone(),
        best: None,
        adam: None,
        log: Vec::new(),
    });
    if let Some(a) = state.adam.take() {
        trainer.restore_adam(a);
    }
    let train_seed = derive_seed(cfg.seed, "train-episodes");
    let mix_seed = derive_seed(cfg.seed, "mixup");
    let validate = cfg.val_every > 0 && cfg.val_episodes >= 2 && !ctx.ds.compositions_in(Split::Val).is_empty();
    let val = if validate {
        sample_episodes(ctx.ds, Split::Val, episodes, cfg.val_episodes, derive_seed(cfg.seed, "val-episodes"))?
    } else {
        Vec::new()
    };
    let adapt = cfg.adapt();

    for t in state.next_episode..cfg.max_episodes {
        let ep = sample_episode(ctx.ds, Split::Train, episodes, &mut indexed_rng(train_seed, t))?;
        let (inner, outer) = trainer.outer_step(ctx, &mut state.theta, &ep, &mut indexed_rng(mix_seed, t))?;
        let mut entry = LogEntry { episode: t, inner_loss: inner, outer_loss: outer, val_hm: None };
        state.next_episode = t + 1;
        if validate && (t + 1) % cfg.val_every == 0 {
            let snapshot = Model { theta: state.theta.clone(), ..model.clone() };
            let hm = evaluate_episodes(ctx, &snapshot, &adapt, &val)?.hm;
            entry.val_hm = Some(hm);
            if state.best.as_ref().is_none_or(|b| hm > b.val_hm) {
                state.best = Some(Best { theta: state.theta.clone(), val_hm: hm, episode: t });
            }
            state.log.push(entry);
            state.adam = trainer.adam_state();
            on_checkpoint(&state)?;
            state.adam = None;
        } else {
            state.log.push(entry);
        }
    }

    let (theta, best) = match state.best {
        Some(b) => (b.theta, Some((b.val_hm, b.episode))),
        None => (state.theta, None),
    };
    Ok(TrainOutcome { model: Model { theta, ..model }, log: state.log, best })
}
