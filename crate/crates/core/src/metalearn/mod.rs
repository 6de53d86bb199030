//! Backbone pretraining, bi-level episodic training and test-time
//! adaptation.

mod bilevel;
mod pretrain;
mod train;

pub use bilevel::{infer_episode, inner_adapt, outer_gradient, Adapted, OuterGradient};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainLog};
pub use train::{
    evaluate_episodes, sample_episodes, train, train_resumable, Best, LogEntry, OptimizerKind, TrainConfig, TrainOutcome,
    TrainState, Trainer,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::compgraph::build_graph;
use crate::dataset::{Dataset, DatasetError, EmbeddingProvider, Primitive};
use crate::diffcore::{ParamTree, ParamVars, Scalar, Tape, TapeFunction, Tensor, TensorError, Var};
use crate::encoder::{batch_loss, score_tape, Backbone, EncoderError, ModelConfig};
use crate::evaluator::EvalError;
use crate::sampler::{Episode, SamplerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {0} during training")]
    NonFinite(&'static str),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Trainable `θ = {θ_G, θ_M, θ_E}` alongside the frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub theta: ParamTree,
    pub backbone: Backbone,
    pub config: ModelConfig,
    pub embedding_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub epsilon: f64,
    pub inner_steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { epsilon: 0.4, inner_steps: 1 }
    }
}

/// Per-dataset state shared by every episode: embeddings and the pooled
/// backbone features of all samples.
#[derive(Clone, Debug)]
pub struct Context<'a> {
    pub ds: &'a Dataset,
    pub provider: EmbeddingProvider,
    pub backbone: Backbone,
    features: Tensor,
}

impl<'a> Context<'a> {
    pub fn new(ds: &'a Dataset, backbone: &Backbone, d_w: usize, embedding_seed: u64) -> Result<Self, MetaError> {
        let provider = EmbeddingProvider::for_dataset(ds, d_w, embedding_seed)?;
        let images: Vec<&Tensor> = ds.samples().iter().map(|s| &s.image).collect();
        let features = backbone.pooled(&images)?;
        Ok(Self { ds, provider, backbone: backbone.clone(), features })
    }

    pub fn for_model(ds: &'a Dataset, model: &Model) -> Result<Self, MetaError> {
        Self::new(ds, &model.backbone, model.config.d_w, model.embedding_seed)
    }

    /// Cached pooled features `[n, c]` of the given sample indices.
    pub fn features_of(&self, samples: &[usize]) -> Tensor {
        let c = self.features.shape()[1];
        let mut data = Vec::with_capacity(samples.len() * c);
        for &s in samples {
            data.extend_from_slice(self.features.row(s));
        }
        Tensor::new(vec![samples.len(), c], data).expect("feature rows")
    }

    /// Normalized adjacency and initial node features of the episode graph.
    pub fn graph_inputs(&self, episode: &Episode) -> Result<(Tensor, Tensor), MetaError> {
        let prims = |ids: &[usize]| -> Vec<Primitive> { ids.iter().map(|&i| self.ds.primitive(i).clone()).collect() };
        let g = build_graph(&prims(&episode.p1), &prims(&episode.p2), &self.provider)?;
        Ok((g.normalized_adjacency(), g.features))
    }

    /// Support features and one-hot grid targets.
    pub fn support_batch(&self, episode: &Episode) -> (Tensor, Tensor) {
        labelled_batch(self, episode, &episode.support)
    }

    /// Query features and one-hot grid targets.
    pub fn query_batch(&self, episode: &Episode) -> (Tensor, Tensor) {
        labelled_batch(self, episode, &episode.query)
    }
}

fn labelled_batch(ctx: &Context, episode: &Episode, items: &[(usize, crate::dataset::Composition)]) -> (Tensor, Tensor) {
    let idx: Vec<usize> = items.iter().map(|&(s, _)| s).collect();
    let n = episode.grid_size();
    let mut targets = Tensor::zeros(&[items.len(), n]);
    for (r, &(_, c)) in items.iter().enumerate() {
        let k = episode.grid_index(c).expect("episode composition on grid");
        targets.data_mut()[r * n + k] = 1.0;
    }
    (ctx.features_of(&idx), targets)
}

/// Mean cross-entropy over a batch of pooled features against soft grid
/// targets. Inputs: `[Â, V0, feats]`.
#[derive(Clone, Copy, Debug)]
pub struct GridLoss<'a> {
    pub targets: &'a Tensor,
    pub n1: usize,
    pub n2: usize,
    pub gcn_layers: usize,
}

impl<T: Scalar> TapeFunction<T> for GridLoss<'_> {
    fn forward(&self, tape: &mut Tape<T>, params: &ParamVars, inputs: &[Var]) -> Result<Var, TensorError> {
        let s = score_tape(tape, params, inputs[0], inputs[1], inputs[2], self.n1, self.n2, self.gcn_layers)?;
        batch_loss(tape, s, self.targets)
    }
}
