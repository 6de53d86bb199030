use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetaError;
use crate::compgraph::glorot;
use crate::dataset::{Dataset, Split};
use crate::diffcore::{evaluate, value_and_gradient, Adam, Optimizer, ParamTree, ParamVars, Tape, Tensor, TensorError, Var};
use crate::encoder::{argmax_rows, Backbone};
use crate::sampler::SamplerError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 128, lr: 1e-3, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub n_classes: usize,
}

const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

fn logits(backbone: &Backbone, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var, TensorError> {
    let f = backbone.forward_tape(t, p, x)?;
    let g = t.gap(f)?;
    let z = t.matmul(g, p.get(HEAD_W)?)?;
    t.add_row(z, p.get(HEAD_B)?)
}

fn stack(ds: &Dataset, idx: &[usize]) -> Tensor {
    let [c, h, w] = ds.image_shape();
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        data.extend_from_slice(ds.sample(i).image.data());
    }
    Tensor::new(vec![idx.len(), c, h, w], data).expect("image batch")
}

/// Trains the Conv-4 backbone with a softmax head over every composition of
/// `split` (head on pooled features), then drops the head and freezes it.
pub fn pretrain_backbone<R: Rng>(
    ds: &Dataset,
    split: Split,
    channels: &[usize],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<(Backbone, PretrainLog), MetaError> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(MetaError::InvalidConfig("pretraining needs batch_size ≥ 1 and lr > 0".into()));
    }
    let classes = ds.compositions_in(split);
    let samples = ds.samples_in(split);
    if classes.is_empty() || samples.is_empty() {
        return Err(SamplerError::EmptySplit(split).into());
    }
    let class_of: HashMap<_, usize> = classes.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let label = |i: usize| class_of[&ds.sample(i).label];
    let k = classes.len();

    let init = Backbone::init(channels, rng);
    let mut params = init.params().clone();
    params.insert(HEAD_W, glorot(init.out_channels(), k, rng));
    params.insert(HEAD_B, Tensor::zeros(&[k]));
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);

    let mut order = samples.clone();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut targets = Tensor::zeros(&[batch.len(), k]);
            for (r, &i) in batch.iter().enumerate() {
                targets.data_mut()[r * k + label(i)] = 1.0;
            }
            let b = batch.len() as f64;
            let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| {
                let z = logits(&init, t, p, x[0])?;
                let l = t.softmax_xent(z, &targets)?;
                Ok(t.scale(l, 1.0 / b))
            };
            let (loss, g) = value_and_gradient(&f, &params, &[stack(ds, batch)])?;
            if !loss.is_finite() {
                return Err(MetaError::NonFinite("pretraining loss"));
            }
            total += loss * b;
            opt.step(&mut params, &g)?;
        }
        epoch_loss.push(total / samples.len() as f64);
    }

    let mut correct = 0;
    for batch in samples.chunks(256) {
        let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| logits(&init, t, p, x[0]);
        let z = evaluate(&f, &params, &[stack(ds, batch)])?;
        correct += argmax_rows(&z).iter().zip(batch).filter(|&(&p, &i)| p == label(i)).count();
    }
    let backbone_params: ParamTree = params.iter().filter(|(n, _)| !n.starts_with("head.")).map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut backbone = Backbone::from_params(backbone_params, true)?;
    let images: Vec<&Tensor> = samples.iter().map(|&i| &ds.sample(i).image).collect();
    backbone.calibrate(&images)?;
    let log = PretrainLog { epoch_loss, train_accuracy: correct as f64 / samples.len() as f64, n_classes: k };
    Ok((backbone, log))
}
