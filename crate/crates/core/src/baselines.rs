//! VisProd and label-embedding baselines, fitted per episode on the
//! support set over frozen backbone features.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compgraph::glorot;
use crate::dataset::Composition;
use crate::diffcore::{evaluate, value_and_gradient, Optimizer, ParamTree, ParamVars, Sgd, Tape, Tensor, TensorError, Var};
use crate::encoder::argmax_rows;
use crate::metalearn::{Context, MetaError};
use crate::sampler::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub le_hidden: usize,
    pub le_dim: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { iters: 100, batch_size: 4, lr: 1e-2, weight_decay: 1e-3, le_hidden: 64, le_dim: 32 }
    }
}

/// Minibatches of `batch` indices cycling over shuffled passes of `0..n`.
fn batches<R: Rng>(n: usize, batch: usize, iters: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    (0..iters)
        .map(|_| {
            (0..batch.min(n))
                .map(|_| {
                    if pos == n {
                        order.shuffle(rng);
                        pos = 0;
                    }
                    pos += 1;
                    order[pos - 1]
                })
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), c], data).expect("rows")
}

fn fit<F>(params: &mut ParamTree, cfg: &BaselineConfig, plan: &[Vec<usize>], f: F) -> Result<(), TensorError>
where
    F: Fn(&ParamTree, &[usize]) -> Result<(f64, ParamTree), TensorError>,
{
    let mut opt = Sgd { lr: cfg.lr, weight_decay: cfg.weight_decay };
    for b in plan {
        let (_, g) = f(params, b)?;
        opt.step(params, &g)?;
    }
    Ok(())
}

/// `P(c_ij) = P(p¹_i) · P(p²_j)`, row-major over the grid.
pub fn visprod_probabilities(p1: &[f64], p2: &[f64]) -> Vec<f64> {
    p1.iter().flat_map(|&a| p2.iter().map(move |&b| a * b)).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn head<T: crate::diffcore::Scalar>(t: &mut Tape<T>, p: &ParamVars, x: Var, k: usize) -> Result<Var, TensorError> {
    let z = t.matmul(x, p.get(&format!("vp.w{k}"))?)?;
    t.add_row(z, p.get(&format!("vp.b{k}"))?)
}

/// Two softmax heads, one per primitive kind, trained on the support set;
/// prediction is the argmax of the product distribution over the grid.
pub fn visprod_fit_infer<R: Rng>(ctx: &Context, episode: &Episode, cfg: &BaselineConfig, rng: &mut R) -> Result<Vec<Composition>, MetaError> {
    let (n1, n2) = (episode.p1.len(), episode.p2.len());
    let (sf, _) = ctx.support_batch(episode);
    let c = sf.shape()[1];
    let mut params = ParamTree::new();
    params.insert("vp.w1", glorot(c, n1, rng));
    params.insert("vp.b1", Tensor::zeros(&[n1]));
    params.insert("vp.w2", glorot(c, n2, rng));
    params.insert("vp.b2", Tensor::zeros(&[n2]));
    let labels: Vec<(usize, usize)> = episode
        .support
        .iter()
        .map(|&(_, comp)| {
            let k = episode.grid_index(comp).expect("support on grid");
            (k / n2, k % n2)
        })
        .collect();
    let plan = batches(labels.len(), cfg.batch_size, cfg.iters, rng);
    fit(&mut params, cfg, &plan, |params, b| {
        let mut t1 = Tensor::zeros(&[b.len(), n1]);
        let mut t2 = Tensor::zeros(&[b.len(), n2]);
        for (r, &i) in b.iter().enumerate() {
            t1.data_mut()[r * n1 + labels[i].0] = 1.0;
            t2.data_mut()[r * n2 + labels[i].1] = 1.0;
        }
        let scale = 1.0 / b.len() as f64;
        let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| {
            let z1 = head(t, p, x[0], 1)?;
            let z2 = head(t, p, x[0], 2)?;
            let l1 = t.softmax_xent(z1, &t1)?;
            let l2 = t.softmax_xent(z2, &t2)?;
            let l = t.add(l1, l2)?;
            Ok(t.scale(l, scale))
        };
        value_and_gradient(&f, params, &[rows(&sf, b)])
    })?;
    let (qf, _) = ctx.query_batch(episode);
    let logits = |k: usize| {
        let f = move |t: &mut Tape, p: &ParamVars, x: &[Var]| head(t, p, x[0], k);
        evaluate(&f, &params, std::slice::from_ref(&qf))
    };
    let (z1, z2) = (logits(1)?, logits(2)?);
    let probs: Vec<f64> = (0..qf.shape()[0]).flat_map(|r| visprod_probabilities(&softmax(z1.row(r)), &softmax(z2.row(r)))).collect();
    let probs = Tensor::new(vec![qf.shape()[0], n1 * n2], probs)?;
    Ok(argmax_rows(&probs).into_iter().map(|k| episode.grid_composition(k)).collect())
}

/// Averaged primitive embeddings of every grid cell, `[n1·n2, d_w]`.
fn pair_embeddings(ctx: &Context, episode: &Episode) -> Result<Tensor, MetaError> {
    let emb = |id: usize| ctx.provider.embedding_for(ctx.ds.primitive(id));
    let d = ctx.provider.dim();
    let mut data = Vec::with_capacity(episode.grid_size() * d);
    for &a in &episode.p1 {
        let ea = emb(a)?;
        for &b in &episode.p2 {
            let eb = emb(b)?;
            data.extend(ea.data().iter().zip(eb.data()).map(|(x, y)| (x + y) / 2.0));
        }
    }
    Ok(Tensor::new(vec![episode.grid_size(), d], data)?)
}

fn le_scores<T: crate::diffcore::Scalar>(t: &mut Tape<T>, p: &ParamVars, x: Var, pairs: Var) -> Result<Var, TensorError> {
    let h = t.matmul(x, p.get("le.w0")?)?;
    let h = t.add_row(h, p.get("le.b0")?)?;
    let h = t.relu(h);
    let img = t.matmul(h, p.get("le.w1")?)?;
    let img = t.add_row(img, p.get("le.b1")?)?;
    let comp = t.matmul(pairs, p.get("le.t")?)?;
    let b = t.shape(img)[0];
    let n = t.shape(comp)[0];
    let ii: Vec<usize> = (0..b * n).map(|r| r / n).collect();
    let ic: Vec<usize> = (0..b * n).map(|r| r % n).collect();
    let a = t.gather_rows(img, &ii)?;
    let c = t.gather_rows(comp, &ic)?;
    let s = t.row_dot(a, c)?;
    t.reshape(s, &[b, n])
}

/// Image MLP and a linear map of averaged primitive embeddings into a
/// shared space; score is their inner product.
pub fn le_fit_infer<R: Rng>(ctx: &Context, episode: &Episode, cfg: &BaselineConfig, rng: &mut R) -> Result<Vec<Composition>, MetaError> {
    let (sf, st) = ctx.support_batch(episode);
    let pairs = pair_embeddings(ctx, episode)?;
    let c = sf.shape()[1];
    let mut params = ParamTree::new();
    params.insert("le.w0", glorot(c, cfg.le_hidden, rng));
    params.insert("le.b0", Tensor::zeros(&[cfg.le_hidden]));
    params.insert("le.w1", glorot(cfg.le_hidden, cfg.le_dim, rng));
    params.insert("le.b1", Tensor::zeros(&[cfg.le_dim]));
    params.insert("le.t", glorot(ctx.provider.dim(), cfg.le_dim, rng));
    let plan = batches(st.shape()[0], cfg.batch_size, cfg.iters, rng);
    fit(&mut params, cfg, &plan, |params, b| {
        let targets = rows(&st, b);
        let scale = 1.0 / b.len() as f64;
        let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| {
            let s = le_scores(t, p, x[0], x[1])?;
            let l = t.softmax_xent(s, &targets)?;
            Ok(t.scale(l, scale))
        };
        value_and_gradient(&f, params, &[rows(&sf, b), pairs.clone()])
    })?;
    let (qf, _) = ctx.query_batch(episode);
    let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| le_scores(t, p, x[0], x[1]);
    let scores = evaluate(&f, &params, &[qf, pairs])?;
    Ok(argmax_rows(&scores).into_iter().map(|k| episode.grid_composition(k)).collect())
}
