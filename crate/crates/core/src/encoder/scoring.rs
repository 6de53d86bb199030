//! Correlation-map gating, the embedding function E and compatibility
//! scores over the whole `P1 × P2` grid.
//!
//! The gate `m′` is constant over the spatial axes, so
//! `GAP(m′ ⊗ F) = m′ ⊙ GAP(F)`: everything after the frozen backbone only
//! needs the pooled feature vector of each image.

use rand::Rng;

use super::EncoderError;
use crate::compgraph::{gcn_tape, glorot, init_gcn, GcnConfig};
use crate::diffcore::{evaluate, ParamTree, ParamVars, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_w: usize,
    pub gcn: GcnConfig,
    pub channels: usize,
    pub corr_hidden: usize,
    pub embed_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_w: 32, gcn: GcnConfig::default(), channels: 32, corr_hidden: 32, embed_hidden: 64 }
    }
}

fn init_mlp2<R: Rng>(t: &mut ParamTree, prefix: &str, dims: [usize; 3], rng: &mut R) {
    t.insert(format!("{prefix}.w0"), glorot(dims[0], dims[1], rng));
    t.insert(format!("{prefix}.b0"), Tensor::zeros(&[dims[1]]));
    t.insert(format!("{prefix}.w1"), glorot(dims[1], dims[2], rng));
    t.insert(format!("{prefix}.b1"), Tensor::zeros(&[dims[2]]));
}

/// Trainable parameters: `gcn.*`, `corr1.*`, `corr2.*`, `embed.*`.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamTree {
    let mut t = init_gcn(&cfg.gcn, cfg.d_w, rng);
    let d = cfg.gcn.out;
    init_mlp2(&mut t, "corr1", [cfg.channels + d, cfg.corr_hidden, cfg.channels], rng);
    init_mlp2(&mut t, "corr2", [cfg.channels + d, cfg.corr_hidden, cfg.channels], rng);
    init_mlp2(&mut t, "embed", [cfg.channels, cfg.embed_hidden, d], rng);
    t
}

/// `ReLU(x W0 + b0) W1 + b1`.
pub fn mlp2_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ParamVars, prefix: &str) -> Result<Var, TensorError> {
    let h = tape.matmul(x, p.get(&format!("{prefix}.w0"))?)?;
    let h = tape.add_row(h, p.get(&format!("{prefix}.b0"))?)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.get(&format!("{prefix}.w1"))?)?;
    tape.add_row(o, p.get(&format!("{prefix}.b1"))?)
}

/// Gates `[R, c]` from pooled features and primitive-node embeddings:
/// row `r` uses `feats[fb[r]]`, `v[i1[r]]` for `M¹` and `v[i2[r]]` for `M²`.
fn gates<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    feats: Var,
    v: Var,
    fb: &[usize],
    i1: &[usize],
    i2: &[usize],
) -> Result<Var, TensorError> {
    let g = tape.gather_rows(feats, fb)?;
    let v1 = tape.gather_rows(v, i1)?;
    let x1 = tape.concat_cols(g, v1)?;
    let m1 = mlp2_tape(tape, x1, p, "corr1")?;
    let v2 = tape.gather_rows(v, i2)?;
    let x2 = tape.concat_cols(g, v2)?;
    let m2 = mlp2_tape(tape, x2, p, "corr2")?;
    let s = tape.add(m1, m2)?;
    Ok(tape.sigmoid(s))
}

/// Scores `[B, n1·n2]` for pooled features `[B, c]`, given the normalized
/// adjacency and initial node features of the episode graph.
pub fn score_tape<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    a_hat: Var,
    v0: Var,
    feats: Var,
    n1: usize,
    n2: usize,
    gcn_layers: usize,
) -> Result<Var, TensorError> {
    let v = gcn_tape(tape, a_hat, v0, p, gcn_layers)?;
    score_from_nodes(tape, p, v, feats, n1, n2)
}

/// Scoring from already-propagated node embeddings `v: [H, d]`.
pub fn score_from_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    v: Var,
    feats: Var,
    n1: usize,
    n2: usize,
) -> Result<Var, TensorError> {
    let (b, _) = tape.value(feats).dims2("score")?;
    let n = n1 * n2;
    let mut fb = Vec::with_capacity(b * n);
    let mut i1 = Vec::with_capacity(b * n);
    let mut i2 = Vec::with_capacity(b * n);
    let mut ic = Vec::with_capacity(b * n);
    for r in 0..b {
        for i in 0..n1 {
            for j in 0..n2 {
                fb.push(r);
                i1.push(i);
                i2.push(n1 + j);
                ic.push(n1 + n2 + i * n2 + j);
            }
        }
    }
    let m = gates(tape, p, feats, v, &fb, &i1, &i2)?;
    let g = tape.gather_rows(feats, &fb)?;
    let gated = tape.mul(m, g)?;
    let e = mlp2_tape(tape, gated, p, "embed")?;
    let vc = tape.gather_rows(v, &ic)?;
    let s = tape.row_dot(e, vc)?;
    tape.reshape(s, &[b, n])
}

/// Mean soft cross-entropy of `scores: [B, N]` against `targets: [B, N]`.
pub fn batch_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, targets: &Tensor) -> Result<Var, TensorError> {
    let b = tape.shape(scores)[0].max(1);
    let total = tape.softmax_xent(scores, targets)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `m′ = σ(M¹([GAP(F); v_p1]) + M²([GAP(F); v_p2]))` for one feature map.
pub fn correlation_map(f: &Tensor, v_p1: &Tensor, v_p2: &Tensor, params: &ParamTree) -> Result<Tensor, EncoderError> {
    let s = f.shape().to_vec();
    if s.len() != 3 {
        return Err(TensorError::Rank { op: "correlation_map", expected: 3, shape: s }.into());
    }
    if v_p1.shape() != v_p2.shape() {
        return Err(TensorError::ShapeMismatch { op: "correlation_map", left: v_p1.shape().to_vec(), right: v_p2.shape().to_vec() }.into());
    }
    let d = v_p1.numel();
    let fm = f.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut nodes = v_p1.data().to_vec();
    nodes.extend_from_slice(v_p2.data());
    let v = Tensor::new(vec![2, d], nodes)?;
    let func = |t: &mut Tape, p: &ParamVars, x: &[Var]| {
        let g = t.gap(x[0])?;
        gates(t, p, g, x[1], &[0], &[0], &[1])
    };
    let out = evaluate(&func, params, &[fm, v])?;
    Ok(out.reshape(&[s[0]])?)
}

/// Scores over all `n1·n2` pairs for pooled features `[B, c]` and
/// propagated node embeddings `[H, d]`.
pub fn score_all(feats: &Tensor, nodes: &Tensor, n1: usize, n2: usize, params: &ParamTree) -> Result<Tensor, EncoderError> {
    let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| score_from_nodes(t, p, x[1], x[0], n1, n2);
    Ok(evaluate(&f, params, &[feats.clone(), nodes.clone()])?)
}

/// `-Σ_i target_i log softmax(scores)_i`; `target` must be a distribution.
pub fn episode_loss(scores: &Tensor, target: &Tensor) -> Result<f64, EncoderError> {
    if scores.shape() != target.shape() || scores.ndim() != 1 {
        return Err(TensorError::ShapeMismatch { op: "episode_loss", left: scores.shape().to_vec(), right: target.shape().to_vec() }.into());
    }
    let sum: f64 = target.data().iter().sum();
    if target.data().iter().any(|&t| !(t >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(EncoderError::InvalidDistribution(format!("target entries must be non-negative and sum to 1, got sum {sum}")));
    }
    let n = scores.numel();
    let f = |t: &mut Tape, _: &ParamVars, x: &[Var]| {
        let s = t.reshape(x[0], &[1, n])?;
        t.softmax_xent(s, &target.clone().reshape(&[1, n])?)
    };
    Ok(evaluate(&f, &ParamTree::new(), &[scores.clone()])?.data()[0])
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let n = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
