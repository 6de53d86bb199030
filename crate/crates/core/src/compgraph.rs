//! Per-episode compositional graph and GCN propagation.
//!
//! Node order: the `|P1|` type-1 primitives, the `|P2|` type-2 primitives,
//! then every pair `(P1[i], P2[j])` at `|P1| + |P2| + i·|P2| + j`. Each
//! pair and its two primitives form a triangle; every node has a self-loop.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DatasetError, EmbeddingProvider, Primitive};
use crate::diffcore::{evaluate, ParamTree, ParamVars, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CompGraph {
    pub n1: usize,
    pub n2: usize,
    /// Binary symmetric adjacency with self-loops, `[H, H]`.
    pub adjacency: Tensor,
    /// Initial node features, `[H, d_w]`.
    pub features: Tensor,
}

impl CompGraph {
    pub fn num_nodes(&self) -> usize {
        self.n1 + self.n2 + self.n1 * self.n2
    }

    pub fn composition_node(&self, i: usize, j: usize) -> usize {
        self.n1 + self.n2 + i * self.n2 + j
    }

    pub fn degrees(&self) -> Vec<f64> {
        degrees(&self.adjacency)
    }

    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_adjacency(&self.adjacency, &self.degrees())
    }
}

pub fn degrees(a: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    (0..n).map(|i| a.row(i).iter().sum()).collect()
}

pub fn build_graph(p1: &[Primitive], p2: &[Primitive], provider: &EmbeddingProvider) -> Result<CompGraph, DatasetError> {
    let (n1, n2) = (p1.len(), p2.len());
    if n1 == 0 || n2 == 0 {
        return Err(DatasetError::InvalidSize("both primitive sets must be nonempty".into()));
    }
    let h = n1 + n2 + n1 * n2;
    let d = provider.dim();
    let mut adj = vec![0.0; h * h];
    let mut feat = vec![0.0; h * d];
    let mut vecs = Vec::with_capacity(n1 + n2);
    for p in p1.iter().chain(p2) {
        vecs.push(provider.embedding_for(p)?.into_data());
    }
    for (k, v) in vecs.iter().enumerate() {
        feat[k * d..(k + 1) * d].copy_from_slice(v);
    }
    for i in 0..h {
        adj[i * h + i] = 1.0;
    }
    for i in 0..n1 {
        for j in 0..n2 {
            let c = n1 + n2 + i * n2 + j;
            for (k, x) in feat[c * d..(c + 1) * d].iter_mut().enumerate() {
                *x = (vecs[i][k] + vecs[n1 + j][k]) / 2.0;
            }
            for (u, v) in [(c, i), (c, n1 + j), (i, n1 + j)] {
                adj[u * h + v] = 1.0;
                adj[v * h + u] = 1.0;
            }
        }
    }
    Ok(CompGraph {
        n1,
        n2,
        adjacency: Tensor::new(vec![h, h], adj).expect("square"),
        features: Tensor::new(vec![h, d], feat).expect("features"),
    })
}

/// `D^{-1/2} A D^{-1/2}`; every degree must be positive.
pub fn normalize_adjacency(a: &Tensor, d: &[f64]) -> Tensor {
    let n = d.len();
    let inv: Vec<f64> = d.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] *= inv[i] * inv[j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self { layers: 2, hidden: 64, out: 64 }
    }
}

impl GcnConfig {
    pub fn dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        dims.push(self.out);
        dims
    }
}

pub fn layer_name(l: usize) -> String {
    format!("gcn.w{l}")
}

/// Gaussian init with variance `2 / (fan_in + fan_out)`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / (rows + cols) as f64).sqrt()).expect("positive std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("shape")
}

pub fn init_gcn<R: Rng>(cfg: &GcnConfig, d_in: usize, rng: &mut R) -> ParamTree {
    let dims = cfg.dims(d_in);
    let mut t = ParamTree::new();
    for l in 0..cfg.layers {
        t.insert(layer_name(l), glorot(dims[l], dims[l + 1], rng));
    }
    t
}

/// `V ← Â V θ_l` for each layer, ReLU between layers, linear output.
pub fn gcn_tape<T: Scalar>(tape: &mut Tape<T>, a_hat: Var, v0: Var, params: &ParamVars, layers: usize) -> Result<Var, TensorError> {
    let mut v = v0;
    for l in 0..layers {
        let vw = tape.matmul(v, params.get(&layer_name(l))?)?;
        v = tape.matmul(a_hat, vw)?;
        if l + 1 < layers {
            v = tape.relu(v);
        }
    }
    Ok(v)
}

pub fn gcn_forward(g: &CompGraph, params: &ParamTree, layers: usize) -> Result<Tensor, TensorError> {
    let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| gcn_tape(t, x[0], x[1], p, layers);
    evaluate(&f, params, &[g.normalized_adjacency(), g.features.clone()])
}

/// One propagation step `σ(Â V θ)` on the tape, with or without the ReLU.
pub fn gcn_layer(a_hat: &Tensor, v: &Tensor, theta: &Tensor, relu: bool) -> Result<Tensor, TensorError> {
    let mut p = ParamTree::new();
    p.insert(layer_name(0), theta.clone());
    let f = move |t: &mut Tape, p: &ParamVars, x: &[Var]| {
        let out = gcn_tape(t, x[0], x[1], p, 1)?;
        Ok(if relu { t.relu(out) } else { out })
    };
    evaluate(&f, &p, &[a_hat.clone(), v.clone()])
}
