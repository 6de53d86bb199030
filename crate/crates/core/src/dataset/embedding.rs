use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetError, Kind, Primitive};
use crate::diffcore::Tensor;

pub const DEFAULT_EMBEDDING_DIM: usize = 32;

/// Deterministic prior vector per primitive: a Gaussian draw keyed on
/// `(name, kind, seed)`, scaled to unit length. Vectors supplied by a
/// manifest take precedence and are normalized the same way.
#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    dim: usize,
    seed: u64,
    registered: HashMap<(String, Kind), Option<Vec<f64>>>,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// The seeded vector for `(name, kind)` without any registration check.
pub(crate) fn keyed_vector(name: &str, kind: Kind, seed: u64, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"embedding\0");
    h.update(name.as_bytes());
    h.update([0, kind as u8]);
    h.update(seed.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    normalized((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

impl EmbeddingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, registered: HashMap::new() }
    }

    /// Register every primitive of `ds`, honouring manifest vectors.
    pub fn for_dataset(ds: &Dataset, dim: usize, seed: u64) -> Result<Self, DatasetError> {
        let mut p = Self::new(dim, seed);
        for prim in ds.primitives() {
            p.register(&prim.name, prim.kind, ds.embedding_override(prim.id).map(<[f64]>::to_vec))?;
        }
        Ok(p)
    }

    pub fn register(&mut self, name: &str, kind: Kind, vector: Option<Vec<f64>>) -> Result<(), DatasetError> {
        if let Some(v) = &vector {
            if v.len() != self.dim {
                return Err(DatasetError::invariant(format!(
                    "embedding for {name:?} has {} entries, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().all(|x| *x == 0.0) || !v.iter().all(|x| x.is_finite()) {
                return Err(DatasetError::invariant(format!("embedding for {name:?} must be finite and nonzero")));
            }
        }
        self.registered.insert((name.to_string(), kind), vector.map(normalized));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding_for(&self, p: &Primitive) -> Result<Tensor, DatasetError> {
        self.embedding_by_name(&p.name, p.kind)
    }

    pub fn embedding_by_name(&self, name: &str, kind: Kind) -> Result<Tensor, DatasetError> {
        match self.registered.get(&(name.to_string(), kind)) {
            None => Err(DatasetError::UnknownPrimitive(format!("{name:?} ({kind})"))),
            Some(Some(v)) => Ok(Tensor::vector(v.clone())),
            Some(None) => Ok(Tensor::vector(keyed_vector(name, kind, self.seed, self.dim))),
        }
    }
}
