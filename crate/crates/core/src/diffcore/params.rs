use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

const MAGIC: &[u8; 4] = b"CZPT";
const VERSION: u32 = 1;

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    leaves: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.leaves.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.leaves.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.leaves.remove(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.leaves.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.leaves.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.leaves.values().map(|t| t.numel()).sum()
    }

    /// Leaves whose name starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> ParamTree {
        let leaves = self
            .leaves
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamTree { leaves }
    }

    pub fn zeros_like(&self) -> ParamTree {
        let leaves = self.leaves.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        ParamTree { leaves }
    }

    fn check_structure(&self, other: &ParamTree) -> Result<(), TensorError> {
        if self.leaves.len() != other.leaves.len() {
            return Err(TensorError::Structure(format!(
                "{} leaves vs {} leaves",
                self.leaves.len(),
                other.leaves.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.leaves.iter().zip(&other.leaves) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(TensorError::Structure(format!(
                    "leaf {ka}{:?} vs {kb}{:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamTree) -> Result<(), TensorError> {
        self.check_structure(other)?;
        for (a, b) in self.leaves.values_mut().zip(other.leaves.values()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamTree) -> Result<ParamTree, TensorError> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamTree) -> Result<ParamTree, TensorError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> ParamTree {
        let leaves = self.leaves.iter().map(|(k, v)| (k.clone(), v.map(|x| x * c))).collect();
        ParamTree { leaves }
    }

    pub fn dot(&self, other: &ParamTree) -> Result<f64, TensorError> {
        self.check_structure(other)?;
        Ok(self
            .leaves
            .values()
            .zip(other.leaves.values())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.leaves.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamTree) -> Result<f64, TensorError> {
        self.check_structure(other)?;
        Ok(self
            .leaves
            .values()
            .zip(other.leaves.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.values().all(|t| t.all_finite())
    }

    /// Flat coordinate view, leaf order then row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.leaves.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Put every leaf on `tape` as a trainable variable.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self
            .leaves
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(Tensor::from_f64(v))))
            .collect();
        ParamVars { vars }
    }

    /// Like [`bind`](Self::bind) but every leaf is a constant.
    pub fn bind_frozen<T: Scalar>(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self
            .leaves
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(Tensor::from_f64(v))))
            .collect();
        ParamVars { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.leaves.len() as u64).to_le_bytes());
        for (name, t) in &self.leaves {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamTree, TensorError> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u64()? as usize;
        let mut tree = ParamTree::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| TensorError::Checkpoint(format!("leaf name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            if tree.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(TensorError::Checkpoint(format!("duplicate leaf {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()
    }

    pub fn load(path: &Path) -> Result<ParamTree, TensorError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamTree { leaves: iter.into_iter().collect() }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Tape handles for the leaves of a [`ParamTree`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::MissingLeaf(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Merge two handle sets; names must not collide.
    pub fn merged(&self, other: &ParamVars) -> Result<ParamVars, TensorError> {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            if vars.insert(k.clone(), *v).is_some() {
                return Err(TensorError::Structure(format!("duplicate leaf {k}")));
            }
        }
        Ok(ParamVars { vars })
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { vars: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(vals: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("b", Tensor::vector(vals.to_vec()));
        t.insert("a.w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        t
    }

    #[test]
    fn iteration_order_is_lexicographic() {
        let names: Vec<_> = tree(&[1.0]).names().map(str::to_string).collect();
        assert_eq!(names, ["a.w", "b"]);
    }

    #[test]
    fn structure_mismatch_is_an_error() {
        let a = tree(&[1.0]);
        let b = tree(&[1.0, 2.0]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let bytes = tree(&[1.0]).to_bytes();
        assert!(ParamTree::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamTree::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::ANY, 1..20)) {
            let t = tree(&vals);
            let back = ParamTree::from_bytes(&t.to_bytes()).unwrap();
            let a: Vec<u64> = t.flatten().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.names().collect::<Vec<_>>(), t.names().collect::<Vec<_>>());
        }
    }
}
