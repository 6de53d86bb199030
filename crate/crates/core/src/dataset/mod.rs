//! Compositional datasets: primitives of two kinds, pair labels, split
//! discipline, and the procedural color–shape world used for experiments.

mod embedding;
mod manifest;
mod synthetic;

pub use embedding::{EmbeddingProvider, DEFAULT_EMBEDDING_DIM};
pub use manifest::{
    load_manifest, load_manifest_with, load_manifests, read_raw_tensor, save_manifest, write_raw_tensor, Manifest, Payload,
    PayloadStyle, SampleRecord,
};
pub use synthetic::{generate_benchmark, generate_synthetic, palette, BenchmarkConfig, Placement, SyntheticWorld};

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invariant { line: Option<usize>, message: String },
    #[error("{}primitive {name:?} ({kind}) is declared in both {first} and {second}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    SplitOverlap { line: Option<usize>, name: String, kind: Kind, first: Split, second: Split },
    #[error("unknown primitive {0}")]
    UnknownPrimitive(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl DatasetError {
    pub(crate) fn invariant(message: impl Into<String>) -> Self {
        DatasetError::Invariant { line: None, message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Type1,
    Type2,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Type1 => "type1",
            Kind::Type2 => "type2",
        })
    }
}

impl std::str::FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "type1" => Ok(Kind::Type1),
            "type2" => Ok(Kind::Type2),
            _ => Err(format!("unknown primitive kind {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Primitive {
    pub id: usize,
    pub name: String,
    pub kind: Kind,
}

/// A `(type1, type2)` pair of primitive ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Composition {
    pub p1: usize,
    pub p2: usize,
}

impl Composition {
    pub fn new(p1: usize, p2: usize) -> Self {
        Self { p1, p2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Composition,
}

/// Validation thresholds applied when a dataset is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetRules {
    pub min_samples_per_composition: usize,
}

impl Default for DatasetRules {
    fn default() -> Self {
        Self { min_samples_per_composition: 10 }
    }
}

/// Immutable, validated collection of labelled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    primitives: Vec<Primitive>,
    primitive_split: Vec<Split>,
    embeddings: BTreeMap<usize, Vec<f64>>,
    samples: Vec<Sample>,
    by_composition: BTreeMap<Composition, Vec<usize>>,
    by_id: HashMap<u64, usize>,
}

/// Primitive declaration used to assemble a [`Dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveDecl {
    pub name: String,
    pub kind: Kind,
    pub split: Split,
    pub embedding: Option<Vec<f64>>,
}

impl Dataset {
    /// Validate and index. Primitive ids are positions in `primitives`;
    /// sample labels refer to them.
    pub fn new(
        image_shape: [usize; 3],
        primitives: Vec<PrimitiveDecl>,
        samples: Vec<Sample>,
        rules: DatasetRules,
    ) -> Result<Self, DatasetError> {
        if image_shape[0] != 3 || image_shape[1] == 0 || image_shape[2] == 0 {
            return Err(DatasetError::InvalidSize(format!("image shape {image_shape:?} must be [3, H, W]")));
        }
        let mut seen: HashMap<(&str, Kind), Split> = HashMap::new();
        for p in &primitives {
            if let Some(&first) = seen.get(&(p.name.as_str(), p.kind)) {
                if first != p.split {
                    return Err(DatasetError::SplitOverlap { line: None, name: p.name.clone(), kind: p.kind, first, second: p.split });
                }
                return Err(DatasetError::invariant(format!("primitive {:?} ({}) declared twice", p.name, p.kind)));
            }
            seen.insert((p.name.as_str(), p.kind), p.split);
        }
        let mut embeddings = BTreeMap::new();
        let mut prims = Vec::with_capacity(primitives.len());
        let mut primitive_split = Vec::with_capacity(primitives.len());
        for (id, p) in primitives.into_iter().enumerate() {
            if let Some(v) = p.embedding {
                embeddings.insert(id, v);
            }
            prims.push(Primitive { id, name: p.name, kind: p.kind });
            primitive_split.push(p.split);
        }

        let mut by_composition: BTreeMap<Composition, Vec<usize>> = BTreeMap::new();
        let mut by_id = HashMap::with_capacity(samples.len());
        for (idx, s) in samples.iter().enumerate() {
            if by_id.insert(s.id, idx).is_some() {
                return Err(DatasetError::invariant(format!("duplicate sample id {}", s.id)));
            }
            if s.image.shape() != image_shape {
                return Err(DatasetError::invariant(format!(
                    "sample {} has image shape {:?}, expected {:?}",
                    s.id,
                    s.image.shape(),
                    image_shape
                )));
            }
            if !s.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(DatasetError::invariant(format!("sample {} has pixel values outside [0, 1]", s.id)));
            }
            let (a, b) = (s.label.p1, s.label.p2);
            let ok = a < prims.len() && b < prims.len() && prims[a].kind == Kind::Type1 && prims[b].kind == Kind::Type2;
            if !ok {
                return Err(DatasetError::invariant(format!("sample {} has an invalid composition label", s.id)));
            }
            if primitive_split[a] != primitive_split[b] {
                return Err(DatasetError::invariant(format!(
                    "sample {}: composition ({}, {}) mixes splits {} and {}",
                    s.id, prims[a].name, prims[b].name, primitive_split[a], primitive_split[b]
                )));
            }
            by_composition.entry(s.label).or_default().push(idx);
        }
        for (c, idx) in &by_composition {
            if idx.len() < rules.min_samples_per_composition {
                return Err(DatasetError::invariant(format!(
                    "composition ({}, {}) has {} samples, fewer than {}",
                    prims[c.p1].name,
                    prims[c.p2].name,
                    idx.len(),
                    rules.min_samples_per_composition
                )));
            }
        }
        Ok(Self { image_shape, primitives: prims, primitive_split, embeddings, samples, by_composition, by_id })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn primitive(&self, id: usize) -> &Primitive {
        &self.primitives[id]
    }

    pub fn primitive_split(&self, id: usize) -> Split {
        self.primitive_split[id]
    }

    pub fn find_primitive(&self, name: &str, kind: Kind) -> Option<usize> {
        self.primitives.iter().position(|p| p.name == name && p.kind == kind)
    }

    /// Primitive ids of one kind in one split, ascending.
    pub fn primitives_in(&self, split: Split, kind: Kind) -> Vec<usize> {
        self.primitives
            .iter()
            .filter(|p| p.kind == kind && self.primitive_split[p.id] == split)
            .map(|p| p.id)
            .collect()
    }

    /// Manifest-supplied embedding vector, if any.
    pub fn embedding_override(&self, id: usize) -> Option<&[f64]> {
        self.embeddings.get(&id).map(Vec::as_slice)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn sample_index(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    /// Compositions with at least one sample, in `(p1, p2)` order.
    pub fn compositions(&self) -> impl Iterator<Item = Composition> + '_ {
        self.by_composition.keys().copied()
    }

    pub fn compositions_in(&self, split: Split) -> Vec<Composition> {
        self.compositions().filter(|c| self.split_of(*c) == split).collect()
    }

    pub fn has_composition(&self, c: Composition) -> bool {
        self.by_composition.contains_key(&c)
    }

    pub fn split_of(&self, c: Composition) -> Split {
        self.primitive_split[c.p1]
    }

    /// Sample indices labelled `c`, ascending.
    pub fn samples_of(&self, c: Composition) -> &[usize] {
        self.by_composition.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sample indices of one split, ascending.
    pub fn samples_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split_of(self.samples[i].label) == split).collect()
    }

    pub fn composition_name(&self, c: Composition) -> String {
        format!("{}+{}", self.primitives[c.p1].name, self.primitives[c.p2].name)
    }

    /// Primitive sets of different splits must be disjoint per kind.
    /// Holds by construction; exposed for callers that merge datasets.
    pub fn validate_splits(&self) -> Result<(), DatasetError> {
        let mut owner: HashMap<(&str, Kind), Split> = HashMap::new();
        for p in &self.primitives {
            let split = self.primitive_split[p.id];
            if let Some(&first) = owner.get(&(p.name.as_str(), p.kind)) {
                if first != split {
                    return Err(DatasetError::SplitOverlap { line: None, name: p.name.clone(), kind: p.kind, first, second: split });
                }
            }
            owner.insert((p.name.as_str(), p.kind), split);
        }
        Ok(())
    }

    pub(crate) fn declarations(&self) -> Vec<PrimitiveDecl> {
        self.primitives
            .iter()
            .map(|p| PrimitiveDecl {
                name: p.name.clone(),
                kind: p.kind,
                split: self.primitive_split[p.id],
                embedding: self.embeddings.get(&p.id).cloned(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decl(name: &str, kind: Kind, split: Split) -> PrimitiveDecl {
        PrimitiveDecl { name: name.into(), kind, split, embedding: None }
    }

    fn sample(id: u64, p1: usize, p2: usize) -> Sample {
        Sample { id, image: Tensor::zeros(&[3, 2, 2]), label: Composition::new(p1, p2) }
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let prims = vec![decl("red", Kind::Type1, Split::Train), decl("disk", Kind::Type2, Split::Train)];
        let samples: Vec<_> = (0..9).map(|i| sample(i, 0, 1)).collect();
        let err = Dataset::new([3, 2, 2], prims.clone(), samples.clone(), DatasetRules::default()).unwrap_err();
        assert!(err.to_string().contains("fewer than 10"), "{err}");
        let ds = Dataset::new([3, 2, 2], prims, samples, DatasetRules { min_samples_per_composition: 1 }).unwrap();
        assert_eq!(ds.samples_of(Composition::new(0, 1)).len(), 9);
    }

    #[test]
    fn split_overlap_is_rejected() {
        let prims = vec![
            decl("red", Kind::Type1, Split::Train),
            decl("red", Kind::Type1, Split::Test),
            decl("disk", Kind::Type2, Split::Train),
        ];
        let err = Dataset::new([3, 2, 2], prims, vec![], DatasetRules::default()).unwrap_err();
        assert!(matches!(err, DatasetError::SplitOverlap { .. }));
    }

    #[test]
    fn mixed_split_composition_is_rejected() {
        let prims = vec![decl("red", Kind::Type1, Split::Train), decl("disk", Kind::Type2, Split::Test)];
        let err = Dataset::new([3, 2, 2], prims, vec![sample(0, 0, 1)], DatasetRules { min_samples_per_composition: 1 })
            .unwrap_err();
        assert!(err.to_string().contains("mixes splits"));
    }

    #[test]
    fn labels_must_have_correct_kinds() {
        let prims = vec![decl("red", Kind::Type1, Split::Train), decl("disk", Kind::Type2, Split::Train)];
        let err = Dataset::new([3, 2, 2], prims, vec![sample(0, 1, 0)], DatasetRules { min_samples_per_composition: 1 })
            .unwrap_err();
        assert!(err.to_string().contains("invalid composition"));
    }
}
