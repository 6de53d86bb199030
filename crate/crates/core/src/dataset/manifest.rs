//! Line-oriented dataset manifest.
//!
//! ```text
//! czsl-manifest 1
//! image_shape 3 16 16
//! primitive <name> <type1|type2> <train|val|test> [embedding=<f64>,<f64>,...]
//! sample <id> <type1-name> <type2-name> <payload>
//! ```
//!
//! A payload is either `inline:<base64 of little-endian f64 pixels>` or
//! `raw:<path>` / `raw:<path>#<index>`, with the path relative to the
//! manifest. Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{Composition, Dataset, DatasetError, DatasetRules, Kind, PrimitiveDecl, Sample, Split};
use crate::diffcore::Tensor;

const HEADER: &str = "czsl-manifest 1";
const RAW_MAGIC: &[u8; 4] = b"CZTN";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Inline(Vec<f64>),
    Raw { path: String, index: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub type1: String,
    pub type2: String,
    pub payload: Payload,
}

/// Parsed manifest text, before payloads are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub image_shape: [usize; 3],
    pub primitives: Vec<PrimitiveDecl>,
    pub samples: Vec<SampleRecord>,
    primitive_lines: Vec<usize>,
    sample_lines: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadStyle {
    Inline,
    /// One stacked raw tensor file next to the manifest.
    Raw,
}

fn parse_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse { line, message: message.into() }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn parse_payload(line: usize, s: &str) -> Result<Payload, DatasetError> {
    if let Some(b64) = s.strip_prefix("inline:") {
        let bytes = STANDARD.decode(b64).map_err(|e| parse_err(line, format!("bad inline payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(parse_err(line, "inline payload length is not a multiple of 8 bytes"));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Payload::Inline(data))
    } else if let Some(rest) = s.strip_prefix("raw:") {
        let (path, index) = match rest.rsplit_once('#') {
            Some((p, i)) => {
                let i = i.parse().map_err(|_| parse_err(line, format!("bad raw index {i:?}")))?;
                (p, Some(i))
            }
            None => (rest, None),
        };
        if path.is_empty() {
            return Err(parse_err(line, "empty raw path"));
        }
        Ok(Payload::Raw { path: path.to_string(), index })
    } else {
        Err(parse_err(line, format!("unknown payload {s:?}; expected inline: or raw:")))
    }
}

fn render_payload(p: &Payload) -> String {
    match p {
        Payload::Inline(data) => {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            format!("inline:{}", STANDARD.encode(bytes))
        }
        Payload::Raw { path, index: Some(i) } => format!("raw:{path}#{i}"),
        Payload::Raw { path, index: None } => format!("raw:{path}"),
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, DatasetError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(parse_err(n, format!("expected header {HEADER:?}, found {other:?}"))),
            None => return Err(parse_err(1, "empty manifest")),
        }
        let mut m = Manifest {
            image_shape: [0; 3],
            primitives: Vec::new(),
            samples: Vec::new(),
            primitive_lines: Vec::new(),
            sample_lines: Vec::new(),
        };
        let mut have_shape = false;
        for (n, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "image_shape" => {
                    if have_shape {
                        return Err(parse_err(n, "image_shape declared twice"));
                    }
                    if tok.len() != 4 {
                        return Err(parse_err(n, "image_shape takes exactly three dimensions"));
                    }
                    for (k, t) in tok[1..].iter().enumerate() {
                        m.image_shape[k] = t.parse().map_err(|_| parse_err(n, format!("bad dimension {t:?}")))?;
                    }
                    have_shape = true;
                }
                "primitive" => {
                    if tok.len() < 4 {
                        return Err(parse_err(n, "primitive needs a name, a kind and a split"));
                    }
                    let kind = tok[2].parse::<Kind>().map_err(|e| parse_err(n, e))?;
                    let split = tok[3].parse::<Split>().map_err(|e| parse_err(n, e))?;
                    let mut embedding = None;
                    for field in &tok[4..] {
                        match field.split_once('=') {
                            Some(("embedding", v)) if embedding.is_none() => {
                                let vals: Result<Vec<f64>, _> = v.split(',').map(str::parse).collect();
                                embedding = Some(vals.map_err(|_| parse_err(n, "bad embedding vector"))?);
                            }
                            _ => return Err(parse_err(n, format!("unknown field {field:?}"))),
                        }
                    }
                    m.primitives.push(PrimitiveDecl { name: tok[1].to_string(), kind, split, embedding });
                    m.primitive_lines.push(n);
                }
                "sample" => {
                    if tok.len() != 5 {
                        return Err(parse_err(n, format!("sample takes 4 fields, found {}", tok.len() - 1)));
                    }
                    let id = tok[1].parse().map_err(|_| parse_err(n, format!("bad sample id {:?}", tok[1])))?;
                    let payload = parse_payload(n, tok[4])?;
                    m.samples.push(SampleRecord { id, type1: tok[2].to_string(), type2: tok[3].to_string(), payload });
                    m.sample_lines.push(n);
                }
                other => return Err(parse_err(n, format!("unknown record {other:?}"))),
            }
        }
        if !have_shape {
            return Err(parse_err(1, "missing image_shape"));
        }
        Ok(m)
    }

    /// Canonical text; `parse(render(m)) == m`.
    pub fn render(&self) -> String {
        let mut out = format!("{HEADER}\nimage_shape {} {} {}\n", self.image_shape[0], self.image_shape[1], self.image_shape[2]);
        for p in &self.primitives {
            out.push_str(&format!("primitive {} {} {}", p.name, p.kind, p.split));
            if let Some(v) = &p.embedding {
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                out.push_str(&format!(" embedding={}", vals.join(",")));
            }
            out.push('\n');
        }
        for s in &self.samples {
            out.push_str(&format!("sample {} {} {} {}\n", s.id, s.type1, s.type2, render_payload(&s.payload)));
        }
        out
    }

    /// Build a manifest for the samples of `ds` in `split` (all if `None`).
    /// `payload` receives the position of each sample within the selection.
    pub fn from_dataset(ds: &Dataset, split: Option<Split>, mut payload: impl FnMut(usize, &Sample) -> Payload) -> Manifest {
        let keep = |s: Split| split.is_none_or(|want| want == s);
        let primitives: Vec<PrimitiveDecl> = ds.declarations().into_iter().filter(|p| keep(p.split)).collect();
        let samples: Vec<SampleRecord> = ds
            .samples()
            .iter()
            .filter(|s| keep(ds.split_of(s.label)))
            .enumerate()
            .map(|(k, s)| SampleRecord {
                id: s.id,
                type1: ds.primitive(s.label.p1).name.clone(),
                type2: ds.primitive(s.label.p2).name.clone(),
                payload: payload(k, s),
            })
            .collect();
        let (np, ns) = (primitives.len(), samples.len());
        Manifest {
            image_shape: ds.image_shape(),
            primitives,
            samples,
            primitive_lines: (0..np).map(|i| i + 3).collect(),
            sample_lines: (0..ns).map(|i| i + 3 + np).collect(),
        }
    }

    /// Resolve payloads relative to `base` and validate into a [`Dataset`].
    pub fn resolve(&self, base: &Path, rules: DatasetRules) -> Result<Dataset, DatasetError> {
        resolve_all(&[(self, base)], rules)
    }
}

fn resolve_all(parts: &[(&Manifest, &Path)], rules: DatasetRules) -> Result<Dataset, DatasetError> {
    let shape = parts.first().map(|(m, _)| m.image_shape).ok_or_else(|| DatasetError::invariant("no manifests given"))?;
    let mut decls = Vec::new();
    let mut owner: HashMap<(String, Kind), (usize, Split)> = HashMap::new();
    for (m, _) in parts {
        if m.image_shape != shape {
            return Err(DatasetError::invariant(format!("image shapes {:?} and {:?} disagree", shape, m.image_shape)));
        }
        for (p, &line) in m.primitives.iter().zip(&m.primitive_lines) {
            if let Some(&(_, first)) = owner.get(&(p.name.clone(), p.kind)) {
                if first != p.split {
                    return Err(DatasetError::SplitOverlap {
                        line: Some(line),
                        name: p.name.clone(),
                        kind: p.kind,
                        first,
                        second: p.split,
                    });
                }
                return Err(DatasetError::Invariant {
                    line: Some(line),
                    message: format!("primitive {:?} ({}) declared twice", p.name, p.kind),
                });
            }
            owner.insert((p.name.clone(), p.kind), (decls.len(), p.split));
            decls.push(p.clone());
        }
    }

    let numel = shape.iter().product::<usize>();
    let mut raw_cache: HashMap<PathBuf, Tensor> = HashMap::new();
    let mut samples = Vec::new();
    let mut first_line: BTreeMap<Composition, (usize, usize)> = BTreeMap::new();
    for (m, base) in parts {
        for (rec, &line) in m.samples.iter().zip(&m.sample_lines) {
            let lookup = |name: &str, kind| {
                owner
                    .get(&(name.to_string(), kind))
                    .map(|&(id, _)| id)
                    .ok_or_else(|| parse_err(line, format!("undeclared {kind} primitive {name:?}")))
            };
            let label = Composition::new(lookup(&rec.type1, Kind::Type1)?, lookup(&rec.type2, Kind::Type2)?);
            let data = match &rec.payload {
                Payload::Inline(d) => d.clone(),
                Payload::Raw { path, index } => {
                    let full = base.join(path);
                    if !raw_cache.contains_key(&full) {
                        let t = read_raw_tensor(&full)?;
                        raw_cache.insert(full.clone(), t);
                    }
                    let t = &raw_cache[&full];
                    match index {
                        None => t.data().to_vec(),
                        Some(i) => {
                            let start = i * numel;
                            if t.ndim() != 4 || start + numel > t.numel() {
                                return Err(parse_err(line, format!("index {i} out of range in {path}")));
                            }
                            t.data()[start..start + numel].to_vec()
                        }
                    }
                }
            };
            if data.len() != numel {
                return Err(DatasetError::Invariant {
                    line: Some(line),
                    message: format!("sample {} has {} values, expected {numel}", rec.id, data.len()),
                });
            }
            let image = Tensor::new(shape.to_vec(), data).expect("length checked");
            first_line.entry(label).or_insert((line, 0)).1 += 1;
            samples.push(Sample { id: rec.id, image, label });
        }
    }
    for (c, (line, count)) in &first_line {
        if *count < rules.min_samples_per_composition {
            return Err(DatasetError::Invariant {
                line: Some(*line),
                message: format!(
                    "composition ({}, {}) has {count} samples, fewer than {}",
                    decls[c.p1].name, decls[c.p2].name, rules.min_samples_per_composition
                ),
            });
        }
    }
    Dataset::new(shape, decls, samples, rules)
}

fn read_text(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Manifest::parse(&text).map_err(|e| match e {
        DatasetError::Parse { line, message } => DatasetError::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    load_manifest_with(path, DatasetRules::default())
}

pub fn load_manifest_with(path: &Path, rules: DatasetRules) -> Result<Dataset, DatasetError> {
    read_text(path)?.resolve(base_dir(path), rules)
}

/// Merge several manifests (typically one per split) into one dataset.
pub fn load_manifests(paths: &[PathBuf], rules: DatasetRules) -> Result<Dataset, DatasetError> {
    let parsed: Vec<Manifest> = paths.iter().map(|p| read_text(p)).collect::<Result<_, _>>()?;
    let parts: Vec<(&Manifest, &Path)> = parsed.iter().zip(paths).map(|(m, p)| (m, base_dir(p))).collect();
    resolve_all(&parts, rules)
}

/// Write the samples of `split` (all if `None`). With [`PayloadStyle::Raw`]
/// the images go to `<manifest stem>.tensors` beside the manifest.
pub fn save_manifest(ds: &Dataset, path: &Path, split: Option<Split>, style: PayloadStyle) -> Result<(), DatasetError> {
    let manifest = match style {
        PayloadStyle::Inline => Manifest::from_dataset(ds, split, |_, s| Payload::Inline(s.image.data().to_vec())),
        PayloadStyle::Raw => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
            let file = format!("{stem}.tensors");
            let mut stacked = Vec::new();
            let m = Manifest::from_dataset(ds, split, |k, s| {
                stacked.extend_from_slice(s.image.data());
                Payload::Raw { path: file.clone(), index: Some(k) }
            });
            let [c, h, w] = ds.image_shape();
            let t = Tensor::new(vec![m.samples.len(), c, h, w], stacked).expect("stacked images");
            write_raw_tensor(&base_dir(path).join(&file), &t)?;
            m
        }
    };
    fs::write(path, manifest.render()).map_err(|e| io_err(path, e))
}

/// `CZTN`, u32 rank, u64 dims, then little-endian f64 data.
pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(8 + 8 * t.ndim() + 8 * t.numel());
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |m: &str| io_err(path, m);
    if bytes.len() < 8 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("not a raw tensor file"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8 + 8 * rank;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != data_start + 8 * n {
        return Err(bad("data length does not match shape"));
    }
    let data = bytes[data_start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}
