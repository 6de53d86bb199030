//! Open-world episode sampling.
//!
//! Step 1 draws `N^p` compositions whose primitives are pairwise disjoint;
//! they fix the primitive sets `P1`, `P2` and are the first seen classes.
//! Step 2 collects every other pair of `P1 × P2` present in the split as a
//! candidate, sends the first two candidates one to seen and one to unseen,
//! and flips a fair coin for each remaining one. Step 3 draws disjoint
//! support and query samples.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use thiserror::Error;

use crate::dataset::{Composition, Dataset, Kind, Split};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("split {0} has no compositions")]
    EmptySplit(Split),
    #[error("no valid episode after {0} attempts; the split cannot support this episode config")]
    Exhausted(usize),
    #[error("composition {composition} has {have} samples but the episode needs {need}")]
    InsufficientSamples { composition: String, have: usize, need: usize },
    #[error("episode text, line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_p: usize,
    pub k_s: usize,
    pub k_q: usize,
    pub max_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { n_p: 5, k_s: 5, k_q: 5, max_attempts: 10_000 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_p < 1 || self.k_s < 1 || self.k_q < 1 || self.max_attempts < 1 {
            return Err(SamplerError::InvalidConfig(format!("all sizes must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// One sampled episode. Samples are referenced by dataset position.
///
/// `seen` starts with the `N^p` Step-1 compositions; candidate pairs that
/// were assigned to seen follow in candidate order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub config: EpisodeConfig,
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub seen: Vec<Composition>,
    pub unseen: Vec<Composition>,
    pub support: Vec<(usize, Composition)>,
    pub query: Vec<(usize, Composition)>,
}

impl Episode {
    /// Index of `c` in the row-major `P1 × P2` grid.
    pub fn grid_index(&self, c: Composition) -> Option<usize> {
        let i = self.p1.iter().position(|&p| p == c.p1)?;
        let j = self.p2.iter().position(|&p| p == c.p2)?;
        Some(i * self.p2.len() + j)
    }

    pub fn grid_composition(&self, index: usize) -> Composition {
        let n2 = self.p2.len();
        Composition::new(self.p1[index / n2], self.p2[index % n2])
    }

    pub fn grid_size(&self) -> usize {
        self.p1.len() * self.p2.len()
    }

    pub fn is_seen(&self, c: Composition) -> bool {
        self.seen.contains(&c)
    }

    pub fn is_unseen(&self, c: Composition) -> bool {
        self.unseen.contains(&c)
    }

    /// Step-2 candidates in enumeration order.
    pub fn candidates(&self, ds: &Dataset) -> Vec<Composition> {
        let seeds = &self.seen[..self.config.n_p.min(self.seen.len())];
        candidates(ds, &self.p1, &self.p2, seeds)
    }

    /// Line-oriented text form using primitive names and sample ids.
    pub fn to_text(&self, ds: &Dataset) -> String {
        let c = &self.config;
        let mut out = format!("episode 1\nconfig {} {} {} {}\n", c.n_p, c.k_s, c.k_q, c.max_attempts);
        let names = |ids: &[usize]| ids.iter().map(|&i| ds.primitive(i).name.clone()).collect::<Vec<_>>().join(" ");
        writeln!(out, "p1 {}", names(&self.p1)).unwrap();
        writeln!(out, "p2 {}", names(&self.p2)).unwrap();
        let cell = |c: &Composition| {
            let i = self.p1.iter().position(|&p| p == c.p1).unwrap_or(usize::MAX);
            let j = self.p2.iter().position(|&p| p == c.p2).unwrap_or(usize::MAX);
            format!("{i},{j}")
        };
        let comps = |cs: &[Composition]| cs.iter().map(cell).collect::<Vec<_>>().join(" ");
        writeln!(out, "seen {}", comps(&self.seen)).unwrap();
        writeln!(out, "unseen {}", comps(&self.unseen)).unwrap();
        let items = |xs: &[(usize, Composition)]| {
            xs.iter().map(|(s, c)| format!("{}:{}", ds.sample(*s).id, cell(c))).collect::<Vec<_>>().join(" ")
        };
        writeln!(out, "support {}", items(&self.support)).unwrap();
        writeln!(out, "query {}", items(&self.query)).unwrap();
        out
    }

    pub fn from_text(text: &str, ds: &Dataset) -> Result<Episode, SamplerError> {
        let mut fields: HashMap<&str, (usize, Vec<&str>)> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let mut tok = line.split_whitespace();
            if let Some(key) = tok.next() {
                fields.insert(key, (n + 1, tok.collect()));
            }
        }
        let err = |line: usize, message: String| SamplerError::Parse { line, message };
        let get = |key: &str| fields.get(key).ok_or_else(|| err(0, format!("missing {key:?} line")));
        let (line, header) = get("episode")?;
        if header.as_slice() != ["1"] {
            return Err(err(*line, "unsupported episode version".into()));
        }
        let (line, cfg) = get("config")?;
        let nums: Vec<usize> = cfg.iter().map(|t| t.parse()).collect::<Result<_, _>>().map_err(|_| err(*line, "bad config".into()))?;
        let [n_p, k_s, k_q, max_attempts] = nums[..] else {
            return Err(err(*line, "config takes four integers".into()));
        };
        let config = EpisodeConfig { n_p, k_s, k_q, max_attempts };
        let prims = |key: &str, kind: Kind| -> Result<Vec<usize>, SamplerError> {
            let (line, names) = get(key)?;
            names
                .iter()
                .map(|n| ds.find_primitive(n, kind).ok_or_else(|| err(*line, format!("unknown primitive {n:?}"))))
                .collect()
        };
        let p1 = prims("p1", Kind::Type1)?;
        let p2 = prims("p2", Kind::Type2)?;
        let cell = |line: usize, s: &str| -> Result<Composition, SamplerError> {
            let (i, j) = s.split_once(',').ok_or_else(|| err(line, format!("bad cell {s:?}")))?;
            let i: usize = i.parse().map_err(|_| err(line, format!("bad cell {s:?}")))?;
            let j: usize = j.parse().map_err(|_| err(line, format!("bad cell {s:?}")))?;
            match (p1.get(i), p2.get(j)) {
                (Some(&a), Some(&b)) => Ok(Composition::new(a, b)),
                _ => Err(err(line, format!("cell {s:?} outside the primitive grid"))),
            }
        };
        let comps = |key: &str| -> Result<Vec<Composition>, SamplerError> {
            let (line, toks) = get(key)?;
            toks.iter().map(|t| cell(*line, t)).collect()
        };
        let items = |key: &str| -> Result<Vec<(usize, Composition)>, SamplerError> {
            let (line, toks) = get(key)?;
            toks.iter()
                .map(|t| {
                    let (id, c) = t.split_once(':').ok_or_else(|| err(*line, format!("bad item {t:?}")))?;
                    let id: u64 = id.parse().map_err(|_| err(*line, format!("bad sample id {id:?}")))?;
                    let idx = ds.sample_index(id).ok_or_else(|| err(*line, format!("unknown sample {id}")))?;
                    Ok((idx, cell(*line, c)?))
                })
                .collect()
        };
        let (seen, unseen, support, query) = (comps("seen")?, comps("unseen")?, items("support")?, items("query")?);
        Ok(Episode { config, p1, p2, seen, unseen, support, query })
    }
}

fn candidates(ds: &Dataset, p1: &[usize], p2: &[usize], seeds: &[Composition]) -> Vec<Composition> {
    let mut out = Vec::new();
    for &a in p1 {
        for &b in p2 {
            let c = Composition::new(a, b);
            if ds.has_composition(c) && !seeds.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Step 1: `n_p` compositions with pairwise-disjoint primitives, or `None`
/// if the draw budget runs out.
fn draw_seeds<R: Rng>(pool: &[Composition], n_p: usize, rng: &mut R) -> Option<Vec<Composition>> {
    let budget = 100 * n_p.max(1) + pool.len();
    let mut seeds: Vec<Composition> = Vec::with_capacity(n_p);
    for _ in 0..budget {
        if seeds.len() == n_p {
            break;
        }
        let c = pool[rng.random_range(0..pool.len())];
        if seeds.iter().all(|s| s.p1 != c.p1 && s.p2 != c.p2) {
            seeds.push(c);
        }
    }
    (seeds.len() == n_p).then_some(seeds)
}

pub fn sample_episode<R: Rng>(ds: &Dataset, split: Split, cfg: &EpisodeConfig, rng: &mut R) -> Result<Episode, SamplerError> {
    cfg.validate()?;
    let pool = ds.compositions_in(split);
    if pool.is_empty() {
        return Err(SamplerError::EmptySplit(split));
    }
    for _ in 0..cfg.max_attempts {
        let Some(seeds) = draw_seeds(&pool, cfg.n_p, rng) else { continue };
        let p1: Vec<usize> = seeds.iter().map(|c| c.p1).collect();
        let p2: Vec<usize> = seeds.iter().map(|c| c.p2).collect();
        let cand = candidates(ds, &p1, &p2, &seeds);
        if cand.len() < 2 {
            continue;
        }
        let (seen, unseen) = assign(&seeds, &cand, cfg, rng);
        let Some((seen, unseen)) = seen.zip(unseen) else { continue };
        return fill(ds, cfg, p1, p2, seen, unseen, rng);
    }
    Err(SamplerError::Exhausted(cfg.max_attempts))
}

type Partition = (Option<Vec<Composition>>, Option<Vec<Composition>>);

fn assign<R: Rng>(seeds: &[Composition], cand: &[Composition], cfg: &EpisodeConfig, rng: &mut R) -> Partition {
    let n_q = seeds.len() + cand.len();
    for _ in 0..cfg.max_attempts {
        let mut seen = seeds.to_vec();
        let mut unseen = Vec::new();
        let first_seen = rng.random::<bool>();
        for (k, &c) in cand.iter().enumerate() {
            let to_seen = match k {
                0 => first_seen,
                1 => !first_seen,
                _ => rng.random::<bool>(),
            };
            if to_seen {
                seen.push(c);
            } else {
                unseen.push(c);
            }
        }
        let n_s = seen.len();
        if cfg.n_p < n_s && n_s < n_q {
            // restore candidate order within seen after the seeds
            let rest: BTreeSet<usize> = seen[seeds.len()..].iter().map(|c| cand.iter().position(|x| x == c).unwrap()).collect();
            seen.truncate(seeds.len());
            seen.extend(rest.into_iter().map(|i| cand[i]));
            return (Some(seen), Some(unseen));
        }
    }
    (None, None)
}

fn fill<R: Rng>(
    ds: &Dataset,
    cfg: &EpisodeConfig,
    p1: Vec<usize>,
    p2: Vec<usize>,
    seen: Vec<Composition>,
    unseen: Vec<Composition>,
    rng: &mut R,
) -> Result<Episode, SamplerError> {
    let mut support = Vec::with_capacity(seen.len() * cfg.k_s);
    let mut query = Vec::with_capacity((seen.len() + unseen.len()) * cfg.k_q);
    let draw = |c: Composition, k: usize, rng: &mut R| -> Result<Vec<usize>, SamplerError> {
        let pool = ds.samples_of(c);
        if pool.len() < k {
            return Err(SamplerError::InsufficientSamples { composition: ds.composition_name(c), have: pool.len(), need: k });
        }
        Ok(sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
    };
    for &c in &seen {
        let picked = draw(c, cfg.k_s + cfg.k_q, rng)?;
        support.extend(picked[..cfg.k_s].iter().map(|&s| (s, c)));
        query.extend(picked[cfg.k_s..].iter().map(|&s| (s, c)));
    }
    for &c in &unseen {
        query.extend(draw(c, cfg.k_q, rng)?.into_iter().map(|s| (s, c)));
    }
    Ok(Episode { config: *cfg, p1, p2, seen, unseen, support, query })
}

/// Names of the episode invariants, in check order.
pub const INVARIANTS: [&str; 9] = [
    "primitive set size",
    "duplicate primitive",
    "unknown composition",
    "seen/unseen overlap",
    "no unseen composition",
    "seen count out of range",
    "support size",
    "query size",
    "support/query overlap",
];

/// Empty iff every episode invariant holds; otherwise the violated
/// invariants by name, each reported once.
pub fn validate_episode(e: &Episode, ds: &Dataset) -> Vec<&'static str> {
    let mut bad: BTreeSet<usize> = BTreeSet::new();
    let n_p = e.config.n_p;
    if e.p1.len() != n_p || e.p2.len() != n_p {
        bad.insert(0);
    }
    let distinct = |v: &[usize]| v.iter().collect::<HashSet<_>>().len() == v.len();
    if !distinct(&e.p1) || !distinct(&e.p2) {
        bad.insert(1);
    }
    let in_grid = |c: &Composition| e.p1.contains(&c.p1) && e.p2.contains(&c.p2) && ds.has_composition(*c);
    if !e.seen.iter().chain(&e.unseen).all(in_grid) {
        bad.insert(2);
    }
    let seen: HashSet<Composition> = e.seen.iter().copied().collect();
    let unseen: HashSet<Composition> = e.unseen.iter().copied().collect();
    if seen.len() != e.seen.len() || unseen.len() != e.unseen.len() || !seen.is_disjoint(&unseen) {
        bad.insert(3);
    }
    if e.unseen.is_empty() {
        bad.insert(4);
    }
    let (n_s, n_q) = (seen.len(), seen.len() + unseen.len());
    if !(n_p < n_s && n_s < n_q) {
        bad.insert(5);
    }
    let label_ok = |&(s, c): &(usize, Composition)| s < ds.samples().len() && ds.sample(s).label == c;
    let count = |items: &[(usize, Composition)]| {
        let mut m: HashMap<Composition, HashSet<usize>> = HashMap::new();
        let mut dup = false;
        for &(s, c) in items {
            dup |= !m.entry(c).or_default().insert(s);
        }
        (m, dup)
    };
    let (sup, sup_dup) = count(&e.support);
    let support_ok = !sup_dup
        && e.support.iter().all(label_ok)
        && sup.keys().all(|c| seen.contains(c))
        && seen.iter().all(|c| sup.get(c).map_or(0, HashSet::len) == e.config.k_s);
    if !support_ok {
        bad.insert(6);
    }
    let (qry, qry_dup) = count(&e.query);
    let query_ok = !qry_dup
        && e.query.iter().all(label_ok)
        && qry.keys().all(|c| seen.contains(c) || unseen.contains(c))
        && seen.iter().chain(&unseen).all(|c| qry.get(c).map_or(0, HashSet::len) == e.config.k_q);
    if !query_ok {
        bad.insert(7);
    }
    let overlap = seen.iter().any(|c| match (sup.get(c), qry.get(c)) {
        (Some(a), Some(b)) => !a.is_disjoint(b),
        _ => false,
    });
    if overlap {
        bad.insert(8);
    }
    bad.into_iter().map(|i| INVARIANTS[i]).collect()
}
