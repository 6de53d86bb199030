use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use czsl::baselines::{le_fit_infer, visprod_fit_infer};
use czsl::dataset::{generate_benchmark, load_manifests, save_manifest, Dataset, DatasetRules, PayloadStyle, Split};
use czsl::diffcore::{AdamState, ParamTree};
use czsl::encoder::{init_params, Backbone};
use czsl::evaluator::{aggregate, seed_summary, EpisodeResult, MetricsReport};
use czsl::metalearn::{
    evaluate_episodes, pretrain_backbone, sample_episodes, train_resumable, Best, Context, LogEntry, Model, TrainState,
};
use czsl::seeds::{derive_seed, indexed_rng, rng_for};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::error::CliError;
use crate::report::{render_table, Record, ResultRecord, SummaryRecord};

const SPLIT_FILES: [(Split, &str); 3] = [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")];

fn split_paths(dir: &Path) -> Vec<(Split, PathBuf, PathBuf)> {
    SPLIT_FILES
        .iter()
        .map(|&(s, stem)| (s, dir.join(format!("{stem}.manifest")), dir.join(format!("{stem}.tensors"))))
        .collect()
}

/// Writes `path` via a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.resolved.toml"), cfg.to_toml().as_bytes())
}

pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let dir = &cfg.dataset.dir;
    let paths = split_paths(dir);
    if !force {
        if let Some(p) = paths.iter().flat_map(|(_, m, t)| [m, t]).find(|p| p.exists()) {
            return Err(CliError::Io(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    fs::create_dir_all(dir)?;
    let ds = generate_benchmark(&cfg.benchmark())?;
    let mut written = Vec::new();
    for (split, manifest, _) in paths {
        save_manifest(&ds, &manifest, Some(split), PayloadStyle::Raw)?;
        written.push(manifest);
    }
    write_resolved_config(cfg, dir)?;
    Ok(written)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let rules = DatasetRules { min_samples_per_composition: cfg.dataset.min_samples_per_composition };
    let files: Vec<PathBuf> = match cfg.dataset.source {
        DataSource::Synthetic => split_paths(&cfg.dataset.dir).into_iter().map(|(_, m, _)| m).collect(),
        DataSource::Manifest => cfg.dataset.manifests.clone(),
    };
    if let Some(missing) = files.iter().find(|p| !p.exists()) {
        return Err(CliError::Data(format!("{} not found; run `czsl generate` first", missing.display())));
    }
    Ok(load_manifests(&files, rules)?)
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

fn embedding_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "embeddings")
}

/// Loads the cached backbone of `seed`, pretraining it first if absent.
pub fn ensure_backbone(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Backbone, CliError> {
    let dir = seed_dir(cfg, seed);
    let path = dir.join("backbone.ckpt");
    if path.exists() {
        return Ok(Backbone::from_params(ParamTree::load(&path)?, true)?);
    }
    fs::create_dir_all(&dir)?;
    let mut rng = rng_for(seed, "pretrain");
    let (bb, log) = pretrain_backbone(ds, Split::Train, &cfg.pretrain.channels, &cfg.pretrain.config(), &mut rng)?;
    write_atomic(&path, &bb.params().to_bytes())?;
    let log = serde_json::to_string_pretty(&log).expect("log serializes");
    write_atomic(&dir.join("pretrain_log.json"), log.as_bytes())?;
    Ok(bb)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(), CliError> {
    write_resolved_config(cfg, &cfg.output_dir)?;
    for &s in &cfg.evaluation.seeds {
        ensure_backbone(cfg, ds, s)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    next_episode: usize,
    best: Option<(f64, usize)>,
    adam_t: Option<u64>,
    log: Vec<LogEntry>,
}

fn prefixed(tree: &ParamTree, prefix: &str, out: &mut ParamTree) {
    for (n, t) in tree.iter() {
        out.insert(format!("{prefix}/{n}"), t.clone());
    }
}

fn unprefixed(tree: &ParamTree, prefix: &str) -> ParamTree {
    let p = format!("{prefix}/");
    tree.iter().filter_map(|(n, t)| n.strip_prefix(&p).map(|k| (k.to_string(), t.clone()))).collect()
}

fn save_state(dir: &Path, s: &TrainState) -> Result<(), CliError> {
    let mut tree = ParamTree::new();
    prefixed(&s.theta, "theta", &mut tree);
    if let Some(b) = &s.best {
        prefixed(&b.theta, "best", &mut tree);
    }
    if let Some(a) = &s.adam {
        prefixed(&a.m, "adam.m", &mut tree);
        prefixed(&a.v, "adam.v", &mut tree);
    }
    let meta = StateMeta {
        next_episode: s.next_episode,
        best: s.best.as_ref().map(|b| (b.val_hm, b.episode)),
        adam_t: s.adam.as_ref().map(|a| a.t),
        log: s.log.clone(),
    };
    write_atomic(&dir.join("train_state.ckpt"), &tree.to_bytes())?;
    write_atomic(&dir.join("train_state.json"), serde_json::to_string(&meta).expect("state serializes").as_bytes())
}

fn load_state(dir: &Path) -> Result<Option<TrainState>, CliError> {
    let (ck, js) = (dir.join("train_state.ckpt"), dir.join("train_state.json"));
    if !ck.exists() || !js.exists() {
        return Ok(None);
    }
    let tree = ParamTree::load(&ck)?;
    let meta: StateMeta =
        serde_json::from_str(&fs::read_to_string(&js)?).map_err(|e| CliError::Io(format!("{}: {e}", js.display())))?;
    let best = meta.best.map(|(val_hm, episode)| Best { theta: unprefixed(&tree, "best"), val_hm, episode });
    let adam = meta.adam_t.map(|t| AdamState { t, m: unprefixed(&tree, "adam.m"), v: unprefixed(&tree, "adam.v") });
    Ok(Some(TrainState { next_episode: meta.next_episode, theta: unprefixed(&tree, "theta"), best, adam, log: meta.log }))
}

/// Meta-trains one model per seed and writes `theta.ckpt` and the log.
pub fn cmd_train(cfg: &ExperimentConfig, ds: &Dataset, resume: bool) -> Result<(), CliError> {
    write_resolved_config(cfg, &cfg.output_dir)?;
    for &s in &cfg.evaluation.seeds {
        let dir = seed_dir(cfg, s);
        let backbone = ensure_backbone(cfg, ds, s)?;
        let config = cfg.model_config();
        let theta = init_params(&config, &mut rng_for(s, "model-init"));
        let model = Model { theta, backbone, config, embedding_seed: embedding_seed(cfg) };
        let ctx = Context::for_model(ds, &model)?;
        let state = if resume { load_state(&dir)? } else { None };
        let tcfg = cfg.training.config(derive_seed(s, "train"));
        let out = train_resumable(&ctx, model, &tcfg, &cfg.episode.config(), state, |st| {
            save_state(&dir, st).map_err(|e| czsl::metalearn::MetaError::InvalidConfig(e.to_string()))
        })?;
        write_atomic(&dir.join("theta.ckpt"), &out.model.theta.to_bytes())?;
        let mut log = String::from("# episode inner_loss outer_loss val_hm\n");
        for e in &out.log {
            log.push_str(&format!("{e}\n"));
        }
        write_atomic(&dir.join("train_log.txt"), log.as_bytes())?;
    }
    Ok(())
}

fn evaluate_seed(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<MetricsReport, CliError> {
    let dir = seed_dir(cfg, seed);
    let backbone = ensure_backbone(cfg, ds, seed)?;
    let ctx = Context::new(ds, &backbone, cfg.dataset.embedding_dim, embedding_seed(cfg))?;
    let episodes = sample_episodes(ds, Split::Test, &cfg.episode.config(), cfg.evaluation.n_test_episodes, derive_seed(seed, "test-episodes"))?;
    match cfg.method {
        Method::Ours => {
            let path = dir.join("theta.ckpt");
            if !path.exists() {
                return Err(CliError::Data(format!("{} not found; run `czsl train` first", path.display())));
            }
            let model = Model { theta: ParamTree::load(&path)?, backbone, config: cfg.model_config(), embedding_seed: embedding_seed(cfg) };
            Ok(evaluate_episodes(&ctx, &model, &cfg.training.config(0).adapt(), &episodes)?)
        }
        Method::Visprod | Method::Le => {
            let base = derive_seed(seed, "baseline");
            let mut results = Vec::with_capacity(episodes.len());
            for (k, e) in episodes.iter().enumerate() {
                let mut rng = indexed_rng(base, k);
                let pred = if cfg.method == Method::Visprod {
                    visprod_fit_infer(&ctx, e, &cfg.baseline, &mut rng)?
                } else {
                    le_fit_infer(&ctx, e, &cfg.baseline, &mut rng)?
                };
                results.push(EpisodeResult::from_episode(e, &pred)?);
            }
            Ok(aggregate(&results)?)
        }
    }
}

/// Evaluates every seed and writes `results.jsonl` plus `report.txt`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Record>, CliError> {
    write_resolved_config(cfg, &cfg.output_dir)?;
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for &s in &cfg.evaluation.seeds {
        let metrics = evaluate_seed(cfg, ds, s)?;
        reports.push(metrics.clone());
        records.push(Record::Result(ResultRecord {
            method: cfg.method.name().to_string(),
            n_p: cfg.episode.n_p,
            k_s: cfg.episode.k_s,
            k_q: cfg.episode.k_q,
            seed: s,
            metrics,
        }));
    }
    if reports.len() > 1 {
        records.push(Record::Summary(SummaryRecord {
            method: cfg.method.name().to_string(),
            k_s: cfg.episode.k_s,
            summary: seed_summary(&reports),
        }));
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(&cfg.output_dir.join("results.jsonl"), text.as_bytes())?;
    write_atomic(&cfg.output_dir.join("report.txt"), render_table(&records).as_bytes())?;
    Ok(records)
}

/// Pretrain (unless cached), meta-train for `ours`, then evaluate.
pub fn cmd_run(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<Record>, CliError> {
    let ds = load_dataset(cfg)?;
    cmd_pretrain(cfg, &ds)?;
    if cfg.method == Method::Ours {
        cmd_train(cfg, &ds, resume)?;
    }
    cmd_evaluate(cfg, &ds)
}
