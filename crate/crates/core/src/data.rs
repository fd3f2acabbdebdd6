//! Synthetic catalogs, multi-behavior user sequences, the item-behavior
//! graph and candidate-set evaluation instances.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmf_autodiff::Tensor;

use crate::encoders::{cosine, EncoderConfig, ModalityEmbeddings};
use crate::error::io_err;
use crate::seed;
use crate::{Result, TmfError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    View,
    AddToCart,
    Purchase,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::View, Behavior::AddToCart, Behavior::Purchase];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Verb phrase used when rendering prompts.
    pub fn verb(self) -> &'static str {
        match self {
            Behavior::View => "views",
            Behavior::AddToCart => "adds to cart",
            Behavior::Purchase => "purchases",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    #[serde(rename = "item_id")]
    pub id: u32,
    pub name: String,
    pub category: u32,
    pub latent: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u32,
    pub history: Vec<(u32, Behavior)>,
    pub target_item_id: u32,
}

impl UserSequence {
    pub fn target_behavior(&self) -> Behavior {
        Behavior::Purchase
    }

    pub fn history_items(&self) -> impl Iterator<Item = u32> + '_ {
        self.history.iter().map(|&(i, _)| i)
    }
}

/// One line of `train.jsonl` / `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    #[serde(flatten)]
    pub sequence: UserSequence,
    pub candidates: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub item_id: u32,
    pub behavior: Behavior,
    pub weight: u32,
}

/// Bipartite item/behavior graph; edges sorted by `(item_id, behavior)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemBehaviorGraph {
    pub edges: Vec<GraphEdge>,
}

impl ItemBehaviorGraph {
    pub fn weight(&self, item: u32, b: Behavior) -> u32 {
        self.edges
            .iter()
            .find(|e| e.item_id == item && e.behavior == b)
            .map_or(0, |e| e.weight)
    }
}

const ADJECTIVES: [&str; 48] = [
    "grey", "athletic", "cozy", "rugged", "sleek", "vintage", "compact", "deluxe", "bright", "silent",
    "rapid", "gentle", "bold", "classic", "smart", "sturdy", "soft", "crisp", "golden", "mellow",
    "wild", "polished", "urban", "rustic", "electric", "frosty", "sunny", "velvet", "crimson", "azure",
    "amber", "ivory", "nimble", "hefty", "tiny", "grand", "mossy", "sandy", "stormy", "lunar",
    "solar", "coastal", "alpine", "prairie", "jade", "copper", "silver", "scarlet",
];

const NOUNS: [&str; 48] = [
    "shirt", "kettle", "lamp", "backpack", "blender", "speaker", "jacket", "mug", "pillow", "drone",
    "camera", "leash", "collar", "bowl", "helmet", "racket", "glove", "bottle", "tent", "scarf",
    "watch", "charger", "keyboard", "mouse", "sneaker", "blanket", "toaster", "router", "monitor", "stool",
    "brush", "kite", "ball", "towel", "candle", "clock", "fan", "heater", "radio", "wallet",
    "sofa", "crate", "harness", "saddle", "paddle", "skates", "goggles", "rope",
];

/// Maximum number of distinct names: every adjective/noun pair, bare or
/// with one of the suffixes 2..=9.
pub const NAME_CAPACITY: usize = ADJECTIVES.len() * NOUNS.len() * 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    /// Spread of item latents around their category centroid.
    pub category_spread: f32,
    pub n_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Inverse temperature of the intent-driven item choice.
    pub intent_beta: f32,
    /// Spread of a user's intent around the centroid of a random category.
    pub intent_spread: f32,
    /// Marginals for view / add-to-cart / purchase.
    pub behavior_weights: [f64; 3],
    /// Target blend weights for image / text / graph similarity.
    pub blend_weights: [f64; 3],
    pub eval_fraction: f64,
    pub n_negatives: usize,
    pub encoder: EncoderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_items: 500,
            n_categories: 16,
            latent_dim: 8,
            category_spread: 0.6,
            n_users: 2000,
            min_len: 4,
            max_len: 24,
            intent_beta: 6.0,
            intent_spread: 0.8,
            behavior_weights: [0.6, 0.3, 0.1],
            blend_weights: [0.4, 0.3, 0.3],
            eval_fraction: 0.1,
            n_negatives: 10,
            encoder: EncoderConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 20 {
            return Err(TmfError::Config(format!("n_items = {} must be at least 20", self.n_items)));
        }
        if self.latent_dim < 4 {
            return Err(TmfError::Config(format!("latent_dim = {} must be at least 4", self.latent_dim)));
        }
        if self.n_categories == 0 || self.n_categories > self.n_items {
            return Err(TmfError::Config(format!("n_categories = {} out of range", self.n_categories)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TmfError::Config(format!(
                "length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.n_users < 2 {
            return Err(TmfError::Config("need at least 2 users".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(TmfError::Config(format!("eval_fraction = {} out of [0, 1)", self.eval_fraction)));
        }
        if self.behavior_weights.iter().any(|&w| w < 0.0) || self.behavior_weights.iter().sum::<f64>() <= 0.0 {
            return Err(TmfError::Config("behavior weights must be nonnegative with positive sum".into()));
        }
        self.encoder.validate(self.latent_dim)
    }
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, k: usize) -> Vec<f32> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn centroids(seed: u64, n_categories: usize, k: usize) -> Vec<Vec<f32>> {
    let mut rng = seed::rng(seed, "centroids", 0);
    (0..n_categories)
        .map(|_| {
            let mut c = gaussian_vec(&mut rng, k);
            normalize(&mut c);
            c
        })
        .collect()
}

/// Adjectives reserved for one category; categories beyond the list length
/// share pools cyclically.
fn adjective_pool(category: usize, n_categories: usize) -> &'static [&'static str] {
    let per = (ADJECTIVES.len() / n_categories.min(ADJECTIVES.len())).max(1);
    let start = (category * per) % ADJECTIVES.len();
    &ADJECTIVES[start..(start + per).min(ADJECTIVES.len())]
}

pub fn gen_catalog(seed: u64, n_items: usize, n_categories: usize, k: usize, spread: f32) -> Result<Vec<Item>> {
    if n_items < 20 || k < 4 || n_categories == 0 {
        return Err(TmfError::Config(format!(
            "gen_catalog needs n_items >= 20, k >= 4, n_categories >= 1 (got {n_items}, {k}, {n_categories})"
        )));
    }
    if n_items > NAME_CAPACITY {
        return Err(TmfError::Capacity(format!(
            "{n_items} items exceed the name space of {NAME_CAPACITY}"
        )));
    }
    let cents = centroids(seed, n_categories, k);
    let mut rng = seed::rng(seed, "catalog", 0);
    let mut taken: HashSet<String> = HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    let scale = spread / (k as f32).sqrt();
    for id in 0..n_items {
        let category = id % n_categories;
        let mut latent = cents[category].clone();
        for (l, z) in latent.iter_mut().zip(gaussian_vec(&mut rng, k)) {
            *l += scale * z;
        }
        normalize(&mut latent);
        let name = pick_name(&mut rng, adjective_pool(category, n_categories), &taken)?;
        taken.insert(name.clone());
        items.push(Item {
            id: id as u32,
            name,
            category: category as u32,
            latent,
        });
    }
    Ok(items)
}

fn pick_name<R: Rng>(rng: &mut R, pool: &[&str], taken: &HashSet<String>) -> Result<String> {
    let adj = pool[rng.random_range(0..pool.len())];
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    let base = format!("{adj} {noun}");
    if !taken.contains(&base) {
        return Ok(base);
    }
    // first free bare pair within the pool, then suffixed names
    let mut pairs: Vec<String> = pool
        .iter()
        .flat_map(|a| NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect();
    pairs.shuffle(rng);
    if let Some(free) = pairs.iter().find(|p| !taken.contains(*p)) {
        return Ok(free.clone());
    }
    for suffix in 2..=9 {
        let name = format!("{base} {suffix}");
        if !taken.contains(&name) {
            return Ok(name);
        }
        if let Some(free) = pairs.iter().map(|p| format!("{p} {suffix}")).find(|p| !taken.contains(p)) {
            return Ok(free);
        }
    }
    // the category pool is exhausted; fall back to the full word lists
    for suffix in std::iter::once(String::new()).chain((2..=9).map(|s| format!(" {s}"))) {
        for a in ADJECTIVES {
            for n in NOUNS {
                let name = format!("{a} {n}{suffix}");
                if !taken.contains(&name) {
                    return Ok(name);
                }
            }
        }
    }
    Err(TmfError::Capacity("name space exhausted".into()))
}

/// Histories drawn from per-user intents, before targets exist.
fn draw_histories(cfg: &DataConfig, catalog: &[Item]) -> Vec<Vec<(u32, Behavior)>> {
    let k = cfg.latent_dim;
    let cents = centroids(cfg.seed, cfg.n_categories, k);
    let beh_total: f64 = cfg.behavior_weights.iter().sum();
    (0..cfg.n_users)
        .map(|u| {
            let mut rng = seed::rng(cfg.seed, "user", u as u64);
            let c = rng.random_range(0..cfg.n_categories);
            let mut intent = cents[c].clone();
            let scale = cfg.intent_spread / (k as f32).sqrt();
            for (x, z) in intent.iter_mut().zip(gaussian_vec(&mut rng, k)) {
                *x += scale * z;
            }
            normalize(&mut intent);
            let logits: Vec<f64> = catalog
                .iter()
                .map(|it| {
                    let dot: f32 = it.latent.iter().zip(&intent).map(|(a, b)| a * b).sum();
                    (cfg.intent_beta * dot) as f64
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut cdf = Vec::with_capacity(logits.len());
            let mut acc = 0.0;
            for l in &logits {
                acc += (l - max).exp();
                cdf.push(acc);
            }
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut history: Vec<(u32, Behavior)> = (0..len)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() * acc;
                    let item = cdf.partition_point(|&c| c < u).min(catalog.len() - 1);
                    let r: f64 = rng.random::<f64>() * beh_total;
                    let b = if r < cfg.behavior_weights[0] {
                        Behavior::View
                    } else if r < cfg.behavior_weights[0] + cfg.behavior_weights[1] {
                        Behavior::AddToCart
                    } else {
                        Behavior::Purchase
                    };
                    (item as u32, b)
                })
                .collect();
            // every history carries at least one purchase
            if !history.iter().any(|&(_, b)| b == Behavior::Purchase) {
                let at = rng.random_range(0..history.len());
                history[at].1 = Behavior::Purchase;
            }
            history
        })
        .collect()
}

pub fn build_graph(sequences: &[UserSequence]) -> ItemBehaviorGraph {
    graph_from_histories(sequences.iter().map(|s| s.history.as_slice()))
}

fn graph_from_histories<'a>(histories: impl Iterator<Item = &'a [(u32, Behavior)]>) -> ItemBehaviorGraph {
    let mut counts: BTreeMap<(u32, Behavior), u32> = BTreeMap::new();
    for h in histories {
        for &(item, b) in h {
            *counts.entry((item, b)).or_default() += 1;
        }
    }
    ItemBehaviorGraph {
        edges: counts
            .into_iter()
            .map(|((item_id, behavior), weight)| GraphEdge {
                item_id,
                behavior,
                weight,
            })
            .collect(),
    }
}

/// Which views a similarity scorer consults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scorer {
    pub weights: [f64; 3],
}

impl Scorer {
    pub const IMAGE: Scorer = Scorer { weights: [1.0, 0.0, 0.0] };
    pub const TEXT: Scorer = Scorer { weights: [0.0, 1.0, 0.0] };
    pub const GRAPH: Scorer = Scorer { weights: [0.0, 0.0, 1.0] };

    /// Scores every non-history item: per view, cosine between the mean
    /// history embedding and the item embedding, z-scored over the pool,
    /// then mixed with `weights`.
    pub fn scores(&self, history: &[(u32, Behavior)], emb: &ModalityEmbeddings) -> Vec<(u32, f64)> {
        let seen: BTreeSet<u32> = history.iter().map(|&(i, _)| i).collect();
        let pool: Vec<u32> = (0..emb.n_items() as u32).filter(|i| !seen.contains(i)).collect();
        let mut total = vec![0.0f64; pool.len()];
        let tables = [&emb.image, &emb.text, &emb.graph];
        for (table, &w) in tables.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let profile = mean_rows(table, history.iter().map(|&(i, _)| i as usize));
            let sims: Vec<f64> = pool.iter().map(|&j| cosine(&profile, table.row(j as usize))).collect();
            let n = sims.len() as f64;
            let mean = sims.iter().sum::<f64>() / n;
            let sd = (sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            for (t, s) in total.iter_mut().zip(&sims) {
                *t += w * if sd > 0.0 { (s - mean) / sd } else { 0.0 };
            }
        }
        pool.into_iter().zip(total).collect()
    }

    /// Highest-scoring non-history item; ties go to the lowest id.
    pub fn top1(&self, history: &[(u32, Behavior)], emb: &ModalityEmbeddings) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for (i, s) in self.scores(history, emb) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }
}

fn mean_rows(table: &Tensor, rows: impl Iterator<Item = usize>) -> Vec<f32> {
    let mut acc = vec![0.0f64; table.cols()];
    let mut n = 0usize;
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(table.row(r)) {
            *a += v as f64;
        }
        n += 1;
    }
    acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect()
}

/// Fills in targets for drawn histories using the blended scorer.
pub fn gen_sequences(
    cfg: &DataConfig,
    catalog: &[Item],
) -> Result<(Vec<UserSequence>, ItemBehaviorGraph, ModalityEmbeddings)> {
    if catalog.is_empty() {
        return Err(TmfError::Usage("cannot generate sequences from an empty catalog".into()));
    }
    cfg.validate()?;
    let histories = draw_histories(cfg, catalog);
    let graph = graph_from_histories(histories.iter().map(Vec::as_slice));
    let emb = ModalityEmbeddings::build(catalog, &graph, &cfg.encoder)?;
    let scorer = Scorer {
        weights: cfg.blend_weights,
    };
    let mut seqs = Vec::with_capacity(histories.len());
    for (u, history) in histories.into_iter().enumerate() {
        let target = scorer
            .top1(&history, &emb)
            .ok_or_else(|| TmfError::Capacity(format!("user {u} has interacted with every item")))?;
        seqs.push(UserSequence {
            user_id: u as u32,
            history,
            target_item_id: target,
        });
    }
    Ok((seqs, graph, emb))
}

/// Samples `n_negatives` items outside the history and target, inserts the
/// target and shuffles.
pub fn sample_candidates<R: Rng>(rng: &mut R, seq: &UserSequence, n_items: usize, n_negatives: usize) -> Result<Vec<u32>> {
    let mut excluded: HashSet<u32> = seq.history_items().collect();
    excluded.insert(seq.target_item_id);
    let free = n_items.saturating_sub(excluded.len());
    if free < n_negatives {
        return Err(TmfError::Capacity(format!(
            "user {} has only {free} non-interacted items, {n_negatives} negatives needed",
            seq.user_id
        )));
    }
    let mut cands = Vec::with_capacity(n_negatives + 1);
    while cands.len() < n_negatives {
        let j = rng.random_range(0..n_items as u32);
        if excluded.insert(j) {
            cands.push(j);
        }
    }
    cands.push(seq.target_item_id);
    cands.shuffle(rng);
    Ok(cands)
}

pub fn make_eval_instances(seed: u64, sequences: &[UserSequence], catalog: &[Item]) -> Result<Vec<EvalInstance>> {
    make_instances(seed, sequences, catalog.len(), 10)
}

pub fn make_instances(seed: u64, sequences: &[UserSequence], n_items: usize, n_negatives: usize) -> Result<Vec<EvalInstance>> {
    sequences
        .iter()
        .map(|s| {
            let mut rng = seed::rng(seed, "candidates", s.user_id as u64);
            Ok(EvalInstance {
                candidates: sample_candidates(&mut rng, s, n_items, n_negatives)?,
                sequence: s.clone(),
            })
        })
        .collect()
}

/// Everything produced by `gen-data`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub catalog: Vec<Item>,
    pub train: Vec<EvalInstance>,
    pub eval: Vec<EvalInstance>,
    pub graph: ItemBehaviorGraph,
    pub embeddings: ModalityEmbeddings,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingManifest {
    encoder: EncoderConfig,
    n_items: usize,
    n_behaviors: usize,
    tables: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let catalog = gen_catalog(cfg.seed, cfg.n_items, cfg.n_categories, cfg.latent_dim, cfg.category_spread)?;
        let (seqs, graph, embeddings) = gen_sequences(cfg, &catalog)?;
        let n_eval = ((cfg.n_users as f64 * cfg.eval_fraction).round() as usize).clamp(1, cfg.n_users - 1);
        let split = cfg.n_users - n_eval;
        let train = make_instances(cfg.seed ^ 0x7472_6169_6e, &seqs[..split], catalog.len(), cfg.n_negatives)?;
        let eval = make_instances(cfg.seed, &seqs[split..], catalog.len(), cfg.n_negatives)?;
        Ok(Self {
            config: cfg.clone(),
            catalog,
            train,
            eval,
            graph,
            embeddings,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        write_file(&dir.join("dataset.json"), cfg.as_bytes())?;
        write_jsonl(&dir.join("catalog.jsonl"), &self.catalog)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("eval.jsonl"), &self.eval)?;
        write_jsonl(&dir.join("graph.jsonl"), &self.graph.edges)?;
        let emb = &self.embeddings;
        let mut blob = Vec::new();
        let mut tables = Vec::new();
        for (name, t) in [
            ("image", &emb.image),
            ("text", &emb.text),
            ("graph", &emb.graph),
            ("behavior", &emb.behavior),
        ] {
            tables.push(TableEntry {
                name: name.into(),
                rows: t.rows(),
                cols: t.cols(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = EmbeddingManifest {
            encoder: emb.config.clone(),
            n_items: emb.n_items(),
            n_behaviors: Behavior::ALL.len(),
            tables,
        };
        let m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join("embeddings.json"), m.as_bytes())?;
        write_file(&dir.join("embeddings.bin"), &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.json");
        let config: DataConfig = read_json(&cfg_path)?;
        let catalog: Vec<Item> = read_jsonl(&dir.join("catalog.jsonl"))?;
        let train = read_jsonl(&dir.join("train.jsonl"))?;
        let eval = read_jsonl(&dir.join("eval.jsonl"))?;
        let graph = ItemBehaviorGraph {
            edges: read_jsonl(&dir.join("graph.jsonl"))?,
        };
        let m_path = dir.join("embeddings.json");
        let manifest: EmbeddingManifest = read_json(&m_path)?;
        let b_path = dir.join("embeddings.bin");
        let blob = fs::read(&b_path).map_err(io_err(&b_path))?;
        let get = |name: &str| -> Result<Tensor> {
            let e = manifest
                .tables
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| TmfError::Integrity(format!("{}: missing table {name}", m_path.display())))?;
            let bytes = blob
                .get(e.offset..e.offset + e.rows * e.cols * 4)
                .ok_or_else(|| TmfError::Integrity(format!("{}: table {name} out of bounds", b_path.display())))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::matrix(e.rows, e.cols, data)?)
        };
        let embeddings = ModalityEmbeddings {
            config: manifest.encoder.clone(),
            image: get("image")?,
            text: get("text")?,
            graph: get("graph")?,
            behavior: get("behavior")?,
        };
        if embeddings.n_items() != catalog.len() {
            return Err(TmfError::Integrity(format!(
                "{} rows in embeddings but {} catalog items",
                embeddings.n_items(),
                catalog.len()
            )));
        }
        let ds = Self {
            config,
            catalog,
            train,
            eval,
            graph,
            embeddings,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Referential checks on loaded data.
    pub fn check(&self) -> Result<()> {
        let n = self.catalog.len() as u32;
        for inst in self.train.iter().chain(&self.eval) {
            let s = &inst.sequence;
            if s.history.is_empty() {
                return Err(TmfError::Integrity(format!("user {} has an empty history", s.user_id)));
            }
            if s.history_items().chain(inst.candidates.iter().copied()).any(|i| i >= n) || s.target_item_id >= n {
                return Err(TmfError::Lookup(format!("user {} references an unknown item", s.user_id)));
            }
            if !inst.candidates.contains(&s.target_item_id) {
                return Err(TmfError::Integrity(format!("user {}: target missing from candidates", s.user_id)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the persisted bytes of train, eval and catalog.
    pub fn content_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("catalog".into(), hash_jsonl(&self.catalog));
        out.insert("train".into(), hash_jsonl(&self.train));
        out.insert("eval".into(), hash_jsonl(&self.eval));
        out
    }
}

pub fn hash_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(serde_json::to_vec(r).expect("row serializes"));
        h.update(b"\n");
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|source| TmfError::Json {
            path: path.into(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TmfError::Json {
            path: path.into(),
            source,
        })?);
    }
    Ok(out)
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| TmfError::Json {
        path: path.into(),
        source,
    })
}

/// Top-1 agreement of single-view and blended scorers with the targets.
#[derive(Clone, Debug, Serialize)]
pub struct ModalityOracle {
    pub all: f64,
    pub image: f64,
    pub text: f64,
    pub graph: f64,
}

pub fn modality_oracle(seqs: &[UserSequence], emb: &ModalityEmbeddings, blend: [f64; 3]) -> ModalityOracle {
    let rate = |s: Scorer| {
        let hits = seqs
            .iter()
            .filter(|q| s.top1(&q.history, emb) == Some(q.target_item_id))
            .count();
        hits as f64 / seqs.len().max(1) as f64
    };
    ModalityOracle {
        all: rate(Scorer { weights: blend }),
        image: rate(Scorer::IMAGE),
        text: rate(Scorer::TEXT),
        graph: rate(Scorer::GRAPH),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: u32, history: Vec<(u32, Behavior)>, target: u32) -> UserSequence {
        UserSequence {
            user_id: user,
            history,
            target_item_id: target,
        }
    }

    #[test]
    fn catalog_is_deterministic_and_names_unique() {
        let a = gen_catalog(5, 100, 8, 8, 0.6).unwrap();
        let b = gen_catalog(5, 100, 8, 8, 0.6).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let names: HashSet<_> = a.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(names.len(), 100);
        for it in &a {
            assert!(it.name.split_whitespace().count() <= 4);
            let n: f32 = it.latent.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_catalog_is_a_capacity_error() {
        let err = gen_catalog(0, NAME_CAPACITY + 1, 4, 8, 0.6).unwrap_err();
        assert!(matches!(err, TmfError::Capacity(_)));
    }

    #[test]
    fn graph_counts_single_and_duplicate_edges() {
        let g = build_graph(&[seq(0, vec![(1, Behavior::View)], 2)]);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.weight(1, Behavior::View), 1);
        let g = build_graph(&[seq(0, vec![(1, Behavior::View), (1, Behavior::View)], 2)]);
        assert_eq!(g.weight(1, Behavior::View), 2);
    }

    #[test]
    fn candidates_exclude_history_and_contain_target() {
        let s = seq(3, vec![(0, Behavior::View), (1, Behavior::Purchase)], 2);
        let mut rng = seed::rng(1, "t", 0);
        let c = sample_candidates(&mut rng, &s, 30, 10).unwrap();
        assert_eq!(c.len(), 11);
        assert!(c.contains(&2));
        assert!(!c.contains(&0) && !c.contains(&1));
        let distinct: HashSet<_> = c.iter().collect();
        assert_eq!(distinct.len(), 11);
    }

    #[test]
    fn too_few_negatives_is_a_capacity_error() {
        let s = seq(0, vec![(0, Behavior::View)], 1);
        let mut rng = seed::rng(1, "t", 0);
        assert!(matches!(
            sample_candidates(&mut rng, &s, 8, 10),
            Err(TmfError::Capacity(_))
        ));
    }

    #[test]
    fn behavior_serializes_snake_case() {
        assert_eq!(serde_json::to_string(&Behavior::AddToCart).unwrap(), "\"add_to_cart\"");
        let inst = EvalInstance {
            sequence: seq(4, vec![(7, Behavior::View)], 9),
            candidates: vec![9],
        };
        let line = serde_json::to_string(&inst).unwrap();
        assert_eq!(
            line,
            r#"{"user_id":4,"history":[[7,"view"]],"target_item_id":9,"candidates":[9]}"#
        );
    }
}
