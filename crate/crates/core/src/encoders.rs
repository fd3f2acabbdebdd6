//! Frozen stand-ins for the pretrained modality encoders.
//!
//! Image and text views are noisy orthonormal projections of each item's
//! hidden latent vector. The graph view comes from K-step symmetric
//! normalised propagation over the weighted item-behavior graph.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tmf_autodiff::Tensor;

use crate::data::{Behavior, Item, ItemBehaviorGraph};
use crate::seed;
use crate::{Result, TmfError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Random,
    /// `latent` copied into the first `k` coordinates, zeros after.
    IdentityPadded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_g: usize,
    pub sigma: f32,
    pub hops: usize,
    pub seed: u64,
    #[serde(default)]
    pub projection: Projection,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_t: 16,
            d_g: 8,
            sigma: 0.1,
            hops: 2,
            seed: 0,
            projection: Projection::Random,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.d_v != self.d_t {
            return Err(TmfError::Config(format!(
                "image and text dims must agree (d_v = {}, d_t = {})",
                self.d_v, self.d_t
            )));
        }
        if self.d_v < latent_dim {
            return Err(TmfError::Config(format!(
                "d_v = {} is smaller than the latent dim {latent_dim}",
                self.d_v
            )));
        }
        if self.d_g == 0 {
            return Err(TmfError::Config("d_g must be positive".into()));
        }
        Ok(())
    }
}

/// Projection-plus-noise encoder for one view (image or text).
#[derive(Clone, Debug)]
pub struct ViewEncoder {
    label: &'static str,
    seed: u64,
    sigma: f32,
    k: usize,
    dim: usize,
    /// `k × dim`, orthonormal rows.
    projection: Vec<f32>,
}

impl ViewEncoder {
    fn new(label: &'static str, cfg: &EncoderConfig, k: usize, dim: usize) -> Result<Self> {
        cfg.validate(k)?;
        let projection = match cfg.projection {
            Projection::IdentityPadded => {
                let mut p = vec![0.0; k * dim];
                for i in 0..k {
                    p[i * dim + i] = 1.0;
                }
                p
            }
            Projection::Random => orthonormal_rows(&mut seed::rng(cfg.seed, label, 0), k, dim),
        };
        Ok(Self {
            label,
            seed: cfg.seed,
            sigma: cfg.sigma,
            k,
            dim,
            projection,
        })
    }

    pub fn image(cfg: &EncoderConfig, latent_dim: usize) -> Result<Self> {
        Self::new("image-projection", cfg, latent_dim, cfg.d_v)
    }

    pub fn text(cfg: &EncoderConfig, latent_dim: usize) -> Result<Self> {
        Self::new("text-projection", cfg, latent_dim, cfg.d_t)
    }

    pub fn encode(&self, item: &Item) -> Result<Vec<f32>> {
        if item.latent.len() != self.k {
            return Err(TmfError::Config(format!(
                "item {} has latent dim {}, encoder expects {}",
                item.id,
                item.latent.len(),
                self.k
            )));
        }
        let mut out = vec![0.0f32; self.dim];
        for (p, &z) in item.latent.iter().enumerate() {
            let row = &self.projection[p * self.dim..(p + 1) * self.dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += z * w;
            }
        }
        if self.sigma > 0.0 {
            let mut rng = seed::rng(self.seed, self.label, item.id as u64 + 1);
            for o in &mut out {
                let eta: f32 = StandardNormal.sample(&mut rng);
                *o += self.sigma * eta;
            }
        }
        Ok(out)
    }
}

fn orthonormal_rows<R: Rng>(rng: &mut R, k: usize, dim: usize) -> Vec<f32> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    rows.into_iter().flatten().map(|x| x as f32).collect()
}

pub fn encode_image(item: &Item, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    ViewEncoder::image(cfg, item.latent.len())?.encode(item)
}

pub fn encode_text(item: &Item, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    ViewEncoder::text(cfg, item.latent.len())?.encode(item)
}

/// Weighted undirected adjacency in adjacency-list form.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<(usize, f32)>>,
}

impl Adjacency {
    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Item nodes first (`0..n_items`), then one node per behavior type.
    pub fn from_graph(graph: &ItemBehaviorGraph, n_items: usize) -> Self {
        let mut neighbors = vec![Vec::new(); n_items + Behavior::ALL.len()];
        for e in &graph.edges {
            let item = e.item_id as usize;
            let beh = n_items + e.behavior.index();
            neighbors[item].push((beh, e.weight as f32));
            neighbors[beh].push((item, e.weight as f32));
        }
        Self { neighbors }
    }
}

/// `X_{k+1} = D^{-1/2} A D^{-1/2} X_k`, `hops` times. Isolated nodes keep
/// their initial features.
pub fn propagate(adj: &Adjacency, x0: &Tensor, hops: usize) -> Result<Tensor> {
    let n = adj.n_nodes();
    if x0.rows() != n {
        return Err(TmfError::Config(format!(
            "feature rows {} do not match {n} graph nodes",
            x0.rows()
        )));
    }
    let d = x0.cols();
    let deg: Vec<f64> = adj
        .neighbors
        .iter()
        .map(|ns| ns.iter().map(|&(_, w)| w as f64).sum())
        .collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&x| if x > 0.0 { x.sqrt().recip() } else { 0.0 }).collect();
    let mut x: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
    for _ in 0..hops {
        let mut next = vec![0.0f64; n * d];
        for (i, ns) in adj.neighbors.iter().enumerate() {
            let out = &mut next[i * d..(i + 1) * d];
            for &(j, w) in ns {
                let c = w as f64 * inv_sqrt[i] * inv_sqrt[j];
                for (o, &v) in out.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                    *o += c * v;
                }
            }
        }
        x = next;
    }
    let mut out: Vec<f32> = x.into_iter().map(|v| v as f32).collect();
    for i in 0..n {
        if deg[i] == 0.0 {
            out[i * d..(i + 1) * d].copy_from_slice(x0.row(i));
        }
    }
    Ok(Tensor::matrix(n, d, out)?)
}

/// Seeded initial node features, `N(0, 1/d_g)` per entry.
pub fn initial_node_features(n_nodes: usize, d_g: usize, init_seed: u64) -> Tensor {
    let mut rng = seed::rng(init_seed, "graph-init", 0);
    let scale = (d_g as f32).sqrt().recip();
    let data = (0..n_nodes * d_g)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Tensor::matrix(n_nodes, d_g, data).expect("finite gaussian draws")
}

/// Returns `(item rows, behavior rows)` of the propagated features.
pub fn encode_graph(
    graph: &ItemBehaviorGraph,
    n_items: usize,
    d_g: usize,
    init_seed: u64,
    hops: usize,
) -> Result<(Tensor, Tensor)> {
    let adj = Adjacency::from_graph(graph, n_items);
    let x0 = initial_node_features(adj.n_nodes(), d_g, init_seed);
    let xk = propagate(&adj, &x0, hops)?;
    let items = Tensor::matrix(n_items, d_g, xk.data()[..n_items * d_g].to_vec())?;
    let behaviors = Tensor::matrix(Behavior::ALL.len(), d_g, xk.data()[n_items * d_g..].to_vec())?;
    Ok((items, behaviors))
}

/// Per-item and per-behavior embedding tables consumed by the fusion
/// module and the adaptors. Graph rows are rescaled to unit L2 norm so the
/// three views enter the concatenation at comparable magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbeddings {
    pub config: EncoderConfig,
    pub image: Tensor,
    pub text: Tensor,
    pub graph: Tensor,
    pub behavior: Tensor,
}

impl ModalityEmbeddings {
    pub fn build(catalog: &[Item], graph: &ItemBehaviorGraph, cfg: &EncoderConfig) -> Result<Self> {
        let k = catalog
            .first()
            .map(|i| i.latent.len())
            .ok_or_else(|| TmfError::Usage("empty catalog".into()))?;
        for (idx, item) in catalog.iter().enumerate() {
            if item.id as usize != idx {
                return Err(TmfError::Integrity(format!("catalog item {idx} has id {}", item.id)));
            }
        }
        let img = ViewEncoder::image(cfg, k)?;
        let txt = ViewEncoder::text(cfg, k)?;
        let mut image = Vec::with_capacity(catalog.len() * cfg.d_v);
        let mut text = Vec::with_capacity(catalog.len() * cfg.d_t);
        for item in catalog {
            image.extend(img.encode(item)?);
            text.extend(txt.encode(item)?);
        }
        let (g_items, g_beh) = encode_graph(graph, catalog.len(), cfg.d_g, cfg.seed, cfg.hops)?;
        Ok(Self {
            config: cfg.clone(),
            image: Tensor::matrix(catalog.len(), cfg.d_v, image)?,
            text: Tensor::matrix(catalog.len(), cfg.d_t, text)?,
            graph: unit_rows(&g_items)?,
            behavior: unit_rows(&g_beh)?,
        })
    }

    pub fn n_items(&self) -> usize {
        self.image.rows()
    }

    pub fn image_row(&self, item: u32) -> &[f32] {
        self.image.row(item as usize)
    }

    pub fn text_row(&self, item: u32) -> &[f32] {
        self.text.row(item as usize)
    }

    pub fn graph_row(&self, item: u32) -> &[f32] {
        self.graph.row(item as usize)
    }

    pub fn behavior_row(&self, b: Behavior) -> &[f32] {
        self.behavior.row(b.index())
    }
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(Tensor::matrix(t.rows(), d, data)?)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
