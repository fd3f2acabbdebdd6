// Independent reference implementations used by several test targets.
// Nothing here calls into the tape; matrices are plain nested f64 vectors.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn cols(m: &Mat) -> usize {
    m[0].len()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax(q kᵀ / √d_k) v`, weights first.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let scale = (cols(k) as f64).sqrt();
    let w: Mat = q
        .iter()
        .map(|qi| softmax(&k.iter().map(|kj| dot(qi, kj) / scale).collect::<Vec<_>>()))
        .collect();
    let out = w
        .iter()
        .map(|wi| {
            (0..cols(v))
                .map(|c| wi.iter().zip(v).map(|(a, vr)| a * vr[c]).sum())
                .collect()
        })
        .collect();
    (out, w)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|ar| (0..cols(b)).map(|c| ar.iter().zip(b).map(|(x, br)| x * br[c]).sum()).collect())
        .collect()
}

pub fn concat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

fn col_block(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn multi_head(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let dh = cols(q) / heads;
    let outs: Vec<Mat> = (0..heads)
        .map(|h| attention(&col_block(q, h * dh, dh), &col_block(k, h * dh, dh), &col_block(v, h * dh, dh)).0)
        .collect();
    let refs: Vec<&Mat> = outs.iter().collect();
    concat(&refs)
}

pub struct FusionOracle {
    pub amsa: Mat,
    pub query: Mat,
    pub first: Mat,
    pub output: Mat,
}

/// Concatenate, self-attend, project with `w_q`, then attend over image keys
/// with text values and over text keys with image values.
pub fn fusion_oracle(image: &Mat, text: &Mat, graph: &Mat, w_q: &Mat, heads: usize) -> FusionOracle {
    let vm = concat(&[image, text, graph]);
    let (amsa, _) = attention(&vm, &vm, &vm);
    let query = matmul(&amsa, w_q);
    let first = multi_head(&query, image, text, heads);
    let output = multi_head(&first, text, image, heads);
    FusionOracle {
        amsa,
        query,
        first,
        output,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub mod fixtures {
    use tmf_core::data::{DataConfig, Dataset};
    use tmf_core::fusion::{FusionConfig, FusionMode};
    use tmf_core::lm::{LmConfig, LoraConfig};
    use tmf_core::model::{ModelConfig, TmfModel};
    use tmf_core::prompt::build_vocab;

    pub fn tiny_data(seed: u64) -> Dataset {
        let cfg = DataConfig {
            seed,
            n_items: 40,
            n_categories: 4,
            n_users: 40,
            min_len: 2,
            max_len: 5,
            ..DataConfig::default()
        };
        Dataset::generate(&cfg).unwrap()
    }

    pub fn tiny_model_config(seed: u64, mode: FusionMode) -> ModelConfig {
        ModelConfig {
            seed,
            lm: LmConfig {
                d_llm: 8,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 128,
                vocab_size: 0,
                mlp_ratio: 2,
            },
            fusion: FusionConfig {
                mode,
                ..FusionConfig::default()
            },
            lora: LoraConfig::default(),
            adaptor_hidden: 8,
        }
    }

    pub fn tiny_model(seed: u64, ds: &Dataset) -> TmfModel {
        TmfModel::new(tiny_model_config(seed, FusionMode::Full), build_vocab(&ds.catalog)).unwrap()
    }
}
