//! Small pre-norm decoder-only transformer with optional LoRA on the
//! attention query and value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tmf_autodiff::{Bindings, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::adaptors::{scaled_uniform, uniform};
use crate::prompt::{BOS, EOS, MT_BEH, MT_ITEM, PAD};
use crate::{Result, TmfError};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Hidden width of the feed-forward block as a multiple of `d_llm`.
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_llm: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 256,
            vocab_size: 0,
            mlp_ratio: 4,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_llm % self.n_heads != 0 {
            return Err(TmfError::Config(format!(
                "d_llm = {} is not divisible by n_heads = {}",
                self.d_llm, self.n_heads
            )));
        }
        if self.vocab_size <= 5 || self.max_seq_len == 0 || self.n_layers == 0 {
            return Err(TmfError::Config("vocab_size, max_seq_len and n_layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Lora {
    cfg: LoraConfig,
    /// `(query, value)` per block.
    pairs: Vec<(LoraPair, LoraPair)>,
}

#[derive(Clone, Debug)]
pub struct Lm {
    pub cfg: LmConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lora: Option<Lora>,
}

impl Lm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_llm;
        let h = d * cfg.mlp_ratio;
        let bound = 1.0 / (d as f32).sqrt();
        let tok_emb = store.add("lm.tok_emb", uniform(rng, cfg.vocab_size, d, bound));
        let pos_emb = store.add("lm.pos_emb", uniform(rng, cfg.max_seq_len, d, bound));
        let ones = || Tensor::full(&[1, d], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                ln1_g: store.add(format!("lm.{l}.ln1.g"), ones()),
                ln1_b: store.add(format!("lm.{l}.ln1.b"), zeros(d)),
                w_q: store.add(format!("lm.{l}.w_q"), scaled_uniform(rng, d, d)),
                w_k: store.add(format!("lm.{l}.w_k"), scaled_uniform(rng, d, d)),
                w_v: store.add(format!("lm.{l}.w_v"), scaled_uniform(rng, d, d)),
                w_o: store.add(format!("lm.{l}.w_o"), scaled_uniform(rng, d, d)),
                ln2_g: store.add(format!("lm.{l}.ln2.g"), ones()),
                ln2_b: store.add(format!("lm.{l}.ln2.b"), zeros(d)),
                w_fc: store.add(format!("lm.{l}.w_fc"), scaled_uniform(rng, d, h)),
                b_fc: store.add(format!("lm.{l}.b_fc"), zeros(h)),
                w_proj: store.add(format!("lm.{l}.w_proj"), scaled_uniform(rng, h, d)),
                b_proj: store.add(format!("lm.{l}.b_proj"), zeros(d)),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: store.add("lm.lnf.g", ones()),
            lnf_b: store.add("lm.lnf.b", zeros(d)),
            lora: None,
            cfg,
        })
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.w_q, b.w_k, b.w_v, b.w_o, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.lora
            .iter()
            .flat_map(|l| l.pairs.iter().flat_map(|(q, v)| [q.a, q.b, v.a, v.b]))
            .collect()
    }

    pub fn lora_config(&self) -> Option<LoraConfig> {
        self.lora.as_ref().map(|l| l.cfg)
    }

    pub fn token_table(&self) -> ParamId {
        self.tok_emb
    }

    /// Adds zero-initialised-`B` adapters and freezes every base weight.
    pub fn attach_lora<R: Rng>(&mut self, store: &mut ParamStore, rng: &mut R, cfg: LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(TmfError::Usage("LoRA adapters are already attached".into()));
        }
        if cfg.rank == 0 {
            return Err(TmfError::Config("LoRA rank must be positive".into()));
        }
        let d = self.cfg.d_llm;
        let mut pair = |name: String| LoraPair {
            a: store.add(format!("{name}.a"), scaled_uniform(rng, d, cfg.rank)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cfg.rank, d])),
        };
        let pairs = (0..self.blocks.len())
            .map(|l| (pair(format!("lora.{l}.q")), pair(format!("lora.{l}.v"))))
            .collect();
        self.lora = Some(Lora { cfg, pairs });
        self.freeze_base(store);
        Ok(())
    }

    pub fn freeze_base(&self, store: &mut ParamStore) {
        for id in self.base_ids() {
            store.set_requires_grad(id, false);
        }
    }

    /// Token-table lookup, no positions.
    pub fn embed_tokens<F: Element>(&self, tape: &mut Tape<F>, b: &Bindings, ids: &[u32]) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(tape.embedding(b[self.tok_emb], &idx)?)
    }

    fn project<F: Element>(
        &self,
        tape: &mut Tape<F>,
        b: &Bindings,
        x: Var,
        w: ParamId,
        lora: Option<(LoraPair, f32)>,
    ) -> Result<Var> {
        let y = tape.matmul(x, b[w])?;
        let Some((p, scale)) = lora else { return Ok(y) };
        let xa = tape.matmul(x, b[p.a])?;
        let xab = tape.matmul(xa, b[p.b])?;
        let xab = tape.scale(xab, scale as f64)?;
        Ok(tape.add(y, xab)?)
    }

    /// Adds positions and runs every block; `x` is `len × d_llm`. Returns
    /// the final hidden states before the closing layer norm.
    pub fn hidden<F: Element>(&self, tape: &mut Tape<F>, b: &Bindings, x: Var) -> Result<Var> {
        let (len, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        if len > self.cfg.max_seq_len {
            return Err(TmfError::Length {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        if d != self.cfg.d_llm {
            return Err(TmfError::Config(format!("input width {d} differs from d_llm = {}", self.cfg.d_llm)));
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(b[self.pos_emb], &positions)?;
        let mut h = tape.add(x, pos)?;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        for (l, blk) in self.blocks.iter().enumerate() {
            let lora = self.lora.as_ref().map(|lo| {
                let s = lo.cfg.alpha / lo.cfg.rank as f32;
                (lo.pairs[l], s)
            });
            let a = tape.layer_norm(h, b[blk.ln1_g], b[blk.ln1_b], LN_EPS)?;
            let q = self.project(tape, b, a, blk.w_q, lora.map(|((q, _), s)| (q, s)))?;
            let k = tape.matmul(a, b[blk.w_k])?;
            let v = self.project(tape, b, a, blk.w_v, lora.map(|((_, v), s)| (v, s)))?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_t(qh, kh)?;
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
                let w = tape.causal_softmax_rows(s)?;
                outs.push(tape.matmul(w, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let att = tape.matmul(att, b[blk.w_o])?;
            h = tape.add(h, att)?;
            let m = tape.layer_norm(h, b[blk.ln2_g], b[blk.ln2_b], LN_EPS)?;
            let m = tape.matmul(m, b[blk.w_fc])?;
            let m = tape.add_row(m, b[blk.b_fc])?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, b[blk.w_proj])?;
            let m = tape.add_row(m, b[blk.b_proj])?;
            h = tape.add(h, m)?;
        }
        Ok(h)
    }

    /// Logits for `n` consecutive positions starting at `start`. The output
    /// head shares the token table.
    pub fn logits_at<F: Element>(&self, tape: &mut Tape<F>, b: &Bindings, hidden: Var, start: usize, n: usize) -> Result<Var> {
        let rows = tape.slice_rows(hidden, start, n)?;
        let z = tape.layer_norm(rows, b[self.lnf_g], b[self.lnf_b], LN_EPS)?;
        Ok(tape.matmul_t(z, b[self.tok_emb])?)
    }

    /// Logits at every position.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden(tape, b, x)?;
        let len = tape.shape(h)[0];
        self.logits_at(tape, b, h, 0, len)
    }

    /// Greedy continuation of an already embedded prompt (`len × d_llm`).
    /// Special tokens other than `EOS` are never produced; ties go to the
    /// lowest id. The returned ids exclude the closing `EOS`.
    pub fn generate(&self, store: &ParamStore, prompt: &Tensor, max_new_tokens: usize) -> Result<Vec<u32>> {
        let mut out: Vec<u32> = Vec::new();
        for _ in 0..max_new_tokens {
            if prompt.rows() + out.len() + 1 > self.cfg.max_seq_len + 1 {
                break;
            }
            let mut tape = Tape::<f32>::new();
            let b = store.bind_frozen(&mut tape);
            let p = tape.constant(prompt.clone());
            let x = if out.is_empty() {
                p
            } else {
                let gen = self.embed_tokens(&mut tape, &b, &out)?;
                tape.concat_rows(&[p, gen])?
            };
            let h = self.hidden(&mut tape, &b, x)?;
            let last = tape.shape(h)[0] - 1;
            let logits = self.logits_at(&mut tape, &b, h, last, 1)?;
            let next = masked_argmax(tape.value(logits).data());
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Ids never produced by generation.
pub const BANNED: [u32; 4] = [MT_ITEM, MT_BEH, PAD, BOS];

/// Argmax with banned ids at −∞ and ties to the lowest id.
pub fn masked_argmax(logits: &[f32]) -> u32 {
    let mut best = (u32::MAX, f32::NEG_INFINITY);
    for (i, &z) in logits.iter().enumerate() {
        let i = i as u32;
        if BANNED.contains(&i) {
            continue;
        }
        if best.0 == u32::MAX || z > best.1 {
            best = (i, z);
        }
    }
    best.0
}

/// Softmax over logits after banning special tokens; banned entries are
/// exactly zero.
pub fn masked_distribution(logits: &[f32]) -> Vec<f64> {
    let mut row: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
    for &b in &BANNED {
        if let Some(v) = row.get_mut(b as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
    row.iter().map(|z| (z - max).exp() / total).collect()
}

/// Mean NLL of `targets` given `logits` rows (teacher forcing).
pub fn nll_loss<F: Element>(tape: &mut Tape<F>, logits: Var, targets: &[u32]) -> Result<Var> {
    if targets.is_empty() {
        return Err(TmfError::Usage("empty answer span".into()));
    }
    let t: Vec<usize> = targets.iter().map(|&i| i as usize).collect();
    Ok(tape.cross_entropy(logits, &t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_argmax_skips_specials_and_breaks_ties_low() {
        let mut z = vec![0.0f32; 8];
        z[3] = 9.0;
        z[4] = 9.0;
        z[5] = 1.0;
        z[6] = 1.0;
        assert_eq!(masked_argmax(&z), 5);
        let p = masked_distribution(&z);
        for &b in &BANNED {
            assert_eq!(p[b as usize], 0.0);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 7]));
        let l = nll_loss(&mut tape, z, &[1, 6]).unwrap();
        assert!((tape.value(l).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_answer_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 7]));
        assert!(matches!(nll_loss(&mut tape, z, &[]), Err(TmfError::Usage(_))));
    }
}
