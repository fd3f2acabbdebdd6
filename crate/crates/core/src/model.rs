//! The assembled recommender: language model, fusion projection and the two
//! adaptors, plus prompt embedding and checkpoint IO.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmf_autodiff::{Bindings, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::adaptors::{scaled_uniform, Adaptor};
use crate::data::{hex, read_json, write_file, Behavior};
use crate::encoders::ModalityEmbeddings;
use crate::error::io_err;
use crate::fusion::{fuse, FusionConfig, FusionMode};
use crate::lm::{nll_loss, Lm, LmConfig, LoraConfig};
use crate::prompt::{HybridPrompt, Override, OverrideSource, Vocab, MT_BEH, MT_ITEM};
use crate::seed;
use crate::{Result, TmfError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub lm: LmConfig,
    pub fusion: FusionConfig,
    pub lora: LoraConfig,
    /// Hidden width of both adaptors; `0` means `2 · d_llm`.
    pub adaptor_hidden: usize,
}

impl ModelConfig {
    pub fn adaptor_hidden(&self) -> usize {
        if self.adaptor_hidden == 0 {
            2 * self.lm.d_llm
        } else {
            self.adaptor_hidden
        }
    }
}

/// Named parameter groups; also the checkpoint sections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    Lora,
    PsiF,
    PsiI,
    PsiB,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Base, Group::Lora, Group::PsiF, Group::PsiI, Group::PsiB];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Lora => "lora",
            Group::PsiF => "psi_f",
            Group::PsiI => "psi_i",
            Group::PsiB => "psi_b",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TmfModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub lm: Lm,
    pub w_q: ParamId,
    pub psi_i: Adaptor,
    pub psi_b: Adaptor,
}

impl TmfModel {
    pub fn new(mut cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.lm.vocab_size = vocab.len();
        cfg.fusion.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(cfg.seed, "lm-init", 0);
        let lm = Lm::new(&mut store, &mut rng, cfg.lm.clone())?;
        let mut rng = seed::rng(cfg.seed, "fusion-init", 0);
        let w_q = store.add("psi_f.w_q", scaled_uniform(&mut rng, cfg.fusion.d(), cfg.fusion.d_v));
        let h = cfg.adaptor_hidden();
        let d = cfg.lm.d_llm;
        let mut rng = seed::rng(cfg.seed, "adaptor-init", 0);
        let psi_i = Adaptor::new(&mut store, &mut rng, "psi_i", cfg.fusion.d_v, h, d);
        let psi_b = Adaptor::new(&mut store, &mut rng, "psi_b", cfg.fusion.d_g, h, d);
        Ok(Self {
            cfg,
            vocab,
            store,
            lm,
            w_q,
            psi_i,
            psi_b,
        })
    }

    pub fn attach_lora(&mut self) -> Result<()> {
        let mut rng = seed::rng(self.cfg.seed, "lora-init", 0);
        self.lm.attach_lora(&mut self.store, &mut rng, self.cfg.lora)
    }

    pub fn has_lora(&self) -> bool {
        self.lm.lora_config().is_some()
    }

    pub fn group_ids(&self, g: Group) -> Vec<ParamId> {
        match g {
            Group::Base => self.lm.base_ids(),
            Group::Lora => self.lm.lora_ids(),
            Group::PsiF => vec![self.w_q],
            Group::PsiI => self.psi_i.ids().to_vec(),
            Group::PsiB => self.psi_b.ids().to_vec(),
        }
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        Group::ALL
            .into_iter()
            .find(|&g| self.group_ids(g).contains(&id))
            .expect("every parameter belongs to a group")
    }

    /// Sets `requires_grad` so that exactly `groups` are trainable.
    pub fn set_trainable(&mut self, groups: &[Group]) {
        for g in Group::ALL {
            let on = groups.contains(&g);
            for id in self.group_ids(g) {
                self.store.set_requires_grad(id, on);
            }
        }
    }

    /// SHA-256 of each group's values, for before/after comparisons.
    pub fn group_hashes(&self) -> Vec<(Group, String)> {
        Group::ALL
            .iter()
            .map(|&g| {
                let mut h = Sha256::new();
                for id in self.group_ids(g) {
                    for v in self.store.value(id).data() {
                        h.update(v.to_le_bytes());
                    }
                }
                (g, hex(&h.finalize()))
            })
            .collect()
    }

    /// Token embeddings for `ids` with modality-token rows replaced by
    /// adaptor outputs. `history` supplies the rows fused for item tokens.
    pub fn embed<F: Element>(
        &self,
        tape: &mut Tape<F>,
        b: &Bindings,
        ids: &[u32],
        overrides: &[Override],
        history: &[(u32, Behavior)],
        emb: &ModalityEmbeddings,
    ) -> Result<Var> {
        check_overrides(ids, overrides, history)?;
        let tok = self.lm.embed_tokens(tape, b, ids)?;
        if overrides.is_empty() {
            return Ok(tok);
        }
        let wants_items = overrides.iter().any(|o| matches!(o.source, OverrideSource::Item { .. }));
        let beh_in = tape.constant(emb.behavior.cast());
        let beh_tokens = self.psi_b.forward(tape, b, beh_in)?;
        let table = if wants_items {
            let items = self.fused_items(tape, b, history, emb)?;
            let item_tokens = self.psi_i.forward(tape, b, items)?;
            tape.concat_rows(&[beh_tokens, item_tokens])?
        } else {
            beh_tokens
        };
        let n_beh = Behavior::ALL.len();
        let rows: Vec<usize> = overrides
            .iter()
            .map(|o| match o.source {
                OverrideSource::Behavior { behavior } => behavior.index(),
                OverrideSource::Item { index, .. } => n_beh + index,
            })
            .collect();
        let src = tape.embedding(table, &rows)?;
        let positions: Vec<usize> = overrides.iter().map(|o| o.position).collect();
        Ok(tape.scatter_rows(tok, src, &positions)?)
    }

    /// Fusion output for every history row (`|H| × d_v`).
    pub fn fused_items<F: Element>(
        &self,
        tape: &mut Tape<F>,
        b: &Bindings,
        history: &[(u32, Behavior)],
        emb: &ModalityEmbeddings,
    ) -> Result<Var> {
        if history.is_empty() {
            return Err(TmfError::Usage("empty sequence".into()));
        }
        let gather = |t: &Tensor| -> Result<Tensor<F>> {
            let rows: Vec<&[f32]> = history.iter().map(|&(i, _)| t.row(i as usize)).collect();
            Ok(Tensor::from_rows(&rows)?.cast())
        };
        let img = tape.constant(gather(&emb.image)?);
        let txt = tape.constant(gather(&emb.text)?);
        let gr = tape.constant(gather(&emb.graph)?);
        Ok(fuse(tape, &self.cfg.fusion, img, txt, gr, b[self.w_q])?.output)
    }

    /// Teacher-forced NLL of `answer + EOS` after the prompt.
    pub fn prompt_loss<F: Element>(
        &self,
        tape: &mut Tape<F>,
        b: &Bindings,
        prompt: &HybridPrompt,
        history: &[(u32, Behavior)],
        emb: &ModalityEmbeddings,
    ) -> Result<Var> {
        let full = prompt.full_sequence();
        let inputs = &full[..full.len() - 1];
        let x = self.embed(tape, b, inputs, &prompt.overrides, history, emb)?;
        let h = self.lm.hidden(tape, b, x)?;
        let start = prompt.tokens.len() - 1;
        let targets = &full[prompt.tokens.len()..];
        let logits = self.lm.logits_at(tape, b, h, start, targets.len())?;
        nll_loss(tape, logits, targets)
    }

    /// Embedded prompt as a plain tensor (no gradients).
    pub fn embed_prompt(&self, prompt: &HybridPrompt, history: &[(u32, Behavior)], emb: &ModalityEmbeddings) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let b = self.store.bind_frozen(&mut tape);
        let x = self.embed(&mut tape, &b, &prompt.tokens, &prompt.overrides, history, emb)?;
        Ok(tape.value(x).clone())
    }

    pub fn generate(
        &self,
        prompt: &HybridPrompt,
        history: &[(u32, Behavior)],
        emb: &ModalityEmbeddings,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>> {
        let x = self.embed_prompt(prompt, history, emb)?;
        self.lm.generate(&self.store, &x, max_new_tokens)
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        for (id, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                section: self.group_of(id),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
                len: p.value.numel(),
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model: self.cfg.clone(),
            lora_attached: self.has_lora(),
            vocab: self.vocab.words().to_vec(),
            meta,
            tensors,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), text.as_bytes())?;
        write_file(&dir.join("weights.bin"), &blob)
    }

    /// Returns the model and the `meta` value stored with it.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let m_path = dir.join("manifest.json");
        if !m_path.exists() {
            return Err(TmfError::Io {
                path: m_path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint manifest not found"),
            });
        }
        let manifest: Manifest = read_json(&m_path)?;
        if manifest.format != FORMAT {
            return Err(TmfError::Integrity(format!(
                "{}: unsupported format {:?}",
                m_path.display(),
                manifest.format
            )));
        }
        let w_path = dir.join("weights.bin");
        let blob = fs::read(&w_path).map_err(io_err(&w_path))?;
        let vocab = Vocab::from_words(manifest.vocab)?;
        let mut model = Self::new(manifest.model, vocab)?;
        if manifest.lora_attached {
            model.attach_lora()?;
        }
        if manifest.tensors.len() != model.store.len() {
            return Err(TmfError::Integrity(format!(
                "{}: {} tensors stored, model has {}",
                m_path.display(),
                manifest.tensors.len(),
                model.store.len()
            )));
        }
        for e in &manifest.tensors {
            let id = model
                .store
                .find(&e.name)
                .ok_or_else(|| TmfError::Integrity(format!("unknown tensor {}", e.name)))?;
            let bytes = blob
                .get(e.offset..e.offset + e.len * 4)
                .ok_or_else(|| TmfError::Integrity(format!("{}: tensor {} out of bounds", w_path.display(), e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            model.store.set_value(id, Tensor::new(e.shape.clone(), data)?)?;
        }
        Ok((model, manifest.meta))
    }
}

const FORMAT: &str = "tmf-checkpoint-1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    lora_attached: bool,
    vocab: Vec<String>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Group,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Every modality token needs exactly one override of the matching kind.
fn check_overrides(ids: &[u32], overrides: &[Override], history: &[(u32, Behavior)]) -> Result<()> {
    let mut covered = vec![false; ids.len()];
    for o in overrides {
        let tok = *ids
            .get(o.position)
            .ok_or_else(|| TmfError::Integrity(format!("override position {} out of range", o.position)))?;
        let ok = match o.source {
            OverrideSource::Item { index, item_id } => {
                tok == MT_ITEM && history.get(index).is_some_and(|&(i, _)| i == item_id)
            }
            OverrideSource::Behavior { .. } => tok == MT_BEH,
        };
        if !ok || std::mem::replace(&mut covered[o.position], true) {
            return Err(TmfError::Integrity(format!("override at position {} does not match its token", o.position)));
        }
    }
    if let Some(p) = ids
        .iter()
        .zip(&covered)
        .position(|(&t, &c)| (t == MT_ITEM || t == MT_BEH) && !c)
    {
        return Err(TmfError::Integrity(format!("missing override for modality token at position {p}")));
    }
    Ok(())
}

/// Model with a given fusion mode and default sizes for `vocab`.
pub fn default_model_config(seed: u64, mode: FusionMode) -> ModelConfig {
    ModelConfig {
        seed,
        lm: LmConfig::default(),
        fusion: FusionConfig {
            mode,
            ..FusionConfig::default()
        },
        lora: LoraConfig::default(),
        adaptor_hidden: 0,
    }
}
