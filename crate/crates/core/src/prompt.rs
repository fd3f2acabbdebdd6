//! Word-level vocabulary and hybrid prompt rendering for the three task
//! levels.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Behavior, Item, UserSequence};
use crate::{Result, TmfError};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MT_ITEM: u32 = 3;
pub const MT_BEH: u32 = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[MT_i]", "[MT_b]"];
const PUNCT: [char; 6] = [',', '.', '?', ':', ';', '!'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Medium, Level::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Medium => "medium",
            Level::Hard => "hard",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = TmfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Level::Easy),
            "medium" => Ok(Level::Medium),
            "hard" => Ok(Level::Hard),
            other => Err(TmfError::Usage(format!("unknown level {other:?}"))),
        }
    }
}

struct Template {
    intro: &'static str,
    lead: &'static str,
    candidates: &'static str,
}

const QUESTION: &str = "Which item will the user purchase next?";
const CUE: &str = "Answer:";

const TEMPLATES: [Template; 3] = [
    Template {
        intro: "This is a shopping history.",
        lead: "The user",
        candidates: "Candidates:",
    },
    Template {
        intro: "Read the interactions and recommend one item.",
        lead: "In order, the user",
        candidates: "Pick from:",
    },
    Template {
        intro: "You are a shopping assistant.",
        lead: "Recently the user",
        candidates: "Options are:",
    },
];

pub fn n_templates() -> usize {
    TEMPLATES.len()
}

/// Splits on whitespace and peels punctuation off word edges.
pub fn split_words(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in s.split_whitespace() {
        let mut rest = chunk;
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
            out.push(&rest[..c.len_utf8()]);
            rest = &rest[c.len_utf8()..];
        }
        while let Some(c) = rest.chars().last().filter(|c| PUNCT.contains(c)) {
            let at = rest.len() - c.len_utf8();
            trailing.push(&rest[at..]);
            rest = &rest[..at];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn is_punct(w: &str) -> bool {
    w.chars().count() == 1 && w.chars().all(|c| PUNCT.contains(&c))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(TmfError::Integrity(format!("vocab slot {i} must hold {s}")));
            }
        }
        let index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        if index.len() != words.len() {
            return Err(TmfError::Integrity("duplicate vocab word".into()));
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<u32>> {
        split_words(s)
            .into_iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| TmfError::Lookup(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Joins words with single spaces, without a space before punctuation.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id).unwrap_or("[UNK]");
            if !out.is_empty() && !is_punct(w) {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

/// Specials, then every template, verb and catalog word in sorted order.
pub fn build_vocab(catalog: &[Item]) -> Vocab {
    let mut set: BTreeSet<String> = BTreeSet::new();
    let mut add = |s: &str| {
        for w in split_words(s) {
            if !SPECIALS.contains(&w) {
                set.insert(w.to_string());
            }
        }
    };
    for t in &TEMPLATES {
        add(t.intro);
        add(t.lead);
        add(t.candidates);
    }
    add(QUESTION);
    add(CUE);
    PUNCT.iter().for_each(|p| add(&p.to_string()));
    for b in Behavior::ALL {
        add(b.verb());
    }
    for item in catalog {
        add(&item.name);
    }
    let words = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
    Vocab::from_words(words).expect("specials are in place")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverrideSource {
    /// Fused vector of the history interaction at `index`.
    Item { index: usize, item_id: u32 },
    Behavior { behavior: Behavior },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub position: usize,
    #[serde(flatten)]
    pub source: OverrideSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridPrompt {
    /// `BOS` followed by the prompt, ending with the answer cue.
    #[serde(rename = "token_ids")]
    pub tokens: Vec<u32>,
    #[serde(rename = "override_spec")]
    pub overrides: Vec<Override>,
    pub level: Level,
    #[serde(rename = "answer_ids")]
    pub answer: Vec<u32>,
}

impl HybridPrompt {
    /// Prompt, answer and `EOS` as one teacher-forcing stream.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut s = self.tokens.clone();
        s.extend(&self.answer);
        s.push(EOS);
        s
    }

    pub fn count(&self, id: u32) -> usize {
        self.tokens.iter().filter(|&&t| t == id).count()
    }
}

pub fn render_prompt(
    vocab: &Vocab,
    catalog: &[Item],
    seq: &UserSequence,
    candidates: &[u32],
    level: Level,
    template_seed: u64,
) -> Result<HybridPrompt> {
    let name = |id: u32| -> Result<&str> {
        catalog
            .get(id as usize)
            .map(|it| it.name.as_str())
            .ok_or_else(|| TmfError::Lookup(format!("unknown item id {id}")))
    };
    if seq.history.is_empty() {
        return Err(TmfError::Usage(format!("user {} has an empty history", seq.user_id)));
    }
    if candidates.is_empty() {
        return Err(TmfError::Usage("empty candidate set".into()));
    }
    let t = &TEMPLATES[(template_seed % TEMPLATES.len() as u64) as usize];
    let mut tokens = vec![BOS];
    let mut overrides = Vec::new();
    tokens.extend(vocab.tokenize(t.intro)?);
    tokens.extend(vocab.tokenize(t.lead)?);
    let comma = vocab.tokenize(",")?;
    for (index, &(item_id, behavior)) in seq.history.iter().enumerate() {
        if index > 0 {
            tokens.extend(&comma);
        }
        tokens.extend(vocab.tokenize(behavior.verb())?);
        if level >= Level::Medium {
            overrides.push(Override {
                position: tokens.len(),
                source: OverrideSource::Behavior { behavior },
            });
            tokens.push(MT_BEH);
        }
        tokens.extend(vocab.tokenize(name(item_id)?)?);
        if level == Level::Hard {
            overrides.push(Override {
                position: tokens.len(),
                source: OverrideSource::Item { index, item_id },
            });
            tokens.push(MT_ITEM);
        }
    }
    tokens.extend(vocab.tokenize(".")?);
    tokens.extend(vocab.tokenize(QUESTION)?);
    tokens.extend(vocab.tokenize(t.candidates)?);
    for (j, &c) in candidates.iter().enumerate() {
        if j > 0 {
            tokens.extend(&comma);
        }
        tokens.extend(vocab.tokenize(name(c)?)?);
    }
    tokens.extend(vocab.tokenize(".")?);
    tokens.extend(vocab.tokenize(CUE)?);
    let answer = vocab.tokenize(name(seq.target_item_id)?)?;
    Ok(HybridPrompt {
        tokens,
        overrides,
        level,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Vec<Item> {
        ["grey shirt", "tiny mug", "sleek lamp 2"]
            .iter()
            .enumerate()
            .map(|(i, n)| Item {
                id: i as u32,
                name: n.to_string(),
                category: 0,
                latent: vec![0.5; 4],
            })
            .collect()
    }

    fn seq() -> UserSequence {
        UserSequence {
            user_id: 0,
            history: vec![(0, Behavior::View), (1, Behavior::AddToCart)],
            target_item_id: 2,
        }
    }

    #[test]
    fn split_peels_punctuation() {
        assert_eq!(split_words("Pick from: a, b."), vec!["Pick", "from", ":", "a", ",", "b", "."]);
        assert_eq!(split_words("next?"), vec!["next", "?"]);
    }

    #[test]
    fn vocab_has_five_specials_and_is_deterministic() {
        let v = build_vocab(&catalog());
        assert_eq!(v, build_vocab(&catalog()));
        assert_eq!(&v.words()[..5], &SPECIALS.map(String::from));
        assert!((0..v.len() as u32).filter(|&i| Vocab::is_special(i)).count() == 5);
    }

    #[test]
    fn names_round_trip() {
        let v = build_vocab(&catalog());
        for it in catalog() {
            assert_eq!(v.detokenize(&v.tokenize(&it.name).unwrap()), it.name);
        }
    }

    #[test]
    fn rendered_hard_prompt_reads_naturally() {
        let v = build_vocab(&catalog());
        let p = render_prompt(&v, &catalog(), &seq(), &[2, 1], Level::Hard, 0).unwrap();
        assert_eq!(
            v.detokenize(&p.tokens),
            "[BOS] This is a shopping history. The user views [MT_b] grey shirt [MT_i], \
             adds to cart [MT_b] tiny mug [MT_i]. Which item will the user purchase next? \
             Candidates: sleek lamp 2, tiny mug. Answer:"
        );
        assert_eq!(v.detokenize(&p.answer), "sleek lamp 2");
    }

    #[test]
    fn unknown_item_is_a_lookup_error() {
        let v = build_vocab(&catalog());
        let err = render_prompt(&v, &catalog(), &seq(), &[9], Level::Easy, 0).unwrap_err();
        assert!(matches!(err, TmfError::Lookup(_)));
    }
}
