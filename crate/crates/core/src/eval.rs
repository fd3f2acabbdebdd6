//! HitRate@1 / ValidRatio scoring, evaluation runs and the ablation ladder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{pretrain_base, train, PretrainConfig, StepLog, TrainConfig};
use crate::data::{write_file, write_jsonl, Dataset, EvalInstance};
use crate::fusion::FusionMode;
use crate::model::{ModelConfig, TmfModel};
use crate::prompt::{build_vocab, render_prompt, Level};
use crate::{Result, TmfError};

/// Case-fold, collapse whitespace, trim.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn check_counts(generations: &[String], instances: &[EvalInstance]) -> Result<()> {
    if generations.len() != instances.len() {
        return Err(TmfError::Usage(format!(
            "{} generations for {} instances",
            generations.len(),
            instances.len()
        )));
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// `names[i]` is the name of item `i`.
pub fn hitrate_at_1(generations: &[String], instances: &[EvalInstance], names: &[String]) -> Result<f64> {
    check_counts(generations, instances)?;
    let hits = generations
        .iter()
        .zip(instances)
        .filter(|(g, inst)| is_hit(g, inst, names))
        .count();
    Ok(fraction(hits, instances.len()))
}

pub fn valid_ratio(generations: &[String], instances: &[EvalInstance], names: &[String]) -> Result<f64> {
    check_counts(generations, instances)?;
    let valid = generations
        .iter()
        .zip(instances)
        .filter(|(g, inst)| is_valid(g, inst, names))
        .count();
    Ok(fraction(valid, instances.len()))
}

fn is_hit(g: &str, inst: &EvalInstance, names: &[String]) -> bool {
    names
        .get(inst.sequence.target_item_id as usize)
        .is_some_and(|n| normalize(n) == normalize(g))
}

fn is_valid(g: &str, inst: &EvalInstance, names: &[String]) -> bool {
    let g = normalize(g);
    inst.candidates
        .iter()
        .any(|&c| names.get(c as usize).is_some_and(|n| normalize(n) == g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hitrate_at_1: f64,
    pub valid_ratio: f64,
    pub n_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub user_id: u32,
    pub generated: String,
    pub target: String,
    pub candidates: Vec<String>,
    pub hit: bool,
    pub valid: bool,
}

/// Longest answer the decoder is allowed to produce.
pub const MAX_NEW_TOKENS: usize = 8;

/// Renders each instance at `level` (template picked by user id), decodes
/// greedily and scores the decoded strings.
pub fn run_eval(
    model: &TmfModel,
    ds: &Dataset,
    instances: &[EvalInstance],
    level: Level,
) -> Result<(Metrics, Vec<InstanceRecord>)> {
    let vocab = build_vocab(&ds.catalog);
    if vocab != model.vocab {
        return Err(TmfError::Integrity(
            "checkpoint vocabulary does not match the dataset catalog".into(),
        ));
    }
    let names: Vec<String> = ds.catalog.iter().map(|i| i.name.clone()).collect();
    let mut gens = Vec::with_capacity(instances.len());
    let mut records = Vec::with_capacity(instances.len());
    for inst in instances {
        let s = &inst.sequence;
        let p = render_prompt(&model.vocab, &ds.catalog, s, &inst.candidates, level, s.user_id as u64)?;
        let out = model.generate(&p, &s.history, &ds.embeddings, MAX_NEW_TOKENS)?;
        let text = model.vocab.detokenize(&out);
        records.push(InstanceRecord {
            user_id: s.user_id,
            generated: text.clone(),
            target: names[s.target_item_id as usize].clone(),
            candidates: inst.candidates.iter().map(|&c| names[c as usize].clone()).collect(),
            hit: is_hit(&text, inst, &names),
            valid: is_valid(&text, inst, &names),
        });
        gens.push(text);
    }
    let metrics = Metrics {
        hitrate_at_1: hitrate_at_1(&gens, instances, &names)?,
        valid_ratio: valid_ratio(&gens, instances, &names)?,
        n_instances: instances.len(),
    };
    debug_assert!(metrics.hitrate_at_1 <= metrics.valid_ratio);
    Ok((metrics, records))
}

/// Mean loss per level over a training log.
pub fn per_level_losses(logs: &[StepLog]) -> BTreeMap<Level, f64> {
    let mut acc: BTreeMap<Level, (f64, usize)> = BTreeMap::new();
    for l in logs {
        let e = acc.entry(l.level).or_default();
        e.0 += l.loss as f64;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub data_hashes: BTreeMap<String, String>,
    pub hitrate_at_1: f64,
    pub valid_ratio: f64,
    pub n_instances: usize,
    pub per_level_losses: BTreeMap<Level, f64>,
}

pub fn write_report(dir: &Path, report: &Report, records: &[InstanceRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&dir.join("report.json"), text.as_bytes())?;
    write_jsonl(&dir.join("instances.jsonl"), records)
}

/// One rung of the fusion ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_behavior_tokens: bool,
    pub use_item_tokens_amsa: bool,
    pub use_cma: bool,
}

impl AblationConfig {
    pub const BASE: Self = Self {
        use_behavior_tokens: false,
        use_item_tokens_amsa: false,
        use_cma: false,
    };
    pub const BEHAVIOR: Self = Self {
        use_behavior_tokens: true,
        use_item_tokens_amsa: false,
        use_cma: false,
    };
    pub const AMSA: Self = Self {
        use_behavior_tokens: true,
        use_item_tokens_amsa: true,
        use_cma: false,
    };
    pub const FULL: Self = Self {
        use_behavior_tokens: true,
        use_item_tokens_amsa: true,
        use_cma: true,
    };

    pub const LADDER: [Self; 4] = [Self::BASE, Self::BEHAVIOR, Self::AMSA, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if self.use_cma && !self.use_item_tokens_amsa {
            return Err(TmfError::Config("CMA layers consume the AMSA output; enable item tokens too".into()));
        }
        if self.use_item_tokens_amsa && !self.use_behavior_tokens {
            return Err(TmfError::Config("item tokens are only added on top of behavior tokens".into()));
        }
        Ok(())
    }

    /// Highest task level this rung trains and evaluates at.
    pub fn max_level(&self) -> Level {
        if self.use_item_tokens_amsa {
            Level::Hard
        } else if self.use_behavior_tokens {
            Level::Medium
        } else {
            Level::Easy
        }
    }

    pub fn fusion_mode(&self) -> FusionMode {
        if self.use_cma {
            FusionMode::Full
        } else {
            FusionMode::AmsaOnly
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_behavior_tokens, self.use_item_tokens_amsa, self.use_cma) {
            (false, _, _) => "TMF (Text Only)",
            (true, false, _) => "+ Behavior Tokens",
            (true, true, false) => "+ Item ID Tokens (AMSA)",
            (true, true, true) => "+ CMA layers",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RungResult {
    pub rung: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub per_level_losses: BTreeMap<Level, f64>,
}

/// Trains one rung from a warmed-up base and evaluates it on `ds.eval`.
pub fn run_rung(
    base: &TmfModel,
    ds: &Dataset,
    rung: AblationConfig,
    train_cfg: &TrainConfig,
) -> Result<(TmfModel, Metrics, Vec<StepLog>)> {
    rung.validate()?;
    let mut model = base.clone();
    model.cfg.fusion.mode = rung.fusion_mode();
    let cfg = TrainConfig {
        max_level: rung.max_level(),
        ..train_cfg.clone()
    };
    let logs = train(&mut model, ds, &cfg)?;
    let (metrics, _) = run_eval(&model, ds, &ds.eval, rung.max_level())?;
    Ok((model, metrics, logs))
}

/// Warm-up once per seed, then every rung with identical budgets.
pub fn run_ablation(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    pretrain_cfg: &PretrainConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&RungResult),
) -> Result<Vec<RungResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut base = TmfModel::new(
            ModelConfig {
                seed,
                ..model_cfg.clone()
            },
            build_vocab(&ds.catalog),
        )?;
        pretrain_base(
            &mut base,
            ds,
            &PretrainConfig {
                seed,
                ..pretrain_cfg.clone()
            },
        )?;
        for rung in AblationConfig::LADDER {
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let (_, metrics, logs) = run_rung(&base, ds, rung, &cfg)?;
            let r = RungResult {
                rung: rung.name().into(),
                seed,
                metrics,
                per_level_losses: per_level_losses(&logs),
            };
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

pub fn ablation_csv(results: &[RungResult]) -> String {
    let mut s = String::from("Model,Seed,HitRate@1,ValidRatio\n");
    for r in results {
        writeln!(
            s,
            "{},{},{:.4},{:.4}",
            r.rung, r.seed, r.metrics.hitrate_at_1, r.metrics.valid_ratio
        )
        .expect("write to string");
    }
    s
}

/// Seed-averaged HitRate@1 per rung in ladder order.
pub fn ladder_means(results: &[RungResult]) -> Vec<(String, f64)> {
    AblationConfig::LADDER
        .iter()
        .map(|r| {
            let hs: Vec<f64> = results
                .iter()
                .filter(|x| x.rung == r.name())
                .map(|x| x.metrics.hitrate_at_1)
                .collect();
            (r.name().to_string(), hs.iter().sum::<f64>() / hs.len().max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Behavior, UserSequence};

    fn inst(target: u32, cands: Vec<u32>) -> EvalInstance {
        EvalInstance {
            sequence: UserSequence {
                user_id: 0,
                history: vec![(9, Behavior::View)],
                target_item_id: target,
            },
            candidates: cands,
        }
    }

    fn names() -> Vec<String> {
        (0..12).map(|i| format!("item {i}")).collect()
    }

    #[test]
    fn normalization_folds_case_and_space() {
        assert_eq!(normalize("  Grey   Shirt "), "grey shirt");
    }

    #[test]
    fn history_item_outside_candidates_is_invalid() {
        let i = [inst(0, vec![0, 1, 2])];
        let g = ["item 9".to_string()];
        assert_eq!(valid_ratio(&g, &i, &names()).unwrap(), 0.0);
        assert_eq!(hitrate_at_1(&g, &i, &names()).unwrap(), 0.0);
    }

    #[test]
    fn count_mismatch_is_usage_error() {
        let i = [inst(0, vec![0])];
        assert!(matches!(hitrate_at_1(&[], &i, &names()), Err(TmfError::Usage(_))));
    }

    #[test]
    fn ladder_rules() {
        assert!(AblationConfig {
            use_behavior_tokens: true,
            use_item_tokens_amsa: false,
            use_cma: true
        }
        .validate()
        .is_err());
        assert_eq!(AblationConfig::BASE.max_level(), Level::Easy);
        assert_eq!(AblationConfig::BEHAVIOR.max_level(), Level::Medium);
        assert_eq!(AblationConfig::FULL.fusion_mode(), FusionMode::Full);
    }
}
