//! Task-level scheduling and the training loops (base warm-up and
//! curriculum tuning).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmf_autodiff::{Adam, AdamConfig, ParamId, Tape};

use crate::data::{sample_candidates, write_file, Dataset, EvalInstance, UserSequence};
use crate::model::{Group, TmfModel};
use crate::prompt::{render_prompt, HybridPrompt, Level};
use crate::seed;
use crate::{Result, TmfError};

/// Denominator used for the medium-task probability before the boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediumForm {
    /// `τ / T`, as the schedule is written.
    #[default]
    Verbatim,
    /// `τ / T1`, reaching 1 at the boundary.
    PhaseNormalized,
}

fn check_bounds(total: u64, t1: u64) -> Result<()> {
    if t1 == 0 || t1 >= total {
        return Err(TmfError::Usage(format!("need 0 < T1 < T (got T1 = {t1}, T = {total})")));
    }
    Ok(())
}

pub fn p_medium(tau: u64, total: u64, t1: u64) -> Result<f64> {
    p_medium_with(MediumForm::Verbatim, tau, total, t1)
}

pub fn p_medium_with(form: MediumForm, tau: u64, total: u64, t1: u64) -> Result<f64> {
    check_bounds(total, t1)?;
    if tau > t1 {
        return Err(TmfError::Usage(format!("p_medium is defined for τ ≤ T1 (τ = {tau}, T1 = {t1})")));
    }
    Ok(match form {
        MediumForm::Verbatim => tau as f64 / total as f64,
        MediumForm::PhaseNormalized => tau as f64 / t1 as f64,
    })
}

pub fn p_hard(tau: u64, total: u64, t1: u64) -> Result<f64> {
    check_bounds(total, t1)?;
    if tau < t1 || tau > total {
        return Err(TmfError::Usage(format!("p_hard is defined for T1 ≤ τ ≤ T (τ = {tau})")));
    }
    Ok((tau - t1) as f64 / (total - t1) as f64)
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    pub total: u64,
    pub t1: u64,
    pub tau: u64,
    pub form: MediumForm,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(total: u64, t1: u64, seed: u64, form: MediumForm) -> Result<Self> {
        check_bounds(total, t1)?;
        Ok(Self {
            total,
            t1,
            tau: 0,
            form,
            rng: seed::rng(seed, "scheduler", 0),
        })
    }

    pub fn set_tau(&mut self, tau: u64) -> Result<()> {
        if tau > self.total {
            return Err(TmfError::Usage(format!("τ = {tau} exceeds T = {}", self.total)));
        }
        self.tau = tau;
        Ok(())
    }

    /// Draws the task for the current τ. Up to T1 the choice is easy vs
    /// medium, afterwards medium vs hard.
    pub fn sample_task(&mut self) -> Level {
        // u in (0, 1] so that a probability of 0 is never hit
        let u = 1.0 - self.rng.random::<f64>();
        if self.tau <= self.t1 {
            let p = p_medium_with(self.form, self.tau, self.total, self.t1).expect("τ within phase 1");
            if u <= p {
                Level::Medium
            } else {
                Level::Easy
            }
        } else {
            let p = p_hard(self.tau, self.total, self.t1).expect("τ within phase 2");
            if u <= p {
                Level::Hard
            } else {
                Level::Medium
            }
        }
    }
}

/// Trainable groups for each level; nested easy ⊂ medium ⊂ hard.
pub fn level_groups(level: Level) -> &'static [Group] {
    match level {
        Level::Easy => &[Group::Lora],
        Level::Medium => &[Group::Lora, Group::PsiB],
        Level::Hard => &[Group::Lora, Group::PsiB, Group::PsiF, Group::PsiI],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Phase boundary; `0` means `steps / 2`.
    pub t1: u64,
    pub lr: f32,
    pub batch: usize,
    pub warmup_frac: f64,
    pub medium_form: MediumForm,
    /// Levels above this cap are trained at the cap instead.
    pub max_level: Level,
    /// Draw fresh negatives for every training prompt.
    pub resample_negatives: bool,
    /// Share of training prompts built by [`window_sequence`].
    pub window_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 5000,
            t1: 0,
            lr: 1e-3,
            batch: 8,
            warmup_frac: 0.05,
            medium_form: MediumForm::Verbatim,
            max_level: Level::Hard,
            resample_negatives: true,
            window_frac: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn t1(&self) -> u64 {
        if self.t1 == 0 {
            self.steps / 2
        } else {
            self.t1
        }
    }

    /// Linear warm-up over the first `warmup_frac` of steps, then constant.
    pub fn lr_at(&self, step: u64) -> f32 {
        let warm = (self.warmup_frac * self.steps as f64).ceil() as u64;
        if warm == 0 || step >= warm {
            self.lr
        } else {
            self.lr * (step + 1) as f32 / warm as f32
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub tau: u64,
    pub level: Level,
    pub loss: f32,
    pub lr: f32,
}

pub fn log_csv(logs: &[StepLog]) -> String {
    let mut s = String::from("step,tau,level,loss,lr\n");
    for l in logs {
        writeln!(s, "{},{},{},{},{}", l.step, l.tau, l.level, l.loss, l.lr).expect("write to string");
    }
    s
}

pub fn write_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    write_file(path, log_csv(logs).as_bytes())
}

/// Cycles through the training instances in a fresh shuffled order per
/// epoch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// A shorter training sequence ending just before one of the user's own
/// history items, which becomes the target. Positions whose item already
/// occurs earlier in the history are skipped. `None` if no position fits.
pub fn window_sequence<R: Rng>(rng: &mut R, seq: &UserSequence) -> Option<UserSequence> {
    let fits: Vec<usize> = (1..seq.history.len())
        .filter(|&k| {
            let item = seq.history[k].0;
            !seq.history[..k].iter().any(|&(i, _)| i == item)
        })
        .collect();
    let &k = fits.choose(rng)?;
    Some(UserSequence {
        user_id: seq.user_id,
        history: seq.history[..k].to_vec(),
        target_item_id: seq.history[k].0,
    })
}

fn render_batch<R: Rng>(
    rng: &mut R,
    batcher: &mut Batcher,
    model: &TmfModel,
    ds: &Dataset,
    level: Level,
    batch: usize,
    resample: bool,
    window_frac: f64,
) -> Result<Vec<(HybridPrompt, UserSequence)>> {
    (0..batch)
        .map(|_| {
            let inst = &ds.train[batcher.next(rng)];
            let window = if window_frac > 0.0 && rng.random_bool(window_frac) {
                window_sequence(rng, &inst.sequence)
            } else {
                None
            };
            let (seq, cands) = match window {
                Some(w) => {
                    let c = sample_candidates(rng, &w, ds.catalog.len(), ds.config.n_negatives)?;
                    (w, c)
                }
                None if resample => {
                    let c = sample_candidates(rng, &inst.sequence, ds.catalog.len(), ds.config.n_negatives)?;
                    (inst.sequence.clone(), c)
                }
                None => (inst.sequence.clone(), inst.candidates.clone()),
            };
            let template = rng.random::<u64>();
            let p = render_prompt(&model.vocab, &ds.catalog, &seq, &cands, level, template)?;
            Ok((p, seq))
        })
        .collect()
}

/// One optimizer step on `prompts`; only `ids` are updated. Returns the
/// mean loss.
pub fn optimizer_step(
    model: &mut TmfModel,
    adam: &mut Adam,
    ds: &Dataset,
    prompts: &[(HybridPrompt, UserSequence)],
    ids: &[ParamId],
    lr: f32,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let b = model.store.bind(&mut tape);
    let mut total = None;
    for (p, seq) in prompts {
        let l = model.prompt_loss(&mut tape, &b, p, &seq.history, &ds.embeddings)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| TmfError::Usage("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / prompts.len() as f64)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TmfError::Numeric(format!("loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    model.store.accumulate(&b, &grads);
    adam.step(&mut model.store, ids, lr)?;
    model.store.zero_grad();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
    pub warmup_frac: f64,
    pub window_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1500,
            lr: 3e-3,
            batch: 8,
            warmup_frac: 0.05,
            window_frac: 0.5,
        }
    }
}

/// Trains every base weight on text-only prompts. The model must not have
/// LoRA adapters yet.
pub fn pretrain_base(model: &mut TmfModel, ds: &Dataset, cfg: &PretrainConfig) -> Result<Vec<StepLog>> {
    if model.has_lora() {
        return Err(TmfError::Usage("warm-up runs before LoRA is attached".into()));
    }
    if ds.train.is_empty() {
        return Err(TmfError::Usage("no training instances".into()));
    }
    model.set_trainable(&[Group::Base]);
    let ids = model.group_ids(Group::Base);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let sched = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        ..TrainConfig::default()
    };
    let mut rng = seed::rng(cfg.seed, "pretrain", 0);
    let mut batcher = Batcher::new(ds.train.len());
    let mut logs = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let prompts = render_batch(&mut rng, &mut batcher, model, ds, Level::Easy, cfg.batch, true, cfg.window_frac)?;
        let lr = sched.lr_at(step);
        let loss = optimizer_step(model, &mut adam, ds, &prompts, &ids, lr)?;
        logs.push(StepLog {
            step,
            tau: step,
            level: Level::Easy,
            loss,
            lr,
        });
    }
    Ok(logs)
}

/// Curriculum tuning: attaches LoRA if needed, then per step samples a
/// level, renders a batch at that level and updates exactly that level's
/// parameter groups.
pub fn train(model: &mut TmfModel, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    train_with(model, ds, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every step.
pub fn train_with<H>(model: &mut TmfModel, ds: &Dataset, cfg: &TrainConfig, mut hook: H) -> Result<Vec<StepLog>>
where
    H: FnMut(&TmfModel, &StepLog) -> Result<()>,
{
    if ds.train.is_empty() {
        return Err(TmfError::Usage("no training instances".into()));
    }
    if !model.has_lora() {
        model.attach_lora()?;
    }
    let mut sched = Scheduler::new(cfg.steps, cfg.t1(), cfg.seed, cfg.medium_form)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = seed::rng(cfg.seed, "train", 0);
    let mut batcher = Batcher::new(ds.train.len());
    let mut logs = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        sched.set_tau(step)?;
        let level = sched.sample_task().min(cfg.max_level);
        let groups = level_groups(level);
        model.set_trainable(groups);
        let ids: Vec<ParamId> = groups.iter().flat_map(|&g| model.group_ids(g)).collect();
        let prompts = render_batch(
            &mut rng,
            &mut batcher,
            model,
            ds,
            level,
            cfg.batch,
            cfg.resample_negatives,
            cfg.window_frac,
        )?;
        let lr = cfg.lr_at(step);
        let loss = optimizer_step(model, &mut adam, ds, &prompts, &ids, lr)?;
        let log = StepLog {
            step,
            tau: step,
            level,
            loss,
            lr,
        };
        hook(model, &log)?;
        logs.push(log);
    }
    model.set_trainable(level_groups(Level::Hard));
    Ok(logs)
}

/// Mean teacher-forced loss over `instances` at `level` (fixed candidates,
/// template chosen by user id).
pub fn mean_loss(model: &TmfModel, ds: &Dataset, instances: &[EvalInstance], level: Level) -> Result<f64> {
    let mut total = 0.0;
    for inst in instances {
        let p = render_prompt(
            &model.vocab,
            &ds.catalog,
            &inst.sequence,
            &inst.candidates,
            level,
            inst.sequence.user_id as u64,
        )?;
        let mut tape = Tape::<f32>::new();
        let b = model.store.bind_frozen(&mut tape);
        let l = model.prompt_loss(&mut tape, &b, &p, &inst.sequence.history, &ds.embeddings)?;
        total += tape.value(l).item() as f64;
    }
    Ok(total / instances.len().max(1) as f64)
}
