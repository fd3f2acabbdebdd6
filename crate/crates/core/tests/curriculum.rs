mod common;

use std::collections::BTreeMap;

use common::fixtures::{tiny_data, tiny_model};
use tmf_core::curriculum::*;
use tmf_core::model::Group;
use tmf_core::prompt::Level;

const DRAWS: usize = 100_000;

fn frequencies(sched: &mut Scheduler, tau: u64) -> BTreeMap<Level, usize> {
    sched.set_tau(tau).unwrap();
    let mut counts = BTreeMap::new();
    for _ in 0..DRAWS {
        *counts.entry(sched.sample_task()).or_insert(0) += 1;
    }
    counts
}

/// `(expected level, its probability)` written straight from the two
/// schedule branches.
fn expected(tau: u64, total: u64, t1: u64) -> (Level, f64) {
    if tau <= t1 {
        (Level::Medium, tau as f64 / total as f64)
    } else {
        (Level::Hard, (tau - t1) as f64 / (total - t1) as f64)
    }
}

#[test]
fn empirical_task_frequencies_match_the_schedule() {
    for (total, t1) in [(1000u64, 500u64), (5000, 2500), (1000, 300)] {
        let mut sched = Scheduler::new(total, t1, 17, MediumForm::Verbatim).unwrap();
        for tau in [0, total / 4, t1, (total + t1) / 2, total] {
            let counts = frequencies(&mut sched, tau);
            let (level, p) = expected(tau, total, t1);
            let freq = *counts.get(&level).unwrap_or(&0) as f64 / DRAWS as f64;
            let se = (p * (1.0 - p) / DRAWS as f64).sqrt();
            if se == 0.0 {
                assert_eq!(freq, p, "T={total} T1={t1} τ={tau}");
            } else {
                assert!((freq - p).abs() <= 3.0 * se, "T={total} T1={t1} τ={tau}: {freq} vs {p}");
            }
            // phase exclusivity
            if tau <= t1 {
                assert!(!counts.contains_key(&Level::Hard), "hard before T1 at τ={tau}");
            } else {
                assert!(!counts.contains_key(&Level::Easy), "easy after T1 at τ={tau}");
            }
        }
    }
}

#[test]
fn quarter_point_medium_frequency() {
    let mut sched = Scheduler::new(1000, 500, 3, MediumForm::Verbatim).unwrap();
    let counts = frequencies(&mut sched, 250);
    let freq = counts[&Level::Medium] as f64 / DRAWS as f64;
    assert!((freq - 0.25).abs() <= 0.01, "{freq}");
}

#[test]
fn medium_probability_jumps_to_one_after_the_boundary() {
    let (total, t1) = (1000, 500);
    assert_eq!(p_medium(t1, total, t1).unwrap(), 0.5);
    assert_eq!(p_hard(t1, total, t1).unwrap(), 0.0);
    // phase 2 at τ = T1 + 1 is medium unless the hard draw succeeds
    let mut sched = Scheduler::new(total, t1, 9, MediumForm::Verbatim).unwrap();
    let counts = frequencies(&mut sched, t1 + 1);
    let hard = counts.get(&Level::Hard).copied().unwrap_or(0) as f64 / DRAWS as f64;
    assert!(hard < 0.01);
    assert!(p_medium(t1 + 1, total, t1).is_err());
}

#[test]
fn phase_normalized_variant_reaches_one_at_the_boundary() {
    assert_eq!(p_medium_with(MediumForm::PhaseNormalized, 500, 1000, 500).unwrap(), 1.0);
    let mut sched = Scheduler::new(1000, 500, 1, MediumForm::PhaseNormalized).unwrap();
    let counts = frequencies(&mut sched, 500);
    assert_eq!(counts.get(&Level::Medium), Some(&DRAWS));
}

#[test]
fn invalid_boundaries_are_rejected() {
    assert!(Scheduler::new(100, 0, 0, MediumForm::Verbatim).is_err());
    assert!(Scheduler::new(100, 100, 0, MediumForm::Verbatim).is_err());
    let mut s = Scheduler::new(100, 50, 0, MediumForm::Verbatim).unwrap();
    assert!(s.set_tau(101).is_err());
}

#[test]
fn every_step_touches_only_its_levels_parameters() {
    let ds = tiny_data(0);
    let mut model = tiny_model(0, &ds);
    model.attach_lora().unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut before = model.group_hashes();
    let mut violations = 0;
    let mut changed: BTreeMap<Group, usize> = BTreeMap::new();
    let mut levels: BTreeMap<Level, usize> = BTreeMap::new();
    train_with(&mut model, &ds, &cfg, |m, log| {
        let after = m.group_hashes();
        let allowed = level_groups(log.level);
        for ((g, a), (_, b)) in before.iter().zip(&after) {
            if a != b {
                *changed.entry(*g).or_insert(0) += 1;
                if !allowed.contains(g) {
                    violations += 1;
                }
            }
        }
        *levels.entry(log.level).or_insert(0) += 1;
        before = after;
        Ok(())
    })
    .unwrap();
    assert_eq!(violations, 0);
    assert!(!changed.contains_key(&Group::Base));
    for g in [Group::Lora, Group::PsiB, Group::PsiF, Group::PsiI] {
        assert!(changed.get(&g).copied().unwrap_or(0) > 0, "{g:?} never trained");
    }
    assert_eq!(levels.len(), 3);
}

#[test]
fn warm_up_lowers_held_out_easy_loss() {
    let ds = tiny_data(1);
    let mut model = tiny_model(1, &ds);
    let before = mean_loss(&model, &ds, &ds.eval, Level::Easy).unwrap();
    let cfg = PretrainConfig {
        steps: 200,
        batch: 4,
        ..PretrainConfig::default()
    };
    let logs = pretrain_base(&mut model, &ds, &cfg).unwrap();
    let after = mean_loss(&model, &ds, &ds.eval, Level::Easy).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(logs.last().unwrap().loss < logs[0].loss);
    assert!(pretrain_base(&mut { model.attach_lora().unwrap(); model }, &ds, &cfg).is_err());
}

#[test]
fn hard_task_loss_falls_over_training() {
    let ds = tiny_data(2);
    let mut model = tiny_model(2, &ds);
    let cfg = TrainConfig {
        steps: 600,
        batch: 4,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let logs = train(&mut model, &ds, &cfg).unwrap();
    let hard: Vec<f32> = logs.iter().filter(|l| l.level == Level::Hard).map(|l| l.loss).collect();
    let q = hard.len() / 4;
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    assert!(mean(&hard[hard.len() - q..]) < mean(&hard[..q]));
}

#[test]
fn warmup_schedule_ramps_linearly() {
    let cfg = TrainConfig {
        steps: 100,
        lr: 1e-3,
        warmup_frac: 0.05,
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(0) - 2e-4).abs() < 1e-9);
    assert!((cfg.lr_at(4) - 1e-3).abs() < 1e-9);
    assert_eq!(cfg.lr_at(50), 1e-3);
    assert_eq!(cfg.t1(), 50);
}
