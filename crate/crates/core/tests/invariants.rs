use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;

use skillctx::budget::{admit, normalize_scores, select_adaptive, AdmissionConfig};
use skillctx::domain::{label_from_delta, Skill};
use skillctx::harness::{build_world, split_tasks, ExperimentConfig};
use skillctx::renderer::{build_context, parse_scope_clause};
use skillctx::simworld::{oracle_delta, pass_probability, rollout, World};

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| build_world(&ExperimentConfig::default()).unwrap())
}

fn subset(world: &World, mask: u64) -> Vec<&Skill> {
    world
        .library
        .skills
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < 64 && (mask >> i) & 1 == 1)
        .map(|(_, s)| s)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pass_probability_is_a_probability(task in 0usize..20, mask in any::<u64>(), render in any::<bool>()) {
        let w = world();
        let t = &w.tasks[task];
        let ctx = build_context(t, &subset(w, mask), render);
        let p = pass_probability(w, t, &ctx).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn rendering_never_hurts(task in 0usize..20, mask in any::<u64>()) {
        let w = world();
        let t = &w.tasks[task];
        let skills = subset(w, mask);
        let raw = w.evaluate_context(t, &build_context(t, &skills, false)).unwrap();
        let rendered = w.evaluate_context(t, &build_context(t, &skills, true)).unwrap();
        prop_assert!(rendered.pass_probability >= raw.pass_probability);
        prop_assert!(rendered.expected_messages <= raw.expected_messages);
    }

    #[test]
    fn rendering_keeps_ids_and_bodies(task in 0usize..20, mask in any::<u64>()) {
        let w = world();
        let t = &w.tasks[task];
        let skills = subset(w, mask);
        let ctx = build_context(t, &skills, true);
        let ids: Vec<String> = skills.iter().map(|s| s.id.clone()).collect();
        prop_assert_eq!(ctx.ids(), ids);
        for (e, s) in ctx.entries.iter().zip(&skills) {
            prop_assert_eq!(&e.body, &s.body);
            for name in parse_scope_clause(&e.rendered_description) {
                prop_assert!(skills.iter().any(|o| o.name == name && o.id != s.id));
            }
        }
    }

    #[test]
    fn rollouts_are_pure_functions_of_seed(task in 0usize..20, mask in any::<u64>(), seed in 0u64..1000) {
        let w = world();
        let t = &w.tasks[task];
        let ctx = build_context(t, &subset(w, mask), true);
        prop_assert_eq!(rollout(w, t, &ctx, seed).unwrap(), rollout(w, t, &ctx, seed).unwrap());
    }

    #[test]
    fn admission_respects_threshold_and_cap(
        scores in prop::collection::vec(-5.0f64..5.0, 1..30),
        tau in 0.0f64..=1.0,
        b_max in 1usize..10,
    ) {
        let raw: BTreeMap<String, f64> = scores.iter().enumerate().map(|(i, v)| (format!("s{i:02}"), *v)).collect();
        let norm = normalize_scores(&raw).unwrap();
        let cfg = AdmissionConfig::with_tau(tau, b_max);
        let picked = admit(&norm, &cfg);
        prop_assert!(picked.len() <= b_max);
        prop_assert!(!picked.is_empty(), "the argmax always clears tau <= 1");
        for w in picked.windows(2) {
            prop_assert!(norm[&w[0]] >= norm[&w[1]]);
        }
        for id in &picked {
            prop_assert!(norm[id] >= tau);
        }
        let looser = admit(&norm, &AdmissionConfig::with_tau(tau / 2.0, b_max));
        prop_assert!(looser.len() >= picked.len());
        prop_assert!(select_adaptive(&raw, &AdmissionConfig::sentinel(b_max)).unwrap().is_empty());
    }

    #[test]
    fn labels_follow_the_affine_map(delta in -1.0f64..=1.0) {
        let y = label_from_delta(delta);
        prop_assert!((y - (delta + 1.0) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn split_partitions_tasks_by_family() {
    let w = world();
    let cfg = ExperimentConfig::default();
    let split = split_tasks(&w.tasks, cfg.split);
    let mut all: Vec<&str> = split.train.iter().chain(&split.dev).chain(&split.test).map(|t| t.id.as_str()).collect();
    all.sort();
    let mut want: Vec<&str> = w.tasks.iter().map(|t| t.id.as_str()).collect();
    want.sort();
    assert_eq!(all, want);
    assert!(!split.train.is_empty() && !split.dev.is_empty() && !split.test.is_empty());
}

#[test]
fn oracle_delta_of_every_pair_is_bounded() {
    let w = world();
    for t in &w.tasks {
        for s in &w.library.skills {
            let d = oracle_delta(w, t, s).unwrap();
            assert!((-1.0..=1.0).contains(&d));
        }
    }
}
