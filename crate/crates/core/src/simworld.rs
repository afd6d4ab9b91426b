//! Seeded generative world standing in for a frozen agent and its
//! environment.
//!
//! Success probability of a task under an injected context is additive:
//!
//! ```text
//! p = clamp(base + Σ gain(t,s) − κ·max(0, |C|−1)^α
//!           − Σ_{same-group pairs} ω·(1 − η·covered(pair)), 0, 1)
//! ```
//!
//! where `covered` is 1 when both rendered descriptions name each other in
//! their scope clauses. Expected messages follow the same shape:
//! `base_messages + Σ message_cost + chatter·Σ_{same-group pairs}(1 − η·covered)`.
//!
//! Rewards use common random numbers: the uniform deciding success for
//! `(task, seed)` does not depend on the context, so with/without-skill
//! comparisons at one seed are paired.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    context_hash, read_json, write_json, Rng, RolloutRecord, SimEffect, Skill, Task, UtilityLabel,
};
use crate::embed::{cosine, embed, EmbedderConfig, Embedding};
use crate::error::{Error, Result};
use crate::librarian::{canonical_body, SkillLibrary};
use crate::renderer::{build_context, RenderedContext};
use crate::stats::{mean, sample_std};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_tasks: usize,
    pub n_skills: usize,
    /// Topic families; each doubles as an overlap group.
    pub n_topics: usize,
    pub dispersion_kappa: f64,
    pub dispersion_alpha: f64,
    pub overlap_omega: f64,
    pub render_eta: f64,
    pub frac_harmful: f64,
    pub message_noise: f64,
    /// Extra messages per uncovered same-group pair.
    pub chatter_omega: f64,
    /// Scale of a skill's benefit on tasks of the adjacent topic.
    pub related_affinity: f64,
    /// Fraction of tasks that can use many skills.
    pub frac_high_demand: f64,
    /// Gain ranges of core references, helpers and distractors (magnitude).
    pub core_gain: [f64; 2],
    pub helper_gain: [f64; 2],
    pub harmful_gain: [f64; 2],
    /// Helper gain multipliers for low- and high-demand tasks.
    pub demand_levels: [f64; 2],
    /// Skill wording is redrawn while its cosine to an earlier skill reaches
    /// this value, so the library survives clustering intact.
    pub max_text_similarity: f64,
    pub domain: String,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_tasks: 20,
            n_skills: 40,
            n_topics: 4,
            dispersion_kappa: 0.012,
            dispersion_alpha: 1.3,
            overlap_omega: 0.02,
            render_eta: 0.8,
            frac_harmful: 0.15,
            message_noise: 2.0,
            chatter_omega: 1.5,
            related_affinity: 0.6,
            frac_high_demand: 0.5,
            core_gain: [0.35, 0.55],
            helper_gain: [0.25, 0.45],
            harmful_gain: [0.10, 0.25],
            demand_levels: [0.6, 1.4],
            max_text_similarity: 0.78,
            domain: "airline".to_string(),
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 1 || self.n_skills < 1 {
            return Err(Error::invalid("world needs at least one task and one skill"));
        }
        if self.n_topics < 1 || self.n_topics > TOPICS.len() {
            return Err(Error::invalid(format!(
                "n_topics must lie in 1..={}",
                TOPICS.len()
            )));
        }
        let nonneg = [
            ("dispersion_kappa", self.dispersion_kappa),
            ("overlap_omega", self.overlap_omega),
            ("message_noise", self.message_noise),
            ("chatter_omega", self.chatter_omega),
            ("related_affinity", self.related_affinity),
        ];
        if let Some((name, _)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::invalid(format!("{name} must be nonnegative")));
        }
        if !(self.dispersion_alpha >= 1.0) {
            return Err(Error::invalid("dispersion_alpha must be at least 1"));
        }
        for (name, v) in [
            ("render_eta", self.render_eta),
            ("frac_harmful", self.frac_harmful),
            ("frac_high_demand", self.frac_high_demand),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0,1]")));
            }
        }
        for (name, [lo, hi]) in [
            ("core_gain", self.core_gain),
            ("helper_gain", self.helper_gain),
            ("harmful_gain", self.harmful_gain),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!("{name} must be an ordered range in [0,1]")));
            }
        }
        if !(self.max_text_similarity > 0.0 && self.max_text_similarity <= 1.0) {
            return Err(Error::invalid("max_text_similarity must lie in (0,1]"));
        }
        if self.demand_levels.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::invalid("demand_levels must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub tasks: Vec<Task>,
    pub library: SkillLibrary,
    pub config: WorldConfig,
    skill_index: HashMap<String, usize>,
    task_index: HashMap<String, usize>,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks && self.library == other.library && self.config == other.config
    }
}

impl World {
    pub fn new(tasks: Vec<Task>, library: SkillLibrary, config: WorldConfig) -> Result<Self> {
        library.validate()?;
        let task_index: HashMap<String, usize> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
        if task_index.len() != tasks.len() {
            return Err(Error::invalid("duplicate task ids"));
        }
        for t in &tasks {
            t.validate()?;
        }
        for s in &library.skills {
            if let Some(e) = &s.effect {
                if let Some(missing) = e.per_task_gain.keys().find(|k| !task_index.contains_key(*k)) {
                    return Err(Error::UnknownTask(missing.clone()));
                }
            }
        }
        let skill_index = library
            .skills
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(World {
            tasks,
            library,
            config,
            skill_index,
            task_index,
        })
    }

    pub fn skill(&self, id: &str) -> Result<&Skill> {
        self.skill_index
            .get(id)
            .map(|&i| &self.library.skills[i])
            .ok_or_else(|| Error::UnknownSkill(id.to_string()))
    }

    pub fn task(&self, id: &str) -> Result<&Task> {
        self.task_index
            .get(id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    /// Same tasks and config, different library (e.g. a pool prefix).
    pub fn with_library(&self, library: SkillLibrary) -> Result<World> {
        World::new(self.tasks.clone(), library, self.config.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut effects: BTreeMap<String, SimEffect> = BTreeMap::new();
        let skills: Vec<Skill> = self
            .library
            .skills
            .iter()
            .map(|s| {
                if let Some(e) = &s.effect {
                    effects.insert(s.id.clone(), e.clone());
                }
                Skill {
                    effect: None,
                    ..s.clone()
                }
            })
            .collect();
        write_json(&dir.join("tasks.json"), &self.tasks)?;
        write_json(&dir.join("library.json"), &skills)?;
        write_json(&dir.join("effects.json"), &effects)?;
        write_json(&dir.join("config.json"), &self.config)
    }

    pub fn load(dir: &Path) -> Result<World> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingArtifact {
                    stage: "generate-world".to_string(),
                    path: p,
                })
            }
        };
        let tasks: Vec<Task> = read_json(&need("tasks.json")?)?;
        let mut skills: Vec<Skill> = read_json(&need("library.json")?)?;
        let effects: BTreeMap<String, SimEffect> = read_json(&need("effects.json")?)?;
        let config: WorldConfig = read_json(&need("config.json")?)?;
        for s in &mut skills {
            s.effect = effects.get(&s.id).cloned();
        }
        World::new(tasks, SkillLibrary::new(skills)?, config)
    }

    /// Pass probability and expected messages for a context.
    pub fn evaluate_context(&self, task: &Task, ctx: &RenderedContext) -> Result<ContextEffect> {
        let cfg = &self.config;
        let skills: Vec<&Skill> = ctx
            .entries
            .iter()
            .map(|e| self.skill(&e.skill_id))
            .collect::<Result<_>>()?;
        let gain: f64 = skills.iter().map(|s| s.gain_for(&task.id)).sum();
        let cost: f64 = skills
            .iter()
            .map(|s| s.effect.as_ref().map_or(0.0, |e| e.message_cost))
            .sum();
        let mut uncovered = 0.0;
        for i in 0..skills.len() {
            for j in (i + 1)..skills.len() {
                if same_group(skills[i], skills[j]) {
                    let covered = if ctx.scope_covered(i, j) { 1.0 } else { 0.0 };
                    uncovered += 1.0 - cfg.render_eta * covered;
                }
            }
        }
        let extra = skills.len().saturating_sub(1) as f64;
        let dispersion = cfg.dispersion_kappa * extra.powf(cfg.dispersion_alpha);
        let raw = task.base_pass + gain - dispersion - cfg.overlap_omega * uncovered;
        Ok(ContextEffect {
            pass_probability: raw.clamp(0.0, 1.0),
            expected_messages: task.base_messages + cost + cfg.chatter_omega * uncovered,
        })
    }
}

fn same_group(a: &Skill, b: &Skill) -> bool {
    match (&a.effect, &b.effect) {
        (Some(x), Some(y)) => x.overlap_group == y.overlap_group,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextEffect {
    pub pass_probability: f64,
    pub expected_messages: f64,
}

pub fn pass_probability(world: &World, task: &Task, ctx: &RenderedContext) -> Result<f64> {
    Ok(world.evaluate_context(task, ctx)?.pass_probability)
}

/// Uniform that decides success for `(task, seed)` in every context.
pub fn reward_uniform(task_id: &str, seed: u64) -> f64 {
    Rng::new(seed)
        .derive_stream(&format!("reward:{task_id}"))
        .next_f64()
}

pub fn rollout(world: &World, task: &Task, ctx: &RenderedContext, seed: u64) -> Result<RolloutRecord> {
    let effect = world.evaluate_context(task, ctx)?;
    let ids = ctx.ids();
    let reward = u8::from(reward_uniform(&task.id, seed) < effect.pass_probability);
    let noise = Rng::new(seed)
        .derive_stream(&format!("messages:{}:{}", task.id, context_hash(&ids)))
        .normal()
        * world.config.message_noise;
    let messages = (effect.expected_messages + noise).max(0.0).round() as u64;
    Ok(RolloutRecord {
        task_id: task.id.clone(),
        context_skill_ids: ids,
        seed,
        reward,
        messages,
    })
}

fn singleton(skill: &Skill) -> RenderedContext {
    RenderedContext::passthrough(&[skill])
}

/// Exact Δ(t, s) = p(t, {s}) − p(t, ∅).
pub fn oracle_delta(world: &World, task: &Task, skill: &Skill) -> Result<f64> {
    let with = pass_probability(world, task, &singleton(skill))?;
    let without = pass_probability(world, task, &RenderedContext::default())?;
    Ok(with - without)
}

/// Seeds used for `n` rollouts starting at `seed`.
pub fn rollout_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|r| seed + r).collect()
}

/// Empirical Δ for every (task, skill) pair over `rollouts` paired seeds.
pub fn label_library(world: &World, rollouts_per_config: usize, seed: u64) -> Result<Vec<UtilityLabel>> {
    label_tasks(world, &world.tasks, rollouts_per_config, seed)
}

pub fn label_tasks(
    world: &World,
    tasks: &[Task],
    rollouts_per_config: usize,
    seed: u64,
) -> Result<Vec<UtilityLabel>> {
    if rollouts_per_config < 1 {
        return Err(Error::invalid("rollouts_per_config must be at least 1"));
    }
    let seeds = rollout_seeds(seed, rollouts_per_config);
    let mut out = Vec::with_capacity(tasks.len() * world.library.len());
    let empty = RenderedContext::default();
    for task in tasks {
        let draws: Vec<f64> = seeds.iter().map(|&s| reward_uniform(&task.id, s)).collect();
        let success_rate = |p: f64| draws.iter().filter(|&&u| u < p).count() as f64 / draws.len() as f64;
        let without = success_rate(pass_probability(world, task, &empty)?);
        for skill in &world.library.skills {
            let with = success_rate(pass_probability(world, task, &singleton(skill))?);
            out.push(UtilityLabel::new(&task.id, &skill.id, with - without, rollouts_per_config));
        }
    }
    Ok(out)
}

/// Pass and message statistics of per-task selections over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStats {
    /// Mean pass rate over tasks for each seed, in seed order.
    pub per_seed_pass: Vec<f64>,
    pub mean_pass: f64,
    /// Sample standard deviation of `per_seed_pass`.
    pub std_pass: f64,
    pub mean_messages: f64,
    pub records: Vec<RolloutRecord>,
}

/// Rolls out `selections[i]` on `tasks[i]` for every seed.
pub fn evaluate_selections(
    world: &World,
    tasks: &[Task],
    selections: &[Vec<String>],
    rendered: bool,
    seeds: &[u64],
) -> Result<SelectionStats> {
    if tasks.len() != selections.len() {
        return Err(Error::DimensionMismatch {
            left: tasks.len(),
            right: selections.len(),
        });
    }
    if tasks.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("evaluation needs tasks and seeds"));
    }
    let per_task: Vec<Vec<RolloutRecord>> = tasks
        .par_iter()
        .zip(selections.par_iter())
        .map(|(task, ids)| {
            let skills = ids.iter().map(|id| world.skill(id)).collect::<Result<Vec<_>>>()?;
            let ctx = build_context(task, &skills, rendered);
            seeds.iter().map(|&s| rollout(world, task, &ctx, s)).collect()
        })
        .collect::<Result<_>>()?;
    let per_seed_pass: Vec<f64> = (0..seeds.len())
        .map(|j| mean(&per_task.iter().map(|r| r[j].reward as f64).collect::<Vec<_>>()))
        .collect();
    let records: Vec<RolloutRecord> = per_task.into_iter().flatten().collect();
    let msgs: Vec<f64> = records.iter().map(|r| r.messages as f64).collect();
    Ok(SelectionStats {
        mean_pass: mean(&per_seed_pass),
        std_pass: sample_std(&per_seed_pass),
        mean_messages: mean(&msgs),
        per_seed_pass,
        records,
    })
}

struct Topic {
    key: &'static str,
    requests: &'static [&'static str],
    situations: &'static [&'static str],
    aspects: &'static [&'static str],
    objects: &'static [&'static str],
}

/// Topic vocabulary. With `n_topics = T` the first `T` entries are used and
/// tasks of topic `k` also benefit from skills of topic `(k + 1) mod T`.
const TOPICS: &[Topic] = &[
    Topic {
        key: "cancellation",
        requests: &["cancel my flight", "call off the whole trip", "drop the return leg of my itinerary"],
        situations: &["my plans changed after a family emergency", "the departure is in two days", "the airline moved my departure time"],
        aspects: &["eligibility", "deadline", "reasons", "exceptions", "window", "penalties"],
        objects: &["flight", "segment", "itinerary"],
    },
    Topic {
        key: "refund",
        requests: &["get my money back", "be reimbursed for the fare", "recover the ticket price"],
        situations: &["the refund never reached my card", "I was offered a voucher instead of cash", "only part of the fare was returned"],
        aspects: &["amount", "method", "timeline", "eligibility", "vouchers", "taxes"],
        objects: &["payment", "fare", "voucher"],
    },
    Topic {
        key: "insurance",
        requests: &["claim travel insurance for an illness", "check my weather coverage", "add coverage to my booking"],
        situations: &["a doctor told me not to fly", "a storm grounded my connection", "the insurer asked for more documents"],
        aspects: &["coverage", "claims", "exclusions", "documentation", "premiums", "reasons"],
        objects: &["policy", "coverage", "claim"],
    },
    Topic {
        key: "rebooking",
        requests: &["catch a later flight after a missed connection", "move my trip to next week", "switch to an earlier departure"],
        situations: &["my inbound flight landed late", "the original departure was overbooked", "a schedule change broke my connection"],
        aspects: &["availability", "fare_difference", "connections", "same_day", "waivers", "delays"],
        objects: &["reservation", "ticket", "departure"],
    },
    Topic {
        key: "baggage",
        requests: &["find my lost suitcase", "add two extra bags", "bring an oversized case"],
        situations: &["my bag did not arrive at the carousel", "the check-in desk charged me twice for luggage", "my case was damaged in transit"],
        aspects: &["allowance", "fees", "claims", "dimensions", "delays", "tracking"],
        objects: &["bag", "luggage", "suitcase"],
    },
    Topic {
        key: "seating",
        requests: &["sit next to my partner", "move to an exit row", "pick a window seat"],
        situations: &["we were split across the cabin", "I need extra legroom for a medical reason", "my paid seat was reassigned"],
        aspects: &["assignment", "upgrades", "families", "accessibility", "fees", "cabins"],
        objects: &["seat", "cabin", "row"],
    },
    Topic {
        key: "loyalty",
        requests: &["redeem my frequent flyer miles", "check my status tier", "merge two member accounts"],
        situations: &["my miles from the last trip are missing", "my tier dropped unexpectedly", "a partner airline flight was not credited"],
        aspects: &["miles", "tiers", "redemption", "expiry", "partners", "benefits"],
        objects: &["account", "membership", "points"],
    },
    Topic {
        key: "payment",
        requests: &["fix a double charge on my card", "split the payment", "pay with a gift certificate"],
        situations: &["the bank flagged the charge", "the currency conversion looks wrong", "the certificate code was rejected"],
        aspects: &["methods", "disputes", "currency", "certificates", "receipts", "holds"],
        objects: &["card", "charge", "invoice"],
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SkillKind {
    Core,
    Helper,
    Harmful,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a>(rng: &mut Rng, items: &'a [&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

/// Name suffix and description for a helper skill.
fn helper_text(rng: &mut Rng, key: &str, aspect: &str, object: &str) -> (&'static str, String) {
    let cap = capitalize(key);
    match rng.below(4) {
        0 => ("reference", format!("{cap} {aspect} reference: how {aspect} rules apply to a {key} {object}.")),
        1 => ("notes", format!("{cap} {aspect} notes covering {object} cases and recurring {key} questions.")),
        2 => ("checklist", format!("Checklist for {aspect} when handling a {key} {object}, step by step for {key} cases.")),
        _ => ("guide", format!("{cap} guide to {object} {aspect}, with worked {key} examples.")),
    }
}

fn helper_body(rng: &mut Rng, key: &str, aspect: &str, object: &str) -> String {
    match rng.below(3) {
        0 => format!(
            "1. Look up the {aspect} rules for this {key} case.\n2. Apply them to the {object} in question.\n3. Summarize for the user."
        ),
        1 => format!(
            "- Ask which {object} is affected.\n- Quote the relevant {aspect} clause verbatim.\n- Note any {key} exception before answering."
        ),
        _ => format!(
            "When {aspect} comes up, read the {object} details aloud, compare them with the {key} terms and record the decision."
        ),
    }
}

fn harmful_text(rng: &mut Rng, key: &str, object: &str, request: &str) -> String {
    if rng.bernoulli(0.5) {
        format!("Modify {key} {object} settings: updates the {object} record whenever a user wants to {request} or mentions {key}.")
    } else {
        format!("Direct {object} editor for {key} requests; rewrites fields as soon as someone asks to {request}.")
    }
}

const TEXT_ATTEMPTS: usize = 64;

/// Name stem, description and body for one skill of topic `k`.
fn skill_text(rng: &mut Rng, kind: SkillKind, k: usize) -> (String, String, String) {
    let topic = &TOPICS[k];
    let key = topic.key;
    let aspect = pick(rng, topic.aspects);
    let aspect_words = aspect.replace('_', " ");
    let object = pick(rng, topic.objects);
    match kind {
        SkillKind::Core => (
            format!("{key}_{aspect}_criteria"),
            format!(
                "{} {aspect_words} criteria: the authoritative {key} rules deciding which {key} requests qualify, with the {aspect_words} conditions to verify first.",
                capitalize(key)
            ),
            format!(
                "1. Identify the {key} request.\n2. Check the {aspect_words} conditions against the published {key} rules.\n3. Explain the outcome and the rule that applies."
            ),
        ),
        SkillKind::Helper => {
            let (suffix, description) = helper_text(rng, key, &aspect_words, object);
            let body = helper_body(rng, key, &aspect_words, object);
            (format!("{key}_{aspect}_{suffix}"), description, body)
        }
        SkillKind::Harmful => {
            let request = pick(rng, topic.requests);
            (
                format!("modify_{object}_{key}_policy"),
                harmful_text(rng, key, object, request),
                format!(
                    "1. Open the {object} record.\n2. Apply the requested {key} modification immediately.\n3. Confirm the change."
                ),
            )
        }
    }
}

/// Deterministic world from `cfg`.
///
/// Topics are assigned round-robin to tasks and skills. The first skill of
/// each topic is a core reference with a large gain on its topic's tasks;
/// most other skills are helpers whose gain scales with the task's demand;
/// a `frac_harmful` share are distractors that reuse the topic's request
/// wording but lower success on that topic's tasks. Core skills and helpers
/// also help tasks of the adjacent topic at `related_affinity` scale. All
/// other pairs have zero gain.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let n_topics = cfg.n_topics;

    let mut task_rng = root.derive_stream("tasks");
    let n_high = (cfg.frac_high_demand * cfg.n_tasks as f64).round() as usize;
    let mut high_flags: Vec<bool> = (0..cfg.n_tasks).map(|i| i < n_high).collect();
    task_rng.shuffle(&mut high_flags);

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut task_topic = Vec::with_capacity(cfg.n_tasks);
    let mut demand = Vec::with_capacity(cfg.n_tasks);
    for (i, &high) in high_flags.iter().enumerate() {
        let k = i % n_topics;
        let topic = &TOPICS[k];
        let key = topic.key;
        let request = pick(&mut task_rng, topic.requests);
        let situation = pick(&mut task_rng, topic.situations);
        let aspect = pick(&mut task_rng, topic.aspects).replace('_', " ");
        let detail = if high {
            let second = pick(&mut task_rng, topic.situations);
            format!("Several {key} problems are tangled together: {second}, and the {aspect} is unclear too.")
        } else {
            format!("Only the {key} {aspect} matters here.")
        };
        tasks.push(Task {
            id: format!("{key}:t{i:03}"),
            instruction: format!("{} because {situation}. {detail}", capitalize(&format!("I want to {request}"))),
            domain: cfg.domain.clone(),
            base_pass: task_rng.uniform(0.2, 0.7),
            base_messages: task_rng.uniform(8.0, 20.0),
        });
        task_topic.push(k);
        demand.push(cfg.demand_levels[usize::from(high)]);
    }

    let mut skill_rng = root.derive_stream("skills");
    let mut kinds: Vec<SkillKind> = (0..cfg.n_skills)
        .map(|i| if i < n_topics { SkillKind::Core } else { SkillKind::Helper })
        .collect();
    let n_harmful = ((cfg.frac_harmful * cfg.n_skills as f64).round() as usize)
        .min(cfg.n_skills.saturating_sub(n_topics));
    let mut non_core: Vec<usize> = (n_topics.min(cfg.n_skills)..cfg.n_skills).collect();
    skill_rng.shuffle(&mut non_core);
    for &i in non_core.iter().take(n_harmful) {
        kinds[i] = SkillKind::Harmful;
    }

    let mut gain_rng = root.derive_stream("gains");
    let mut used_names: BTreeMap<String, usize> = BTreeMap::new();
    let mut skills = Vec::with_capacity(cfg.n_skills);
    let text_embedder = EmbedderConfig::default();
    let mut accepted: Vec<Embedding> = Vec::with_capacity(cfg.n_skills);
    let mut bodies: BTreeSet<String> = BTreeSet::new();
    for (i, &kind) in kinds.iter().enumerate() {
        let k = i % n_topics;
        let key = TOPICS[k].key;
        // Redraw wording until the text is far enough from every earlier
        // skill; keep the least similar draw if none qualifies. A repeated
        // body never qualifies, since exact dedup would merge it.
        let mut best: Option<(f64, (String, String, String), Embedding)> = None;
        for _ in 0..TEXT_ATTEMPTS {
            let text = skill_text(&mut skill_rng, kind, k);
            let emb = embed(&format!("{} {} {}", text.0, text.1, text.2), &text_embedder);
            let closest = if bodies.contains(&canonical_body(&text.2)) {
                f64::INFINITY
            } else {
                accepted
                    .iter()
                    .map(|a| cosine(a, &emb).unwrap_or(0.0))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            if best.as_ref().is_none_or(|(c, _, _)| closest < *c) {
                best = Some((closest, text, emb));
            }
            if closest < cfg.max_text_similarity {
                break;
            }
        }
        let (_, (base_name, description, body), emb) = best.expect("at least one text draw");
        accepted.push(emb);
        bodies.insert(canonical_body(&body));
        let (quality, cost) = match kind {
            SkillKind::Core => (
                skill_rng.uniform(cfg.core_gain[0], cfg.core_gain[1]),
                skill_rng.uniform(1.0, 3.0),
            ),
            SkillKind::Helper => (
                skill_rng.uniform(cfg.helper_gain[0], cfg.helper_gain[1]),
                skill_rng.uniform(0.5, 2.5),
            ),
            SkillKind::Harmful => (
                skill_rng.uniform(cfg.harmful_gain[0], cfg.harmful_gain[1]),
                skill_rng.uniform(2.0, 4.0),
            ),
        };
        let n = used_names.entry(base_name.clone()).or_insert(0);
        *n += 1;
        let name = if *n == 1 { base_name } else { format!("{base_name}_{n}") };

        let mut per_task_gain = BTreeMap::new();
        for (t, task) in tasks.iter().enumerate() {
            let tk = task_topic[t];
            let jitter = gain_rng.uniform(0.8, 1.2);
            let same = tk == k;
            let related = (tk + 1) % n_topics == k && n_topics > 1;
            let g = match kind {
                SkillKind::Core if same => quality * jitter,
                SkillKind::Core if related => cfg.related_affinity * quality * jitter,
                SkillKind::Helper if same => quality * demand[t] * jitter,
                SkillKind::Helper if related => cfg.related_affinity * quality * demand[t] * jitter,
                SkillKind::Harmful if same => -quality * jitter,
                _ => 0.0,
            };
            if g != 0.0 {
                per_task_gain.insert(task.id.clone(), g.clamp(-1.0, 1.0));
            }
        }
        // Provenance: tasks where the skill matters most. Distractors trace
        // back to the first task of their topic.
        let peak = per_task_gain.values().cloned().fold(0.0, f64::max);
        let mut sources: Vec<String> = if peak > 0.0 {
            per_task_gain
                .iter()
                .filter(|(_, g)| **g >= 0.5 * peak)
                .map(|(t, _)| t.clone())
                .collect()
        } else {
            task_topic
                .iter()
                .position(|&tk| tk == k)
                .map(|t| vec![tasks[t].id.clone()])
                .unwrap_or_default()
        };
        sources.sort();
        skills.push(Skill {
            id: name.clone(),
            name,
            description,
            body,
            sources,
            effect: Some(SimEffect {
                per_task_gain,
                message_cost: cost,
                overlap_group: key.to_string(),
            }),
        });
    }
    World::new(tasks, SkillLibrary::new(skills)?, cfg.clone())
}
