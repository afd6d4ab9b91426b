//! Set-aware description rendering.
//!
//! A selected set of two or more skills has each description rewritten with
//! knowledge of its co-injected neighbors; bodies always pass through
//! untouched. Singleton and empty selections bypass the renderer.
//!
//! Renderers communicate scope through a trailing `Not for: a, b` line.
//! [`render`] parses that line back into `scope_targets`, keeping only names
//! of co-injected neighbors, so any student implementation (rule-based here,
//! a neural one trained on the exported pairs elsewhere) plugs in unchanged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Rng, RolloutRecord, Skill, Task};
use crate::error::{Error, Result};

pub const SCOPE_PREFIX: &str = "Not for:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedEntry {
    pub skill_id: String,
    pub name: String,
    pub rendered_description: String,
    pub body: String,
    pub scope_targets: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderedContext {
    pub entries: Vec<RenderedEntry>,
    pub rendered: bool,
}

impl RenderedContext {
    /// Descriptions verbatim, no scope clauses.
    pub fn passthrough(skills: &[&Skill]) -> Self {
        RenderedContext {
            entries: skills
                .iter()
                .map(|s| RenderedEntry {
                    skill_id: s.id.clone(),
                    name: s.name.clone(),
                    rendered_description: s.description.clone(),
                    body: s.body.clone(),
                    scope_targets: Vec::new(),
                })
                .collect(),
            rendered: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.skill_id.clone()).collect()
    }

    /// True iff both entries name each other in their scope clauses.
    pub fn scope_covered(&self, a: usize, b: usize) -> bool {
        let (ea, eb) = (&self.entries[a], &self.entries[b]);
        ea.scope_targets.contains(&eb.skill_id) && eb.scope_targets.contains(&ea.skill_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub name: String,
    pub description: String,
}

impl From<&Skill> for Neighbor {
    fn from(s: &Skill) -> Self {
        Neighbor {
            id: s.id.clone(),
            name: s.name.clone(),
            description: s.description.clone(),
        }
    }
}

/// What a renderer reads for one target skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderInput {
    pub task: String,
    pub skill_id: String,
    pub skill_name: String,
    pub d0: String,
    pub neighbors: Vec<Neighbor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

/// One supervised example: the student learns to emit `d2` from `input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPair {
    #[serde(flatten)]
    pub input: RenderInput,
    pub d2: String,
    pub trace_rich: bool,
}

impl RenderPair {
    pub fn new(input: RenderInput, d2: String) -> Self {
        let trace_rich = input.trace.is_some();
        RenderPair {
            input,
            d2,
            trace_rich,
        }
    }

    pub fn trace_free(&self) -> RenderPair {
        let mut input = self.input.clone();
        input.trace = None;
        RenderPair::new(input, self.d2.clone())
    }
}

pub trait RendererImpl {
    fn rewrite(&self, input: &RenderInput) -> String;
}

const STOPWORDS: &[&str] = &[
    "about", "after", "agent", "all", "and", "any", "are", "before", "but", "can", "for", "from",
    "has", "have", "how", "into", "its", "not", "only", "that", "the", "their", "them", "then",
    "there", "these", "this", "use", "used", "user", "when", "which", "while", "with", "skill",
    "skills", "you", "your", "what", "where", "does", "should", "must", "will", "each", "other",
    "was", "were", "been", "being", "than", "also", "such", "customer",
];

/// Lowercased word tokens of length >= 3 that are not stopwords; `_` and
/// punctuation split words.
pub fn keywords(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// The `k` most frequent keywords, ties broken alphabetically.
pub fn dominant_keywords(text: &str, k: usize) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in keywords(text) {
        *counts.entry(w).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(w, _)| w).collect()
}

/// Names of neighbors whose description shares a dominant keyword of `d0`,
/// sorted.
pub fn overlapping_neighbors(d0: &str, neighbors: &[Neighbor], top_k: usize) -> Vec<String> {
    let dominant = dominant_keywords(d0, top_k);
    let mut names: Vec<String> = neighbors
        .iter()
        .filter(|n| {
            let theirs: BTreeSet<String> = keywords(&n.description).into_iter().collect();
            dominant.iter().any(|w| theirs.contains(w))
        })
        .map(|n| n.name.clone())
        .collect();
    names.sort();
    names.dedup();
    names
}

pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Names listed on the last `Not for:` line of a rendered description.
pub fn parse_scope_clause(rendered: &str) -> Vec<String> {
    rendered
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix(SCOPE_PREFIX))
        .map(|rest| {
            rest.split(',')
                .map(|n| n.trim().trim_end_matches('.').to_string())
                .filter(|n| !n.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

/// Deterministic stand-in for a distilled student renderer.
///
/// Output is `"<name>: <d0 with normalized spacing>"`, followed by a
/// `Not for:` line naming every neighbor whose description contains one of
/// the `top_k` dominant keywords of `d0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStudent {
    pub top_k: usize,
}

impl Default for RuleStudent {
    fn default() -> Self {
        RuleStudent { top_k: 3 }
    }
}

impl RendererImpl for RuleStudent {
    fn rewrite(&self, input: &RenderInput) -> String {
        let mut out = format!("{}: {}", input.skill_name, normalize_ws(&input.d0));
        let names = overlapping_neighbors(&input.d0, &input.neighbors, self.top_k);
        if !names.is_empty() {
            out.push('\n');
            out.push_str(SCOPE_PREFIX);
            out.push(' ');
            out.push_str(&names.join(", "));
        }
        out
    }
}

/// Renders `selected` for `task`. With at most one skill the descriptions
/// pass through verbatim and `rendered` stays false.
pub fn render(task: &Task, selected: &[&Skill], student: &dyn RendererImpl) -> RenderedContext {
    if selected.len() <= 1 {
        return RenderedContext::passthrough(selected);
    }
    let entries = selected
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let neighbors: Vec<Neighbor> = selected
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, n)| Neighbor::from(*n))
                .collect();
            let input = RenderInput {
                task: task.instruction.clone(),
                skill_id: s.id.clone(),
                skill_name: s.name.clone(),
                d0: s.description.clone(),
                neighbors,
                trace: None,
            };
            let rendered_description = student.rewrite(&input);
            let mut scope_targets = Vec::new();
            for name in parse_scope_clause(&rendered_description) {
                if let Some(n) = input.neighbors.iter().find(|n| n.name == name) {
                    if n.id != s.id && !scope_targets.contains(&n.id) {
                        scope_targets.push(n.id.clone());
                    }
                }
            }
            RenderedEntry {
                skill_id: s.id.clone(),
                name: s.name.clone(),
                rendered_description,
                body: s.body.clone(),
                scope_targets,
            }
        })
        .collect();
    RenderedContext {
        entries,
        rendered: true,
    }
}

/// Injected context for `task`: rendered by the rule student when `rendered`
/// is set, verbatim otherwise.
pub fn build_context(task: &Task, selected: &[&Skill], rendered: bool) -> RenderedContext {
    if rendered {
        render(task, selected, &RuleStudent::default())
    } else {
        RenderedContext::passthrough(selected)
    }
}

/// Two-stage description rewriter used to produce supervision targets.
pub trait TextTransformer {
    /// Task-agnostic cleanup of the original description.
    fn cleanup(&self, d0: &str) -> std::result::Result<String, String>;

    /// Set-aware adaptation of the cleaned description.
    fn adapt(
        &self,
        d1: &str,
        task: &Task,
        skill: &Skill,
        neighbors: &[Neighbor],
        trace: Option<&str>,
    ) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTeacher;

impl TextTransformer for IdentityTeacher {
    fn cleanup(&self, d0: &str) -> std::result::Result<String, String> {
        Ok(d0.to_string())
    }

    fn adapt(
        &self,
        d1: &str,
        _: &Task,
        _: &Skill,
        _: &[Neighbor],
        _: Option<&str>,
    ) -> std::result::Result<String, String> {
        Ok(d1.to_string())
    }
}

/// Rule-based teacher: whitespace and casing cleanup behind an imperative
/// header, then scope clauses naming overlapping neighbors, plus a gate line
/// derived from the trace summary when one is supplied.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceTeacher {
    pub top_k: usize,
}

impl Default for ReferenceTeacher {
    fn default() -> Self {
        ReferenceTeacher { top_k: 3 }
    }
}

fn sentence_case(text: &str) -> String {
    let text = normalize_ws(text);
    let mut chars = text.chars();
    let mut out: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    if !out.is_empty() && !out.ends_with('.') {
        out.push('.');
    }
    out
}

fn trace_field<'a>(trace: &'a str, key: &str) -> Option<&'a str> {
    trace
        .split(", ")
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

impl TextTransformer for ReferenceTeacher {
    fn cleanup(&self, d0: &str) -> std::result::Result<String, String> {
        if d0.trim().is_empty() {
            return Err("empty description".to_string());
        }
        Ok(format!("Use this skill to apply: {}", sentence_case(d0)))
    }

    fn adapt(
        &self,
        d1: &str,
        task: &Task,
        skill: &Skill,
        neighbors: &[Neighbor],
        trace: Option<&str>,
    ) -> std::result::Result<String, String> {
        let mut out = d1.to_string();
        if let Some(trace) = trace {
            let steps = trace_field(trace, "steps").unwrap_or("?");
            match trace_field(trace, "reward") {
                Some("0") => out.push_str(&format!(
                    "\nDo NOT call if the request is outside {}; a run that relied on it failed after {steps} steps.",
                    skill.name
                )),
                Some(_) => out.push_str(&format!(
                    "\nCall once the request matches: {}.",
                    dominant_keywords(&task.instruction, 3).join(", ")
                )),
                None => return Err(format!("unparseable trace summary `{trace}`")),
            }
        }
        let names = overlapping_neighbors(&skill.description, neighbors, self.top_k);
        if !names.is_empty() {
            out.push('\n');
            out.push_str(SCOPE_PREFIX);
            out.push(' ');
            out.push_str(&names.join(", "));
        }
        Ok(out)
    }
}

/// Cleanup then set-aware adaptation. Returns `(D1, D2)`.
pub fn teacher_pipeline(
    task: &Task,
    skill: &Skill,
    neighbors: &[&Skill],
    trace: Option<&RolloutRecord>,
    teacher: &dyn TextTransformer,
) -> Result<(String, String)> {
    let d1 = teacher
        .cleanup(&skill.description)
        .map_err(|e| Error::invalid(format!("teacher cleanup failed for {}: {e}", skill.id)))?;
    let ns: Vec<Neighbor> = neighbors.iter().map(|n| Neighbor::from(*n)).collect();
    let summary = trace.map(RolloutRecord::trace_summary);
    let d2 = teacher
        .adapt(&d1, task, skill, &ns, summary.as_deref())
        .map_err(|e| Error::invalid(format!("teacher adaptation failed for {}: {e}", skill.id)))?;
    Ok((d1, d2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub rho: Vec<f64>,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            rho: vec![0.1, 0.9],
            seed: 0,
        }
    }
}

/// Per-epoch mixes of trace-rich pairs and their trace-free counterparts.
/// In epoch `k` every pair is independently swapped for its trace-free
/// variant with probability `rho[k]`, drawn from a stream keyed by epoch and
/// pair index.
pub fn build_curriculum(
    pairs: &[RenderPair],
    cfg: &CurriculumConfig,
) -> Result<Vec<Vec<RenderPair>>> {
    if let Some(r) = cfg.rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid(format!("curriculum probability {r} outside [0,1]")));
    }
    if let Some(p) = pairs.iter().find(|p| !p.trace_rich) {
        return Err(Error::invalid(format!(
            "pair for {} has no trace-rich variant",
            p.input.skill_id
        )));
    }
    let root = Rng::new(cfg.seed);
    Ok(cfg
        .rho
        .iter()
        .enumerate()
        .map(|(epoch, &rho)| {
            pairs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = root.derive_stream(&format!("curriculum:{epoch}:{i}"));
                    if rng.bernoulli(rho) {
                        p.trace_free()
                    } else {
                        p.clone()
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task {
            id: "t47".into(),
            instruction: "Cancel my flight, it clashes with a birthday".into(),
            domain: "airline".into(),
            base_pass: 0.6,
            base_messages: 10.0,
        }
    }

    fn sk(id: &str, desc: &str) -> Skill {
        Skill::new(id, id, desc, format!("body of {id}\r\n  keep  spacing "))
    }

    #[test]
    fn singleton_bypasses() {
        let s = sk("only", "  Odd   spacing kept  ");
        let ctx = render(&task(), &[&s], &RuleStudent::default());
        assert!(!ctx.rendered);
        assert_eq!(ctx.entries[0].rendered_description, s.description);
        assert_eq!(ctx.entries[0].body, s.body);
        assert!(render(&task(), &[], &RuleStudent::default()).is_empty());
    }

    #[test]
    fn scope_names_overlapping_neighbors_sorted() {
        let target = sk("a", "refund window rules for refund requests");
        let input = RenderInput {
            task: "t".into(),
            skill_id: "a".into(),
            skill_name: "a".into(),
            d0: target.description.clone(),
            neighbors: vec![
                Neighbor::from(&sk("zeta_refund", "refund amounts by fare class")),
                Neighbor::from(&sk("alpha_refund", "when a refund is issued")),
                Neighbor::from(&sk("bags", "checked baggage fees")),
            ],
            trace: None,
        };
        let out = RuleStudent::default().rewrite(&input);
        assert_eq!(
            out,
            "a: refund window rules for refund requests\nNot for: alpha_refund, zeta_refund"
        );
        assert_eq!(parse_scope_clause(&out), vec!["alpha_refund", "zeta_refund"]);
    }

    #[test]
    fn no_overlap_gives_header_only() {
        let input = RenderInput {
            task: "t".into(),
            skill_id: "a".into(),
            skill_name: "a".into(),
            d0: "seat  upgrade rules".into(),
            neighbors: vec![Neighbor::from(&sk("bags", "checked baggage fees"))],
            trace: None,
        };
        let student = RuleStudent::default();
        let out = student.rewrite(&input);
        assert_eq!(out, "a: seat upgrade rules");
        assert_eq!(out, student.rewrite(&input));
    }

    #[test]
    fn render_keeps_bodies_and_scopes_are_sound() {
        let skills = vec![
            sk("r1", "refund policy reference for refund eligibility"),
            sk("r2", "refund eligibility for cancelled flights"),
            sk("bags", "baggage allowance"),
        ];
        let refs: Vec<&Skill> = skills.iter().collect();
        let ctx = render(&task(), &refs, &RuleStudent::default());
        assert!(ctx.rendered);
        for (e, s) in ctx.entries.iter().zip(&skills) {
            assert_eq!(e.body, s.body);
            assert!(!e.scope_targets.contains(&e.skill_id));
            assert!(e.scope_targets.iter().all(|t| skills.iter().any(|s| &s.id == t)));
        }
        assert!(ctx.scope_covered(0, 1));
        assert!(!ctx.scope_covered(0, 2));
    }

    #[test]
    fn identity_teacher_is_degenerate_pipeline() {
        let s = sk("a", "refund rules");
        let (d1, d2) = teacher_pipeline(&task(), &s, &[], None, &IdentityTeacher).unwrap();
        assert_eq!(d1, s.description);
        assert_eq!(d2, s.description);
    }

    #[test]
    fn reference_teacher_handles_optional_trace() {
        let s = sk("a", "refund rules for refund requests");
        let n = sk("b", "refund amounts");
        let (_, without) =
            teacher_pipeline(&task(), &s, &[&n], None, &ReferenceTeacher::default()).unwrap();
        assert!(without.contains("Not for: b"));
        let trace = RolloutRecord {
            task_id: "t47".into(),
            context_skill_ids: vec!["a".into()],
            seed: 300,
            reward: 0,
            messages: 14,
        };
        let (_, with) =
            teacher_pipeline(&task(), &s, &[&n], Some(&trace), &ReferenceTeacher::default())
                .unwrap();
        assert!(with.contains("14 steps"));
        assert!(with.ends_with("Not for: b"));
    }

    #[test]
    fn teacher_failure_surfaces() {
        let s = sk("a", "   ");
        assert!(teacher_pipeline(&task(), &s, &[], None, &ReferenceTeacher::default()).is_err());
    }

    fn pairs(n: usize) -> Vec<RenderPair> {
        (0..n)
            .map(|i| {
                RenderPair::new(
                    RenderInput {
                        task: "t".into(),
                        skill_id: format!("s{i}"),
                        skill_name: format!("s{i}"),
                        d0: "d".into(),
                        neighbors: vec![],
                        trace: Some("steps=3, reward=1, skills=s".into()),
                    },
                    "d2".into(),
                )
            })
            .collect()
    }

    #[test]
    fn curriculum_degenerate_rates() {
        let p = pairs(50);
        let rich = build_curriculum(&p, &CurriculumConfig { rho: vec![0.0, 0.0], seed: 1 }).unwrap();
        assert!(rich.iter().flatten().all(|p| p.trace_rich && p.input.trace.is_some()));
        let free = build_curriculum(&p, &CurriculumConfig { rho: vec![1.0, 1.0], seed: 1 }).unwrap();
        assert!(free.iter().flatten().all(|p| !p.trace_rich && p.input.trace.is_none()));
        assert!(free.iter().flatten().all(|p| p.d2 == "d2"));
    }

    #[test]
    fn curriculum_rejects_trace_free_input() {
        let p = vec![pairs(1)[0].trace_free()];
        assert!(build_curriculum(&p, &CurriculumConfig::default()).is_err());
    }

    #[test]
    fn curriculum_fractions_concentrate() {
        let n = 10_000;
        let epochs = build_curriculum(&pairs(n), &CurriculumConfig::default()).unwrap();
        for (epoch, rho) in epochs.iter().zip([0.1, 0.9]) {
            let frac = epoch.iter().filter(|p| !p.trace_rich).count() as f64 / n as f64;
            let sd = (rho * (1.0 - rho) / n as f64).sqrt();
            assert!((frac - rho).abs() <= 3.0 * sd, "{frac} vs {rho}");
        }
    }
}
