//! Skill-library construction: exact deduplication on canonical bodies,
//! a cosine threshold ladder with medoid retention, MMR ordering and a
//! token-budget gate that protects a per-family floor.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{sha256_hex, Skill};
use crate::embed::{cosine_unchecked, embed, Embedding, EmbedderConfig};
use crate::error::{Error, Result};

/// Ordered skill collection. Provenance lives in each skill's `sources`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillLibrary {
    pub skills: Vec<Skill>,
}

impl SkillLibrary {
    pub fn new(skills: Vec<Skill>) -> Result<Self> {
        let lib = SkillLibrary { skills };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.skills {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate skill id `{}`", s.id)));
            }
            if let Some(e) = &s.effect {
                e.validate()?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.skills.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.skills
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn provenance(&self) -> BTreeMap<String, Vec<String>> {
        self.skills
            .iter()
            .map(|s| (s.id.clone(), s.sources.clone()))
            .collect()
    }

    /// Sub-library with the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<SkillLibrary> {
        let idx = self.index();
        let skills = ids
            .iter()
            .map(|id| {
                idx.get(id.as_str())
                    .map(|&i| self.skills[i].clone())
                    .ok_or_else(|| Error::UnknownSkill(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SkillLibrary { skills })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterLadderConfig {
    pub thresholds: Vec<f64>,
    pub min_per_group: usize,
    pub token_budget: usize,
    /// Relevance/diversity trade-off for the library-level MMR order.
    pub mmr_lambda: f64,
    /// Weight on `ln(1 + coverage)` in MMR relevance.
    pub coverage_weight: f64,
}

impl Default for ClusterLadderConfig {
    fn default() -> Self {
        ClusterLadderConfig {
            thresholds: vec![0.90, 0.85, 0.80],
            min_per_group: 2,
            token_budget: 24_000,
            mmr_lambda: 0.5,
            coverage_weight: 0.1,
        }
    }
}

impl ClusterLadderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("ladder thresholds must lie in (0, 1]"));
        }
        if self.thresholds.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("ladder thresholds must be strictly descending"));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return Err(Error::invalid("mmr_lambda must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Body with unified line endings, trailing whitespace stripped per line and
/// surrounding blank space removed.
pub fn canonical_body(body: &str) -> String {
    let unified = body.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim().to_string()
}

/// Short (8 hex digit) hash of the canonical body.
pub fn body_sha8(body: &str) -> String {
    sha256_hex(&canonical_body(body))[..8].to_string()
}

fn merge_sources(into: &mut Vec<String>, from: &[String]) {
    for s in from {
        if !into.contains(s) {
            into.push(s.clone());
        }
    }
}

/// Keeps the first skill per canonical body and merges the sources of
/// every duplicate into it.
pub fn dedup_exact(skills: Vec<Skill>) -> SkillLibrary {
    let mut by_hash: HashMap<String, usize> = HashMap::new();
    let mut kept: Vec<Skill> = Vec::new();
    for skill in skills {
        let key = sha256_hex(&canonical_body(&skill.body));
        match by_hash.get(&key) {
            Some(&i) => merge_sources(&mut kept[i].sources, &skill.sources),
            None => {
                by_hash.insert(key, kept.len());
                kept.push(skill);
            }
        }
    }
    SkillLibrary { skills: kept }
}

fn library_embeddings(lib: &SkillLibrary, embedder: &EmbedderConfig) -> Vec<Embedding> {
    lib.skills
        .iter()
        .map(|s| embed(&s.full_text(), embedder))
        .collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-link components of the graph with an edge wherever cosine >= θ.
fn single_link(sims: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = sims.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if sims[i][j] >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Member with the highest mean cosine to the rest of its cluster; ties go
/// to the lexicographically smallest id.
fn medoid(members: &[usize], sims: &[Vec<f64>], lib: &SkillLibrary) -> usize {
    if members.len() == 1 {
        return members[0];
    }
    let mut best = members[0];
    let mut best_score = f64::NEG_INFINITY;
    for &i in members {
        let score = members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| sims[i][j])
            .sum::<f64>()
            / (members.len() - 1) as f64;
        if score > best_score || (score == best_score && lib.skills[i].id < lib.skills[best].id) {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Runs each ladder threshold in turn and replaces every cluster by its
/// medoid, which inherits the sources of the whole cluster.
pub fn cluster_ladder(
    lib: &SkillLibrary,
    cfg: &ClusterLadderConfig,
    embedder: &EmbedderConfig,
) -> Result<SkillLibrary> {
    cfg.validate()?;
    let mut current = lib.clone();
    for &threshold in &cfg.thresholds {
        let embs = library_embeddings(&current, embedder);
        let sims: Vec<Vec<f64>> = embs
            .iter()
            .map(|a| embs.iter().map(|b| cosine_unchecked(a, b)).collect())
            .collect();
        let clusters = single_link(&sims, threshold);
        let mut keep: Vec<(usize, Vec<String>)> = clusters
            .iter()
            .map(|members| {
                let m = medoid(members, &sims, &current);
                let mut sources = current.skills[m].sources.clone();
                for &j in members {
                    merge_sources(&mut sources, &current.skills[j].sources);
                }
                (m, sources)
            })
            .collect();
        keep.sort_by_key(|(m, _)| *m);
        current = SkillLibrary {
            skills: keep
                .into_iter()
                .map(|(m, sources)| {
                    let mut s = current.skills[m].clone();
                    s.sources = sources;
                    s
                })
                .collect(),
        };
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmrParams {
    pub lambda: f64,
    pub coverage_weight: f64,
}

impl MmrParams {
    pub fn new(lambda: f64) -> Self {
        MmrParams {
            lambda,
            coverage_weight: 0.1,
        }
    }
}

/// Greedy maximal-marginal-relevance order with the default coverage weight.
pub fn mmr_rank(
    lib: &SkillLibrary,
    query: &str,
    k: usize,
    lambda: f64,
    embedder: &EmbedderConfig,
) -> Result<Vec<String>> {
    mmr_rank_with(lib, query, k, MmrParams::new(lambda), embedder)
}

/// Relevance is `cosine(query, skill) + w * ln(1 + |sources|)`. The first
/// pick is the most relevant skill; after that each step maximizes
/// `λ·relevance − (1−λ)·max cosine to the picked set`. Ties go to the
/// smaller id.
pub fn mmr_rank_with(
    lib: &SkillLibrary,
    query: &str,
    k: usize,
    params: MmrParams,
    embedder: &EmbedderConfig,
) -> Result<Vec<String>> {
    if k < 1 || k > lib.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} for MMR",
            lib.len()
        )));
    }
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(Error::invalid("MMR lambda must lie in [0, 1]"));
    }
    let q = embed(query, embedder);
    let embs = library_embeddings(lib, embedder);
    let relevance: Vec<f64> = lib
        .skills
        .iter()
        .zip(&embs)
        .map(|(s, e)| {
            cosine_unchecked(&q, e) + params.coverage_weight * (1.0 + s.sources.len() as f64).ln()
        })
        .collect();

    let n = lib.len();
    let mut picked = vec![false; n];
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    let mut order = Vec::with_capacity(k);
    for step in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !picked[i]) {
            let score = if step == 0 {
                relevance[i]
            } else {
                params.lambda * relevance[i] - (1.0 - params.lambda) * max_sim[i]
            };
            best = match best {
                None => Some((i, score)),
                Some((b, bs)) => {
                    if score > bs || (score == bs && lib.skills[i].id < lib.skills[b].id) {
                        Some((i, score))
                    } else {
                        Some((b, bs))
                    }
                }
            };
        }
        let (chosen, _) = best.expect("k <= n leaves a candidate");
        picked[chosen] = true;
        order.push(lib.skills[chosen].id.clone());
        for i in 0..n {
            if !picked[i] {
                max_sim[i] = max_sim[i].max(cosine_unchecked(&embs[i], &embs[chosen]));
            }
        }
    }
    Ok(order)
}

/// Query-free MMR order over the whole library: coverage-weighted relevance
/// traded against redundancy.
pub fn library_rank(
    lib: &SkillLibrary,
    params: MmrParams,
    embedder: &EmbedderConfig,
) -> Result<Vec<String>> {
    if lib.is_empty() {
        return Ok(Vec::new());
    }
    mmr_rank_with(lib, "", lib.len(), params, embedder)
}

/// Text of one skill as it appears in an injected context.
pub fn injection_text(skill: &Skill) -> String {
    format!("{}\n{}\n{}", skill.name, skill.description, skill.body)
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Family of a source task id: the part before the first `:`, or the whole id.
pub fn family_of(source: &str) -> &str {
    source.split(':').next().unwrap_or(source)
}

fn families(skill: &Skill) -> BTreeSet<String> {
    skill
        .sources
        .iter()
        .map(|s| family_of(s).to_string())
        .collect()
}

/// Drops skills from the bottom of the library MMR order until the total
/// token count fits `token_budget`. A skill is never dropped if that would
/// push one of its families below `min_per_group` (or below its original
/// size, when it started smaller).
pub fn budget_gate(
    lib: &SkillLibrary,
    cfg: &ClusterLadderConfig,
    embedder: &EmbedderConfig,
    token_counter: &dyn Fn(&str) -> usize,
) -> Result<SkillLibrary> {
    cfg.validate()?;
    let tokens: HashMap<&str, usize> = lib
        .skills
        .iter()
        .map(|s| (s.id.as_str(), token_counter(&injection_text(s))))
        .collect();
    let mut total: usize = tokens.values().sum();
    if total <= cfg.token_budget {
        return Ok(lib.clone());
    }

    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for s in &lib.skills {
        for f in families(s) {
            *count.entry(f).or_default() += 1;
        }
    }
    let floor: BTreeMap<String, usize> = count
        .iter()
        .map(|(f, c)| (f.clone(), (*c).min(cfg.min_per_group)))
        .collect();

    let floor_tokens = floor.values().sum::<usize>();
    let order = library_rank(
        lib,
        MmrParams {
            lambda: cfg.mmr_lambda,
            coverage_weight: cfg.coverage_weight,
        },
        embedder,
    )?;
    let idx = lib.index();
    let mut dropped: BTreeSet<String> = BTreeSet::new();
    for id in order.iter().rev() {
        if total <= cfg.token_budget {
            break;
        }
        let skill = &lib.skills[idx[id.as_str()]];
        let fams = families(skill);
        if fams.iter().all(|f| count[f] > floor[f]) {
            for f in &fams {
                *count.get_mut(f).unwrap() -= 1;
            }
            total -= tokens[id.as_str()];
            dropped.insert(id.clone());
        }
    }
    if total > cfg.token_budget {
        return Err(Error::Infeasible(format!(
            "{total} tokens remain above the budget of {} with {} families held at a floor of {} \
             skills ({floor_tokens} protected skills)",
            cfg.token_budget,
            floor.len(),
            cfg.min_per_group
        )));
    }
    Ok(SkillLibrary {
        skills: lib
            .skills
            .iter()
            .filter(|s| !dropped.contains(&s.id))
            .cloned()
            .collect(),
    })
}

/// Dedup, ladder clustering and budget gate in sequence.
pub fn build_library(
    raw: Vec<Skill>,
    cfg: &ClusterLadderConfig,
    embedder: &EmbedderConfig,
    token_counter: &dyn Fn(&str) -> usize,
) -> Result<SkillLibrary> {
    let deduped = dedup_exact(raw);
    let clustered = cluster_ladder(&deduped, cfg, embedder)?;
    budget_gate(&clustered, cfg, embedder, token_counter)
}
